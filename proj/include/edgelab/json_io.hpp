#pragma once

#include <json.hpp>

#include "edgelab/model.hpp"
#include "edgelab/quant_tensor.hpp"

namespace edgelab {

using Json = nlohmann::json;

Json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const Json& j);

Json to_json(const QuantSpec& s);
QuantSpec quant_spec_from_json(const Json& j);

Json to_json(const SparsitySpec& s);
SparsitySpec sparsity_spec_from_json(const Json& j);

}  // namespace edgelab
