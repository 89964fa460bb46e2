#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "edgelab/json_io.hpp"
#include "edgelab/model.hpp"

namespace edgelab {

namespace {

constexpr std::array<char, 8> kMagic = {'E', 'D', 'G', 'E', 'L', 'A', 'B', '\0'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "model manifests are little-endian; big-endian hosts need byte swapping");

template <typename T>
Json append_blob(std::vector<std::uint8_t>& blob, const std::vector<T>& v) {
  const std::size_t off = blob.size();
  const std::size_t nbytes = v.size() * sizeof(T);
  blob.resize(off + nbytes);
  if (nbytes) std::memcpy(blob.data() + off, v.data(), nbytes);
  return Json{{"offset", off}, {"nbytes", nbytes}};
}

template <typename T>
std::vector<T> read_blob(const std::vector<std::uint8_t>& blob, const Json& ref) {
  const auto off = ref.at("offset").get<std::size_t>();
  const auto nbytes = ref.at("nbytes").get<std::size_t>();
  if (off + nbytes > blob.size() || nbytes % sizeof(T) != 0) {
    throw FormatError("manifest blob reference out of bounds");
  }
  std::vector<T> out(nbytes / sizeof(T));
  if (nbytes) std::memcpy(out.data(), blob.data() + off, nbytes);
  return out;
}

}  // namespace

Json to_json(const ModelConfig& c) {
  return Json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
              {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
              {"n_kv_heads", c.n_kv_heads}, {"head_dim", c.head_dim},
              {"ffn_mult", c.ffn_mult},     {"rope_theta", c.rope_theta},
              {"tie_embeddings", c.tie_embeddings}, {"max_seq", c.max_seq}};
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.n_kv_heads = j.value("n_kv_heads", c.n_kv_heads);
  c.head_dim = j.value("head_dim", c.d_model / c.n_heads);
  c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
  c.rope_theta = j.value("rope_theta", c.rope_theta);
  c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
  c.max_seq = j.value("max_seq", c.max_seq);
  c.validate();
  return c;
}

Json to_json(const QuantSpec& s) {
  Json g;
  switch (s.granularity.kind) {
    case Granularity::Kind::PerTensor: g = {{"kind", "per_tensor"}}; break;
    case Granularity::Kind::PerRow: g = {{"kind", "per_row"}}; break;
    case Granularity::Kind::PerGroup:
      g = {{"kind", "per_group"}, {"group", s.granularity.group}};
      break;
  }
  return Json{{"bits", s.bits},
              {"scheme", to_string(s.scheme)},
              {"granularity", g},
              {"scale_bits", s.scale_bits},
              {"zero_point_bits", s.zero_point_bits},
              {"strict_groups", s.strict_groups}};
}

QuantSpec quant_spec_from_json(const Json& j) {
  QuantSpec s;
  s.bits = j.value("bits", s.bits);
  s.scheme = scheme_from_string(j.value("scheme", std::string("symmetric")));
  if (j.contains("granularity")) {
    const Json& g = j.at("granularity");
    const auto kind = g.is_string() ? g.get<std::string>() : g.at("kind").get<std::string>();
    if (kind == "per_tensor") {
      s.granularity = Granularity::per_tensor();
    } else if (kind == "per_row") {
      s.granularity = Granularity::per_row();
    } else if (kind == "per_group") {
      s.granularity = Granularity::per_group(g.is_object() ? g.value("group", 128) : 128);
    } else {
      throw ConfigError("unknown granularity '" + kind + "'");
    }
  }
  s.scale_bits = j.value("scale_bits", s.scale_bits);
  s.zero_point_bits = j.value("zero_point_bits", s.zero_point_bits);
  s.strict_groups = j.value("strict_groups", s.strict_groups);
  s.validate();
  return s;
}

Json to_json(const SparsitySpec& s) {
  if (s.kind == SparsitySpec::Kind::Unstructured) {
    return Json{{"kind", "unstructured"}, {"keep_ratio", s.keep_ratio}};
  }
  return Json{{"kind", "structured"}, {"n", s.n}, {"m", s.m}};
}

SparsitySpec sparsity_spec_from_json(const Json& j) {
  const auto kind = j.at("kind").get<std::string>();
  SparsitySpec s;
  if (kind == "unstructured") {
    s = SparsitySpec::unstructured(j.at("keep_ratio").get<double>());
  } else if (kind == "structured") {
    s = SparsitySpec::structured(j.at("n").get<std::size_t>(), j.at("m").get<std::size_t>());
  } else {
    throw ConfigError("unknown sparsity kind '" + kind + "'");
  }
  s.validate();
  return s;
}

void save_model(const TinyLM& model, const std::string& path) {
  std::vector<std::uint8_t> blob;
  Json slots = Json::array();
  for (std::size_t i = 0; i < model.slot_names().size(); ++i) {
    const Weight& w = model.weight(i);
    Json s{{"name", model.slot_names()[i]}, {"shape", {w.dense.rows, w.dense.cols}}};
    if (w.quant) {
      const QuantTensor& q = *w.quant;
      s["dtype"] = "quant";
      s["spec"] = to_json(q.spec());
      s["frozen"] = q.frozen();
      s["codes"] = append_blob(blob, pack_codes(q));
      s["scales"] = append_blob(blob, q.scales());
      s["zero_points"] = append_blob(blob, q.zero_points());
      if (q.mask()) {
        s["mask"] = append_blob(blob, pack_mask(*q.mask()));
        s["mask"]["mask_bits"] = q.mask_bits();
      }
    } else {
      s["dtype"] = "f32";
      s["data"] = append_blob(blob, w.dense.data);
    }
    slots.push_back(std::move(s));
  }
  const Json header{{"format", "edgelab-model"},
                    {"version", kVersion},
                    {"config", to_json(model.config())},
                    {"slots", slots}};
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out.write(kMagic.data(), kMagic.size());
  const std::uint32_t version = kVersion, reserved = 0;
  const std::uint64_t header_len = text.size();
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&reserved), 4);
  out.write(reinterpret_cast<const char*>(&header_len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  if (!out) throw FormatError("write failed for '" + path + "'");
}

TinyLM load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (magic != kMagic) throw FormatError("'" + path + "' is not an edgelab model");
  std::uint32_t version = 0, reserved = 0;
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&reserved), 4);
  in.read(reinterpret_cast<char*>(&header_len), 8);
  if (version != kVersion) throw FormatError("unsupported model version");
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (!in.eof() && in.fail()) throw FormatError("truncated model file");

  const Json header = Json::parse(text);
  const ModelConfig config = model_config_from_json(header.at("config"));
  std::vector<std::string> names;
  std::vector<Weight> weights;
  for (const Json& s : header.at("slots")) {
    names.push_back(s.at("name").get<std::string>());
    const auto rows = s.at("shape")[0].get<std::size_t>();
    const auto cols = s.at("shape")[1].get<std::size_t>();
    Weight w;
    if (s.at("dtype") == "quant") {
      const QuantSpec spec = quant_spec_from_json(s.at("spec"));
      std::optional<std::vector<std::uint8_t>> mask;
      std::uint64_t mask_bits = 0;
      if (s.contains("mask")) {
        mask = unpack_mask(read_blob<std::uint8_t>(blob, s.at("mask")), rows * cols);
        mask_bits = s.at("mask").at("mask_bits").get<std::uint64_t>();
      }
      w.quant = unpack_quant(rows, cols, spec, read_blob<std::uint8_t>(blob, s.at("codes")),
                             read_blob<float>(blob, s.at("scales")),
                             read_blob<std::int32_t>(blob, s.at("zero_points")),
                             std::move(mask), mask_bits, s.value("frozen", false));
      w.dense = dequantize(*w.quant);
    } else {
      w.dense = Matrix(rows, cols);
      w.dense.data = read_blob<float>(blob, s.at("data"));
      if (w.dense.data.size() != rows * cols) throw FormatError("slot data size mismatch");
    }
    weights.push_back(std::move(w));
  }
  return TinyLM(config, std::move(names), std::move(weights));
}

}  // namespace edgelab
