#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "edgelab/common.hpp"

namespace edgelab {

enum class QuantScheme { Symmetric, Asymmetric };

struct Granularity {
  enum class Kind { PerTensor, PerRow, PerGroup };
  Kind kind = Kind::PerRow;
  std::size_t group = 128;

  static Granularity per_tensor() { return {Kind::PerTensor, 0}; }
  static Granularity per_row() { return {Kind::PerRow, 0}; }
  static Granularity per_group(std::size_t g) { return {Kind::PerGroup, g}; }

  friend bool operator==(const Granularity&, const Granularity&) = default;
};

struct QuantSpec {
  int bits = 8;  // one of {2, 3, 4, 8}
  QuantScheme scheme = QuantScheme::Symmetric;
  Granularity granularity = Granularity::per_row();
  int scale_bits = 16;
  int zero_point_bits = 16;  // counted only for asymmetric
  // Per-group with g > row length: error when strict, else clamp g to the row.
  bool strict_groups = true;

  void validate() const;
  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

struct SparsitySpec {
  enum class Kind { Unstructured, Structured };
  Kind kind = Kind::Unstructured;
  double keep_ratio = 1.0;  // unstructured
  std::size_t n = 2;        // structured: kept per block
  std::size_t m = 4;        // structured: block size

  static SparsitySpec unstructured(double rho) {
    return {Kind::Unstructured, rho, 0, 0};
  }
  static SparsitySpec structured(std::size_t n, std::size_t m) {
    return {Kind::Structured, 1.0, n, m};
  }
  void validate() const;
  // Total mask bits for a rows x cols tensor.
  std::uint64_t mask_bits(std::size_t rows, std::size_t cols) const;
};

// Exact bit accounting: bits / weights, kept as integers until the end.
struct BitRatio {
  std::uint64_t bits = 0;
  std::uint64_t weights = 0;

  double value() const {
    return weights == 0 ? 0.0
                        : static_cast<double>(bits) / static_cast<double>(weights);
  }
  BitRatio& operator+=(const BitRatio& o) {
    bits += o.bits;
    weights += o.weights;
    return *this;
  }
};

// Quantized weight. Scales and zero points can only be changed through
// the setters, which refuse once the tensor is frozen.
class QuantTensor {
 public:
  QuantTensor() = default;

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  const QuantSpec& spec() const { return spec_; }
  const std::vector<std::int32_t>& codes() const { return codes_; }
  const std::vector<float>& scales() const { return scales_; }
  const std::vector<std::int32_t>& zero_points() const { return zero_points_; }
  const std::optional<std::vector<std::uint8_t>>& mask() const { return mask_; }
  std::uint64_t mask_bits() const { return mask_bits_; }
  bool frozen() const { return frozen_; }

  std::size_t groups_per_row() const { return groups_per_row_; }
  std::size_t group_size() const { return group_size_; }
  std::size_t group_of(std::size_t r, std::size_t c) const;

  void freeze() { frozen_ = true; }
  void set_scale(std::size_t group, float value);
  void set_zero_point(std::size_t group, std::int32_t value);

  // Count of stored (unmasked) weights.
  std::size_t kept_count() const;
  BitRatio bit_ratio() const;

  // Hash over shape, spec, codes, scales, zero points and mask.
  void hash_into(Sha256& h) const;

 private:
  friend QuantTensor quantize(const Matrix&, const QuantSpec&,
                              const std::vector<std::uint8_t>*, std::uint64_t);
  friend QuantTensor unpack_quant(std::size_t, std::size_t, const QuantSpec&,
                                  const std::vector<std::uint8_t>&,
                                  std::vector<float>, std::vector<std::int32_t>,
                                  std::optional<std::vector<std::uint8_t>>,
                                  std::uint64_t, bool);

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  QuantSpec spec_;
  std::size_t groups_per_row_ = 1;  // 0 means one group for the whole tensor
  std::size_t group_size_ = 0;
  std::vector<std::int32_t> codes_;
  std::vector<float> scales_;
  std::vector<std::int32_t> zero_points_;
  std::optional<std::vector<std::uint8_t>> mask_;
  std::uint64_t mask_bits_ = 0;
  bool frozen_ = false;
};

// Quantize with round-half-to-even. `mask` (1 = kept) excludes positions from
// range statistics and from the code-bit count; `mask_bits` is the declared
// storage cost of that mask.
QuantTensor quantize(const Matrix& tensor, const QuantSpec& spec,
                     const std::vector<std::uint8_t>* mask = nullptr,
                     std::uint64_t mask_bits = 0);

Matrix dequantize(const QuantTensor& qt);

// Per-tensor dynamic-range quantize-then-dequantize for activations.
Matrix fake_quant(const Matrix& x, int bits, QuantScheme scheme);

struct SparseResult {
  Matrix tensor;
  std::vector<std::uint8_t> mask;  // 1 = kept
};

SparseResult sparsify(const Matrix& tensor, const SparsitySpec& spec);

// Bit-exact packing used by the quantized manifest: stored codes (unmasked
// positions only, row-major) as `bits`-wide fields, LSB-first, little-endian.
// Symmetric codes are stored in two's complement within the field.
std::vector<std::uint8_t> pack_codes(const QuantTensor& qt);
std::vector<std::uint8_t> pack_mask(const std::vector<std::uint8_t>& mask);
std::vector<std::uint8_t> unpack_mask(const std::vector<std::uint8_t>& packed,
                                      std::size_t n);

QuantTensor unpack_quant(std::size_t rows, std::size_t cols, const QuantSpec& spec,
                         const std::vector<std::uint8_t>& packed_codes,
                         std::vector<float> scales,
                         std::vector<std::int32_t> zero_points,
                         std::optional<std::vector<std::uint8_t>> mask,
                         std::uint64_t mask_bits, bool frozen);

std::string to_string(QuantScheme s);
QuantScheme scheme_from_string(const std::string& s);

}  // namespace edgelab
