#include "edgelab/quant_tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>

namespace edgelab {

namespace {

bool supported_bits(int b) { return b == 2 || b == 3 || b == 4 || b == 8; }

std::int32_t sym_qmax(int bits) { return (1 << (bits - 1)) - 1; }
std::int32_t asym_levels(int bits) { return (1 << bits) - 1; }

std::uint64_t binomial(std::uint64_t m, std::uint64_t n) {
  n = std::min(n, m - n);
  std::uint64_t r = 1;
  for (std::uint64_t i = 1; i <= n; ++i) r = r * (m - n + i) / i;
  return r;
}

std::uint64_t ceil_log2(std::uint64_t x) {
  return x <= 1 ? 0 : static_cast<std::uint64_t>(std::bit_width(x - 1));
}

}  // namespace

void QuantSpec::validate() const {
  if (!supported_bits(bits)) {
    throw ConfigError("quant bits must be one of {2,3,4,8}, got " +
                      std::to_string(bits));
  }
  if (granularity.kind == Granularity::Kind::PerGroup && granularity.group < 1) {
    throw ConfigError("quant group size must be >= 1");
  }
  if (scale_bits < 1 || zero_point_bits < 1) {
    throw ConfigError("scale/zero-point bit counts must be positive");
  }
}

void SparsitySpec::validate() const {
  if (kind == Kind::Unstructured) {
    if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) {
      throw ConfigError("sparsity keep ratio must lie in (0, 1]");
    }
  } else if (n < 1 || n > m) {
    throw ConfigError("structured sparsity requires 1 <= n <= m");
  }
}

std::uint64_t SparsitySpec::mask_bits(std::size_t rows, std::size_t cols) const {
  if (kind == Kind::Unstructured) return static_cast<std::uint64_t>(rows) * cols;
  const std::uint64_t blocks = static_cast<std::uint64_t>(rows) * (cols / m);
  return blocks * ceil_log2(binomial(m, n));
}

std::size_t QuantTensor::group_of(std::size_t r, std::size_t c) const {
  if (groups_per_row_ == 0) return 0;
  return r * groups_per_row_ + c / group_size_;
}

void QuantTensor::set_scale(std::size_t group, float value) {
  if (frozen_) throw ContractError("quantization encodings are frozen");
  scales_.at(group) = value;
}

void QuantTensor::set_zero_point(std::size_t group, std::int32_t value) {
  if (frozen_) throw ContractError("quantization encodings are frozen");
  zero_points_.at(group) = value;
}

std::size_t QuantTensor::kept_count() const {
  if (!mask_) return codes_.size();
  return static_cast<std::size_t>(
      std::count_if(mask_->begin(), mask_->end(), [](std::uint8_t m) { return m != 0; }));
}

BitRatio QuantTensor::bit_ratio() const {
  BitRatio r;
  r.weights = static_cast<std::uint64_t>(rows_) * cols_;
  r.bits = static_cast<std::uint64_t>(kept_count()) * spec_.bits;
  r.bits += static_cast<std::uint64_t>(scales_.size()) * spec_.scale_bits;
  if (spec_.scheme == QuantScheme::Asymmetric) {
    r.bits += static_cast<std::uint64_t>(zero_points_.size()) * spec_.zero_point_bits;
  }
  r.bits += mask_bits_;
  return r;
}

void QuantTensor::hash_into(Sha256& h) const {
  const std::uint64_t header[6] = {rows_, cols_, static_cast<std::uint64_t>(spec_.bits),
                                   static_cast<std::uint64_t>(spec_.scheme),
                                   groups_per_row_, group_size_};
  h.update(header, sizeof(header));
  h.update_span(std::span<const std::int32_t>(codes_));
  h.update_span(std::span<const float>(scales_));
  h.update_span(std::span<const std::int32_t>(zero_points_));
  if (mask_) h.update_span(std::span<const std::uint8_t>(*mask_));
}

QuantTensor quantize(const Matrix& tensor, const QuantSpec& spec,
                     const std::vector<std::uint8_t>* mask, std::uint64_t mask_bits) {
  spec.validate();
  if (tensor.empty()) throw ShapeError("cannot quantize an empty tensor");
  if (mask && mask->size() != tensor.size()) {
    throw ShapeError("sparsity mask size does not match tensor");
  }

  QuantTensor qt;
  qt.rows_ = tensor.rows;
  qt.cols_ = tensor.cols;
  qt.spec_ = spec;
  switch (spec.granularity.kind) {
    case Granularity::Kind::PerTensor:
      qt.groups_per_row_ = 0;
      qt.group_size_ = tensor.size();
      break;
    case Granularity::Kind::PerRow:
      qt.groups_per_row_ = 1;
      qt.group_size_ = tensor.cols;
      break;
    case Granularity::Kind::PerGroup: {
      std::size_t g = spec.granularity.group;
      if (g > tensor.cols) {
        if (spec.strict_groups) {
          throw ShapeError("quant group size " + std::to_string(g) +
                           " exceeds row length " + std::to_string(tensor.cols));
        }
        g = tensor.cols;
      }
      qt.group_size_ = g;
      qt.groups_per_row_ = (tensor.cols + g - 1) / g;
      break;
    }
  }
  const std::size_t n_groups =
      qt.groups_per_row_ == 0 ? 1 : qt.groups_per_row_ * tensor.rows;

  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> lo(n_groups, inf), hi(n_groups, -inf), amax(n_groups, 0.0);
  for (std::size_t r = 0; r < tensor.rows; ++r) {
    for (std::size_t c = 0; c < tensor.cols; ++c) {
      const std::size_t i = r * tensor.cols + c;
      if (mask && !(*mask)[i]) continue;
      const double x = tensor.data[i];
      const std::size_t g = qt.group_of(r, c);
      lo[g] = std::min(lo[g], x);
      hi[g] = std::max(hi[g], x);
      amax[g] = std::max(amax[g], std::fabs(x));
    }
  }

  const bool symmetric = spec.scheme == QuantScheme::Symmetric;
  qt.scales_.assign(n_groups, 1.0f);
  if (!symmetric) qt.zero_points_.assign(n_groups, 0);
  for (std::size_t g = 0; g < n_groups; ++g) {
    if (hi[g] < lo[g]) continue;  // fully masked group
    if (symmetric) {
      if (amax[g] > 0.0) {
        qt.scales_[g] = static_cast<float>(amax[g] / sym_qmax(spec.bits));
      }
    } else if (hi[g] > lo[g]) {
      const float s = static_cast<float>((hi[g] - lo[g]) / asym_levels(spec.bits));
      qt.scales_[g] = s;
      qt.zero_points_[g] = static_cast<std::int32_t>(round_half_even(-lo[g] / s));
    } else if (lo[g] != 0.0) {
      // single-value group: scale from |c| so the value is reproduced exactly
      const float s = static_cast<float>(std::fabs(lo[g]));
      qt.scales_[g] = s;
      qt.zero_points_[g] = static_cast<std::int32_t>(round_half_even(-lo[g] / s));
    }
  }

  qt.codes_.assign(tensor.size(), 0);
  const std::int32_t qmax = sym_qmax(spec.bits);
  const std::int32_t levels = asym_levels(spec.bits);
  for (std::size_t r = 0; r < tensor.rows; ++r) {
    for (std::size_t c = 0; c < tensor.cols; ++c) {
      const std::size_t i = r * tensor.cols + c;
      const std::size_t g = qt.group_of(r, c);
      if (mask && !(*mask)[i]) {
        qt.codes_[i] = symmetric ? 0 : std::clamp(qt.zero_points_[g], 0, levels);
        continue;
      }
      const double q = round_half_even(static_cast<double>(tensor.data[i]) /
                                       static_cast<double>(qt.scales_[g]));
      if (symmetric) {
        qt.codes_[i] = static_cast<std::int32_t>(std::clamp<double>(q, -qmax, qmax));
      } else {
        qt.codes_[i] = static_cast<std::int32_t>(
            std::clamp<double>(q + qt.zero_points_[g], 0, levels));
      }
    }
  }
  if (mask) {
    qt.mask_ = *mask;
    qt.mask_bits_ = mask_bits;
  }
  return qt;
}

Matrix dequantize(const QuantTensor& qt) {
  Matrix out(qt.rows(), qt.cols());
  const bool symmetric = qt.spec().scheme == QuantScheme::Symmetric;
  const auto& mask = qt.mask();
  for (std::size_t r = 0; r < qt.rows(); ++r) {
    for (std::size_t c = 0; c < qt.cols(); ++c) {
      const std::size_t i = r * qt.cols() + c;
      if (mask && !(*mask)[i]) {
        out.data[i] = 0.0f;
        continue;
      }
      const std::size_t g = qt.group_of(r, c);
      const std::int32_t level =
          symmetric ? qt.codes()[i] : qt.codes()[i] - qt.zero_points()[g];
      out.data[i] = static_cast<float>(level) * qt.scales()[g];
    }
  }
  return out;
}

Matrix fake_quant(const Matrix& x, int bits, QuantScheme scheme) {
  if (bits != 8 && bits != 16) {
    throw ConfigError("fake_quant supports 8 or 16 bits, got " + std::to_string(bits));
  }
  if (x.empty()) return x;
  const auto [mn_it, mx_it] = std::minmax_element(x.data.begin(), x.data.end());
  const double lo = *mn_it;
  const double hi = *mx_it;
  if (lo == hi) return x;  // constant tensor: scale |c| reproduces it exactly

  Matrix out = x;
  if (scheme == QuantScheme::Symmetric) {
    const double qmax = std::ldexp(1.0, bits - 1) - 1.0;
    const double scale = std::max(std::fabs(lo), std::fabs(hi)) / qmax;
    for (auto& v : out.data) {
      const double q = std::clamp(round_half_even(v / scale), -qmax, qmax);
      v = static_cast<float>(q * scale);
    }
  } else {
    const double levels = std::ldexp(1.0, bits) - 1.0;
    const double scale = (hi - lo) / levels;
    const double zp = round_half_even(-lo / scale);
    for (auto& v : out.data) {
      const double q = std::clamp(round_half_even(v / scale) + zp, 0.0, levels);
      v = static_cast<float>((q - zp) * scale);
    }
  }
  return out;
}

SparseResult sparsify(const Matrix& tensor, const SparsitySpec& spec) {
  spec.validate();
  SparseResult res{tensor, std::vector<std::uint8_t>(tensor.size(), 0)};
  // Rank by |x| descending; ties toward the lower index.
  auto keep_top = [&](std::size_t begin, std::size_t count, std::size_t keep) {
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), begin);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return std::fabs(tensor.data[a]) > std::fabs(tensor.data[b]);
    });
    for (std::size_t k = 0; k < keep; ++k) res.mask[idx[k]] = 1;
  };

  if (spec.kind == SparsitySpec::Kind::Unstructured) {
    const auto keep = static_cast<std::size_t>(
        std::ceil(spec.keep_ratio * static_cast<double>(tensor.size()) - 1e-9));
    keep_top(0, tensor.size(), std::min(keep, tensor.size()));
  } else {
    if (tensor.cols % spec.m != 0) {
      throw ShapeError("structured sparsity requires row length divisible by m=" +
                       std::to_string(spec.m));
    }
    for (std::size_t b = 0; b < tensor.size(); b += spec.m) keep_top(b, spec.m, spec.n);
  }
  for (std::size_t i = 0; i < tensor.size(); ++i) {
    if (!res.mask[i]) res.tensor.data[i] = 0.0f;
  }
  return res;
}

std::vector<std::uint8_t> pack_codes(const QuantTensor& qt) {
  const int bits = qt.spec().bits;
  const std::uint32_t field_mask = (1u << bits) - 1u;
  std::vector<std::uint8_t> out((qt.kept_count() * bits + 7) / 8, 0);
  std::size_t bitpos = 0;
  const auto& mask = qt.mask();
  for (std::size_t i = 0; i < qt.codes().size(); ++i) {
    if (mask && !(*mask)[i]) continue;
    const std::uint32_t v = static_cast<std::uint32_t>(qt.codes()[i]) & field_mask;
    for (int b = 0; b < bits; ++b, ++bitpos) {
      if ((v >> b) & 1u) out[bitpos / 8] |= static_cast<std::uint8_t>(1u << (bitpos % 8));
    }
  }
  return out;
}

std::vector<std::uint8_t> pack_mask(const std::vector<std::uint8_t>& mask) {
  std::vector<std::uint8_t> out((mask.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) out[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  }
  return out;
}

std::vector<std::uint8_t> unpack_mask(const std::vector<std::uint8_t>& packed,
                                      std::size_t n) {
  if (packed.size() * 8 < n) throw FormatError("mask bitmap too short");
  std::vector<std::uint8_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = (packed[i / 8] >> (i % 8)) & 1u;
  return out;
}

QuantTensor unpack_quant(std::size_t rows, std::size_t cols, const QuantSpec& spec,
                         const std::vector<std::uint8_t>& packed_codes,
                         std::vector<float> scales,
                         std::vector<std::int32_t> zero_points,
                         std::optional<std::vector<std::uint8_t>> mask,
                         std::uint64_t mask_bits, bool frozen) {
  // Rebuild the group geometry by quantizing a zero tensor of the same shape.
  QuantTensor qt = quantize(Matrix(rows, cols), spec);
  if (scales.size() != qt.scales_.size()) throw FormatError("scale count mismatch");
  if (spec.scheme == QuantScheme::Asymmetric &&
      zero_points.size() != qt.scales_.size()) {
    throw FormatError("zero-point count mismatch");
  }
  if (mask && mask->size() != rows * cols) throw FormatError("mask size mismatch");
  qt.scales_ = std::move(scales);
  qt.zero_points_ = std::move(zero_points);
  qt.mask_ = std::move(mask);
  qt.mask_bits_ = qt.mask_ ? mask_bits : 0;

  const int bits = spec.bits;
  const std::size_t needed = (qt.kept_count() * bits + 7) / 8;
  if (packed_codes.size() != needed) throw FormatError("packed code length mismatch");
  std::size_t bitpos = 0;
  for (std::size_t i = 0; i < qt.codes_.size(); ++i) {
    if (qt.mask_ && !(*qt.mask_)[i]) {
      qt.codes_[i] = spec.scheme == QuantScheme::Symmetric
                         ? 0
                         : std::clamp(qt.zero_points_[qt.group_of(i / cols, i % cols)],
                                      0, asym_levels(bits));
      continue;
    }
    std::uint32_t v = 0;
    for (int b = 0; b < bits; ++b, ++bitpos) {
      v |= static_cast<std::uint32_t>((packed_codes[bitpos / 8] >> (bitpos % 8)) & 1u) << b;
    }
    std::int32_t code = static_cast<std::int32_t>(v);
    if (spec.scheme == QuantScheme::Symmetric && (v >> (bits - 1)) & 1u) {
      code -= (1 << bits);
    }
    qt.codes_[i] = code;
  }
  qt.frozen_ = frozen;
  return qt;
}

std::string to_string(QuantScheme s) {
  return s == QuantScheme::Symmetric ? "symmetric" : "asymmetric";
}

QuantScheme scheme_from_string(const std::string& s) {
  if (s == "symmetric") return QuantScheme::Symmetric;
  if (s == "asymmetric") return QuantScheme::Asymmetric;
  throw ConfigError("unknown quant scheme '" + s + "'");
}

}  // namespace edgelab
