// SPDX-License-Identifier: Apache-2.0
#pragma once

// Disentangling common/unique representations: fixed channel split, guided
// realignment attention, batch cross-correlation between the two
// modalities, and the identity / zero-diagonal losses on its blocks.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "edrl/nn.hpp"
#include "edrl/tensor.hpp"

namespace edrl {

struct SplitSpec {
  std::size_t total = 0;
  std::size_t common = 0;
  std::size_t unique = 0;

  SplitSpec() = default;
  SplitSpec(std::size_t total_width, std::size_t common_width)
      : total(total_width), common(common_width), unique(total_width - common_width) {
    if (common_width < 1 || common_width >= total_width) {
      throw ShapeError("split needs 1 <= common < total, got common " + std::to_string(common_width) +
                       " of " + std::to_string(total_width));
    }
  }

  /// D_c = round(p * D), kept inside [1, D - 1].
  static SplitSpec from_ratio(std::size_t total_width, double ratio) {
    if (total_width < 2) throw ShapeError("split needs total width >= 2");
    const auto raw = static_cast<long long>(std::llround(ratio * static_cast<double>(total_width)));
    const auto common = std::clamp<long long>(raw, 1, static_cast<long long>(total_width) - 1);
    return SplitSpec(total_width, static_cast<std::size_t>(common));
  }

  double ratio() const { return static_cast<double>(common) / static_cast<double>(total); }
  std::size_t fused_width() const { return 2 * unique + common; }
};

/// Channel slices [0, D_c) and [D_c, D) of a [B, T, D] token tensor.
inline std::pair<Tensor, Tensor> split_channels(const Tensor& tokens, const SplitSpec& spec) {
  if (tokens.rank() != 3 || tokens.dim(2) != spec.total) {
    throw ShapeError("split_channels: tokens " + shape_str(tokens.shape()) + " do not match width " +
                     std::to_string(spec.total));
  }
  return {slice(tokens, 2, 0, spec.common), slice(tokens, 2, spec.common, spec.unique)};
}

/// Realigned per-modality vectors: common [B, D_c] and unique [B, D_u].
struct RealignedFeatures {
  Tensor common;
  Tensor unique;

  /// [B, D_c + D_u], common channels first.
  Tensor joined() const { return concat({common, unique}, 1); }
};

/// Per-modality realignment network. The common path is a single-query
/// cross-attention with the projected shared guiding token as query; the
/// unique path adds the projected modality guiding token to every unique
/// token, runs self-attention and averages over tokens.
class Realigner {
 public:
  Realigner() = default;

  Realigner(const SplitSpec& spec, std::size_t guide_width, std::size_t heads, Rng& rng) : spec_(spec) {
    common_guide = Linear(guide_width, spec.common, rng);
    unique_guide = Linear(guide_width, spec.unique, rng);
    common_attention = AttentionBlock(spec.common, heads_for(spec.common, heads), rng);
    unique_attention = AttentionBlock(spec.unique, heads_for(spec.unique, heads), rng);
  }

  const SplitSpec& spec() const { return spec_; }

  RealignedFeatures forward(const Tensor& common_tokens, const Tensor& unique_tokens, const Tensor& guide_common,
                            const Tensor& guide_unique) const {
    const std::size_t b = common_tokens.dim(0);
    if (guide_common.rank() != 2 || guide_common.dim(0) != b || guide_unique.shape() != guide_common.shape()) {
      throw ShapeError("realign: guiding tokens " + shape_str(guide_common.shape()) + " / " +
                       shape_str(guide_unique.shape()) + " for a batch of " + std::to_string(b));
    }
    const Tensor query = reshape(common_guide.forward(guide_common), {b, 1, spec_.common});
    Tensor common = reshape(common_attention.forward(query, common_tokens, common_tokens), {b, spec_.common});
    const Tensor guided = unique_tokens + reshape(unique_guide.forward(guide_unique), {b, 1, spec_.unique});
    Tensor unique = mean(unique_attention.forward(guided, guided, guided), 1);
    return {std::move(common), std::move(unique)};
  }

  void collect(ParameterList& out, const std::string& prefix) const {
    common_guide.collect(out, prefix + ".common_guide");
    unique_guide.collect(out, prefix + ".unique_guide");
    common_attention.collect(out, prefix + ".common_attention");
    unique_attention.collect(out, prefix + ".unique_attention");
  }

  Linear common_guide, unique_guide;
  AttentionBlock common_attention, unique_attention;

 private:
  SplitSpec spec_;
};

/// c_ij = sum_b f1[b,i] f2[b,j] / (|f1[:,i]| |f2[:,j]|), norms eps-clamped.
/// Uncentered unless `center` is set.
inline Tensor correlation_matrix(const Tensor& f1, const Tensor& f2, bool center = false, double eps = 1e-8) {
  if (f1.rank() != 2 || f1.shape() != f2.shape()) {
    throw ShapeError("correlation_matrix shape mismatch: " + shape_str(f1.shape()) + " and " +
                     shape_str(f2.shape()));
  }
  Tensor a = f1, b = f2;
  if (center) {
    a = a - mean(a, 0, true);
    b = b - mean(b, 0, true);
  }
  const std::size_t d = f1.dim(1);
  const Tensor norms = reshape(l2_norm(a, 0, eps), {d, 1}) * reshape(l2_norm(b, 0, eps), {1, d});
  return matmul(transpose(a), b) / norms;
}

/// The full matrix with its leading common and trailing unique blocks.
struct CorrelationMatrix {
  Tensor full;
  Tensor common;
  Tensor unique;
};

inline CorrelationMatrix correlation_blocks(const RealignedFeatures& r1, const RealignedFeatures& r2,
                                            bool center = false) {
  const std::size_t dc = r1.common.dim(1), du = r1.unique.dim(1);
  CorrelationMatrix c;
  c.full = correlation_matrix(r1.joined(), r2.joined(), center);
  c.common = slice(slice(c.full, 0, 0, dc), 1, 0, dc);
  c.unique = slice(slice(c.full, 0, dc, du), 1, dc, du);
  return c;
}

namespace detail {

inline Tensor identity_mask(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(v));
}

inline void check_square(const Tensor& c, const char* what) {
  if (c.rank() != 2 || c.dim(0) != c.dim(1)) {
    throw ShapeError(std::string(what) + " needs a square block, got " + shape_str(c.shape()));
  }
}

}  // namespace detail

/// sum_i (1 - c_ii)^2 + lambda * sum_{i != j} c_ij^2
inline Tensor common_loss(const Tensor& c, double lambda) {
  detail::check_square(c, "common_loss");
  const Tensor eye = detail::identity_mask(c.dim(0));
  return sum(square(eye - c * eye)) + lambda * sum(square(c * (1.0 - eye)));
}

/// sum_i c_ii^2 + lambda * sum_{i != j} c_ij^2
inline Tensor unique_loss(const Tensor& c, double lambda) {
  detail::check_square(c, "unique_loss");
  const Tensor eye = detail::identity_mask(c.dim(0));
  return sum(square(c * eye)) + lambda * sum(square(c * (1.0 - eye)));
}

/// [uni_M1, uni_M2, com_M1 + com_M2]
inline Tensor fuse(const RealignedFeatures& r1, const RealignedFeatures& r2) {
  if (r1.common.shape() != r2.common.shape() || r1.unique.shape() != r2.unique.shape()) {
    throw ShapeError("fuse width mismatch: common " + shape_str(r1.common.shape()) + " vs " +
                     shape_str(r2.common.shape()) + ", unique " + shape_str(r1.unique.shape()) + " vs " +
                     shape_str(r2.unique.shape()));
  }
  return concat({r1.unique, r2.unique, r1.common + r2.common}, 1);
}

inline Tensor classify(const Tensor& fused, const Mlp& head) {
  if (fused.rank() != 2 || fused.dim(1) != head.in_features()) {
    throw ShapeError("classifier expects [B, " + std::to_string(head.in_features()) + "], got " +
                     shape_str(fused.shape()));
  }
  return head.forward(fused);
}

}  // namespace edrl
