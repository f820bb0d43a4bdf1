// SPDX-License-Identifier: Apache-2.0
#pragma once

// Essence-point representation learning: a learnable prototype per
// (modality, class), a cosine matching loss against all prototypes,
// prototype-based class inference, per-prototype Gaussian heads and their
// product-of-experts fusion into guiding tokens.

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "edrl/nn.hpp"
#include "edrl/rng.hpp"
#include "edrl/tensor.hpp"
#include "edrl/types.hpp"

namespace edrl {

inline constexpr double kCosineEps = 1e-8;

/// No modality is available to drive a prediction.
class UnusableInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Diagonal Gaussian. Works row-wise when mean/variance are [K, D].
struct GaussianParams {
  Tensor mean;
  Tensor variance;
};

/// Per-sample guiding tokens, each [B, D].
struct GuidingTokens {
  std::array<Tensor, kModalities> uni;
  Tensor com;
  std::vector<std::size_t> classes;
};

class EssencePointBank {
 public:
  EssencePointBank() = default;

  /// Unit-norm Gaussian points; heads map a point to (mean, log-variance).
  EssencePointBank(std::size_t classes, std::size_t width, Rng& rng)
      : classes_(classes), width_(width) {
    if (classes == 0 || width == 0) throw ShapeError("essence-point bank needs classes and width");
    std::vector<double> p(kModalities * classes * width);
    for (std::size_t r = 0; r < kModalities * classes; ++r) {
      double norm = 0.0;
      for (std::size_t j = 0; j < width; ++j) {
        p[r * width + j] = rng.normal();
        norm += p[r * width + j] * p[r * width + j];
      }
      norm = std::sqrt(norm);
      for (std::size_t j = 0; j < width; ++j) p[r * width + j] /= norm;
    }
    points = Tensor({kModalities, classes, width}, std::move(p), true);
    for (std::size_t r = 0; r < kModalities * classes; ++r) {
      heads.emplace_back(std::vector<std::size_t>{width, width, 2 * width}, rng, Activation::relu);
    }
  }

  std::size_t classes() const { return classes_; }
  std::size_t width() const { return width_; }

  /// All points as [2K, D]; row m*K + c holds E_m^c.
  Tensor flat_points() const { return reshape(points, {kModalities * classes_, width_}); }

  Tensor modality_points(Modality m) const {
    return reshape(slice(points, 0, index(m), 1), {classes_, width_});
  }

  Tensor point(Modality m, std::size_t c) const {
    check_class(c);
    return reshape(slice(modality_points(m), 0, c, 1), {width_});
  }

  const Mlp& head(Modality m, std::size_t c) const { return heads[index(m) * classes_ + c]; }
  Mlp& head(Modality m, std::size_t c) { return heads[index(m) * classes_ + c]; }

  void check_class(std::size_t c) const {
    if (c >= classes_) {
      throw std::out_of_range("class " + std::to_string(c) + " out of range [0, " +
                              std::to_string(classes_) + ")");
    }
  }

  void collect(ParameterList& out, const std::string& prefix) const {
    out.push_back({prefix + ".points", points});
    for (std::size_t m = 0; m < kModalities; ++m)
      for (std::size_t c = 0; c < classes_; ++c)
        heads[m * classes_ + c].collect(out, prefix + ".head" + std::to_string(m) + "_" + std::to_string(c));
  }

  Tensor points;            // [2, K, D]
  std::vector<Mlp> heads;   // index m*K + c

 private:
  std::size_t classes_ = 0;
  std::size_t width_ = 0;
};

/// Mean over the token axis: [B, T, D] -> [B, D].
inline Tensor pooled_feature(const Tensor& tokens) {
  if (tokens.rank() != 3) throw ShapeError("pooled_feature expects [B, T, D], got " + shape_str(tokens.shape()));
  return mean(tokens, 1);
}

/// Matching loss for one modality's features [N, D] against every point in
/// the bank: -mean_i( Sim(F_i, E_m^{c_i}) - mean over the other 2K-1 points of Sim(F_i, E) ).
inline Tensor matching_loss(const Tensor& features, Modality m, const std::vector<std::size_t>& labels,
                            const EssencePointBank& bank) {
  if (features.rank() != 2 || features.dim(1) != bank.width() || features.dim(0) != labels.size() ||
      labels.empty()) {
    throw ShapeError("matching_loss: features " + shape_str(features.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels, width " + std::to_string(bank.width()));
  }
  for (auto c : labels) bank.check_class(c);
  const std::size_t n = labels.size();
  const std::size_t total = kModalities * bank.classes();
  std::vector<double> mask(n * total, 0.0);
  for (std::size_t i = 0; i < n; ++i) mask[i * total + index(m) * bank.classes() + labels[i]] = 1.0;
  const Tensor sims = matmul(normalize_rows(features, kCosineEps),
                             transpose(normalize_rows(bank.flat_points(), kCosineEps)));
  const Tensor positive = sum(sims * Tensor({n, total}, std::move(mask)), 1);
  const Tensor negative = (sum(sims, 1) - positive) * (1.0 / static_cast<double>(total - 1));
  return -mean(positive - negative);
}

/// Sum of the per-modality matching losses.
inline Tensor matching_loss(const Tensor& f1, const Tensor& f2, const std::vector<std::size_t>& labels,
                            const EssencePointBank& bank) {
  return matching_loss(f1, Modality::m1, labels, bank) + matching_loss(f2, Modality::m2, labels, bank);
}

struct ClassChoice {
  std::size_t cls = 0;
  double similarity = 0.0;
};

/// Argmax of cosine similarity against one modality's points; ties go to the
/// lowest class index. Rows of `features` ([N, D]) are scored independently.
inline std::vector<ClassChoice> infer_classes(const Tensor& features, Modality m, const EssencePointBank& bank) {
  NoGradGuard no_grad;
  if (features.rank() != 2 || features.dim(1) != bank.width()) {
    throw ShapeError("infer_classes expects [N, " + std::to_string(bank.width()) + "], got " +
                     shape_str(features.shape()));
  }
  const Tensor sims = matmul(normalize_rows(features, kCosineEps),
                             transpose(normalize_rows(bank.modality_points(m), kCosineEps)));
  const std::size_t k = bank.classes();
  std::vector<ClassChoice> out(features.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = {0, sims.value(i * k)};
    for (std::size_t c = 1; c < k; ++c) {
      if (sims.value(i * k + c) > out[i].similarity) out[i] = {c, sims.value(i * k + c)};
    }
  }
  return out;
}

inline ClassChoice infer_class(const Tensor& feature, Modality m, const EssencePointBank& bank) {
  return infer_classes(reshape(feature, {1, feature.numel()}), m, bank).front();
}

/// Class used to pick guiding distributions when labels are unavailable:
/// per sample, the available modality whose best essence-point similarity
/// is highest (M1 on ties).
inline std::vector<std::size_t> select_guiding_classes(
    const std::array<std::optional<Tensor>, kModalities>& pooled,
    const std::vector<std::array<bool, kModalities>>& present, const EssencePointBank& bank) {
  std::array<std::vector<ClassChoice>, kModalities> choices;
  for (auto m : kAllModalities) {
    if (pooled[index(m)]) choices[index(m)] = infer_classes(*pooled[index(m)], m, bank);
  }
  std::vector<std::size_t> classes(present.size());
  for (std::size_t i = 0; i < present.size(); ++i) {
    std::optional<ClassChoice> best;
    for (auto m : kAllModalities) {
      if (!present[i][index(m)] || choices[index(m)].empty()) continue;
      const auto& c = choices[index(m)][i];
      if (!best || c.similarity > best->similarity) best = c;
    }
    if (!best) throw UnusableInputError("sample " + std::to_string(i) + " has no available modality");
    classes[i] = best->cls;
  }
  return classes;
}

/// Mean and variance predicted from E_m^c; variance = exp(log-variance).
inline GaussianParams gaussian_head(const EssencePointBank& bank, Modality m, std::size_t c) {
  const Tensor out = bank.head(m, c).forward(bank.point(m, c));
  const std::size_t d = bank.width();
  return {slice(out, 0, 0, d), exp(slice(out, 0, d, d))};
}

/// Gaussians for every class of one modality, stacked as [K, D].
inline GaussianParams gaussian_table(const EssencePointBank& bank, Modality m) {
  std::vector<Tensor> means, vars;
  const std::size_t d = bank.width();
  for (std::size_t c = 0; c < bank.classes(); ++c) {
    const auto g = gaussian_head(bank, m, c);
    means.push_back(reshape(g.mean, {1, d}));
    vars.push_back(reshape(g.variance, {1, d}));
  }
  return {concat(means, 0), concat(vars, 0)};
}

/// Product of two diagonal Gaussians: precisions add, means are
/// precision-weighted.
inline GaussianParams poe_join(const GaussianParams& a, const GaussianParams& b) {
  if (a.mean.shape() != b.mean.shape() || a.variance.shape() != a.mean.shape() ||
      b.variance.shape() != b.mean.shape()) {
    throw ShapeError("poe_join shape mismatch: " + shape_str(a.mean.shape()) + " vs " +
                     shape_str(b.mean.shape()));
  }
  for (const auto* g : {&a, &b}) {
    const auto v = g->variance.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!(v[i] > 0.0)) {
        throw NumericError("poe_join: non-positive variance " + std::to_string(v[i]) + " at index " +
                           std::to_string(i));
      }
    }
  }
  const Tensor precision_a = 1.0 / a.variance;
  const Tensor precision_b = 1.0 / b.variance;
  const Tensor joint_variance = 1.0 / (precision_a + precision_b);
  return {(precision_a * a.mean + precision_b * b.mean) * joint_variance, joint_variance};
}

/// Reparameterized draw mean + sqrt(variance) * eps; `deterministic` returns the mean.
inline Tensor sample_guiding(const GaussianParams& params, Rng& rng, bool deterministic = false) {
  if (deterministic) return params.mean;
  std::vector<double> eps(params.mean.numel());
  for (double& e : eps) e = rng.normal();
  return params.mean + sqrt(params.variance) * Tensor(params.mean.shape(), std::move(eps));
}

/// Guiding tokens for a batch whose per-sample classes are already known
/// (labels in training, selected classes otherwise).
inline GuidingTokens guiding_for_batch(const EssencePointBank& bank, const std::vector<std::size_t>& classes,
                                       Rng& rng, bool deterministic = false) {
  for (auto c : classes) bank.check_class(c);
  const auto g1 = gaussian_table(bank, Modality::m1);
  const auto g2 = gaussian_table(bank, Modality::m2);
  const auto joint = poe_join(g1, g2);
  const auto rows = [&](const GaussianParams& g) {
    return GaussianParams{gather_rows(g.mean, classes), gather_rows(g.variance, classes)};
  };
  GuidingTokens out;
  out.uni[0] = sample_guiding(rows(g1), rng, deterministic);
  out.uni[1] = sample_guiding(rows(g2), rng, deterministic);
  out.com = sample_guiding(rows(joint), rng, deterministic);
  out.classes = classes;
  return out;
}

}  // namespace edrl
