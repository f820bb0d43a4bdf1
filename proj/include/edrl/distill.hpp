// SPDX-License-Identifier: Apache-2.0
#pragma once

// Self-distillation from the complete-modality pipeline (teacher, detached)
// into a degraded pipeline: multi-bandwidth RBF MMD on fused features and
// Jensen-Shannon divergence on predictive distributions.

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "edrl/tensor.hpp"

namespace edrl {

inline constexpr double kProbabilityClamp = 1e-12;

/// Gaussian RBF kernels k(x, y) = exp(-|x - y|^2 / (2 s)), summed over the
/// listed bandwidths s (squared-distance units).
struct KernelSpec {
  std::vector<double> bandwidths;

  void validate() const {
    if (bandwidths.empty()) throw std::invalid_argument("kernel needs at least one bandwidth");
    for (double s : bandwidths) {
      if (!(s > 0.0) || !std::isfinite(s)) {
        throw std::invalid_argument("kernel bandwidth must be positive, got " + std::to_string(s));
      }
    }
  }
};

/// [N, F] x [M, F] -> [N, M] squared Euclidean distances.
inline Tensor pairwise_sq_dist(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("pairwise distance width mismatch: " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), m = b.dim(0), f = a.dim(1);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < f; ++c) {
        const double d = av[i * f + c] - bv[j * f + c];
        s += d * d;
      }
      out[i * m + j] = s;
    }
  }
  return Tensor::make_result({n, m}, std::move(out), {&a, &b}, [n, m, f](const detail::Node& self) {
    detail::Node& pa = *self.parents[0];
    detail::Node& pb = *self.parents[1];
    // a and b may share a node; read the values before touching either grad
    const double* x = pa.data.data();
    const double* y = pb.data.data();
    double* ga = pa.requires_grad ? pa.grad_ptr() : nullptr;
    double* gb = pb.requires_grad ? pb.grad_ptr() : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        const double g = 2.0 * self.grad[i * m + j];
        if (g == 0.0) continue;
        for (std::size_t c = 0; c < f; ++c) {
          const double d = g * (x[i * f + c] - y[j * f + c]);
          if (ga) ga[i * f + c] += d;
          if (gb) gb[j * f + c] -= d;
        }
      }
    }
  });
}

/// Bandwidths {m/2, m, 2m} with m the median pairwise squared distance of
/// the pooled batch. Computed on values only; no gradient flows through m.
inline KernelSpec median_heuristic(const Tensor& x, const Tensor& y) {
  NoGradGuard no_grad;
  const Tensor d = pairwise_sq_dist(concat({x.detach(), y.detach()}, 0), concat({x.detach(), y.detach()}, 0));
  const std::size_t n = d.dim(0);
  std::vector<double> upper;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) upper.push_back(d.value(i * n + j));
  double m = 1.0;
  if (!upper.empty()) {
    std::sort(upper.begin(), upper.end());
    const std::size_t h = upper.size() / 2;
    m = upper.size() % 2 ? upper[h] : 0.5 * (upper[h - 1] + upper[h]);
  }
  if (!(m > 0.0) || !std::isfinite(m)) m = 1.0;
  return {{0.5 * m, m, 2.0 * m}};
}

/// Biased (V-statistic) MMD^2: mean k(x,x) + mean k(y,y) - 2 mean k(x,y).
inline Tensor mmd_loss(const Tensor& x, const Tensor& y, const KernelSpec& kernel) {
  kernel.validate();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(1) || x.dim(0) == 0 || y.dim(0) == 0) {
    throw ShapeError("mmd_loss width mismatch: " + shape_str(x.shape()) + " and " + shape_str(y.shape()));
  }
  const Tensor dxx = pairwise_sq_dist(x, x);
  const Tensor dyy = pairwise_sq_dist(y, y);
  const Tensor dxy = pairwise_sq_dist(x, y);
  Tensor total = Tensor::scalar(0.0);
  for (double s : kernel.bandwidths) {
    const double g = -1.0 / (2.0 * s);
    total = total + mean(exp(dxx * g)) + mean(exp(dyy * g)) - 2.0 * mean(exp(dxy * g));
  }
  return total;
}

/// Row-averaged JS divergence (natural log) between two [B, K] stochastic matrices.
inline Tensor js_divergence(const Tensor& p1, const Tensor& p2) {
  if (p1.rank() != 2 || p1.shape() != p2.shape()) {
    throw ShapeError("js_divergence shape mismatch: " + shape_str(p1.shape()) + " and " + shape_str(p2.shape()));
  }
  const std::size_t k = p1.dim(1);
  for (const Tensor* p : {&p1, &p2}) {
    for (std::size_t r = 0; r < p->dim(0); ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += p->value(r * k + j);
      if (std::abs(s - 1.0) > 1e-6) {
        throw std::invalid_argument("js_divergence: row " + std::to_string(r) + " sums to " + std::to_string(s));
      }
    }
  }
  const Tensor q = (p1 + p2) * 0.5;
  const Tensor log_q = log(clamp_min(q, kProbabilityClamp));
  const auto kl = [&](const Tensor& p) { return sum(p * (log(clamp_min(p, kProbabilityClamp)) - log_q), 1); };
  return mean((kl(p1) + kl(p2)) * 0.5);
}

/// Fused features and logits of one pipeline.
struct PipelineView {
  Tensor fused;
  Tensor logits;
};

struct PipelinePair {
  PipelineView complete;
  PipelineView degraded;
};

struct DistillationLosses {
  Tensor features;
  Tensor logits;
};

/// MMD between degraded and complete fused features, JS between their
/// softmax outputs. The complete side is detached: only the degraded branch
/// receives gradients. Without an explicit kernel, the median heuristic is used.
inline DistillationLosses distillation_losses(const PipelinePair& pair,
                                              const std::optional<KernelSpec>& kernel = std::nullopt) {
  if (pair.complete.fused.shape() != pair.degraded.fused.shape() ||
      pair.complete.logits.shape() != pair.degraded.logits.shape()) {
    throw ShapeError("pipeline pair shape mismatch");
  }
  const Tensor teacher_fused = pair.complete.fused.detach();
  const Tensor teacher_logits = pair.complete.logits.detach();
  const KernelSpec k = kernel ? *kernel : median_heuristic(pair.degraded.fused, teacher_fused);
  return {mmd_loss(pair.degraded.fused, teacher_fused, k),
          js_divergence(softmax(pair.degraded.logits, 1), softmax(teacher_logits, 1))};
}

}  // namespace edrl
