// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "edrl/rng.hpp"
#include "edrl/tensor.hpp"
#include "edrl/types.hpp"

namespace edrl {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedTensor>;

/// Uniform(-b, b) with b = gain * sqrt(3 / fan_in), shape [fan_in, fan_out].
inline Tensor kaiming_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng, double gain = 1.0) {
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  std::vector<double> w(fan_in * fan_out);
  for (double& v : w) v = rng.uniform(-bound, bound);
  return Tensor({fan_in, fan_out}, std::move(w), true);
}

/// y = x W + b over the last axis.
struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(kaiming_uniform(in, out, rng)), bias(Tensor::zeros({out}, true)) {}

  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }

  Tensor forward(const Tensor& x) const {
    if (x.rank() < 1 || x.shape().back() != in_features()) {
      throw ShapeError("linear layer expects last extent " + std::to_string(in_features()) +
                       ", got " + shape_str(x.shape()));
    }
    if (x.rank() == 1) return reshape(matmul(reshape(x, {1, x.numel()}), weight), {out_features()}) + bias;
    return matmul(x, weight) + bias;
  }

  void collect(ParameterList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

enum class Activation { relu, gelu };

inline Tensor activate(const Tensor& x, Activation a) {
  return a == Activation::relu ? relu(x) : gelu(x);
}

class Mlp {
 public:
  Mlp() = default;

  /// `widths` = {in, hidden..., out}; the activation follows every layer but the last.
  Mlp(const std::vector<std::size_t>& widths, Rng& rng, Activation activation = Activation::relu)
      : activation_(activation) {
    if (widths.size() < 2) throw ShapeError("an MLP needs at least input and output widths");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) layers_.emplace_back(widths[i], widths[i + 1], rng);
  }

  Tensor forward(const Tensor& x) const {
    Tensor h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i].forward(h);
      if (i + 1 < layers_.size()) h = activate(h, activation_);
    }
    return h;
  }

  std::size_t in_features() const { return layers_.front().in_features(); }
  std::size_t out_features() const { return layers_.back().out_features(); }
  std::vector<Linear>& layers() { return layers_; }
  const std::vector<Linear>& layers() const { return layers_; }

  void collect(ParameterList& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(out, prefix + "." + std::to_string(i));
  }

 private:
  std::vector<Linear> layers_;
  Activation activation_ = Activation::relu;
};

/// Multi-head scaled dot-product attention with query/key/value/output
/// projections. Self-attention is the q = k = v call.
class AttentionBlock {
 public:
  AttentionBlock() = default;

  AttentionBlock(std::size_t width, std::size_t heads, Rng& rng)
      : width_(width), heads_(heads) {
    if (heads == 0 || width % heads != 0) {
      throw ShapeError("attention width " + std::to_string(width) + " not divisible by " +
                       std::to_string(heads) + " heads");
    }
    query = Linear(width, width, rng);
    key = Linear(width, width, rng);
    value = Linear(width, width, rng);
    output = Linear(width, width, rng);
  }

  std::size_t width() const { return width_; }
  std::size_t heads() const { return heads_; }

  Tensor forward(const Tensor& q, const Tensor& k, const Tensor& v) const {
    check(q, k, v);
    const std::size_t b = q.dim(0), tq = q.dim(1), tk = k.dim(1);
    const Tensor weights = attention_weights(q, k);
    const Tensor vh = split_heads(value.forward(v), b, tk);
    Tensor ctx = matmul(weights, vh);  // [B*H, Tq, dh]
    ctx = reshape(permute(reshape(ctx, {b, heads_, tq, head_width()}), {0, 2, 1, 3}), {b, tq, width_});
    return output.forward(ctx);
  }

  /// Softmax weights [B*H, Tq, Tk]; row r of head h of sample s is at
  /// (s*H + h, r, :).
  Tensor attention_weights(const Tensor& q, const Tensor& k) const {
    const std::size_t b = q.dim(0), tq = q.dim(1), tk = k.dim(1);
    const Tensor qh = split_heads(query.forward(q), b, tq);
    const Tensor kh = split_heads(key.forward(k), b, tk);
    const Tensor scores = matmul(qh, transpose(kh)) * (1.0 / std::sqrt(static_cast<double>(head_width())));
    return softmax(scores, -1);
  }

  void collect(ParameterList& out, const std::string& prefix) const {
    query.collect(out, prefix + ".query");
    key.collect(out, prefix + ".key");
    value.collect(out, prefix + ".value");
    output.collect(out, prefix + ".output");
  }

  Linear query, key, value, output;

 private:
  std::size_t head_width() const { return width_ / heads_; }

  Tensor split_heads(const Tensor& x, std::size_t b, std::size_t t) const {
    return reshape(permute(reshape(x, {b, t, heads_, head_width()}), {0, 2, 1, 3}),
                   {b * heads_, t, head_width()});
  }

  void check(const Tensor& q, const Tensor& k, const Tensor& v) const {
    const auto ok = [&](const Tensor& x) { return x.rank() == 3 && x.dim(2) == width_; };
    if (!ok(q) || !ok(k) || !ok(v) || q.dim(0) != k.dim(0) || k.shape() != v.shape()) {
      throw ShapeError("attention shape mismatch: q " + shape_str(q.shape()) + ", k " +
                       shape_str(k.shape()) + ", v " + shape_str(v.shape()) + " (width " +
                       std::to_string(width_) + ")");
    }
  }

  std::size_t width_ = 0;
  std::size_t heads_ = 1;
};

/// Largest head count <= `preferred` that divides `width`.
inline std::size_t heads_for(std::size_t width, std::size_t preferred) {
  std::size_t h = std::max<std::size_t>(1, std::min(preferred, width));
  while (width % h != 0) --h;
  return h;
}

/// Token encoder standing in for an imaging backbone: input projection,
/// two residual self-attention blocks and a residual MLP.
class ModalityEncoder {
 public:
  ModalityEncoder() = default;

  ModalityEncoder(Modality modality, std::size_t raw_width, std::size_t width, std::size_t heads, Rng& rng)
      : modality_(modality), raw_width_(raw_width), width_(width) {
    input = Linear(raw_width, width, rng);
    blocks = {AttentionBlock(width, heads, rng), AttentionBlock(width, heads, rng)};
    ffn = Mlp({width, width, width}, rng, Activation::relu);
  }

  Modality modality() const { return modality_; }
  std::size_t raw_width() const { return raw_width_; }
  std::size_t width() const { return width_; }

  Tensor forward(const Tensor& x) const {
    if (x.rank() != 3 || x.dim(2) != raw_width_) {
      throw ShapeError("encoder for " + to_string(modality_) + " expects [B, T, " +
                       std::to_string(raw_width_) + "], got " + shape_str(x.shape()));
    }
    Tensor h = input.forward(x);
    for (const auto& block : blocks) h = h + block.forward(h, h, h);
    return h + ffn.forward(h);
  }

  void collect(ParameterList& out, const std::string& prefix) const {
    input.collect(out, prefix + ".input");
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, prefix + ".block" + std::to_string(i));
    ffn.collect(out, prefix + ".ffn");
  }

  Linear input;
  std::vector<AttentionBlock> blocks;
  Mlp ffn;

 private:
  Modality modality_ = Modality::m1;
  std::size_t raw_width_ = 0;
  std::size_t width_ = 0;
};

}  // namespace edrl
