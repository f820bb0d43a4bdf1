// SPDX-License-Identifier: Apache-2.0
#pragma once

// The full pipeline: per-modality encoders, essence-point guiding,
// common/unique realignment, fusion and classification, plus the composite
// training objective.

#include <array>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "edrl/config.hpp"
#include "edrl/datagen.hpp"
#include "edrl/dilr.hpp"
#include "edrl/distill.hpp"
#include "edrl/eprl.hpp"
#include "edrl/nn.hpp"

namespace edrl {

struct PipelineOutput {
  Tensor fused;   // [B, F]
  Tensor logits;  // [B, K]
  /// Token-mean encoder features per modality; empty when the modality is
  /// absent from the whole batch.
  std::array<std::optional<Tensor>, kModalities> pooled;
  std::vector<std::array<bool, kModalities>> present;
  std::optional<std::array<RealignedFeatures, kModalities>> realigned;
  /// Classes that selected the guiding distributions (empty without EPRL).
  std::vector<std::size_t> guide_classes;
};

class EdrlModel {
 public:
  EdrlModel() = default;

  explicit EdrlModel(const EdrlConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    if (cfg.classes < 2 || cfg.tokens == 0 || cfg.raw_width_m1 == 0 || cfg.raw_width_m2 == 0) {
      throw std::invalid_argument("model config needs classes, tokens and raw widths");
    }
    const Rng root(cfg.seed);
    const std::size_t d = cfg.width;
    for (auto m : kAllModalities) {
      Rng r = root.substream(10 + index(m));
      encoders[index(m)] = ModalityEncoder(m, cfg.raw_width(m), d, cfg.heads, r);
    }
    if (cfg.eprl_on) {
      Rng r = root.substream(20);
      bank = EssencePointBank(cfg.classes, d, r);
    }
    std::size_t fused_width = 2 * d;
    if (cfg.dilr_on) {
      const SplitSpec split = cfg.split();
      for (auto m : kAllModalities) {
        Rng r = root.substream(30 + index(m));
        realigners[index(m)] = Realigner(split, d, cfg.heads, r);
      }
      if (!cfg.eprl_on) {
        Rng r = root.substream(40);
        const auto draw = [&] {
          std::vector<double> v(d);
          for (double& x : v) x = r.normal() / std::sqrt(static_cast<double>(d));
          return Tensor({d}, std::move(v), true);
        };
        static_guide_com = draw();
        static_guide_uni = {draw(), draw()};
      }
      fused_width = split.fused_width();
    } else if (cfg.eprl_on) {
      for (auto m : kAllModalities) {
        Rng r = root.substream(50 + index(m));
        guided_pool[index(m)] = AttentionBlock(d, cfg.heads, r);
      }
    }
    Rng r = root.substream(60);
    classifier = Mlp({fused_width, cfg.classifier_hidden, cfg.classes}, r, Activation::relu);
  }

  const EdrlConfig& config() const { return cfg_; }

  /// encode -> pool -> guiding tokens -> split -> realign -> fuse -> classify.
  /// Absent modalities are replaced by T copies of their guiding token
  /// (zeros without EPRL). Guiding classes come from labels when
  /// `use_labels`, otherwise from essence-point similarity.
  PipelineOutput forward(const SampleBatch& batch, Rng& rng, bool use_labels) const {
    const std::size_t b = batch.size();
    if (b == 0) throw std::invalid_argument("forward on an empty batch");
    for (std::size_t i = 0; i < b; ++i) {
      if (!batch.present[i][0] && !batch.present[i][1]) {
        throw UnusableInputError("sample " + std::to_string(i) + " has no available modality");
      }
    }
    const std::size_t t = batch.modality(Modality::m1).dim(1);
    const std::size_t d = cfg_.width;

    PipelineOutput out;
    out.present = batch.present;
    std::array<std::optional<Tensor>, kModalities> encoded;
    for (auto m : kAllModalities) {
      if (!batch.any_present(m)) continue;
      encoded[index(m)] = encoders[index(m)].forward(batch.modality(m));
      out.pooled[index(m)] = pooled_feature(*encoded[index(m)]);
    }

    std::optional<GuidingTokens> guiding;
    if (cfg_.eprl_on) {
      const auto classes = use_labels ? batch.labels : select_guiding_classes(out.pooled, batch.present, bank);
      guiding = guiding_for_batch(bank, classes, rng, !use_labels && cfg_.deterministic_guiding);
      out.guide_classes = classes;
    }

    std::array<Tensor, kModalities> tokens;
    for (auto m : kAllModalities) {
      if (batch.all_present(m)) {
        tokens[index(m)] = *encoded[index(m)];
        continue;
      }
      const Tensor substitute = guiding ? broadcast_to(reshape(guiding->uni[index(m)], {b, 1, d}), {b, t, d})
                                        : Tensor::zeros({b, t, d});
      if (!encoded[index(m)]) {
        tokens[index(m)] = substitute;
        continue;
      }
      std::vector<double> keep(b), fill(b);
      for (std::size_t i = 0; i < b; ++i) {
        keep[i] = batch.present[i][index(m)] ? 1.0 : 0.0;
        fill[i] = 1.0 - keep[i];
      }
      tokens[index(m)] = *encoded[index(m)] * Tensor({b, 1, 1}, std::move(keep)) +
                         substitute * Tensor({b, 1, 1}, std::move(fill));
    }

    if (cfg_.dilr_on) {
      std::array<RealignedFeatures, kModalities> r;
      for (auto m : kAllModalities) {
        const auto [common, unique] = split_channels(tokens[index(m)], realigners[index(m)].spec());
        const Tensor g_com = guiding ? guiding->com : broadcast_to(reshape(static_guide_com, {1, d}), {b, d});
        const Tensor g_uni = guiding ? guiding->uni[index(m)]
                                     : broadcast_to(reshape(static_guide_uni[index(m)], {1, d}), {b, d});
        r[index(m)] = realigners[index(m)].forward(common, unique, g_com, g_uni);
      }
      out.fused = fuse(r[0], r[1]);
      out.realigned = r;
    } else {
      std::vector<Tensor> parts;
      for (auto m : kAllModalities) {
        if (guiding) {
          const Tensor query = reshape(guiding->uni[index(m)], {b, 1, d});
          parts.push_back(reshape(guided_pool[index(m)].forward(query, tokens[index(m)], tokens[index(m)]), {b, d}));
        } else {
          parts.push_back(mean(tokens[index(m)], 1));
        }
      }
      out.fused = concat(parts, 1);
    }
    out.logits = classify(out.fused, classifier);
    return out;
  }

  ParameterList parameters() const {
    ParameterList out;
    for (auto m : kAllModalities) encoders[index(m)].collect(out, "encoder." + to_string(m));
    if (cfg_.eprl_on) bank.collect(out, "bank");
    if (cfg_.dilr_on) {
      for (auto m : kAllModalities) realigners[index(m)].collect(out, "realign." + to_string(m));
      if (!cfg_.eprl_on) {
        out.push_back({"static_guide.com", static_guide_com});
        for (auto m : kAllModalities) out.push_back({"static_guide.uni." + to_string(m), static_guide_uni[index(m)]});
      }
    } else if (cfg_.eprl_on) {
      for (auto m : kAllModalities) guided_pool[index(m)].collect(out, "guided_pool." + to_string(m));
    }
    classifier.collect(out, "classifier");
    return out;
  }

  std::array<ModalityEncoder, kModalities> encoders;
  EssencePointBank bank;
  std::array<Realigner, kModalities> realigners;
  std::array<AttentionBlock, kModalities> guided_pool;
  Tensor static_guide_com;
  std::array<Tensor, kModalities> static_guide_uni;
  Mlp classifier;

 private:
  EdrlConfig cfg_;
};

/// Mean negative log-likelihood of `labels` under softmax(logits).
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " for " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t b = labels.size(), k = logits.dim(1);
  std::vector<double> onehot(b * k, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= k) throw std::out_of_range("label " + std::to_string(labels[i]) + " out of range");
    onehot[i * k + labels[i]] = 1.0;
  }
  return -mean(sum(log_softmax(logits, 1) * Tensor({b, k}, std::move(onehot)), 1));
}

struct LossBreakdown {
  Tensor total;
  double ce = 0.0;
  double matching = 0.0;
  double disentangle = 0.0;
  double features = 0.0;
  double logits = 0.0;
};

/// w_ce CE + w_match L_match + w_dis (L_com + L_uni) + w_feat L_feat + w_logit L_logit.
/// Distillation terms need a teacher; the teacher is always detached.
inline LossBreakdown total_loss(const EdrlModel& model, const PipelineOutput& out,
                                const std::vector<std::size_t>& labels, const PipelineOutput* teacher = nullptr) {
  const EdrlConfig& cfg = model.config();
  LossBreakdown lb;
  const Tensor ce = cross_entropy(out.logits, labels);
  lb.ce = ce.item();
  Tensor total = cfg.w_ce * ce;

  if (cfg.eprl_on && cfg.w_match > 0.0) {
    Tensor match = Tensor::scalar(0.0);
    for (auto m : kAllModalities) {
      if (!out.pooled[index(m)]) continue;
      std::vector<std::size_t> rows, row_labels;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (out.present[i][index(m)]) {
          rows.push_back(i);
          row_labels.push_back(labels[i]);
        }
      }
      if (rows.empty()) continue;
      const Tensor& pooled = *out.pooled[index(m)];
      const Tensor features = rows.size() == labels.size() ? pooled : gather_rows(pooled, rows);
      match = match + matching_loss(features, m, row_labels, model.bank);
    }
    lb.matching = match.item();
    total = total + cfg.w_match * match;
  }

  if (cfg.dilr_on && cfg.w_dis > 0.0 && out.realigned) {
    if (labels.size() >= 2) {
      const auto c = correlation_blocks((*out.realigned)[0], (*out.realigned)[1], cfg.center_correlation);
      const Tensor dis = common_loss(c.common, cfg.lambda_c) + unique_loss(c.unique, cfg.lambda_u);
      lb.disentangle = dis.item();
      total = total + cfg.w_dis * dis;
    } else {
      static bool warned = false;
      if (!warned) {
        std::cerr << "warning: batch of one, correlation losses skipped\n";
        warned = true;
      }
    }
  }

  if (teacher && cfg.distill_on && (cfg.w_feat > 0.0 || cfg.w_logit > 0.0)) {
    const auto d = distillation_losses({{teacher->fused, teacher->logits}, {out.fused, out.logits}});
    lb.features = d.features.item();
    lb.logits = d.logits.item();
    total = total + cfg.w_feat * d.features + cfg.w_logit * d.logits;
  }
  lb.total = total;
  return lb;
}

}  // namespace edrl
