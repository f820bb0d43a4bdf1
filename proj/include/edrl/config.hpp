// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "edrl/dilr.hpp"
#include "edrl/types.hpp"
#include "json.hpp"

namespace edrl {

/// Input condition a pipeline sees. Text forms: `complete`,
/// `noise:<variance>:<M1|M2>`, `missing:<M1|M2>` and `missing:<M1|M2>:<rate>`
/// (the modality is dropped on a `rate` fraction of samples).
struct Regime {
  enum class Kind { complete, noise, missing };

  Kind kind = Kind::complete;
  double variance = 0.0;
  Modality modality = Modality::m2;
  double rate = 1.0;

  static Regime complete() { return {}; }
  static Regime noise(double variance, Modality m) { return {Kind::noise, variance, m, 1.0}; }
  static Regime missing(Modality m, double rate = 1.0) { return {Kind::missing, 0.0, m, rate}; }

  static Regime parse(const std::string& text) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ':');) parts.push_back(item);
    const auto fail = [&] { return std::invalid_argument("bad regime '" + text + "'"); };
    const auto number = [&](const std::string& s) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(s, &used);
      } catch (const std::exception&) {
        throw fail();
      }
      if (used != s.size()) throw fail();
      return v;
    };
    if (parts.size() == 1 && parts[0] == "complete") return complete();
    if (parts.size() == 3 && parts[0] == "noise") {
      const double v = number(parts[1]);
      if (!(v >= 0.0)) throw fail();
      return noise(v, parse_modality(parts[2]));
    }
    if ((parts.size() == 2 || parts.size() == 3) && parts[0] == "missing") {
      const double rate = parts.size() == 3 ? number(parts[2]) : 1.0;
      if (!(rate >= 0.0 && rate <= 1.0)) throw fail();
      return missing(parse_modality(parts[1]), rate);
    }
    throw fail();
  }

  std::string str() const {
    switch (kind) {
      case Kind::complete: return "complete";
      case Kind::noise: {
        std::ostringstream os;
        os << "noise:" << variance << ":" << to_string(modality);
        return os.str();
      }
      case Kind::missing: {
        std::ostringstream os;
        os << "missing:" << to_string(modality);
        if (rate != 1.0) os << ":" << rate;
        return os.str();
      }
    }
    return "complete";
  }

  bool operator==(const Regime&) const = default;
};

inline void to_json(nlohmann::json& j, const Regime& r) {
  j = {{"kind", r.kind == Regime::Kind::complete ? "complete" : r.kind == Regime::Kind::noise ? "noise" : "missing"},
       {"variance", r.variance},
       {"modality", to_string(r.modality)},
       {"rate", r.rate}};
}

inline void from_json(const nlohmann::json& j, Regime& r) {
  if (j.is_string()) {
    r = Regime::parse(j.get<std::string>());
    return;
  }
  const auto kind = j.at("kind").get<std::string>();
  r.kind = kind == "complete" ? Regime::Kind::complete : kind == "noise" ? Regime::Kind::noise : Regime::Kind::missing;
  if (kind != "complete" && kind != "noise" && kind != "missing") throw std::invalid_argument("bad regime kind " + kind);
  r.variance = j.value("variance", 0.0);
  r.modality = parse_modality(j.value("modality", std::string("M2")));
  r.rate = j.value("rate", 1.0);
}

struct OptimizerConfig {
  std::string kind = "adam";  // adam | sgd
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double momentum = 0.0;  // sgd only
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OptimizerConfig, kind, lr, beta1, beta2, eps, weight_decay, momentum)

/// Every hyperparameter of a run. Zero-valued data extents (classes, tokens,
/// raw widths) are filled from the dataset when training starts.
struct EdrlConfig {
  // data-derived extents
  std::size_t classes = 0;
  std::size_t tokens = 0;
  std::size_t raw_width_m1 = 0;
  std::size_t raw_width_m2 = 0;

  // architecture
  std::size_t width = 32;
  std::size_t heads = 2;
  double common_ratio = 0.4;
  std::size_t classifier_hidden = 32;

  // loss weights
  double w_ce = 1.0;
  double w_match = 0.5;
  double w_dis = 0.5;
  double w_feat = 0.25;
  double w_logit = 0.25;
  double lambda_c = 0.005;
  double lambda_u = 0.005;

  OptimizerConfig optimizer;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;

  Regime regime;
  bool fixed_regime = false;

  // ablation switches
  bool eprl_on = true;
  bool dilr_on = true;
  bool distill_on = true;

  bool deterministic_guiding = true;
  bool center_correlation = false;
  bool evaluate_every_epoch = true;

  std::size_t raw_width(Modality m) const { return m == Modality::m1 ? raw_width_m1 : raw_width_m2; }
  SplitSpec split() const { return SplitSpec::from_ratio(width, common_ratio); }

  void validate() const {
    for (double w : {w_ce, w_match, w_dis, w_feat, w_logit, lambda_c, lambda_u}) {
      if (!(w >= 0.0)) throw std::invalid_argument("loss weights must be non-negative");
    }
    if (dilr_on && batch_size < 2) throw std::invalid_argument("batch size must be >= 2 when DiLR is on");
    if (batch_size == 0 || width < 2 || heads == 0 || classifier_hidden == 0) {
      throw std::invalid_argument("batch size, width, heads and classifier width must be positive");
    }
    if (width % heads != 0) throw std::invalid_argument("width must be divisible by heads");
    if (!(common_ratio > 0.0 && common_ratio < 1.0)) throw std::invalid_argument("common_ratio must lie in (0, 1)");
    if (optimizer.kind != "adam" && optimizer.kind != "sgd") throw std::invalid_argument("optimizer must be adam or sgd");
    if (!(optimizer.lr >= 0.0)) throw std::invalid_argument("learning rate must be non-negative");
    if (regime.kind == Regime::Kind::noise && !(regime.variance >= 0.0)) {
      throw std::invalid_argument("noise variance must be non-negative");
    }
    (void)split();
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EdrlConfig, classes, tokens, raw_width_m1, raw_width_m2, width, heads,
                                                common_ratio, classifier_hidden, w_ce, w_match, w_dis, w_feat, w_logit,
                                                lambda_c, lambda_u, optimizer, epochs, batch_size, seed, regime,
                                                fixed_regime, eprl_on, dilr_on, distill_on, deterministic_guiding,
                                                center_correlation, evaluate_every_epoch)

/// Table-style ablation variants: I baseline, II +EPRL, III +DiLR, IV both.
/// Self-distillation accompanies the essence-point branch.
inline EdrlConfig ablation_variant(EdrlConfig cfg, int variant) {
  if (variant < 1 || variant > 4) throw std::invalid_argument("ablation variant must be 1..4");
  cfg.eprl_on = variant == 2 || variant == 4;
  cfg.dilr_on = variant == 3 || variant == 4;
  cfg.distill_on = cfg.eprl_on;
  return cfg;
}

}  // namespace edrl
