// SPDX-License-Identifier: Apache-2.0
#pragma once

// Two-pipeline training, regime handling, evaluation and checkpoints.

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "edrl/blobfile.hpp"
#include "edrl/config.hpp"
#include "edrl/datagen.hpp"
#include "edrl/metrics.hpp"
#include "edrl/model.hpp"
#include "edrl/optim.hpp"

namespace edrl {

/// Raised when a training loss or gradient stops being finite.
class DivergenceError : public NumericError {
 public:
  DivergenceError(std::size_t step, const std::string& what)
      : NumericError("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Copies the dataset-derived extents into `cfg` where it leaves them at 0.
inline EdrlConfig with_data_extents(EdrlConfig cfg, const DatasetSplits& data) {
  const auto& b = data.train;
  if (cfg.classes == 0) {
    std::size_t k = 0;
    for (auto l : b.labels) k = std::max(k, l + 1);
    for (auto l : data.test.labels) k = std::max(k, l + 1);
    cfg.classes = std::max<std::size_t>(k, 2);
  }
  if (cfg.tokens == 0) cfg.tokens = b.modality(Modality::m1).dim(1);
  if (cfg.raw_width_m1 == 0) cfg.raw_width_m1 = b.modality(Modality::m1).dim(2);
  if (cfg.raw_width_m2 == 0) cfg.raw_width_m2 = b.modality(Modality::m2).dim(2);
  return cfg;
}

/// Drops `m` from round(rate * eligible) samples chosen by `rng`. A sample is
/// eligible when its other modality is present.
inline SampleBatch corrupt_missing_rate(const SampleBatch& batch, Modality m, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("missing rate must lie in [0, 1]");
  if (rate == 1.0) return corrupt_missing(batch, m);
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (batch.present[i][index(m)] && batch.present[i][index(other(m))]) eligible.push_back(i);
  rng.shuffle(std::span<std::size_t>(eligible));
  eligible.resize(static_cast<std::size_t>(std::llround(rate * static_cast<double>(eligible.size()))));
  SampleBatch out = batch;
  if (eligible.empty()) return out;
  Tensor payload = batch.modality(m).clone();
  auto v = payload.mutable_values();
  const std::size_t per_sample = v.size() / batch.size();
  for (auto i : eligible) {
    out.present[i][index(m)] = false;
    std::fill_n(v.begin() + static_cast<std::ptrdiff_t>(i * per_sample), per_sample, 0.0);
  }
  out.tokens[index(m)] = std::move(payload);
  return out;
}

inline SampleBatch apply_regime(const SampleBatch& batch, const Regime& regime, Rng& rng) {
  switch (regime.kind) {
    case Regime::Kind::complete: return batch;
    case Regime::Kind::noise: return corrupt_noise(batch, regime.modality, regime.variance, rng);
    case Regime::Kind::missing: return corrupt_missing_rate(batch, regime.modality, regime.rate, rng);
  }
  return batch;
}

/// Same corruption applied to the other modality.
inline Regime swapped(Regime r) {
  r.modality = other(r.modality);
  return r;
}

/// complete, noise and missing regimes on the configured modality.
inline std::vector<Regime> evaluation_regimes(const EdrlConfig& cfg) {
  const Modality m = cfg.regime.modality;
  const double variance = cfg.regime.kind == Regime::Kind::noise ? cfg.regime.variance : 0.5;
  return {Regime::complete(), Regime::noise(variance, m), Regime::missing(m)};
}

inline std::size_t evaluation_threads() {
  const char* env = std::getenv("EDRL_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw std::invalid_argument(std::string("EDRL_THREADS must be a positive integer, got ") + env);
  return static_cast<std::size_t>(n);
}

/// Fixed stream for evaluation-time corruption so reports are reproducible.
inline constexpr std::uint64_t kEvalStream = 0xe7a1;

/// Forward pass over `batch` in chunks, without gradients. Chunks use their
/// own rng substreams, so results do not depend on the thread count.
inline PipelineOutput infer_chunk(const EdrlModel& model, const SampleBatch& batch, std::uint64_t seed,
                                  std::size_t chunk) {
  NoGradGuard guard;
  Rng rng = Rng(seed).substream(kEvalStream).substream(1000 + chunk);
  return model.forward(batch, rng, false);
}

struct Inference {
  std::vector<double> fused;   // [N, F]
  std::vector<double> logits;  // [N, K]
  std::size_t fused_width = 0;
};

inline Inference infer(const EdrlModel& model, const SampleBatch& batch, std::size_t threads = evaluation_threads()) {
  const std::size_t n = batch.size();
  if (n == 0) throw std::invalid_argument("evaluation on an empty test set");
  const std::size_t chunk = std::max<std::size_t>(model.config().batch_size, 2);
  const std::size_t chunks = (n + chunk - 1) / chunk;
  std::vector<PipelineOutput> outs(chunks);
  const auto run = [&](std::size_t c) {
    std::vector<std::size_t> rows;
    for (std::size_t i = c * chunk; i < std::min(n, (c + 1) * chunk); ++i) rows.push_back(i);
    outs[c] = infer_chunk(model, batch.subset(rows), model.config().seed, c);
  };
  threads = std::min(threads, chunks);
  if (threads <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) run(c);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t c = w; c < chunks; c += threads) run(c);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  Inference r;
  r.fused_width = outs.front().fused.dim(1);
  for (const auto& o : outs) {
    r.fused.insert(r.fused.end(), o.fused.values().begin(), o.fused.values().end());
    r.logits.insert(r.logits.end(), o.logits.values().begin(), o.logits.values().end());
  }
  return r;
}

/// Test-split metrics under `regime`; scores are softmax probabilities.
inline MetricsReport evaluate(const EdrlModel& model, const SampleBatch& test, const Regime& regime,
                              std::size_t threads = evaluation_threads()) {
  Rng rng = Rng(model.config().seed).substream(kEvalStream);
  const SampleBatch batch = apply_regime(test, regime, rng);
  const Inference inf = infer(model, batch, threads);
  const std::size_t k = model.config().classes;
  std::vector<double> probs(inf.logits.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double* row = inf.logits.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < k; ++c) probs[i * k + c] = std::exp(row[c] - mx) / z;
  }
  MetricsReport r = compute_metrics(probs, batch.labels, k);
  r.regime = regime.str();
  return r;
}

/// Cross-modal correlation of the realigned features over the whole test
/// split (one forward pass). Needs the DiLR branch.
inline CorrelationMatrix test_correlation(const EdrlModel& model, const SampleBatch& test, const Regime& regime) {
  if (!model.config().dilr_on) throw std::invalid_argument("correlation export needs the DiLR branch");
  Rng rng = Rng(model.config().seed).substream(kEvalStream);
  const SampleBatch batch = apply_regime(test, regime, rng);
  const PipelineOutput out = infer_chunk(model, batch, model.config().seed, 0);
  NoGradGuard guard;
  return correlation_blocks((*out.realigned)[0], (*out.realigned)[1], model.config().center_correlation);
}

/// mean(diag(C_com)) - mean(|diag(C_uni)|)
inline double disentanglement_gap(const CorrelationMatrix& c) {
  double com = 0.0, uni = 0.0;
  const std::size_t dc = c.common.dim(0), du = c.unique.dim(0);
  for (std::size_t i = 0; i < dc; ++i) com += c.common.value(i * dc + i);
  for (std::size_t i = 0; i < du; ++i) uni += std::abs(c.unique.value(i * du + i));
  return com / static_cast<double>(dc) - uni / static_cast<double>(du);
}

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;  // mean total loss over the epoch's steps
  std::vector<MetricsReport> reports;
};

struct TrainState {
  EdrlModel model;
  Rng rng;
  std::size_t epoch = 0;
  std::vector<EpochRecord> history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// One optimizer step on `batch`: complete pipeline, plus the degraded
/// pipeline distilled from it when `degraded` is not the complete regime.
inline double train_step(const EdrlModel& model, Optimizer& opt, const SampleBatch& batch, const Regime& degraded,
                         Rng& rng) {
  const PipelineOutput complete = model.forward(batch, rng, true);
  Tensor loss = total_loss(model, complete, batch.labels).total;
  if (degraded.kind != Regime::Kind::complete) {
    const SampleBatch corrupted = apply_regime(batch, degraded, rng);
    const PipelineOutput student = model.forward(corrupted, rng, true);
    loss = loss + total_loss(model, student, batch.labels, &complete).total;
  }
  opt.zero_grad();
  loss.backward();
  opt.step();
  return loss.item();
}

/// Trains from scratch. Each step runs the complete pipeline and, for a
/// corrupted regime, a degraded one distilled from it. Unless
/// `fixed_regime`, the degraded regime alternates at random between the
/// configured corruption and the same corruption on the other modality.
inline TrainState train(EdrlConfig cfg, const DatasetSplits& data, const EpochCallback& on_epoch = {}) {
  cfg = with_data_extents(cfg, data);
  cfg.validate();
  data.train.validate(cfg.classes);
  data.test.validate(cfg.classes);
  TrainState st{EdrlModel(cfg), Rng(cfg.seed).substream(7), 0, {}};
  auto opt = make_optimizer(st.model.parameters(), cfg.optimizer);

  const std::size_t n = data.train.size();
  const std::size_t min_batch = cfg.dilr_on ? 2 : 1;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    st.rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      if (end - begin < min_batch) break;
      const SampleBatch batch =
          data.train.subset(std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                                     order.begin() + static_cast<std::ptrdiff_t>(end)));
      Regime degraded = cfg.regime;
      if (!cfg.fixed_regime && degraded.kind != Regime::Kind::complete && st.rng.uniform() < 0.5) {
        degraded = swapped(degraded);
      }
      ++step;
      double loss = 0.0;
      try {
        loss = train_step(st.model, *opt, batch, degraded, st.rng);
      } catch (const NumericError& e) {
        throw DivergenceError(step, e.what());
      }
      loss_sum += loss;
      ++steps;
    }
    st.epoch = epoch;
    EpochRecord rec{epoch, steps ? loss_sum / static_cast<double>(steps) : 0.0, {}};
    if (cfg.evaluate_every_epoch || epoch == cfg.epochs) {
      for (const auto& regime : evaluation_regimes(cfg)) {
        rec.reports.push_back(evaluate(st.model, data.test, regime));
        rec.reports.back().epoch = epoch;
      }
    }
    if (on_epoch) on_epoch(rec);
    st.history.push_back(std::move(rec));
  }
  return st;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointFormatVersion = 1;

inline std::string encode_checkpoint(const TrainState& st) {
  std::vector<Blob> blobs;
  for (const auto& p : st.model.parameters()) {
    blobs.push_back({p.name, p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()}});
  }
  nlohmann::json meta;
  meta["config"] = st.model.config();
  meta["epoch"] = st.epoch;
  meta["rng"] = {{"seed", st.rng.seed()}, {"position", st.rng.position()}};
  return encode_blob_file("edrl-checkpoint", kCheckpointFormatVersion, std::move(meta), blobs);
}

inline TrainState decode_checkpoint(const std::string& bytes) {
  const BlobFile file = decode_blob_file(bytes, "edrl-checkpoint", kCheckpointFormatVersion);
  EdrlConfig cfg;
  TrainState st;
  try {
    cfg = file.header.at("config").get<EdrlConfig>();
    st.epoch = file.header.at("epoch").get<std::size_t>();
    st.rng = Rng(file.header.at("rng").at("seed").get<std::uint64_t>(),
                 file.header.at("rng").at("position").get<std::uint64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint header: ") + e.what());
  }
  st.model = EdrlModel(cfg);
  for (auto& p : st.model.parameters()) {
    const Blob& blob = file.get(p.name);
    if (blob.shape != p.tensor.shape()) {
      throw DataError("checkpoint tensor '" + p.name + "' has shape " + shape_str(blob.shape) + ", expected " +
                      shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_values();
    std::copy(blob.values.begin(), blob.values.end(), dst.begin());
  }
  if (file.blobs.size() != st.model.parameters().size()) throw DataError("checkpoint holds unexpected tensors");
  return st;
}

inline void save_checkpoint(const std::string& path, const TrainState& st) { write_file_bytes(path, encode_checkpoint(st)); }

inline TrainState load_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

// ---------------------------------------------------------------------------
// Sweeps

struct SweepRow {
  double value = 0.0;
  std::uint64_t seed = 0;
  MetricsReport report;
};

/// Trains one model per common ratio and seed; scored under `cfg.regime`
/// after the final epoch.
inline std::vector<SweepRow> sweep_ratio(EdrlConfig cfg, const DatasetSplits& data, const std::vector<double>& ratios,
                                         const std::vector<std::uint64_t>& seeds) {
  cfg.evaluate_every_epoch = false;
  std::vector<SweepRow> rows;
  for (auto seed : seeds) {
    for (double p : ratios) {
      EdrlConfig run = cfg;
      run.common_ratio = p;
      run.seed = seed;
      const TrainState st = train(run, data);
      rows.push_back({p, seed, evaluate(st.model, data.test, cfg.regime)});
    }
  }
  return rows;
}

/// Trains once per seed and evaluates the test split at each noise variance
/// (or missing rate) on the configured modality.
inline std::vector<SweepRow> sweep_corruption(EdrlConfig cfg, const DatasetSplits& data, bool missing_rate,
                                              const std::vector<double>& values, const std::vector<std::uint64_t>& seeds) {
  cfg.evaluate_every_epoch = false;
  std::vector<SweepRow> rows;
  for (auto seed : seeds) {
    EdrlConfig run = cfg;
    run.seed = seed;
    const TrainState st = train(run, data);
    for (double v : values) {
      const Regime r = missing_rate ? Regime::missing(cfg.regime.modality, v) : Regime::noise(v, cfg.regime.modality);
      rows.push_back({v, seed, evaluate(st.model, data.test, r)});
    }
  }
  return rows;
}

}  // namespace edrl
