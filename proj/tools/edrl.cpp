// SPDX-License-Identifier: Apache-2.0
// Command-line front end: data generation, training, evaluation, sweeps and
// exports. Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric divergence.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "edrl/edrl.hpp"
#include "edrl/heatmap.hpp"
#include "json.hpp"

namespace {

using namespace edrl;
using nlohmann::json;

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDivergence = 3;

json read_json(const std::string& path) {
  try {
    return json::parse(read_file_bytes(path));
  } catch (const json::exception& e) {
    throw DataError("'" + path + "' is not valid JSON: " + e.what());
  }
}

EdrlConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  try {
    return read_json(path).get<EdrlConfig>();
  } catch (const json::exception& e) {
    throw DataError("bad config '" + path + "': " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  write_file_bytes(path, text);
}

json report_json(const EdrlConfig& cfg, const MetricsReport& r) {
  json j = to_json(r);
  j["config"] = cfg;
  j["seed"] = cfg.seed;
  return j;
}

std::vector<std::uint64_t> parse_seeds(const std::vector<std::string>& items) {
  std::vector<std::uint64_t> out;
  for (const auto& s : items) out.push_back(std::stoull(s));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Essence-point and disentangled representation learning on synthetic two-modality data"};
  app.require_subcommand(1);

  // generate-data
  std::string spec_path, data_out;
  auto* gen = app.add_subcommand("generate-data", "write a synthetic dataset file");
  gen->add_option("--spec", spec_path, "SyntheticSpec JSON (defaults when omitted)");
  gen->add_option("--out", data_out, "dataset file")->required();

  // train
  std::string cfg_path, data_path, ckpt_out, regime_text;
  bool fixed_regime = false;
  std::int64_t seed = -1;
  std::size_t epochs = 0;
  auto* tr = app.add_subcommand("train", "train a model and write a checkpoint");
  tr->add_option("--config", cfg_path, "EdrlConfig JSON (defaults when omitted)");
  tr->add_option("--data", data_path, "dataset file")->required();
  tr->add_option("--out", ckpt_out, "checkpoint file")->required();
  tr->add_option("--regime", regime_text, "complete | noise:<var>:<M1|M2> | missing:<M1|M2>[:<rate>]");
  tr->add_flag("--fixed-regime", fixed_regime, "never swap the corrupted modality during training");
  tr->add_option("--seed", seed, "override the config seed");
  tr->add_option("--epochs", epochs, "override the config epoch count");

  // eval
  std::string ckpt_path, report_path;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  ev->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  ev->add_option("--data", data_path, "dataset file")->required();
  ev->add_option("--regime", regime_text, "evaluation regime (defaults to the training regime)");
  ev->add_option("--report", report_path, "report JSON path (stdout when omitted)");

  // sweep
  std::string param, csv_out;
  std::vector<double> values;
  std::vector<std::string> seed_items{"1"};
  auto* sw = app.add_subcommand("sweep", "train and score over a parameter grid, one CSV row per value and seed");
  sw->add_option("--param", param, "p | noise_var | missing_rate")
      ->required()
      ->check(CLI::IsMember({"p", "noise_var", "missing_rate"}));
  sw->add_option("--values", values, "comma separated values")->required()->delimiter(',');
  sw->add_option("--seeds", seed_items, "comma separated training seeds")->delimiter(',');
  sw->add_option("--config", cfg_path, "EdrlConfig JSON");
  sw->add_option("--data", data_path, "dataset file (default synthetic spec when omitted)");
  sw->add_option("--regime", regime_text, "regime for p sweeps; modality for corruption sweeps");
  sw->add_option("--out", csv_out, "CSV path (stdout when omitted)");

  // export
  std::string what, format = "csv", export_out;
  auto* ex = app.add_subcommand("export", "export test-split embeddings or the cross-modal correlation matrix");
  ex->add_option("--what", what, "embeddings | correlation")->required()->check(CLI::IsMember({"embeddings", "correlation"}));
  ex->add_option("--format", format, "csv | png")->check(CLI::IsMember({"csv", "png"}));
  ex->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  ex->add_option("--data", data_path, "dataset file")->required();
  ex->add_option("--regime", regime_text, "regime applied to the test split (default complete)");
  ex->add_option("--out", export_out, "output path (stdout for csv when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) {
      SyntheticSpec spec;
      if (!spec_path.empty()) {
        try {
          spec = read_json(spec_path).get<SyntheticSpec>();
        } catch (const json::exception& e) {
          throw DataError("bad spec '" + spec_path + "': " + e.what());
        }
      }
      spec.validate();
      save_dataset(data_out, {spec, generate(spec)});
      return 0;
    }

    if (*tr) {
      EdrlConfig cfg = load_config(cfg_path);
      if (!regime_text.empty()) cfg.regime = Regime::parse(regime_text);
      if (fixed_regime) cfg.fixed_regime = true;
      if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
      if (epochs > 0) cfg.epochs = epochs;
      const DatasetFile data = load_dataset(data_path);
      const TrainState st = train(cfg, data.splits, [](const EpochRecord& rec) {
        std::cerr << "epoch " << rec.epoch << " loss " << rec.loss;
        for (const auto& r : rec.reports) std::cerr << "  " << r.regime << " acc " << r.accuracy;
        std::cerr << '\n';
      });
      save_checkpoint(ckpt_out, st);
      return 0;
    }

    if (*ev) {
      const TrainState st = load_checkpoint(ckpt_path);
      const DatasetFile data = load_dataset(data_path);
      const EdrlConfig& cfg = st.model.config();
      const Regime regime = regime_text.empty() ? cfg.regime : Regime::parse(regime_text);
      MetricsReport r = evaluate(st.model, data.splits.test, regime);
      r.epoch = st.epoch;
      write_text(report_path, report_json(cfg, r).dump(2) + "\n");
      return 0;
    }

    if (*sw) {
      EdrlConfig cfg = load_config(cfg_path);
      if (!regime_text.empty()) cfg.regime = Regime::parse(regime_text);
      const DatasetSplits data = data_path.empty() ? generate(SyntheticSpec{}) : load_dataset(data_path).splits;
      const auto seeds = parse_seeds(seed_items);
      std::vector<SweepRow> rows;
      if (param == "p") {
        rows = sweep_ratio(cfg, data, values, seeds);
      } else {
        rows = sweep_corruption(cfg, data, param == "missing_rate", values, seeds);
      }
      std::ostringstream csv;
      csv << "param,value,seed,acc,auc,f1\n";
      char buf[160];
      for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%.17g,%llu,%.17g,%.17g,%.17g\n", param.c_str(), r.value,
                      static_cast<unsigned long long>(r.seed), r.report.accuracy, r.report.auc, r.report.f1);
        csv << buf;
      }
      write_text(csv_out, csv.str());
      return 0;
    }

    if (*ex) {
      const TrainState st = load_checkpoint(ckpt_path);
      const DatasetFile data = load_dataset(data_path);
      const Regime regime = regime_text.empty() ? Regime::complete() : Regime::parse(regime_text);
      std::vector<double> matrix;
      std::size_t rows = 0, cols = 0;
      if (what == "correlation") {
        const CorrelationMatrix c = test_correlation(st.model, data.splits.test, regime);
        rows = c.full.dim(0);
        cols = c.full.dim(1);
        matrix.assign(c.full.values().begin(), c.full.values().end());
      } else {
        Rng rng = Rng(st.model.config().seed).substream(kEvalStream);
        const Inference inf = infer(st.model, apply_regime(data.splits.test, regime, rng));
        cols = inf.fused_width;
        rows = inf.fused.size() / cols;
        matrix = inf.fused;
      }
      if (format == "csv") {
        write_text(export_out, matrix_csv(matrix, rows, cols));
      } else {
        if (export_out.empty()) throw std::invalid_argument("--out is required for png exports");
        if (what == "embeddings") {
          double scale = 0.0;
          for (double v : matrix) scale = std::max(scale, std::abs(v));
          if (scale > 0.0)
            for (double& v : matrix) v /= scale;
        }
        write_heatmap_png(export_out, matrix, rows, cols);
      }
      return 0;
    }
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const UnusableInputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
