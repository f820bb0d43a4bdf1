// SPDX-License-Identifier: Apache-2.0
// Drives the built `edrl` binary end to end.

#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / ("edrl_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string at(const std::string& name) { return (workdir() / name).string(); }

int run(const std::string& args) {
  const std::string cmd = std::string(EDRL_CLI_PATH) + " " + args + " > " + at("stdout.txt") + " 2> " + at("stderr.txt");
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small dataset, config and checkpoint shared by the tests below.
void ensure_trained() {
  if (fs::exists(at("m.ckpt"))) return;
  std::ofstream(at("spec.json")) << R"({"samples_per_class": 40})";
  std::ofstream(at("cfg.json")) << R"({"epochs": 2, "width": 8, "classifier_hidden": 8, "batch_size": 16})";
  ASSERT_EQ(run("generate-data --spec " + at("spec.json") + " --out " + at("d.edrl")), 0);
  ASSERT_EQ(run("train --config " + at("cfg.json") + " --data " + at("d.edrl") + " --out " + at("m.ckpt") +
                " --regime missing:M2"),
            0)
      << slurp(at("stderr.txt"));
}

class RemoveWorkdir : public ::testing::Environment {
 public:
  void TearDown() override { fs::remove_all(workdir()); }
};

[[maybe_unused]] auto* const remove_workdir = ::testing::AddGlobalTestEnvironment(new RemoveWorkdir);

}  // namespace

TEST(Cli, TrainThenEvalWritesReport) {
  ensure_trained();
  EXPECT_NE(slurp(at("stderr.txt")).find("epoch 2"), std::string::npos);
  ASSERT_EQ(run("eval --ckpt " + at("m.ckpt") + " --data " + at("d.edrl") + " --regime noise:0.5:M2 --report " +
                at("r.json")),
            0);
  const auto j = nlohmann::json::parse(slurp(at("r.json")));
  for (const char* key : {"acc", "auc", "f1", "per_class", "regime", "seed", "epoch", "config"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_EQ(j["regime"], "noise:0.5:M2");
  EXPECT_EQ(j["epoch"], 2);
  EXPECT_GE(j["acc"].get<double>(), 0.0);
  EXPECT_LE(j["acc"].get<double>(), 1.0);
}

TEST(Cli, SameSeedSameDataFile) {
  ensure_trained();
  ASSERT_EQ(run("generate-data --spec " + at("spec.json") + " --out " + at("d2.edrl")), 0);
  EXPECT_EQ(slurp(at("d.edrl")), slurp(at("d2.edrl")));
}

TEST(Cli, SweepCsvHasOneRowPerValueAndSeed) {
  ensure_trained();
  ASSERT_EQ(run("sweep --param noise_var --values 0,1 --seeds 1,2 --config " + at("cfg.json") + " --data " +
                at("d.edrl") + " --regime missing:M2 --out " + at("s.csv")),
            0)
      << slurp(at("stderr.txt"));
  std::istringstream csv(slurp(at("s.csv")));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "param,value,seed,acc,auc,f1");
  int rows = 0;
  while (std::getline(csv, line)) {
    EXPECT_EQ(line.rfind("noise_var,", 0), 0u) << line;
    ++rows;
  }
  EXPECT_EQ(rows, 4);
}

TEST(Cli, Exports) {
  ensure_trained();
  ASSERT_EQ(run("export --what correlation --ckpt " + at("m.ckpt") + " --data " + at("d.edrl") + " --out " +
                at("c.csv")),
            0);
  std::istringstream csv(slurp(at("c.csv")));
  std::string line;
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 8);  // width 8
  ASSERT_EQ(run("export --what embeddings --format png --ckpt " + at("m.ckpt") + " --data " + at("d.edrl") +
                " --out " + at("e.png")),
            0);
  EXPECT_EQ(slurp(at("e.png")).substr(0, 8), std::string("\x89PNG\r\n\x1a\n"));
}

TEST(Cli, ExitCodes) {
  ensure_trained();
  EXPECT_EQ(run("no-such-command"), 1);
  EXPECT_EQ(run("train --data " + at("d.edrl") + " --out " + at("x.ckpt") + " --regime bogus"), 1);
  EXPECT_EQ(run("sweep --param q --values 1"), 1);
  EXPECT_EQ(run("eval --ckpt " + at("m.ckpt") + " --data " + at("missing.edrl")), 2);

  std::string bytes = slurp(at("d.edrl"));
  bytes[bytes.size() - 50] ^= 0x04;
  std::ofstream(at("flipped.edrl"), std::ios::binary) << bytes;
  EXPECT_EQ(run("eval --ckpt " + at("m.ckpt") + " --data " + at("flipped.edrl")), 2);
  EXPECT_NE(slurp(at("stderr.txt")).find("CRC"), std::string::npos) << slurp(at("stderr.txt"));

  std::ofstream(at("huge_lr.json")) << R"({"epochs": 1, "width": 8, "classifier_hidden": 8,
                                          "optimizer": {"kind": "sgd", "lr": 1e200}})";
  EXPECT_EQ(run("train --config " + at("huge_lr.json") + " --data " + at("d.edrl") + " --out " + at("y.ckpt")), 3);
}
