#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "spwt/cli.hpp"
#include "test_util.hpp"

using namespace spwt;
using spwt::testing::random_matrix;
using spwt::testing::small_config;
using spwt::testing::TempDir;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "spwt");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string hash_line(const std::string& out) {
  const auto at = out.find("config-hash: ");
  return at == std::string::npos ? std::string{} : out.substr(at, out.find('\n', at) - at);
}

void write_config(const fs::path& p, const ExperimentConfig& c) {
  auto j = to_json(c);
  j.erase("output_dir");
  write_text_atomic(p, dump_json(j));
}

// Six 48x48 layers with distinct heavy-tailed spectra.
fs::path six_layer_checkpoint(const TempDir& dir) {
  ContainerFile c;
  for (int l = 0; l < 6; ++l) {
    auto w = random_matrix(48, 48, 100 + l);
    // Scaling a few columns makes the tail heavier by a layer-dependent amount.
    for (std::size_t i = 0; i < 48; ++i)
      for (int k = 0; k <= l; ++k) w(i, k) *= 3.0 + l;
    c.entries.push_back(Tensor::from_f64("fc" + std::to_string(l) + ".weight", {48, 48}, w.data()));
    c.entries.push_back(Tensor::from_f64("fc" + std::to_string(l) + ".bias", {48}, std::vector<double>(48, 0.0)));
  }
  const auto p = dir / "six.spwt";
  write_container(p, c);
  return p;
}

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(invoke({"--help"}).code, 0);
  EXPECT_EQ(invoke({}).code, 2);
  EXPECT_EQ(invoke({"bogus"}).code, 2);
  EXPECT_EQ(invoke({"analyze"}).code, 2);
  EXPECT_EQ(invoke({"analyze", "x.spwt", "--freeze-ratio", "1.5"}).code, 2);
}

TEST(Cli, AnalyzeFreezesHalfOfSixLayers) {
  TempDir dir;
  const auto ck = six_layer_checkpoint(dir);
  auto r = invoke({"analyze", ck.string(), "--out", (dir / "a").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("frozen 3 of 6 layers"), std::string::npos);
  std::ifstream in(dir / "a/plan.json");
  const auto plan = freeze_plan_from_json(json::parse(in));
  EXPECT_EQ(plan.frozen_count(), 3u);
  EXPECT_EQ(plan.layer_names, (std::vector<std::string>{"fc0", "fc1", "fc2", "fc3", "fc4", "fc5"}));
  EXPECT_TRUE(fs::exists(dir / "a/spectrum.csv"));
  EXPECT_TRUE(fs::exists(dir / "a/spectrum.json"));

  r = invoke({"analyze", ck.string(), "--freeze-ratio", "0", "--out", (dir / "b").string()});
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("frozen 0 of 6 layers"), std::string::npos);

  // Same inputs print the same hash.
  EXPECT_EQ(hash_line(invoke({"analyze", ck.string(), "--out", (dir / "c").string()}).out),
            hash_line(invoke({"analyze", ck.string(), "--out", (dir / "d").string()}).out));
}

TEST(Cli, AnalyzeWithMask) {
  TempDir dir;
  const auto ck = six_layer_checkpoint(dir);
  std::vector<LayerShape> shapes;
  for (int l = 0; l < 6; ++l) shapes.push_back({"fc" + std::to_string(l), 48, 48});
  save_mask(dir / "m.spwt", random_mask(shapes, 0.5, 3));
  const auto r = invoke({"analyze", ck.string(), "--mask", (dir / "m.spwt").string(), "--out", (dir / "a").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  save_mask(dir / "short.spwt", random_mask({shapes[0]}, 0.5, 3));
  EXPECT_EQ(invoke({"analyze", ck.string(), "--mask", (dir / "short.spwt").string()}).code, 2);
}

TEST(Cli, AnalyzeRejectsCorruptAndReportsFitFailures) {
  TempDir dir;
  const auto ck = six_layer_checkpoint(dir);
  auto bytes = read_bytes(ck);
  bytes[0] = 'X';
  write_bytes_atomic(dir / "bad.spwt", bytes);
  const auto r = invoke({"analyze", (dir / "bad.spwt").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("magic"), std::string::npos) << r.err;
  EXPECT_EQ(invoke({"analyze", (dir / "missing.spwt").string()}).code, 2);

  auto c = read_container(ck);
  c.entries[4] = Tensor::from_f64("fc2.weight", {48, 48}, std::vector<double>(48 * 48, 0.0));
  write_container(dir / "zero.spwt", c);
  const auto z = invoke({"analyze", (dir / "zero.spwt").string(), "--out", (dir / "z").string()});
  EXPECT_EQ(z.code, 3);
  EXPECT_NE(z.err.find("fc2"), std::string::npos) << z.err;
}

TEST(Cli, FlopsLedger) {
  TempDir dir;
  auto cfg = small_config();
  cfg.model = ModelSpec::mlp({16, 16, 16, 16, 16, 16, 16});
  write_config(dir / "cfg.json", cfg);
  const auto plan = make_freeze_plan(cfg.model.layer_names, std::vector<double>{1, 6, 2, 5, 3, 4}, 0.5);
  write_text_atomic(dir / "plan.json", dump_json(to_json(plan)));
  // Batch 10 keeps 0.1 C integral for these layers.
  const auto r = invoke({"flops", (dir / "cfg.json").string(), "--plan", (dir / "plan.json").string(), "--sparsity", "0.1",
                         "--batch", "10", "--out", (dir / "f").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("ratio vs dense inference 1.15\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("ratio vs dense training 0.3833333333333333"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(dir / "f/flops.csv"));

  auto other = plan;
  other.layer_names[0] = "x";
  write_text_atomic(dir / "other.json", dump_json(to_json(other)));
  EXPECT_EQ(invoke({"flops", (dir / "cfg.json").string(), "--plan", (dir / "other.json").string()}).code, 2);
}

TEST(Cli, ConfigErrors) {
  TempDir dir;
  EXPECT_EQ(invoke({"prune", (dir / "none.json").string()}).code, 2);
  write_text_atomic(dir / "typo.json", R"({"imp": {"per_round": 0.1}})");
  const auto r = invoke({"prune", (dir / "typo.json").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("per_round"), std::string::npos);
  write_text_atomic(dir / "bad.json", "{not json");
  EXPECT_EQ(invoke({"run", (dir / "bad.json").string()}).code, 2);
}

TEST(Cli, SeedOverrideChangesHash) {
  TempDir dir;
  write_config(dir / "cfg.json", small_config());
  const auto flops = [&](std::vector<std::string> extra) {
    std::vector<std::string> args{"flops", (dir / "cfg.json").string(), "--out", (dir / "f").string()};
    args.insert(args.end(), extra.begin(), extra.end());
    return hash_line(invoke(args).out);
  };
  EXPECT_EQ(flops({}), flops({}));
  EXPECT_NE(flops({"--seed", "1"}), flops({}));
  EXPECT_NE(flops({"--seed", "1"}), flops({"--seed", "2"}));
  EXPECT_EQ(flops({"--seed", "1"}), flops({"--seed", "1"}));
}

TEST(Cli, StagesEndToEnd) {
  TempDir dir;
  auto cfg = small_config();
  write_config(dir / "cfg.json", cfg);
  const auto run = (dir / "run").string();
  auto r = invoke({"prune", (dir / "cfg.json").string(), "--out", run});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("rounds 1, remaining fraction 0.5"), std::string::npos) << r.out;

  r = invoke({"report", run});
  EXPECT_EQ(r.code, 5);
  EXPECT_NE(r.err.find("finetune/spectrum.csv"), std::string::npos);

  r = invoke({"finetune", (dir / "cfg.json").string(), "--mask", run + "/prune/mask.spwt", "--checkpoint",
              run + "/prune/checkpoint.spwt", "--out", run});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("frozen 2 of 4 layers"), std::string::npos) << r.out;

  r = invoke({"transfer", (dir / "cfg.json").string(), "--mask", run + "/prune/mask.spwt", "--checkpoint",
              run + "/prune/checkpoint.spwt", "--out", run});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("coverage 1 (4 matched, 0 dense)"), std::string::npos) << r.out;

  r = invoke({"report", run});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto manifest = read_bytes(dir / "run/report/manifest.json");
  EXPECT_EQ(invoke({"verify", run}).code, 0);
  ASSERT_EQ(invoke({"report", run}).code, 0);
  EXPECT_EQ(read_bytes(dir / "run/report/manifest.json"), manifest);

  {
    std::ofstream out(dir / "run/prune/history.csv", std::ios::app);
    out << "x\n";
  }
  r = invoke({"verify", run});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("digest mismatch: prune/history.csv"), std::string::npos);

  EXPECT_EQ(invoke({"verify", (dir / "nowhere").string()}).code, 5);
}

TEST(Cli, RunIsReproducible) {
  TempDir dir;
  write_config(dir / "cfg.json", small_config());
  ASSERT_EQ(invoke({"run", (dir / "cfg.json").string(), "--out", (dir / "a").string()}).code, 0);
  ASSERT_EQ(invoke({"run", (dir / "cfg.json").string(), "--out", (dir / "b").string()}).code, 0);
  EXPECT_EQ(read_bytes(dir / "a/report/manifest.json"), read_bytes(dir / "b/report/manifest.json"));
}

TEST(Cli, FullDensityPruneIsANoOp) {
  TempDir dir;
  auto cfg = small_config();
  cfg.imp.target_sparsity = 1.0;
  write_config(dir / "cfg.json", cfg);
  const auto r = invoke({"prune", (dir / "cfg.json").string(), "--out", (dir / "run").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("rounds 0, remaining fraction 1"), std::string::npos);
}
