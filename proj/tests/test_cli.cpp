#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "bft/experiment.hpp"
#include "cli.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = bft::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("bft_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json minimal_config(int steps = 5) {
  json doc = json::parse(R"({
    "schema_version": 1,
    "model": {"vocab_size": 16, "context_length": 12, "embed_dim": 16, "layers": 1, "heads": 2, "seed": 1},
    "objective": {"kind": "BFT", "window": 2},
    "train": {"learning_rate": 0.003, "batch_size": 8, "seed": 1},
    "data": {"synthetic": {"task": "copy", "vocab_size": 16, "min_length": 2, "max_length": 4, "seed": 3},
             "train_samples": 32, "eval_samples": 8}
  })");
  doc["train"]["steps"] = steps;
  return doc;
}

fs::path write(const fs::path& path, const json& doc) {
  std::ofstream(path) << doc.dump(2);
  return path;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int count_lines(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

TEST(CliTrain, MinimalConfigWritesOneMetricsLinePerStep) {
  const fs::path dir = scratch("train");
  const auto cfg = write(dir / "run.json", minimal_config(7));
  const Result r = run({"train", cfg.string(), "--out", (dir / "run").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_lines(dir / "run" / "metrics.jsonl"), 7);
  EXPECT_TRUE(fs::exists(dir / "run" / "config.json"));
  EXPECT_TRUE(fs::exists(dir / "run" / "checkpoint_final.bin"));
  EXPECT_TRUE(fs::exists(dir / "run" / "eval.json"));
  const json resolved = json::parse(slurp(dir / "run" / "config.json"));
  EXPECT_EQ(resolved.at("train").at("weight_decay"), 0.01);
  EXPECT_EQ(resolved.at("schema_version"), 1);
}

TEST(CliTrain, RerunIsByteIdentical) {
  const fs::path dir = scratch("rerun");
  const auto cfg = write(dir / "run.json", minimal_config(4));
  ASSERT_EQ(run({"train", cfg.string(), "-o", (dir / "a").string()}).code, 0);
  ASSERT_EQ(run({"train", cfg.string(), "-o", (dir / "b").string()}).code, 0);
  for (const char* name : {"metrics.jsonl", "metrics.csv", "checkpoint_final.bin", "eval.json", "config.json"})
    EXPECT_EQ(slurp(dir / "a" / name), slurp(dir / "b" / name)) << name;
}

TEST(CliTrain, UnknownObjectiveListsAllowedSet) {
  const fs::path dir = scratch("bad_objective");
  json doc = minimal_config();
  doc["objective"]["kind"] = "PPO";
  const Result r = run({"train", write(dir / "run.json", doc).string(), "-o", (dir / "run").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("objective.kind"), std::string::npos) << r.err;
  for (const char* name : {"SFT", "DFT", "BFT", "FOCAL"}) EXPECT_NE(r.err.find(name), std::string::npos) << r.err;
}

TEST(CliTrain, SchemaViolationsNameFieldAndConstraint) {
  const fs::path dir = scratch("schema");
  struct Case {
    json patch;
    std::string field;
  } cases[] = {
      {{{"schema_version", 2}}, "schema_version"},
      {{{"train", {{"learning_rate", -1.0}}}}, "train"},
      {{{"train", {{"batch_size", "eight"}}}}, "train.batch_size"},
      {{{"model", {{"heads", 3}}}}, "model"},
      {{{"model", {{"colour", "red"}}}}, "model.colour"},
      {{{"data", {{"synthetic", {{"vocab_size", 20}}}}}}, "vocab_size"},
  };
  for (const auto& c : cases) {
    json doc = minimal_config();
    doc.merge_patch(c.patch);
    const Result r = run({"train", write(dir / "run.json", doc).string(), "-o", (dir / "run").string()});
    EXPECT_EQ(r.code, 1) << c.patch.dump();
    EXPECT_NE(r.err.find(c.field), std::string::npos) << r.err;
  }
  EXPECT_FALSE(fs::exists(dir / "run"));
}

TEST(CliTrain, MissingFileAndBadJsonAreValidationErrors) {
  const fs::path dir = scratch("missing");
  EXPECT_EQ(run({"train", (dir / "nope.json").string(), "-o", (dir / "run").string()}).code, 1);
  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_EQ(run({"train", (dir / "broken.json").string(), "-o", (dir / "run").string()}).code, 1);
}

TEST(CliArgs, UnknownSubcommandAndMissingArgumentsFail) {
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"train"}).code, 1);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST(CliEval, ScoresACheckpoint) {
  const fs::path dir = scratch("eval");
  const auto cfg = write(dir / "run.json", minimal_config(3));
  ASSERT_EQ(run({"train", cfg.string(), "-o", (dir / "run").string()}).code, 0);
  const Result r = run({"eval", cfg.string(), "--checkpoint", (dir / "run" / "checkpoint_final.bin").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json result = json::parse(r.out);
  EXPECT_EQ(result.at("total"), 8);
  EXPECT_EQ(result.at("easy").get<int>() + result.at("hard").get<int>(), 8);
  EXPECT_EQ(result, json::parse(slurp(dir / "run" / "eval.json")));
}

TEST(CliGradcheck, DefaultRunPasses) {
  const Result r = run({"gradcheck"});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("all checks passed"), std::string::npos);
  EXPECT_NE(r.out.find("square"), std::string::npos);
  EXPECT_NE(r.out.find("micro_model_sft"), std::string::npos);
  EXPECT_NE(r.out.find("bft_closed_form"), std::string::npos);
}

TEST(CliGradcheck, InjectedFaultIsReported) {
  const Result r = run({"gradcheck", "--inject-fault"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("gelu"), std::string::npos);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
}

TEST(CliSweep, TwoObjectivesOneSeedGiveTwoRows) {
  const fs::path dir = scratch("sweep");
  const json grid{{"schema_version", 1},
                  {"base", minimal_config(4)},
                  {"objectives", {"SFT", "BFT"}},
                  {"windows", {2}},
                  {"seeds", {1}}};
  const Result r = run({"sweep", write(dir / "grid.json", grid).string(), "-o", (dir / "out").string()});
  ASSERT_EQ(r.code, 0) << r.err << r.out;
  const json report = json::parse(slurp(dir / "out" / "report.json"));
  ASSERT_EQ(report.at("rows").size(), 2u);
  EXPECT_EQ(report.at("rows")[0].at("objective"), "SFT");
  EXPECT_EQ(report.at("rows")[1].at("objective"), "BFT-2");
  for (const char* name : {"summary.csv", "cells.csv", "window_accuracy.dat", "loss_SFT.dat", "loss_BFT-2.dat"})
    EXPECT_TRUE(fs::exists(dir / "out" / name)) << name;
  EXPECT_TRUE(fs::exists(dir / "out" / "cells" / "BFT-2__seed1" / "config.json"));
  EXPECT_EQ(count_lines(dir / "out" / "loss_SFT.dat"), 1 + 4);
}

TEST(CliSweep, FullyAblatedBftRowEqualsSftRow) {
  const fs::path dir = scratch("sweep_degenerate");
  const json grid{{"schema_version", 1},
                  {"base", minimal_config(6)},
                  {"objectives", {"SFT", "BFT-w/o-sample-w/o-token"}},
                  {"seeds", {1, 2}}};
  ASSERT_EQ(run({"sweep", write(dir / "grid.json", grid).string(), "-o", (dir / "out").string()}).code, 0);
  for (int seed : {1, 2}) {
    const fs::path cells = dir / "out" / "cells";
    const std::string suffix = "__seed" + std::to_string(seed);
    std::ifstream a(cells / ("SFT" + suffix) / "metrics.jsonl");
    std::ifstream b(cells / ("BFT-w_o-sample-w_o-token" + suffix) / "metrics.jsonl");
    std::string la, lb;
    int lines = 0;
    while (std::getline(a, la) && std::getline(b, lb)) {
      EXPECT_EQ(json::parse(la).at("loss"), json::parse(lb).at("loss"));
      ++lines;
    }
    EXPECT_EQ(lines, 6);
    EXPECT_EQ(slurp(cells / ("SFT" + suffix) / "checkpoint_final.bin"),
              slurp(cells / ("BFT-w_o-sample-w_o-token" + suffix) / "checkpoint_final.bin"));
  }
  const json report = json::parse(slurp(dir / "out" / "report.json"));
  EXPECT_EQ(report.at("rows")[0].at("per_seed"), report.at("rows")[1].at("per_seed"));
}

TEST(CliSweep, FailingCellIsRecordedAndOthersContinue) {
  const fs::path dir = scratch("sweep_failure");
  const json grid{{"schema_version", 1}, {"base", minimal_config(3)}, {"objectives", {"SFT", "BFT"}},
                  {"windows", {2}}, {"seeds", {1}}};
  write(dir / "grid.json", grid);
  // A file where the BFT cell wants its directory.
  fs::create_directories(dir / "out" / "cells");
  std::ofstream(dir / "out" / "cells" / "BFT-2__seed1") << "occupied";
  const Result r = run({"sweep", (dir / "grid.json").string(), "-o", (dir / "out").string()});
  EXPECT_EQ(r.code, 3);
  const json report = json::parse(slurp(dir / "out" / "report.json"));
  EXPECT_EQ(report.at("rows")[0].at("per_seed").size(), 1u);
  EXPECT_EQ(report.at("rows")[1].at("failures").size(), 1u);
}

TEST(CliSweep, InvalidGridIsRejected) {
  const fs::path dir = scratch("sweep_invalid");
  const json grid{{"schema_version", 1}, {"base", minimal_config(3)}, {"objectives", json::array()}, {"seeds", {1}}};
  const Result r = run({"sweep", write(dir / "grid.json", grid).string(), "-o", (dir / "out").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("objectives"), std::string::npos) << r.err;
}

TEST(CliReport, SingleRunPassesThrough) {
  const fs::path dir = scratch("report_single");
  ASSERT_EQ(run({"train", write(dir / "run.json", minimal_config(4)).string(), "-o", (dir / "run").string()}).code, 0);
  const Result r = run({"report", (dir / "run").string(), "--json", (dir / "report.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("BFT-2"), std::string::npos) << r.out;
  const json report = json::parse(slurp(dir / "report.json"));
  ASSERT_EQ(report.at("runs").size(), 1u);
  std::ifstream metrics(dir / "run" / "metrics.jsonl");
  std::string line, last;
  while (std::getline(metrics, line)) last = line;
  EXPECT_EQ(report.at("runs")[0].at("final_loss"), json::parse(last).at("loss"));
}

TEST(CliReport, PairIncludesRuntimeRatioAndRecomputableMeans) {
  const fs::path dir = scratch("report_pair");
  json sft = minimal_config(4);
  sft["objective"] = {{"kind", "SFT"}};
  ASSERT_EQ(run({"train", write(dir / "sft.json", sft).string(), "-o", (dir / "sft").string()}).code, 0);
  ASSERT_EQ(run({"train", write(dir / "bft.json", minimal_config(4)).string(), "-o", (dir / "bft").string()}).code, 0);
  const Result r = run({"report", (dir / "sft").string(), (dir / "bft").string(), "--csv", (dir / "t.csv").string(),
                        "--json", (dir / "t.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("rt_ratio"), std::string::npos) << r.out;
  EXPECT_NE(slurp(dir / "t.csv").find("runtime_ratio"), std::string::npos);
  const json report = json::parse(slurp(dir / "t.json"));
  ASSERT_EQ(report.at("runs").size(), 2u);
  EXPECT_DOUBLE_EQ(report.at("runs")[0].at("runtime_ratio").get<double>(), 1.0);
  EXPECT_TRUE(report.at("runs")[1].at("runtime_ratio").is_number());

  // Per-label means recomputed from the per-run eval files.
  for (const auto& [label, run_dir] : {std::pair{"SFT", "sft"}, std::pair{"BFT-2", "bft"}}) {
    const json eval = json::parse(slurp(dir / run_dir / "eval.json"));
    const double accuracy = eval.at("correct").get<double>() / eval.at("total").get<double>();
    EXPECT_DOUBLE_EQ(report.at("means").at(label).at("accuracy").get<double>(), accuracy);
  }
}

TEST(CliReport, MissingMetricsAreSkippedWithWarning) {
  const fs::path dir = scratch("report_missing");
  ASSERT_EQ(run({"train", write(dir / "run.json", minimal_config(2)).string(), "-o", (dir / "run").string()}).code, 0);
  fs::create_directories(dir / "empty");
  const Result r = run({"report", (dir / "run").string(), (dir / "empty").string()});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("skipped"), std::string::npos) << r.err;
  EXPECT_EQ(run({"report", (dir / "empty").string()}).code, 1);
}

TEST(CliOverhead, SelfComparisonIsNearOne) {
  const fs::path dir = scratch("overhead");
  const auto cfg = write(dir / "run.json", minimal_config());
  const Result r = run({"measure-overhead", cfg.string(), "--numerator", "SFT", "--denominator", "SFT", "--steps", "40",
                        "--warmup", "5"});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string key = "median step ratio: ";
  const auto pos = r.out.find(key);
  ASSERT_NE(pos, std::string::npos) << r.out;
  const std::string value = r.out.substr(pos + key.size());
  EXPECT_NEAR(std::stod(value), 1.0, 0.3);
  EXPECT_EQ(value.find('\n'), 5u);  // three decimals
}

TEST(CliOverhead, UnknownObjectiveIsAValidationError) {
  const fs::path dir = scratch("overhead_bad");
  const auto cfg = write(dir / "run.json", minimal_config());
  EXPECT_EQ(run({"measure-overhead", cfg.string(), "--numerator", "GRPO"}).code, 1);
}

TEST(CliTrain, ShareGptPathsResolveAgainstConfigDirectory) {
  const fs::path dir = scratch("sharegpt");
  fs::create_directories(dir / "data");
  std::ofstream(dir / "data" / "train.json")
      << R"([{"conversations": [{"from": "human", "value": "hi"}, {"from": "gpt", "value": "hello"}]},
             {"conversations": [{"from": "human", "value": "2+2="}, {"from": "gpt", "value": "4"}]}])";
  const json doc{{"schema_version", 1},
                 {"model", {{"vocab_size", 259}, {"context_length", 16}, {"embed_dim", 8}, {"layers", 1}, {"heads", 2}}},
                 {"objective", {{"kind", "SFT"}}},
                 {"train", {{"steps", 3}, {"batch_size", 2}}},
                 {"data", {{"sharegpt_train", "data/train.json"}, {"sharegpt_eval", "data/train.json"}}}};
  const auto cfg = write(dir / "run.json", doc);
  const Result r = run({"train", cfg.string(), "-o", (dir / "run").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_lines(dir / "run" / "metrics.jsonl"), 3);
  EXPECT_EQ(json::parse(slurp(dir / "run" / "eval.json")).at("total"), 2);
}

TEST(CliTrain, BundledShareGptExampleLoads) {
  const bft::RunConfig cfg = bft::load_run_config(fs::path(BFT_SOURCE_DIR) / "configs" / "sharegpt_qa.json");
  const bft::Dataset data = bft::load_dataset(cfg.data, cfg.model.context_length);
  EXPECT_EQ(data.train.size(), 72u);
  EXPECT_EQ(data.eval.size(), 16u);
  EXPECT_TRUE(data.warnings.empty());
}
