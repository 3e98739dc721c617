#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bft/data.hpp"
#include "bft/gradcheck.hpp"
#include "bft/model.hpp"
#include "bft/trainer.hpp"

namespace bft {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Configuration

struct DataConfig {
  std::optional<SyntheticTaskSpec> synthetic;
  Index train_samples = 256;
  Index eval_samples = 64;
  std::string sharegpt_train;
  std::string sharegpt_eval;
  TextEncoding encoding = TextEncoding::bytes;
};

/// Optional SFT stage run before the configured objective, standing in for a
/// pretrained starting point. Shares the train section's optimizer settings;
/// the optimizer state is reset between stages.
struct PretrainConfig {
  Index steps = 0;
  double learning_rate = 1e-3;
  Index batch_size = 16;
  bool easy_only = true;  // restrict to samples not flagged hard
};

/// One training run. Serialised form (schema_version 1):
///
///   { "schema_version": 1,
///     "model":     { vocab_size, context_length, embed_dim, layers, heads, seed },
///     "objective": { kind, window, epsilon, token_weighting, sample_weighting,
///                    focal_gamma, window_all_positions },
///     "train":     { learning_rate, beta1, beta2, adam_epsilon, weight_decay,
///                    batch_size, steps, warmup_steps, clip_norm, seed,
///                    checkpoint_interval },
///     "data":      { "synthetic": { task, vocab_size, min_length, max_length,
///                                   hard_fraction, seed, common_repeats, label_noise },
///                    "train_samples", "eval_samples" }
///                | { "sharegpt_train": path, "sharegpt_eval": path,
///                    "encoding": "bytes" | "symbols" },
///     "pretrain":  { steps, learning_rate, batch_size, easy_only } }
///
/// Every key is optional except schema_version and the data source; unknown
/// keys are rejected.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  PretrainConfig pretrain;

  /// ValidationError names the offending field and its constraint.
  static RunConfig from_json(const json& doc);
  json to_json() const;
  void validate() const;
};

/// Relative ShareGPT paths resolve against the config file's directory.
RunConfig load_run_config(const fs::path& path);

/// Applies a grid objective name: SFT, DFT, BFT, BFT-w/o-sample, BFT-w/o-token,
/// BFT-w/o-sample-w/o-token, FOCAL.
ObjectiveConfig objective_from_name(const std::string& name, Index window,
                                    const ObjectiveConfig& base);

// ---------------------------------------------------------------------------
// Data and evaluation

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> eval;
  SpecialTokens special;
  std::vector<std::string> warnings;  // rejected samples
};

/// Samples whose supervised span cannot fit the context are dropped with a warning.
Dataset load_dataset(const DataConfig& config, Index context_length);

struct EvalResult {
  double loss = 0.0;  // mean per-sample token cross-entropy
  Index total = 0, easy = 0, hard = 0;
  Index correct = 0, easy_correct = 0, hard_correct = 0;

  double accuracy() const;
  double easy_accuracy() const;
  double hard_accuracy() const;
  json to_json() const;
  static EvalResult from_json(const json& j);
};

/// Greedy-decode exact match: a sample is correct when the argmax at every
/// supervised position reproduces the reference token given the reference
/// prefix, which is exactly when greedy decoding reproduces the response.
EvalResult evaluate(const ModelParams& params, std::span<const Sample> samples,
                    const SpecialTokens& special, Index batch_size = 64);

/// Autoregressive argmax continuation of BOS + prompt, stopping after the
/// separator or `max_new` tokens.
TokenIds greedy_decode(const ModelParams& params, std::span<const std::int32_t> prompt,
                       Index max_new, const SpecialTokens& special);

// ---------------------------------------------------------------------------
// Runs

struct RunSummary {
  fs::path dir;
  RunConfig config;
  EvalResult eval;
  std::vector<MetricsRecord> metrics;
};

/// Initial weights for the main stage: init_model, then the SFT pretraining
/// stage when configured (outputs under run_dir/pretrain/).
ModelParams pretrained_model(const RunConfig& config, const Dataset& data, const fs::path& run_dir);

/// Writes config.json, metrics, checkpoints and eval.json under `run_dir`.
/// A pretraining stage, when configured, writes its own outputs under
/// run_dir/pretrain/ and the main stage starts from its final weights.
RunSummary run_training(const RunConfig& config, const fs::path& run_dir);

struct GridCell {
  std::string label;  // objective label, e.g. BFT-16
  std::uint64_t seed = 0;
  RunConfig config;
};

/// { "schema_version": 1, "base": <run config>, "objectives": [...],
///   "windows": [...], "seeds": [...] }
struct ExperimentGrid {
  RunConfig base;
  std::vector<std::string> objectives;
  std::vector<Index> windows;
  std::vector<std::uint64_t> seeds;

  static ExperimentGrid from_json(const json& doc);
  json to_json() const;
  /// Windowed objectives expand over `windows`; every cell runs once per seed.
  std::vector<GridCell> cells() const;
};

struct ReportRow {
  std::string label;
  std::vector<std::uint64_t> seeds;
  std::vector<EvalResult> per_seed;
  std::vector<std::string> failures;

  double mean(double (EvalResult::*metric)() const) const;
  double stddev(double (EvalResult::*metric)() const) const;
  double mean_loss() const;
};

struct EvalReport {
  std::vector<ReportRow> rows;
  const ReportRow* find(const std::string& label) const;
  json to_json() const;
};

/// Trains and evaluates every cell under out_dir/cells/, then writes
/// report.json, summary.csv, cells.csv and plot-ready .dat files. A failing
/// cell is recorded and the rest continue.
EvalReport run_sweep(const ExperimentGrid& grid, const fs::path& out_dir, std::ostream& log);

// ---------------------------------------------------------------------------
// Runtime overhead

struct OverheadResult {
  double ratio = 0.0;  // median numerator step time / median denominator step time
  double median_numerator = 0.0;
  double median_denominator = 0.0;
  Index measured_steps = 0;
};

/// Trains both configurations on identical model and data, alternating steps,
/// and compares median per-step wall time after `warmup` steps.
OverheadResult measure_overhead(const RunConfig& numerator, const RunConfig& denominator,
                                Index steps = 200, Index warmup = 20);

// ---------------------------------------------------------------------------
// Reports over finished runs

struct RunDigest {
  fs::path dir;
  std::string label;
  Index steps = 0;
  double final_loss = 0.0;
  double max_importance_weight = 0.0;
  double median_step_seconds = 0.0;
  std::optional<double> runtime_ratio;  // vs the first SFT run, when present
  std::optional<EvalResult> eval;
};

/// Reads metrics.jsonl, timing.tsv, config.json and eval.json from each
/// directory. Directories without metrics are skipped with a warning.
std::vector<RunDigest> digest_runs(const std::vector<fs::path>& run_dirs, std::ostream& warnings);
std::string format_report_table(const std::vector<RunDigest>& digests);
std::string format_report_csv(const std::vector<RunDigest>& digests);
json report_json(const std::vector<RunDigest>& digests);

// ---------------------------------------------------------------------------
// Gradient checks

struct GradcheckOptions {
  bool full = false;          // more random trials per primitive
  bool inject_fault = false;  // flips the GELU backward rule
  std::uint64_t seed = 7;
};

/// Finite-difference checks of every primitive, the micro model end to end,
/// and the closed-form BFT logit gradient.
std::vector<GradCheckResult> run_gradcheck_suite(const GradcheckOptions& options);

}  // namespace bft
