#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "bft/data.hpp"
#include "bft/errors.hpp"
#include "bft/model.hpp"
#include "bft/objectives.hpp"

namespace bft {

struct TrainConfig {
  ObjectiveConfig objective;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double weight_decay = 0.01;
  Index batch_size = 16;
  Index steps = 100;
  Index warmup_steps = 0;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  /// Save a checkpoint every this many steps; 0 disables intermediate checkpoints.
  Index checkpoint_interval = 0;

  void validate() const;
  /// Linear warmup to learning_rate, then constant.
  double learning_rate_at(Index step) const;
};

struct AdamState {
  std::vector<Vector> first_moment;
  std::vector<Vector> second_moment;
  Index step = 0;

  static AdamState zeros_like(const ModelParams& params);
  bool operator==(const AdamState&) const = default;
};

/// One decoupled-weight-decay Adam update with bias correction. Weight decay
/// applies to matrices (rank >= 2) only. Throws NumericError naming the
/// parameter on a non-finite gradient, leaving params and state untouched.
void adam_step(ModelParams& params, std::span<const Vector> gradients, AdamState& state,
               const TrainConfig& config, double learning_rate);

/// Rescales to a global L2 norm of at most `max_norm`; returns the norm before clipping.
double clip_gradients(std::vector<Vector>& gradients, double max_norm);

struct MetricsRecord {
  Index step = 0;
  double loss = 0.0;
  std::optional<double> sample_coefficient_mean;
  std::optional<double> sample_coefficient_min;
  std::optional<double> sample_coefficient_max;
  double mean_token_confidence = 0.0;
  double max_importance_weight = 0.0;
  double grad_norm = 0.0;
  double learning_rate = 0.0;
  double wall_seconds = 0.0;

  /// Deterministic fields only; wall time lives in the timing file.
  nlohmann::json to_json() const;
  static MetricsRecord from_json(const nlohmann::json& j);
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& record);

class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, Index step) : NumericError(what), step_(step) {}
  Index step() const { return step_; }

 private:
  Index step_;
};

/// Single-writer optimisation loop. The batch drawn at step s depends only on
/// (seed, s), so a restored trainer continues exactly where the saved one was.
class Trainer {
 public:
  Trainer(ModelParams params, std::vector<Sample> dataset, TrainConfig config,
          SpecialTokens special);

  /// batch -> forward -> objective -> backward -> clip -> Adam.
  MetricsRecord step();

  Index current_step() const { return state_.step; }
  const ModelParams& params() const { return params_; }
  const AdamState& optimizer_state() const { return state_; }
  const TrainConfig& config() const { return config_; }
  /// Batch used at `step`.
  TokenBatch batch_at(Index step) const;

  /// Model section followed by "BFTOPTS1", step, moment tensors.
  void save_checkpoint(const std::string& path) const;
  void restore_checkpoint(const std::string& path);

 private:
  std::vector<std::size_t> indices_at(Index step) const;

  ModelParams params_;
  std::vector<Sample> dataset_;
  TrainConfig config_;
  SpecialTokens special_;
  AdamState state_;
};

struct TrainOutcome {
  std::vector<MetricsRecord> metrics;
  ModelParams params;
  std::filesystem::path final_checkpoint;
};

/// Runs config.steps steps. With `run_dir` set, writes metrics.jsonl,
/// metrics.csv, timing.tsv, periodic checkpoints under checkpoints/ and
/// checkpoint_final.bin. On a non-finite loss the pre-step parameters are
/// saved as checkpoint_last_good.bin and TrainingAborted propagates.
TrainOutcome train(ModelParams params, std::vector<Sample> dataset, const TrainConfig& config,
                   const SpecialTokens& special,
                   const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                   const std::function<void(const MetricsRecord&)>& on_step = {});

}  // namespace bft
