#include "bft/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "bft/errors.hpp"
#include "bft/random.hpp"

namespace bft {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  objective.validate();
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("train config: " + what);
  };
  require(learning_rate > 0.0, "learning_rate must be > 0");
  require(beta1 >= 0.0 && beta1 < 1.0, "beta1 must lie in [0, 1)");
  require(beta2 >= 0.0 && beta2 < 1.0, "beta2 must lie in [0, 1)");
  require(adam_epsilon > 0.0, "adam_epsilon must be > 0");
  require(weight_decay >= 0.0, "weight_decay must be >= 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(steps >= 0, "steps must be >= 0");
  require(warmup_steps >= 0, "warmup_steps must be >= 0");
  require(clip_norm > 0.0, "clip_norm must be > 0");
  require(checkpoint_interval >= 0, "checkpoint_interval must be >= 0");
}

double TrainConfig::learning_rate_at(Index step) const {
  if (warmup_steps <= 0 || step >= warmup_steps) return learning_rate;
  return learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
}

AdamState AdamState::zeros_like(const ModelParams& params) {
  AdamState state;
  for (const auto& t : params.tensors) {
    state.first_moment.push_back(Vector::Zero(t.values.size()));
    state.second_moment.push_back(Vector::Zero(t.values.size()));
  }
  return state;
}

void adam_step(ModelParams& params, std::span<const Vector> gradients, AdamState& state,
               const TrainConfig& config, double learning_rate) {
  if (gradients.size() != params.tensors.size() || state.first_moment.size() != params.tensors.size()) {
    throw ContractError("adam_step: expected " + std::to_string(params.tensors.size()) +
                        " gradient tensors, got " + std::to_string(gradients.size()));
  }
  for (std::size_t i = 0; i < gradients.size(); ++i) {
    if (gradients[i].size() != params.tensors[i].values.size()) {
      throw DimensionError("adam_step: gradient of " + params.tensors[i].name + " has " +
                           std::to_string(gradients[i].size()) + " values, parameter has " +
                           std::to_string(params.tensors[i].values.size()));
    }
    if (!gradients[i].allFinite()) {
      throw NumericError("non-finite gradient in " + params.tensors[i].name + " at step " +
                         std::to_string(state.step));
    }
  }

  const double t = static_cast<double>(state.step + 1);
  const double correction1 = 1.0 - std::pow(config.beta1, t);
  const double correction2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < gradients.size(); ++i) {
    NamedTensor& p = params.tensors[i];
    Vector& m = state.first_moment[i];
    Vector& v = state.second_moment[i];
    m = config.beta1 * m + (1.0 - config.beta1) * gradients[i];
    v = config.beta2 * v + (1.0 - config.beta2) * gradients[i].cwiseAbs2();
    if (p.shape.size() >= 2 && config.weight_decay > 0.0)
      p.values *= 1.0 - learning_rate * config.weight_decay;
    p.values.array() -= learning_rate * (m.array() / correction1) /
                        ((v.array() / correction2).sqrt() + config.adam_epsilon);
  }
  ++state.step;
}

double clip_gradients(std::vector<Vector>& gradients, double max_norm) {
  double squared = 0.0;
  for (const Vector& g : gradients) squared += g.squaredNorm();
  const double norm = std::sqrt(squared);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (Vector& g : gradients) g *= scale;
  }
  return norm;
}

nlohmann::json MetricsRecord::to_json() const {
  nlohmann::json j{{"step", step},
                   {"loss", loss},
                   {"mean_token_confidence", mean_token_confidence},
                   {"max_importance_weight", max_importance_weight},
                   {"grad_norm", grad_norm},
                   {"learning_rate", learning_rate}};
  if (sample_coefficient_mean) {
    j["s_mean"] = *sample_coefficient_mean;
    j["s_min"] = *sample_coefficient_min;
    j["s_max"] = *sample_coefficient_max;
  }
  return j;
}

MetricsRecord MetricsRecord::from_json(const nlohmann::json& j) {
  MetricsRecord r;
  r.step = j.at("step").get<Index>();
  r.loss = j.at("loss").get<double>();
  r.mean_token_confidence = j.at("mean_token_confidence").get<double>();
  r.max_importance_weight = j.at("max_importance_weight").get<double>();
  r.grad_norm = j.at("grad_norm").get<double>();
  r.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("s_mean")) {
    r.sample_coefficient_mean = j.at("s_mean").get<double>();
    r.sample_coefficient_min = j.at("s_min").get<double>();
    r.sample_coefficient_max = j.at("s_max").get<double>();
  }
  return r;
}

std::string metrics_csv_header() {
  return "step,loss,s_mean,s_min,s_max,mean_token_confidence,max_importance_weight,grad_norm,"
         "learning_rate";
}

std::string metrics_csv_row(const MetricsRecord& r) {
  std::ostringstream out;
  out.precision(17);
  auto opt = [&out](const std::optional<double>& v) {
    if (v) out << *v;
    out << ',';
  };
  out << r.step << ',' << r.loss << ',';
  opt(r.sample_coefficient_mean);
  opt(r.sample_coefficient_min);
  opt(r.sample_coefficient_max);
  out << r.mean_token_confidence << ',' << r.max_importance_weight << ',' << r.grad_norm << ','
      << r.learning_rate;
  return out.str();
}

Trainer::Trainer(ModelParams params, std::vector<Sample> dataset, TrainConfig config,
                 SpecialTokens special)
    : params_(std::move(params)),
      dataset_(std::move(dataset)),
      config_(std::move(config)),
      special_(special),
      state_(AdamState::zeros_like(params_)) {
  config_.validate();
  if (dataset_.empty()) throw ContractError("train: empty dataset");
  if (special_.vocab_size != params_.config.vocab_size) {
    throw ConfigError("train: data vocabulary " + std::to_string(special_.vocab_size) +
                      " differs from model vocabulary " + std::to_string(params_.config.vocab_size));
  }
}

std::vector<std::size_t> Trainer::indices_at(Index step) const {
  const auto n = static_cast<Index>(dataset_.size());
  std::vector<std::size_t> picked;
  Index cached_epoch = -1;
  std::vector<std::size_t> order(dataset_.size());
  for (Index i = 0; i < config_.batch_size; ++i) {
    const Index position = step * config_.batch_size + i;
    const Index epoch = position / n;
    if (epoch != cached_epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(mix_seed(config_.seed, static_cast<std::uint64_t>(epoch)));
      rng.shuffle(order.begin(), order.end());
      cached_epoch = epoch;
    }
    picked.push_back(order[static_cast<std::size_t>(position % n)]);
  }
  return picked;
}

TokenBatch Trainer::batch_at(Index step) const {
  std::vector<Sample> samples;
  for (std::size_t i : indices_at(step)) samples.push_back(dataset_[i]);
  return build_batch(samples, params_.config.context_length, special_);
}

MetricsRecord Trainer::step() {
  const auto start = std::chrono::steady_clock::now();
  const Index step = state_.step;
  const TokenBatch batch = batch_at(step);

  Graph graph;
  const ModelOutput out = forward(graph, params_, batch.inputs);
  const LossBreakdown breakdown = evaluate_objective(out.logits, batch, config_.objective);
  const double loss = breakdown.loss.item();
  if (!std::isfinite(loss)) {
    throw TrainingAborted("non-finite loss " + std::to_string(loss) + " at step " +
                          std::to_string(step) + " (max importance weight " +
                          std::to_string(breakdown.max_importance_weight) + ")",
                          step);
  }
  graph.backward(breakdown.loss);

  std::vector<Vector> gradients;
  gradients.reserve(out.leaves.size());
  for (const Tensor& leaf : out.leaves) gradients.push_back(graph.grad(leaf));

  MetricsRecord record;
  record.step = step;
  record.loss = loss;
  record.grad_norm = clip_gradients(gradients, config_.clip_norm);
  record.learning_rate = config_.learning_rate_at(step);
  record.mean_token_confidence = breakdown.mean_token_confidence;
  record.max_importance_weight = breakdown.max_importance_weight;
  if (breakdown.profile) {
    const auto& s = breakdown.profile->sample_coefficient;
    record.sample_coefficient_mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
    record.sample_coefficient_min = *std::min_element(s.begin(), s.end());
    record.sample_coefficient_max = *std::max_element(s.begin(), s.end());
  }

  try {
    adam_step(params_, gradients, state_, config_, record.learning_rate);
  } catch (const NumericError& e) {
    throw TrainingAborted(e.what(), step);
  }
  record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return record;
}

namespace {
constexpr char kOptimizerMagic[8] = {'B', 'F', 'T', 'O', 'P', 'T', 'S', '1'};
}

void Trainer::save_checkpoint(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_model(out, params_);
  out.write(kOptimizerMagic, 8);
  binary_io::write_u64(out, static_cast<std::uint64_t>(state_.step));
  binary_io::write_u64(out, state_.first_moment.size());
  for (std::size_t i = 0; i < state_.first_moment.size(); ++i) {
    binary_io::write_shaped(out, params_.tensors[i].shape, state_.first_moment[i]);
    binary_io::write_shaped(out, params_.tensors[i].shape, state_.second_moment[i]);
  }
}

void Trainer::restore_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path);
  ModelParams params = read_model(in);
  if (params.config != params_.config) throw ParseError("checkpoint model config differs from trainer");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kOptimizerMagic, 8) != 0)
    throw ParseError("checkpoint " + path + " has no optimizer state");
  AdamState state;
  state.step = static_cast<Index>(binary_io::read_u64(in));
  const std::uint64_t count = binary_io::read_u64(in);
  if (count != params.tensors.size()) throw ParseError("optimizer state tensor count mismatch");
  for (std::size_t i = 0; i < count; ++i) {
    Shape shape;
    Vector m, v;
    binary_io::read_shaped(in, shape, m);
    binary_io::read_shaped(in, shape, v);
    if (m.size() != params.tensors[i].values.size()) throw ParseError("optimizer state shape mismatch");
    state.first_moment.push_back(std::move(m));
    state.second_moment.push_back(std::move(v));
  }
  params_ = std::move(params);
  state_ = std::move(state);
}

TrainOutcome train(ModelParams params, std::vector<Sample> dataset, const TrainConfig& config,
                   const SpecialTokens& special, const std::optional<fs::path>& run_dir,
                   const std::function<void(const MetricsRecord&)>& on_step) {
  Trainer trainer(std::move(params), std::move(dataset), config, special);
  TrainOutcome outcome;

  std::ofstream jsonl, csv, timing;
  if (run_dir) {
    fs::create_directories(*run_dir);
    jsonl.open(*run_dir / "metrics.jsonl", std::ios::trunc);
    csv.open(*run_dir / "metrics.csv", std::ios::trunc);
    timing.open(*run_dir / "timing.tsv", std::ios::trunc);
    if (!jsonl || !csv || !timing) throw std::runtime_error("cannot open metrics files in " + run_dir->string());
    csv << "# optimizer=adamw lr=" << config.learning_rate << " beta1=" << config.beta1
        << " beta2=" << config.beta2 << " eps=" << config.adam_epsilon
        << " weight_decay=" << config.weight_decay << " warmup=" << config.warmup_steps
        << " clip=" << config.clip_norm << " batch=" << config.batch_size
        << " objective=" << config.objective.label() << '\n'
        << metrics_csv_header() << '\n';
    timing << "step\twall_seconds\n";
  }

  while (trainer.current_step() < config.steps) {
    MetricsRecord record;
    try {
      record = trainer.step();
    } catch (const TrainingAborted&) {
      if (run_dir) trainer.save_checkpoint((*run_dir / "checkpoint_last_good.bin").string());
      throw;
    }
    if (run_dir) {
      jsonl << record.to_json().dump() << '\n';
      csv << metrics_csv_row(record) << '\n';
      timing << record.step << '\t' << record.wall_seconds << '\n';
      const Index done = trainer.current_step();
      if (config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 && done < config.steps) {
        fs::create_directories(*run_dir / "checkpoints");
        trainer.save_checkpoint((*run_dir / "checkpoints" / ("step_" + std::to_string(done) + ".bin")).string());
      }
    }
    if (on_step) on_step(record);
    outcome.metrics.push_back(record);
  }
  if (run_dir) {
    outcome.final_checkpoint = *run_dir / "checkpoint_final.bin";
    trainer.save_checkpoint(outcome.final_checkpoint.string());
  }
  outcome.params = trainer.params();
  return outcome;
}

}  // namespace bft
