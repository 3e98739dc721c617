#include "bft/objectives.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "bft/errors.hpp"
#include "bft/kernels.hpp"
#include "bft/ops.hpp"

namespace bft {
namespace {

void check_shapes(const Tensor& logits, const TokenBatch& batch) {
  if (batch.size() == 0) throw ContractError("objective: empty batch");
  if (logits.rank() != 3 || logits.shape()[0] != batch.size() ||
      logits.shape()[1] != batch.steps()) {
    throw ContractError("objective: logits " + to_string(logits.shape()) + " do not match batch [" +
                        std::to_string(batch.size()) + "," + std::to_string(batch.steps()) + "]");
  }
}

Tensor mask_tensor(Graph& graph, const TokenBatch& batch) {
  return graph.constant({batch.size(), batch.steps()},
                        Eigen::Map<const Eigen::VectorXi>(batch.mask.data(), batch.mask.size())
                            .cast<double>());
}

Vector mask_totals(const TokenBatch& batch, double epsilon) {
  Vector totals(batch.size());
  for (Index b = 0; b < batch.size(); ++b)
    totals(b) = static_cast<double>(batch.mask.row(b).sum()) + epsilon;
  return totals;
}

// 1/B * sum_b s_b * (sum_t m * term) / (sum_t m + eps), built from primitives.
LossBreakdown aggregate(const Tensor& losses, const Tensor& terms, const Tensor& factors,
                        const TokenBatch& batch, const Vector& coefficients, double epsilon) {
  Graph& graph = terms.graph();
  const Index rows = batch.size();
  const Tensor masked = mul(terms, mask_tensor(graph, batch));
  const Tensor normalized = div(sum(masked, 1), graph.constant({rows}, mask_totals(batch, epsilon)));
  const Tensor scaled = mul(normalized, graph.constant({rows}, coefficients));

  LossBreakdown out;
  out.loss = mean(scaled, 0);
  out.per_sample_loss = normalized.values();
  out.sample_coefficient = coefficients;
  out.token_loss = losses.matrix();
  out.token_weight = factors.matrix();

  double confidence_total = 0.0;
  Index valid = 0;
  for (Index b = 0; b < rows; ++b) {
    for (Index t = 0; t < batch.steps(); ++t) {
      if (!batch.mask(b, t)) continue;
      const double l = out.token_loss(b, t);
      confidence_total += std::exp(-l);
      out.max_importance_weight = std::max(out.max_importance_weight, std::exp(l));
      ++valid;
    }
  }
  out.mean_token_confidence = valid ? confidence_total / static_cast<double>(valid) : 0.0;
  return out;
}

// Reference-token probability, cut from the gradient path.
Tensor detached_confidence(const Tensor& losses) { return detach(exp(neg(losses))); }

}  // namespace

std::string to_string(ObjectiveKind kind) {
  switch (kind) {
    case ObjectiveKind::sft: return "SFT";
    case ObjectiveKind::dft: return "DFT";
    case ObjectiveKind::bft: return "BFT";
    case ObjectiveKind::focal: return "FOCAL";
  }
  return "?";
}

ObjectiveKind parse_objective_kind(std::string_view name) {
  std::string upper(name);
  std::transform(upper.begin(), upper.end(), upper.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  for (ObjectiveKind k : {ObjectiveKind::sft, ObjectiveKind::dft, ObjectiveKind::bft, ObjectiveKind::focal})
    if (to_string(k) == upper) return k;
  throw ConfigError("unknown objective kind \"" + std::string(name) +
                    "\"; allowed: SFT, DFT, BFT, FOCAL");
}

void ObjectiveConfig::validate() const {
  if (!(epsilon > 0.0)) throw ConfigError("objective: epsilon must be > 0");
  if (window < 1) throw ConfigError("objective: window must be >= 1");
  if (!(focal_gamma >= 0.0)) throw ConfigError("objective: focal_gamma must be >= 0");
}

std::string ObjectiveConfig::label() const {
  switch (kind) {
    case ObjectiveKind::bft:
      if (!sample_weighting && token_weighting) return "BFT-w/o-sample";
      if (!sample_weighting) return "BFT-w/o-sample-w/o-token";
      if (!token_weighting) return "BFT-w/o-token-" + std::to_string(window);
      return "BFT-" + std::to_string(window);
    default:
      return to_string(kind);
  }
}

ObjectiveConfig ObjectiveConfig::sft() { return {.kind = ObjectiveKind::sft}; }
ObjectiveConfig ObjectiveConfig::dft() { return {.kind = ObjectiveKind::dft}; }
ObjectiveConfig ObjectiveConfig::bft(Index window) {
  return {.kind = ObjectiveKind::bft, .window = window};
}
ObjectiveConfig ObjectiveConfig::focal(double gamma) {
  return {.kind = ObjectiveKind::focal, .focal_gamma = gamma};
}

ConfidenceProfile profile_from_confidences(const RowMatrix& confidence, const TokenBatch& batch,
                                           Index window, bool all_positions) {
  if (window < 1) throw ConfigError("confidence profile: window must be >= 1");
  if (confidence.rows() != batch.size() || confidence.cols() != batch.steps())
    throw ContractError("confidence profile: confidence grid does not match batch");

  ConfidenceProfile profile;
  profile.token_confidence = confidence;
  for (Index b = 0; b < batch.size(); ++b) {
    std::vector<double> sequence;
    for (Index t = 0; t < batch.steps(); ++t) {
      const bool used = all_positions ? t < batch.lengths[static_cast<std::size_t>(b)] : batch.mask(b, t) != 0;
      if (used) sequence.push_back(confidence(b, t));
    }
    if (sequence.empty()) {
      profile.group_confidences.emplace_back();
      profile.min_group_confidence.push_back(1.0);
      profile.sample_coefficient.push_back(0.0);
      profile.empty.push_back(1);
      continue;
    }
    Vector groups = kernels::window_means(
        Eigen::Map<const Vector>(sequence.data(), static_cast<Index>(sequence.size())), window);
    const double lowest = groups.minCoeff();
    profile.group_confidences.push_back(std::move(groups));
    profile.min_group_confidence.push_back(lowest);
    profile.sample_coefficient.push_back(1.0 - lowest);
    profile.empty.push_back(0);
  }
  return profile;
}

ConfidenceProfile confidence_profile(const Tensor& logits, const TokenBatch& batch,
                                     const ObjectiveConfig& config) {
  check_shapes(logits, batch);
  if (config.kind != ObjectiveKind::bft) throw ContractError("confidence_profile needs a BFT objective");
  config.validate();
  const Tensor confidence = detach(gather_target(softmax_rows(logits), batch.targets));
  return profile_from_confidences(confidence.matrix(), batch, config.window,
                                  config.window_all_positions);
}

Tensor token_losses(const Tensor& logits, const TokenBatch& batch) {
  check_shapes(logits, batch);
  return neg(gather_target(log_softmax_rows(logits), batch.targets));
}

LossBreakdown loss_sft(const Tensor& logits, const TokenBatch& batch, double epsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("objective: epsilon must be > 0");
  const Tensor losses = token_losses(logits, batch);
  const Tensor ones = logits.graph().constant(losses.shape(), Vector::Ones(losses.size()));
  return aggregate(losses, losses, ones, batch, Vector::Ones(batch.size()), epsilon);
}

LossBreakdown loss_dft(const Tensor& logits, const TokenBatch& batch, const ObjectiveConfig& config) {
  config.validate();
  const Tensor losses = token_losses(logits, batch);
  const Tensor weights = detached_confidence(losses);
  return aggregate(losses, mul(weights, losses), weights, batch, Vector::Ones(batch.size()),
                   config.epsilon);
}

LossBreakdown loss_bft(const Tensor& logits, const TokenBatch& batch, const ObjectiveConfig& config) {
  config.validate();
  if (config.kind != ObjectiveKind::bft) throw ContractError("loss_bft needs a BFT objective");
  const Tensor losses = token_losses(logits, batch);
  const Tensor confidence = detached_confidence(losses);

  Vector coefficients = Vector::Ones(batch.size());
  std::optional<ConfidenceProfile> profile;
  if (config.sample_weighting) {
    profile = profile_from_confidences(confidence.matrix(), batch, config.window,
                                       config.window_all_positions);
    coefficients = Eigen::Map<const Vector>(profile->sample_coefficient.data(), batch.size());
  }

  LossBreakdown out;
  if (config.token_weighting) {
    out = aggregate(losses, mul(confidence, losses), confidence, batch, coefficients, config.epsilon);
  } else {
    const Tensor ones = logits.graph().constant(losses.shape(), Vector::Ones(losses.size()));
    out = aggregate(losses, losses, ones, batch, coefficients, config.epsilon);
  }
  out.profile = std::move(profile);
  return out;
}

LossBreakdown loss_focal(const Tensor& logits, const TokenBatch& batch, const ObjectiveConfig& config) {
  config.validate();
  const Tensor losses = token_losses(logits, batch);
  const Tensor modulation =
      detach(pow(add_scalar(neg(detached_confidence(losses)), 1.0), config.focal_gamma));
  return aggregate(losses, mul(modulation, losses), modulation, batch, Vector::Ones(batch.size()),
                   config.epsilon);
}

LossBreakdown evaluate_objective(const Tensor& logits, const TokenBatch& batch,
                                 const ObjectiveConfig& config) {
  switch (config.kind) {
    case ObjectiveKind::sft: return loss_sft(logits, batch, config.epsilon);
    case ObjectiveKind::dft: return loss_dft(logits, batch, config);
    case ObjectiveKind::bft: return loss_bft(logits, batch, config);
    case ObjectiveKind::focal: return loss_focal(logits, batch, config);
  }
  throw ContractError("unknown objective");
}

ImportanceDiagnostics importance_diagnostics(const Tensor& logits, const TokenBatch& batch) {
  check_shapes(logits, batch);
  const RowMatrix confidence = kernels::softmax_rows(logits.matrix());
  ImportanceDiagnostics out;
  out.weights = RowMatrix::Zero(batch.size(), batch.steps());
  const Index vocab = logits.shape()[2];
  for (Index b = 0; b < batch.size(); ++b) {
    for (Index t = 0; t < batch.steps(); ++t) {
      if (!batch.mask(b, t)) continue;
      const std::int32_t y = batch.targets(b, t);
      if (y < 0 || y >= vocab) throw IndexError("importance_diagnostics: target out of range");
      out.weights(b, t) = 1.0 / confidence(b * batch.steps() + t, y);
      out.max_weight = std::max(out.max_weight, out.weights(b, t));
    }
  }
  return out;
}

}  // namespace bft
