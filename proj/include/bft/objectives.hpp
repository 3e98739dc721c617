#pragma once

// Fine-tuning objectives over next-token logits.
//
// All four losses share one aggregation,
//
//   loss = 1/B * sum_b s_b * (sum_t m_bt * f_bt * l_bt) / (sum_t m_bt + eps),
//
// where l_bt is token cross-entropy and the detached factors are
//   SFT:   s = 1,         f = 1
//   DFT:   s = 1,         f = p_bt
//   BFT:   s = 1 - min_i mean(p over window i),  f = p_bt
//   Focal: s = 1,         f = (1 - p_bt)^gamma
// with p_bt = exp(-l_bt) the probability of the reference token.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bft/data.hpp"
#include "bft/tensor.hpp"

namespace bft {

enum class ObjectiveKind { sft, dft, bft, focal };

std::string to_string(ObjectiveKind kind);
/// Accepts SFT, DFT, BFT, FOCAL (any case); ConfigError lists the allowed set otherwise.
ObjectiveKind parse_objective_kind(std::string_view name);

inline constexpr double kDefaultEpsilon = 1e-8;

struct ObjectiveConfig {
  ObjectiveKind kind = ObjectiveKind::bft;
  Index window = 256;
  double epsilon = kDefaultEpsilon;
  bool token_weighting = true;   // BFT only
  bool sample_weighting = true;  // BFT only
  double focal_gamma = 2.0;      // FOCAL only
  /// Slide windows over every non-pad position instead of supervised ones only.
  bool window_all_positions = false;

  void validate() const;
  /// SFT, DFT, BFT-<g>, BFT-w/o-sample, BFT-w/o-token, FOCAL.
  std::string label() const;

  static ObjectiveConfig sft();
  static ObjectiveConfig dft();
  static ObjectiveConfig bft(Index window);
  static ObjectiveConfig focal(double gamma);
};

/// Detached per-sample confidence statistics.
struct ConfidenceProfile {
  RowMatrix token_confidence;               // B x T, c_bt (0 where unused)
  std::vector<Vector> group_confidences;    // per sample, one entry per window
  std::vector<double> min_group_confidence;
  std::vector<double> sample_coefficient;   // 1 - min_group_confidence
  std::vector<std::uint8_t> empty;          // sample had no positions to window over
};

/// Windowing over given confidences. Samples with no usable position get
/// coefficient 0 and are flagged in `empty`.
ConfidenceProfile profile_from_confidences(const RowMatrix& confidence, const TokenBatch& batch,
                                           Index window, bool all_positions = false);

/// Token confidences softmax(z)[y] gathered from `logits`, then windowed.
ConfidenceProfile confidence_profile(const Tensor& logits, const TokenBatch& batch,
                                     const ObjectiveConfig& config);

/// l_bt = -log softmax(z_bt)[y_bt] at every position, shape [B, T].
Tensor token_losses(const Tensor& logits, const TokenBatch& batch);

struct LossBreakdown {
  Tensor loss;
  Vector per_sample_loss;      // (sum_t m f l) / (sum_t m + eps), before s
  Vector sample_coefficient;   // s_b
  RowMatrix token_loss;        // l_bt
  RowMatrix token_weight;      // f_bt
  double mean_token_confidence = 0.0;
  double max_importance_weight = 0.0;
  std::optional<ConfidenceProfile> profile;
};

LossBreakdown loss_sft(const Tensor& logits, const TokenBatch& batch, double epsilon = kDefaultEpsilon);
LossBreakdown loss_dft(const Tensor& logits, const TokenBatch& batch, const ObjectiveConfig& config);
LossBreakdown loss_bft(const Tensor& logits, const TokenBatch& batch, const ObjectiveConfig& config);
LossBreakdown loss_focal(const Tensor& logits, const TokenBatch& batch, const ObjectiveConfig& config);

/// Dispatches on config.kind.
LossBreakdown evaluate_objective(const Tensor& logits, const TokenBatch& batch,
                                 const ObjectiveConfig& config);

/// Observational 1/c_bt per supervised token (0 elsewhere) and its batch maximum.
struct ImportanceDiagnostics {
  RowMatrix weights;
  double max_weight = 0.0;
};
ImportanceDiagnostics importance_diagnostics(const Tensor& logits, const TokenBatch& batch);

}  // namespace bft
