#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "bft/tensor.hpp"

namespace bft {

struct ModelConfig {
  Index vocab_size = 64;
  Index context_length = 64;
  Index embed_dim = 32;
  Index layers = 2;
  Index heads = 2;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  Vector values;
};

/// Pre-norm decoder-only transformer weights, in a fixed serialisation order.
struct ModelParams {
  ModelConfig config;
  std::vector<NamedTensor> tensors;

  Index parameter_count() const;
  /// FNV-1a over the raw bytes of every value, in order.
  std::uint64_t checksum() const;
  const NamedTensor& at(const std::string& name) const;
};

/// Seeded N(0, 0.02) weights, unit layer-norm gains, zero biases.
ModelParams init_model(const ModelConfig& config);

struct ModelOutput {
  Tensor logits;                // [B, T, V]
  std::vector<Tensor> leaves;   // one per ModelParams::tensors entry
};

/// Next-token logits for `inputs` (B x T token ids). Parameters enter `graph`
/// as gradient-tracking leaves when `track_gradients` is set.
ModelOutput forward(Graph& graph, const ModelParams& params, const TokenGrid& inputs,
                    bool track_gradients = true);

/// Same network over caller-owned weight tensors in ModelParams order.
Tensor forward(const ModelConfig& config, std::span<const Tensor> weights, const TokenGrid& inputs);

// Checkpoint layout, all integers little-endian u64, floats little-endian IEEE-754 binary64:
//   "BFTCKPT1"
//   vocab_size, context_length, embed_dim, layers, heads, seed
//   tensor count
//   per tensor: rank, dims..., values...
void write_model(std::ostream& out, const ModelParams& params);
ModelParams read_model(std::istream& in);
void save_model(const std::string& path, const ModelParams& params);
ModelParams load_model(const std::string& path);

namespace binary_io {
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);
std::uint64_t read_u64(std::istream& in);
double read_f64(std::istream& in);
void write_shaped(std::ostream& out, const Shape& shape, const Vector& values);
void read_shaped(std::istream& in, Shape& shape, Vector& values);
}  // namespace binary_io

}  // namespace bft
