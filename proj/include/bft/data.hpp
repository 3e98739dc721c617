#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bft/tensor.hpp"

namespace bft {

using TokenIds = std::vector<std::int32_t>;

/// Ids with a structural role. Byte-level text uses 256/257/258 in a 259-id
/// vocabulary; synthetic tasks place them at the top of their own vocabulary.
struct SpecialTokens {
  std::int32_t bos = 256;
  std::int32_t separator = 257;
  std::int32_t pad = 258;
  Index vocab_size = 259;

  static SpecialTokens bytes() { return {}; }
  /// Content symbols 0..V-4, then BOS, separator, pad.
  static SpecialTokens for_vocab(Index vocab_size);
};

TokenIds tokenize(std::string_view text);
/// Inverse of tokenize. Ids outside [0, 256) raise IndexError.
std::string detokenize(std::span<const std::int32_t> ids);

// ---------------------------------------------------------------------------
// ShareGPT conversations

enum class Role { human, gpt };

struct Turn {
  Role role;
  std::string text;
  bool operator==(const Turn&) const = default;
};

struct Conversation {
  std::vector<Turn> turns;
  /// Roles alternate starting with human; at least one gpt turn.
  void validate() const;
  bool operator==(const Conversation&) const = default;
};

/// Parses `[{"conversations": [{"from": "human"|"gpt", "value": "..."}, ...]}, ...]`.
std::vector<Conversation> parse_sharegpt(std::string_view json_text);
std::vector<Conversation> load_sharegpt(const std::string& path);
std::string dump_sharegpt(std::span<const Conversation> conversations);
void save_sharegpt(const std::string& path, std::span<const Conversation> conversations);

// ---------------------------------------------------------------------------
// Samples and batches

/// A token sequence with per-token supervision flags. The model sees BOS
/// followed by the sequence and predicts every token of it.
struct Sample {
  TokenIds tokens;
  std::vector<std::uint8_t> supervised;
  bool hard = false;

  static Sample prompt_response(std::span<const std::int32_t> prompt,
                                std::span<const std::int32_t> response, bool hard = false);
  Index response_length() const;
  bool operator==(const Sample&) const = default;
};

/// How turn text maps to ids.
enum class TextEncoding {
  bytes,    // UTF-8 bytes
  symbols,  // whitespace-separated decimal symbol ids (synthetic exports)
};

/// Each turn contributes its encoded text plus a separator; gpt turns
/// (separator included) are supervised.
Sample to_sample(const Conversation& conversation, const SpecialTokens& special,
                 TextEncoding encoding = TextEncoding::bytes);
/// Inverse of to_sample for samples made of separator-terminated turns.
Conversation to_conversation(const Sample& sample, const SpecialTokens& special,
                             TextEncoding encoding = TextEncoding::symbols);

/// Left-truncates unsupervised tokens until the sample fits a context of
/// `context_length` positions. nullopt when the supervised span alone does not fit.
std::optional<Sample> fit_to_context(const Sample& sample, Index context_length);

/// Padded training grid. Row b holds inputs = [BOS, s_0 .. s_{n-2}],
/// targets = [s_0 .. s_{n-1}], mask = supervision of each target; padding
/// positions carry the pad id and mask 0.
struct TokenBatch {
  TokenGrid inputs;
  TokenGrid targets;
  TokenGrid mask;
  std::vector<Index> lengths;       // unpadded positions per row
  std::vector<Index> valid_counts;  // sum of mask per row
  std::vector<std::uint8_t> hard;

  Index size() const { return inputs.rows(); }
  Index steps() const { return inputs.cols(); }
};

/// Throws ValidationError naming the sample when its response cannot fit.
TokenBatch build_batch(std::span<const Sample> samples, Index context_length,
                       const SpecialTokens& special);

// ---------------------------------------------------------------------------
// Synthetic tasks

enum class TaskKind { copy, reverse, modular_sum, rare_key };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

struct SyntheticTaskSpec {
  TaskKind kind = TaskKind::copy;
  Index vocab_size = 32;
  /// Payload length range: copied/reversed symbols, summed terms, or recalled value length.
  Index min_length = 3;
  Index max_length = 8;
  double hard_fraction = 0.2;
  std::uint64_t seed = 0;
  /// rare_key only: how often each common key occurs in a training split.
  Index common_repeats = 8;
  /// rare_key only: fraction of common-key training samples with one corrupted value symbol.
  double label_noise = 0.0;

  void validate() const;
};

/// Deterministic in (spec, n). Each sample is labelled easy or hard.
/// copy/reverse/modular_sum: hard samples use the upper half of the length range.
/// rare_key: a seeded table maps keys to values; hard keys occur at most twice.
std::vector<Sample> gen_synthetic(const SyntheticTaskSpec& spec, Index n);

/// Held-out queries: fresh samples from a disjoint stream, or for rare_key one
/// query per key with a fresh distractor prefix.
std::vector<Sample> gen_synthetic_eval(const SyntheticTaskSpec& spec, Index n_train, Index n_eval);

/// FNV-1a over tokens, supervision flags and labels.
std::uint64_t dataset_hash(std::span<const Sample> samples);

}  // namespace bft
