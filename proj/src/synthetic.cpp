#include <algorithm>
#include <cmath>
#include <set>

#include "bft/data.hpp"
#include "bft/errors.hpp"
#include "bft/random.hpp"

namespace bft {
namespace {

constexpr std::uint64_t kTableStream = 1;
constexpr std::uint64_t kOrderStream = 2;
constexpr std::uint64_t kTrainStream = 3;
constexpr std::uint64_t kEvalStream = 4;
constexpr Index kMaxDistractors = 3;

Index content_symbols(const SyntheticTaskSpec& spec) { return spec.vocab_size - 3; }

Index hard_count(const SyntheticTaskSpec& spec, Index n) {
  return static_cast<Index>(std::llround(spec.hard_fraction * static_cast<double>(n)));
}

TokenIds random_symbols(Rng& rng, Index count, Index alphabet) {
  TokenIds out(static_cast<std::size_t>(count));
  for (auto& s : out) s = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(alphabet)));
  return out;
}

Index draw_length(Rng& rng, const SyntheticTaskSpec& spec, bool hard) {
  const Index mid = (spec.min_length + spec.max_length) / 2;
  Index lo = spec.min_length, hi = mid;
  if (hard && spec.max_length > mid) {
    lo = mid + 1;
    hi = spec.max_length;
  }
  return lo + static_cast<Index>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

Sample structured_sample(const SyntheticTaskSpec& spec, Rng& rng, bool hard) {
  const SpecialTokens special = SpecialTokens::for_vocab(spec.vocab_size);
  const Index length = draw_length(rng, spec, hard);
  TokenIds prompt, response;
  switch (spec.kind) {
    case TaskKind::copy:
    case TaskKind::reverse: {
      prompt = random_symbols(rng, length, content_symbols(spec));
      response = prompt;
      if (spec.kind == TaskKind::reverse) std::reverse(response.begin(), response.end());
      break;
    }
    case TaskKind::modular_sum: {
      const Index modulus = std::min<Index>(10, content_symbols(spec));
      prompt = random_symbols(rng, length, modulus);
      std::int64_t total = 0;
      for (auto v : prompt) total += v;
      response = {static_cast<std::int32_t>(total % modulus)};
      break;
    }
    case TaskKind::rare_key:
      throw ContractError("structured_sample: rare_key uses the key table");
  }
  prompt.push_back(special.separator);
  response.push_back(special.separator);
  return Sample::prompt_response(prompt, response, hard);
}

std::vector<std::uint8_t> hard_flags(const SyntheticTaskSpec& spec, Index n, Rng& rng) {
  std::vector<std::uint8_t> flags(static_cast<std::size_t>(n), 0);
  std::fill_n(flags.begin(), hard_count(spec, n), std::uint8_t{1});
  rng.shuffle(flags.begin(), flags.end());
  return flags;
}

struct KeyEntry {
  TokenIds key;
  TokenIds value;
  bool hard = false;
  Index occurrences = 0;
};

// Keys are distinct symbol pairs; hard keys come first in the table.
std::vector<KeyEntry> key_table(const SyntheticTaskSpec& spec, Index n_train) {
  const Index hard_samples = hard_count(spec, n_train);
  const Index easy_samples = n_train - hard_samples;
  const Index hard_keys = (hard_samples + 1) / 2;
  const Index easy_keys =
      easy_samples == 0 ? 0 : (easy_samples + spec.common_repeats - 1) / spec.common_repeats;
  const Index alphabet = content_symbols(spec);
  if (hard_keys + easy_keys > alphabet * alphabet) {
    throw ConfigError("rare_key: vocabulary too small for " +
                      std::to_string(hard_keys + easy_keys) + " distinct keys");
  }

  Rng rng(mix_seed(spec.seed, kTableStream));
  std::set<TokenIds> used;
  std::vector<KeyEntry> table;
  for (Index k = 0; k < hard_keys + easy_keys; ++k) {
    KeyEntry entry;
    do {
      entry.key = random_symbols(rng, 2, alphabet);
    } while (!used.insert(entry.key).second);
    entry.hard = k < hard_keys;
    const Index length = spec.min_length + static_cast<Index>(rng.below(
                                               static_cast<std::uint64_t>(spec.max_length - spec.min_length + 1)));
    entry.value = random_symbols(rng, length, alphabet);
    table.push_back(std::move(entry));
  }
  for (Index i = 0; i < hard_samples; ++i) ++table[static_cast<std::size_t>(i / 2)].occurrences;
  for (Index i = 0; i < easy_samples; ++i)
    ++table[static_cast<std::size_t>(hard_keys + i % easy_keys)].occurrences;
  return table;
}

Sample key_query(const SyntheticTaskSpec& spec, const KeyEntry& entry, Rng& rng, bool corrupt) {
  const SpecialTokens special = SpecialTokens::for_vocab(spec.vocab_size);
  const Index alphabet = content_symbols(spec);
  TokenIds prompt = random_symbols(rng, static_cast<Index>(rng.below(kMaxDistractors + 1)), alphabet);
  prompt.insert(prompt.end(), entry.key.begin(), entry.key.end());
  prompt.push_back(special.separator);
  TokenIds response = entry.value;
  if (corrupt) {
    auto& slot = response[rng.below(response.size())];
    slot = static_cast<std::int32_t>(
        (slot + 1 + static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(alphabet - 1)))) %
        alphabet);
  }
  response.push_back(special.separator);
  return Sample::prompt_response(prompt, response, entry.hard);
}

}  // namespace

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::modular_sum: return "modular-sum";
    case TaskKind::rare_key: return "rare-key";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view name) {
  for (TaskKind k : {TaskKind::copy, TaskKind::reverse, TaskKind::modular_sum, TaskKind::rare_key})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown task \"" + std::string(name) +
                    "\"; allowed: copy, reverse, modular-sum, rare-key");
}

void SyntheticTaskSpec::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("synthetic task: " + what);
  };
  require(vocab_size >= 6, "vocab_size must be >= 6");
  require(vocab_size <= 4096, "vocab_size must be <= 4096");
  require(min_length >= 1 && max_length >= min_length, "need 1 <= min_length <= max_length");
  require(hard_fraction >= 0.0 && hard_fraction <= 1.0, "hard_fraction must lie in [0, 1]");
  require(common_repeats >= 1, "common_repeats must be >= 1");
  require(label_noise >= 0.0 && label_noise <= 1.0, "label_noise must lie in [0, 1]");
}

std::vector<Sample> gen_synthetic(const SyntheticTaskSpec& spec, Index n) {
  spec.validate();
  std::vector<Sample> out;
  if (n <= 0) return out;
  if (spec.kind != TaskKind::rare_key) {
    Rng order(mix_seed(spec.seed, kOrderStream));
    const auto flags = hard_flags(spec, n, order);
    Rng rng(mix_seed(spec.seed, kTrainStream));
    for (Index i = 0; i < n; ++i) out.push_back(structured_sample(spec, rng, flags[static_cast<std::size_t>(i)] != 0));
    return out;
  }

  const auto table = key_table(spec, n);
  std::vector<std::size_t> occurrences;
  for (std::size_t k = 0; k < table.size(); ++k)
    occurrences.insert(occurrences.end(), static_cast<std::size_t>(table[k].occurrences), k);
  Rng order(mix_seed(spec.seed, kOrderStream));
  order.shuffle(occurrences.begin(), occurrences.end());
  Rng rng(mix_seed(spec.seed, kTrainStream));
  for (std::size_t k : occurrences) {
    const bool corrupt = !table[k].hard && rng.uniform() < spec.label_noise;
    out.push_back(key_query(spec, table[k], rng, corrupt));
  }
  return out;
}

std::vector<Sample> gen_synthetic_eval(const SyntheticTaskSpec& spec, Index n_train, Index n_eval) {
  spec.validate();
  std::vector<Sample> out;
  Rng rng(mix_seed(spec.seed, kEvalStream));
  if (spec.kind != TaskKind::rare_key) {
    Rng order(mix_seed(spec.seed, kEvalStream + 100));
    const auto flags = hard_flags(spec, n_eval, order);
    for (Index i = 0; i < n_eval; ++i) out.push_back(structured_sample(spec, rng, flags[static_cast<std::size_t>(i)] != 0));
    return out;
  }
  const auto table = key_table(spec, n_train);
  for (Index i = 0; i < n_eval && !table.empty(); ++i)
    out.push_back(key_query(spec, table[static_cast<std::size_t>(i) % table.size()], rng, false));
  return out;
}

std::uint64_t dataset_hash(std::span<const Sample> samples) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  auto mix = [&hash](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      hash ^= (v >> (8 * i)) & 0xffU;
      hash *= 0x100000001b3ULL;
    }
  };
  for (const Sample& s : samples) {
    mix(s.tokens.size());
    for (auto t : s.tokens) mix(static_cast<std::uint64_t>(t));
    for (auto m : s.supervised) mix(m);
    mix(s.hard);
  }
  return hash;
}

}  // namespace bft
