#include <algorithm>
#include <charconv>

#include "bft/data.hpp"
#include "bft/errors.hpp"

namespace bft {
namespace {

TokenIds encode(const std::string& text, const SpecialTokens& special, TextEncoding encoding) {
  if (encoding == TextEncoding::bytes) return tokenize(text);
  TokenIds ids;
  const char* p = text.data();
  const char* end = p + text.size();
  while (p < end) {
    if (*p == ' ') {
      ++p;
      continue;
    }
    std::int32_t id = 0;
    auto [next, ec] = std::from_chars(p, end, id);
    if (ec != std::errc() || id < 0 || id >= special.bos) {
      throw ParseError("symbol text: bad token near \"" + std::string(p, end) + "\"");
    }
    ids.push_back(id);
    p = next;
  }
  return ids;
}

std::string decode(std::span<const std::int32_t> ids, TextEncoding encoding) {
  if (encoding == TextEncoding::bytes) return detokenize(ids);
  std::string text;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) text.push_back(' ');
    text += std::to_string(ids[i]);
  }
  return text;
}

}  // namespace

Sample Sample::prompt_response(std::span<const std::int32_t> prompt,
                               std::span<const std::int32_t> response, bool hard) {
  Sample s;
  s.tokens.assign(prompt.begin(), prompt.end());
  s.tokens.insert(s.tokens.end(), response.begin(), response.end());
  s.supervised.assign(prompt.size(), 0);
  s.supervised.resize(s.tokens.size(), 1);
  s.hard = hard;
  return s;
}

Index Sample::response_length() const {
  return static_cast<Index>(std::count(supervised.begin(), supervised.end(), std::uint8_t{1}));
}

Sample to_sample(const Conversation& conversation, const SpecialTokens& special,
                 TextEncoding encoding) {
  Sample s;
  for (const Turn& turn : conversation.turns) {
    TokenIds ids = encode(turn.text, special, encoding);
    ids.push_back(special.separator);
    s.tokens.insert(s.tokens.end(), ids.begin(), ids.end());
    s.supervised.insert(s.supervised.end(), ids.size(), turn.role == Role::gpt ? 1 : 0);
  }
  return s;
}

Conversation to_conversation(const Sample& sample, const SpecialTokens& special,
                             TextEncoding encoding) {
  Conversation conv;
  std::size_t start = 0;
  for (std::size_t i = 0; i < sample.tokens.size(); ++i) {
    if (sample.tokens[i] != special.separator) continue;
    const std::span<const std::int32_t> body(sample.tokens.data() + start, i - start);
    conv.turns.push_back({sample.supervised[i] ? Role::gpt : Role::human, decode(body, encoding)});
    start = i + 1;
  }
  if (start != sample.tokens.size()) throw ContractError("to_conversation: unterminated turn");
  return conv;
}

std::optional<Sample> fit_to_context(const Sample& sample, Index context_length) {
  const auto n = static_cast<Index>(sample.tokens.size());
  if (n <= context_length) return sample;
  const Index drop = n - context_length;
  for (Index i = 0; i < drop; ++i)
    if (sample.supervised[static_cast<std::size_t>(i)]) return std::nullopt;
  Sample cut = sample;
  cut.tokens.erase(cut.tokens.begin(), cut.tokens.begin() + drop);
  cut.supervised.erase(cut.supervised.begin(), cut.supervised.begin() + drop);
  return cut;
}

TokenBatch build_batch(std::span<const Sample> samples, Index context_length,
                       const SpecialTokens& special) {
  if (samples.empty()) throw ContractError("build_batch: no samples");
  std::vector<Sample> fitted;
  fitted.reserve(samples.size());
  Index steps = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].tokens.empty()) throw ValidationError("sample " + std::to_string(i) + " is empty");
    auto fit = fit_to_context(samples[i], context_length);
    if (!fit) {
      throw ValidationError("sample " + std::to_string(i) + " rejected: response of " +
                            std::to_string(samples[i].response_length()) +
                            " tokens does not fit context length " + std::to_string(context_length));
    }
    steps = std::max(steps, static_cast<Index>(fit->tokens.size()));
    fitted.push_back(std::move(*fit));
  }

  const auto rows = static_cast<Index>(fitted.size());
  TokenBatch batch;
  batch.inputs = TokenGrid::Constant(rows, steps, special.pad);
  batch.targets = TokenGrid::Constant(rows, steps, special.pad);
  batch.mask = TokenGrid::Zero(rows, steps);
  for (Index b = 0; b < rows; ++b) {
    const Sample& s = fitted[static_cast<std::size_t>(b)];
    const auto n = static_cast<Index>(s.tokens.size());
    Index valid = 0;
    for (Index t = 0; t < n; ++t) {
      const std::int32_t tok = s.tokens[static_cast<std::size_t>(t)];
      if (tok < 0 || tok >= special.vocab_size) {
        throw IndexError("sample " + std::to_string(b) + ": token id " + std::to_string(tok) +
                         " outside vocabulary of " + std::to_string(special.vocab_size));
      }
      batch.inputs(b, t) = t == 0 ? special.bos : s.tokens[static_cast<std::size_t>(t - 1)];
      batch.targets(b, t) = tok;
      batch.mask(b, t) = s.supervised[static_cast<std::size_t>(t)] ? 1 : 0;
      valid += batch.mask(b, t);
    }
    batch.lengths.push_back(n);
    batch.valid_counts.push_back(valid);
    batch.hard.push_back(s.hard ? 1 : 0);
  }
  return batch;
}

}  // namespace bft
