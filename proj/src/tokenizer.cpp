#include "bft/data.hpp"
#include "bft/errors.hpp"

namespace bft {

SpecialTokens SpecialTokens::for_vocab(Index vocab_size) {
  if (vocab_size < 4) throw ConfigError("synthetic vocabulary needs at least 4 ids");
  const auto v = static_cast<std::int32_t>(vocab_size);
  return {v - 3, v - 2, v - 1, vocab_size};
}

TokenIds tokenize(std::string_view text) {
  TokenIds ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(static_cast<std::int32_t>(static_cast<unsigned char>(c)));
  return ids;
}

std::string detokenize(std::span<const std::int32_t> ids) {
  std::string text;
  text.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] > 255) {
      throw IndexError("detokenize: id " + std::to_string(ids[i]) + " at " + std::to_string(i) +
                       " is not a byte");
    }
    text.push_back(static_cast<char>(static_cast<unsigned char>(ids[i])));
  }
  return text;
}

}  // namespace bft
