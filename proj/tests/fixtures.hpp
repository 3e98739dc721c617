#pragma once
// Random micro-batches and probability-controlled logits for objective tests.

#include "bft/data.hpp"
#include "bft/random.hpp"
#include "oracles.hpp"

namespace fixture {

using namespace bft;

inline TokenBatch batch_of(const TokenGrid& targets, const TokenGrid& mask) {
  TokenBatch batch;
  batch.inputs = TokenGrid::Zero(targets.rows(), targets.cols());
  batch.targets = targets;
  batch.mask = mask;
  for (Index b = 0; b < targets.rows(); ++b) {
    batch.lengths.push_back(targets.cols());
    batch.valid_counts.push_back(mask.row(b).sum());
    batch.hard.push_back(0);
  }
  return batch;
}

/// Logits [B, T, V] putting probability probs(b, t) on targets(b, t).
inline Vector logits_with(const RowMatrix& probs, const TokenGrid& targets, Index vocab) {
  Vector z(probs.size() * vocab);
  for (Index i = 0; i < probs.size(); ++i) {
    const auto row = oracle::logits_for(probs.data()[i], static_cast<std::size_t>(targets.data()[i]),
                                        static_cast<std::size_t>(vocab));
    for (Index v = 0; v < vocab; ++v) z(i * vocab + v) = row[static_cast<std::size_t>(v)];
  }
  return z;
}

struct MicroBatch {
  Index rows, steps, vocab;
  Vector logits;
  TokenBatch batch;
};

inline MicroBatch random_micro_batch(Rng& rng) {
  MicroBatch m;
  m.rows = 1 + static_cast<Index>(rng.below(4));
  m.steps = 1 + static_cast<Index>(rng.below(32));
  m.vocab = 2 + static_cast<Index>(rng.below(63));
  m.logits.resize(m.rows * m.steps * m.vocab);
  for (Index i = 0; i < m.logits.size(); ++i) m.logits(i) = 6.0 * rng.uniform() - 3.0;
  TokenGrid targets(m.rows, m.steps), mask(m.rows, m.steps);
  for (Index i = 0; i < targets.size(); ++i) {
    targets.data()[i] = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(m.vocab)));
    mask.data()[i] = rng.uniform() < 0.6 ? 1 : 0;
  }
  mask(0, 0) = 1;
  m.batch = batch_of(targets, mask);
  return m;
}

}  // namespace fixture
