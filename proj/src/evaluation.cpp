#include <algorithm>

#include "bft/errors.hpp"
#include "bft/experiment.hpp"
#include "bft/objectives.hpp"

namespace bft {
namespace {

double ratio(Index num, Index den) { return den ? static_cast<double>(num) / static_cast<double>(den) : 0.0; }

std::vector<Sample> fit_all(const std::vector<Sample>& samples, Index context_length,
                            const std::string& split, std::vector<std::string>& warnings) {
  std::vector<Sample> kept;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (auto fit = fit_to_context(samples[i], context_length)) {
      kept.push_back(std::move(*fit));
    } else {
      warnings.push_back(split + " sample " + std::to_string(i) + " rejected: response of " +
                         std::to_string(samples[i].response_length()) +
                         " tokens exceeds context length " + std::to_string(context_length));
    }
  }
  return kept;
}

}  // namespace

Dataset load_dataset(const DataConfig& config, Index context_length) {
  Dataset data;
  std::vector<Sample> train, eval;
  if (config.synthetic) {
    data.special = SpecialTokens::for_vocab(config.synthetic->vocab_size);
    train = gen_synthetic(*config.synthetic, config.train_samples);
    eval = gen_synthetic_eval(*config.synthetic, config.train_samples, config.eval_samples);
  } else {
    data.special = config.encoding == TextEncoding::bytes ? SpecialTokens::bytes() : SpecialTokens{};
    for (const auto& conv : load_sharegpt(config.sharegpt_train))
      train.push_back(to_sample(conv, data.special, config.encoding));
    if (!config.sharegpt_eval.empty())
      for (const auto& conv : load_sharegpt(config.sharegpt_eval))
        eval.push_back(to_sample(conv, data.special, config.encoding));
  }
  data.train = fit_all(train, context_length, "train", data.warnings);
  data.eval = fit_all(eval, context_length, "eval", data.warnings);
  if (data.train.empty()) throw ValidationError("dataset has no usable training samples");
  return data;
}

double EvalResult::accuracy() const { return ratio(correct, total); }
double EvalResult::easy_accuracy() const { return ratio(easy_correct, easy); }
double EvalResult::hard_accuracy() const { return ratio(hard_correct, hard); }

json EvalResult::to_json() const {
  return {{"loss", loss},
          {"total", total},
          {"easy", easy},
          {"hard", hard},
          {"correct", correct},
          {"easy_correct", easy_correct},
          {"hard_correct", hard_correct},
          {"accuracy", accuracy()},
          {"easy_accuracy", easy_accuracy()},
          {"hard_accuracy", hard_accuracy()}};
}

EvalResult EvalResult::from_json(const json& j) {
  EvalResult r;
  r.loss = j.at("loss").get<double>();
  r.total = j.at("total").get<Index>();
  r.easy = j.at("easy").get<Index>();
  r.hard = j.at("hard").get<Index>();
  r.correct = j.at("correct").get<Index>();
  r.easy_correct = j.at("easy_correct").get<Index>();
  r.hard_correct = j.at("hard_correct").get<Index>();
  return r;
}

EvalResult evaluate(const ModelParams& params, std::span<const Sample> samples,
                    const SpecialTokens& special, Index batch_size) {
  EvalResult result;
  double loss_total = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto chunk = samples.subspan(start, std::min<std::size_t>(static_cast<std::size_t>(batch_size),
                                                                    samples.size() - start));
    const TokenBatch batch = build_batch(chunk, params.config.context_length, special);
    Graph graph;
    const Tensor logits = forward(graph, params, batch.inputs, false).logits;
    const LossBreakdown ce = loss_sft(logits, batch);
    loss_total += ce.per_sample_loss.sum();

    const auto scores = logits.matrix();
    for (Index b = 0; b < batch.size(); ++b) {
      bool exact = true;
      for (Index t = 0; t < batch.steps() && exact; ++t) {
        if (!batch.mask(b, t)) continue;
        Index best = 0;
        scores.row(b * batch.steps() + t).maxCoeff(&best);
        exact = best == batch.targets(b, t);
      }
      const bool hard = batch.hard[static_cast<std::size_t>(b)] != 0;
      ++result.total;
      ++(hard ? result.hard : result.easy);
      if (exact) {
        ++result.correct;
        ++(hard ? result.hard_correct : result.easy_correct);
      }
    }
  }
  result.loss = result.total ? loss_total / static_cast<double>(result.total) : 0.0;
  return result;
}

TokenIds greedy_decode(const ModelParams& params, std::span<const std::int32_t> prompt,
                       Index max_new, const SpecialTokens& special) {
  TokenIds context{special.bos};
  context.insert(context.end(), prompt.begin(), prompt.end());
  TokenIds generated;
  while (static_cast<Index>(generated.size()) < max_new &&
         static_cast<Index>(context.size()) <= params.config.context_length) {
    TokenGrid inputs(1, static_cast<Index>(context.size()));
    for (std::size_t i = 0; i < context.size(); ++i) inputs(0, static_cast<Index>(i)) = context[i];
    Graph graph;
    const Tensor logits = forward(graph, params, inputs, false).logits;
    Index best = 0;
    logits.matrix().row(inputs.cols() - 1).maxCoeff(&best);
    const auto next = static_cast<std::int32_t>(best);
    generated.push_back(next);
    context.push_back(next);
    if (next == special.separator) break;
  }
  return generated;
}

}  // namespace bft
