#include <cmath>
#include <sstream>

#include "bft/experiment.hpp"
#include "bft/kernels.hpp"
#include "bft/objectives.hpp"
#include "bft/ops.hpp"
#include "bft/random.hpp"

namespace bft {
namespace {

Vector uniform(Rng& rng, Index n, double lo, double hi) {
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = lo + (hi - lo) * rng.uniform();
  return v;
}

GradInput input(Rng& rng, Shape shape, double lo = -3.0, double hi = 3.0) {
  const Index n = numel(shape);
  return {std::move(shape), uniform(rng, n, lo, hi)};
}

// Denominators bounded away from zero.
GradInput nonzero(Rng& rng, Shape shape) {
  GradInput in = input(rng, std::move(shape), 0.5, 3.0);
  for (Index i = 0; i < in.values.size(); ++i)
    if (rng.uniform() < 0.5) in.values(i) = -in.values(i);
  return in;
}

TokenGrid random_ids(Rng& rng, Index rows, Index cols, Index limit) {
  TokenGrid ids(rows, cols);
  for (Index i = 0; i < ids.size(); ++i) ids.data()[i] = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(limit)));
  return ids;
}

// Reduces an arbitrary output to a scalar through fixed random weights so
// every output element carries a distinct upstream gradient.
ScalarFunction projected(std::function<Tensor(std::span<const Tensor>)> op, std::uint64_t seed) {
  return [op = std::move(op), seed](Graph& g, std::span<const Tensor> xs) {
    const Tensor out = op(xs);
    Rng rng(seed);
    return sum(mul(out, g.constant(out.shape(), uniform(rng, out.size(), -1.0, 1.0))));
  };
}

struct Case {
  std::string name;
  ScalarFunction fn;
  std::vector<GradInput> inputs;
};

std::vector<Case> primitive_cases(Rng& rng, std::uint64_t seed) {
  std::vector<Case> cases;
  auto add_case = [&](std::string name, std::function<Tensor(std::span<const Tensor>)> op,
                      std::vector<GradInput> inputs) {
    cases.push_back({std::move(name), projected(std::move(op), seed + cases.size()), std::move(inputs)});
  };
  const TokenGrid mask = random_ids(rng, 3, 4, 2);
  const TokenGrid ids = random_ids(rng, 2, 3, 5);
  const TokenGrid targets = random_ids(rng, 2, 3, 4);

  add_case("add", [](auto x) { return add(x[0], x[1]); }, {input(rng, {3, 4}), input(rng, {3, 4})});
  add_case("sub", [](auto x) { return sub(x[0], x[1]); }, {input(rng, {3, 4}), input(rng, {3, 4})});
  add_case("mul", [](auto x) { return mul(x[0], x[1]); }, {input(rng, {3, 4}), input(rng, {3, 4})});
  add_case("div", [](auto x) { return div(x[0], x[1]); }, {input(rng, {3, 4}), nonzero(rng, {3, 4})});
  add_case("add_scalar", [](auto x) { return add_scalar(x[0], 1.7); }, {input(rng, {5})});
  add_case("mul_scalar", [](auto x) { return mul_scalar(x[0], -2.3); }, {input(rng, {5})});
  add_case("log", [](auto x) { return log(x[0]); }, {input(rng, {6}, 0.1, 3.0)});
  add_case("exp", [](auto x) { return exp(x[0]); }, {input(rng, {6})});
  add_case("pow_integer", [](auto x) { return pow(x[0], 3.0); }, {input(rng, {6})});
  add_case("pow_fractional", [](auto x) { return pow(x[0], 2.5); }, {input(rng, {6}, 0.1, 3.0)});
  add_case("gelu", [](auto x) { return gelu(x[0]); }, {input(rng, {8})});
  add_case("add_bias", [](auto x) { return add_bias(x[0], x[1]); }, {input(rng, {3, 4}), input(rng, {4})});
  add_case("sum", [](auto x) { return sum(x[0]); }, {input(rng, {2, 3})});
  add_case("mean", [](auto x) { return mean(x[0]); }, {input(rng, {2, 3})});
  add_case("sum_axis0", [](auto x) { return sum(x[0], 0); }, {input(rng, {2, 3, 4})});
  add_case("sum_axis1", [](auto x) { return sum(x[0], 1); }, {input(rng, {2, 3, 4})});
  add_case("mean_axis2", [](auto x) { return mean(x[0], 2); }, {input(rng, {2, 3, 4})});
  add_case("min", [](auto x) { return min(x[0]); }, {input(rng, {7})});
  add_case("masked_select", [mask](auto x) { return masked_select(x[0], mask); }, {input(rng, {3, 4})});
  add_case("concat_axis0", [](auto x) { return concat({x[0], x[1]}, 0); }, {input(rng, {2, 3}), input(rng, {1, 3})});
  add_case("concat_axis1", [](auto x) { return concat({x[0], x[1]}, 1); }, {input(rng, {2, 3}), input(rng, {2, 2})});
  add_case("reshape", [](auto x) { return reshape(x[0], {3, 2}); }, {input(rng, {2, 3})});
  add_case("matmul", [](auto x) { return matmul(x[0], x[1]); }, {input(rng, {3, 4}), input(rng, {4, 2})});
  add_case("layer_norm", [](auto x) { return layer_norm(x[0], x[1], x[2]); },
           {input(rng, {3, 5}), input(rng, {5}), input(rng, {5})});
  add_case("embedding", [ids](auto x) { return embedding(x[0], ids); }, {input(rng, {5, 3})});
  add_case("softmax_rows", [](auto x) { return softmax_rows(x[0]); }, {input(rng, {3, 5})});
  add_case("log_softmax_rows", [](auto x) { return log_softmax_rows(x[0]); }, {input(rng, {3, 5})});
  add_case("gather_target", [targets](auto x) { return gather_target(softmax_rows(x[0]), targets); },
           {input(rng, {2, 3, 4})});
  add_case("window_mean", [](auto x) { return window_mean(x[0], 3); }, {input(rng, {7})});
  add_case("window_mean_short", [](auto x) { return window_mean(x[0], 9); }, {input(rng, {4})});
  add_case("causal_attention", [](auto x) { return causal_attention(x[0], x[1], x[2], 2, 2); },
           {input(rng, {6, 4}), input(rng, {6, 4}), input(rng, {6, 4})});
  return cases;
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite(const GradcheckOptions& options) {
  const GraphOptions graph_options{.flip_gelu_backward = options.inject_fault};
  std::vector<GradCheckResult> results;

  // Central differences are exact for a quadratic, so only rounding remains.
  {
    Rng rng(options.seed);
    const std::vector<GradInput> inputs{input(rng, {6})};
    GradCheckResult r = check_gradients(
        "square", [](Graph&, std::span<const Tensor> x) { return sum(mul(x[0], x[0])); }, inputs,
        {.step = 1e-3, .relative = 0.0, .absolute = 1e-10}, graph_options);
    results.push_back(std::move(r));
  }

  const int trials = options.full ? 5 : 1;
  for (int trial = 0; trial < trials; ++trial) {
    Rng rng(mix_seed(options.seed, 100 + static_cast<std::uint64_t>(trial)));
    for (Case& c : primitive_cases(rng, options.seed + static_cast<std::uint64_t>(trial))) {
      GradCheckResult r = check_gradients(c.name, c.fn, c.inputs, {}, graph_options);
      if (trials > 1) r.name += "#" + std::to_string(trial);
      results.push_back(std::move(r));
    }
  }

  // Whole micro model under the (undetached) SFT objective.
  {
    const ModelConfig config{.vocab_size = 8, .context_length = 6, .embed_dim = 8, .layers = 1,
                             .heads = 2, .seed = options.seed};
    const ModelParams params = init_model(config);
    Rng rng(mix_seed(options.seed, 7));
    const std::vector<std::int32_t> p1{1, 2}, r1{3, 4, 0}, p2{4}, r2{2, 1};
    const std::vector<Sample> samples{Sample::prompt_response(p1, r1), Sample::prompt_response(p2, r2)};
    const SpecialTokens special = SpecialTokens::for_vocab(config.vocab_size);
    const TokenBatch batch = build_batch(samples, config.context_length, special);
    std::vector<GradInput> inputs;
    for (const auto& t : params.tensors) {
      // Scale up from the 0.02 init so every path carries signal.
      inputs.push_back({t.shape, t.values * 20.0 + uniform(rng, t.values.size(), -0.1, 0.1)});
    }
    const ScalarFunction model_fn = [&](Graph&, std::span<const Tensor> leaves) {
      return loss_sft(forward(config, leaves, batch.inputs), batch).loss;
    };
    results.push_back(check_gradients("micro_model_sft", model_fn, inputs, {}, graph_options));
  }

  // Finite differences see through detach, so compare against d/dx [sg(x) x] = x.
  {
    Rng rng(mix_seed(options.seed, 13));
    Graph graph(graph_options);
    const Vector xv = uniform(rng, 5, -3.0, 3.0);
    const Tensor x = graph.parameter({5}, xv);
    graph.backward(sum(mul(detach(x), x)));
    GradCheckResult r;
    r.name = "detach";
    r.checked = xv.size();
    r.max_abs_error = (graph.grad(x) - xv).cwiseAbs().maxCoeff();
    r.passed = r.max_abs_error == 0.0;
    if (!r.passed) r.worst = "gradient differs from the undetached factor";
    results.push_back(std::move(r));
  }

  // Closed-form BFT gradient with respect to the logits.
  {
    Rng rng(mix_seed(options.seed, 11));
    const Index rows = 3, steps = 6, vocab = 5;
    TokenBatch batch;
    batch.inputs = TokenGrid::Zero(rows, steps);
    batch.targets = random_ids(rng, rows, steps, vocab);
    batch.mask = random_ids(rng, rows, steps, 2);
    batch.mask(0, 0) = 1;
    batch.mask.row(2).setZero();  // a sample with nothing supervised
    for (Index b = 0; b < rows; ++b) {
      batch.lengths.push_back(steps);
      batch.valid_counts.push_back(batch.mask.row(b).sum());
      batch.hard.push_back(0);
    }
    const ObjectiveConfig cfg = ObjectiveConfig::bft(2);
    Graph graph(graph_options);
    const Tensor logits = graph.parameter({rows, steps, vocab}, uniform(rng, rows * steps * vocab, -3.0, 3.0));
    const LossBreakdown bd = loss_bft(logits, batch, cfg);
    graph.backward(bd.loss);
    const Vector autodiff = graph.grad(logits);

    const RowMatrix probs = kernels::softmax_rows(logits.matrix());
    GradCheckResult r;
    r.name = "bft_closed_form";
    for (Index b = 0; b < rows; ++b) {
      const double denom = static_cast<double>(batch.mask.row(b).sum()) + cfg.epsilon;
      for (Index t = 0; t < steps; ++t) {
        const Index row = b * steps + t;
        const double w = probs(row, batch.targets(b, t));
        for (Index v = 0; v < vocab; ++v) {
          const double onehot = v == batch.targets(b, t) ? 1.0 : 0.0;
          const double expected = bd.sample_coefficient(b) * w * (probs(row, v) - onehot) *
                                  batch.mask(b, t) / denom / static_cast<double>(rows);
          const double err = std::abs(autodiff(row * vocab + v) - expected);
          if (err > r.max_abs_error) {
            r.max_abs_error = err;
            std::ostringstream msg;
            msg << "logit (" << b << "," << t << "," << v << "): autodiff " << autodiff(row * vocab + v)
                << " vs closed form " << expected;
            r.worst = msg.str();
          }
          ++r.checked;
        }
      }
    }
    r.passed = r.max_abs_error <= 1e-6;
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace bft
