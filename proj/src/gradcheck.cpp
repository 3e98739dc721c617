#include "bft/gradcheck.hpp"

#include <cmath>
#include <sstream>

namespace bft {
namespace {

double evaluate(const ScalarFunction& fn, std::span<const GradInput> inputs, GraphOptions options) {
  Graph graph(options);
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const GradInput& in : inputs) leaves.push_back(graph.constant(in.shape, in.values));
  return fn(graph, leaves).item();
}

}  // namespace

GradCheckResult check_gradients(std::string name, const ScalarFunction& fn,
                                std::span<const GradInput> inputs, GradCheckTolerance tolerance,
                                GraphOptions options) {
  GradCheckResult result;
  result.name = std::move(name);

  std::vector<Vector> analytic;
  {
    Graph graph(options);
    std::vector<Tensor> leaves;
    for (const GradInput& in : inputs) leaves.push_back(graph.parameter(in.shape, in.values));
    graph.backward(fn(graph, leaves));
    for (const Tensor& leaf : leaves) analytic.push_back(graph.grad(leaf));
  }

  std::vector<GradInput> probe(inputs.begin(), inputs.end());
  double worst_excess = -1.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    for (Index j = 0; j < probe[i].values.size(); ++j) {
      const double original = probe[i].values(j);
      probe[i].values(j) = original + tolerance.step;
      const double plus = evaluate(fn, probe, options);
      probe[i].values(j) = original - tolerance.step;
      const double minus = evaluate(fn, probe, options);
      probe[i].values(j) = original;

      const double numeric = (plus - minus) / (2.0 * tolerance.step);
      const double abs_error = std::abs(analytic[i](j) - numeric);
      const double rel_error = abs_error / std::max(std::abs(numeric), 1e-300);
      const double allowed = tolerance.absolute + tolerance.relative * std::abs(numeric);
      result.max_abs_error = std::max(result.max_abs_error, abs_error);
      if (std::abs(numeric) > tolerance.absolute)
        result.max_rel_error = std::max(result.max_rel_error, rel_error);
      if (abs_error - allowed > worst_excess) {
        worst_excess = abs_error - allowed;
        std::ostringstream msg;
        msg.precision(10);
        msg << "input " << i << ", element " << j << ": analytic " << analytic[i](j)
            << " vs numeric " << numeric;
        result.worst = msg.str();
      }
      if (!(abs_error <= allowed)) result.passed = false;
      ++result.checked;
    }
  }
  return result;
}

}  // namespace bft
