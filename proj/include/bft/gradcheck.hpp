#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bft/tensor.hpp"

namespace bft {

/// Builds a scalar from the leaf inputs on a fresh graph.
using ScalarFunction = std::function<Tensor(Graph&, std::span<const Tensor>)>;

struct GradInput {
  Shape shape;
  Vector values;
};

struct GradCheckTolerance {
  double step = 1e-5;
  double relative = 1e-4;
  double absolute = 1e-6;
};

struct GradCheckResult {
  std::string name;
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  Index checked = 0;
  bool passed = true;
  std::string worst;  // "input i, element j: analytic a vs numeric n"
};

/// Central finite differences on every input element against backward().
/// An element passes when |analytic - numeric| <= absolute + relative * |numeric|.
GradCheckResult check_gradients(std::string name, const ScalarFunction& fn,
                                std::span<const GradInput> inputs,
                                GradCheckTolerance tolerance = {}, GraphOptions options = {});

}  // namespace bft
