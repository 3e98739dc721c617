#pragma once

// Differentiable primitives. Shapes are strict: apart from add_bias, no
// operation broadcasts.

#include <vector>

#include "bft/tensor.hpp"

namespace bft {

// Elementwise, operands of identical shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);
/// Natural log; every input must be strictly positive.
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
/// x^p. Non-integer p requires x >= 0.
Tensor pow(const Tensor& x, double p);
Tensor gelu(const Tensor& x);

/// x[..., d] + bias[d].
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Reduces `axis`, removing it from the shape.
Tensor sum(const Tensor& x, Index axis);
Tensor mean(const Tensor& x, Index axis);
/// Minimum over all elements. The subgradient goes to the first minimal element.
Tensor min(const Tensor& x);

/// 1-D tensor of the elements of `x` where `mask` is non-zero (row-major order).
Tensor masked_select(const Tensor& x, const TokenGrid& mask);
Tensor concat(const std::vector<Tensor>& parts, Index axis);
Tensor reshape(const Tensor& x, Shape shape);

/// [n, k] x [k, m].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Normalises over the last dimension, then scales by gamma[d] and shifts by beta[d].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Rows of `table` [V, d] selected by `ids`; result [ids.size(), d].
Tensor embedding(const Tensor& table, const TokenGrid& ids);

Tensor softmax_rows(const Tensor& z);
Tensor log_softmax_rows(const Tensor& z);

/// out[b, t] = p[b, t, targets(b, t)] for p of shape [B, T, V].
Tensor gather_target(const Tensor& p, const TokenGrid& targets);

/// Stride-1 window means over a 1-D tensor; a single whole-sequence mean when
/// the sequence is shorter than `window`.
Tensor window_mean(const Tensor& x, Index window);

inline Tensor detach(const Tensor& x) { return x.graph().detach(x); }

/// Multi-head causal scaled dot-product attention. q, k, v are
/// [batch * seq, d] with rows grouped by sample; d must divide into `heads`.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, Index batch,
                        Index heads);

}  // namespace bft
