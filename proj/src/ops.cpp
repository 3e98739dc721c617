#include "bft/ops.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <string>

#include "bft/errors.hpp"
#include "bft/kernels.hpp"

namespace bft {
namespace {

using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

ConstMatrixMap view(const Vector& v, Index rows, Index cols) { return {v.data(), rows, cols}; }
MatrixMap view(Vector& v, Index rows, Index cols) { return {v.data(), rows, cols}; }

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

Index last_dim(const Tensor& x) { return x.shape().empty() ? 1 : x.shape().back(); }

template <class Rule>
Tensor unary(const Tensor& x, Vector value, Rule rule) {
  const std::array inputs{x};
  return x.graph().record(x.shape(), std::move(value), inputs, std::move(rule));
}

// Gradient of an elementwise unary op: dx += upstream * local.
Tensor elementwise(const Tensor& x, Vector value, Vector local) {
  return unary(x, std::move(value), [local = std::move(local)](Graph& g, std::size_t self) {
    if (Vector* dx = g.grad_sink(g.inputs(self)[0])) {
      dx->array() += g.upstream(self).array() * local.array();
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  const std::array inputs{a, b};
  return a.graph().record(a.shape(), a.values() + b.values(), inputs,
                          [](Graph& g, std::size_t self) {
                            for (std::size_t in : g.inputs(self))
                              if (Vector* d = g.grad_sink(in)) *d += g.upstream(self);
                          });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  const std::array inputs{a, b};
  return a.graph().record(a.shape(), a.values() - b.values(), inputs,
                          [](Graph& g, std::size_t self) {
                            const auto& in = g.inputs(self);
                            if (Vector* da = g.grad_sink(in[0])) *da += g.upstream(self);
                            if (Vector* db = g.grad_sink(in[1])) *db -= g.upstream(self);
                          });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  const std::array inputs{a, b};
  return a.graph().record(a.shape(), a.values().cwiseProduct(b.values()), inputs,
                          [](Graph& g, std::size_t self) {
                            const auto& in = g.inputs(self);
                            const Vector& up = g.upstream(self);
                            if (Vector* da = g.grad_sink(in[0]))
                              *da += up.cwiseProduct(g.value(in[1]));
                            if (Vector* db = g.grad_sink(in[1]))
                              *db += up.cwiseProduct(g.value(in[0]));
                          });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  if ((b.values().array() == 0.0).any()) throw ContractError("div: zero denominator");
  const std::array inputs{a, b};
  return a.graph().record(
      a.shape(), a.values().cwiseQuotient(b.values()), inputs, [](Graph& g, std::size_t self) {
        const auto& in = g.inputs(self);
        const Vector& up = g.upstream(self);
        const Vector& denom = g.value(in[1]);
        if (Vector* da = g.grad_sink(in[0])) *da += up.cwiseQuotient(denom);
        if (Vector* db = g.grad_sink(in[1])) {
          db->array() -= up.array() * g.value(in[0]).array() / denom.array().square();
        }
      });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary(x, (x.values().array() + c).matrix(), [](Graph& g, std::size_t self) {
    if (Vector* dx = g.grad_sink(g.inputs(self)[0])) *dx += g.upstream(self);
  });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary(x, x.values() * c, [c](Graph& g, std::size_t self) {
    if (Vector* dx = g.grad_sink(g.inputs(self)[0])) *dx += c * g.upstream(self);
  });
}

Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

Tensor log(const Tensor& x) {
  if (!(x.values().array() > 0.0).all()) {
    throw ContractError("log: input must be strictly positive");
  }
  return elementwise(x, x.values().array().log().matrix(), x.values().cwiseInverse());
}

Tensor exp(const Tensor& x) {
  Vector value = x.values().array().exp().matrix();
  Vector local = value;
  return elementwise(x, std::move(value), std::move(local));
}

Tensor pow(const Tensor& x, double p) {
  if (p != std::floor(p) && !(x.values().array() >= 0.0).all()) {
    throw ContractError("pow: non-integer exponent needs non-negative input");
  }
  Vector local = p * x.values().array().pow(p - 1.0).matrix();
  return elementwise(x, x.values().array().pow(p).matrix(), std::move(local));
}

Tensor gelu(const Tensor& x) {
  Vector value = x.values().unaryExpr([](double v) { return kernels::gelu(v); });
  Vector local = x.values().unaryExpr([](double v) { return kernels::gelu_derivative(v); });
  if (x.graph().options().flip_gelu_backward) local = -local;
  return elementwise(x, std::move(value), std::move(local));
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const Index d = last_dim(x);
  if (bias.rank() != 1 || bias.shape()[0] != d) {
    throw DimensionError("add_bias: bias " + to_string(bias.shape()) + " vs input " +
                         to_string(x.shape()));
  }
  const Index rows = x.size() / d;
  Vector value = x.values();
  view(value, rows, d).rowwise() += bias.values().transpose();
  const std::array inputs{x, bias};
  return x.graph().record(x.shape(), std::move(value), inputs,
                          [rows, d](Graph& g, std::size_t self) {
                            const auto& in = g.inputs(self);
                            const Vector& up = g.upstream(self);
                            if (Vector* dx = g.grad_sink(in[0])) *dx += up;
                            if (Vector* db = g.grad_sink(in[1]))
                              *db += view(up, rows, d).colwise().sum().transpose();
                          });
}

Tensor sum(const Tensor& x) {
  Vector value(1);
  value(0) = x.values().sum();
  return x.graph().record({}, std::move(value), std::array{x}, [](Graph& g, std::size_t self) {
    if (Vector* dx = g.grad_sink(g.inputs(self)[0])) dx->array() += g.upstream(self)(0);
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ContractError("mean of empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor sum(const Tensor& x, Index axis) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= x.rank()) {
    throw DimensionError("sum: axis " + std::to_string(axis) + " out of range for " +
                         to_string(s));
  }
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= s[i];
  for (Index i = axis + 1; i < x.rank(); ++i) inner *= s[i];
  const Index n = s[axis];
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + axis);

  Vector value = Vector::Zero(outer * inner);
  const Vector& xv = x.values();
  for (Index o = 0; o < outer; ++o)
    for (Index j = 0; j < n; ++j)
      value.segment(o * inner, inner) += xv.segment((o * n + j) * inner, inner);

  return x.graph().record(std::move(out_shape), std::move(value), std::array{x},
                          [outer, inner, n](Graph& g, std::size_t self) {
                            Vector* dx = g.grad_sink(g.inputs(self)[0]);
                            if (!dx) return;
                            const Vector& up = g.upstream(self);
                            for (Index o = 0; o < outer; ++o)
                              for (Index j = 0; j < n; ++j)
                                dx->segment((o * n + j) * inner, inner) +=
                                    up.segment(o * inner, inner);
                          });
}

Tensor mean(const Tensor& x, Index axis) {
  if (axis < 0 || axis >= x.rank() || x.shape()[axis] == 0) {
    throw DimensionError("mean: bad axis " + std::to_string(axis) + " for " +
                         to_string(x.shape()));
  }
  return mul_scalar(sum(x, axis), 1.0 / static_cast<double>(x.shape()[axis]));
}

Tensor min(const Tensor& x) {
  if (x.size() == 0) throw ContractError("min of empty tensor");
  const Vector& xv = x.values();
  Index arg = 0;
  for (Index i = 1; i < xv.size(); ++i)
    if (xv(i) < xv(arg)) arg = i;
  Vector value(1);
  value(0) = xv(arg);
  return x.graph().record({}, std::move(value), std::array{x},
                          [arg](Graph& g, std::size_t self) {
                            if (Vector* dx = g.grad_sink(g.inputs(self)[0]))
                              (*dx)(arg) += g.upstream(self)(0);
                          });
}

Tensor masked_select(const Tensor& x, const TokenGrid& mask) {
  if (mask.size() != x.size()) {
    throw DimensionError("masked_select: mask has " + std::to_string(mask.size()) +
                         " entries, input " + to_string(x.shape()));
  }
  std::vector<Index> picked;
  for (Index i = 0; i < mask.size(); ++i)
    if (mask.data()[i] != 0) picked.push_back(i);
  const Index count = static_cast<Index>(picked.size());
  Vector value(count);
  for (Index i = 0; i < count; ++i) value(i) = x.values()(picked[static_cast<std::size_t>(i)]);
  return x.graph().record({count}, std::move(value), std::array{x},
                          [picked = std::move(picked)](Graph& g, std::size_t self) {
                            Vector* dx = g.grad_sink(g.inputs(self)[0]);
                            if (!dx) return;
                            const Vector& up = g.upstream(self);
                            for (std::size_t i = 0; i < picked.size(); ++i)
                              (*dx)(picked[i]) += up(static_cast<Index>(i));
                          });
}

Tensor concat(const std::vector<Tensor>& parts, Index axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis < 0 || axis >= static_cast<Index>(first.size())) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " +
                         to_string(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<Index> widths;  // contiguous chunk length of each part per outer index
  for (const Tensor& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != first.size()) throw DimensionError("concat: rank mismatch");
    probe[axis] = first[axis];
    if (probe != first) {
      throw DimensionError("concat: " + to_string(p.shape()) + " incompatible with " +
                           to_string(first));
    }
    out_shape[axis] += p.shape()[axis];
  }
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= first[i];
  for (Index i = axis + 1; i < static_cast<Index>(first.size()); ++i) inner *= first[i];
  for (const Tensor& p : parts) widths.push_back(p.shape()[axis] * inner);
  const Index row = numel(out_shape) / (outer == 0 ? 1 : outer);

  Vector value(numel(out_shape));
  for (Index o = 0; o < outer; ++o) {
    Index offset = o * row;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      value.segment(offset, widths[k]) = parts[k].values().segment(o * widths[k], widths[k]);
      offset += widths[k];
    }
  }
  return parts.front().graph().record(
      std::move(out_shape), std::move(value), parts,
      [outer, row, widths = std::move(widths)](Graph& g, std::size_t self) {
        const Vector& up = g.upstream(self);
        const auto& in = g.inputs(self);
        Index start = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
          if (Vector* d = g.grad_sink(in[k]))
            for (Index o = 0; o < outer; ++o)
              d->segment(o * widths[k], widths[k]) += up.segment(o * row + start, widths[k]);
          start += widths[k];
        }
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  return x.graph().record(std::move(shape), x.values(), std::array{x},
                          [](Graph& g, std::size_t self) {
                            if (Vector* dx = g.grad_sink(g.inputs(self)[0])) *dx += g.upstream(self);
                          });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: cannot multiply " + to_string(a.shape()) + " by " +
                         to_string(b.shape()));
  }
  const Index n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  Vector value(n * m);
  view(value, n, m).noalias() = a.matrix() * b.matrix();
  const std::array inputs{a, b};
  return a.graph().record({n, m}, std::move(value), inputs,
                          [n, k, m](Graph& g, std::size_t self) {
                            const auto& in = g.inputs(self);
                            const auto up = view(g.upstream(self), n, m);
                            if (Vector* da = g.grad_sink(in[0]))
                              view(*da, n, k).noalias() += up * view(g.value(in[1]), k, m).transpose();
                            if (Vector* db = g.grad_sink(in[1]))
                              view(*db, k, m).noalias() += view(g.value(in[0]), n, k).transpose() * up;
                          });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const Index d = last_dim(x);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gamma " + to_string(gamma.shape()) + ", beta " +
                         to_string(beta.shape()) + " vs input " + to_string(x.shape()));
  }
  const Index rows = x.size() / d;
  RowMatrix normalized = x.matrix();
  Vector inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    auto row = normalized.row(r);
    row.array() -= row.mean();
    inv_std(r) = 1.0 / std::sqrt(row.squaredNorm() / static_cast<double>(d) + eps);
    row *= inv_std(r);
  }
  Vector value(x.size());
  view(value, rows, d) =
      (normalized.array().rowwise() * gamma.values().transpose().array()).rowwise() +
      beta.values().transpose().array();
  const std::array inputs{x, gamma, beta};
  return x.graph().record(
      x.shape(), std::move(value), inputs,
      [rows, d, normalized = std::move(normalized), inv_std = std::move(inv_std)](
          Graph& g, std::size_t self) {
        const auto& in = g.inputs(self);
        const auto up = view(g.upstream(self), rows, d);
        if (Vector* dgamma = g.grad_sink(in[1]))
          *dgamma += up.cwiseProduct(normalized).colwise().sum().transpose();
        if (Vector* dbeta = g.grad_sink(in[2])) *dbeta += up.colwise().sum().transpose();
        if (Vector* dx = g.grad_sink(in[0])) {
          const Eigen::RowVectorXd gamma_row = g.value(in[1]).transpose();
          auto dxm = view(*dx, rows, d);
          for (Index r = 0; r < rows; ++r) {
            const Eigen::RowVectorXd dxhat = up.row(r).cwiseProduct(gamma_row);
            const double mean_dxhat = dxhat.mean();
            const double mean_dot = dxhat.dot(normalized.row(r)) / static_cast<double>(d);
            dxm.row(r) += inv_std(r) *
                          (dxhat.array() - mean_dxhat - normalized.row(r).array() * mean_dot)
                              .matrix();
          }
        }
      });
}

Tensor embedding(const Tensor& table, const TokenGrid& ids) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be 2-D, got " + to_string(table.shape()));
  const Index vocab = table.shape()[0], d = table.shape()[1];
  const Index n = ids.size();
  Vector value(n * d);
  auto out = view(value, n, d);
  const auto tab = table.matrix();
  for (Index i = 0; i < n; ++i) {
    const std::int32_t id = ids.data()[i];
    if (id < 0 || id >= vocab) {
      throw IndexError("embedding: token id " + std::to_string(id) + " at position " +
                       std::to_string(i) + " outside vocabulary of " + std::to_string(vocab));
    }
    out.row(i) = tab.row(id);
  }
  return table.graph().record({n, d}, std::move(value), std::array{table},
                              [ids, vocab, d](Graph& g, std::size_t self) {
                                Vector* dt = g.grad_sink(g.inputs(self)[0]);
                                if (!dt) return;
                                auto dtab = view(*dt, vocab, d);
                                const auto up = view(g.upstream(self), ids.size(), d);
                                for (Index i = 0; i < ids.size(); ++i) dtab.row(ids.data()[i]) += up.row(i);
                              });
}

Tensor softmax_rows(const Tensor& z) {
  if (z.rank() < 1 || last_dim(z) < 1) throw DimensionError("softmax_rows: empty last dimension");
  const Index d = last_dim(z), rows = z.size() / d;
  Vector value(z.size());
  view(value, rows, d) = kernels::softmax_rows(z.matrix());
  return unary(z, std::move(value), [rows, d](Graph& g, std::size_t self) {
    Vector* dz = g.grad_sink(g.inputs(self)[0]);
    if (!dz) return;
    const auto y = view(g.value(self), rows, d);
    const auto up = view(g.upstream(self), rows, d);
    const Eigen::VectorXd dots = up.cwiseProduct(y).rowwise().sum();
    view(*dz, rows, d).array() += y.array() * (up.colwise() - dots).array();
  });
}

Tensor log_softmax_rows(const Tensor& z) {
  if (z.rank() < 1 || last_dim(z) < 1) throw DimensionError("log_softmax_rows: empty last dimension");
  const Index d = last_dim(z), rows = z.size() / d;
  Vector value(z.size());
  view(value, rows, d) = kernels::log_softmax_rows(z.matrix());
  return unary(z, std::move(value), [rows, d](Graph& g, std::size_t self) {
    Vector* dz = g.grad_sink(g.inputs(self)[0]);
    if (!dz) return;
    const auto up = view(g.upstream(self), rows, d);
    const RowMatrix probs = view(g.value(self), rows, d).array().exp().matrix();
    const Eigen::VectorXd totals = up.rowwise().sum();
    view(*dz, rows, d) += up - (probs.array().colwise() * totals.array()).matrix();
  });
}

Tensor gather_target(const Tensor& p, const TokenGrid& targets) {
  if (p.rank() != 3 || p.shape()[0] != targets.rows() || p.shape()[1] != targets.cols()) {
    throw DimensionError("gather_target: probabilities " + to_string(p.shape()) +
                         " vs targets [" + std::to_string(targets.rows()) + "," +
                         std::to_string(targets.cols()) + "]");
  }
  const Index batch = targets.rows(), steps = targets.cols(), vocab = p.shape()[2];
  std::vector<Index> slots(static_cast<std::size_t>(batch * steps));
  Vector value(batch * steps);
  for (Index b = 0; b < batch; ++b) {
    for (Index t = 0; t < steps; ++t) {
      const std::int32_t y = targets(b, t);
      if (y < 0 || y >= vocab) {
        throw IndexError("gather_target: index " + std::to_string(y) + " at (b=" +
                         std::to_string(b) + ", t=" + std::to_string(t) +
                         ") outside vocabulary of " + std::to_string(vocab));
      }
      const Index flat = b * steps + t;
      slots[static_cast<std::size_t>(flat)] = flat * vocab + y;
      value(flat) = p.values()(flat * vocab + y);
    }
  }
  return p.graph().record({batch, steps}, std::move(value), std::array{p},
                          [slots = std::move(slots)](Graph& g, std::size_t self) {
                            Vector* dp = g.grad_sink(g.inputs(self)[0]);
                            if (!dp) return;
                            const Vector& up = g.upstream(self);
                            for (std::size_t i = 0; i < slots.size(); ++i)
                              (*dp)(slots[i]) += up(static_cast<Index>(i));
                          });
}

Tensor window_mean(const Tensor& x, Index window) {
  if (window < 1) throw ConfigError("window_mean: window length must be >= 1, got " + std::to_string(window));
  if (x.rank() != 1) throw DimensionError("window_mean: expects a 1-D sequence, got " + to_string(x.shape()));
  Vector value = kernels::window_means(x.values(), window);
  const Index width = std::min(window, x.size());
  const Index count = value.size();
  return x.graph().record({count}, std::move(value), std::array{x},
                          [width, count](Graph& g, std::size_t self) {
                            Vector* dx = g.grad_sink(g.inputs(self)[0]);
                            if (!dx) return;
                            const Vector& up = g.upstream(self);
                            const double scale = 1.0 / static_cast<double>(width);
                            for (Index i = 0; i < count; ++i)
                              dx->segment(i, width).array() += scale * up(i);
                          });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, Index batch,
                        Index heads) {
  require_same_shape("causal_attention", q, k);
  require_same_shape("causal_attention", q, v);
  if (q.rank() != 2 || batch < 1 || q.shape()[0] % batch != 0) {
    throw DimensionError("causal_attention: cannot split " + to_string(q.shape()) + " into " +
                         std::to_string(batch) + " samples");
  }
  const Index d = q.shape()[1];
  if (heads < 1 || d % heads != 0) {
    throw DimensionError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  const Index n = q.shape()[0], seq = n / batch, dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  const auto qm = q.matrix(), km = k.matrix(), vm = v.matrix();
  std::vector<RowMatrix> probs(static_cast<std::size_t>(batch * heads));
  Vector value(n * d);
  auto out = view(value, n, d);
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      RowMatrix scores = scale * qm.block(b * seq, h * dh, seq, dh) *
                         km.block(b * seq, h * dh, seq, dh).transpose();
      for (Index i = 0; i < seq; ++i) {
        auto row = scores.row(i);
        const double peak = row.head(i + 1).maxCoeff();
        row.head(i + 1).array() = (row.head(i + 1).array() - peak).exp();
        row.head(i + 1) /= row.head(i + 1).sum();
        row.tail(seq - i - 1).setZero();
      }
      out.block(b * seq, h * dh, seq, dh).noalias() = scores * vm.block(b * seq, h * dh, seq, dh);
      probs[static_cast<std::size_t>(b * heads + h)] = std::move(scores);
    }
  }

  const std::array inputs{q, k, v};
  return q.graph().record(
      q.shape(), std::move(value), inputs,
      [n, d, seq, dh, batch, heads, scale, probs = std::move(probs)](Graph& g, std::size_t self) {
        const auto& in = g.inputs(self);
        const auto up = view(g.upstream(self), n, d);
        const auto qv = view(g.value(in[0]), n, d);
        const auto kv = view(g.value(in[1]), n, d);
        const auto vv = view(g.value(in[2]), n, d);
        Vector* dq = g.grad_sink(in[0]);
        Vector* dk = g.grad_sink(in[1]);
        Vector* dv = g.grad_sink(in[2]);
        for (Index b = 0; b < batch; ++b) {
          for (Index h = 0; h < heads; ++h) {
            const RowMatrix& p = probs[static_cast<std::size_t>(b * heads + h)];
            const auto upb = up.block(b * seq, h * dh, seq, dh);
            if (dv) view(*dv, n, d).block(b * seq, h * dh, seq, dh).noalias() += p.transpose() * upb;
            if (!dq && !dk) continue;
            const RowMatrix dp = upb * vv.block(b * seq, h * dh, seq, dh).transpose();
            const Eigen::VectorXd dots = dp.cwiseProduct(p).rowwise().sum();
            const RowMatrix ds = scale * (p.array() * (dp.colwise() - dots).array()).matrix();
            if (dq) view(*dq, n, d).block(b * seq, h * dh, seq, dh).noalias() += ds * kv.block(b * seq, h * dh, seq, dh);
            if (dk) view(*dk, n, d).block(b * seq, h * dh, seq, dh).noalias() += ds.transpose() * qv.block(b * seq, h * dh, seq, dh);
          }
        }
      });
}

}  // namespace bft
