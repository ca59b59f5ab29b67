#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <vector>

#include "lce/tensor.hpp"

// Differentiable op library. Every op validates shapes, computes the forward
// value, and (when a tape is supplied and an input requires grad) records a
// backward closure. Closures bail out early when the op output never received
// a gradient, which keeps unused parameters' grad buffers empty.
//
// Reductions that feed attention (softmax normalization, probability-weighted
// value mixing) accumulate scalar-sequentially in ascending index order, so a
// row padded with exact zeros produces bit-identical sums to its unpadded
// counterpart. The isolation guarantees of block-masked packing rest on this.

namespace lce {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

namespace detail {

template <typename T>
inline bool want_grad(const Tape<T>* tape, const Tensor<T>& a) {
  return tape != nullptr && a.requires_grad();
}
template <typename T>
inline bool want_grad(const Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return tape != nullptr && (a.requires_grad() || b.requires_grad());
}

// Views a rank>=1 tensor as a 2D matrix with the last axis as columns.
template <typename T>
inline std::pair<int64_t, int64_t> as_2d(const Tensor<T>& x) {
  if (x.shape().empty())
    throw ShapeError("expected rank >= 1 tensor, got scalar");
  int64_t cols = x.shape().back();
  return {x.size() / cols, cols};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (detail::want_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape->record([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (detail::want_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape->record([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& a, T c) {
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  if (detail::want_grad(tape, a)) {
    out.set_requires_grad(true);
    tape->record([an = a.node(), on = out.node(), c] {
      if (on->grad.empty()) return;
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
    });
  }
  return out;
}

// x[..., h] + bias[h], broadcast over leading axes. The only broadcast form
// the encoder needs; everything else is rejected by shape checks.
template <typename T>
Tensor<T> add_bias(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& bias) {
  auto [rows, cols] = detail::as_2d(x);
  if (bias.shape().size() != 1 || bias.shape()[0] != cols)
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match last axis of " +
                     shape_str(x.shape()));
  Tensor<T> out(x.shape());
  const auto& xv = x.data();
  const auto& bv = bias.data();
  auto& ov = out.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) ov[size_t(r * cols + c)] = xv[size_t(r * cols + c)] + bv[size_t(c)];
  if (detail::want_grad(tape, x, bias)) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), bn = bias.node(), on = out.node(), rows, cols] {
      if (on->grad.empty()) return;
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < cols; ++c) bn->grad[size_t(c)] += on->grad[size_t(r * cols + c)];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(Tape<T>* tape, const Tensor<T>& x) {
  // Exact-erf form: x * Phi(x).
  Tensor<T> out(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  constexpr T inv_sqrt2 = T(0.70710678118654752440084436210485L);
  for (size_t i = 0; i < ov.size(); ++i) {
    T cdf = T(0.5) * (T(1) + std::erf(xv[i] * inv_sqrt2));
    ov[i] = xv[i] * cdf;
  }
  if (detail::want_grad(tape, x)) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), on = out.node()] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      constexpr T inv_sqrt2_ = T(0.70710678118654752440084436210485L);
      constexpr T inv_sqrt2pi = T(0.39894228040143267793994605993438L);
      for (size_t i = 0; i < on->grad.size(); ++i) {
        T x_ = xn->value[i];
        T cdf = T(0.5) * (T(1) + std::erf(x_ * inv_sqrt2_));
        T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x_ * x_);
        xn->grad[i] += on->grad[i] * (cdf + x_ * pdf);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> tanh_act(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::tanh(xv[i]);
  if (detail::want_grad(tape, x)) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), on = out.node()] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i)
        xn->grad[i] += on->grad[i] * (T(1) - on->value[i] * on->value[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(Tape<T>* tape, const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (detail::want_grad(tape, x)) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), on = out.node()] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products

// C = alpha * op(a) @ op(b) with optional transposes, 2D operands only.
template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false, T alpha = T(1)) {
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw ShapeError("matmul: expected 2D operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  int64_t m = trans_a ? a.shape()[1] : a.shape()[0];
  int64_t k = trans_a ? a.shape()[0] : a.shape()[1];
  int64_t k2 = trans_b ? b.shape()[1] : b.shape()[0];
  int64_t n = trans_b ? b.shape()[0] : b.shape()[1];
  if (k != k2)
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                     (trans_a ? "^T" : "") + " x " + shape_str(b.shape()) + (trans_b ? "^T" : ""));
  Tensor<T> out(Shape{m, n});
  {
    ECMap<T> A(a.data().data(), a.shape()[0], a.shape()[1]);
    ECMap<T> B(b.data().data(), b.shape()[0], b.shape()[1]);
    EMap<T> C(out.data().data(), m, n);
    if (!trans_a && !trans_b) C.noalias() = alpha * (A * B);
    else if (trans_a && !trans_b) C.noalias() = alpha * (A.transpose() * B);
    else if (!trans_a && trans_b) C.noalias() = alpha * (A * B.transpose());
    else C.noalias() = alpha * (A.transpose() * B.transpose());
  }
  if (detail::want_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape->record([an = a.node(), bn = b.node(), on = out.node(), trans_a, trans_b, alpha, m, n] {
      if (on->grad.empty()) return;
      ECMap<T> dC(on->grad.data(), m, n);
      ECMap<T> A(an->value.data(), an->shape[0], an->shape[1]);
      ECMap<T> B(bn->value.data(), bn->shape[0], bn->shape[1]);
      if (an->requires_grad) {
        an->ensure_grad();
        EMap<T> dA(an->grad.data(), an->shape[0], an->shape[1]);
        if (!trans_a && !trans_b) dA.noalias() += alpha * (dC * B.transpose());
        else if (trans_a && !trans_b) dA.noalias() += alpha * (B * dC.transpose());
        else if (!trans_a && trans_b) dA.noalias() += alpha * (dC * B);
        else dA.noalias() += alpha * (B.transpose() * dC.transpose());
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        EMap<T> dB(bn->grad.data(), bn->shape[0], bn->shape[1]);
        if (!trans_a && !trans_b) dB.noalias() += alpha * (A.transpose() * dC);
        else if (trans_a && !trans_b) dB.noalias() += alpha * (A * dC);
        else if (!trans_a && trans_b) dB.noalias() += alpha * (dC.transpose() * A);
        else dB.noalias() += alpha * (dC.transpose() * A.transpose());
      }
    });
  }
  return out;
}

// out[i,:] = sum_j a[i,j] * b[j,:], accumulated j-ascending so rows of `a`
// holding exact zeros contribute nothing, bitwise. Used for mixing value
// vectors with attention probabilities.
template <typename T>
Tensor<T> row_mix(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("row_mix: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int64_t m = a.shape()[0], n = a.shape()[1], d = b.shape()[1];
  Tensor<T> out(Shape{m, d});
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (int64_t i = 0; i < m; ++i) {
    T* orow = ov.data() + i * d;
    for (int64_t j = 0; j < n; ++j) {
      T w = av[size_t(i * n + j)];
      if (w == T(0)) continue;  // exact no-op either way; skip the memory traffic
      const T* brow = bv.data() + j * d;
      for (int64_t c = 0; c < d; ++c) orow[c] += w * brow[c];
    }
  }
  if (detail::want_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape->record([an = a.node(), bn = b.node(), on = out.node(), m, n, d] {
      if (on->grad.empty()) return;
      ECMap<T> dC(on->grad.data(), m, d);
      if (an->requires_grad) {
        an->ensure_grad();
        EMap<T> dA(an->grad.data(), m, n);
        ECMap<T> B(bn->value.data(), n, d);
        dA.noalias() += dC * B.transpose();
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        EMap<T> dB(bn->grad.data(), n, d);
        ECMap<T> A(an->value.data(), m, n);
        dB.noalias() += A.transpose() * dC;
      }
    });
  }
  return out;
}

// y[..., out] = x[..., in] @ w[in, out] (+ bias), leading axes flattened.
template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  auto [rows, in_dim] = detail::as_2d(x);
  if (w.shape().size() != 2 || w.shape()[0] != in_dim)
    throw ShapeError("linear: weight " + shape_str(w.shape()) + " does not match input " +
                     shape_str(x.shape()));
  const int64_t out_dim = w.shape()[1];
  if (bias.defined() && (bias.shape().size() != 1 || bias.shape()[0] != out_dim))
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match output width " +
                     std::to_string(out_dim));
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  Tensor<T> out(std::move(out_shape));
  {
    ECMap<T> X(x.data().data(), rows, in_dim);
    ECMap<T> W(w.data().data(), in_dim, out_dim);
    EMap<T> Y(out.data().data(), rows, out_dim);
    Y.noalias() = X * W;
    if (bias.defined()) {
      const auto& bv = bias.data();
      auto& yv = out.data();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < out_dim; ++c) yv[size_t(r * out_dim + c)] += bv[size_t(c)];
    }
  }
  bool needs = tape && (x.requires_grad() || w.requires_grad() ||
                        (bias.defined() && bias.requires_grad()));
  if (needs) {
    out.set_requires_grad(true);
    auto bias_node = bias.defined() ? bias.node() : nullptr;
    tape->record([xn = x.node(), wn = w.node(), bn = bias_node, on = out.node(), rows, in_dim,
                  out_dim] {
      if (on->grad.empty()) return;
      ECMap<T> dY(on->grad.data(), rows, out_dim);
      if (xn->requires_grad) {
        xn->ensure_grad();
        EMap<T> dX(xn->grad.data(), rows, in_dim);
        ECMap<T> W(wn->value.data(), in_dim, out_dim);
        dX.noalias() += dY * W.transpose();
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        EMap<T> dW(wn->grad.data(), in_dim, out_dim);
        ECMap<T> X(xn->value.data(), rows, in_dim);
        dW.noalias() += X.transpose() * dY;
      }
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < out_dim; ++c) bn->grad[size_t(c)] += on->grad[size_t(r * out_dim + c)];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gather / slice / assemble

// out[i, :] = table[ids[i], :]; backward scatter-adds into table rows.
template <typename T>
Tensor<T> gather_rows(Tape<T>* tape, const Tensor<T>& table, const std::vector<int64_t>& ids) {
  if (table.shape().size() != 2)
    throw ShapeError("gather_rows: table must be 2D, got " + shape_str(table.shape()));
  const int64_t num_rows = table.shape()[0], width = table.shape()[1];
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= num_rows)
      throw BoundsError("gather_rows: id " + std::to_string(ids[i]) + " at index " +
                        std::to_string(i) + " outside table of " + std::to_string(num_rows) +
                        " rows");
  Tensor<T> out(Shape{int64_t(ids.size()), width});
  const auto& tv = table.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.data() + ids[i] * width, width, ov.data() + int64_t(i) * width);
  if (detail::want_grad(tape, table)) {
    out.set_requires_grad(true);
    tape->record([tn = table.node(), on = out.node(), ids, width] {
      if (on->grad.empty()) return;
      tn->ensure_grad();
      for (size_t i = 0; i < ids.size(); ++i) {
        const T* src = on->grad.data() + int64_t(i) * width;
        T* dst = tn->grad.data() + ids[i] * width;
        for (int64_t c = 0; c < width; ++c) dst[c] += src[c];
      }
    });
  }
  return out;
}

// Copies the sub-block rows [r0,r1) x cols [c0,c1) of x viewed as 2D.
template <typename T>
Tensor<T> block_slice(Tape<T>* tape, const Tensor<T>& x, int64_t r0, int64_t r1, int64_t c0,
                      int64_t c1) {
  auto [rows, cols] = detail::as_2d(x);
  if (r0 < 0 || r1 > rows || c0 < 0 || c1 > cols || r0 >= r1 || c0 >= c1)
    throw BoundsError("block_slice: block [" + std::to_string(r0) + "," + std::to_string(r1) +
                      ")x[" + std::to_string(c0) + "," + std::to_string(c1) +
                      ") outside tensor viewed as [" + std::to_string(rows) + "," +
                      std::to_string(cols) + "]");
  Tensor<T> out(Shape{r1 - r0, c1 - c0});
  const auto& xv = x.data();
  auto& ov = out.data();
  const int64_t bw = c1 - c0;
  for (int64_t r = r0; r < r1; ++r)
    std::copy_n(xv.data() + r * cols + c0, bw, ov.data() + (r - r0) * bw);
  if (detail::want_grad(tape, x)) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), on = out.node(), r0, r1, c0, cols, bw] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (int64_t r = r0; r < r1; ++r) {
        const T* src = on->grad.data() + (r - r0) * bw;
        T* dst = xn->grad.data() + r * cols + c0;
        for (int64_t c = 0; c < bw; ++c) dst[c] += src[c];
      }
    });
  }
  return out;
}

// Inverse of per-(batch, head) block slicing: packs B*H pieces of shape
// [seq, head_dim] into [batch, seq, heads*head_dim]. Pieces ordered
// batch-major then head.
template <typename T>
Tensor<T> assemble_heads(Tape<T>* tape, const std::vector<Tensor<T>>& pieces, int64_t batch,
                         int64_t seq, int64_t heads, int64_t head_dim) {
  if (int64_t(pieces.size()) != batch * heads)
    throw ShapeError("assemble_heads: expected " + std::to_string(batch * heads) + " pieces, got " +
                     std::to_string(pieces.size()));
  const int64_t hidden = heads * head_dim;
  Tensor<T> out(Shape{batch, seq, hidden});
  bool needs = false;
  for (const auto& p : pieces) {
    if (p.shape() != Shape{seq, head_dim})
      throw ShapeError("assemble_heads: piece of shape " + shape_str(p.shape()) + ", expected [" +
                       std::to_string(seq) + "," + std::to_string(head_dim) + "]");
    needs = needs || p.requires_grad();
  }
  auto& ov = out.data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h) {
      const auto& pv = pieces[size_t(b * heads + h)].data();
      for (int64_t s = 0; s < seq; ++s)
        std::copy_n(pv.data() + s * head_dim, head_dim,
                    ov.data() + (b * seq + s) * hidden + h * head_dim);
    }
  if (tape && needs) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    nodes.reserve(pieces.size());
    for (const auto& p : pieces) nodes.push_back(p.node());
    tape->record([nodes, on = out.node(), batch, seq, heads, head_dim, hidden] {
      if (on->grad.empty()) return;
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t h = 0; h < heads; ++h) {
          auto& pn = nodes[size_t(b * heads + h)];
          if (!pn->requires_grad) continue;
          pn->ensure_grad();
          for (int64_t s = 0; s < seq; ++s) {
            const T* src = on->grad.data() + (b * seq + s) * hidden + h * head_dim;
            T* dst = pn->grad.data() + s * head_dim;
            for (int64_t c = 0; c < head_dim; ++c) dst[c] += src[c];
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and attention softmax

template <typename T>
Tensor<T> layer_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps) {
  auto [rows, h] = detail::as_2d(x);
  if (gain.shape() != Shape{h} || bias.shape() != Shape{h})
    throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                     shape_str(bias.shape()) + " do not match last axis of " + shape_str(x.shape()));
  Tensor<T> out(x.shape());
  std::vector<T> rstd(static_cast<size_t>(rows));
  std::vector<T> mean(static_cast<size_t>(rows));
  const auto& xv = x.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  auto& ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * h;
    T mu = T(0);
    for (int64_t c = 0; c < h; ++c) mu += xr[c];
    mu /= T(h);
    T var = T(0);
    for (int64_t c = 0; c < h; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= T(h);
    T rs = T(1) / std::sqrt(var + eps);
    mean[size_t(r)] = mu;
    rstd[size_t(r)] = rs;
    T* orow = ov.data() + r * h;
    for (int64_t c = 0; c < h; ++c) orow[c] = (xr[c] - mu) * rs * gv[size_t(c)] + bv[size_t(c)];
  }
  bool needs = tape && (x.requires_grad() || gain.requires_grad() || bias.requires_grad());
  if (needs) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node(),
                  mean = std::move(mean), rstd = std::move(rstd), rows, h] {
      if (on->grad.empty()) return;
      const auto& dy = on->grad;
      for (int64_t r = 0; r < rows; ++r) {
        const T* xr = xn->value.data() + r * h;
        const T* dyr = dy.data() + r * h;
        const T mu = mean[size_t(r)], rs = rstd[size_t(r)];
        if (gn->requires_grad || bn->requires_grad) {
          if (gn->requires_grad) gn->ensure_grad();
          if (bn->requires_grad) bn->ensure_grad();
          for (int64_t c = 0; c < h; ++c) {
            if (gn->requires_grad) gn->grad[size_t(c)] += dyr[c] * (xr[c] - mu) * rs;
            if (bn->requires_grad) bn->grad[size_t(c)] += dyr[c];
          }
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          // dx = rs * (g*dy - mean(g*dy) - xhat * mean(g*dy*xhat))
          T s1 = T(0), s2 = T(0);
          for (int64_t c = 0; c < h; ++c) {
            T gd = gn->value[size_t(c)] * dyr[c];
            T xhat = (xr[c] - mu) * rs;
            s1 += gd;
            s2 += gd * xhat;
          }
          s1 /= T(h);
          s2 /= T(h);
          T* dst = xn->grad.data() + r * h;
          for (int64_t c = 0; c < h; ++c) {
            T gd = gn->value[size_t(c)] * dyr[c];
            T xhat = (xr[c] - mu) * rs;
            dst[c] += rs * (gd - s1 - xhat * s2);
          }
        }
      }
    });
  }
  return out;
}

// Softmax over the last axis of (logits + mask). Mask entries at or below the
// forbidden threshold are handled structurally: they are excluded from the
// max/normalization and their probability is exactly 0 in the output. The
// mask itself is never differentiated. A row with every position forbidden is
// a contract violation.
template <typename T>
Tensor<T> softmax_masked(Tape<T>* tape, const Tensor<T>& logits, const Tensor<T>& mask) {
  if (logits.shape() != mask.shape())
    throw ShapeError("softmax_masked: logits " + shape_str(logits.shape()) + " vs mask " +
                     shape_str(mask.shape()));
  auto [rows, n] = detail::as_2d(logits);
  Tensor<T> out(logits.shape());
  const auto& zv = logits.data();
  const auto& mv = mask.data();
  auto& pv = out.data();
  const T thresh = T(kMaskForbiddenThreshold);
  for (int64_t r = 0; r < rows; ++r) {
    const T* z = zv.data() + r * n;
    const T* m = mv.data() + r * n;
    T* p = pv.data() + r * n;
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j < n; ++j)
      if (m[j] > thresh && z[j] + m[j] > mx) mx = z[j] + m[j];
    if (mx == -std::numeric_limits<T>::infinity())
      throw DegenerateRowError("softmax_masked: row " + std::to_string(r) +
                               " has every position forbidden");
    // exp of shifted logits (vectorized), forbidden positions hard-zeroed.
    // Normalization accumulates sequentially so zero entries are bitwise
    // no-ops and padded rows match their unpadded counterparts.
    for (int64_t j = 0; j < n; ++j) p[j] = z[j] + m[j] - mx;
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> pa(p, n);
    pa = pa.exp();
    T sum = T(0);
    for (int64_t j = 0; j < n; ++j) {
      if (m[j] <= thresh) p[j] = T(0);
      sum += p[j];
    }
    T inv = T(1) / sum;
    for (int64_t j = 0; j < n; ++j) p[j] *= inv;
  }
  if (detail::want_grad(tape, logits)) {
    out.set_requires_grad(true);
    tape->record([zn = logits.node(), on = out.node(), rows, n] {
      if (on->grad.empty()) return;
      zn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const T* p = on->value.data() + r * n;
        const T* dy = on->grad.data() + r * n;
        T dot = T(0);
        for (int64_t j = 0; j < n; ++j) dot += dy[j] * p[j];
        T* dst = zn->grad.data() + r * n;
        for (int64_t j = 0; j < n; ++j) dst[j] += p[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

// Mean cross-entropy over rows whose label != ignore_index. Returns a
// constant 0 when nothing is labeled.
template <typename T>
Tensor<T> cross_entropy_rows(Tape<T>* tape, const Tensor<T>& logits,
                             const std::vector<int32_t>& labels, int32_t ignore_index = -100) {
  if (logits.shape().size() != 2)
    throw ShapeError("cross_entropy_rows: logits must be 2D, got " + shape_str(logits.shape()));
  const int64_t rows = logits.shape()[0], vocab = logits.shape()[1];
  if (int64_t(labels.size()) != rows)
    throw ShapeError("cross_entropy_rows: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  int64_t count = 0;
  T loss = T(0);
  std::vector<T> log_z(static_cast<size_t>(rows));
  const auto& zv = logits.data();
  for (int64_t r = 0; r < rows; ++r) {
    if (labels[size_t(r)] == ignore_index) continue;
    if (labels[size_t(r)] < 0 || labels[size_t(r)] >= vocab)
      throw BoundsError("cross_entropy_rows: label " + std::to_string(labels[size_t(r)]) +
                        " at row " + std::to_string(r) + " outside vocab " + std::to_string(vocab));
    const T* z = zv.data() + r * vocab;
    T mx = z[0];
    for (int64_t c = 1; c < vocab; ++c) mx = std::max(mx, z[c]);
    T sum = T(0);
    for (int64_t c = 0; c < vocab; ++c) sum += std::exp(z[c] - mx);
    log_z[size_t(r)] = mx + std::log(sum);
    loss += log_z[size_t(r)] - z[labels[size_t(r)]];
    ++count;
  }
  if (count == 0) return Tensor<T>::scalar(T(0));
  Tensor<T> out = Tensor<T>::scalar(loss / T(count));
  if (detail::want_grad(tape, logits)) {
    out.set_requires_grad(true);
    tape->record([zn = logits.node(), on = out.node(), labels, log_z = std::move(log_z), rows,
                  vocab, count, ignore_index] {
      if (on->grad.empty()) return;
      zn->ensure_grad();
      const T g = on->grad[0] / T(count);
      for (int64_t r = 0; r < rows; ++r) {
        if (labels[size_t(r)] == ignore_index) continue;
        const T* z = zn->value.data() + r * vocab;
        T* dst = zn->grad.data() + r * vocab;
        for (int64_t c = 0; c < vocab; ++c) {
          T softmax = std::exp(z[c] - log_z[size_t(r)]);
          dst[c] += g * (softmax - (c == labels[size_t(r)] ? T(1) : T(0)));
        }
      }
    });
  }
  return out;
}

// Mean binary cross-entropy with logits over all entries; targets in {0,1}.
template <typename T>
Tensor<T> bce_with_logits(Tape<T>* tape, const Tensor<T>& logits, const std::vector<T>& targets) {
  if (int64_t(targets.size()) != logits.size())
    throw ShapeError("bce_with_logits: target count " + std::to_string(targets.size()) +
                     " != logit count " + std::to_string(logits.size()));
  const auto& zv = logits.data();
  T loss = T(0);
  for (size_t i = 0; i < zv.size(); ++i) {
    T z = zv[i], t = targets[i];
    // max(z,0) - z*t + log(1+exp(-|z|))
    loss += std::max(z, T(0)) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  const T inv_n = T(1) / T(zv.size());
  Tensor<T> out = Tensor<T>::scalar(loss * inv_n);
  if (detail::want_grad(tape, logits)) {
    out.set_requires_grad(true);
    tape->record([zn = logits.node(), on = out.node(), targets, inv_n] {
      if (on->grad.empty()) return;
      zn->ensure_grad();
      const T g = on->grad[0] * inv_n;
      for (size_t i = 0; i < zn->value.size(); ++i) {
        T z = zn->value[i];
        T sig = T(1) / (T(1) + std::exp(-z));
        zn->grad[i] += g * (sig - targets[i]);
      }
    });
  }
  return out;
}

// Mean squared error between a and b over rows flagged valid, normalized by
// (valid rows x row width). Either side may carry gradient.
template <typename T>
Tensor<T> masked_mse(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b,
                     const std::vector<uint8_t>& row_valid) {
  if (a.shape() != b.shape())
    throw ShapeError("masked_mse: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  auto [rows, h] = detail::as_2d(a);
  if (int64_t(row_valid.size()) != rows)
    throw ShapeError("masked_mse: validity vector length " + std::to_string(row_valid.size()) +
                     " != rows " + std::to_string(rows));
  int64_t count = 0;
  for (auto v : row_valid) count += v ? 1 : 0;
  if (count == 0) return Tensor<T>::scalar(T(0));
  const T norm = T(1) / (T(count) * T(h));
  T loss = T(0);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (int64_t r = 0; r < rows; ++r) {
    if (!row_valid[size_t(r)]) continue;
    const T* ar = av.data() + r * h;
    const T* br = bv.data() + r * h;
    for (int64_t c = 0; c < h; ++c) {
      T d = ar[c] - br[c];
      loss += d * d;
    }
  }
  Tensor<T> out = Tensor<T>::scalar(loss * norm);
  if (detail::want_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape->record([an = a.node(), bn = b.node(), on = out.node(), row_valid, norm, rows, h] {
      if (on->grad.empty()) return;
      const T g = on->grad[0] * norm * T(2);
      if (an->requires_grad) an->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        if (!row_valid[size_t(r)]) continue;
        for (int64_t c = 0; c < h; ++c) {
          T d = an->value[size_t(r * h + c)] - bn->value[size_t(r * h + c)];
          if (an->requires_grad) an->grad[size_t(r * h + c)] += g * d;
          if (bn->requires_grad) bn->grad[size_t(r * h + c)] -= g * d;
        }
      }
    });
  }
  return out;
}

}  // namespace lce
