#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lce/gradcheck.hpp"
#include "lce/ops.hpp"
#include "lce/rng.hpp"

namespace lce::testing {

inline Tensor<double> rand_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.next_normal();
  return t;
}

template <typename T>
inline Tensor<T> rand_tensor_t(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = T(scale * rng.next_normal());
  return t;
}

struct FdCase {
  std::string name;
  Tensor<double> x;
  std::function<Tensor<double>(Tensor<double>&, Tape<double>*)> f;
};

// One randomized scalar-valued probe per differentiable op family. Shapes
// stay small (<= 32 per axis); values are O(1) normals.
inline std::vector<FdCase> make_fd_cases(uint64_t seed) {
  Rng rng(seed);
  std::vector<FdCase> cases;
  auto dim = [&](int64_t lo, int64_t hi) { return lo + int64_t(rng.next_below(uint64_t(hi - lo + 1))); };

  {
    int64_t m = dim(1, 6), k = dim(1, 6), n = dim(1, 6);
    Tensor<double> b = rand_tensor(rng, {k, n});
    cases.push_back({"matmul_lhs", rand_tensor(rng, {m, k}),
                     [b](Tensor<double>& x, Tape<double>* tp) {
                       auto c = matmul(tp, x, b);
                       return sum_all(tp, c);
                     }});
    Tensor<double> a = rand_tensor(rng, {m, k});
    cases.push_back({"matmul_rhs_transposed", rand_tensor(rng, {n, k}),
                     [a](Tensor<double>& x, Tape<double>* tp) {
                       auto c = matmul(tp, a, x, false, true, 0.7);
                       return sum_all(tp, c);
                     }});
    Tensor<double> a2 = rand_tensor(rng, {k, m});
    cases.push_back({"matmul_lhs_transposed", rand_tensor(rng, {k, n}),
                     [a2](Tensor<double>& x, Tape<double>* tp) {
                       auto c = matmul(tp, a2, x, true, false);
                       auto sq = mul(tp, c, c);
                       return sum_all(tp, sq);
                     }});
  }
  {
    int64_t m = dim(1, 8), n = dim(1, 8), d = dim(1, 8);
    Tensor<double> b = rand_tensor(rng, {n, d});
    cases.push_back({"row_mix_weights", rand_tensor(rng, {m, n}),
                     [b](Tensor<double>& x, Tape<double>* tp) {
                       auto c = row_mix(tp, x, b);
                       auto sq = mul(tp, c, c);
                       return sum_all(tp, sq);
                     }});
    Tensor<double> a = rand_tensor(rng, {m, n});
    cases.push_back({"row_mix_values", rand_tensor(rng, {n, d}),
                     [a](Tensor<double>& x, Tape<double>* tp) {
                       auto c = row_mix(tp, a, x);
                       return sum_all(tp, mul(tp, c, c));
                     }});
  }
  {
    int64_t r = dim(1, 8), in = dim(1, 8), out = dim(1, 8);
    Tensor<double> w = rand_tensor(rng, {in, out});
    Tensor<double> bias = rand_tensor(rng, {out});
    cases.push_back({"linear_input", rand_tensor(rng, {r, in}),
                     [w, bias](Tensor<double>& x, Tape<double>* tp) {
                       auto y = linear(tp, x, w, bias);
                       return sum_all(tp, mul(tp, y, y));
                     }});
    Tensor<double> xin = rand_tensor(rng, {r, in});
    cases.push_back({"linear_weight", rand_tensor(rng, {in, out}),
                     [xin, bias](Tensor<double>& x, Tape<double>* tp) {
                       auto y = linear(tp, xin, x, bias);
                       return sum_all(tp, mul(tp, y, y));
                     }});
    cases.push_back({"linear_bias", rand_tensor(rng, {out}),
                     [xin, w](Tensor<double>& x, Tape<double>* tp) {
                       auto y = linear(tp, xin, w, x);
                       return sum_all(tp, mul(tp, y, y));
                     }});
  }
  {
    int64_t n = dim(2, 16);
    Tensor<double> b = rand_tensor(rng, {n});
    cases.push_back({"add", rand_tensor(rng, {n}),
                     [b](Tensor<double>& x, Tape<double>* tp) {
                       return sum_all(tp, mul(tp, add(tp, x, b), add(tp, x, b)));
                     }});
    cases.push_back({"mul_both_uses", rand_tensor(rng, {n}),
                     [](Tensor<double>& x, Tape<double>* tp) { return sum_all(tp, mul(tp, x, x)); }});
    cases.push_back({"scale", rand_tensor(rng, {n}),
                     [](Tensor<double>& x, Tape<double>* tp) {
                       auto y = scale(tp, x, 1.7);
                       return sum_all(tp, mul(tp, y, y));
                     }});
    cases.push_back({"gelu", rand_tensor(rng, {n}),
                     [](Tensor<double>& x, Tape<double>* tp) { return sum_all(tp, gelu(tp, x)); }});
    cases.push_back({"tanh", rand_tensor(rng, {n}),
                     [](Tensor<double>& x, Tape<double>* tp) {
                       return sum_all(tp, tanh_act(tp, x));
                     }});
  }
  {
    int64_t rows = dim(1, 6), h = dim(4, 12);
    Tensor<double> bias = rand_tensor(rng, {h});
    cases.push_back({"add_bias_x", rand_tensor(rng, {rows, h}),
                     [bias](Tensor<double>& x, Tape<double>* tp) {
                       auto y = add_bias(tp, x, bias);
                       return sum_all(tp, mul(tp, y, y));
                     }});
    Tensor<double> xin = rand_tensor(rng, {rows, h});
    cases.push_back({"add_bias_bias", rand_tensor(rng, {h}),
                     [xin](Tensor<double>& x, Tape<double>* tp) {
                       auto y = add_bias(tp, xin, x);
                       return sum_all(tp, mul(tp, y, y));
                     }});
    Tensor<double> gain = rand_tensor(rng, {h}, 0.5);
    Tensor<double> lnb = rand_tensor(rng, {h}, 0.5);
    cases.push_back({"layer_norm_x", rand_tensor(rng, {rows, h}),
                     [gain, lnb](Tensor<double>& x, Tape<double>* tp) {
                       auto y = layer_norm(tp, x, gain, lnb, 1e-5);
                       return sum_all(tp, mul(tp, y, y));
                     }});
    Tensor<double> xn = rand_tensor(rng, {rows, h});
    cases.push_back({"layer_norm_gain", rand_tensor(rng, {h}, 0.5),
                     [xn, lnb](Tensor<double>& x, Tape<double>* tp) {
                       auto y = layer_norm(tp, xn, x, lnb, 1e-5);
                       return sum_all(tp, mul(tp, y, y));
                     }});
    cases.push_back({"layer_norm_bias", rand_tensor(rng, {h}, 0.5),
                     [xn, gain](Tensor<double>& x, Tape<double>* tp) {
                       auto y = layer_norm(tp, xn, gain, x, 1e-5);
                       return sum_all(tp, mul(tp, y, y));
                     }});
  }
  {
    int64_t rows = dim(1, 4), n = dim(2, 10);
    Tensor<double> mask(Shape{rows, n}, 0.0);
    // forbid a couple of positions, keeping at least one allowed per row
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < n; ++j)
        if (j != 0 && rng.next_double() < 0.3) mask.data()[size_t(r * n + j)] = kMaskForbidden;
    Tensor<double> weights = rand_tensor(rng, {rows, n});
    cases.push_back({"softmax_masked", rand_tensor(rng, {rows, n}),
                     [mask, weights](Tensor<double>& x, Tape<double>* tp) {
                       auto p = softmax_masked(tp, x, mask);
                       return sum_all(tp, mul(tp, p, weights));
                     }});
  }
  {
    int64_t tab = dim(2, 10), h = dim(1, 8), n = dim(1, 12);
    std::vector<int64_t> ids(static_cast<size_t>(n));
    for (auto& id : ids) id = int64_t(rng.next_below(uint64_t(tab)));
    cases.push_back({"gather_rows", rand_tensor(rng, {tab, h}),
                     [ids](Tensor<double>& x, Tape<double>* tp) {
                       auto y = gather_rows(tp, x, ids);
                       return sum_all(tp, mul(tp, y, y));
                     }});
  }
  {
    int64_t rows = dim(2, 10), cols = dim(2, 10);
    int64_t r0 = dim(0, rows - 1), r1 = dim(r0 + 1, rows);
    int64_t c0 = dim(0, cols - 1), c1 = dim(c0 + 1, cols);
    cases.push_back({"block_slice", rand_tensor(rng, {rows, cols}),
                     [r0, r1, c0, c1](Tensor<double>& x, Tape<double>* tp) {
                       auto y = block_slice(tp, x, r0, r1, c0, c1);
                       return sum_all(tp, mul(tp, y, y));
                     }});
  }
  {
    int64_t seq = dim(1, 5), hd = dim(1, 4);
    Tensor<double> other = rand_tensor(rng, {seq, hd});
    cases.push_back({"assemble_heads", rand_tensor(rng, {seq, hd}),
                     [other, seq, hd](Tensor<double>& x, Tape<double>* tp) {
                       auto y = assemble_heads(tp, {x, other}, 1, seq, 2, hd);
                       return sum_all(tp, mul(tp, y, y));
                     }});
  }
  {
    int64_t rows = dim(2, 8), vocab = dim(3, 12);
    std::vector<int32_t> labels(static_cast<size_t>(rows));
    for (size_t i = 0; i < labels.size(); ++i)
      labels[i] = (i % 3 == 0) ? -100 : int32_t(rng.next_below(uint64_t(vocab)));
    labels[1] = int32_t(rng.next_below(uint64_t(vocab)));  // at least one labeled row
    cases.push_back({"cross_entropy_rows", rand_tensor(rng, {rows, vocab}),
                     [labels](Tensor<double>& x, Tape<double>* tp) {
                       return cross_entropy_rows(tp, x, labels);
                     }});
  }
  {
    int64_t rows = dim(1, 6), k = dim(1, 6);
    std::vector<double> targets(static_cast<size_t>(rows * k));
    for (auto& t : targets) t = rng.next_double() < 0.5 ? 0.0 : 1.0;
    cases.push_back({"bce_with_logits", rand_tensor(rng, {rows, k}),
                     [targets](Tensor<double>& x, Tape<double>* tp) {
                       return bce_with_logits(tp, x, targets);
                     }});
  }
  {
    int64_t rows = dim(2, 8), h = dim(1, 8);
    Tensor<double> ref = rand_tensor(rng, {rows, h});
    std::vector<uint8_t> valid(static_cast<size_t>(rows), uint8_t(1));
    valid[0] = 0;
    cases.push_back({"masked_mse", rand_tensor(rng, {rows, h}),
                     [ref, valid](Tensor<double>& x, Tape<double>* tp) {
                       return masked_mse(tp, x, ref, valid);
                     }});
  }
  return cases;
}

}  // namespace lce::testing
