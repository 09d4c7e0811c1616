#pragma once

// Finite-difference coverage for every differentiable op, shared between the
// unit tests and the acceptance suite. Each check perturbs one op input while
// holding the others fixed; outputs are scalarized with fixed random weights
// so every output element influences the loss.

#include <functional>
#include <string>
#include <vector>

#include "lab/tensor.hpp"

namespace lab::testing {

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, real lo = -1.0,
                            real hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (real& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor scalarize(const Tensor& y, const Tensor& w) {
  return sum_all(mul(y, w));
}

struct OpCheck {
  std::string name;
  real max_err;
};

// Runs grad_check (central differences, given step) for all ops; returns the
// per-check worst relative errors.
inline std::vector<OpCheck> run_op_gradient_suite(uint64_t seed, real step = 1e-4) {
  std::vector<OpCheck> out;
  Rng rng = Rng::stream(seed, "grad_suite");
  auto check = [&](const std::string& name, const Tensor& point,
                   const std::function<Tensor(const Tensor&)>& fn) {
    out.push_back({name, grad_check(fn, point, step)});
  };

  // matmul, both operands
  {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
    Tensor w = random_tensor({3, 5}, rng);
    check("matmul/a", a, [&](const Tensor& x) { return scalarize(matmul(x, b), w); });
    check("matmul/b", b, [&](const Tensor& x) { return scalarize(matmul(a, x), w); });
  }
  // linear: input, weight, bias
  {
    Tensor x0 = random_tensor({2, 3, 4}, rng);
    Tensor wgt = random_tensor({4, 5}, rng), bias = random_tensor({5}, rng);
    Tensor w = random_tensor({2, 3, 5}, rng);
    check("linear/x", x0, [&](const Tensor& x) { return scalarize(linear(x, wgt, bias), w); });
    check("linear/w", wgt, [&](const Tensor& x) { return scalarize(linear(x0, x, bias), w); });
    check("linear/b", bias, [&](const Tensor& x) { return scalarize(linear(x0, wgt, x), w); });
  }
  // elementwise
  {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({3, 4}, rng);
    check("add", a, [&](const Tensor& x) { return scalarize(add(x, b), w); });
    check("sub", b, [&](const Tensor& x) { return scalarize(sub(a, x), w); });
    check("mul", a, [&](const Tensor& x) { return scalarize(mul(x, b), w); });
    check("scale", a, [&](const Tensor& x) { return scalarize(scale(x, 0.37), w); });
  }
  {
    Tensor x0 = random_tensor({2, 3, 4}, rng), y0 = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({2, 3, 4}, rng);
    check("add_bcast/x", x0, [&](const Tensor& x) { return scalarize(add_bcast(x, y0), w); });
    check("add_bcast/y", y0, [&](const Tensor& x) { return scalarize(add_bcast(x0, x), w); });
    check("expand_leading", y0,
          [&](const Tensor& x) { return scalarize(expand_leading(x, 2), w); });
  }
  {
    Tensor a = random_tensor({2, 5}, rng, -2.0, 2.0);
    Tensor w = random_tensor({2, 5}, rng);
    check("gelu", a, [&](const Tensor& x) { return scalarize(gelu(x), w); });
    check("softmax", a, [&](const Tensor& x) { return scalarize(softmax(x), w); });
  }
  // layer norm
  {
    Tensor x0 = random_tensor({3, 6}, rng);
    Tensor gain = random_tensor({6}, rng, 0.5, 1.5), bias = random_tensor({6}, rng);
    Tensor w = random_tensor({3, 6}, rng);
    check("layer_norm/x", x0,
          [&](const Tensor& x) { return scalarize(layer_norm(x, gain, bias), w); });
    check("layer_norm/gain", gain,
          [&](const Tensor& x) { return scalarize(layer_norm(x0, x, bias), w); });
    check("layer_norm/bias", bias,
          [&](const Tensor& x) { return scalarize(layer_norm(x0, gain, x), w); });
  }
  // conv1d across the spec'd dilation set
  for (int dil : {1, 2, 4}) {
    Tensor x0 = random_tensor({2, 9, 3}, rng);
    Tensor kw = random_tensor({3, 3, 4}, rng), kb = random_tensor({4}, rng);
    Tensor w = random_tensor({2, 9, 4}, rng);
    const std::string tag = "conv1d(d=" + std::to_string(dil) + ")";
    check(tag + "/x", x0,
          [&](const Tensor& x) { return scalarize(conv1d(x, kw, kb, dil), w); });
    check(tag + "/w", kw,
          [&](const Tensor& x) { return scalarize(conv1d(x0, x, kb, dil), w); });
    check(tag + "/b", kb,
          [&](const Tensor& x) { return scalarize(conv1d(x0, kw, x, dil), w); });
  }
  // conv2d, stride 1 and 2
  for (int stride : {1, 2}) {
    Tensor x0 = random_tensor({1, 6, 6, 2}, rng);
    Tensor kw = random_tensor({3, 3, 2, 3}, rng), kb = random_tensor({3}, rng);
    const int o = stride == 1 ? 6 : 3;
    Tensor w = random_tensor({1, o, o, 3}, rng);
    const std::string tag = "conv2d(s=" + std::to_string(stride) + ")";
    check(tag + "/x", x0,
          [&](const Tensor& x) { return scalarize(conv2d(x, kw, kb, stride), w); });
    check(tag + "/w", kw,
          [&](const Tensor& x) { return scalarize(conv2d(x0, x, kb, stride), w); });
  }
  {
    Tensor x0 = random_tensor({1, 4, 4, 3}, rng);
    Tensor w = random_tensor({1, 2, 2, 3}, rng);
    check("avg_pool2d", x0, [&](const Tensor& x) { return scalarize(avg_pool2d(x, 2), w); });
  }
  // attention: plain and masked
  for (int masked : {0, 1}) {
    const int D = 6, S = 4;
    Tensor x0 = random_tensor({2, S, D}, rng);
    Tensor wq = random_tensor({D, D}, rng), bq = random_tensor({D}, rng);
    Tensor wk = random_tensor({D, D}, rng), bk = random_tensor({D}, rng);
    Tensor wv = random_tensor({D, D}, rng), bv = random_tensor({D}, rng);
    Tensor wo = random_tensor({D, D}, rng), bo = random_tensor({D}, rng);
    Tensor mask;
    if (masked) {
      mask = Tensor::zeros({S, S});
      for (int i = 0; i < S; ++i)
        for (int j = i + 1; j < S; ++j) mask.data()[static_cast<size_t>(i) * S + j] = -1e30;
    }
    Tensor w = random_tensor({2, S, D}, rng);
    auto run = [&](const Tensor& xx, const Tensor& q, const Tensor& k, const Tensor& v,
                   const Tensor& o2) {
      return scalarize(multihead_attention(xx, q, bq, k, bk, v, bv, o2, bo, 2, mask), w);
    };
    const std::string tag = masked ? "attention(masked)" : "attention";
    check(tag + "/x", x0, [&](const Tensor& x) { return run(x, wq, wk, wv, wo); });
    check(tag + "/wq", wq, [&](const Tensor& x) { return run(x0, x, wk, wv, wo); });
    check(tag + "/wk", wk, [&](const Tensor& x) { return run(x0, wq, x, wv, wo); });
    check(tag + "/wv", wv, [&](const Tensor& x) { return run(x0, wq, wk, x, wo); });
    check(tag + "/wo", wo, [&](const Tensor& x) { return run(x0, wq, wk, wv, x); });
  }
  // shape ops
  {
    Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 2, 4}, rng);
    Tensor w = random_tensor({2, 5, 4}, rng);
    check("concat/a", a,
          [&](const Tensor& x) { return scalarize(concat({x, b}, 1), w); });
    check("concat/b", b,
          [&](const Tensor& x) { return scalarize(concat({a, x}, 1), w); });
    Tensor ws = random_tensor({2, 2, 4}, rng);
    check("slice", a, [&](const Tensor& x) { return scalarize(slice(x, 1, 1, 2), ws); });
    Tensor wr = random_tensor({6, 4}, rng);
    check("reshape", a, [&](const Tensor& x) { return scalarize(reshape(x, {6, 4}), wr); });
    Tensor wm = random_tensor({2, 4}, rng);
    check("mean_axis", a, [&](const Tensor& x) { return scalarize(mean_axis(x, 1), wm); });
    check("sum_all", a, [&](const Tensor& x) { return sum_all(x); });
  }
  {
    Tensor table = random_tensor({5, 3}, rng);
    Tensor w = random_tensor({4, 3}, rng);
    const std::vector<int> idx = {1, 4, 1, 0};
    check("gather_rows", table,
          [&](const Tensor& x) { return scalarize(gather_rows(x, idx), w); });
  }
  // losses
  {
    Tensor p = random_tensor({3, 4}, rng), t = random_tensor({3, 4}, rng);
    check("sum_sq_diff/pred", p, [&](const Tensor& x) { return sum_sq_diff(x, t); });
    check("sum_sq_diff/target", t, [&](const Tensor& x) { return sum_sq_diff(p, x); });
    check("mse", p, [&](const Tensor& x) { return mse(x, t); });
  }
  {
    Tensor logits = random_tensor({3, 5}, rng, -2.0, 2.0);
    const std::vector<int> targets = {0, 3, 2};
    check("cross_entropy", logits,
          [&](const Tensor& x) { return cross_entropy_logits(x, targets); });
  }
  {
    Tensor a = random_tensor({3, 5}, rng), b = random_tensor({3, 5}, rng);
    Tensor w = random_tensor({3}, rng);
    check("cosine/a", a,
          [&](const Tensor& x) { return scalarize(cosine_similarity(x, b), w); });
    check("cosine/b", b,
          [&](const Tensor& x) { return scalarize(cosine_similarity(a, x), w); });
  }
  return out;
}

}  // namespace lab::testing
