#pragma once

#include <string>
#include <vector>

#include "lab/serialize.hpp"
#include "lab/tensor.hpp"

namespace lab {

// Owns the named trainable tensors of a model. Registration order is the
// optimizer order and the checkpoint order.
class ParamStore {
 public:
  Tensor add(const std::string& name, std::vector<int> shape, Rng& rng, real scale);
  Tensor add_zeros(const std::string& name, std::vector<int> shape);
  Tensor add_constant(const std::string& name, std::vector<int> shape, real value);

  std::vector<Tensor> all() const;
  const NamedParams& named() const { return params_; }
  void zero_grads();

 private:
  NamedParams params_;
};

// Uniform(-limit, limit) with limit = sqrt(1 / fan_in).
real fan_in_limit(int fan_in);

struct LinearLayer {
  Tensor w, b;
  void init(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng);
  Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
};

struct LayerNormLayer {
  Tensor gain, bias;
  void init(ParamStore& store, const std::string& prefix, int dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

struct Conv1dLayer {
  Tensor w, b;
  int dilation = 1;
  void init(ParamStore& store, const std::string& prefix, int k, int in, int out,
            int dilation, Rng& rng);
  Tensor operator()(const Tensor& x) const { return conv1d(x, w, b, dilation); }
};

struct Conv2dLayer {
  Tensor w, b;
  int stride = 1;
  void init(ParamStore& store, const std::string& prefix, int k, int in, int out,
            int stride, Rng& rng);
  Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, stride); }
};

// Pre-norm transformer block: x + attn(ln1(x)), then x + ffn(ln2(x)).
struct TransformerBlock {
  LayerNormLayer ln1, ln2;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  LinearLayer ffn1, ffn2;
  int heads = 1;
  void init(ParamStore& store, const std::string& prefix, int dim, int heads,
            int ffn_dim, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& mask = Tensor()) const;
};

}  // namespace lab
