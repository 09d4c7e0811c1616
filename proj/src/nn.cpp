#include "lab/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace lab {

Tensor ParamStore::add(const std::string& name, std::vector<int> shape, Rng& rng,
                       real scale) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (real& v : t.data()) v = rng.uniform(-scale, scale);
  params_.emplace_back(name, t);
  return t;
}

Tensor ParamStore::add_zeros(const std::string& name, std::vector<int> shape) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  params_.emplace_back(name, t);
  return t;
}

Tensor ParamStore::add_constant(const std::string& name, std::vector<int> shape,
                                real value) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  std::fill(t.data().begin(), t.data().end(), value);
  params_.emplace_back(name, t);
  return t;
}

std::vector<Tensor> ParamStore::all() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.push_back(t);
  return out;
}

void ParamStore::zero_grads() {
  for (auto& [name, t] : params_) t.zero_grad();
}

real fan_in_limit(int fan_in) { return std::sqrt(1.0 / fan_in); }

void LinearLayer::init(ParamStore& store, const std::string& prefix, int in,
                       int out, Rng& rng) {
  w = store.add(prefix + ".w", {in, out}, rng, fan_in_limit(in));
  b = store.add_zeros(prefix + ".b", {out});
}

void LayerNormLayer::init(ParamStore& store, const std::string& prefix, int dim) {
  gain = store.add_constant(prefix + ".gain", {dim}, 1.0);
  bias = store.add_zeros(prefix + ".bias", {dim});
}

void Conv1dLayer::init(ParamStore& store, const std::string& prefix, int k, int in,
                       int out, int dil, Rng& rng) {
  dilation = dil;
  w = store.add(prefix + ".w", {k, in, out}, rng, fan_in_limit(k * in));
  b = store.add_zeros(prefix + ".b", {out});
}

void Conv2dLayer::init(ParamStore& store, const std::string& prefix, int k, int in,
                       int out, int str, Rng& rng) {
  stride = str;
  w = store.add(prefix + ".w", {k, k, in, out}, rng, fan_in_limit(k * k * in));
  b = store.add_zeros(prefix + ".b", {out});
}

void TransformerBlock::init(ParamStore& store, const std::string& prefix, int dim,
                            int n_heads, int ffn_dim, Rng& rng) {
  heads = n_heads;
  if (dim % n_heads != 0)
    throw std::runtime_error("transformer: hidden dim not divisible by heads");
  ln1.init(store, prefix + ".ln1", dim);
  const real lim = fan_in_limit(dim);
  wq = store.add(prefix + ".wq", {dim, dim}, rng, lim);
  bq = store.add_zeros(prefix + ".bq", {dim});
  wk = store.add(prefix + ".wk", {dim, dim}, rng, lim);
  bk = store.add_zeros(prefix + ".bk", {dim});
  wv = store.add(prefix + ".wv", {dim, dim}, rng, lim);
  bv = store.add_zeros(prefix + ".bv", {dim});
  wo = store.add(prefix + ".wo", {dim, dim}, rng, lim);
  bo = store.add_zeros(prefix + ".bo", {dim});
  ln2.init(store, prefix + ".ln2", dim);
  ffn1.init(store, prefix + ".ffn1", dim, ffn_dim, rng);
  ffn2.init(store, prefix + ".ffn2", ffn_dim, dim, rng);
}

Tensor TransformerBlock::operator()(const Tensor& x, const Tensor& mask) const {
  Tensor h = add(x, multihead_attention(ln1(x), wq, bq, wk, bk, wv, bv, wo, bo,
                                        heads, mask));
  return add(h, ffn2(gelu(ffn1(ln2(h)))));
}

}  // namespace lab
