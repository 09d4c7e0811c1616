#pragma once

// Dense tensors with reverse-mode autodiff on a dynamically recorded graph.
// Values are 64-bit doubles end to end; checkpoint files store f32 (see
// serialize.hpp). Non-finite data is rejected at tensor construction, the
// single entry point for external values, so ops can assume finite inputs.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace lab {

using real = double;

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, real value);
  // Validates finiteness; throws NumericError on NaN/inf.
  static Tensor from(std::vector<int> shape, std::vector<real> values,
                     bool requires_grad = false);
  static Tensor scalar(real value);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int i) const { return shape()[static_cast<size_t>(i)]; }
  int numel() const;
  bool requires_grad() const;

  std::vector<real>& data();
  const std::vector<real>& data() const;
  // Gradient buffer; sized and zeroed on first access.
  std::vector<real>& grad();
  real value() const;  // scalar tensors only

  void zero_grad();
  void set_requires_grad(bool v);

  NodePtr node() const { return node_; }

 private:
  NodePtr node_;
};

struct Node {
  std::vector<int> shape;
  std::vector<real> data;
  std::vector<real> grad;
  bool requires_grad = false;
  bool backward_ran = false;
  const char* op = "leaf";
  std::vector<Tensor> parents;
  std::function<void(Node&)> backward_fn;

  int numel() const { return static_cast<int>(data.size()); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

// Disables graph recording in scope; forwards under the guard are pure and
// safe to run concurrently against frozen parameters (flag is thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// Runs reverse-mode accumulation from a scalar loss. Gradients add into the
// .grad of every reachable tensor that requires grad. A second call on the
// same loss without rebuilding the graph throws.
void backward(const Tensor& loss);

// ---- forward ops ------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);           // [R,C]x[C,K]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // [...,C]
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real s);
// y broadcasts over the leading dims of x (shape(y) is a suffix of shape(x)).
Tensor add_bcast(const Tensor& x, const Tensor& y);
// Repeats x along a new leading dim of size n; backward sums over it.
Tensor expand_leading(const Tensor& x, int n);
Tensor gelu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor softmax(const Tensor& x);  // over last dim
// Same-length dilated 1-D convolution, symmetric zero padding, odd kernel.
// x: [B,T,Cin], w: [k,Cin,Cout], b: [Cout].
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int dilation);
// x: [B,H,W,Cin], w: [kh,kw,Cin,Cout], odd kernel, zero pad (k-1)/2.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);
Tensor avg_pool2d(const Tensor& x, int k);  // [B,H,W,C], H,W divisible by k
// Multi-head self-attention over x: [B,S,D]; mask: additive [S,S] or empty.
Tensor multihead_attention(const Tensor& x, const Tensor& wq, const Tensor& bq,
                           const Tensor& wk, const Tensor& bk, const Tensor& wv,
                           const Tensor& bv, const Tensor& wo, const Tensor& bo,
                           int heads, const Tensor& mask = Tensor());
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);
Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor mean_axis(const Tensor& x, int axis);
Tensor sum_all(const Tensor& x);
Tensor gather_rows(const Tensor& table, const std::vector<int>& idx);
Tensor stop_grad(const Tensor& x);

// Reductions (64-bit accumulators).
Tensor sum_sq_diff(const Tensor& pred, const Tensor& target);  // sum over all
Tensor mse(const Tensor& pred, const Tensor& target);          // mean over all
// Sum over positions of -log softmax(logits)[target]; logits [...,K].
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& targets);
// Cosine similarity over the last dim -> [...]; denominators guarded by 1e-8.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

// ---- numeric checking --------------------------------------------------

// Max over components of |analytic - numeric| / max(1,|analytic|,|numeric|),
// numeric from central differences at the given step.
real grad_check(const std::function<Tensor(const Tensor&)>& fn,
                const Tensor& point, real step);

// ---- deterministic RNG --------------------------------------------------

// Named streams keep unrelated draws independent: adding a consumer of one
// stream never shifts another stream's sequence.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}
  static Rng stream(uint64_t seed, const std::string& name);

  real uniform();  // [0,1)
  real uniform(real lo, real hi);
  real normal();
  int uniform_int(int n);  // [0,n)
  bool bernoulli(real p);

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  real spare_ = 0.0;
};

uint64_t fnv1a(const std::string& s);

}  // namespace lab
