#include "lab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace lab {

namespace {

thread_local bool g_grad_enabled = true;

int shape_numel(const std::vector<int>& shape) {
  int n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

[[noreturn]] void fail(const char* op, const std::string& msg) {
  throw std::runtime_error(std::string(op) + ": " + msg);
}

void require(bool cond, const char* op, const std::string& msg) {
  if (!cond) fail(op, msg);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Tensor make_op(std::vector<int> shape, std::vector<real> data, const char* op,
               std::vector<Tensor> parents, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  bool rg = false;
  if (g_grad_enabled)
    for (const Tensor& p : parents)
      if (p.defined() && p.requires_grad()) rg = true;
  if (rg) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(bw);
  }
  return Tensor(n);
}

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

// ---- Tensor ------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::full(std::vector<int> shape, real value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<real> values,
                    bool requires_grad) {
  if (static_cast<int>(values.size()) != shape_numel(shape))
    fail("tensor", "data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
  for (real v : values)
    if (!std::isfinite(v)) throw NumericError("tensor: non-finite input value");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::scalar(real value) { return from({1}, {value}); }

const std::vector<int>& Tensor::shape() const {
  require(defined(), "tensor", "use of undefined tensor");
  return node_->shape;
}

int Tensor::numel() const { return node_->numel(); }
bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

std::vector<real>& Tensor::data() { return node_->data; }
const std::vector<real>& Tensor::data() const { return node_->data; }

std::vector<real>& Tensor::grad() {
  node_->ensure_grad();
  return node_->grad;
}

real Tensor::value() const {
  require(numel() == 1, "tensor", "value() on non-scalar " + shape_str(shape()));
  return node_->data[0];
}

void Tensor::zero_grad() {
  if (node_) node_->grad.assign(node_->data.size(), 0.0);
}

void Tensor::set_requires_grad(bool v) { node_->requires_grad = v; }

// ---- engine ------------------------------------------------------------

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
  require(loss.defined() && loss.numel() == 1, "backward", "loss must be scalar");
  Node* root = loss.node().get();
  if (root->backward_ran)
    fail("backward", "already ran on this graph; rebuild the graph first");
  if (!root->requires_grad) {
    root->backward_ran = true;
    return;
  }
  // Iterative post-order DFS over grad-requiring ancestry.
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    bool descended = false;
    while (next < node->parents.size()) {
      Node* p = node->parents[next++].node().get();
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
        descended = true;
        break;
      }
    }
    if (!descended && next >= stack.back().first->parents.size()) {
      topo.push_back(stack.back().first);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  root->backward_ran = true;
}

// ---- elementwise -------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  const size_t n = a.data().size();
  std::vector<real> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op(a.shape(), std::move(out), "add", {a, b}, [](Node& o) {
    for (int s = 0; s < 2; ++s) {
      Tensor p = o.parents[s];
      if (!p.requires_grad()) continue;
      auto& g = p.grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  const size_t n = a.data().size();
  std::vector<real> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op(a.shape(), std::move(out), "sub", {a, b}, [](Node& o) {
    if (o.parents[0].requires_grad()) {
      auto& g = o.parents[0].grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (o.parents[1].requires_grad()) {
      auto& g = o.parents[1].grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  const size_t n = a.data().size();
  std::vector<real> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op(a.shape(), std::move(out), "mul", {a, b}, [](Node& o) {
    const auto& ad = o.parents[0].data();
    const auto& bd = o.parents[1].data();
    if (o.parents[0].requires_grad()) {
      auto& g = o.parents[0].grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bd[i];
    }
    if (o.parents[1].requires_grad()) {
      auto& g = o.parents[1].grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ad[i];
    }
  });
}

Tensor scale(const Tensor& a, real s) {
  require(std::isfinite(s), "scale", "non-finite scale factor");
  const size_t n = a.data().size();
  std::vector<real> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = a.data()[i] * s;
  return make_op(a.shape(), std::move(out), "scale", {a}, [s](Node& o) {
    if (!o.parents[0].requires_grad()) return;
    auto& g = o.parents[0].grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s;
  });
}

Tensor add_bcast(const Tensor& x, const Tensor& y) {
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  bool suffix = ys.size() <= xs.size() &&
                std::equal(ys.rbegin(), ys.rend(), xs.rbegin());
  if (!suffix)
    fail("add_bcast", "shape " + shape_str(ys) + " is not a suffix of " + shape_str(xs));
  const size_t ny = y.data().size();
  const size_t n = x.data().size();
  std::vector<real> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = x.data()[i] + y.data()[i % ny];
  return make_op(xs, std::move(out), "add_bcast", {x, y}, [ny](Node& o) {
    if (o.parents[0].requires_grad()) {
      auto& g = o.parents[0].grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (o.parents[1].requires_grad()) {
      auto& g = o.parents[1].grad();
      for (size_t i = 0; i < o.grad.size(); ++i) g[i % ny] += o.grad[i];
    }
  });
}

Tensor expand_leading(const Tensor& x, int n) {
  require(n >= 1, "expand_leading", "n must be positive");
  const size_t nx = x.data().size();
  std::vector<real> out(static_cast<size_t>(n) * nx);
  for (int i = 0; i < n; ++i)
    std::copy(x.data().begin(), x.data().end(), out.begin() + static_cast<size_t>(i) * nx);
  std::vector<int> shape;
  shape.push_back(n);
  for (int d : x.shape()) shape.push_back(d);
  return make_op(std::move(shape), std::move(out), "expand_leading", {x},
                 [n, nx](Node& o) {
                   if (!o.parents[0].requires_grad()) return;
                   auto& g = o.parents[0].grad();
                   for (int i = 0; i < n; ++i)
                     for (size_t j = 0; j < nx; ++j)
                       g[j] += o.grad[static_cast<size_t>(i) * nx + j];
                 });
}

Tensor gelu(const Tensor& x) {
  const size_t n = x.data().size();
  std::vector<real> out(n);
  for (size_t i = 0; i < n; ++i) {
    real v = x.data()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  }
  return make_op(x.shape(), std::move(out), "gelu", {x}, [](Node& o) {
    if (!o.parents[0].requires_grad()) return;
    const auto& xd = o.parents[0].data();
    auto& g = o.parents[0].grad();
    constexpr real kInvSqrt2Pi = 0.3989422804014327;
    for (size_t i = 0; i < g.size(); ++i) {
      real v = xd[i];
      real cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
      real pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      g[i] += o.grad[i] * (cdf + v * pdf);
    }
  });
}

// ---- matmul / linear ----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul",
          "expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    fail("matmul", "shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int R = a.dim(0), C = a.dim(1), K = b.dim(1);
  std::vector<real> out(static_cast<size_t>(R) * K, 0.0);
  const real* ad = a.data().data();
  const real* bd = b.data().data();
  real* od = out.data();
#pragma omp parallel for schedule(static) if (static_cast<long>(R) * C * K > 262144)
  for (int r = 0; r < R; ++r) {
    real* orow = od + static_cast<size_t>(r) * K;
    const real* arow = ad + static_cast<size_t>(r) * C;
    for (int c = 0; c < C; ++c) {
      const real av = arow[c];
      const real* brow = bd + static_cast<size_t>(c) * K;
      for (int k = 0; k < K; ++k) orow[k] += av * brow[k];
    }
  }
  return make_op({R, K}, std::move(out), "matmul", {a, b}, [R, C, K](Node& o) {
    const real* gy = o.grad.data();
    const real* ad = o.parents[0].data().data();
    const real* bd = o.parents[1].data().data();
    if (o.parents[0].requires_grad()) {
      real* ga = o.parents[0].grad().data();
#pragma omp parallel for schedule(static) if (static_cast<long>(R) * C * K > 262144)
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) {
          const real* brow = bd + static_cast<size_t>(c) * K;
          const real* grow = gy + static_cast<size_t>(r) * K;
          real acc = 0.0;
          for (int k = 0; k < K; ++k) acc += grow[k] * brow[k];
          ga[static_cast<size_t>(r) * C + c] += acc;
        }
    }
    if (o.parents[1].requires_grad()) {
      real* gb = o.parents[1].grad().data();
#pragma omp parallel for schedule(static) if (static_cast<long>(R) * C * K > 262144)
      for (int c = 0; c < C; ++c)
        for (int r = 0; r < R; ++r) {
          const real av = ad[static_cast<size_t>(r) * C + c];
          const real* grow = gy + static_cast<size_t>(r) * K;
          real* gbrow = gb + static_cast<size_t>(c) * K;
          for (int k = 0; k < K; ++k) gbrow[k] += av * grow[k];
        }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(w.rank() == 2 && b.rank() == 1, "linear", "weight must be rank 2, bias rank 1");
  const int C = w.dim(0), K = w.dim(1);
  require(x.rank() >= 1 && x.shape().back() == C, "linear",
          "input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  require(b.dim(0) == K, "linear", "bias " + shape_str(b.shape()) + " vs out dim " + std::to_string(K));
  const int R = x.numel() / C;
  std::vector<real> out(static_cast<size_t>(R) * K);
  const real* xd = x.data().data();
  const real* wd = w.data().data();
  const real* bd = b.data().data();
  real* od = out.data();
#pragma omp parallel for schedule(static) if (static_cast<long>(R) * C * K > 262144)
  for (int r = 0; r < R; ++r) {
    real* orow = od + static_cast<size_t>(r) * K;
    std::memcpy(orow, bd, sizeof(real) * static_cast<size_t>(K));
    const real* xrow = xd + static_cast<size_t>(r) * C;
    for (int c = 0; c < C; ++c) {
      const real xv = xrow[c];
      const real* wrow = wd + static_cast<size_t>(c) * K;
      for (int k = 0; k < K; ++k) orow[k] += xv * wrow[k];
    }
  }
  std::vector<int> oshape = x.shape();
  oshape.back() = K;
  return make_op(std::move(oshape), std::move(out), "linear", {x, w, b},
                 [R, C, K](Node& o) {
    const real* gy = o.grad.data();
    const real* xd = o.parents[0].data().data();
    const real* wd = o.parents[1].data().data();
    if (o.parents[0].requires_grad()) {
      real* gx = o.parents[0].grad().data();
#pragma omp parallel for schedule(static) if (static_cast<long>(R) * C * K > 262144)
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) {
          const real* wrow = wd + static_cast<size_t>(c) * K;
          const real* grow = gy + static_cast<size_t>(r) * K;
          real acc = 0.0;
          for (int k = 0; k < K; ++k) acc += grow[k] * wrow[k];
          gx[static_cast<size_t>(r) * C + c] += acc;
        }
    }
    if (o.parents[1].requires_grad()) {
      real* gw = o.parents[1].grad().data();
#pragma omp parallel for schedule(static) if (static_cast<long>(R) * C * K > 262144)
      for (int c = 0; c < C; ++c)
        for (int r = 0; r < R; ++r) {
          const real xv = xd[static_cast<size_t>(r) * C + c];
          const real* grow = gy + static_cast<size_t>(r) * K;
          real* gwrow = gw + static_cast<size_t>(c) * K;
          for (int k = 0; k < K; ++k) gwrow[k] += xv * grow[k];
        }
    }
    if (o.parents[2].requires_grad()) {
      real* gb = o.parents[2].grad().data();
      for (int r = 0; r < R; ++r) {
        const real* grow = gy + static_cast<size_t>(r) * K;
        for (int k = 0; k < K; ++k) gb[k] += grow[k];
      }
    }
  });
}

// ---- normalization / softmax ---------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  require(x.rank() >= 1, "layer_norm", "scalar input");
  const int D = x.shape().back();
  require(gain.rank() == 1 && gain.dim(0) == D && bias.rank() == 1 && bias.dim(0) == D,
          "layer_norm", "gain/bias " + shape_str(gain.shape()) + " vs last dim " + std::to_string(D));
  const int R = x.numel() / D;
  constexpr real kEps = 1e-5;
  std::vector<real> out(x.data().size());
  auto xhat = std::make_shared<std::vector<real>>(x.data().size());
  auto rstd = std::make_shared<std::vector<real>>(static_cast<size_t>(R));
  const real* xd = x.data().data();
  const real* gd = gain.data().data();
  const real* bd = bias.data().data();
  for (int r = 0; r < R; ++r) {
    const real* row = xd + static_cast<size_t>(r) * D;
    real mean = 0.0, var = 0.0;
    for (int i = 0; i < D; ++i) mean += row[i];
    mean /= D;
    for (int i = 0; i < D; ++i) var += (row[i] - mean) * (row[i] - mean);
    var /= D;
    const real rs = 1.0 / std::sqrt(var + kEps);
    (*rstd)[static_cast<size_t>(r)] = rs;
    for (int i = 0; i < D; ++i) {
      const size_t at = static_cast<size_t>(r) * D + i;
      (*xhat)[at] = (row[i] - mean) * rs;
      out[at] = gd[i] * (*xhat)[at] + bd[i];
    }
  }
  return make_op(x.shape(), std::move(out), "layer_norm", {x, gain, bias},
                 [R, D, xhat, rstd](Node& o) {
    const real* gy = o.grad.data();
    const real* gd = o.parents[1].data().data();
    if (o.parents[0].requires_grad()) {
      real* gx = o.parents[0].grad().data();
      for (int r = 0; r < R; ++r) {
        const real* xh = xhat->data() + static_cast<size_t>(r) * D;
        const real* grow = gy + static_cast<size_t>(r) * D;
        real sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (int i = 0; i < D; ++i) {
          const real dxh = grow[i] * gd[i];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh[i];
        }
        const real rs = (*rstd)[static_cast<size_t>(r)];
        for (int i = 0; i < D; ++i) {
          const real dxh = grow[i] * gd[i];
          gx[static_cast<size_t>(r) * D + i] +=
              rs * (dxh - sum_dxh / D - xh[i] * sum_dxh_xh / D);
        }
      }
    }
    if (o.parents[1].requires_grad()) {
      real* gg = o.parents[1].grad().data();
      for (int r = 0; r < R; ++r)
        for (int i = 0; i < D; ++i)
          gg[i] += gy[static_cast<size_t>(r) * D + i] * (*xhat)[static_cast<size_t>(r) * D + i];
    }
    if (o.parents[2].requires_grad()) {
      real* gb = o.parents[2].grad().data();
      for (int r = 0; r < R; ++r)
        for (int i = 0; i < D; ++i) gb[i] += gy[static_cast<size_t>(r) * D + i];
    }
  });
}

namespace {
void softmax_rows(const real* in, real* out, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    const real* x = in + static_cast<size_t>(r) * cols;
    real* y = out + static_cast<size_t>(r) * cols;
    real mx = x[0];
    for (int i = 1; i < cols; ++i) mx = std::max(mx, x[i]);
    real sum = 0.0;
    for (int i = 0; i < cols; ++i) {
      y[i] = std::exp(x[i] - mx);
      sum += y[i];
    }
    const real inv = 1.0 / sum;
    for (int i = 0; i < cols; ++i) y[i] *= inv;
  }
}
}  // namespace

Tensor softmax(const Tensor& x) {
  require(x.rank() >= 1, "softmax", "scalar input");
  const int D = x.shape().back();
  const int R = x.numel() / D;
  std::vector<real> out(x.data().size());
  softmax_rows(x.data().data(), out.data(), R, D);
  return make_op(x.shape(), std::move(out), "softmax", {x}, [R, D](Node& o) {
    if (!o.parents[0].requires_grad()) return;
    real* gx = o.parents[0].grad().data();
    const real* y = o.data.data();
    const real* gy = o.grad.data();
    for (int r = 0; r < R; ++r) {
      const size_t off = static_cast<size_t>(r) * D;
      real dot = 0.0;
      for (int i = 0; i < D; ++i) dot += gy[off + i] * y[off + i];
      for (int i = 0; i < D; ++i) gx[off + i] += y[off + i] * (gy[off + i] - dot);
    }
  });
}

// ---- convolutions ---------------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int dilation) {
  require(x.rank() == 3, "conv1d", "input must be [B,T,Cin], got " + shape_str(x.shape()));
  require(w.rank() == 3, "conv1d", "kernel must be [k,Cin,Cout], got " + shape_str(w.shape()));
  const int B = x.dim(0), T = x.dim(1), Cin = x.dim(2);
  const int k = w.dim(0), Cout = w.dim(2);
  require(k % 2 == 1, "conv1d", "kernel size must be odd");
  require(w.dim(1) == Cin, "conv1d",
          "kernel " + shape_str(w.shape()) + " vs input channels " + std::to_string(Cin));
  require(b.rank() == 1 && b.dim(0) == Cout, "conv1d", "bias shape " + shape_str(b.shape()));
  require(dilation >= 1, "conv1d", "dilation must be >= 1");
  const int half = k / 2;
  std::vector<real> out(static_cast<size_t>(B) * T * Cout);
  const real* xd = x.data().data();
  const real* wd = w.data().data();
  const real* bd = b.data().data();
#pragma omp parallel for collapse(2) schedule(static) if (static_cast<long>(B) * T * Cin * Cout * k > 131072)
  for (int bi = 0; bi < B; ++bi)
    for (int t = 0; t < T; ++t) {
      real* orow = out.data() + (static_cast<size_t>(bi) * T + t) * Cout;
      std::memcpy(orow, bd, sizeof(real) * static_cast<size_t>(Cout));
      for (int j = 0; j < k; ++j) {
        const int src = t + (j - half) * dilation;
        if (src < 0 || src >= T) continue;
        const real* xrow = xd + (static_cast<size_t>(bi) * T + src) * Cin;
        const real* wj = wd + static_cast<size_t>(j) * Cin * Cout;
        for (int ci = 0; ci < Cin; ++ci) {
          const real xv = xrow[ci];
          const real* wrow = wj + static_cast<size_t>(ci) * Cout;
          for (int co = 0; co < Cout; ++co) orow[co] += xv * wrow[co];
        }
      }
    }
  return make_op({B, T, Cout}, std::move(out), "conv1d", {x, w, b},
                 [B, T, Cin, Cout, k, half, dilation](Node& o) {
    const real* gy = o.grad.data();
    const real* xd = o.parents[0].data().data();
    const real* wd = o.parents[1].data().data();
    if (o.parents[0].requires_grad()) {
      real* gx = o.parents[0].grad().data();
#pragma omp parallel for collapse(2) schedule(static) if (static_cast<long>(B) * T * Cin * Cout * k > 131072)
      for (int bi = 0; bi < B; ++bi)
        for (int t = 0; t < T; ++t) {
          real* gxrow = gx + (static_cast<size_t>(bi) * T + t) * Cin;
          for (int j = 0; j < k; ++j) {
            const int dst = t - (j - half) * dilation;
            if (dst < 0 || dst >= T) continue;
            const real* grow = gy + (static_cast<size_t>(bi) * T + dst) * Cout;
            const real* wj = wd + static_cast<size_t>(j) * Cin * Cout;
            for (int ci = 0; ci < Cin; ++ci) {
              const real* wrow = wj + static_cast<size_t>(ci) * Cout;
              real acc = 0.0;
              for (int co = 0; co < Cout; ++co) acc += grow[co] * wrow[co];
              gxrow[ci] += acc;
            }
          }
        }
    }
    if (o.parents[1].requires_grad()) {
      real* gw = o.parents[1].grad().data();
      for (int j = 0; j < k; ++j)
        for (int bi = 0; bi < B; ++bi)
          for (int t = 0; t < T; ++t) {
            const int src = t + (j - half) * dilation;
            if (src < 0 || src >= T) continue;
            const real* xrow = xd + (static_cast<size_t>(bi) * T + src) * Cin;
            const real* grow = gy + (static_cast<size_t>(bi) * T + t) * Cout;
            real* gwj = gw + static_cast<size_t>(j) * Cin * Cout;
            for (int ci = 0; ci < Cin; ++ci) {
              real* gwrow = gwj + static_cast<size_t>(ci) * Cout;
              const real xv = xrow[ci];
              for (int co = 0; co < Cout; ++co) gwrow[co] += xv * grow[co];
            }
          }
    }
    if (o.parents[2].requires_grad()) {
      real* gb = o.parents[2].grad().data();
      for (size_t i = 0; i < o.grad.size(); ++i) gb[i % Cout] += gy[i];
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  require(x.rank() == 4, "conv2d", "input must be [B,H,W,Cin], got " + shape_str(x.shape()));
  require(w.rank() == 4, "conv2d", "kernel must be [kh,kw,Cin,Cout], got " + shape_str(w.shape()));
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
  const int kh = w.dim(0), kw = w.dim(1), Cout = w.dim(3);
  require(kh % 2 == 1 && kw % 2 == 1, "conv2d", "kernel size must be odd");
  require(w.dim(2) == Cin, "conv2d",
          "kernel " + shape_str(w.shape()) + " vs input channels " + std::to_string(Cin));
  require(b.rank() == 1 && b.dim(0) == Cout, "conv2d", "bias shape " + shape_str(b.shape()));
  require(stride >= 1, "conv2d", "stride must be >= 1");
  const int ph = kh / 2, pw = kw / 2;
  const int OH = (H + 2 * ph - kh) / stride + 1;
  const int OW = (W + 2 * pw - kw) / stride + 1;
  std::vector<real> out(static_cast<size_t>(B) * OH * OW * Cout);
  const real* xd = x.data().data();
  const real* wd = w.data().data();
  const real* bd = b.data().data();
#pragma omp parallel for collapse(2) schedule(static)
  for (int bi = 0; bi < B; ++bi)
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        real* orow = out.data() +
                     ((static_cast<size_t>(bi) * OH + oh) * OW + ow) * Cout;
        std::memcpy(orow, bd, sizeof(real) * static_cast<size_t>(Cout));
        for (int i = 0; i < kh; ++i) {
          const int ih = oh * stride + i - ph;
          if (ih < 0 || ih >= H) continue;
          for (int j = 0; j < kw; ++j) {
            const int iw = ow * stride + j - pw;
            if (iw < 0 || iw >= W) continue;
            const real* xrow = xd + ((static_cast<size_t>(bi) * H + ih) * W + iw) * Cin;
            const real* wij = wd + (static_cast<size_t>(i) * kw + j) * Cin * Cout;
            for (int ci = 0; ci < Cin; ++ci) {
              const real xv = xrow[ci];
              const real* wrow = wij + static_cast<size_t>(ci) * Cout;
              for (int co = 0; co < Cout; ++co) orow[co] += xv * wrow[co];
            }
          }
        }
      }
  return make_op({B, OH, OW, Cout}, std::move(out), "conv2d", {x, w, b},
                 [B, H, W, Cin, Cout, kh, kw, ph, pw, OH, OW, stride](Node& o) {
    const real* gy = o.grad.data();
    const real* xd = o.parents[0].data().data();
    const real* wd = o.parents[1].data().data();
    if (o.parents[0].requires_grad()) {
      real* gx = o.parents[0].grad().data();
      for (int bi = 0; bi < B; ++bi)
        for (int oh = 0; oh < OH; ++oh)
          for (int ow = 0; ow < OW; ++ow) {
            const real* grow = gy + ((static_cast<size_t>(bi) * OH + oh) * OW + ow) * Cout;
            for (int i = 0; i < kh; ++i) {
              const int ih = oh * stride + i - ph;
              if (ih < 0 || ih >= H) continue;
              for (int j = 0; j < kw; ++j) {
                const int iw = ow * stride + j - pw;
                if (iw < 0 || iw >= W) continue;
                real* gxrow = gx + ((static_cast<size_t>(bi) * H + ih) * W + iw) * Cin;
                const real* wij = wd + (static_cast<size_t>(i) * kw + j) * Cin * Cout;
                for (int ci = 0; ci < Cin; ++ci) {
                  const real* wrow = wij + static_cast<size_t>(ci) * Cout;
                  real acc = 0.0;
                  for (int co = 0; co < Cout; ++co) acc += grow[co] * wrow[co];
                  gxrow[ci] += acc;
                }
              }
            }
          }
    }
    if (o.parents[1].requires_grad()) {
      real* gw = o.parents[1].grad().data();
      for (int bi = 0; bi < B; ++bi)
        for (int oh = 0; oh < OH; ++oh)
          for (int ow = 0; ow < OW; ++ow) {
            const real* grow = gy + ((static_cast<size_t>(bi) * OH + oh) * OW + ow) * Cout;
            for (int i = 0; i < kh; ++i) {
              const int ih = oh * stride + i - ph;
              if (ih < 0 || ih >= H) continue;
              for (int j = 0; j < kw; ++j) {
                const int iw = ow * stride + j - pw;
                if (iw < 0 || iw >= W) continue;
                const real* xrow = xd + ((static_cast<size_t>(bi) * H + ih) * W + iw) * Cin;
                real* gwij = gw + (static_cast<size_t>(i) * kw + j) * Cin * Cout;
                for (int ci = 0; ci < Cin; ++ci) {
                  real* gwrow = gwij + static_cast<size_t>(ci) * Cout;
                  const real xv = xrow[ci];
                  for (int co = 0; co < Cout; ++co) gwrow[co] += xv * grow[co];
                }
              }
            }
          }
    }
    if (o.parents[2].requires_grad()) {
      real* gb = o.parents[2].grad().data();
      for (size_t i = 0; i < o.grad.size(); ++i) gb[i % Cout] += gy[i];
    }
  });
}

Tensor avg_pool2d(const Tensor& x, int k) {
  require(x.rank() == 4, "avg_pool2d", "input must be [B,H,W,C], got " + shape_str(x.shape()));
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  require(k >= 1 && H % k == 0 && W % k == 0, "avg_pool2d",
          "spatial dims " + shape_str(x.shape()) + " not divisible by k=" + std::to_string(k));
  const int OH = H / k, OW = W / k;
  const real inv = 1.0 / (k * k);
  std::vector<real> out(static_cast<size_t>(B) * OH * OW * C, 0.0);
  const real* xd = x.data().data();
  for (int bi = 0; bi < B; ++bi)
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        real* orow = out.data() + ((static_cast<size_t>(bi) * OH + oh) * OW + ow) * C;
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j) {
            const real* xrow =
                xd + ((static_cast<size_t>(bi) * H + oh * k + i) * W + ow * k + j) * C;
            for (int c = 0; c < C; ++c) orow[c] += xrow[c] * inv;
          }
      }
  return make_op({B, OH, OW, C}, std::move(out), "avg_pool2d", {x},
                 [B, H, W, C, OH, OW, k, inv](Node& o) {
    if (!o.parents[0].requires_grad()) return;
    real* gx = o.parents[0].grad().data();
    const real* gy = o.grad.data();
    for (int bi = 0; bi < B; ++bi)
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          const real* grow = gy + ((static_cast<size_t>(bi) * OH + oh) * OW + ow) * C;
          for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) {
              real* gxrow =
                  gx + ((static_cast<size_t>(bi) * H + oh * k + i) * W + ow * k + j) * C;
              for (int c = 0; c < C; ++c) gxrow[c] += grow[c] * inv;
            }
        }
  });
}

// ---- attention ------------------------------------------------------------

Tensor multihead_attention(const Tensor& x, const Tensor& wq, const Tensor& bq,
                           const Tensor& wk, const Tensor& bk, const Tensor& wv,
                           const Tensor& bv, const Tensor& wo, const Tensor& bo,
                           int heads, const Tensor& mask) {
  require(x.rank() == 3, "attention", "input must be [B,S,D], got " + shape_str(x.shape()));
  const int B = x.dim(0), S = x.dim(1), D = x.dim(2);
  require(D % heads == 0, "attention",
          "hidden dim " + std::to_string(D) + " not divisible by heads " + std::to_string(heads));
  for (const Tensor* w : {&wq, &wk, &wv, &wo})
    require(w->rank() == 2 && w->dim(0) == D && w->dim(1) == D, "attention",
            "projection weight must be " + shape_str({D, D}) + ", got " + shape_str(w->shape()));
  if (mask.defined())
    require(mask.rank() == 2 && mask.dim(0) == S && mask.dim(1) == S, "attention",
            "mask " + shape_str(mask.shape()) + " vs sequence length " + std::to_string(S));
  const int dh = D / heads;
  const real scl = 1.0 / std::sqrt(static_cast<real>(dh));
  const size_t n = static_cast<size_t>(B) * S * D;

  auto project = [&](const Tensor& w, const Tensor& b) {
    std::vector<real> out(n);
    const real* xd = x.data().data();
    const real* wd = w.data().data();
    const real* bd = b.data().data();
    const int R = B * S;
#pragma omp parallel for schedule(static)
    for (int r = 0; r < R; ++r) {
      real* orow = out.data() + static_cast<size_t>(r) * D;
      std::memcpy(orow, bd, sizeof(real) * static_cast<size_t>(D));
      const real* xrow = xd + static_cast<size_t>(r) * D;
      for (int c = 0; c < D; ++c) {
        const real xv = xrow[c];
        const real* wrow = wd + static_cast<size_t>(c) * D;
        for (int k2 = 0; k2 < D; ++k2) orow[k2] += xv * wrow[k2];
      }
    }
    return out;
  };

  auto q = std::make_shared<std::vector<real>>(project(wq, bq));
  auto kk = std::make_shared<std::vector<real>>(project(wk, bk));
  auto v = std::make_shared<std::vector<real>>(project(wv, bv));
  auto attn = std::make_shared<std::vector<real>>(
      static_cast<size_t>(B) * heads * S * S);
  auto ctx = std::make_shared<std::vector<real>>(n, 0.0);
  const real* maskd = mask.defined() ? mask.data().data() : nullptr;

#pragma omp parallel for collapse(2) schedule(static)
  for (int bi = 0; bi < B; ++bi)
    for (int h = 0; h < heads; ++h) {
      std::vector<real> scores(static_cast<size_t>(S) * S);
      const size_t xoff = static_cast<size_t>(bi) * S * D + static_cast<size_t>(h) * dh;
      for (int i = 0; i < S; ++i)
        for (int j = 0; j < S; ++j) {
          const real* qi = q->data() + xoff + static_cast<size_t>(i) * D;
          const real* kj = kk->data() + xoff + static_cast<size_t>(j) * D;
          real acc = 0.0;
          for (int d = 0; d < dh; ++d) acc += qi[d] * kj[d];
          scores[static_cast<size_t>(i) * S + j] =
              acc * scl + (maskd ? maskd[static_cast<size_t>(i) * S + j] : 0.0);
        }
      real* p = attn->data() + (static_cast<size_t>(bi) * heads + h) * S * S;
      softmax_rows(scores.data(), p, S, S);
      for (int i = 0; i < S; ++i) {
        real* ci = ctx->data() + xoff + static_cast<size_t>(i) * D;
        for (int j = 0; j < S; ++j) {
          const real pij = p[static_cast<size_t>(i) * S + j];
          const real* vj = v->data() + xoff + static_cast<size_t>(j) * D;
          for (int d = 0; d < dh; ++d) ci[d] += pij * vj[d];
        }
      }
    }

  // output projection
  std::vector<real> out(n);
  {
    const real* wd = wo.data().data();
    const real* bd = bo.data().data();
    const int R = B * S;
#pragma omp parallel for schedule(static)
    for (int r = 0; r < R; ++r) {
      real* orow = out.data() + static_cast<size_t>(r) * D;
      std::memcpy(orow, bd, sizeof(real) * static_cast<size_t>(D));
      const real* crow = ctx->data() + static_cast<size_t>(r) * D;
      for (int c = 0; c < D; ++c) {
        const real cv = crow[c];
        const real* wrow = wd + static_cast<size_t>(c) * D;
        for (int k2 = 0; k2 < D; ++k2) orow[k2] += cv * wrow[k2];
      }
    }
  }

  return make_op({B, S, D}, std::move(out), "attention",
                 {x, wq, bq, wk, bk, wv, bv, wo, bo},
                 [B, S, D, heads, dh, scl, q, kk, v, attn, ctx](Node& o) {
    const int R = B * S;
    const real* gy = o.grad.data();
    const real* wod = o.parents[7].data().data();

    // through output projection
    std::vector<real> gctx(static_cast<size_t>(R) * D, 0.0);
#pragma omp parallel for schedule(static)
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < D; ++c) {
        const real* wrow = wod + static_cast<size_t>(c) * D;
        const real* grow = gy + static_cast<size_t>(r) * D;
        real acc = 0.0;
        for (int k2 = 0; k2 < D; ++k2) acc += grow[k2] * wrow[k2];
        gctx[static_cast<size_t>(r) * D + c] = acc;
      }
    if (o.parents[7].requires_grad()) {
      real* gw = o.parents[7].grad().data();
      for (int c = 0; c < D; ++c)
        for (int r = 0; r < R; ++r) {
          const real cv = (*ctx)[static_cast<size_t>(r) * D + c];
          const real* grow = gy + static_cast<size_t>(r) * D;
          real* gwrow = gw + static_cast<size_t>(c) * D;
          for (int k2 = 0; k2 < D; ++k2) gwrow[k2] += cv * grow[k2];
        }
    }
    if (o.parents[8].requires_grad()) {
      real* gb = o.parents[8].grad().data();
      for (int r = 0; r < R; ++r)
        for (int k2 = 0; k2 < D; ++k2) gb[k2] += gy[static_cast<size_t>(r) * D + k2];
    }

    // through attention
    std::vector<real> gq(q->size(), 0.0), gk(kk->size(), 0.0), gv(v->size(), 0.0);
#pragma omp parallel for collapse(2) schedule(static)
    for (int bi = 0; bi < B; ++bi)
      for (int h = 0; h < heads; ++h) {
        const size_t xoff = static_cast<size_t>(bi) * S * D + static_cast<size_t>(h) * dh;
        const real* p = attn->data() + (static_cast<size_t>(bi) * heads + h) * S * S;
        std::vector<real> gp(static_cast<size_t>(S) * S);
        for (int i = 0; i < S; ++i)
          for (int j = 0; j < S; ++j) {
            const real* gi = gctx.data() + xoff + static_cast<size_t>(i) * D;
            const real* vj = v->data() + xoff + static_cast<size_t>(j) * D;
            real acc = 0.0;
            for (int d = 0; d < dh; ++d) acc += gi[d] * vj[d];
            gp[static_cast<size_t>(i) * S + j] = acc;
          }
        for (int j = 0; j < S; ++j) {
          real* gvj = gv.data() + xoff + static_cast<size_t>(j) * D;
          for (int i = 0; i < S; ++i) {
            const real pij = p[static_cast<size_t>(i) * S + j];
            const real* gi = gctx.data() + xoff + static_cast<size_t>(i) * D;
            for (int d = 0; d < dh; ++d) gvj[d] += pij * gi[d];
          }
        }
        for (int i = 0; i < S; ++i) {
          const size_t ro = static_cast<size_t>(i) * S;
          real dot = 0.0;
          for (int j = 0; j < S; ++j) dot += gp[ro + j] * p[ro + j];
          for (int j = 0; j < S; ++j) {
            const real gs = p[ro + j] * (gp[ro + j] - dot) * scl;
            const real* kj = kk->data() + xoff + static_cast<size_t>(j) * D;
            const real* qi = q->data() + xoff + static_cast<size_t>(i) * D;
            real* gqi = gq.data() + xoff + static_cast<size_t>(i) * D;
            real* gkj = gk.data() + xoff + static_cast<size_t>(j) * D;
            for (int d = 0; d < dh; ++d) {
              gqi[d] += gs * kj[d];
              gkj[d] += gs * qi[d];
            }
          }
        }
      }

    // through input projections
    const real* xd = o.parents[0].data().data();
    struct Proj { int wi, bi2; const std::vector<real>* g; };
    const Proj projs[3] = {{1, 2, &gq}, {3, 4, &gk}, {5, 6, &gv}};
    for (const Proj& pr : projs) {
      const real* gpd = pr.g->data();
      if (o.parents[static_cast<size_t>(pr.wi)].requires_grad()) {
        real* gw = o.parents[static_cast<size_t>(pr.wi)].grad().data();
        for (int c = 0; c < D; ++c)
          for (int r = 0; r < R; ++r) {
            const real xv = xd[static_cast<size_t>(r) * D + c];
            const real* grow = gpd + static_cast<size_t>(r) * D;
            real* gwrow = gw + static_cast<size_t>(c) * D;
            for (int k2 = 0; k2 < D; ++k2) gwrow[k2] += xv * grow[k2];
          }
      }
      if (o.parents[static_cast<size_t>(pr.bi2)].requires_grad()) {
        real* gb = o.parents[static_cast<size_t>(pr.bi2)].grad().data();
        for (int r = 0; r < R; ++r)
          for (int k2 = 0; k2 < D; ++k2) gb[k2] += gpd[static_cast<size_t>(r) * D + k2];
      }
      if (o.parents[0].requires_grad()) {
        real* gx = o.parents[0].grad().data();
        const real* wd = o.parents[static_cast<size_t>(pr.wi)].data().data();
#pragma omp parallel for schedule(static)
        for (int r = 0; r < R; ++r)
          for (int c = 0; c < D; ++c) {
            const real* wrow = wd + static_cast<size_t>(c) * D;
            const real* grow = gpd + static_cast<size_t>(r) * D;
            real acc = 0.0;
            for (int k2 = 0; k2 < D; ++k2) acc += grow[k2] * wrow[k2];
            gx[static_cast<size_t>(r) * D + c] += acc;
          }
      }
    }
  });
}

// ---- shape ops -------------------------------------------------------------

namespace {
struct AxisSplit {
  int outer, axis, inner;
};
AxisSplit split_at(const std::vector<int>& shape, int axis) {
  AxisSplit s{1, shape[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i)
    s.inner *= shape[i];
  return s;
}
int norm_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, op, "axis out of range");
  return axis;
}
}  // namespace

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  require(!parts.empty(), "concat", "no inputs");
  const int rank = parts[0].rank();
  axis = norm_axis(axis, rank, "concat");
  std::vector<int> oshape = parts[0].shape();
  int total = 0;
  for (const Tensor& p : parts) {
    require(p.rank() == rank, "concat", "rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != axis && p.dim(i) != oshape[static_cast<size_t>(i)])
        fail("concat", "shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(oshape));
    total += p.dim(axis);
  }
  oshape[static_cast<size_t>(axis)] = total;
  const AxisSplit os = split_at(oshape, axis);
  std::vector<real> out(static_cast<size_t>(os.outer) * os.axis * os.inner);
  std::vector<int> offsets(parts.size());
  int off = 0;
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    offsets[pi] = off;
    const int pa = parts[pi].dim(axis);
    const real* pd = parts[pi].data().data();
    for (int o2 = 0; o2 < os.outer; ++o2)
      std::copy(pd + static_cast<size_t>(o2) * pa * os.inner,
                pd + static_cast<size_t>(o2 + 1) * pa * os.inner,
                out.begin() + (static_cast<size_t>(o2) * os.axis + off) * os.inner);
    off += pa;
  }
  return make_op(std::move(oshape), std::move(out), "concat", parts,
                 [os, offsets, axis](Node& o) {
    for (size_t pi = 0; pi < o.parents.size(); ++pi) {
      Tensor p = o.parents[pi];
      if (!p.requires_grad()) continue;
      const int pa = p.dim(axis);
      real* gp = p.grad().data();
      for (int o2 = 0; o2 < os.outer; ++o2) {
        const real* src = o.grad.data() +
                          (static_cast<size_t>(o2) * os.axis + offsets[pi]) * os.inner;
        real* dst = gp + static_cast<size_t>(o2) * pa * os.inner;
        for (int i = 0; i < pa * os.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  axis = norm_axis(axis, x.rank(), "slice");
  const auto& xs = x.shape();
  require(start >= 0 && len >= 1 && start + len <= xs[static_cast<size_t>(axis)],
          "slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                  ") out of bounds for " + shape_str(xs));
  const AxisSplit s = split_at(xs, axis);
  std::vector<int> oshape = xs;
  oshape[static_cast<size_t>(axis)] = len;
  std::vector<real> out(static_cast<size_t>(s.outer) * len * s.inner);
  const real* xd = x.data().data();
  for (int o2 = 0; o2 < s.outer; ++o2)
    std::copy(xd + (static_cast<size_t>(o2) * s.axis + start) * s.inner,
              xd + (static_cast<size_t>(o2) * s.axis + start + len) * s.inner,
              out.begin() + static_cast<size_t>(o2) * len * s.inner);
  return make_op(std::move(oshape), std::move(out), "slice", {x},
                 [s, start, len](Node& o) {
    if (!o.parents[0].requires_grad()) return;
    real* gx = o.parents[0].grad().data();
    for (int o2 = 0; o2 < s.outer; ++o2) {
      const real* src = o.grad.data() + static_cast<size_t>(o2) * len * s.inner;
      real* dst = gx + (static_cast<size_t>(o2) * s.axis + start) * s.inner;
      for (int i = 0; i < len * s.inner; ++i) dst[i] += src[i];
    }
  });
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  require(shape_numel(shape) == x.numel(), "reshape",
          "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  std::vector<real> out = x.data();
  return make_op(std::move(shape), std::move(out), "reshape", {x}, [](Node& o) {
    if (!o.parents[0].requires_grad()) return;
    auto& g = o.parents[0].grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor mean_axis(const Tensor& x, int axis) {
  axis = norm_axis(axis, x.rank(), "mean_axis");
  const AxisSplit s = split_at(x.shape(), axis);
  std::vector<int> oshape;
  for (int i = 0; i < x.rank(); ++i)
    if (i != axis) oshape.push_back(x.dim(i));
  if (oshape.empty()) oshape.push_back(1);
  std::vector<real> out(static_cast<size_t>(s.outer) * s.inner, 0.0);
  const real* xd = x.data().data();
  const real inv = 1.0 / s.axis;
  for (int o2 = 0; o2 < s.outer; ++o2)
    for (int a = 0; a < s.axis; ++a)
      for (int i = 0; i < s.inner; ++i)
        out[static_cast<size_t>(o2) * s.inner + i] +=
            xd[(static_cast<size_t>(o2) * s.axis + a) * s.inner + i] * inv;
  return make_op(std::move(oshape), std::move(out), "mean_axis", {x}, [s, inv](Node& o) {
    if (!o.parents[0].requires_grad()) return;
    real* gx = o.parents[0].grad().data();
    for (int o2 = 0; o2 < s.outer; ++o2)
      for (int a = 0; a < s.axis; ++a)
        for (int i = 0; i < s.inner; ++i)
          gx[(static_cast<size_t>(o2) * s.axis + a) * s.inner + i] +=
              o.grad[static_cast<size_t>(o2) * s.inner + i] * inv;
  });
}

Tensor sum_all(const Tensor& x) {
  real acc = 0.0;
  for (real v : x.data()) acc += v;
  return make_op({1}, {acc}, "sum_all", {x}, [](Node& o) {
    if (!o.parents[0].requires_grad()) return;
    auto& g = o.parents[0].grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0];
  });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& idx) {
  require(table.rank() == 2, "gather_rows", "table must be rank 2, got " + shape_str(table.shape()));
  const int V = table.dim(0), D = table.dim(1);
  for (int i : idx)
    require(i >= 0 && i < V, "gather_rows",
            "index " + std::to_string(i) + " out of range [0," + std::to_string(V) + ")");
  const int n = static_cast<int>(idx.size());
  std::vector<real> out(static_cast<size_t>(n) * D);
  const real* td = table.data().data();
  for (int i = 0; i < n; ++i)
    std::copy(td + static_cast<size_t>(idx[static_cast<size_t>(i)]) * D,
              td + static_cast<size_t>(idx[static_cast<size_t>(i)] + 1) * D,
              out.begin() + static_cast<size_t>(i) * D);
  return make_op({n, D}, std::move(out), "gather_rows", {table}, [idx, D](Node& o) {
    if (!o.parents[0].requires_grad()) return;
    real* gt = o.parents[0].grad().data();
    for (size_t i = 0; i < idx.size(); ++i) {
      const real* src = o.grad.data() + i * static_cast<size_t>(D);
      real* dst = gt + static_cast<size_t>(idx[i]) * D;
      for (int d = 0; d < D; ++d) dst[d] += src[d];
    }
  });
}

Tensor stop_grad(const Tensor& x) {
  auto n = std::make_shared<Node>();
  n->shape = x.shape();
  n->data = x.data();
  n->op = "stop_grad";
  return Tensor(n);
}

// ---- losses ---------------------------------------------------------------

Tensor sum_sq_diff(const Tensor& pred, const Tensor& target) {
  require_same_shape("sum_sq_diff", pred, target);
  real acc = 0.0;
  const auto& p = pred.data();
  const auto& t = target.data();
  for (size_t i = 0; i < p.size(); ++i) {
    const real d = p[i] - t[i];
    acc += d * d;
  }
  return make_op({1}, {acc}, "sum_sq_diff", {pred, target}, [](Node& o) {
    const auto& p = o.parents[0].data();
    const auto& t = o.parents[1].data();
    const real g = o.grad[0];
    if (o.parents[0].requires_grad()) {
      auto& gp = o.parents[0].grad();
      for (size_t i = 0; i < gp.size(); ++i) gp[i] += 2.0 * g * (p[i] - t[i]);
    }
    if (o.parents[1].requires_grad()) {
      auto& gt = o.parents[1].grad();
      for (size_t i = 0; i < gt.size(); ++i) gt[i] -= 2.0 * g * (p[i] - t[i]);
    }
  });
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  return scale(sum_sq_diff(pred, target), 1.0 / pred.numel());
}

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& targets) {
  require(logits.rank() >= 1, "cross_entropy", "scalar logits");
  const int K = logits.shape().back();
  const int R = logits.numel() / K;
  require(static_cast<int>(targets.size()) == R, "cross_entropy",
          "got " + std::to_string(targets.size()) + " targets for " + std::to_string(R) + " rows");
  for (int t : targets)
    require(t >= 0 && t < K, "cross_entropy",
            "target index " + std::to_string(t) + " out of range [0," + std::to_string(K) + ")");
  const real* ld = logits.data().data();
  real acc = 0.0;
  for (int r = 0; r < R; ++r) {
    const real* row = ld + static_cast<size_t>(r) * K;
    real mx = row[0];
    for (int i = 1; i < K; ++i) mx = std::max(mx, row[i]);
    real sum = 0.0;
    for (int i = 0; i < K; ++i) sum += std::exp(row[i] - mx);
    acc += mx + std::log(sum) - row[targets[static_cast<size_t>(r)]];
  }
  return make_op({1}, {acc}, "cross_entropy", {logits}, [targets, R, K](Node& o) {
    if (!o.parents[0].requires_grad()) return;
    const real g = o.grad[0];
    const real* ld = o.parents[0].data().data();
    real* gl = o.parents[0].grad().data();
    std::vector<real> sm(static_cast<size_t>(K));
    for (int r = 0; r < R; ++r) {
      softmax_rows(ld + static_cast<size_t>(r) * K, sm.data(), 1, K);
      real* grow = gl + static_cast<size_t>(r) * K;
      for (int i = 0; i < K; ++i) grow[i] += g * sm[static_cast<size_t>(i)];
      grow[targets[static_cast<size_t>(r)]] -= g;
    }
  });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  require_same_shape("cosine_similarity", a, b);
  const int D = a.shape().back();
  const int R = a.numel() / D;
  constexpr real kEps = 1e-8;
  std::vector<int> oshape(a.shape().begin(), a.shape().end() - 1);
  if (oshape.empty()) oshape.push_back(1);
  std::vector<real> out(static_cast<size_t>(R));
  const real* ad = a.data().data();
  const real* bd = b.data().data();
  for (int r = 0; r < R; ++r) {
    const real* ar = ad + static_cast<size_t>(r) * D;
    const real* br = bd + static_cast<size_t>(r) * D;
    real dot = 0.0, na = 0.0, nb = 0.0;
    for (int i = 0; i < D; ++i) {
      dot += ar[i] * br[i];
      na += ar[i] * ar[i];
      nb += br[i] * br[i];
    }
    out[static_cast<size_t>(r)] = dot / std::max(std::sqrt(na) * std::sqrt(nb), kEps);
  }
  return make_op(std::move(oshape), std::move(out), "cosine_similarity", {a, b},
                 [R, D](Node& o) {
    constexpr real kEps = 1e-8;
    const real* ad = o.parents[0].data().data();
    const real* bd = o.parents[1].data().data();
    for (int r = 0; r < R; ++r) {
      const real* ar = ad + static_cast<size_t>(r) * D;
      const real* br = bd + static_cast<size_t>(r) * D;
      real dot = 0.0, na2 = 0.0, nb2 = 0.0;
      for (int i = 0; i < D; ++i) {
        dot += ar[i] * br[i];
        na2 += ar[i] * ar[i];
        nb2 += br[i] * br[i];
      }
      const real na = std::max(std::sqrt(na2), kEps);
      const real nb = std::max(std::sqrt(nb2), kEps);
      const real denom = std::max(na * nb, kEps);
      const real s = dot / denom;
      const real g = o.grad[static_cast<size_t>(r)];
      if (o.parents[0].requires_grad()) {
        real* ga = o.parents[0].grad().data() + static_cast<size_t>(r) * D;
        for (int i = 0; i < D; ++i) ga[i] += g * (br[i] / denom - s * ar[i] / (na * na));
      }
      if (o.parents[1].requires_grad()) {
        real* gb = o.parents[1].grad().data() + static_cast<size_t>(r) * D;
        for (int i = 0; i < D; ++i) gb[i] += g * (ar[i] / denom - s * br[i] / (nb * nb));
      }
    }
  });
}

// ---- grad check -------------------------------------------------------------

real grad_check(const std::function<Tensor(const Tensor&)>& fn,
                const Tensor& point, real step) {
  require(step > 0.0, "grad_check", "step must be positive");
  Tensor x = Tensor::from(point.shape(), point.data(), true);
  Tensor loss = fn(x);
  require(loss.numel() == 1, "grad_check", "fn must return a scalar");
  if (!std::isfinite(loss.value()))
    throw NumericError("grad_check: non-finite function value");
  backward(loss);
  // Reached only through stop-gradient (or not at all): nothing to compare.
  if (x.node()->grad.empty()) return 0.0;
  const std::vector<real> analytic = x.node()->grad;

  NoGradGuard ng;
  std::vector<real> values = point.data();
  real max_err = 0.0;
  for (size_t i = 0; i < values.size(); ++i) {
    const real saved = values[i];
    values[i] = saved + step;
    const real fp = fn(Tensor::from(point.shape(), values)).value();
    values[i] = saved - step;
    const real fm = fn(Tensor::from(point.shape(), values)).value();
    values[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("grad_check: non-finite function value");
    const real numeric = (fp - fm) / (2.0 * step);
    const real a = analytic[i];
    const real err = std::abs(a - numeric) /
                     std::max({1.0, std::abs(a), std::abs(numeric)});
    max_err = std::max(max_err, err);
  }
  return max_err;
}

// ---- rng ---------------------------------------------------------------------

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

Rng Rng::stream(uint64_t seed, const std::string& name) {
  return Rng(splitmix64(seed ^ splitmix64(fnv1a(name))));
}

real Rng::uniform() {
  return static_cast<real>(gen_() >> 11) * 0x1.0p-53;
}

real Rng::uniform(real lo, real hi) { return lo + (hi - lo) * uniform(); }

real Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  real u1 = uniform(), u2 = uniform();
  while (u1 <= 1e-300) u1 = uniform();
  const real r = std::sqrt(-2.0 * std::log(u1));
  const real theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

int Rng::uniform_int(int n) {
  return static_cast<int>((static_cast<unsigned __int128>(gen_()) *
                           static_cast<unsigned __int128>(n)) >> 64);
}

bool Rng::bernoulli(real p) { return uniform() < p; }

}  // namespace lab
