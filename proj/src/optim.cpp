#include "lab/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace lab {

void adam_step(std::vector<Tensor>& params, AdamState& state) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].data().size(), 0.0);
      state.v[i].assign(params[i].data().size(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw std::runtime_error("adam_step: parameter list size changed");
  state.step += 1;
  const real bc1 = 1.0 - std::pow(state.beta1, static_cast<real>(state.step));
  const real bc2 = 1.0 - std::pow(state.beta2, static_cast<real>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].data();
    auto& g = params[i].grad();
    if (g.size() != p.size())
      throw std::runtime_error("adam_step: grad shape mismatch for parameter " +
                               std::to_string(i));
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.size())
      throw std::runtime_error("adam_step: moment shape mismatch for parameter " +
                               std::to_string(i));
    for (size_t j = 0; j < p.size(); ++j) {
      if (!std::isfinite(g[j]))
        throw NumericError("adam_step: non-finite gradient");
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const real mhat = m[j] / bc1;
      const real vhat = v[j] / bc2;
      p[j] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

void zero_grads(std::vector<Tensor>& params) {
  for (Tensor& p : params) p.zero_grad();
}

}  // namespace lab
