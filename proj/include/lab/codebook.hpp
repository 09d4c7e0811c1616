#pragma once

#include <vector>

#include "lab/nn.hpp"
#include "lab/tensor.hpp"

namespace lab {

// Shared vector-quantization abstraction for both tokenizers. The embeddings
// are either loss-trained (register with a ParamStore, requires_grad) or kept
// fixed and moved by EMA updates on the assignment statistics.
struct Codebook {
  int entries = 0;
  int dim = 0;
  Tensor embeddings;  // [K, d]
  std::vector<real> ema_counts;  // N_j
  std::vector<real> ema_sums;    // m_j, K*d row-major
  real decay = 0.99;
  real smoothing = 1e-5;

  // Rows drawn uniform(-1/K, 1/K). EMA statistics start at N_j = 1 with
  // m_j equal to the initial row, so codes that never receive assignments
  // keep their initialization.
  static Codebook create(int K, int d, Rng& rng);

  // Nearest code (squared L2) per row of c ([..., d]); ties break to the
  // lowest index.
  std::vector<int> nearest(const Tensor& c) const;
};

struct Quantized {
  std::vector<int> indices;
  Tensor codes;             // gather of codebook rows; graph-linked to embeddings
  Tensor straight_through;  // values equal codes, gradient passes to c unchanged
};

Quantized quantize(const Tensor& c, const Codebook& cb);

// N_j <- g N_j + (1-g) count_j; m_j <- g m_j + (1-g) sum_j;
// e_j <- m_j / Ntilde_j with Laplace-smoothed Ntilde. vectors: [n, d] rows
// assigned to indices[i].
void ema_update(Codebook& cb, const std::vector<int>& indices, const Tensor& vectors);

}  // namespace lab
