#include "lab/codebook.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace lab {

Codebook Codebook::create(int K, int d, Rng& rng) {
  Codebook cb;
  cb.entries = K;
  cb.dim = d;
  cb.embeddings = Tensor::zeros({K, d});
  const real lim = 1.0 / K;
  for (real& v : cb.embeddings.data()) v = rng.uniform(-lim, lim);
  cb.ema_counts.assign(static_cast<size_t>(K), 1.0);
  cb.ema_sums = cb.embeddings.data();
  return cb;
}

std::vector<int> Codebook::nearest(const Tensor& c) const {
  if (c.shape().back() != dim)
    throw std::runtime_error("quantize: latent dim " + std::to_string(c.shape().back()) +
                             " vs codebook dim " + std::to_string(dim));
  const int rows = c.numel() / dim;
  std::vector<int> idx(static_cast<size_t>(rows));
  const real* cd = c.data().data();
  const real* ed = embeddings.data().data();
  for (int r = 0; r < rows; ++r) {
    const real* row = cd + static_cast<size_t>(r) * dim;
    real best = 0.0;
    int best_j = 0;
    for (int j = 0; j < entries; ++j) {
      const real* e = ed + static_cast<size_t>(j) * dim;
      real dist = 0.0;
      for (int i = 0; i < dim; ++i) {
        const real diff = row[i] - e[i];
        dist += diff * diff;
      }
      if (j == 0 || dist < best) {
        best = dist;
        best_j = j;
      }
    }
    idx[static_cast<size_t>(r)] = best_j;
  }
  return idx;
}

Quantized quantize(const Tensor& c, const Codebook& cb) {
  Quantized q;
  q.indices = cb.nearest(c);
  Tensor flat = reshape(c, {c.numel() / cb.dim, cb.dim});
  q.codes = gather_rows(cb.embeddings, q.indices);
  q.straight_through = reshape(add(flat, stop_grad(sub(q.codes, flat))), c.shape());
  return q;
}

void ema_update(Codebook& cb, const std::vector<int>& indices, const Tensor& vectors) {
  const int d = cb.dim;
  if (vectors.numel() != static_cast<int>(indices.size()) * d)
    throw std::runtime_error("ema_update: vectors shape does not match assignments");
  const int K = cb.entries;
  std::vector<real> counts(static_cast<size_t>(K), 0.0);
  std::vector<real> sums(static_cast<size_t>(K) * d, 0.0);
  const real* vd = vectors.data().data();
  for (size_t i = 0; i < indices.size(); ++i) {
    const int j = indices[i];
    if (j < 0 || j >= K)
      throw std::runtime_error("ema_update: index " + std::to_string(j) + " out of range");
    counts[static_cast<size_t>(j)] += 1.0;
    const real* row = vd + i * static_cast<size_t>(d);
    real* s = sums.data() + static_cast<size_t>(j) * d;
    for (int k = 0; k < d; ++k) s[k] += row[k];
  }
  const real g = cb.decay;
  real total = 0.0;
  for (int j = 0; j < K; ++j) {
    cb.ema_counts[static_cast<size_t>(j)] =
        g * cb.ema_counts[static_cast<size_t>(j)] + (1.0 - g) * counts[static_cast<size_t>(j)];
    total += cb.ema_counts[static_cast<size_t>(j)];
    for (int k = 0; k < d; ++k) {
      const size_t at = static_cast<size_t>(j) * d + k;
      cb.ema_sums[at] = g * cb.ema_sums[at] + (1.0 - g) * sums[at];
    }
  }
  if (total <= 0.0) return;  // nothing ever assigned; keep initialization
  real* ed = cb.embeddings.data().data();
  for (int j = 0; j < K; ++j) {
    const real smoothed = (cb.ema_counts[static_cast<size_t>(j)] + cb.smoothing) /
                          (total + K * cb.smoothing) * total;
    for (int k = 0; k < d; ++k)
      ed[static_cast<size_t>(j) * d + k] = cb.ema_sums[static_cast<size_t>(j) * d + k] / smoothed;
  }
}

}  // namespace lab
