#pragma once

#include <iosfwd>
#include <memory>
#include <vector>

#include "lab/codebook.hpp"
#include "lab/nn.hpp"
#include "lab/optim.hpp"
#include "lab/tensor.hpp"

namespace lab {

// Fixed-horizon action sequence, values normalized per dimension to [-1,1].
struct ActionChunk {
  int horizon = 0;
  int action_dim = 0;
  std::vector<real> values;  // horizon x action_dim, row-major
};

// steps < horizon: repeat the last row; steps > horizon: keep the first
// `horizon` rows. steps == 0 is an error.
ActionChunk pad_or_truncate(const std::vector<real>& actions, int steps,
                            int action_dim, int horizon);

struct ActionLamConfig {
  int horizon = 8;
  int action_dim = 3;
  int codebook_size = 256;
  int latent_dim = 128;
  std::vector<int> dilations = {1, 2, 4};
  int conv_kernel = 3;
  int tf_layers = 2;
  int tf_heads = 4;
  int tf_ffn = 256;
  int decoder_hidden = 256;
  real lambda_mask = 0.1;
  real beta = 0.25;
  real mask_ratio = 0.15;
  real ema_decay = 0.99;
  real ema_smoothing = 1e-5;
  real learning_rate = 1e-4;
  int batch_size = 128;

  int freq_bins() const { return horizon / 2 + 1; }
};

struct LatentCodeSeq {
  std::vector<int> indices;  // horizon entries in [0, K)
  Tensor embeddings;         // horizon x d codebook rows
  Tensor pre_quant;          // horizon x d encoder output
};

// Per action dimension, unnormalized real DFT over the horizon; real and
// imaginary parts averaged across dimensions, tiled to every timestep and
// concatenated with the raw actions. [B,H,m] -> [B,H,m+2*(H/2+1)].
Tensor fft_features(const Tensor& chunks);

// Action-chunk VQ-VAE: FFT features -> projection -> dilated convs ->
// transformer encoder -> EMA-quantized codes -> per-timestep MLP decoder.
class ActionLam {
 public:
  ActionLam(ActionLamConfig cfg, uint64_t seed);

  const ActionLamConfig& config() const { return cfg_; }

  Tensor encode(const Tensor& chunks) const;  // [B,H,m] -> [B,H,d]
  Tensor decode(const Tensor& zq) const;      // [B,H,d] -> [B,H,m]

  // Zeroes the pre-quant rows listed per sample, decodes, re-encodes, and
  // matches the original latents at the masked positions (mean over batch).
  Tensor mask_consistency_loss(const Tensor& c, const std::vector<std::vector<int>>& masks) const;

  // Per-timestep Bernoulli(mask_ratio), resampled once for a sample whose
  // first draw is empty.
  std::vector<std::vector<int>> sample_masks(int batch, Rng& rng) const;

  struct Losses {
    real rec = 0, mask = 0, commit = 0, total = 0;
  };
  // One Adam step on encoder/decoder plus one EMA codebook update.
  Losses train_step(const Tensor& batch, Rng& mask_rng);

  LatentCodeSeq tokenize(const std::vector<real>& actions, int steps) const;
  ActionChunk detokenize(const std::vector<int>& indices) const;

  Codebook& codebook() { return codebook_; }
  const Codebook& codebook() const { return codebook_; }
  ParamStore& params() { return store_; }
  AdamState& optimizer() { return opt_; }

  // Trainable parameters plus codebook state, for checkpoints.
  NamedParams persisted() const;
  void save(std::ostream& os) const;
  static std::unique_ptr<ActionLam> load(std::istream& is);

 private:
  ActionLamConfig cfg_;
  ParamStore store_;
  LinearLayer input_proj_;
  std::vector<Conv1dLayer> convs_;
  Tensor pos_emb_;
  std::vector<TransformerBlock> blocks_;
  LinearLayer dec_hidden_, dec_out_;
  Codebook codebook_;
  AdamState opt_;
};

}  // namespace lab
