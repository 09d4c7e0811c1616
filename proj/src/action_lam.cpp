#include "lab/action_lam.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "lab/config.hpp"

namespace lab {

ActionChunk pad_or_truncate(const std::vector<real>& actions, int steps,
                            int action_dim, int horizon) {
  if (steps <= 0) throw std::runtime_error("pad_or_truncate: empty action sequence");
  if (static_cast<int>(actions.size()) != steps * action_dim)
    throw std::runtime_error("pad_or_truncate: data length does not match steps x dim");
  ActionChunk chunk;
  chunk.horizon = horizon;
  chunk.action_dim = action_dim;
  chunk.values.resize(static_cast<size_t>(horizon) * action_dim);
  for (int h = 0; h < horizon; ++h) {
    const int src = std::min(h, steps - 1);
    std::copy(actions.begin() + static_cast<size_t>(src) * action_dim,
              actions.begin() + static_cast<size_t>(src + 1) * action_dim,
              chunk.values.begin() + static_cast<size_t>(h) * action_dim);
  }
  return chunk;
}

Tensor fft_features(const Tensor& chunks) {
  if (chunks.rank() != 3)
    throw std::runtime_error("fft_features: expected [B,H,m], got rank " +
                             std::to_string(chunks.rank()));
  const int B = chunks.dim(0), H = chunks.dim(1), m = chunks.dim(2);
  if (H < 2) throw std::runtime_error("fft_features: horizon must be >= 2");
  const int bins = H / 2 + 1;
  Tensor re_mat = Tensor::zeros({bins, H});
  Tensor im_mat = Tensor::zeros({bins, H});
  for (int k = 0; k < bins; ++k)
    for (int t = 0; t < H; ++t) {
      const real angle = 2.0 * M_PI * k * t / H;
      re_mat.data()[static_cast<size_t>(k) * H + t] = std::cos(angle);
      im_mat.data()[static_cast<size_t>(k) * H + t] = -std::sin(angle);
    }
  std::vector<Tensor> rows;
  rows.reserve(static_cast<size_t>(B));
  for (int b = 0; b < B; ++b) {
    Tensor x = reshape(slice(chunks, 0, b, 1), {H, m});
    Tensor spec = concat({mean_axis(matmul(re_mat, x), 1),
                          mean_axis(matmul(im_mat, x), 1)}, 0);
    Tensor feat = concat({x, expand_leading(spec, H)}, 1);
    rows.push_back(reshape(feat, {1, H, m + 2 * bins}));
  }
  return B == 1 ? rows[0] : concat(rows, 0);
}

ActionLam::ActionLam(ActionLamConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  Rng rng = Rng::stream(seed, "action_lam_init");
  const int d = cfg_.latent_dim;
  input_proj_.init(store_, "enc.proj", cfg_.action_dim + 2 * cfg_.freq_bins(), d, rng);
  for (size_t i = 0; i < cfg_.dilations.size(); ++i) {
    Conv1dLayer conv;
    conv.init(store_, "enc.conv" + std::to_string(i), cfg_.conv_kernel, d, d,
              cfg_.dilations[i], rng);
    convs_.push_back(conv);
  }
  pos_emb_ = store_.add("enc.pos", {cfg_.horizon, d}, rng, 0.02);
  for (int i = 0; i < cfg_.tf_layers; ++i) {
    TransformerBlock block;
    block.init(store_, "enc.tf" + std::to_string(i), d, cfg_.tf_heads, cfg_.tf_ffn, rng);
    blocks_.push_back(block);
  }
  dec_hidden_.init(store_, "dec.hidden", d, cfg_.decoder_hidden, rng);
  dec_out_.init(store_, "dec.out", cfg_.decoder_hidden, cfg_.action_dim, rng);
  Rng cb_rng = Rng::stream(seed, "action_lam_codebook");
  codebook_ = Codebook::create(cfg_.codebook_size, d, cb_rng);
  codebook_.decay = cfg_.ema_decay;
  codebook_.smoothing = cfg_.ema_smoothing;
  opt_.learning_rate = cfg_.learning_rate;
}

Tensor ActionLam::encode(const Tensor& chunks) const {
  if (chunks.rank() != 3 || chunks.dim(1) != cfg_.horizon ||
      chunks.dim(2) != cfg_.action_dim)
    throw std::runtime_error("encode: expected [B," + std::to_string(cfg_.horizon) +
                             "," + std::to_string(cfg_.action_dim) + "]");
  Tensor h = input_proj_(fft_features(chunks));
  for (const Conv1dLayer& conv : convs_) h = gelu(conv(h));
  h = add_bcast(h, pos_emb_);
  for (const TransformerBlock& block : blocks_) h = block(h);
  return h;
}

Tensor ActionLam::decode(const Tensor& zq) const {
  return dec_out_(gelu(dec_hidden_(zq)));
}

std::vector<std::vector<int>> ActionLam::sample_masks(int batch, Rng& rng) const {
  std::vector<std::vector<int>> masks(static_cast<size_t>(batch));
  if (cfg_.mask_ratio <= 0.0) return masks;
  for (int b = 0; b < batch; ++b) {
    for (int attempt = 0; attempt < 2 && masks[static_cast<size_t>(b)].empty(); ++attempt)
      for (int h = 0; h < cfg_.horizon; ++h)
        if (rng.bernoulli(cfg_.mask_ratio)) masks[static_cast<size_t>(b)].push_back(h);
  }
  return masks;
}

Tensor ActionLam::mask_consistency_loss(const Tensor& c,
                                        const std::vector<std::vector<int>>& masks) const {
  const int B = c.dim(0), H = c.dim(1), d = c.dim(2);
  if (static_cast<int>(masks.size()) != B)
    throw std::runtime_error("mask_consistency_loss: mask count vs batch size");
  bool any = false;
  Tensor keep = Tensor::full({B, H, d}, 1.0);
  Tensor sel = Tensor::zeros({B, H, d});
  for (int b = 0; b < B; ++b)
    for (int h : masks[static_cast<size_t>(b)]) {
      if (h < 0 || h >= H) throw std::runtime_error("mask_consistency_loss: bad index");
      any = true;
      for (int i = 0; i < d; ++i) {
        const size_t at = (static_cast<size_t>(b) * H + h) * d + i;
        keep.data()[at] = 0.0;
        sel.data()[at] = 1.0;
      }
    }
  if (!any) return Tensor::scalar(0.0);
  Tensor masked = mul(c, keep);           // masked rows replaced by zeros
  Tensor rebuilt = encode(decode(masked));
  Tensor diff = sum_sq_diff(mul(rebuilt, sel), mul(c, sel));
  return scale(diff, 1.0 / B);
}

ActionLam::Losses ActionLam::train_step(const Tensor& batch, Rng& mask_rng) {
  const int B = batch.dim(0);
  Tensor c = encode(batch);
  Quantized q = quantize(c, codebook_);
  Tensor recon = decode(q.straight_through);
  Tensor l_rec = scale(sum_sq_diff(recon, batch), 1.0 / B);
  Tensor l_commit = scale(sum_sq_diff(c, reshape(stop_grad(q.codes), c.shape())), 1.0 / B);
  Tensor l_mask = mask_consistency_loss(c, sample_masks(B, mask_rng));
  Tensor total = add(l_rec, add(scale(l_mask, cfg_.lambda_mask),
                                scale(l_commit, cfg_.beta)));
  if (!std::isfinite(total.value()))
    throw NumericError("action_lam train_step: non-finite loss (rec=" +
                       std::to_string(l_rec.value()) + ")");
  store_.zero_grads();
  backward(total);
  auto params = store_.all();
  adam_step(params, opt_);
  ema_update(codebook_, q.indices, stop_grad(c));
  return {l_rec.value(), l_mask.value(), l_commit.value(), total.value()};
}

LatentCodeSeq ActionLam::tokenize(const std::vector<real>& actions, int steps) const {
  NoGradGuard ng;
  ActionChunk chunk = pad_or_truncate(actions, steps, cfg_.action_dim, cfg_.horizon);
  Tensor input = Tensor::from({1, cfg_.horizon, cfg_.action_dim}, chunk.values);
  Tensor c = encode(input);
  Quantized q = quantize(c, codebook_);
  LatentCodeSeq seq;
  seq.indices = q.indices;
  seq.embeddings = reshape(q.codes, {cfg_.horizon, cfg_.latent_dim});
  seq.pre_quant = reshape(c, {cfg_.horizon, cfg_.latent_dim});
  return seq;
}

ActionChunk ActionLam::detokenize(const std::vector<int>& indices) const {
  NoGradGuard ng;
  const int H = static_cast<int>(indices.size());
  Tensor zq = reshape(gather_rows(codebook_.embeddings, indices),
                      {1, H, cfg_.latent_dim});
  Tensor out = decode(zq);
  ActionChunk chunk;
  chunk.horizon = H;
  chunk.action_dim = cfg_.action_dim;
  chunk.values = out.data();
  return chunk;
}

NamedParams ActionLam::persisted() const {
  NamedParams out = store_.named();
  out.emplace_back("codebook.embeddings", codebook_.embeddings);
  Tensor counts = Tensor::zeros({cfg_.codebook_size});
  counts.data() = codebook_.ema_counts;
  out.emplace_back("codebook.ema_counts", counts);
  Tensor sums = Tensor::zeros({cfg_.codebook_size, cfg_.latent_dim});
  sums.data() = codebook_.ema_sums;
  out.emplace_back("codebook.ema_sums", sums);
  return out;
}

void ActionLam::save(std::ostream& os) const {
  KvMap kv;
  kv.set("model", "action_lam");
  kv.set_int("horizon", cfg_.horizon);
  kv.set_int("action_dim", cfg_.action_dim);
  kv.set_int("codebook_size", cfg_.codebook_size);
  kv.set_int("latent_dim", cfg_.latent_dim);
  kv.set_int("tf_layers", cfg_.tf_layers);
  kv.set_int("tf_heads", cfg_.tf_heads);
  kv.set_int("tf_ffn", cfg_.tf_ffn);
  kv.set_int("decoder_hidden", cfg_.decoder_hidden);
  kv.set_real("lambda_mask", cfg_.lambda_mask);
  kv.set_real("beta", cfg_.beta);
  kv.set_real("mask_ratio", cfg_.mask_ratio);
  write_text_block(os, kv.emit());
  NamedParams params = persisted();
  save_params(os, params);
  // save_params rounds values in place; copy codebook state back so the live
  // model matches the file exactly
  codebook_.ema_counts = params[params.size() - 2].second.data();
  codebook_.ema_sums = params.back().second.data();
}

std::unique_ptr<ActionLam> ActionLam::load(std::istream& is) {
  KvMap kv = KvMap::parse(read_text_block(is));
  if (kv.get_str("model") != "action_lam")
    throw std::runtime_error("action_lam: checkpoint is not an action model");
  ActionLamConfig cfg;
  cfg.horizon = static_cast<int>(kv.get_int("horizon"));
  cfg.action_dim = static_cast<int>(kv.get_int("action_dim"));
  cfg.codebook_size = static_cast<int>(kv.get_int("codebook_size"));
  cfg.latent_dim = static_cast<int>(kv.get_int("latent_dim"));
  cfg.tf_layers = static_cast<int>(kv.get_int("tf_layers"));
  cfg.tf_heads = static_cast<int>(kv.get_int("tf_heads"));
  cfg.tf_ffn = static_cast<int>(kv.get_int("tf_ffn"));
  cfg.decoder_hidden = static_cast<int>(kv.get_int("decoder_hidden"));
  cfg.lambda_mask = kv.get_real("lambda_mask");
  cfg.beta = kv.get_real("beta");
  cfg.mask_ratio = kv.get_real("mask_ratio");
  auto model = std::make_unique<ActionLam>(cfg, 0);
  NamedParams params = model->persisted();
  load_params(is, params);
  model->codebook_.ema_counts = params[params.size() - 2].second.data();
  model->codebook_.ema_sums = params.back().second.data();
  return model;
}

}  // namespace lab
