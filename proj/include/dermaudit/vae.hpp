// Copyright (c) 2026 dermaudit contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dermaudit/common.hpp"
#include "dermaudit/nn/layers.hpp"
#include "dermaudit/rng.hpp"
#include "dermaudit/serialize.hpp"
#include "dermaudit/tensor.hpp"

namespace dermaudit {

// Geometry of the convolutional VAE. stages() stride-2 halvings take
// input_side down to latent_side; widths double from base_width up to
// max_width. The canonical model is 256 -> 8x8x64.
struct VaeConfig {
  std::int64_t input_side = 256;
  std::int64_t latent_side = 8;
  std::int64_t latent_channels = 64;
  std::int64_t base_width = 32;
  std::int64_t max_width = 512;
  double log_var_clamp = 10.0;

  std::int64_t stages() const {
    std::int64_t side = input_side, n = 0;
    while (side > latent_side) {
      if (side % 2 != 0) throw ContractError("input_side must reach latent_side by halving");
      side /= 2;
      ++n;
    }
    if (side != latent_side || n == 0) {
      throw ContractError("invalid VAE geometry: input_side " + std::to_string(input_side) +
                          ", latent_side " + std::to_string(latent_side));
    }
    return n;
  }

  std::vector<std::int64_t> stage_widths() const {
    std::vector<std::int64_t> w;
    std::int64_t cur = base_width;
    for (std::int64_t i = 0; i < stages(); ++i) {
      cur = std::min(cur * 2, max_width);
      w.push_back(cur);
    }
    return w;
  }
};

// Encoder output for one image: elementwise Gaussian over the latent grid.
template <typename T>
struct LatentGaussianT {
  Tensor<T> mu;       // (C, H, W)
  Tensor<T> log_var;  // same shape

  Tensor<T> std() const {
    Tensor<T> s(log_var.shape());
    for (std::int64_t i = 0; i < log_var.numel(); ++i)
      s[i] = static_cast<T>(std::exp(0.5 * static_cast<double>(log_var[i])));
    return s;
  }
};

using LatentGaussian = LatentGaussianT<float>;

namespace nn {

// conv3 s2 -> BN -> ELU -> conv3 -> BN, plus a 1x1 stride-2 projection skip;
// ELU after the residual add.
template <typename T>
class ResDownBlock {
 public:
  ResDownBlock() = default;
  ResDownBlock(std::int64_t in_c, std::int64_t out_c)
      : conv1_(in_c, out_c, 3, 2, 1),
        conv2_(out_c, out_c, 3, 1, 1),
        skip_(in_c, out_c, 1, 2, 0),
        bn1_(out_c),
        bn2_(out_c) {}

  void init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    skip_.init(rng);
  }

  void register_params(ParamRegistry<T>& reg, const std::string& p) {
    conv1_.register_params(reg, p + ".conv1");
    conv2_.register_params(reg, p + ".conv2");
    skip_.register_params(reg, p + ".skip");
    bn1_.register_params(reg, p + ".bn1");
    bn2_.register_params(reg, p + ".bn2");
  }

  void register_state(std::vector<std::pair<std::string, Tensor<T>*>>& out, const std::string& p) {
    out.emplace_back(p + ".bn1.running_mean", &bn1_.running_mean());
    out.emplace_back(p + ".bn1.running_var", &bn1_.running_var());
    out.emplace_back(p + ".bn2.running_mean", &bn2_.running_mean());
    out.emplace_back(p + ".bn2.running_var", &bn2_.running_var());
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    Tensor<T> main = act1_.forward(bn1_.forward(conv1_.forward(x), training));
    main = bn2_.forward(conv2_.forward(main), training);
    const Tensor<T> res = skip_.forward(x);
    main.add_scaled(res, T(1));
    return act_out_.forward(main);
  }

  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad = true) {
    const Tensor<T> d_sum = act_out_.backward(grad_out);
    Tensor<T> d_main = conv1_.backward(
        bn1_.backward(act1_.backward(conv2_.backward(bn2_.backward(d_sum)))), need_input_grad);
    const Tensor<T> d_skip = skip_.backward(d_sum, need_input_grad);
    if (!need_input_grad) return Tensor<T>();
    d_main.add_scaled(d_skip, T(1));
    return d_main;
  }

 private:
  Conv2d<T> conv1_, conv2_, skip_;
  BatchNorm2d<T> bn1_, bn2_;
  Elu<T> act1_, act_out_;
};

// Mirror of ResDownBlock: nearest 2x upsample feeding both branches.
template <typename T>
class ResUpBlock {
 public:
  ResUpBlock() = default;
  ResUpBlock(std::int64_t in_c, std::int64_t out_c)
      : conv1_(in_c, out_c, 3, 1, 1),
        conv2_(out_c, out_c, 3, 1, 1),
        skip_(in_c, out_c, 1, 1, 0),
        bn1_(out_c),
        bn2_(out_c) {}

  void init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    skip_.init(rng);
  }

  void register_params(ParamRegistry<T>& reg, const std::string& p) {
    conv1_.register_params(reg, p + ".conv1");
    conv2_.register_params(reg, p + ".conv2");
    skip_.register_params(reg, p + ".skip");
    bn1_.register_params(reg, p + ".bn1");
    bn2_.register_params(reg, p + ".bn2");
  }

  void register_state(std::vector<std::pair<std::string, Tensor<T>*>>& out, const std::string& p) {
    out.emplace_back(p + ".bn1.running_mean", &bn1_.running_mean());
    out.emplace_back(p + ".bn1.running_var", &bn1_.running_var());
    out.emplace_back(p + ".bn2.running_mean", &bn2_.running_mean());
    out.emplace_back(p + ".bn2.running_var", &bn2_.running_var());
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    const Tensor<T> up = up_.forward(x);
    Tensor<T> main = act1_.forward(bn1_.forward(conv1_.forward(up), training));
    main = bn2_.forward(conv2_.forward(main), training);
    const Tensor<T> res = skip_.forward(up);
    main.add_scaled(res, T(1));
    return act_out_.forward(main);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    const Tensor<T> d_sum = act_out_.backward(grad_out);
    Tensor<T> d_up =
        conv1_.backward(bn1_.backward(act1_.backward(conv2_.backward(bn2_.backward(d_sum)))));
    d_up.add_scaled(skip_.backward(d_sum), T(1));
    return up_.backward(d_up);
  }

 private:
  UpsampleNearest2<T> up_;
  Conv2d<T> conv1_, conv2_, skip_;
  BatchNorm2d<T> bn1_, bn2_;
  Elu<T> act1_, act_out_;
};

}  // namespace nn

struct ElboTerms {
  double recon = 0;  // 0.5 * sum of squared error (negative Gaussian log-lik up to constants)
  double kl = 0;
  double elbo = 0;   // -recon - kl
  double mse = 0;    // per-pixel-channel mean squared error, the reported metric
};

// Convolutional VAE with stochastic encoder and decoder. One forward/backward
// pair is in flight at a time (layer caches are member state).
template <typename T>
class VaeModelT {
 public:
  explicit VaeModelT(const VaeConfig& cfg) : cfg_(cfg) {
    const auto widths = cfg.stage_widths();
    const std::int64_t stages = cfg.stages();
    enc_stem_ = nn::Conv2d<T>(3, cfg.base_width, 3, 1, 1);
    enc_stem_bn_ = nn::BatchNorm2d<T>(cfg.base_width);
    std::int64_t in_c = cfg.base_width;
    for (std::int64_t i = 0; i < stages; ++i) {
      enc_blocks_.emplace_back(in_c, widths[static_cast<std::size_t>(i)]);
      in_c = widths[static_cast<std::size_t>(i)];
    }
    enc_head_ = nn::Conv2d<T>(in_c, 2 * cfg.latent_channels, 1, 1, 0);

    dec_stem_ = nn::Conv2d<T>(cfg.latent_channels, in_c, 1, 1, 0);
    dec_stem_bn_ = nn::BatchNorm2d<T>(in_c);
    for (std::int64_t i = stages - 1; i >= 0; --i) {
      const std::int64_t out_c = i > 0 ? widths[static_cast<std::size_t>(i - 1)] : cfg.base_width;
      dec_blocks_.emplace_back(widths[static_cast<std::size_t>(i)], out_c);
    }
    dec_out_ = nn::Conv2d<T>(cfg.base_width, 3, 3, 1, 1);
  }

  void init(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "vae/init"));
    enc_stem_.init(rng);
    for (auto& b : enc_blocks_) b.init(rng);
    enc_head_.init(rng);
    dec_stem_.init(rng);
    for (auto& b : dec_blocks_) b.init(rng);
    dec_out_.init(rng);
  }

  const VaeConfig& config() const { return cfg_; }

  // Registries hold raw pointers into this model; rebuild after any move.
  nn::ParamRegistry<T> build_params() {
    nn::ParamRegistry<T> reg;
    enc_stem_.register_params(reg, "enc.stem");
    enc_stem_bn_.register_params(reg, "enc.stem_bn");
    for (std::size_t i = 0; i < enc_blocks_.size(); ++i)
      enc_blocks_[i].register_params(reg, "enc.down" + std::to_string(i));
    enc_head_.register_params(reg, "enc.head");
    dec_stem_.register_params(reg, "dec.stem");
    dec_stem_bn_.register_params(reg, "dec.stem_bn");
    for (std::size_t i = 0; i < dec_blocks_.size(); ++i)
      dec_blocks_[i].register_params(reg, "dec.up" + std::to_string(i));
    dec_out_.register_params(reg, "dec.out");
    return reg;
  }

  std::vector<std::int64_t> latent_shape() const {
    return {cfg_.latent_channels, cfg_.latent_side, cfg_.latent_side};
  }

  // Batched encoder pass: returns (mu, log_var), each (N, C, hl, wl).
  std::pair<Tensor<T>, Tensor<T>> encode_batch(const Tensor<T>& x, bool training) {
    if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != cfg_.input_side || x.dim(3) != cfg_.input_side) {
      throw ContractError("encode: expected (N,3," + std::to_string(cfg_.input_side) + "," +
                          std::to_string(cfg_.input_side) + "), got " + x.shape_str());
    }
    Tensor<T> h = enc_act_.forward(enc_stem_bn_.forward(enc_stem_.forward(x), training));
    for (auto& b : enc_blocks_) h = b.forward(h, training);
    Tensor<T> stats = enc_head_.forward(h);
    return split_and_clamp(stats);
  }

  // Backpropagates (d mu, d log_var) through the encoder. Gradients wrt the
  // input image are not needed anywhere, so they are not computed.
  void encode_backward(const Tensor<T>& d_mu, const Tensor<T>& d_log_var) {
    Tensor<T> d_stats = merge_clamped(d_mu, d_log_var);
    Tensor<T> d = enc_head_.backward(d_stats);
    for (auto it = enc_blocks_.rbegin(); it != enc_blocks_.rend(); ++it) d = it->backward(d, true);
    enc_stem_.backward(enc_stem_bn_.backward(enc_act_.backward(d)), false);
  }

  // Batched decoder pass: z (N, C, hl, wl) -> x_hat (N, 3, side, side).
  Tensor<T> decode_batch(const Tensor<T>& z, bool training) {
    const auto ls = latent_shape();
    if (z.rank() != 4 || z.dim(1) != ls[0] || z.dim(2) != ls[1] || z.dim(3) != ls[2]) {
      throw ContractError("decode: latent shape mismatch, got " + z.shape_str());
    }
    Tensor<T> h = dec_act_.forward(dec_stem_bn_.forward(dec_stem_.forward(z), training));
    for (auto& b : dec_blocks_) h = b.forward(h, training);
    return dec_sig_.forward(dec_out_.forward(h));
  }

  // Backpropagates d x_hat through the decoder; returns d z.
  Tensor<T> decode_backward(const Tensor<T>& d_xhat) {
    Tensor<T> d = dec_out_.backward(dec_sig_.backward(d_xhat));
    for (auto it = dec_blocks_.rbegin(); it != dec_blocks_.rend(); ++it) d = it->backward(d);
    return dec_stem_.backward(dec_stem_bn_.backward(dec_act_.backward(d)));
  }

  // Parameters plus batch-norm running statistics, for checkpointing.
  std::vector<std::pair<std::string, Tensor<T>*>> named_state() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    auto reg = build_params();
    for (auto& e : reg.entries()) out.emplace_back(e.name, e.value);
    out.emplace_back("enc.stem_bn.running_mean", &enc_stem_bn_.running_mean());
    out.emplace_back("enc.stem_bn.running_var", &enc_stem_bn_.running_var());
    for (std::size_t i = 0; i < enc_blocks_.size(); ++i)
      enc_blocks_[i].register_state(out, "enc.down" + std::to_string(i));
    out.emplace_back("dec.stem_bn.running_mean", &dec_stem_bn_.running_mean());
    out.emplace_back("dec.stem_bn.running_var", &dec_stem_bn_.running_var());
    for (std::size_t i = 0; i < dec_blocks_.size(); ++i)
      dec_blocks_[i].register_state(out, "dec.up" + std::to_string(i));
    return out;
  }

  std::vector<Tensor<T>> snapshot_state() {
    std::vector<Tensor<T>> snap;
    for (auto& [name, t] : named_state()) snap.push_back(*t);
    return snap;
  }

  void restore_state(const std::vector<Tensor<T>>& snap) {
    auto state = named_state();
    if (snap.size() != state.size()) throw ContractError("state snapshot size mismatch");
    for (std::size_t i = 0; i < state.size(); ++i) *state[i].second = snap[i];
  }

 private:
  std::pair<Tensor<T>, Tensor<T>> split_and_clamp(const Tensor<T>& stats) {
    const std::int64_t n = stats.dim(0), c = cfg_.latent_channels, h = stats.dim(2), w = stats.dim(3);
    Tensor<T> mu({n, c, h, w}), log_var({n, c, h, w});
    clamp_mask_.assign(static_cast<std::size_t>(log_var.numel()), 1);
    const T lim = static_cast<T>(cfg_.log_var_clamp);
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T* mu_src = stats.data() + ((i * 2 * c + ch) * h) * w;
        const T* lv_src = stats.data() + ((i * 2 * c + c + ch) * h) * w;
        T* mu_dst = mu.data() + ((i * c + ch) * h) * w;
        T* lv_dst = log_var.data() + ((i * c + ch) * h) * w;
        for (std::int64_t j = 0; j < h * w; ++j) {
          mu_dst[j] = mu_src[j];
          T v = lv_src[j];
          if (v > lim || v < -lim) {
            clamp_mask_[static_cast<std::size_t>((i * c + ch) * h * w + j)] = 0;
            v = v > lim ? lim : -lim;
          }
          lv_dst[j] = v;
        }
      }
    }
    return {std::move(mu), std::move(log_var)};
  }

  Tensor<T> merge_clamped(const Tensor<T>& d_mu, const Tensor<T>& d_log_var) {
    const std::int64_t n = d_mu.dim(0), c = cfg_.latent_channels, h = d_mu.dim(2), w = d_mu.dim(3);
    Tensor<T> d_stats({n, 2 * c, h, w});
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T* mu_src = d_mu.data() + ((i * c + ch) * h) * w;
        const T* lv_src = d_log_var.data() + ((i * c + ch) * h) * w;
        T* mu_dst = d_stats.data() + ((i * 2 * c + ch) * h) * w;
        T* lv_dst = d_stats.data() + ((i * 2 * c + c + ch) * h) * w;
        for (std::int64_t j = 0; j < h * w; ++j) {
          mu_dst[j] = mu_src[j];
          lv_dst[j] =
              lv_src[j] * static_cast<T>(clamp_mask_[static_cast<std::size_t>((i * c + ch) * h * w + j)]);
        }
      }
    }
    return d_stats;
  }

  VaeConfig cfg_;

  nn::Conv2d<T> enc_stem_;
  nn::BatchNorm2d<T> enc_stem_bn_;
  nn::Elu<T> enc_act_;
  std::vector<nn::ResDownBlock<T>> enc_blocks_;
  nn::Conv2d<T> enc_head_;

  nn::Conv2d<T> dec_stem_;
  nn::BatchNorm2d<T> dec_stem_bn_;
  nn::Elu<T> dec_act_;
  std::vector<nn::ResUpBlock<T>> dec_blocks_;
  nn::Conv2d<T> dec_out_;
  nn::Sigmoid<T> dec_sig_;

  std::vector<unsigned char> clamp_mask_;
};

using VaeModel = VaeModelT<float>;

// Checkpoint container: every parameter and running statistic plus the
// geometry needed to rebuild the model, and the training config hash.
template <typename T>
TensorArchive checkpoint_archive(VaeModelT<T>& model, const std::string& config_hash) {
  TensorArchive arc;
  arc.meta["kind"] = "vae-checkpoint";
  arc.meta["input_side"] = model.config().input_side;
  arc.meta["latent_shape"] = model.latent_shape();
  arc.meta["base_width"] = model.config().base_width;
  arc.meta["max_width"] = model.config().max_width;
  arc.meta["config_hash"] = config_hash;
  for (auto& [name, t] : model.named_state()) arc.put(name, *t);
  return arc;
}

template <typename T>
void save_checkpoint(VaeModelT<T>& model, const std::string& path, const std::string& config_hash) {
  checkpoint_archive(model, config_hash).save(path);
}

template <typename T = float>
VaeModelT<T> load_checkpoint(const std::string& path) {
  const TensorArchive arc = TensorArchive::load(path);
  if (arc.meta.value("kind", "") != "vae-checkpoint") {
    throw SchemaError("'" + path + "' is not a VAE checkpoint");
  }
  VaeConfig cfg;
  cfg.input_side = arc.meta.at("input_side").get<std::int64_t>();
  const auto ls = arc.meta.at("latent_shape").get<std::vector<std::int64_t>>();
  cfg.latent_channels = ls.at(0);
  cfg.latent_side = ls.at(1);
  cfg.base_width = arc.meta.at("base_width").get<std::int64_t>();
  cfg.max_width = arc.meta.at("max_width").get<std::int64_t>();
  VaeModelT<T> model(cfg);
  for (auto& [name, t] : model.named_state()) {
    const Tensorf& stored = arc.get(name);
    require_shape(stored, t->shape(), name.c_str());
    *t = stored.template cast<T>();
  }
  return model;
}

// --- Spec-level single-image operations ------------------------------------
// These are free functions templated on the model so that test stubs can
// stand in (metric-independence and identity-reconstruction checks).

template <typename T>
LatentGaussianT<T> encode(VaeModelT<T>& model, const Tensor<T>& x) {
  const std::int64_t side = model.config().input_side;
  require_shape(x, {3, side, side}, "encode input");
  Tensor<T> batch({1, 3, side, side});
  std::copy(x.data(), x.data() + x.numel(), batch.data());
  auto [mu, log_var] = model.encode_batch(batch, /*training=*/false);
  const auto ls = model.latent_shape();
  LatentGaussianT<T> g{Tensor<T>(ls), Tensor<T>(ls)};
  std::copy(mu.data(), mu.data() + mu.numel(), g.mu.data());
  std::copy(log_var.data(), log_var.data() + log_var.numel(), g.log_var.data());
  return g;
}

template <typename T>
Tensor<T> decode(VaeModelT<T>& model, const Tensor<T>& z) {
  const auto ls = model.latent_shape();
  require_shape(z, ls, "decode input");
  Tensor<T> batch({1, ls[0], ls[1], ls[2]});
  std::copy(z.data(), z.data() + z.numel(), batch.data());
  Tensor<T> xhat = model.decode_batch(batch, /*training=*/false);
  Tensor<T> out({3, model.config().input_side, model.config().input_side});
  std::copy(xhat.data(), xhat.data() + xhat.numel(), out.data());
  return out;
}

// z = mu + eps ⊙ exp(log_var / 2), elementwise.
template <typename T>
Tensor<T> reparameterize(const LatentGaussianT<T>& g, const Tensor<T>& eps) {
  if (!g.mu.same_shape(g.log_var)) throw ContractError("latent mu/log_var shape mismatch");
  if (!eps.same_shape(g.mu)) {
    throw ContractError("reparameterize: eps shape " + eps.shape_str() + " vs latent " +
                        g.mu.shape_str());
  }
  Tensor<T> z(g.mu.shape());
  for (std::int64_t i = 0; i < z.numel(); ++i) {
    z[i] = g.mu[i] + eps[i] * static_cast<T>(std::exp(0.5 * static_cast<double>(g.log_var[i])));
  }
  return z;
}

// Closed-form KL(N(mu, diag(sigma^2)) || N(0, I)), summed over all latent
// dimensions: sum_d 1/2 (mu_d^2 + sigma_d^2 - 1 - log sigma_d^2).
template <typename T>
double kl_to_standard_normal(const LatentGaussianT<T>& g) {
  if (!g.mu.same_shape(g.log_var)) throw ContractError("latent mu/log_var shape mismatch");
  double kl = 0.0;
  for (std::int64_t i = 0; i < g.mu.numel(); ++i) {
    const double mu = static_cast<double>(g.mu[i]);
    const double lv = static_cast<double>(g.log_var[i]);
    if (!std::isfinite(mu) || !std::isfinite(lv)) {
      throw ContractError("kl_to_standard_normal: non-finite latent parameters");
    }
    kl += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
  }
  return kl;
}

// Single-sample Monte Carlo ELBO for one image. Uses eval-mode passes, so the
// result is deterministic in (parameters, x, eps).
template <typename Model, typename T>
ElboTerms elbo(Model& model, const Tensor<T>& x, const Tensor<T>& eps) {
  auto g = encode(model, x);
  const Tensor<T> z = reparameterize(g, eps);
  const Tensor<T> xhat = decode(model, z);
  if (!xhat.same_shape(x)) throw ContractError("decode output shape mismatch");
  double sse = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(xhat[i]);
    sse += d * d;
  }
  ElboTerms t;
  t.recon = 0.5 * sse;
  t.kl = kl_to_standard_normal(g);
  t.elbo = -t.recon - t.kl;
  t.mse = sse / static_cast<double>(x.numel());
  return t;
}

}  // namespace dermaudit
