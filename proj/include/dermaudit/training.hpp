// Copyright (c) 2026 dermaudit contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dermaudit/common.hpp"
#include "dermaudit/dataset.hpp"
#include "dermaudit/image.hpp"
#include "dermaudit/nn/adam.hpp"
#include "dermaudit/perceptual.hpp"
#include "dermaudit/vae.hpp"

namespace dermaudit {

inline std::string training_config_hash(const TrainingConfig& c) {
  std::string s = std::string(to_string(c.name)) + "|" + std::to_string(c.light_fraction) + "|" +
                  std::to_string(c.train_size) + "|" + std::to_string(c.epochs) + "|" +
                  std::to_string(c.learning_rate) + "|" + std::to_string(c.batch_size) + "|" +
                  std::to_string(c.seed);
  return hash_hex(fnv1a64(s));
}

struct TrainOptions {
  double perceptual_weight = 1.0;
  bool checkpoint_per_epoch = false;  // end-of-training checkpoint is the default
  std::string run_dir;                // when set, checkpoints are written here
};

struct EpochStats {
  double total = 0, recon = 0, kl = 0, perceptual = 0;
};

struct TrainRunLog {
  std::vector<EpochStats> epochs;  // exactly config.epochs entries
  double wall_seconds = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::int64_t excluded_images = 0;
  std::int64_t steps = 0;
};

struct BatchTerms {
  double total = 0, recon = 0, kl = 0, perceptual = 0;  // per-image means
};

// One training objective evaluation on a batch, filling parameter gradients.
// Loss per image: 1/2 ||x - x_hat||^2 + KL(q||N(0,I)) + w_p * perceptual;
// the batch mean is what the optimizer steps on. Batch-norm runs in training
// mode (batch statistics), matching what the gradients are taken through.
template <typename T>
BatchTerms vae_loss_and_grads(VaeModelT<T>& model, FeatureExtractorT<T>* phi, const Tensor<T>& x,
                              const Tensor<T>& eps, double perceptual_weight) {
  const std::int64_t n = x.dim(0);
  const double nd = static_cast<double>(n);
  auto [mu, log_var] = model.encode_batch(x, /*training=*/true);
  if (!eps.same_shape(mu)) {
    throw ContractError("noise shape " + eps.shape_str() + " vs latent " + mu.shape_str());
  }

  Tensor<T> sigma(log_var.shape());
  Tensor<T> z(mu.shape());
  double kl_sum = 0.0;
  for (std::int64_t i = 0; i < mu.numel(); ++i) {
    const double lv = static_cast<double>(log_var[i]);
    const double m = static_cast<double>(mu[i]);
    sigma[i] = static_cast<T>(std::exp(0.5 * lv));
    z[i] = mu[i] + eps[i] * sigma[i];
    kl_sum += 0.5 * (m * m + std::exp(lv) - 1.0 - lv);
  }

  Tensor<T> x_hat = model.decode_batch(z, /*training=*/true);

  double sse = 0.0;
  Tensor<T> d_xhat(x_hat.shape());
  for (std::int64_t i = 0; i < x_hat.numel(); ++i) {
    const double diff = static_cast<double>(x_hat[i]) - static_cast<double>(x[i]);
    sse += diff * diff;
    d_xhat[i] = static_cast<T>(diff / nd);
  }

  double perc_sum = 0.0;
  if (phi != nullptr && perceptual_weight != 0.0) {
    const auto taps_x = phi->taps_batch(x, /*keep_caches=*/false);
    const auto taps_h = phi->taps_batch(x_hat, /*keep_caches=*/true);
    std::vector<Tensor<T>> tap_grads;
    tap_grads.reserve(taps_h.size());
    for (std::size_t l = 0; l < taps_h.size(); ++l) {
      const double cwh = static_cast<double>(taps_h[l].numel()) / nd;
      Tensor<T> g(taps_h[l].shape());
      const double gscale = perceptual_weight / (cwh * nd);
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        const double d =
            static_cast<double>(taps_h[l][i]) - static_cast<double>(taps_x[l][i]);
        perc_sum += d * d / (2.0 * cwh);
        g[i] = static_cast<T>(d * gscale);
      }
      tap_grads.push_back(std::move(g));
    }
    d_xhat.add_scaled(phi->input_grad_from_tap_grads(tap_grads), T(1));
  }

  const Tensor<T> dz = model.decode_backward(d_xhat);
  Tensor<T> d_mu(mu.shape()), d_lv(mu.shape());
  for (std::int64_t i = 0; i < mu.numel(); ++i) {
    const double lv = static_cast<double>(log_var[i]);
    d_mu[i] = dz[i] + static_cast<T>(static_cast<double>(mu[i]) / nd);
    d_lv[i] = static_cast<T>(static_cast<double>(dz[i]) * static_cast<double>(eps[i]) *
                                 static_cast<double>(sigma[i]) * 0.5 +
                             0.5 * (std::exp(lv) - 1.0) / nd);
  }
  model.encode_backward(d_mu, d_lv);

  BatchTerms t;
  t.recon = 0.5 * sse / nd;
  t.kl = kl_sum / nd;
  t.perceptual = perc_sum / nd;
  t.total = t.recon + t.kl + perceptual_weight * t.perceptual;
  return t;
}

// Seeded minibatch Adam on the total training loss. Shuffling, noise draws
// and parameter init all derive from config.seed; identical inputs and seed
// reproduce the run exactly. The last partial minibatch is used, not dropped.
template <typename T = float>
std::pair<VaeModelT<T>, TrainRunLog> train(const std::vector<ImageRecord>& records,
                                           const TrainingConfig& config,
                                           FeatureExtractorT<T>& phi, ImageStore& store,
                                           const VaeConfig& arch, const TrainOptions& opts = {}) {
  if (records.empty()) throw ContractError("train: no records supplied");
  const auto t_start = std::chrono::steady_clock::now();

  TrainRunLog log;
  log.seed = config.seed;
  log.config_hash = training_config_hash(config);

  // Pre-resolve every unique image once; records whose files cannot be
  // decoded are excluded from the run and counted.
  std::vector<const ImageRecord*> usable;
  usable.reserve(records.size());
  {
    std::unordered_map<std::string, bool> loadable;
    for (const auto& rec : records) {
      auto it = loadable.find(rec.id);
      if (it == loadable.end()) {
        bool ok = true;
        try {
          store.load(rec);
        } catch (const LoadError&) {
          ok = false;
        }
        it = loadable.emplace(rec.id, ok).first;
      }
      if (it->second) {
        usable.push_back(&rec);
      } else {
        ++log.excluded_images;
      }
    }
  }
  if (usable.empty()) throw ContractError("train: no loadable images in the training sample");

  VaeModelT<T> model(arch);
  model.init(config.seed);

  auto params = model.build_params();
  nn::Adam<T> adam(params, config.learning_rate);

  Rng shuffle_rng(derive_seed(config.seed, "train/shuffle"));
  Rng noise_rng(derive_seed(config.seed, "train/noise"));

  const std::int64_t n = static_cast<std::int64_t>(usable.size());
  const std::int64_t side = arch.input_side;
  const auto latent = model.latent_shape();

  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  std::vector<Tensor<T>> last_good = model.snapshot_state();
  std::int64_t global_step = 0;

  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double sum_total = 0, sum_recon = 0, sum_kl = 0, sum_perc = 0;
    for (std::int64_t start = 0; start < n; start += config.batch_size) {
      const std::int64_t b = std::min(config.batch_size, n - start);
      Tensor<T> x({b, 3, side, side});
      for (std::int64_t i = 0; i < b; ++i) {
        const Tensorf& img = store.load(*usable[static_cast<std::size_t>(order[static_cast<std::size_t>(start + i)])]);
        T* dst = x.data() + i * 3 * side * side;
        for (std::int64_t j = 0; j < 3 * side * side; ++j) dst[j] = static_cast<T>(img[j]);
      }
      Tensor<T> eps({b, latent[0], latent[1], latent[2]});
      for (std::int64_t i = 0; i < eps.numel(); ++i) eps[i] = static_cast<T>(noise_rng.normal());

      adam.zero_grad();
      const BatchTerms terms =
          vae_loss_and_grads<T>(model, &phi, x, eps, opts.perceptual_weight);
      const auto diverged = [&](const char* what) {
        model.restore_state(last_good);
        if (!opts.run_dir.empty()) {
          save_checkpoint(model, opts.run_dir + "/last_good.dmta", log.config_hash);
        }
        throw DivergenceError(std::string(what) + " at step " + std::to_string(global_step),
                              global_step);
      };
      if (!std::isfinite(terms.total)) diverged("non-finite training loss");
      adam.step();
      if (!params.all_finite()) diverged("non-finite parameters after update");
      last_good = model.snapshot_state();
      ++global_step;

      const double bd = static_cast<double>(b);
      sum_total += terms.total * bd;
      sum_recon += terms.recon * bd;
      sum_kl += terms.kl * bd;
      sum_perc += terms.perceptual * bd;
    }
    EpochStats es;
    es.total = sum_total / static_cast<double>(n);
    es.recon = sum_recon / static_cast<double>(n);
    es.kl = sum_kl / static_cast<double>(n);
    es.perceptual = sum_perc / static_cast<double>(n);
    log.epochs.push_back(es);
    if (opts.checkpoint_per_epoch && !opts.run_dir.empty()) {
      save_checkpoint(model, opts.run_dir + "/epoch_" + std::to_string(epoch) + ".dmta",
                      log.config_hash);
    }
  }

  log.steps = global_step;
  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return {std::move(model), std::move(log)};
}

}  // namespace dermaudit
