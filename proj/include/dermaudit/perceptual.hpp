// Copyright (c) 2026 dermaudit contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dermaudit/common.hpp"
#include "dermaudit/nn/layers.hpp"
#include "dermaudit/serialize.hpp"
#include "dermaudit/tensor.hpp"
#include "dermaudit/vae.hpp"

namespace dermaudit {

// Conv-stack geometry for the feature extractor. All convolutions are 3x3,
// stride 1, pad 1, each followed by ReLU; max-pool 2x2 after the listed taps.
struct ExtractorGeometry {
  std::string name;
  std::vector<std::int64_t> conv_channels;   // output channels per conv layer
  std::vector<std::size_t> pool_after;       // conv indices (0-based) followed by a pool
  std::array<double, 3> norm_mean{0.0, 0.0, 0.0};
  std::array<double, 3> norm_std{1.0, 1.0, 1.0};

  // VGG19 feature stack: 16 conv layers, ImageNet input statistics.
  static ExtractorGeometry vgg19() {
    ExtractorGeometry g;
    g.name = "vgg19";
    g.conv_channels = {64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512, 512, 512, 512};
    g.pool_after = {1, 3, 7, 11, 15};
    g.norm_mean = {0.485, 0.456, 0.406};
    g.norm_std = {0.229, 0.224, 0.225};
    return g;
  }

  // Light stack for desk-scale runs.
  static ExtractorGeometry tiny() {
    ExtractorGeometry g;
    g.name = "tiny";
    g.conv_channels = {16, 16, 32, 32};
    g.pool_after = {1};
    return g;
  }

  // Two plain conv layers; small enough to verify the loss formula by hand.
  static ExtractorGeometry stub2() {
    ExtractorGeometry g;
    g.name = "stub2";
    g.conv_channels = {4, 8};
    g.pool_after = {};
    return g;
  }

  static ExtractorGeometry by_name(const std::string& name) {
    if (name == "vgg19") return vgg19();
    if (name == "tiny") return tiny();
    if (name == "stub2") return stub2();
    throw SchemaError("unknown extractor geometry '" + name + "'");
  }

  bool pools_after(std::size_t conv_index) const {
    for (auto p : pool_after) {
      if (p == conv_index) return true;
    }
    return false;
  }
};

// One tapped hidden map; layer_index is 1-based as in "the l-th feature map".
template <typename T>
struct FeatureMapT {
  Tensor<T> values;  // (C, H, W)
  int layer_index = 0;
};

using FeatureMap = FeatureMapT<float>;

// Fixed pretrained conv network used only for the perceptual loss. Weights
// never change after construction; backward passes propagate to the input
// only. Weights come from a tensor archive, or from a seeded He init when no
// pretrained file is supplied.
template <typename T>
class FeatureExtractorT {
 public:
  explicit FeatureExtractorT(ExtractorGeometry geometry) : geo_(std::move(geometry)) {
    std::int64_t in_c = 3;
    for (const auto out_c : geo_.conv_channels) {
      convs_.emplace_back(in_c, out_c, 3, 1, 1);
      relus_.emplace_back();
      pools_.emplace_back();
      in_c = out_c;
    }
  }

  static FeatureExtractorT seeded(ExtractorGeometry geometry, std::uint64_t seed) {
    FeatureExtractorT ex(std::move(geometry));
    Rng rng(derive_seed(seed, "extractor/init"));
    for (auto& c : ex.convs_) c.init(rng);
    ex.weights_hash_ = ex.compute_hash();
    return ex;
  }

  static FeatureExtractorT from_archive(const TensorArchive& arc) {
    ExtractorGeometry geo = ExtractorGeometry::by_name(arc.meta.at("geometry").get<std::string>());
    FeatureExtractorT ex(geo);
    for (std::size_t i = 0; i < ex.convs_.size(); ++i) {
      const std::string base = "conv" + std::to_string(i);
      const Tensorf w = arc.get(base + ".weight");
      const Tensorf b = arc.get(base + ".bias");
      require_shape(w, ex.convs_[i].weight().shape(), "extractor weight");
      ex.convs_[i].weight() = w.template cast<T>();
      ex.convs_[i].bias() = b.template cast<T>();
    }
    ex.weights_hash_ = ex.compute_hash();
    return ex;
  }

  TensorArchive to_archive() const {
    TensorArchive arc;
    arc.meta["geometry"] = geo_.name;
    arc.meta["kind"] = "feature-extractor";
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      const std::string base = "conv" + std::to_string(i);
      arc.put(base + ".weight", convs_[i].weight());
      arc.put(base + ".bias", convs_[i].bias());
    }
    return arc;
  }

  const ExtractorGeometry& geometry() const { return geo_; }
  std::size_t layer_count() const { return convs_.size(); }
  std::uint64_t weights_hash() const { return weights_hash_; }

  // Forward through the stack collecting post-activation taps. With
  // `keep_caches` the pass can be followed by input_grad_from_tap_grads.
  std::vector<Tensor<T>> taps_batch(const Tensor<T>& x, bool keep_caches) {
    if (x.rank() != 4 || x.dim(1) != 3) {
      throw ContractError("extractor expects (N,3,H,W), got " + x.shape_str());
    }
    Tensor<T> h = normalize(x);
    std::vector<Tensor<T>> taps;
    taps.reserve(convs_.size());
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      Tensor<T> tap = relus_[i].forward(convs_[i].forward(h));
      if (i + 1 < convs_.size()) {
        h = geo_.pools_after(i) ? pools_[i].forward(tap) : tap;
      }
      taps.push_back(std::move(tap));
      if (!keep_caches) {
        convs_[i].release_cache();
        relus_[i].release_cache();
      }
    }
    return taps;
  }

  // Backward from per-tap gradients to the (unnormalized) input. Requires the
  // caches of the most recent taps_batch(..., keep_caches=true).
  Tensor<T> input_grad_from_tap_grads(const std::vector<Tensor<T>>& tap_grads) {
    if (tap_grads.size() != convs_.size()) {
      throw ContractError("tap gradient count mismatch");
    }
    Tensor<T> g;
    for (std::size_t ri = convs_.size(); ri-- > 0;) {
      Tensor<T> tap_g;
      if (ri + 1 == convs_.size()) {
        tap_g = tap_grads[ri];
      } else {
        tap_g = geo_.pools_after(ri) ? pools_[ri].backward(g) : std::move(g);
        tap_g.add_scaled(tap_grads[ri], T(1));
      }
      g = convs_[ri].backward(relus_[ri].backward(tap_g), /*need_input_grad=*/true,
                              /*need_param_grad=*/false);
    }
    for (std::int64_t n = 0; n < g.dim(0); ++n) {
      for (std::int64_t c = 0; c < 3; ++c) {
        T* p = g.data() + ((n * 3 + c) * g.dim(2)) * g.dim(3);
        const T inv = static_cast<T>(1.0 / geo_.norm_std[static_cast<std::size_t>(c)]);
        for (std::int64_t j = 0; j < g.dim(2) * g.dim(3); ++j) p[j] *= inv;
      }
    }
    return g;
  }

 private:
  Tensor<T> normalize(const Tensor<T>& x) const {
    Tensor<T> out(x.shape());
    for (std::int64_t n = 0; n < x.dim(0); ++n) {
      for (std::int64_t c = 0; c < 3; ++c) {
        const T* src = x.data() + ((n * 3 + c) * x.dim(2)) * x.dim(3);
        T* dst = out.data() + ((n * 3 + c) * x.dim(2)) * x.dim(3);
        const T m = static_cast<T>(geo_.norm_mean[static_cast<std::size_t>(c)]);
        const T inv = static_cast<T>(1.0 / geo_.norm_std[static_cast<std::size_t>(c)]);
        for (std::int64_t j = 0; j < x.dim(2) * x.dim(3); ++j) dst[j] = (src[j] - m) * inv;
      }
    }
    return out;
  }

  std::uint64_t compute_hash() const {
    std::uint64_t h = fnv1a64(geo_.name);
    for (const auto& c : convs_) {
      h = fnv1a64(c.weight().data(), static_cast<std::size_t>(c.weight().numel()) * sizeof(T), h);
      h = fnv1a64(c.bias().data(), static_cast<std::size_t>(c.bias().numel()) * sizeof(T), h);
    }
    return h;
  }

  ExtractorGeometry geo_;
  std::vector<nn::Conv2d<T>> convs_;
  std::vector<nn::Relu<T>> relus_;
  std::vector<nn::MaxPool2<T>> pools_;
  std::uint64_t weights_hash_ = 0;
};

using FeatureExtractor = FeatureExtractorT<float>;

// Spec-level single-image tap extraction.
template <typename T>
std::vector<FeatureMapT<T>> extract_features(FeatureExtractorT<T>& phi, const Tensor<T>& x) {
  if (x.rank() != 3 || x.dim(0) != 3) {
    throw ContractError("extract_features expects (3,H,W), got " + x.shape_str());
  }
  Tensor<T> batch({1, 3, x.dim(1), x.dim(2)});
  std::copy(x.data(), x.data() + x.numel(), batch.data());
  auto taps = phi.taps_batch(batch, /*keep_caches=*/false);
  std::vector<FeatureMapT<T>> maps;
  maps.reserve(taps.size());
  for (std::size_t i = 0; i < taps.size(); ++i) {
    FeatureMapT<T> fm;
    fm.layer_index = static_cast<int>(i + 1);
    fm.values = Tensor<T>({taps[i].dim(1), taps[i].dim(2), taps[i].dim(3)});
    std::copy(taps[i].data(), taps[i].data() + taps[i].numel(), fm.values.data());
    maps.push_back(std::move(fm));
  }
  return maps;
}

// Feature perceptual loss:
//   sum_l 1/(2 C^l W^l H^l) * sum_{c,w,h} (phi(x)^l - phi(x_hat)^l)^2
template <typename T>
double perceptual_loss(FeatureExtractorT<T>& phi, const Tensor<T>& x, const Tensor<T>& x_hat) {
  if (!x.same_shape(x_hat)) {
    throw ContractError("perceptual_loss: shape mismatch " + x.shape_str() + " vs " +
                        x_hat.shape_str());
  }
  const auto a = extract_features(phi, x);
  const auto b = extract_features(phi, x_hat);
  double loss = 0.0;
  for (std::size_t l = 0; l < a.size(); ++l) {
    double sq = 0.0;
    for (std::int64_t i = 0; i < a[l].values.numel(); ++i) {
      const double d =
          static_cast<double>(a[l].values[i]) - static_cast<double>(b[l].values[i]);
      sq += d * d;
    }
    loss += sq / (2.0 * static_cast<double>(a[l].values.numel()));
  }
  return loss;
}

// Full training objective for one image: recon + kl + weight * perceptual,
// i.e. the negated ELBO of the Gaussian model plus the feature loss.
template <typename Model, typename T>
double total_training_loss(Model& model, FeatureExtractorT<T>& phi, const Tensor<T>& x,
                           const Tensor<T>& eps, double perceptual_weight = 1.0) {
  auto g = encode(model, x);
  const Tensor<T> z = reparameterize(g, eps);
  const Tensor<T> x_hat = decode(model, z);
  double sse = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(x_hat[i]);
    sse += d * d;
  }
  return 0.5 * sse + kl_to_standard_normal(g) + perceptual_weight * perceptual_loss(phi, x, x_hat);
}

}  // namespace dermaudit
