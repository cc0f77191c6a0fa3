// Copyright (c) 2026 dermaudit contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dermaudit/common.hpp"
#include "dermaudit/rng.hpp"
#include "dermaudit/tensor.hpp"

namespace dermaudit::nn {

template <typename T>
struct ParamEntry {
  std::string name;
  Tensor<T>* value = nullptr;
  Tensor<T>* grad = nullptr;
};

// Flat list of named (value, grad) pairs; the optimizer and the checkpoint
// container both walk it in registration order.
template <typename T>
class ParamRegistry {
 public:
  void add(std::string name, Tensor<T>* value, Tensor<T>* grad) {
    entries_.push_back({std::move(name), value, grad});
  }

  std::vector<ParamEntry<T>>& entries() { return entries_; }
  const std::vector<ParamEntry<T>>& entries() const { return entries_; }

  std::int64_t total_params() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.value->numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.grad->zero();
  }

  bool all_finite() const {
    for (const auto& e : entries_) {
      if (!e.value->all_finite()) return false;
    }
    return true;
  }

 private:
  std::vector<ParamEntry<T>> entries_;
};

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

}  // namespace detail

// 2D convolution, square kernel, symmetric zero padding. Forward/backward via
// im2col + GEMM, image by image; the reductions run in a fixed order so
// results are bit-reproducible.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;

  Conv2d(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel,
         std::int64_t stride, std::int64_t pad)
      : in_c_(in_channels),
        out_c_(out_channels),
        k_(kernel),
        stride_(stride),
        pad_(pad),
        weight_({out_channels, in_channels, kernel, kernel}),
        bias_({out_channels}),
        weight_grad_({out_channels, in_channels, kernel, kernel}),
        bias_grad_({out_channels}) {}

  // Fan-in scaled normal init (He).
  void init(Rng& rng) {
    const double fan_in = static_cast<double>(in_c_ * k_ * k_);
    weight_.randn(rng, std::sqrt(2.0 / fan_in));
    bias_.zero();
  }

  void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    reg.add(prefix + ".weight", &weight_, &weight_grad_);
    reg.add(prefix + ".bias", &bias_, &bias_grad_);
  }

  std::int64_t out_side(std::int64_t in_side) const {
    const std::int64_t num = in_side + 2 * pad_ - k_;
    if (num < 0) {
      throw ContractError("conv kernel larger than padded input: side " + std::to_string(in_side));
    }
    return num / stride_ + 1;  // floor division, matching the usual convention
  }

  Tensor<T> forward(const Tensor<T>& x) {
    const std::int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    if (x.dim(1) != in_c_) {
      throw ContractError("conv input channels: expected " + std::to_string(in_c_) + ", got " +
                          std::to_string(x.dim(1)));
    }
    const std::int64_t oh = out_side(h), ow = out_side(w);
    input_ = x;
    Tensor<T> y({n, out_c_, oh, ow});
    const std::int64_t kcols = in_c_ * k_ * k_;
    const std::int64_t ocols = oh * ow;
    col_.resize(static_cast<std::size_t>(kcols * ocols));
    detail::CMapRM<T> wmat(weight_.data(), out_c_, kcols);
    for (std::int64_t i = 0; i < n; ++i) {
      im2col(x, i, oh, ow);
      detail::CMapRM<T> col(col_.data(), kcols, ocols);
      detail::MapRM<T> out(y.data() + i * out_c_ * ocols, out_c_, ocols);
      out.noalias() = wmat * col;
      for (std::int64_t c = 0; c < out_c_; ++c) out.row(c).array() += bias_[c];
    }
    return y;
  }

  // Accumulates into weight/bias grads; returns grad wrt input unless skipped
  // (frozen feature extractors skip the weight side instead).
  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad = true,
                     bool need_param_grad = true) {
    const std::int64_t n = input_.dim(0), h = input_.dim(2), w = input_.dim(3);
    const std::int64_t oh = grad_out.dim(2), ow = grad_out.dim(3);
    const std::int64_t kcols = in_c_ * k_ * k_;
    const std::int64_t ocols = oh * ow;
    Tensor<T> grad_in;
    if (need_input_grad) grad_in = Tensor<T>({n, in_c_, h, w});
    detail::CMapRM<T> wmat(weight_.data(), out_c_, kcols);
    detail::MapRM<T> wgrad(weight_grad_.data(), out_c_, kcols);
    col_.resize(static_cast<std::size_t>(kcols * ocols));
    dcol_.resize(static_cast<std::size_t>(kcols * ocols));
    for (std::int64_t i = 0; i < n; ++i) {
      detail::CMapRM<T> gout(grad_out.data() + i * out_c_ * ocols, out_c_, ocols);
      if (need_param_grad) {
        im2col(input_, i, oh, ow);
        detail::CMapRM<T> col(col_.data(), kcols, ocols);
        wgrad.noalias() += gout * col.transpose();
        for (std::int64_t c = 0; c < out_c_; ++c) bias_grad_[c] += gout.row(c).sum();
      }
      if (need_input_grad) {
        detail::MapRM<T> dcol(dcol_.data(), kcols, ocols);
        dcol.noalias() = wmat.transpose() * gout;
        col2im(grad_in, i, oh, ow);
      }
    }
    return grad_in;
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }
  std::int64_t in_channels() const { return in_c_; }
  std::int64_t out_channels() const { return out_c_; }

  void release_cache() { input_ = Tensor<T>(); }

 private:
  void im2col(const Tensor<T>& x, std::int64_t image, std::int64_t oh, std::int64_t ow) {
    const std::int64_t h = x.dim(2), w = x.dim(3);
    const T* base = x.data() + image * in_c_ * h * w;
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < in_c_; ++c) {
      for (std::int64_t ky = 0; ky < k_; ++ky) {
        for (std::int64_t kx = 0; kx < k_; ++kx, ++row) {
          T* dst = col_.data() + row * oh * ow;
          for (std::int64_t oy = 0; oy < oh; ++oy) {
            const std::int64_t iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= h) {
              std::fill(dst, dst + ow, T(0));
              dst += ow;
              continue;
            }
            const T* src = base + (c * h + iy) * w;
            for (std::int64_t ox = 0; ox < ow; ++ox) {
              const std::int64_t ix = ox * stride_ - pad_ + kx;
              *dst++ = (ix < 0 || ix >= w) ? T(0) : src[ix];
            }
          }
        }
      }
    }
  }

  void col2im(Tensor<T>& grad_in, std::int64_t image, std::int64_t oh, std::int64_t ow) {
    const std::int64_t h = grad_in.dim(2), w = grad_in.dim(3);
    T* base = grad_in.data() + image * in_c_ * h * w;
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < in_c_; ++c) {
      for (std::int64_t ky = 0; ky < k_; ++ky) {
        for (std::int64_t kx = 0; kx < k_; ++kx, ++row) {
          const T* src = dcol_.data() + row * oh * ow;
          for (std::int64_t oy = 0; oy < oh; ++oy) {
            const std::int64_t iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= h) {
              src += ow;
              continue;
            }
            T* dst = base + (c * h + iy) * w;
            for (std::int64_t ox = 0; ox < ow; ++ox) {
              const std::int64_t ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < w) dst[ix] += src[ox];
            }
            src += ow;
          }
        }
      }
    }
  }

  std::int64_t in_c_ = 0, out_c_ = 0, k_ = 0, stride_ = 1, pad_ = 0;
  Tensor<T> weight_, bias_, weight_grad_, bias_grad_;
  Tensor<T> input_;
  AlignedVector<T> col_, dcol_;
};

// Batch normalization over (N, H, W) per channel. Training mode uses batch
// statistics (biased variance in the normalizer, unbiased in the running
// estimate); eval mode uses the running estimates.
template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;

  explicit BatchNorm2d(std::int64_t channels, double momentum = 0.1, double eps = 1e-5)
      : c_(channels),
        momentum_(momentum),
        eps_(eps),
        gamma_({channels}),
        beta_({channels}),
        gamma_grad_({channels}),
        beta_grad_({channels}),
        running_mean_({channels}),
        running_var_({channels}) {
    gamma_.fill(T(1));
    running_var_.fill(T(1));
  }

  void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    reg.add(prefix + ".gamma", &gamma_, &gamma_grad_);
    reg.add(prefix + ".beta", &beta_, &beta_grad_);
  }

  // Running stats are state, not optimized parameters; checkpoints still
  // persist them.
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    const std::int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    if (x.dim(1) != c_) throw ContractError("batchnorm channel mismatch");
    const std::int64_t m = n * h * w;
    Tensor<T> y(x.shape());
    if (training) {
      trained_mode_ = true;
      m_ = m;
      xhat_ = Tensor<T>(x.shape());
      invstd_.assign(static_cast<std::size_t>(c_), 0.0);
      for (std::int64_t c = 0; c < c_; ++c) {
        double sum = 0.0, sq = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
          const T* src = x.data() + ((i * c_ + c) * h) * w;
          for (std::int64_t j = 0; j < h * w; ++j) {
            const double v = static_cast<double>(src[j]);
            sum += v;
            sq += v * v;
          }
        }
        const double mu = sum / static_cast<double>(m);
        const double var = std::max(0.0, sq / static_cast<double>(m) - mu * mu);
        const double inv = 1.0 / std::sqrt(var + eps_);
        invstd_[static_cast<std::size_t>(c)] = inv;
        const double g = static_cast<double>(gamma_[c]);
        const double b = static_cast<double>(beta_[c]);
        for (std::int64_t i = 0; i < n; ++i) {
          const T* src = x.data() + ((i * c_ + c) * h) * w;
          T* xh = xhat_.data() + ((i * c_ + c) * h) * w;
          T* dst = y.data() + ((i * c_ + c) * h) * w;
          for (std::int64_t j = 0; j < h * w; ++j) {
            const double xn = (static_cast<double>(src[j]) - mu) * inv;
            xh[j] = static_cast<T>(xn);
            dst[j] = static_cast<T>(g * xn + b);
          }
        }
        const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1)
                                      : var;
        running_mean_[c] =
            static_cast<T>((1.0 - momentum_) * static_cast<double>(running_mean_[c]) + momentum_ * mu);
        running_var_[c] = static_cast<T>((1.0 - momentum_) * static_cast<double>(running_var_[c]) +
                                         momentum_ * unbiased);
      }
    } else {
      trained_mode_ = false;
      for (std::int64_t c = 0; c < c_; ++c) {
        const double mu = static_cast<double>(running_mean_[c]);
        const double inv = 1.0 / std::sqrt(static_cast<double>(running_var_[c]) + eps_);
        const double g = static_cast<double>(gamma_[c]);
        const double b = static_cast<double>(beta_[c]);
        for (std::int64_t i = 0; i < n; ++i) {
          const T* src = x.data() + ((i * c_ + c) * h) * w;
          T* dst = y.data() + ((i * c_ + c) * h) * w;
          for (std::int64_t j = 0; j < h * w; ++j) {
            dst[j] = static_cast<T>(g * ((static_cast<double>(src[j]) - mu) * inv) + b);
          }
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    if (!trained_mode_) {
      throw ContractError("batchnorm backward requires a training-mode forward");
    }
    const std::int64_t n = grad_out.dim(0), h = grad_out.dim(2), w = grad_out.dim(3);
    Tensor<T> grad_in(grad_out.shape());
    const double md = static_cast<double>(m_);
    for (std::int64_t c = 0; c < c_; ++c) {
      double dbeta = 0.0, dgamma = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const T* gy = grad_out.data() + ((i * c_ + c) * h) * w;
        const T* xh = xhat_.data() + ((i * c_ + c) * h) * w;
        for (std::int64_t j = 0; j < h * w; ++j) {
          dbeta += static_cast<double>(gy[j]);
          dgamma += static_cast<double>(gy[j]) * static_cast<double>(xh[j]);
        }
      }
      beta_grad_[c] += static_cast<T>(dbeta);
      gamma_grad_[c] += static_cast<T>(dgamma);
      const double scale = static_cast<double>(gamma_[c]) * invstd_[static_cast<std::size_t>(c)] / md;
      for (std::int64_t i = 0; i < n; ++i) {
        const T* gy = grad_out.data() + ((i * c_ + c) * h) * w;
        const T* xh = xhat_.data() + ((i * c_ + c) * h) * w;
        T* gx = grad_in.data() + ((i * c_ + c) * h) * w;
        for (std::int64_t j = 0; j < h * w; ++j) {
          gx[j] = static_cast<T>(scale * (md * static_cast<double>(gy[j]) - dbeta -
                                          static_cast<double>(xh[j]) * dgamma));
        }
      }
    }
    return grad_in;
  }

  void release_cache() { xhat_ = Tensor<T>(); }

 private:
  std::int64_t c_ = 0;
  double momentum_ = 0.1, eps_ = 1e-5;
  Tensor<T> gamma_, beta_, gamma_grad_, beta_grad_;
  Tensor<T> running_mean_, running_var_;
  Tensor<T> xhat_;
  std::vector<double> invstd_;
  std::int64_t m_ = 0;
  bool trained_mode_ = false;
};

// ELU with alpha = 1; derivative recovered from the cached output.
template <typename T>
class Elu {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    out_ = Tensor<T>(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      const T v = x[i];
      out_[i] = v > T(0) ? v : static_cast<T>(std::expm1(static_cast<double>(v)));
    }
    return out_;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    Tensor<T> grad_in(grad_out.shape());
    for (std::int64_t i = 0; i < grad_out.numel(); ++i) {
      const T y = out_[i];
      grad_in[i] = grad_out[i] * (y > T(0) ? T(1) : y + T(1));
    }
    return grad_in;
  }

  void release_cache() { out_ = Tensor<T>(); }

 private:
  Tensor<T> out_;
};

template <typename T>
class Relu {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    out_ = Tensor<T>(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) out_[i] = x[i] > T(0) ? x[i] : T(0);
    return out_;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    Tensor<T> grad_in(grad_out.shape());
    for (std::int64_t i = 0; i < grad_out.numel(); ++i)
      grad_in[i] = out_[i] > T(0) ? grad_out[i] : T(0);
    return grad_in;
  }

  void release_cache() { out_ = Tensor<T>(); }

 private:
  Tensor<T> out_;
};

template <typename T>
class Sigmoid {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    out_ = Tensor<T>(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i)
      out_[i] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x[i]))));
    return out_;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    Tensor<T> grad_in(grad_out.shape());
    for (std::int64_t i = 0; i < grad_out.numel(); ++i) {
      const T y = out_[i];
      grad_in[i] = grad_out[i] * y * (T(1) - y);
    }
    return grad_in;
  }

  void release_cache() { out_ = Tensor<T>(); }

 private:
  Tensor<T> out_;
};

// 2x2 max pooling, stride 2. Gradient routes to the first maximum in scan
// order, which keeps ties deterministic.
template <typename T>
class MaxPool2 {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) throw ContractError("maxpool input side must be even");
    in_shape_ = x.shape();
    Tensor<T> y({n, c, h / 2, w / 2});
    argmax_.assign(static_cast<std::size_t>(y.numel()), 0);
    std::int64_t o = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T* plane = x.data() + (i * c + ch) * h * w;
        for (std::int64_t oy = 0; oy < h / 2; ++oy) {
          for (std::int64_t ox = 0; ox < w / 2; ++ox, ++o) {
            std::int64_t best = (2 * oy) * w + 2 * ox;
            T bv = plane[best];
            for (const std::int64_t cand :
                 {(2 * oy) * w + 2 * ox + 1, (2 * oy + 1) * w + 2 * ox, (2 * oy + 1) * w + 2 * ox + 1}) {
              if (plane[cand] > bv) {
                bv = plane[cand];
                best = cand;
              }
            }
            y[o] = bv;
            argmax_[static_cast<std::size_t>(o)] = (i * c + ch) * h * w + best;
          }
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    Tensor<T> grad_in(in_shape_);
    for (std::int64_t o = 0; o < grad_out.numel(); ++o) {
      grad_in[argmax_[static_cast<std::size_t>(o)]] += grad_out[o];
    }
    return grad_in;
  }

 private:
  std::vector<std::int64_t> in_shape_;
  std::vector<std::int64_t> argmax_;
};

// Nearest-neighbour 2x upsampling.
template <typename T>
class UpsampleNearest2 {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    in_shape_ = x.shape();
    Tensor<T> y({n, c, 2 * h, 2 * w});
    for (std::int64_t i = 0; i < n * c; ++i) {
      const T* src = x.data() + i * h * w;
      T* dst = y.data() + i * 4 * h * w;
      for (std::int64_t yy = 0; yy < h; ++yy) {
        for (std::int64_t xx = 0; xx < w; ++xx) {
          const T v = src[yy * w + xx];
          const std::int64_t base = (2 * yy) * (2 * w) + 2 * xx;
          dst[base] = v;
          dst[base + 1] = v;
          dst[base + 2 * w] = v;
          dst[base + 2 * w + 1] = v;
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    Tensor<T> grad_in(in_shape_);
    const std::int64_t h = in_shape_[2], w = in_shape_[3];
    for (std::int64_t i = 0; i < in_shape_[0] * in_shape_[1]; ++i) {
      const T* src = grad_out.data() + i * 4 * h * w;
      T* dst = grad_in.data() + i * h * w;
      for (std::int64_t yy = 0; yy < h; ++yy) {
        for (std::int64_t xx = 0; xx < w; ++xx) {
          const std::int64_t base = (2 * yy) * (2 * w) + 2 * xx;
          dst[yy * w + xx] = src[base] + src[base + 1] + src[base + 2 * w] + src[base + 2 * w + 1];
        }
      }
    }
    return grad_in;
  }

 private:
  std::vector<std::int64_t> in_shape_;
};

}  // namespace dermaudit::nn
