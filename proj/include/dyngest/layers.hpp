#ifndef DYNGEST_LAYERS_HPP
#define DYNGEST_LAYERS_HPP

#include <cmath>
#include <string>
#include <vector>

#include "dyngest/errors.hpp"
#include "dyngest/ops.hpp"
#include "dyngest/rng.hpp"
#include "dyngest/tensor.hpp"

namespace dyngest {

// A named trainable tensor plus its SGD momentum buffer.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  std::vector<T> momentum;

  Parameter(std::string n, Tensor<T> t) : name(std::move(n)), tensor(std::move(t)) {
    tensor.set_requires_grad(true);
    momentum.assign(tensor.numel(), T(0));
  }
};

// Named non-trainable state (batchnorm running stats and counters).
template <typename T>
struct Buffer {
  std::string name;
  std::vector<T>* data;
  Shape shape;
};

// v <- momentum*v + grad ; p <- p - lr*v
template <typename T>
void sgd_momentum_step(std::vector<Parameter<T>*>& params, T lr, T momentum) {
  if (lr <= T(0)) throw ConfigError("sgd_momentum_step: lr must be positive");
  if (momentum < T(0) || momentum >= T(1))
    throw ConfigError("sgd_momentum_step: momentum must be in [0,1)");
  std::string missing;
  for (auto* p : params)
    if (!p->tensor.has_grad()) missing += (missing.empty() ? "" : ", ") + p->name;
  if (!missing.empty())
    throw ConfigError("sgd_momentum_step: missing gradients for " + missing);
  for (auto* p : params) {
    auto& g = p->tensor.grad();
    auto& v = p->momentum;
    auto& w = p->tensor.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum * v[i] + g[i];
      w[i] -= lr * v[i];
    }
  }
}

template <typename T>
void zero_grads(std::vector<Parameter<T>*>& params) {
  for (auto* p : params) p->tensor.zero_grad();
}

enum class BnMode { Train, Eval };

template <typename T>
class Conv3d {
public:
  Conv3d() = default;
  Conv3d(std::string name, std::size_t c_in, std::size_t c_out, Triple kernel,
         Triple stride, Triple padding, Xoshiro256& rng)
      : stride_(stride), padding_(padding) {
    const std::size_t fan_in = c_in * kernel[0] * kernel[1] * kernel[2];
    const T std_dev = std::sqrt(T(2) / static_cast<T>(fan_in));
    std::vector<T> w(c_out * fan_in);
    for (auto& v : w) v = static_cast<T>(rng.next_normal()) * std_dev;
    weight_ = std::make_unique<Parameter<T>>(
        name + ".weight",
        Tensor<T>(Shape{c_out, c_in, kernel[0], kernel[1], kernel[2]}, std::move(w)));
    bias_ = std::make_unique<Parameter<T>>(name + ".bias",
                                           Tensor<T>::zeros(Shape{c_out}));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return conv3d(x, weight_->tensor, bias_->tensor, stride_, padding_);
  }

  void collect(std::vector<Parameter<T>*>& params) {
    params.push_back(weight_.get());
    params.push_back(bias_.get());
  }

private:
  std::unique_ptr<Parameter<T>> weight_, bias_;
  Triple stride_{1, 1, 1}, padding_{0, 0, 0};
};

// Per-channel batch normalization over (N,T,H,W). eps 1e-5, running-stat
// momentum 0.1, biased batch variance.
template <typename T>
class BatchNorm3d {
public:
  static constexpr T kEps = static_cast<T>(1e-5);
  static constexpr T kMomentum = static_cast<T>(0.1);

  BatchNorm3d() = default;
  BatchNorm3d(std::string name, std::size_t channels) : name_(std::move(name)) {
    gamma_ = std::make_unique<Parameter<T>>(name_ + ".gamma",
                                            Tensor<T>::full(Shape{channels}, T(1)));
    beta_ = std::make_unique<Parameter<T>>(name_ + ".beta",
                                           Tensor<T>::zeros(Shape{channels}));
    running_mean_.assign(channels, T(0));
    running_var_.assign(channels, T(1));
    batches_tracked_.assign(1, T(0));
  }

  Tensor<T> forward(const Tensor<T>& x, BnMode mode, bool update_stats = true) {
    if (x.rank() != 5)
      throw ConfigError("batchnorm3d expects rank-5 input, got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1);
    const std::size_t inner = x.dim(2) * x.dim(3) * x.dim(4);
    if (c != running_mean_.size())
      throw ConfigError("batchnorm3d channel mismatch: input C=" + std::to_string(c) +
                        ", layer C=" + std::to_string(running_mean_.size()));
    if (mode == BnMode::Train && n * inner < 2)
      throw ConfigError("batchnorm3d train mode needs at least 2 values per channel");
    if (mode == BnMode::Eval && batches_tracked_[0] == T(0))
      throw ConfigError("batchnorm3d \"" + name_ + "\": uninitialized running statistics");

    std::vector<T> mean(c), inv_std(c);
    if (mode == BnMode::Train) {
      const T inv_m = T(1) / static_cast<T>(n * inner);
      for (std::size_t ch = 0; ch < c; ++ch) {
        T acc = T(0);
        for (std::size_t s = 0; s < n; ++s) {
          const T* p = x.data().data() + (s * c + ch) * inner;
          for (std::size_t i = 0; i < inner; ++i) acc += p[i];
        }
        mean[ch] = acc * inv_m;
        T var = T(0);
        for (std::size_t s = 0; s < n; ++s) {
          const T* p = x.data().data() + (s * c + ch) * inner;
          for (std::size_t i = 0; i < inner; ++i) {
            const T d = p[i] - mean[ch];
            var += d * d;
          }
        }
        var *= inv_m;
        inv_std[ch] = T(1) / std::sqrt(var + kEps);
        if (update_stats) {
          running_mean_[ch] = (T(1) - kMomentum) * running_mean_[ch] + kMomentum * mean[ch];
          running_var_[ch] = (T(1) - kMomentum) * running_var_[ch] + kMomentum * var;
        }
      }
      if (update_stats) batches_tracked_[0] += T(1);
    } else {
      for (std::size_t ch = 0; ch < c; ++ch) {
        mean[ch] = running_mean_[ch];
        inv_std[ch] = T(1) / std::sqrt(running_var_[ch] + kEps);
      }
    }

    std::vector<T> out(x.numel());
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* p = x.data().data() + (s * c + ch) * inner;
        T* xh = xhat->data() + (s * c + ch) * inner;
        T* o = out.data() + (s * c + ch) * inner;
        const T g = gamma_->tensor.data()[ch], b = beta_->tensor.data()[ch];
        for (std::size_t i = 0; i < inner; ++i) {
          xh[i] = (p[i] - mean[ch]) * inv_std[ch];
          o[i] = g * xh[i] + b;
        }
      }

    auto x_node = x;
    auto gamma_node = gamma_->tensor;
    auto beta_node = beta_->tensor;
    const bool train = mode == BnMode::Train;
    auto inv_std_v = std::make_shared<std::vector<T>>(std::move(inv_std));
    return Tensor<T>::make_result(
        x.shape(), std::move(out), {x, gamma_node, beta_node},
        [x_node, gamma_node, beta_node, xhat, inv_std_v, n, c, inner,
         train](TensorNode<T>& self) mutable {
          const T inv_m = T(1) / static_cast<T>(n * inner);
          std::vector<T> sum_dy(c, T(0)), sum_dy_xhat(c, T(0));
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const T* dy = self.grad.data() + (s * c + ch) * inner;
              const T* xh = xhat->data() + (s * c + ch) * inner;
              T a = T(0), b = T(0);
              for (std::size_t i = 0; i < inner; ++i) {
                a += dy[i];
                b += dy[i] * xh[i];
              }
              sum_dy[ch] += a;
              sum_dy_xhat[ch] += b;
            }
          if (gamma_node.requires_grad()) {
            gamma_node.node()->ensure_grad();
            for (std::size_t ch = 0; ch < c; ++ch)
              gamma_node.node()->grad[ch] += sum_dy_xhat[ch];
          }
          if (beta_node.requires_grad()) {
            beta_node.node()->ensure_grad();
            for (std::size_t ch = 0; ch < c; ++ch)
              beta_node.node()->grad[ch] += sum_dy[ch];
          }
          if (x_node.requires_grad()) {
            x_node.node()->ensure_grad();
            for (std::size_t s = 0; s < n; ++s)
              for (std::size_t ch = 0; ch < c; ++ch) {
                const T* dy = self.grad.data() + (s * c + ch) * inner;
                const T* xh = xhat->data() + (s * c + ch) * inner;
                T* gx = x_node.node()->grad.data() + (s * c + ch) * inner;
                const T scale = gamma_node.data()[ch] * (*inv_std_v)[ch];
                if (train) {
                  const T mdy = sum_dy[ch] * inv_m;
                  const T mdyx = sum_dy_xhat[ch] * inv_m;
                  for (std::size_t i = 0; i < inner; ++i)
                    gx[i] += scale * (dy[i] - mdy - xh[i] * mdyx);
                } else {
                  for (std::size_t i = 0; i < inner; ++i) gx[i] += scale * dy[i];
                }
              }
          }
        });
  }

  void collect(std::vector<Parameter<T>*>& params) {
    params.push_back(gamma_.get());
    params.push_back(beta_.get());
  }

  void collect_buffers(std::vector<Buffer<T>>& bufs) {
    bufs.push_back({name_ + ".running_mean", &running_mean_, Shape{running_mean_.size()}});
    bufs.push_back({name_ + ".running_var", &running_var_, Shape{running_var_.size()}});
    bufs.push_back({name_ + ".batches_tracked", &batches_tracked_, Shape{1}});
  }

  bool initialized() const { return batches_tracked_[0] != T(0); }

private:
  std::string name_;
  std::unique_ptr<Parameter<T>> gamma_, beta_;
  std::vector<T> running_mean_, running_var_;
  std::vector<T> batches_tracked_;  // stored as a tensor so checkpoints carry it
};

template <typename T>
class Linear {
public:
  Linear() = default;
  Linear(std::string name, std::size_t in_f, std::size_t out_f, Xoshiro256& rng,
         bool zero_init = false) {
    std::vector<T> w(out_f * in_f, T(0));
    if (!zero_init) {
      const T std_dev = std::sqrt(T(2) / static_cast<T>(in_f));
      for (auto& v : w) v = static_cast<T>(rng.next_normal()) * std_dev;
    }
    weight_ = std::make_unique<Parameter<T>>(name + ".weight",
                                             Tensor<T>(Shape{out_f, in_f}, std::move(w)));
    bias_ = std::make_unique<Parameter<T>>(name + ".bias", Tensor<T>::zeros(Shape{out_f}));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return linear(x, weight_->tensor, bias_->tensor);
  }

  void collect(std::vector<Parameter<T>*>& params) {
    params.push_back(weight_.get());
    params.push_back(bias_.get());
  }

private:
  std::unique_ptr<Parameter<T>> weight_, bias_;
};

}  // namespace dyngest

#endif  // DYNGEST_LAYERS_HPP
