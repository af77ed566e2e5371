#ifndef DYNGEST_OPS_HPP
#define DYNGEST_OPS_HPP

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <vector>

#include "dyngest/errors.hpp"
#include "dyngest/flops.hpp"
#include "dyngest/tensor.hpp"

namespace dyngest {

using Triple = std::array<std::size_t, 3>;

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

inline std::size_t conv_out_dim(std::size_t d, std::size_t k, std::size_t s,
                                std::size_t p) {
  return (d + 2 * p - k) / s + 1;
}

namespace detail {

// im2col for one sample: col is row-major K x cells, K = C_in*kt*kh*kw,
// cells ordered (t_o, h_o, w_o) row-major.
template <typename T>
void im2col3d(const T* in, std::size_t c_in, std::size_t ti, std::size_t hi,
              std::size_t wi, const Triple& k, const Triple& s, const Triple& p,
              std::size_t to, std::size_t ho, std::size_t wo, T* col) {
  const std::size_t cells = to * ho * wo;
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t kt = 0; kt < k[0]; ++kt) {
      for (std::size_t kh = 0; kh < k[1]; ++kh) {
        for (std::size_t kw = 0; kw < k[2]; ++kw) {
          const std::size_t row = ((c * k[0] + kt) * k[1] + kh) * k[2] + kw;
          T* dst = col + row * cells;
          for (std::size_t t = 0; t < to; ++t) {
            const std::ptrdiff_t src_t =
                static_cast<std::ptrdiff_t>(t * s[0] + kt) -
                static_cast<std::ptrdiff_t>(p[0]);
            const bool t_ok = src_t >= 0 && src_t < static_cast<std::ptrdiff_t>(ti);
            for (std::size_t h = 0; h < ho; ++h) {
              const std::ptrdiff_t src_h =
                  static_cast<std::ptrdiff_t>(h * s[1] + kh) -
                  static_cast<std::ptrdiff_t>(p[1]);
              const bool h_ok =
                  t_ok && src_h >= 0 && src_h < static_cast<std::ptrdiff_t>(hi);
              if (!h_ok) {
                std::fill(dst, dst + wo, T(0));
                dst += wo;
                continue;
              }
              const T* src_row = in + ((c * ti + src_t) * hi + src_h) * wi;
              for (std::size_t w = 0; w < wo; ++w) {
                const std::ptrdiff_t src_w =
                    static_cast<std::ptrdiff_t>(w * s[2] + kw) -
                    static_cast<std::ptrdiff_t>(p[2]);
                dst[w] = (src_w >= 0 && src_w < static_cast<std::ptrdiff_t>(wi))
                             ? src_row[src_w]
                             : T(0);
              }
              dst += wo;
            }
          }
        }
      }
    }
  }
}

// Transpose of im2col3d: scatter-adds column-form gradients back to the input.
template <typename T>
void col2im3d(const T* col, std::size_t c_in, std::size_t ti, std::size_t hi,
              std::size_t wi, const Triple& k, const Triple& s, const Triple& p,
              std::size_t to, std::size_t ho, std::size_t wo, T* in_grad) {
  const std::size_t cells = to * ho * wo;
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t kt = 0; kt < k[0]; ++kt) {
      for (std::size_t kh = 0; kh < k[1]; ++kh) {
        for (std::size_t kw = 0; kw < k[2]; ++kw) {
          const std::size_t row = ((c * k[0] + kt) * k[1] + kh) * k[2] + kw;
          const T* src = col + row * cells;
          for (std::size_t t = 0; t < to; ++t) {
            const std::ptrdiff_t dst_t =
                static_cast<std::ptrdiff_t>(t * s[0] + kt) -
                static_cast<std::ptrdiff_t>(p[0]);
            if (dst_t < 0 || dst_t >= static_cast<std::ptrdiff_t>(ti)) {
              src += ho * wo;
              continue;
            }
            for (std::size_t h = 0; h < ho; ++h) {
              const std::ptrdiff_t dst_h =
                  static_cast<std::ptrdiff_t>(h * s[1] + kh) -
                  static_cast<std::ptrdiff_t>(p[1]);
              if (dst_h < 0 || dst_h >= static_cast<std::ptrdiff_t>(hi)) {
                src += wo;
                continue;
              }
              T* dst_row = in_grad + ((c * ti + dst_t) * hi + dst_h) * wi;
              for (std::size_t w = 0; w < wo; ++w) {
                const std::ptrdiff_t dst_w =
                    static_cast<std::ptrdiff_t>(w * s[2] + kw) -
                    static_cast<std::ptrdiff_t>(p[2]);
                if (dst_w >= 0 && dst_w < static_cast<std::ptrdiff_t>(wi))
                  dst_row[dst_w] += src[w];
              }
              src += wo;
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// 3D convolution, zero padding, output dim floor((D+2p-k)/s)+1.
// Records N*C_out*cells*C_in*k^3 MACs into the active counter.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, const Triple& stride, const Triple& padding) {
  if (input.rank() != 5)
    throw ConfigError("conv3d expects rank-5 input, got " + shape_str(input.shape()));
  if (weight.rank() != 5)
    throw ConfigError("conv3d expects rank-5 weight, got " + shape_str(weight.shape()));
  const std::size_t n = input.dim(0), c_in = input.dim(1), ti = input.dim(2),
                    hi = input.dim(3), wi = input.dim(4);
  const std::size_t c_out = weight.dim(0);
  if (weight.dim(1) != c_in)
    throw ConfigError("conv3d channel mismatch: input C_in=" + std::to_string(c_in) +
                      ", weight C_in=" + std::to_string(weight.dim(1)));
  if (bias.rank() != 1 || bias.dim(0) != c_out)
    throw ConfigError("conv3d bias shape " + shape_str(bias.shape()) +
                      " does not match C_out=" + std::to_string(c_out));
  const Triple k{weight.dim(2), weight.dim(3), weight.dim(4)};
  const Triple in_dims{ti, hi, wi};
  for (int d = 0; d < 3; ++d) {
    if (stride[d] < 1) throw ConfigError("conv3d stride components must be >= 1");
    if (in_dims[d] + 2 * padding[d] < k[d])
      throw ConfigError("conv3d kernel dim " + std::to_string(k[d]) +
                        " exceeds padded extent of input dim " +
                        std::to_string(in_dims[d]) + " (axis " + std::to_string(d) + ")");
  }
  check_finite(input.data(), "conv3d input");

  const std::size_t to = conv_out_dim(ti, k[0], stride[0], padding[0]);
  const std::size_t ho = conv_out_dim(hi, k[1], stride[1], padding[1]);
  const std::size_t wo = conv_out_dim(wi, k[2], stride[2], padding[2]);
  const std::size_t cells = to * ho * wo;
  const std::size_t kk = c_in * k[0] * k[1] * k[2];

  auto cols = std::make_shared<std::vector<T>>(n * kk * cells);
  std::vector<T> out(n * c_out * cells);
  CMapRM<T> wmat(weight.data().data(), static_cast<Eigen::Index>(c_out),
                 static_cast<Eigen::Index>(kk));
  for (std::size_t s = 0; s < n; ++s) {
    T* col = cols->data() + s * kk * cells;
    detail::im2col3d(input.data().data() + s * c_in * ti * hi * wi, c_in, ti, hi, wi,
                     k, stride, padding, to, ho, wo, col);
    CMapRM<T> cmat(col, static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(cells));
    MapRM<T> omat(out.data() + s * c_out * cells, static_cast<Eigen::Index>(c_out),
                  static_cast<Eigen::Index>(cells));
    omat.noalias() = wmat * cmat;
    for (std::size_t c = 0; c < c_out; ++c)
      omat.row(static_cast<Eigen::Index>(c)).array() += bias.data()[c];
  }
  record_macs(static_cast<std::uint64_t>(n) * c_out * cells * kk);

  auto in_node = input, w_node = weight, b_node = bias;
  const Triple str = stride, pad = padding;
  return Tensor<T>::make_result(
      Shape{n, c_out, to, ho, wo}, std::move(out), {input, weight, bias},
      [in_node, w_node, b_node, cols, n, c_in, ti, hi, wi, c_out, to, ho, wo, k, str,
       pad, kk, cells](TensorNode<T>& self) mutable {
        CMapRM<T> wmat(w_node.data().data(), static_cast<Eigen::Index>(c_out),
                       static_cast<Eigen::Index>(kk));
        const bool need_in = in_node.requires_grad();
        const bool need_w = w_node.requires_grad();
        const bool need_b = b_node.requires_grad();
        if (need_in) in_node.node()->ensure_grad();
        if (need_w) w_node.node()->ensure_grad();
        if (need_b) b_node.node()->ensure_grad();
        std::vector<T> gcol(need_in ? kk * cells : 0);
        for (std::size_t s = 0; s < n; ++s) {
          CMapRM<T> gout(self.grad.data() + s * c_out * cells,
                         static_cast<Eigen::Index>(c_out),
                         static_cast<Eigen::Index>(cells));
          const T* col = cols->data() + s * kk * cells;
          if (need_w) {
            CMapRM<T> cmat(col, static_cast<Eigen::Index>(kk),
                           static_cast<Eigen::Index>(cells));
            MapRM<T> gw(w_node.node()->grad.data(), static_cast<Eigen::Index>(c_out),
                        static_cast<Eigen::Index>(kk));
            gw.noalias() += gout * cmat.transpose();
          }
          if (need_b) {
            // In-order scalar accumulation: Eigen's vectorized row reduction
            // peels depending on the heap address of the gradient buffer,
            // which would make results vary between allocations.
            const T* g = self.grad.data() + s * c_out * cells;
            for (std::size_t c = 0; c < c_out; ++c) {
              T acc = 0;
              for (std::size_t e = 0; e < cells; ++e) acc += g[c * cells + e];
              b_node.node()->grad[c] += acc;
            }
          }
          if (need_in) {
            MapRM<T> gc(gcol.data(), static_cast<Eigen::Index>(kk),
                        static_cast<Eigen::Index>(cells));
            gc.noalias() = wmat.transpose() * gout;
            detail::col2im3d(gcol.data(), c_in, ti, hi, wi, k, str, pad, to, ho, wo,
                             in_node.node()->grad.data() + s * c_in * ti * hi * wi);
          }
        }
        cols->clear();
        cols->shrink_to_fit();
      });
}

// Average pooling, no padding. Records N*C*cells*window MACs.
template <typename T>
Tensor<T> avgpool3d(const Tensor<T>& input, const Triple& kernel, const Triple& stride) {
  if (input.rank() != 5)
    throw ConfigError("avgpool3d expects rank-5 input, got " + shape_str(input.shape()));
  const std::size_t n = input.dim(0), c = input.dim(1), ti = input.dim(2),
                    hi = input.dim(3), wi = input.dim(4);
  const Triple in_dims{ti, hi, wi};
  for (int d = 0; d < 3; ++d) {
    if (stride[d] < 1) throw ConfigError("avgpool3d stride components must be >= 1");
    if (kernel[d] > in_dims[d])
      throw ConfigError("avgpool3d kernel dim " + std::to_string(kernel[d]) +
                        " larger than input dim " + std::to_string(in_dims[d]) +
                        " (axis " + std::to_string(d) + ")");
  }
  const std::size_t to = (ti - kernel[0]) / stride[0] + 1;
  const std::size_t ho = (hi - kernel[1]) / stride[1] + 1;
  const std::size_t wo = (wi - kernel[2]) / stride[2] + 1;
  const std::size_t window = kernel[0] * kernel[1] * kernel[2];
  const T inv = T(1) / static_cast<T>(window);

  std::vector<T> out(n * c * to * ho * wo);
  std::size_t oi = 0;
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* plane = input.data().data() + (s * c + ch) * ti * hi * wi;
      for (std::size_t t = 0; t < to; ++t)
        for (std::size_t h = 0; h < ho; ++h)
          for (std::size_t w = 0; w < wo; ++w) {
            T acc = T(0);
            for (std::size_t kt = 0; kt < kernel[0]; ++kt)
              for (std::size_t kh = 0; kh < kernel[1]; ++kh)
                for (std::size_t kw = 0; kw < kernel[2]; ++kw)
                  acc += plane[((t * stride[0] + kt) * hi + h * stride[1] + kh) * wi +
                               w * stride[2] + kw];
            out[oi++] = acc * inv;
          }
    }
  record_macs(static_cast<std::uint64_t>(n) * c * to * ho * wo * window);

  auto in_node = input;
  const Triple ker = kernel, str = stride;
  return Tensor<T>::make_result(
      Shape{n, c, to, ho, wo}, std::move(out), {input},
      [in_node, n, c, ti, hi, wi, to, ho, wo, ker, str, inv](TensorNode<T>& self) mutable {
        if (!in_node.requires_grad()) return;
        in_node.node()->ensure_grad();
        std::size_t oi = 0;
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t ch = 0; ch < c; ++ch) {
            T* plane = in_node.node()->grad.data() + (s * c + ch) * ti * hi * wi;
            for (std::size_t t = 0; t < to; ++t)
              for (std::size_t h = 0; h < ho; ++h)
                for (std::size_t w = 0; w < wo; ++w) {
                  const T g = self.grad[oi++] * inv;
                  for (std::size_t kt = 0; kt < ker[0]; ++kt)
                    for (std::size_t kh = 0; kh < ker[1]; ++kh)
                      for (std::size_t kw = 0; kw < ker[2]; ++kw)
                        plane[((t * str[0] + kt) * hi + h * str[1] + kh) * wi +
                              w * str[2] + kw] += g;
                }
          }
      });
}

// Mean over (T,H,W): [N,C,T,H,W] -> [N,C]. Records N*C*T*H*W MACs.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  if (input.rank() != 5)
    throw ConfigError("global_avg_pool expects rank-5 input, got " +
                      shape_str(input.shape()));
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t inner = input.dim(2) * input.dim(3) * input.dim(4);
  const T inv = T(1) / static_cast<T>(inner);
  std::vector<T> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc = T(0);
    const T* p = input.data().data() + i * inner;
    for (std::size_t j = 0; j < inner; ++j) acc += p[j];
    out[i] = acc * inv;
  }
  record_macs(static_cast<std::uint64_t>(n) * c * inner);
  auto in_node = input;
  return Tensor<T>::make_result(
      Shape{n, c}, std::move(out), {input},
      [in_node, n, c, inner, inv](TensorNode<T>& self) mutable {
        if (!in_node.requires_grad()) return;
        in_node.node()->ensure_grad();
        for (std::size_t i = 0; i < n * c; ++i) {
          const T g = self.grad[i] * inv;
          T* p = in_node.node()->grad.data() + i * inner;
          for (std::size_t j = 0; j < inner; ++j) p[j] += g;
        }
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  std::vector<T> out(input.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = input.data()[i] > T(0) ? input.data()[i] : T(0);
  auto in_node = input;
  return Tensor<T>::make_result(
      input.shape(), std::move(out), {input}, [in_node](TensorNode<T>& self) mutable {
        if (!in_node.requires_grad()) return;
        in_node.node()->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (in_node.data()[i] > T(0)) in_node.node()->grad[i] += self.grad[i];
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  std::vector<T> out(input.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T(1) / (T(1) + std::exp(-input.data()[i]));
  auto in_node = input;
  return Tensor<T>::make_result(
      input.shape(), std::move(out), {input}, [in_node](TensorNode<T>& self) mutable {
        if (!in_node.requires_grad()) return;
        in_node.node()->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const T y = self.value[i];
          in_node.node()->grad[i] += self.grad[i] * y * (T(1) - y);
        }
      });
}

// Affine layer: [N,F] x [O,F]^T + [O]. Records N*O*F MACs.
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (input.rank() != 2)
    throw ConfigError("linear expects rank-2 input, got " + shape_str(input.shape()));
  const std::size_t n = input.dim(0), f = input.dim(1);
  if (weight.rank() != 2 || weight.dim(1) != f)
    throw ConfigError("linear weight shape " + shape_str(weight.shape()) +
                      " does not match input features " + std::to_string(f));
  const std::size_t o = weight.dim(0);
  if (bias.rank() != 1 || bias.dim(0) != o)
    throw ConfigError("linear bias shape " + shape_str(bias.shape()) +
                      " does not match out features " + std::to_string(o));
  // Explicit in-order loops rather than a GEMM: these matrices are tiny,
  // and with a single output feature the vectorized path reduces in an
  // order that depends on buffer alignment, i.e. varies between
  // allocations.
  std::vector<T> out(n * o);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < o; ++c) {
      T acc = bias.data()[c];
      const T* xr = input.data().data() + r * f;
      const T* wr = weight.data().data() + c * f;
      for (std::size_t i = 0; i < f; ++i) acc += xr[i] * wr[i];
      out[r * o + c] = acc;
    }
  record_macs(static_cast<std::uint64_t>(n) * o * f);
  auto in_node = input, w_node = weight, b_node = bias;
  return Tensor<T>::make_result(
      Shape{n, o}, std::move(out), {input, weight, bias},
      [in_node, w_node, b_node, n, f, o](TensorNode<T>& self) mutable {
        if (in_node.requires_grad()) {
          in_node.node()->ensure_grad();
          T* gi = in_node.node()->grad.data();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < o; ++c) {
              const T gv = self.grad[r * o + c];
              const T* wr = w_node.data().data() + c * f;
              for (std::size_t i = 0; i < f; ++i) gi[r * f + i] += gv * wr[i];
            }
        }
        if (w_node.requires_grad()) {
          w_node.node()->ensure_grad();
          T* gw = w_node.node()->grad.data();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < o; ++c) {
              const T gv = self.grad[r * o + c];
              const T* xr = in_node.data().data() + r * f;
              for (std::size_t i = 0; i < f; ++i) gw[c * f + i] += gv * xr[i];
            }
        }
        if (b_node.requires_grad()) {
          b_node.node()->ensure_grad();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < o; ++c) b_node.node()->grad[c] += self.grad[r * o + c];
        }
      });
}

// Row-wise softmax on [N,K], numerically stable.
template <typename T>
Tensor<T> softmax(const Tensor<T>& input) {
  if (input.rank() != 2)
    throw ConfigError("softmax expects rank-2 input, got " + shape_str(input.shape()));
  const std::size_t n = input.dim(0), k = input.dim(1);
  std::vector<T> out(n * k);
  for (std::size_t r = 0; r < n; ++r) {
    const T* z = input.data().data() + r * k;
    T m = z[0];
    for (std::size_t i = 1; i < k; ++i) m = std::max(m, z[i]);
    T sum = T(0);
    for (std::size_t i = 0; i < k; ++i) {
      out[r * k + i] = std::exp(z[i] - m);
      sum += out[r * k + i];
    }
    const T inv = T(1) / sum;
    for (std::size_t i = 0; i < k; ++i) out[r * k + i] *= inv;
  }
  auto in_node = input;
  return Tensor<T>::make_result(
      Shape{n, k}, std::move(out), {input}, [in_node, n, k](TensorNode<T>& self) mutable {
        if (!in_node.requires_grad()) return;
        in_node.node()->ensure_grad();
        for (std::size_t r = 0; r < n; ++r) {
          const T* y = self.value.data() + r * k;
          const T* g = self.grad.data() + r * k;
          T dot = T(0);
          for (std::size_t i = 0; i < k; ++i) dot += y[i] * g[i];
          T* gi = in_node.node()->grad.data() + r * k;
          for (std::size_t i = 0; i < k; ++i) gi[i] += y[i] * (g[i] - dot);
        }
      });
}

// Mean over rows of -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  if (logits.rank() != 2)
    throw ConfigError("cross_entropy expects rank-2 logits, got " +
                      shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (targets.size() != n)
    throw ConfigError("cross_entropy got " + std::to_string(targets.size()) +
                      " targets for " + std::to_string(n) + " rows");
  for (auto t : targets)
    if (t >= k)
      throw ConfigError("cross_entropy target " + std::to_string(t) +
                        " out of range [0," + std::to_string(k) + ")");
  T loss = T(0);
  for (std::size_t r = 0; r < n; ++r) {
    const T* z = logits.data().data() + r * k;
    T m = z[0];
    for (std::size_t i = 1; i < k; ++i) m = std::max(m, z[i]);
    T sum = T(0);
    for (std::size_t i = 0; i < k; ++i) sum += std::exp(z[i] - m);
    loss += std::log(sum) + m - z[targets[r]];
  }
  loss /= static_cast<T>(n);
  auto z_node = logits;
  auto tg = targets;
  return Tensor<T>::make_result(
      Shape{}, {loss}, {logits}, [z_node, tg, n, k](TensorNode<T>& self) mutable {
        if (!z_node.requires_grad()) return;
        z_node.node()->ensure_grad();
        const T g = self.grad[0] / static_cast<T>(n);
        for (std::size_t r = 0; r < n; ++r) {
          const T* z = z_node.data().data() + r * k;
          T m = z[0];
          for (std::size_t i = 1; i < k; ++i) m = std::max(m, z[i]);
          T sum = T(0);
          for (std::size_t i = 0; i < k; ++i) sum += std::exp(z[i] - m);
          T* gz = z_node.node()->grad.data() + r * k;
          for (std::size_t i = 0; i < k; ++i) {
            T p = std::exp(z[i] - m) / sum;
            gz[i] += g * (p - (i == tg[r] ? T(1) : T(0)));
          }
        }
      });
}

constexpr double kBceClamp = 1e-7;

// Sum over elements of -[y ln s + (1-y) ln(1-s)], scores clamped to
// [1e-7, 1-1e-7]. Gradient is zero in the clamped region.
template <typename T>
Tensor<T> binary_cross_entropy_sum(const Tensor<T>& scores, const std::vector<T>& labels) {
  if (scores.numel() != labels.size())
    throw ConfigError("binary_cross_entropy got " + std::to_string(labels.size()) +
                      " labels for " + std::to_string(scores.numel()) + " scores");
  const T lo = static_cast<T>(kBceClamp), hi = T(1) - static_cast<T>(kBceClamp);
  T loss = T(0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const T s = std::clamp(scores.data()[i], lo, hi);
    loss -= labels[i] * std::log(s) + (T(1) - labels[i]) * std::log(T(1) - s);
  }
  auto s_node = scores;
  auto y = labels;
  return Tensor<T>::make_result(
      Shape{}, {loss}, {scores}, [s_node, y, lo, hi](TensorNode<T>& self) mutable {
        if (!s_node.requires_grad()) return;
        s_node.node()->ensure_grad();
        const T g = self.grad[0];
        for (std::size_t i = 0; i < y.size(); ++i) {
          const T raw = s_node.data()[i];
          if (raw < lo || raw > hi) continue;
          s_node.node()->grad[i] += g * (raw - y[i]) / (raw * (T(1) - raw));
        }
      });
}

template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& score, T label) {
  return binary_cross_entropy_sum(score, std::vector<T>{label});
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ConfigError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a, bn = b;
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<T>& self) mutable {
        for (auto* t : {&an, &bn}) {
          if (!t->requires_grad()) continue;
          t->node()->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            t->node()->grad[i] += self.grad[i];
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  auto an = a;
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a}, [an, c](TensorNode<T>& self) mutable {
        if (!an.requires_grad()) return;
        an.node()->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an.node()->grad[i] += self.grad[i] * c;
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ConfigError("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a, bn = b;
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<T>& self) mutable {
        if (an.requires_grad()) {
          an.node()->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            an.node()->grad[i] += self.grad[i] * bn.data()[i];
        }
        if (bn.requires_grad()) {
          bn.node()->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            bn.node()->grad[i] += self.grad[i] * an.data()[i];
        }
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (const T v : a.data()) acc += v;
  auto an = a;
  return Tensor<T>::make_result(Shape{}, {acc}, {a}, [an](TensorNode<T>& self) mutable {
    if (!an.requires_grad()) return;
    an.node()->ensure_grad();
    for (auto& g : an.node()->grad) g += self.grad[0];
  });
}

// Copies a rank-5 sub-block; backward scatter-adds into the source, so
// gradients flow through patch views back to the feature map.
template <typename T>
Tensor<T> slice5d(const Tensor<T>& input, const std::array<std::size_t, 5>& off,
                  const std::array<std::size_t, 5>& size) {
  if (input.rank() != 5)
    throw ConfigError("slice5d expects rank-5 input, got " + shape_str(input.shape()));
  for (int d = 0; d < 5; ++d)
    if (off[d] + size[d] > input.dim(d))
      throw ConfigError("slice5d out of bounds on axis " + std::to_string(d));
  const auto& sh = input.shape();
  std::array<std::size_t, 5> stridein;
  stridein[4] = 1;
  for (int d = 3; d >= 0; --d) stridein[d] = stridein[d + 1] * sh[d + 1];
  std::vector<T> out(size[0] * size[1] * size[2] * size[3] * size[4]);
  std::size_t oi = 0;
  for (std::size_t a = 0; a < size[0]; ++a)
    for (std::size_t b = 0; b < size[1]; ++b)
      for (std::size_t c = 0; c < size[2]; ++c)
        for (std::size_t d = 0; d < size[3]; ++d) {
          const T* src = input.data().data() + (off[0] + a) * stridein[0] +
                         (off[1] + b) * stridein[1] + (off[2] + c) * stridein[2] +
                         (off[3] + d) * stridein[3] + off[4];
          std::copy(src, src + size[4], out.data() + oi);
          oi += size[4];
        }
  auto in_node = input;
  return Tensor<T>::make_result(
      Shape{size[0], size[1], size[2], size[3], size[4]}, std::move(out), {input},
      [in_node, off, size, stridein](TensorNode<T>& self) mutable {
        if (!in_node.requires_grad()) return;
        in_node.node()->ensure_grad();
        std::size_t oi = 0;
        for (std::size_t a = 0; a < size[0]; ++a)
          for (std::size_t b = 0; b < size[1]; ++b)
            for (std::size_t c = 0; c < size[2]; ++c)
              for (std::size_t d = 0; d < size[3]; ++d) {
                T* dst = in_node.node()->grad.data() + (off[0] + a) * stridein[0] +
                         (off[1] + b) * stridein[1] + (off[2] + c) * stridein[2] +
                         (off[3] + d) * stridein[3] + off[4];
                for (std::size_t e = 0; e < size[4]; ++e) dst[e] += self.grad[oi++];
              }
      });
}

// Concatenation along dim 0; inputs must agree on trailing dims.
template <typename T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ConfigError("concat0 of zero tensors");
  Shape sh = parts[0].shape();
  std::size_t total0 = 0;
  for (const auto& p : parts) {
    if (p.rank() != sh.size())
      throw ConfigError("concat0 rank mismatch");
    for (std::size_t d = 1; d < sh.size(); ++d)
      if (p.dim(d) != sh[d])
        throw ConfigError("concat0 trailing-dim mismatch: " + shape_str(p.shape()) +
                          " vs " + shape_str(sh));
    total0 += p.dim(0);
  }
  sh[0] = total0;
  std::vector<T> out;
  out.reserve(shape_numel(sh));
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  auto ps = parts;
  return Tensor<T>::make_result(
      std::move(sh), std::move(out), parts, [ps](TensorNode<T>& self) mutable {
        std::size_t base = 0;
        for (auto& p : ps) {
          const std::size_t n = p.numel();
          if (p.requires_grad()) {
            p.node()->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
              p.node()->grad[i] += self.grad[base + i];
          }
          base += n;
        }
      });
}

}  // namespace dyngest

#endif  // DYNGEST_OPS_HPP
