#pragma once

// Layer primitives on channels-first tensors: dilated convolution, pooling,
// dense layers, activations and the channel-wise helpers used by the
// squeeze-excite block and the stage recurrence.

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mrgan/tensor.hpp"

namespace mrgan {

enum class Padding { same_zero };

/// Dilated 2-D convolution with same-size zero padding over a [C,H,W] input.
/// `bias` may be an undefined tensor. Taps reaching outside the image read 0.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 int dilation = 1, Padding padding = Padding::same_zero) {
  (void)padding;
  require(dilation >= 1, ErrorCode::invalid_argument,
          "conv2d dilation must be >= 1, got " + std::to_string(dilation));
  require(input.rank() == 3, ErrorCode::shape_mismatch,
          "conv2d input must be [C,H,W], got " + shape_str(input.shape()));
  require(kernel.rank() == 4 && kernel.dim(2) == kernel.dim(3), ErrorCode::shape_mismatch,
          "conv2d kernel must be [Cout,Cin,k,k], got " + shape_str(kernel.shape()));
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  require(kernel.dim(1) == cin, ErrorCode::shape_mismatch,
          "conv2d kernel expects " + std::to_string(kernel.dim(1)) + " input channels, input has " +
              std::to_string(cin));
  if (bias.defined())
    require(bias.numel() == cout, ErrorCode::shape_mismatch, "conv2d bias length mismatch");

  const long half = static_cast<long>(k / 2);
  const long H = static_cast<long>(h), W = static_cast<long>(w);
  // Visits every (output pixel, input pixel) pair a tap connects, over the
  // rows/columns where the shifted read stays inside the image.
  auto for_tap = [=](long i, long j, auto&& body) {
    const long oy = (i - half) * dilation, ox = (j - half) * dilation;
    const long y0 = std::max(0L, -oy), y1 = std::min(H, H - oy);
    const long x0 = std::max(0L, -ox), x1 = std::min(W, W - ox);
    for (long y = y0; y < y1; ++y)
      for (long x = x0; x < x1; ++x) body(y * W + x, (y + oy) * W + (x + ox));
  };

  const auto in = input.data();
  const auto ker = kernel.data();
  const std::size_t plane = h * w;
  std::vector<T> out(cout * plane, T(0));
  for (std::size_t co = 0; co < cout; ++co) {
    T* dst = out.data() + co * plane;
    if (bias.defined()) std::fill(dst, dst + plane, bias[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* src = in.data() + ci * plane;
      for (long i = 0; i < static_cast<long>(k); ++i)
        for (long j = 0; j < static_cast<long>(k); ++j) {
          const T wv = ker[((co * cin + ci) * k + i) * k + j];
          for_tap(i, j, [&](long o, long s) { dst[o] += wv * src[s]; });
        }
    }
  }

  const bool has_bias = bias.defined();
  return detail::make_result<T>(
      Shape{cout, h, w}, std::move(out), {input, kernel, has_bias ? bias : kernel},
      [=](detail::Node<T>& self) {
        auto& pin = *self.parents[0];
        auto& pker = *self.parents[1];
        const T* g = self.grad.data();
        if (pin.requires_grad) {
          auto& gin = pin.grad_buffer();
          for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t ci = 0; ci < cin; ++ci)
              for (long i = 0; i < static_cast<long>(k); ++i)
                for (long j = 0; j < static_cast<long>(k); ++j) {
                  const T wv = pker.data[((co * cin + ci) * k + i) * k + j];
                  T* dst = gin.data() + ci * plane;
                  const T* go = g + co * plane;
                  for_tap(i, j, [&](long o, long s) { dst[s] += wv * go[o]; });
                }
        }
        if (pker.requires_grad) {
          auto& gk = pker.grad_buffer();
          for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t ci = 0; ci < cin; ++ci)
              for (long i = 0; i < static_cast<long>(k); ++i)
                for (long j = 0; j < static_cast<long>(k); ++j) {
                  const T* src = pin.data.data() + ci * plane;
                  const T* go = g + co * plane;
                  T acc = 0;
                  for_tap(i, j, [&](long o, long s) { acc += go[o] * src[s]; });
                  gk[((co * cin + ci) * k + i) * k + j] += acc;
                }
        }
        if (has_bias && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->grad_buffer();
          for (std::size_t co = 0; co < cout; ++co) {
            T acc = 0;
            for (std::size_t p = 0; p < plane; ++p) acc += g[co * plane + p];
            gb[co] += acc;
          }
        }
      });
}

/// 2x2 max pooling with stride 2. Ties send the gradient to the first cell
/// in row-major scan order.
template <class T>
Tensor<T> max_pool2d(const Tensor<T>& input) {
  require(input.rank() == 3, ErrorCode::shape_mismatch,
          "max_pool2d input must be [C,H,W], got " + shape_str(input.shape()));
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  require(h >= 2 && w >= 2, ErrorCode::shape_mismatch,
          "max_pool2d needs H,W >= 2, got " + shape_str(input.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  const auto in = input.data();
  std::vector<T> out(c * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = (ch * h + 2 * y) * w + 2 * x;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (ch * h + 2 * y + dy) * w + 2 * x + dx;
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (ch * oh + y) * ow + x;
        out[o] = in[best];
        argmax[o] = best;
        detail::record_branch(best);
      }
  return detail::make_result<T>(Shape{c, oh, ow}, std::move(out), {input},
                                [argmax = std::move(argmax)](detail::Node<T>& self) {
                                  auto& gp = self.parents[0]->grad_buffer();
                                  for (std::size_t o = 0; o < argmax.size(); ++o)
                                    gp[argmax[o]] += self.grad[o];
                                });
}

/// out = weight * flatten(input) + bias, weight is [M,N].
template <class T>
Tensor<T> fully_connected(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require(weight.rank() == 2, ErrorCode::shape_mismatch,
          "fully_connected weight must be [M,N], got " + shape_str(weight.shape()));
  const std::size_t m = weight.dim(0), n = weight.dim(1);
  require(input.numel() == n, ErrorCode::shape_mismatch,
          "fully_connected expects " + std::to_string(n) + " inputs, got " +
              std::to_string(input.numel()));
  require(bias.numel() == m, ErrorCode::shape_mismatch, "fully_connected bias length mismatch");
  const auto x = input.data();
  const auto wt = weight.data();
  std::vector<T> out(m);
  for (std::size_t r = 0; r < m; ++r) {
    T acc = bias[r];
    const T* row = wt.data() + r * n;
    for (std::size_t i = 0; i < n; ++i) acc += row[i] * x[i];
    out[r] = acc;
  }
  return detail::make_result<T>(Shape{m}, std::move(out), {input, weight, bias},
                                [m, n](detail::Node<T>& self) {
                                  auto& px = *self.parents[0];
                                  auto& pw = *self.parents[1];
                                  auto& pb = *self.parents[2];
                                  const auto& g = self.grad;
                                  if (px.requires_grad) {
                                    auto& gx = px.grad_buffer();
                                    for (std::size_t r = 0; r < m; ++r)
                                      for (std::size_t i = 0; i < n; ++i)
                                        gx[i] += g[r] * pw.data[r * n + i];
                                  }
                                  if (pw.requires_grad) {
                                    auto& gw = pw.grad_buffer();
                                    for (std::size_t r = 0; r < m; ++r)
                                      for (std::size_t i = 0; i < n; ++i)
                                        gw[r * n + i] += g[r] * px.data[i];
                                  }
                                  if (pb.requires_grad) {
                                    auto& gb = pb.grad_buffer();
                                    for (std::size_t r = 0; r < m; ++r) gb[r] += g[r];
                                  }
                                });
}

struct Activation {
  enum class Kind { relu, leaky_relu, tanh, sigmoid };
  Kind kind = Kind::relu;
  double alpha = 0.2;

  static Activation relu() { return {Kind::relu, 0.0}; }
  static Activation leaky(double alpha = 0.2) { return {Kind::leaky_relu, alpha}; }
  static Activation tanh() { return {Kind::tanh, 0.0}; }
  static Activation sigmoid() { return {Kind::sigmoid, 0.0}; }
};

template <class T>
T sigmoid_value(T x) {
  // Split form avoids overflow of exp for large |x|.
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
Tensor<T> activation(const Tensor<T>& input, Activation act) {
  if (detail::branch_sink() && (act.kind == Activation::Kind::relu || act.kind == Activation::Kind::leaky_relu))
    for (T x : input.data()) detail::record_branch(x > T(0));
  switch (act.kind) {
    case Activation::Kind::relu:
      return detail::unary(
          input, [](T x) { return x > T(0) ? x : T(0); },
          [](T x, T) { return x > T(0) ? T(1) : T(0); });
    case Activation::Kind::leaky_relu: {
      require(act.alpha > 0.0 && act.alpha < 1.0, ErrorCode::invalid_argument,
              "leaky_relu alpha must lie in (0,1)");
      const T a = static_cast<T>(act.alpha);
      return detail::unary(
          input, [a](T x) { return x > T(0) ? x : a * x; },
          [a](T x, T) { return x > T(0) ? T(1) : a; });
    }
    case Activation::Kind::tanh:
      return detail::unary(
          input, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
    case Activation::Kind::sigmoid:
      return detail::unary(
          input, [](T x) { return sigmoid_value(x); }, [](T, T y) { return y * (T(1) - y); });
  }
  return input;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) { return activation(x, Activation::relu()); }
template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, double alpha = 0.2) {
  return activation(x, Activation::leaky(alpha));
}
template <class T>
Tensor<T> tanh(const Tensor<T>& x) { return activation(x, Activation::tanh()); }
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) { return activation(x, Activation::sigmoid()); }

/// Per-channel spatial mean of a [C,H,W] tensor, giving [C].
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  require(input.rank() == 3 && input.dim(1) >= 1 && input.dim(2) >= 1, ErrorCode::shape_mismatch,
          "global_avg_pool input must be [C,H,W], got " + shape_str(input.shape()));
  const std::size_t c = input.dim(0), plane = input.dim(1) * input.dim(2);
  const auto in = input.data();
  std::vector<T> out(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T acc = 0;
    for (std::size_t p = 0; p < plane; ++p) acc += in[ch * plane + p];
    out[ch] = acc / static_cast<T>(plane);
  }
  return detail::make_result<T>(Shape{c}, std::move(out), {input}, [c, plane](detail::Node<T>& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T g = self.grad[ch] / static_cast<T>(plane);
      for (std::size_t p = 0; p < plane; ++p) gp[ch * plane + p] += g;
    }
  });
}

/// Multiplies channel c of a [C,H,W] tensor by gates[c].
template <class T>
Tensor<T> scale_channels(const Tensor<T>& input, const Tensor<T>& gates) {
  require(input.rank() == 3 && gates.numel() == input.dim(0), ErrorCode::shape_mismatch,
          "scale_channels: " + shape_str(input.shape()) + " vs gates " + shape_str(gates.shape()));
  const std::size_t c = input.dim(0), plane = input.dim(1) * input.dim(2);
  const auto in = input.data();
  const auto gv = gates.data();
  std::vector<T> out(in.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < plane; ++p) out[ch * plane + p] = in[ch * plane + p] * gv[ch];
  return detail::make_result<T>(input.shape(), std::move(out), {input, gates},
                                [c, plane](detail::Node<T>& self) {
                                  auto& px = *self.parents[0];
                                  auto& pg = *self.parents[1];
                                  if (px.requires_grad) {
                                    auto& gx = px.grad_buffer();
                                    for (std::size_t ch = 0; ch < c; ++ch)
                                      for (std::size_t p = 0; p < plane; ++p)
                                        gx[ch * plane + p] += self.grad[ch * plane + p] * pg.data[ch];
                                  }
                                  if (pg.requires_grad) {
                                    auto& gg = pg.grad_buffer();
                                    for (std::size_t ch = 0; ch < c; ++ch) {
                                      T acc = 0;
                                      for (std::size_t p = 0; p < plane; ++p)
                                        acc += self.grad[ch * plane + p] * px.data[ch * plane + p];
                                      gg[ch] += acc;
                                    }
                                  }
                                });
}

/// Multiplies every channel of a [C,H,W] tensor by a single-channel [1,H,W] map.
template <class T>
Tensor<T> mul_broadcast_channels(const Tensor<T>& input, const Tensor<T>& map) {
  require(input.rank() == 3 && map.rank() == 3 && map.dim(0) == 1 && map.dim(1) == input.dim(1) &&
              map.dim(2) == input.dim(2),
          ErrorCode::shape_mismatch,
          "mul_broadcast_channels: " + shape_str(input.shape()) + " vs " + shape_str(map.shape()));
  const std::size_t c = input.dim(0), plane = input.dim(1) * input.dim(2);
  const auto in = input.data();
  const auto mv = map.data();
  std::vector<T> out(in.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < plane; ++p) out[ch * plane + p] = in[ch * plane + p] * mv[p];
  return detail::make_result<T>(input.shape(), std::move(out), {input, map},
                                [c, plane](detail::Node<T>& self) {
                                  auto& px = *self.parents[0];
                                  auto& pm = *self.parents[1];
                                  if (px.requires_grad) {
                                    auto& gx = px.grad_buffer();
                                    for (std::size_t ch = 0; ch < c; ++ch)
                                      for (std::size_t p = 0; p < plane; ++p)
                                        gx[ch * plane + p] += self.grad[ch * plane + p] * pm.data[p];
                                  }
                                  if (pm.requires_grad) {
                                    auto& gm = pm.grad_buffer();
                                    for (std::size_t ch = 0; ch < c; ++ch)
                                      for (std::size_t p = 0; p < plane; ++p)
                                        gm[p] += self.grad[ch * plane + p] * px.data[ch * plane + p];
                                  }
                                });
}

/// Stacks two [C,H,W] tensors along the channel axis.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(1) == b.dim(1) && a.dim(2) == b.dim(2),
          ErrorCode::shape_mismatch,
          "concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.values());
  out.insert(out.end(), b.values().begin(), b.values().end());
  const std::size_t na = a.numel();
  return detail::make_result<T>(Shape{a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(out),
                                {a, b}, [na](detail::Node<T>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  if (pa.requires_grad) {
                                    auto& ga = pa.grad_buffer();
                                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                                  }
                                  if (pb.requires_grad) {
                                    auto& gb = pb.grad_buffer();
                                    for (std::size_t i = 0; i < gb.size(); ++i)
                                      gb[i] += self.grad[na + i];
                                  }
                                });
}

}  // namespace mrgan
