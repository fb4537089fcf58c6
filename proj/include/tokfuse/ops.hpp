#pragma once

// Forward and backward kernels for the handful of ops the projectors use.
// All kernels take rank-3 [H, W, C] feature maps. Reductions accumulate in
// double and store T.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "tokfuse/tensor.hpp"

namespace tokfuse::ops {

namespace detail {

template <class T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " +
                     std::to_string(rank) + ", got " + shape_string(t.shape()));
  }
}

// out[p][o] = bias[o] + sum_r a[p][r] * b[r][o], accumulated in double.
// Rows are processed in blocks so each row of b is streamed once per block.
template <class T>
void gemm_bias(std::span<const T> a, std::size_t rows,
               std::size_t inner, std::span<const T> b,
               std::size_t cols, std::span<const T> bias,
               std::span<T> out) {
  constexpr std::size_t kRowBlock = 32;
  constexpr std::size_t kColBlock = 256;
  std::vector<double> acc(kRowBlock * kColBlock);
  for (std::size_t p0 = 0; p0 < rows; p0 += kRowBlock) {
    const std::size_t pn = std::min(kRowBlock, rows - p0);
    for (std::size_t o0 = 0; o0 < cols; o0 += kColBlock) {
      const std::size_t on = std::min(kColBlock, cols - o0);
      for (std::size_t pp = 0; pp < pn; ++pp) {
        double* row = acc.data() + pp * kColBlock;
        for (std::size_t o = 0; o < on; ++o) {
          row[o] = bias.empty() ? 0.0 : static_cast<double>(bias[o0 + o]);
        }
      }
      for (std::size_t r = 0; r < inner; ++r) {
        const T* brow = b.data() + r * cols + o0;
        for (std::size_t pp = 0; pp < pn; ++pp) {
          const double av = a[(p0 + pp) * inner + r];
          if (av == 0.0) continue;
          double* row = acc.data() + pp * kColBlock;
          for (std::size_t o = 0; o < on; ++o) {
            row[o] += av * static_cast<double>(brow[o]);
          }
        }
      }
      for (std::size_t pp = 0; pp < pn; ++pp) {
        const double* row = acc.data() + pp * kColBlock;
        T* dst = out.data() + (p0 + pp) * cols + o0;
        for (std::size_t o = 0; o < on; ++o) dst[o] = static_cast<T>(row[o]);
      }
    }
  }
}

struct ConvGeometry {
  std::size_t h, w, cin, k, cout, stride, ho, wo;
  std::size_t positions() const { return ho * wo; }
  std::size_t patch() const { return k * k * cin; }
};

template <class T>
ConvGeometry conv_geometry(const BasicTensor<T>& input,
                           const BasicTensor<T>& weights,
                           const BasicTensor<T>& bias, std::size_t stride) {
  require_rank(input, 3, "conv2d input");
  require_rank(weights, 4, "conv2d weights");
  ConvGeometry g{};
  g.h = input.dim(0);
  g.w = input.dim(1);
  g.cin = input.dim(2);
  g.k = weights.dim(0);
  g.cout = weights.dim(3);
  g.stride = stride;
  if (weights.dim(1) != g.k) {
    throw ShapeError("conv2d kernel width axis: non-square kernel " +
                     shape_string(weights.shape()));
  }
  if (weights.dim(2) != g.cin) {
    throw ShapeError("conv2d channel axis: weights expect " +
                     std::to_string(weights.dim(2)) +
                     " input channels, input has " + std::to_string(g.cin));
  }
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
    throw ShapeError("conv2d bias axis: expected [" + std::to_string(g.cout) +
                     "], got " + shape_string(bias.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  if (g.k == 0 || g.k > g.h) {
    throw ShapeError("conv2d height axis: kernel " + std::to_string(g.k) +
                     " does not fit height " + std::to_string(g.h));
  }
  if (g.k > g.w) {
    throw ShapeError("conv2d width axis: kernel " + std::to_string(g.k) +
                     " does not fit width " + std::to_string(g.w));
  }
  if (stride > 1 && g.h % stride != 0) {
    throw DivisibilityError("conv2d height " + std::to_string(g.h) +
                            " not divisible by stride " +
                            std::to_string(stride));
  }
  if (stride > 1 && g.w % stride != 0) {
    throw DivisibilityError("conv2d width " + std::to_string(g.w) +
                            " not divisible by stride " +
                            std::to_string(stride));
  }
  if ((g.h - g.k) % stride != 0 || (g.w - g.k) % stride != 0) {
    throw DivisibilityError("conv2d windows do not tile the input exactly");
  }
  g.ho = (g.h - g.k) / stride + 1;
  g.wo = (g.w - g.k) / stride + 1;
  return g;
}

// Patch matrix [positions, k*k*Cin] with patch column (i*k + j)*Cin + c,
// matching the [k, k, Cin, Cout] weight layout.
template <class T>
std::vector<T> im2col(const BasicTensor<T>& input, const ConvGeometry& g) {
  std::vector<T> cols(g.positions() * g.patch());
  const auto x = input.data();
  for (std::size_t ho = 0; ho < g.ho; ++ho) {
    for (std::size_t wo = 0; wo < g.wo; ++wo) {
      T* dst = cols.data() + (ho * g.wo + wo) * g.patch();
      for (std::size_t i = 0; i < g.k; ++i) {
        const std::size_t row = ho * g.stride + i;
        const T* src = x.data() + (row * g.w + wo * g.stride) * g.cin;
        std::copy(src, src + g.k * g.cin, dst + i * g.k * g.cin);
      }
    }
  }
  return cols;
}

template <class T>
void col2im_add(std::span<const T> cols, const ConvGeometry& g,
                std::span<T> dx) {
  for (std::size_t ho = 0; ho < g.ho; ++ho) {
    for (std::size_t wo = 0; wo < g.wo; ++wo) {
      const T* src = cols.data() + (ho * g.wo + wo) * g.patch();
      for (std::size_t i = 0; i < g.k; ++i) {
        const std::size_t row = ho * g.stride + i;
        T* dst = dx.data() + (row * g.w + wo * g.stride) * g.cin;
        for (std::size_t n = 0; n < g.k * g.cin; ++n) {
          dst[n] += src[i * g.k * g.cin + n];
        }
      }
    }
  }
}

inline bool is_pointwise(const ConvGeometry& g) {
  return g.k == 1 && g.stride == 1;
}

}  // namespace detail

// Valid (unpadded) cross-correlation. Every projector conv is exact-cover:
// 1x1 stride 1, or k x k stride k.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& input,
                      const BasicTensor<T>& weights,
                      const BasicTensor<T>& bias, std::size_t stride) {
  const auto g = detail::conv_geometry(input, weights, bias, stride);
  BasicTensor<T> out({g.ho, g.wo, g.cout});
  if (detail::is_pointwise(g)) {
    detail::gemm_bias<T>(input.data(), g.positions(), g.patch(), weights.data(),
                      g.cout, bias.data(), out.data());
  } else {
    const auto cols = detail::im2col(input, g);
    detail::gemm_bias<T>(cols, g.positions(), g.patch(), weights.data(), g.cout,
                      bias.data(), out.data());
  }
  return out;
}

// Accumulates dL/dweights and dL/dbias into the given buffers and, when
// grad_input is non-empty, dL/dinput into grad_input.
template <class T>
void conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                     const BasicTensor<T>& bias, std::size_t stride,
                     const BasicTensor<T>& grad_output,
                     std::span<T> grad_input,
                     std::span<T> grad_weights,
                     std::span<T> grad_bias) {
  const auto g = detail::conv_geometry(input, weights, bias, stride);
  if (grad_output.shape() != Shape{g.ho, g.wo, g.cout}) {
    throw ShapeError("conv2d backward: output gradient " +
                     shape_string(grad_output.shape()) +
                     " does not match forward output");
  }
  const std::size_t rows = g.positions();
  const std::size_t inner = g.patch();
  const std::size_t cols_n = g.cout;
  const auto dy = grad_output.data();
  const auto w = weights.data();

  std::vector<T> patches;
  std::span<const T> a = input.data();
  if (!detail::is_pointwise(g)) {
    patches = detail::im2col(input, g);
    a = patches;
  }

  if (!grad_weights.empty()) {
    std::vector<double> acc(cols_n);
    for (std::size_t r = 0; r < inner; ++r) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t p = 0; p < rows; ++p) {
        const double av = a[p * inner + r];
        if (av == 0.0) continue;
        const T* drow = dy.data() + p * cols_n;
        for (std::size_t o = 0; o < cols_n; ++o) acc[o] += av * drow[o];
      }
      T* gw = grad_weights.data() + r * cols_n;
      for (std::size_t o = 0; o < cols_n; ++o) {
        gw[o] = static_cast<T>(gw[o] + acc[o]);
      }
    }
  }
  if (!grad_bias.empty()) {
    for (std::size_t o = 0; o < cols_n; ++o) {
      double s = 0.0;
      for (std::size_t p = 0; p < rows; ++p) s += dy[p * cols_n + o];
      grad_bias[o] = static_cast<T>(grad_bias[o] + s);
    }
  }
  if (!grad_input.empty()) {
    std::vector<T> dcols(rows * inner);
    for (std::size_t p = 0; p < rows; ++p) {
      const T* drow = dy.data() + p * cols_n;
      for (std::size_t r = 0; r < inner; ++r) {
        const T* wrow = w.data() + r * cols_n;
        double s = 0.0;
        for (std::size_t o = 0; o < cols_n; ++o) {
          s += static_cast<double>(drow[o]) * wrow[o];
        }
        dcols[p * inner + r] = static_cast<T>(s);
      }
    }
    if (detail::is_pointwise(g)) {
      for (std::size_t n = 0; n < dcols.size(); ++n) grad_input[n] += dcols[n];
    } else {
      detail::col2im_add<T>(dcols, g, grad_input);
    }
  }
}

inline double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

// d/dx [x * Phi(x)] = Phi(x) + x * phi(x)
inline double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf =
      std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
  return cdf + x * pdf;
}

template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& input) {
  BasicTensor<T> out(input.shape());
  const auto x = input.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = static_cast<T>(gelu_scalar(x[i]));
  }
  return out;
}

template <class T>
void gelu_backward(const BasicTensor<T>& input,
                   const BasicTensor<T>& grad_output, std::span<T> grad_input) {
  const auto x = input.data();
  const auto dy = grad_output.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    grad_input[i] += static_cast<T>(dy[i] * gelu_derivative(x[i]));
  }
}

template <class T>
BasicTensor<T> concat_channels(std::span<const BasicTensor<T>* const> inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels: no inputs");
  const BasicTensor<T>& first = *inputs.front();
  detail::require_rank(first, 3, "concat_channels input");
  const std::size_t h = first.dim(0), w = first.dim(1);
  std::size_t total = 0;
  for (const BasicTensor<T>* t : inputs) {
    detail::require_rank(*t, 3, "concat_channels input");
    if (t->dim(0) != h || t->dim(1) != w) {
      throw ShapeError("concat_channels spatial mismatch: " +
                       shape_string(first.shape()) + " vs " +
                       shape_string(t->shape()));
    }
    total += t->dim(2);
  }
  BasicTensor<T> out({h, w, total});
  auto y = out.data();
  std::size_t offset = 0;
  for (const BasicTensor<T>* t : inputs) {
    const std::size_t c = t->dim(2);
    const auto x = t->data();
    for (std::size_t p = 0; p < h * w; ++p) {
      std::copy_n(x.data() + p * c, c, y.data() + p * total + offset);
    }
    offset += c;
  }
  return out;
}

template <class T>
BasicTensor<T> concat_channels(std::span<const BasicTensor<T>> inputs) {
  std::vector<const BasicTensor<T>*> ptrs;
  ptrs.reserve(inputs.size());
  for (const BasicTensor<T>& t : inputs) ptrs.push_back(&t);
  return concat_channels(std::span<const BasicTensor<T>* const>(ptrs));
}

// Adds the channel slice [offset, offset + width) of grad_output into
// grad_input (an [H, W, width] buffer).
template <class T>
void concat_channels_backward(const BasicTensor<T>& grad_output,
                              std::size_t offset, std::size_t width,
                              std::span<T> grad_input) {
  const std::size_t total = grad_output.dim(2);
  const std::size_t positions = grad_output.dim(0) * grad_output.dim(1);
  const auto dy = grad_output.data();
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t c = 0; c < width; ++c) {
      grad_input[p * width + c] += dy[p * total + offset + c];
    }
  }
}

template <class T>
BasicTensor<T> avgpool2x2(const BasicTensor<T>& input) {
  detail::require_rank(input, 3, "avgpool2x2 input");
  const std::size_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw DivisibilityError("avgpool2x2 needs even extents, got " +
                            shape_string(input.shape()));
  }
  BasicTensor<T> out({h / 2, w / 2, c});
  for (std::size_t i = 0; i < h / 2; ++i) {
    for (std::size_t j = 0; j < w / 2; ++j) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double s = static_cast<double>(input.at(2 * i, 2 * j, ch)) +
                         input.at(2 * i, 2 * j + 1, ch) +
                         input.at(2 * i + 1, 2 * j, ch) +
                         input.at(2 * i + 1, 2 * j + 1, ch);
        out.at(i, j, ch) = static_cast<T>(0.25 * s);
      }
    }
  }
  return out;
}

template <class T>
void avgpool2x2_backward(const BasicTensor<T>& grad_output,
                         std::span<T> grad_input) {
  const std::size_t ho = grad_output.dim(0), wo = grad_output.dim(1),
                    c = grad_output.dim(2);
  const std::size_t w = 2 * wo;
  for (std::size_t i = 0; i < 2 * ho; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        grad_input[(i * w + j) * c + ch] +=
            T{0.25} * grad_output.at(i / 2, j / 2, ch);
      }
    }
  }
}

// Moves each k x k window into the channel axis: output channel
// (i*k + j)*C + c holds input (k*y + i, k*x + j, c).
template <class T>
BasicTensor<T> space_to_depth(const BasicTensor<T>& input, std::size_t k) {
  detail::require_rank(input, 3, "space_to_depth input");
  const std::size_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
  if (k == 0 || h % k != 0 || w % k != 0) {
    throw DivisibilityError("space_to_depth: block " + std::to_string(k) +
                            " does not divide " + shape_string(input.shape()));
  }
  BasicTensor<T> out({h / k, w / k, k * k * c});
  for (std::size_t y = 0; y < h / k; ++y) {
    for (std::size_t x = 0; x < w / k; ++x) {
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            out.at(y, x, (i * k + j) * c + ch) =
                input.at(k * y + i, k * x + j, ch);
          }
        }
      }
    }
  }
  return out;
}

template <class T>
void space_to_depth_backward(const BasicTensor<T>& grad_output, std::size_t k,
                             std::span<T> grad_input) {
  const std::size_t ho = grad_output.dim(0), wo = grad_output.dim(1);
  const std::size_t c = grad_output.dim(2) / (k * k);
  const std::size_t w = wo * k;
  for (std::size_t y = 0; y < ho; ++y) {
    for (std::size_t x = 0; x < wo; ++x) {
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            grad_input[((k * y + i) * w + (k * x + j)) * c + ch] +=
                grad_output.at(y, x, (i * k + j) * c + ch);
          }
        }
      }
    }
  }
}

// [H, W, C] -> [H*W*E, C/E]: each position's channel vector is split into
// E contiguous sub-tokens. With channel-fastest storage this is a pure
// reinterpretation of the buffer.
template <class T>
BasicTensor<T> reshape_tokens(const BasicTensor<T>& input,
                              std::size_t fused_tokens) {
  detail::require_rank(input, 3, "reshape_tokens input");
  const std::size_t c = input.dim(2);
  if (fused_tokens == 0 || c % fused_tokens != 0) {
    throw DivisibilityError("reshape_tokens: E=" +
                            std::to_string(fused_tokens) +
                            " does not divide channel width " +
                            std::to_string(c));
  }
  return input.reshaped(
      {input.dim(0) * input.dim(1) * fused_tokens, c / fused_tokens});
}

}  // namespace tokfuse::ops
