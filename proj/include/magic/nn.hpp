#pragma once

// Differentiable primitives. Every op records its output on the tape of its first
// argument; gradients flow only to inputs created with requires_grad or derived
// from such inputs.

#include "magic/autodiff.hpp"
#include "magic/errors.hpp"
#include "magic/tensor.hpp"

#include <span>
#include <vector>

namespace magic {

inline constexpr double kDefaultNormEps = 1e-5;

/// 2-d convolution with zero "same" padding (pad = k/2). weight is (C_out, C_in, k, k),
/// bias is (C_out, 1, 1, 1). Output spatial size is ceil(H / stride).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride = 1);

/// Per (element, channel) standardisation without affine parameters.
template <typename T>
Var<T> instance_norm(const Var<T>& x, T eps = T(kDefaultNormEps));

template <typename T>
Var<T> relu(const Var<T>& x);

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope);

template <typename T>
Var<T> tanh(const Var<T>& x);

template <typename T>
Var<T> upsample_nearest2(const Var<T>& x);

/// 2x2 mean pooling with stride 2; H and W must be even.
template <typename T>
Var<T> avg_pool2(const Var<T>& x);

/// Mean over H and W: (N, C, H, W) -> (N, C, 1, 1).
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> slice_channels(const Var<T>& x, Index begin, Index count);

template <typename T>
Var<T> concat_elements(std::span<const Var<T>> parts);

/// (1, C, H, W) -> (count, C, H, W) by copying the single element.
template <typename T>
Var<T> replicate_elements(const Var<T>& x, Index count);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& x, T factor);

/// Scalar sum_i x_i * w_i with a constant weight tensor of the same shape.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor4<T>& weights);

template <typename T>
Var<T> mean(const Var<T>& x);

/// Bilinear resampling of each element under its own 2x3 affine map.
/// theta is (N, 6, 1, 1) holding (a, b, tx, c, d, ty) in normalised coordinates where
/// [-1, 1] spans pixel edges; samples falling outside the image read zero.
template <typename T>
Var<T> grid_sample_bilinear(const Var<T>& x, const Var<T>& theta);

/// Identity affine parameters, one row per element: (1,0,0, 0,1,0).
template <typename T>
Tensor4<T> identity_theta(Index elements);

enum class Activation { kNone, kRelu, kLeakyRelu };

struct ConvBlockOptions {
  int stride = 1;
  bool normalize = true;
  Activation activation = Activation::kRelu;
  double leaky_slope = 0.2;
  double norm_eps = kDefaultNormEps;
};

/// conv2d -> instance_norm (optional) -> activation.
template <typename T>
Var<T> conv_block(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                  const ConvBlockOptions& opts = {});

}  // namespace magic
