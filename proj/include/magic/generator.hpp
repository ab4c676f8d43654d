#pragma once

#include "magic/nn.hpp"
#include "magic/params.hpp"
#include "magic/set_blocks.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace magic {

/// K style templates stacked along the element dimension, values in [-1, 1].
struct MemorySet {
  Tensor4<float> templates;  // (K, 3, H, W)
  std::vector<std::string> source_ids;

  Index size() const { return templates.n(); }
};

/// True when A >= 0 everywhere and every pixel's weights sum to 1 within tol.
/// A is (K, 1, H, W).
template <typename T>
bool is_convex(const Tensor4<T>& A, double tol = 1e-5);

/// Guided mode: concatenates the content image, replicated across the set, after the
/// template channels. Unguided (no content): returns the templates.
template <typename T>
Var<T> assemble_input(const Var<T>& templates, const Var<T>* content);

/// Softmax across the element dimension at every pixel: (K, 1, H, W) -> (K, 1, H, W).
template <typename T>
Var<T> blend_weights(const Var<T>& logits);

/// Per-element affine warp of the templates; theta is (K, 6, 1, 1).
template <typename T>
Var<T> warp_templates(const Var<T>& templates, const Var<T>& theta);

/// Convex combination over the set: out[c, h, w] = sum_k A[k, h, w] * templates[k, c, h, w].
/// Throws ConfigError if A is not convex.
template <typename T>
Var<T> set_pool(const Var<T>& templates, const Var<T>& A);

struct GeneratorConfig {
  UNetConfig blend{.depth = 5, .base_channels = 48, .set_attention = true};
  UNetConfig refine{.depth = 5, .base_channels = 48, .set_attention = false};
  bool guided = false;
  bool warping = false;

  Index input_channels() const { return guided ? 6 : 3; }
  Index refine_input_channels() const { return guided ? 6 : 3; }
  Index alignment() const { return std::max(blend.alignment(), refine.alignment()); }
  void validate() const;
};

template <typename T>
ParamStore<T> init_generator(const GeneratorConfig& cfg, std::uint64_t seed);

template <typename T>
void add_generator(ParamStore<T>& store, const GeneratorConfig& cfg, Rng& rng);

template <typename T>
struct GeneratorVars {
  Var<T> logits;     // (K, 1, H, W)
  Var<T> weights;    // A, (K, 1, H, W)
  std::optional<Var<T>> theta;  // (K, 6, 1, 1)
  Var<T> templates;  // warped (or original) templates
  Var<T> collage;    // I_M, (1, 3, H, W)
  Var<T> refined;    // I, (1, 3, H, W)
};

/// Full differentiable generator pass for one memory set.
template <typename T>
GeneratorVars<T> generator_forward(Binding<T>& params, const GeneratorConfig& cfg,
                                   const Var<T>& memory, const Var<T>* content);

/// Plain-tensor result of one generator pass.
template <typename T>
struct GeneratorOutput {
  Tensor4<T> weights;  // (K, 1, H, W)
  std::optional<Tensor4<T>> theta;
  Tensor4<T> collage;
  Tensor4<T> refined;
};

/// Inference without gradients.
template <typename T>
GeneratorOutput<T> generate(const ParamStore<T>& params, const GeneratorConfig& cfg,
                            const Tensor4<T>& memory, const Tensor4<T>* content);

/// Receptive radius of the whole generator (blend network feeding the refiner), in
/// pixels. Valid only for the norm-free, warp-free variant, where every output pixel
/// depends on a bounded neighbourhood.
Index generator_receptive_radius(const GeneratorConfig& cfg);

using Color = std::array<float, 3>;

/// Deterministic pseudo-random colours in [-1, 1]^3, one per element.
std::vector<Color> element_palette(Index count, std::uint64_t seed);

/// out[:, h, w] = sum_k A[k, h, w] * palette[k]; returns (1, 3, H, W).
Tensor4<float> colorize_weights(const Tensor4<float>& A, std::span<const Color> palette);
Tensor4<float> colorize_weights(const Tensor4<float>& A, std::uint64_t seed);

/// Spatial share of each template: sum_hw A_k / (H * W).
std::vector<double> usage_fractions(const Tensor4<float>& A);

}  // namespace magic
