#pragma once

#include "magic/nn.hpp"
#include "magic/params.hpp"
#include "magic/set_blocks.hpp"

#include <cstdint>

namespace magic {

/// PatchGAN: `depth` stride-2 conv blocks (no normalisation on the first) followed by a
/// linear 5x5 conv to one logit channel. Width doubles after every layer.
struct DiscriminatorConfig {
  int depth = 6;
  Index base_channels = 128;
  bool leaky = true;
  double leaky_slope = 0.2;
  bool normalize = true;
  double norm_eps = kDefaultNormEps;

  Index width(int layer) const { return base_channels << layer; }
  Index alignment() const { return Index(1) << depth; }
  void validate() const;
};

template <typename T>
void add_discriminator(ParamStore<T>& store, const DiscriminatorConfig& cfg, Rng& rng);

template <typename T>
ParamStore<T> init_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed);

/// (N, 3, H, W) -> (N, 1, H / 2^depth, W / 2^depth) logit map.
template <typename T>
Var<T> discriminator_forward(Binding<T>& params, const DiscriminatorConfig& cfg, const Var<T>& image);

/// Input pixels along one axis that can influence logits [out.lo, out.hi].
Interval discriminator_input_interval(const DiscriminatorConfig& cfg, Interval out);

}  // namespace magic
