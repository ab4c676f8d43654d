#pragma once

#include "magic/nn.hpp"
#include "magic/params.hpp"

#include <string>
#include <vector>

namespace magic {

/// Multi-head dot-product self-attention across the element (set) dimension, applied
/// independently at every spatial position, with a residual connection:
///   y[:, :, h, w] = x[:, :, h, w] + MHA(x[:, :, h, w]) * Wo
/// Projection matrices are (C, C) stored like 1x1 conv weights (out, in, 1, 1).
/// Reductions over the set run in an order fixed by the element values, so permuting
/// the input permutes the output bit-exactly.
template <typename T>
Var<T> set_attention(const Var<T>& x, const Var<T>& wq, const Var<T>& wk, const Var<T>& wv,
                     const Var<T>& wo, int heads);

template <typename T>
void add_set_attention(ParamStore<T>& store, const std::string& prefix, Index channels, int heads,
                       Rng& rng);

/// Binds prefix.{q,k,v,o} and applies set_attention.
template <typename T>
Var<T> set_attention(Binding<T>& params, const std::string& prefix, const Var<T>& x, int heads);

struct UNetConfig {
  int depth = 5;
  Index base_channels = 48;
  /// ST-U-Net when true: every level at or below attention_min_level's resolution
  /// follows its conv block with a set-attention block.
  bool set_attention = false;
  int attention_min_level = 0;
  int heads = 4;
  bool normalize = true;
  double norm_eps = kDefaultNormEps;

  Index width(int level) const { return base_channels << level; }
  Index alignment() const { return Index(1) << depth; }
  bool attends(int level) const { return set_attention && level >= attention_min_level; }
  void validate() const;
};

/// Encoder/decoder trunk: returns (N, base_channels, H, W) features. When encoder_shapes is
/// given it receives the shape of every encoder level, finest first.
template <typename T>
void add_unet_body(ParamStore<T>& store, const std::string& prefix, const UNetConfig& cfg,
                   Index in_channels, Rng& rng);

template <typename T>
Var<T> unet_body(Binding<T>& params, const std::string& prefix, const UNetConfig& cfg,
                 const Var<T>& x, std::vector<Shape4>* encoder_shapes = nullptr);

/// Body plus a linear 5x5 head (prefix.head) with out_channels.
template <typename T>
void add_unet(ParamStore<T>& store, const std::string& prefix, const UNetConfig& cfg,
              Index in_channels, Index out_channels, Rng& rng);

/// Per-element map network with set attention; output (K, out_channels, H, W), linear.
template <typename T>
Var<T> st_unet_forward(Binding<T>& params, const std::string& prefix, const UNetConfig& cfg,
                       const Var<T>& x);

/// Plain convolutional U-Net ending in tanh.
template <typename T>
Var<T> unet_forward(Binding<T>& params, const std::string& prefix, const UNetConfig& cfg,
                    const Var<T>& x);

/// Closed interval of pixel indices along one axis.
struct Interval {
  Index lo = 0;
  Index hi = 0;
};

/// Input pixels (along one axis) that can influence output pixels [out.lo, out.hi]
/// of a U-Net including its 5x5 head.
Interval unet_input_interval(const UNetConfig& cfg, Interval out);

/// Largest distance from an output pixel to any input pixel it depends on,
/// maximised over the 2^depth alignment phases.
Index unet_receptive_radius(const UNetConfig& cfg);

}  // namespace magic
