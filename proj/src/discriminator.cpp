#include "magic/discriminator.hpp"

#include <string>

namespace magic {

void DiscriminatorConfig::validate() const {
  if (depth < 1) throw ConfigError("discriminator depth must be at least 1");
  if (base_channels < 1) throw ConfigError("discriminator base_channels must be positive");
  if (leaky && !(leaky_slope >= 0)) throw ConfigError("discriminator leaky slope must be non-negative");
}

template <typename T>
void add_discriminator(ParamStore<T>& store, const DiscriminatorConfig& cfg, Rng& rng) {
  cfg.validate();
  Index c_in = 3;
  for (int l = 0; l < cfg.depth; ++l) {
    add_conv(store, "disc.l" + std::to_string(l), c_in, cfg.width(l), 5, rng);
    c_in = cfg.width(l);
  }
  add_conv(store, "disc.out", c_in, 1, 5, rng);
}

template <typename T>
ParamStore<T> init_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  ParamStore<T> store;
  add_discriminator(store, cfg, rng);
  return store;
}

template <typename T>
Var<T> discriminator_forward(Binding<T>& params, const DiscriminatorConfig& cfg, const Var<T>& image) {
  const auto& s = image.shape();
  if (s.c != 3) throw ConfigError("discriminator: expects 3-channel images");
  if (s.h % cfg.alignment() != 0 || s.w % cfg.alignment() != 0) {
    throw ConfigError("discriminator: spatial size not divisible by 2^depth = " +
                      std::to_string(cfg.alignment()));
  }
  Var<T> x = image;
  for (int l = 0; l < cfg.depth; ++l) {
    ConvBlockOptions o;
    o.stride = 2;
    o.normalize = cfg.normalize && l > 0;
    o.norm_eps = cfg.norm_eps;
    o.activation = cfg.leaky ? Activation::kLeakyRelu : Activation::kRelu;
    o.leaky_slope = cfg.leaky_slope;
    const std::string name = "disc.l" + std::to_string(l);
    x = conv_block(x, params(name + ".w"), params(name + ".b"), o);
  }
  return conv2d(x, params("disc.out.w"), params("disc.out.b"), 1);
}

Interval discriminator_input_interval(const DiscriminatorConfig& cfg, Interval out) {
  Interval r{out.lo - 2, out.hi + 2};
  for (int l = 0; l < cfg.depth; ++l) r = {2 * r.lo - 2, 2 * r.hi + 2};
  return r;
}

#define MAGIC_INSTANTIATE_DISC(T)                                                          \
  template void add_discriminator(ParamStore<T>&, const DiscriminatorConfig&, Rng&);      \
  template ParamStore<T> init_discriminator(const DiscriminatorConfig&, std::uint64_t);    \
  template Var<T> discriminator_forward(Binding<T>&, const DiscriminatorConfig&, const Var<T>&);

MAGIC_INSTANTIATE_DISC(float)
MAGIC_INSTANTIATE_DISC(double)

}  // namespace magic
