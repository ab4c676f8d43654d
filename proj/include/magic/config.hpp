#pragma once

#include "magic/data.hpp"
#include "magic/discriminator.hpp"
#include "magic/generator.hpp"
#include "magic/losses.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace magic {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  Index patch_h = 256;
  Index patch_w = 256;
  Index batch = 6;
  KRange k_range{2, 12};
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  LossWeights weights;
  int content_levels = 2;
  AdamConfig adam;
  /// Global gradient-norm clip per network; 0 disables clipping.
  double grad_clip = 0;
  long iterations = 1000;
  std::uint64_t seed = 0;
  /// Write a checkpoint every this many iterations; 0 writes only the final one.
  long checkpoint_every = 0;

  void validate() const;
};

/// Full-size defaults for a mode. Guided: B=6, discriminator depth 6. Unguided: B=12, depth 7.
TrainConfig default_config(bool guided);

/// Desk-scale configuration: 64x64 patches, depth 2, 8 generator / 16 discriminator channels.
TrainConfig smoke_config();

using KeyValues = std::map<std::string, std::string>;

/// Flat dotted keys, e.g. "generator.blend.depth". Every field is present.
KeyValues to_key_values(const TrainConfig& cfg);

/// Applies the given keys on top of `base`. Unknown keys and malformed values are ConfigErrors.
TrainConfig apply_key_values(TrainConfig base, const KeyValues& kv);

/// Text form: "key = value" lines; "[section]" headers prefix the keys that follow with
/// "section."; '#' starts a comment.
KeyValues parse_key_value_text(const std::string& text);
std::string format_key_value_text(const KeyValues& kv);

/// "key=value" override.
std::pair<std::string, std::string> parse_override(const std::string& arg);

}  // namespace magic
