#pragma once

#include "magic/checkpoint.hpp"
#include "magic/image_io.hpp"
#include "support/synthetic.hpp"

#include <filesystem>

namespace magic::test {

/// 16px patches, depth 1 everywhere; trains in milliseconds.
inline TrainConfig tiny_train_config(bool guided) {
  TrainConfig cfg;
  cfg.patch_h = cfg.patch_w = 16;
  cfg.batch = 1;
  cfg.k_range = {2, 3};
  cfg.generator.blend.depth = 1;
  cfg.generator.blend.base_channels = 4;
  cfg.generator.blend.heads = 2;
  cfg.generator.refine.depth = 1;
  cfg.generator.refine.base_channels = 4;
  cfg.generator.guided = guided;
  cfg.discriminator.depth = 2;
  cfg.discriminator.base_channels = 4;
  cfg.iterations = 2;
  cfg.seed = 3;
  return cfg;
}

/// One PNG per corpus image, named by its id.
inline void write_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < corpus.size(); ++i) write_png(dir / corpus.ids[i], corpus.images[i]);
}

/// Trains `cfg` briefly on the synthetic corpora and saves the result to `dir`.
inline void write_trained_checkpoint(const std::filesystem::path& dir, const TrainConfig& cfg) {
  const auto style = two_texture_corpus(48, cfg.patch_h);
  const auto content = gradient_corpus(48, cfg.patch_h);
  const auto state = train(cfg, style, cfg.generator.guided ? &content : nullptr, {});
  save_checkpoint(state, cfg, dir);
}

}  // namespace magic::test
