#pragma once

#include "magic/generator.hpp"
#include "magic/params.hpp"
#include "magic/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace magic {

/// Decoded images in [-1, 1], each (1, 3, H_i, W_i), with stable ids (file names).
struct Corpus {
  std::vector<Tensor4<float>> images;
  std::vector<std::string> ids;

  std::size_t size() const { return images.size(); }
  /// Index of the image with the given id; throws ConfigError if absent.
  std::size_t find(const std::string& id) const;
};

/// Image size after the upscale rule: unchanged if it already covers the patch, otherwise
/// scaled uniformly by max(patch_h / h, patch_w / w) and rounded up.
std::pair<Index, Index> upscaled_size(Index h, Index w, Index patch_h, Index patch_w);

/// Loads every PNG/JPEG in `dir` (sorted by file name). Undecodable files are skipped and
/// reported through `warnings`; an empty result is an IoError.
Corpus load_corpus(const std::filesystem::path& dir, Index patch_h, Index patch_w,
                   std::vector<std::string>* warnings = nullptr);

/// Builds a corpus from in-memory images, applying the same upscale rule.
Corpus make_corpus(std::vector<Tensor4<float>> images, std::vector<std::string> ids, Index patch_h,
                   Index patch_w);

/// A crop of one corpus image, "id#x,y,w,h".
struct Provenance {
  std::string id;
  Index x = 0;
  Index y = 0;
  Index w = 0;
  Index h = 0;

  std::string str() const;
  static Provenance parse(const std::string& s);
  bool operator==(const Provenance&) const = default;
};

struct Patch {
  Tensor4<float> image;  // (1, 3, H, W)
  std::string provenance;
};

Tensor4<float> crop(const Tensor4<float>& image, Index y, Index x, Index h, Index w);

/// Re-extracts the crop a provenance string refers to.
Tensor4<float> crop_from_provenance(const Corpus& corpus, const std::string& provenance);

/// Uniform image, then uniform top-left corner.
Patch sample_patch(const Corpus& corpus, Index h, Index w, Rng& rng);

/// K independent patches stacked along the set dimension.
MemorySet sample_memory_set(const Corpus& corpus, Index K, Index h, Index w, Rng& rng);

/// Rebuilds a memory set from its provenance list.
MemorySet memory_set_from_provenance(const Corpus& corpus, const std::vector<std::string>& provenance);

struct KRange {
  Index min = 2;
  Index max = 12;
};

/// B memory sets sharing one K, plus B real style patches and, in guided mode, B content
/// patches. Equivalent to a (B, K, 3, H, W) memory tensor stored per sample.
struct Batch {
  Index K = 0;
  std::vector<MemorySet> memory;
  std::vector<Patch> real_style;
  std::vector<Patch> content;  // empty when unguided

  Index size() const { return Index(memory.size()); }
  bool guided() const { return !content.empty(); }
};

/// Draw order: K, then per sample memory set, real patch, content patch.
Batch make_minibatch(const Corpus& style, const Corpus* content, Index B, KRange k_range, Index h, Index w,
                     Rng& rng);

/// Stacks (1, C, H, W) images into (B, C, H, W).
Tensor4<float> stack_images(const std::vector<Patch>& patches);

/// Independent stream seeds from one run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace magic
