#include "magic/data.hpp"

#include "magic/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace magic {

std::size_t Corpus::find(const std::string& id) const {
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == id) return i;
  throw ConfigError("corpus has no image named " + id);
}

std::pair<Index, Index> upscaled_size(Index h, Index w, Index patch_h, Index patch_w) {
  if (h >= patch_h && w >= patch_w) return {h, w};
  auto ceil_div = [](Index a, Index b) { return (a + b - 1) / b; };
  // Compare patch_h / h with patch_w / w without rounding.
  if (patch_h * w >= patch_w * h) return {patch_h, std::max(patch_w, ceil_div(w * patch_h, h))};
  return {std::max(patch_h, ceil_div(h * patch_w, w)), patch_w};
}

Corpus make_corpus(std::vector<Tensor4<float>> images, std::vector<std::string> ids, Index patch_h,
                   Index patch_w) {
  if (images.size() != ids.size()) throw ConfigError("make_corpus: one id per image required");
  if (images.empty()) throw IoError("corpus is empty");
  if (patch_h < 1 || patch_w < 1) throw ConfigError("patch size must be positive");
  Corpus corpus;
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto& img = images[i];
    if (img.n() != 1 || img.c() != 3) throw ConfigError("corpus images must be (1, 3, H, W)");
    const auto [h, w] = upscaled_size(img.h(), img.w(), patch_h, patch_w);
    corpus.images.push_back(h == img.h() && w == img.w() ? std::move(img) : resize_bilinear(img, h, w));
    corpus.ids.push_back(std::move(ids[i]));
  }
  return corpus;
}

Corpus load_corpus(const std::filesystem::path& dir, Index patch_h, Index patch_w,
                   std::vector<std::string>* warnings) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Tensor4<float>> images;
  std::vector<std::string> ids;
  for (const auto& f : files) {
    try {
      images.push_back(read_image(f));
      ids.push_back(f.filename().string());
    } catch (const IoError& e) {
      if (warnings != nullptr) warnings->push_back(std::string("skipping ") + e.what());
    }
  }
  if (images.empty()) throw IoError("no decodable PNG/JPEG images in " + dir.string());
  return make_corpus(std::move(images), std::move(ids), patch_h, patch_w);
}

std::string Provenance::str() const {
  std::ostringstream os;
  os << id << '#' << x << ',' << y << ',' << w << ',' << h;
  return os.str();
}

Provenance Provenance::parse(const std::string& s) {
  const auto hash = s.rfind('#');
  if (hash == std::string::npos) throw ConfigError("malformed provenance: " + s);
  Provenance p;
  p.id = s.substr(0, hash);
  std::istringstream is(s.substr(hash + 1));
  char c1 = 0, c2 = 0, c3 = 0;
  if (!(is >> p.x >> c1 >> p.y >> c2 >> p.w >> c3 >> p.h) || c1 != ',' || c2 != ',' || c3 != ',' ||
      !is.eof()) {
    throw ConfigError("malformed provenance: " + s);
  }
  return p;
}

Tensor4<float> crop(const Tensor4<float>& image, Index y, Index x, Index h, Index w) {
  if (y < 0 || x < 0 || y + h > image.h() || x + w > image.w()) {
    throw ConfigError("crop rectangle outside the image");
  }
  Tensor4<float> out(image.n(), image.c(), h, w);
  for (Index n = 0; n < image.n(); ++n)
    for (Index c = 0; c < image.c(); ++c)
      for (Index r = 0; r < h; ++r) {
        const float* src = image.channel(n, c) + (y + r) * image.w() + x;
        std::copy_n(src, w, out.channel(n, c) + r * w);
      }
  return out;
}

Tensor4<float> crop_from_provenance(const Corpus& corpus, const std::string& provenance) {
  const Provenance p = Provenance::parse(provenance);
  return crop(corpus.images[corpus.find(p.id)], p.y, p.x, p.h, p.w);
}

Patch sample_patch(const Corpus& corpus, Index h, Index w, Rng& rng) {
  if (corpus.size() == 0) throw ConfigError("sample_patch: empty corpus");
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  const std::size_t i = pick(rng);
  const auto& img = corpus.images[i];
  if (img.h() < h || img.w() < w) throw ConfigError("sample_patch: image smaller than the patch");
  std::uniform_int_distribution<Index> ys(0, img.h() - h), xs(0, img.w() - w);
  const Index y = ys(rng);
  const Index x = xs(rng);
  return {crop(img, y, x, h, w), Provenance{corpus.ids[i], x, y, w, h}.str()};
}

namespace {

MemorySet stack_set(std::vector<Tensor4<float>> crops, std::vector<std::string> ids) {
  const Shape4 s = crops.front().shape();
  MemorySet m;
  m.templates = Tensor4<float>(Index(crops.size()), 3, s.h, s.w);
  const Index block = 3 * s.plane();
  for (std::size_t k = 0; k < crops.size(); ++k) {
    if (!(crops[k].shape() == s)) throw ConfigError("memory set crops differ in size");
    std::copy_n(crops[k].data(), block, m.templates.element(Index(k)));
  }
  m.source_ids = std::move(ids);
  return m;
}

}  // namespace

MemorySet sample_memory_set(const Corpus& corpus, Index K, Index h, Index w, Rng& rng) {
  if (K < 1) throw ConfigError("memory set size K must be at least 1");
  std::vector<Tensor4<float>> crops;
  std::vector<std::string> ids;
  for (Index k = 0; k < K; ++k) {
    Patch p = sample_patch(corpus, h, w, rng);
    crops.push_back(std::move(p.image));
    ids.push_back(std::move(p.provenance));
  }
  return stack_set(std::move(crops), std::move(ids));
}

MemorySet memory_set_from_provenance(const Corpus& corpus, const std::vector<std::string>& provenance) {
  if (provenance.empty()) throw ConfigError("memory set size K must be at least 1");
  std::vector<Tensor4<float>> crops;
  for (const auto& p : provenance) crops.push_back(crop_from_provenance(corpus, p));
  return stack_set(std::move(crops), provenance);
}

Batch make_minibatch(const Corpus& style, const Corpus* content, Index B, KRange k_range, Index h, Index w,
                     Rng& rng) {
  if (B < 1) throw ConfigError("batch size must be at least 1");
  if (k_range.min < 1 || k_range.max < k_range.min) throw ConfigError("K range must satisfy 1 <= min <= max");
  Batch batch;
  batch.K = std::uniform_int_distribution<Index>(k_range.min, k_range.max)(rng);
  for (Index b = 0; b < B; ++b) {
    batch.memory.push_back(sample_memory_set(style, batch.K, h, w, rng));
    batch.real_style.push_back(sample_patch(style, h, w, rng));
    if (content != nullptr) batch.content.push_back(sample_patch(*content, h, w, rng));
  }
  return batch;
}

Tensor4<float> stack_images(const std::vector<Patch>& patches) {
  if (patches.empty()) throw ConfigError("stack_images: nothing to stack");
  const Shape4 s = patches.front().image.shape();
  Tensor4<float> out(Index(patches.size()), s.c, s.h, s.w);
  for (std::size_t b = 0; b < patches.size(); ++b) {
    if (!(patches[b].image.shape() == s)) throw ConfigError("stack_images: shape mismatch");
    std::copy_n(patches[b].image.data(), s.size(), out.element(Index(b)));
  }
  return out;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finaliser over the combined input.
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace magic
