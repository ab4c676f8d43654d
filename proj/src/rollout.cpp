#include "magic/rollout.hpp"

#include <algorithm>

namespace magic {

std::vector<Index> plan_axis(Index length, Index tile, Index overlap, Index align) {
  if (tile < 1 || overlap < 0 || tile <= overlap) throw ConfigError("tiling needs T > V >= 0");
  if (align < 1) throw ConfigError("tile alignment must be positive");
  if (length < tile) {
    throw ConfigError("output side " + std::to_string(length) + " is smaller than the tile " + std::to_string(tile));
  }
  const Index stride = (tile - overlap) / align * align;
  if (stride < 1) throw ConfigError("tile stride rounds to zero at alignment " + std::to_string(align));
  if ((length - tile) % align != 0) {
    throw ConfigError("output side minus tile must be a multiple of the alignment " + std::to_string(align));
  }
  if (length == tile) return {0};
  const Index n = (length - tile + stride - 1) / stride + 1;
  std::vector<Index> starts;
  for (Index i = 0; i + 1 < n; ++i) starts.push_back(i * stride);
  starts.push_back(length - tile);
  return starts;
}

namespace {

// Paste interval of tile i along one axis: overlaps are split at their midpoints.
std::pair<Index, Index> paste_span(const std::vector<Index>& starts, std::size_t i, Index tile, Index length) {
  const Index lo = i == 0 ? 0 : (starts[i - 1] + tile + starts[i]) / 2;
  const Index hi = i + 1 == starts.size() ? length : (starts[i] + tile + starts[i + 1]) / 2;
  return {lo, hi};
}

Tensor4<float> window(const Tensor4<float>& x, Index y, Index x0, Index h, Index w) {
  Tensor4<float> out(x.n(), x.c(), h, w);
  for (Index n = 0; n < x.n(); ++n)
    for (Index c = 0; c < x.c(); ++c)
      for (Index r = 0; r < h; ++r) {
        std::copy_n(x.channel(n, c) + (y + r) * x.w() + x0, w, out.channel(n, c) + r * w);
      }
  return out;
}

// Copies the tile's paste region from a (1, C, T, T) tile result into the canvas.
void paste(Tensor4<float>& canvas, const Tensor4<float>& part, const Tile& t) {
  const Index w = t.paste_x1 - t.paste_x0;
  for (Index c = 0; c < canvas.c(); ++c)
    for (Index y = t.paste_y0; y < t.paste_y1; ++y) {
      const float* src = part.channel(0, c) + (y - t.y) * part.w() + (t.paste_x0 - t.x);
      std::copy_n(src, w, canvas.channel(0, c) + y * canvas.w() + t.paste_x0);
    }
}

}  // namespace

TilePlan plan_tiles(Index height, Index width, Index tile, Index overlap, Index align) {
  const auto ys = plan_axis(height, tile, overlap, align);
  const auto xs = plan_axis(width, tile, overlap, align);
  TilePlan plan;
  plan.height = height;
  plan.width = width;
  plan.tile = tile;
  plan.overlap = overlap;
  plan.rows = Index(ys.size());
  plan.cols = Index(xs.size());
  for (std::size_t r = 0; r < ys.size(); ++r) {
    const auto [y0, y1] = paste_span(ys, r, tile, height);
    for (std::size_t c = 0; c < xs.size(); ++c) {
      const auto [x0, x1] = paste_span(xs, c, tile, width);
      plan.tiles.push_back({Index(r), Index(c), ys[r], xs[c], y0, y1, x0, x1});
    }
  }
  return plan;
}

CountMap paste_counts(const TilePlan& plan) {
  CountMap counts = CountMap::Zero(plan.height, plan.width);
  for (const auto& t : plan.tiles) {
    if (t.y < 0 || t.x < 0 || t.y + plan.tile > plan.height || t.x + plan.tile > plan.width) {
      throw ConfigError("tile source outside the output");
    }
    if (t.paste_y0 < t.y || t.paste_y1 > t.y + plan.tile || t.paste_x0 < t.x || t.paste_x1 > t.x + plan.tile) {
      throw ConfigError("paste region outside its tile");
    }
    counts.block(t.paste_y0, t.paste_x0, t.paste_y1 - t.paste_y0, t.paste_x1 - t.paste_x0) += 1;
  }
  return counts;
}

MemoryPolicy parse_memory_policy(const std::string& name) {
  if (name == "shared") return MemoryPolicy::shared;
  if (name == "per-tile" || name == "per_tile") return MemoryPolicy::per_tile;
  if (name == "canvas") return MemoryPolicy::canvas;
  throw ConfigError("unknown memory policy '" + name + "' (shared, per-tile, canvas)");
}

const char* to_string(MemoryPolicy policy) {
  switch (policy) {
    case MemoryPolicy::shared:
      return "shared";
    case MemoryPolicy::per_tile:
      return "per-tile";
    case MemoryPolicy::canvas:
      return "canvas";
  }
  return "unknown";
}

RolloutResult render_tiles(const ParamStore<float>& params, const GeneratorConfig& cfg, const TilePlan& plan,
                           const Tensor4<float>* content, const TileMemory& memory, Index palette_size,
                           std::uint64_t palette_seed) {
  if (plan.tiles.empty()) throw ConfigError("empty tile plan");
  if (plan.tile % cfg.alignment() != 0) {
    throw ConfigError("tile size " + std::to_string(plan.tile) + " must be divisible by 2^depth = " +
                      std::to_string(cfg.alignment()));
  }
  if (cfg.guided != (content != nullptr)) {
    throw ConfigError(cfg.guided ? "guided generator needs a content image" : "unguided generator takes no content");
  }
  if (content != nullptr && !(content->shape() == Shape4{1, 3, plan.height, plan.width})) {
    throw ConfigError("content image must match the output size");
  }
  const auto palette = element_palette(palette_size, palette_seed);
  RolloutResult out;
  out.refined = Tensor4<float>(1, 3, plan.height, plan.width);
  out.collage = Tensor4<float>(1, 3, plan.height, plan.width);
  out.weights = Tensor4<float>(1, 3, plan.height, plan.width);
  out.usage.assign(std::size_t(palette_size), 0.0);
  for (std::size_t i = 0; i < plan.tiles.size(); ++i) {
    const Tile& t = plan.tiles[i];
    const Tensor4<float> m = memory(t, i);
    if (m.c() != 3 || m.h() != plan.tile || m.w() != plan.tile) throw ConfigError("tile memory set has the wrong shape");
    if (m.n() > palette_size) throw ConfigError("palette smaller than the memory set");
    std::optional<Tensor4<float>> content_tile;
    if (content != nullptr) content_tile = window(*content, t.y, t.x, plan.tile, plan.tile);
    const auto g = generate(params, cfg, m, content_tile ? &*content_tile : nullptr);
    paste(out.refined, g.refined, t);
    paste(out.collage, g.collage, t);
    paste(out.weights, colorize_weights(g.weights, std::span<const Color>(palette.data(), std::size_t(m.n()))), t);
    for (Index k = 0; k < m.n(); ++k) {
      double s = 0;
      for (Index y = t.paste_y0; y < t.paste_y1; ++y)
        for (Index x = t.paste_x0; x < t.paste_x1; ++x) s += g.weights(k, 0, y - t.y, x - t.x);
      out.usage[std::size_t(k)] += s;
    }
  }
  for (double& u : out.usage) u /= double(plan.height * plan.width);
  return out;
}

RolloutResult render_tiled(const ParamStore<float>& params, const GeneratorConfig& cfg, const TilePlan& plan,
                           const Tensor4<float>* content, const Corpus& style, Index K, MemoryPolicy policy,
                           std::uint64_t seed, const std::vector<std::string>& fixed) {
  if (K < 1) throw ConfigError("memory set size K must be at least 1");
  if (!fixed.empty() && (policy != MemoryPolicy::shared || Index(fixed.size()) != K)) {
    throw ConfigError("a fixed memory set needs the shared policy and exactly K entries");
  }
  const Index T = plan.tile;
  std::vector<std::vector<std::string>> provenance;
  TileMemory memory;
  MemorySet shared;
  switch (policy) {
    case MemoryPolicy::shared: {
      if (!fixed.empty()) {
        shared = memory_set_from_provenance(style, fixed);
        if (shared.templates.h() != T || shared.templates.w() != T) throw ConfigError("fixed memory set is not tile-sized");
      } else {
        Rng rng(derive_seed(seed, 0));
        shared = sample_memory_set(style, K, T, T, rng);
      }
      provenance.push_back(shared.source_ids);
      memory = [&](const Tile&, std::size_t) { return shared.templates; };
      break;
    }
    case MemoryPolicy::per_tile:
      provenance.resize(plan.tiles.size());
      memory = [&](const Tile&, std::size_t i) {
        Rng rng(derive_seed(seed, 1 + i));
        auto m = sample_memory_set(style, K, T, T, rng);
        provenance[i] = m.source_ids;
        return m.templates;
      };
      break;
    case MemoryPolicy::canvas: {
      Rng rng(derive_seed(seed, 0));
      shared = sample_memory_set(style, K, plan.height, plan.width, rng);
      provenance.push_back(shared.source_ids);
      memory = [&](const Tile& t, std::size_t) { return window(shared.templates, t.y, t.x, T, T); };
      break;
    }
  }
  auto result = render_tiles(params, cfg, plan, content, memory, K, seed);
  result.provenance = std::move(provenance);
  return result;
}

}  // namespace magic
