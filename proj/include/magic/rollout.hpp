#pragma once

#include "magic/data.hpp"
#include "magic/generator.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace magic {

/// One T x T tile: its source rectangle in output coordinates and the trimmed region it
/// pastes. Paste rectangles are half-open.
struct Tile {
  Index row = 0, col = 0;  // grid position
  Index y = 0, x = 0;      // source top-left
  Index paste_y0 = 0, paste_y1 = 0;
  Index paste_x0 = 0, paste_x1 = 0;
};

struct TilePlan {
  Index height = 0, width = 0;
  Index tile = 0, overlap = 0;
  Index rows = 0, cols = 0;
  std::vector<Tile> tiles;  // row-major
};

/// Tile starts along one axis: stride T - V (rounded down to a multiple of `align`), the
/// last tile shifted inward to end at `length`.
std::vector<Index> plan_axis(Index length, Index tile, Index overlap, Index align = 1);

/// Grid of overlapping tiles covering a height x width output. Neighbouring tiles split
/// their overlap at its midpoint; border tiles keep their outer margins. With align > 1
/// every tile start is a multiple of align (required for exact tiled/full agreement of a
/// network that pools), which needs (length - T) divisible by align.
TilePlan plan_tiles(Index height, Index width, Index tile, Index overlap, Index align = 1);

using CountMap = Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Number of tiles pasting each output pixel; exactly one everywhere for a valid plan.
CountMap paste_counts(const TilePlan& plan);

enum class MemoryPolicy {
  shared,   // one T x T memory set reused by every tile
  per_tile, // a fresh memory set per tile, seeded per tile
  canvas,   // output-sized templates; each tile uses its own window of them
};

MemoryPolicy parse_memory_policy(const std::string& name);
const char* to_string(MemoryPolicy policy);

struct RolloutResult {
  Tensor4<float> refined;   // I, (1, 3, H, W)
  Tensor4<float> collage;   // I_M
  Tensor4<float> weights;   // colorized A
  std::vector<std::vector<std::string>> provenance;  // per tile (a single entry when shared)
  std::vector<double> usage;  // per set slot, over the pasted pixels of every tile
};

/// Supplies the (K, 3, T, T) memory set for a tile.
using TileMemory = std::function<Tensor4<float>(const Tile&, std::size_t index)>;

/// Runs the generator on every tile and pastes the trimmed regions. `content`, when given,
/// must be (1, 3, plan.height, plan.width). The weight map uses one palette of
/// `palette_size` colours seeded by `palette_seed`.
RolloutResult render_tiles(const ParamStore<float>& params, const GeneratorConfig& cfg, const TilePlan& plan,
                           const Tensor4<float>* content, const TileMemory& memory, Index palette_size,
                           std::uint64_t palette_seed);

/// Memory sets drawn from `style` according to `policy`; everything derives from `seed`.
/// `fixed`, when non-empty, pins the shared memory set to these provenance ids.
RolloutResult render_tiled(const ParamStore<float>& params, const GeneratorConfig& cfg, const TilePlan& plan,
                           const Tensor4<float>* content, const Corpus& style, Index K, MemoryPolicy policy,
                           std::uint64_t seed, const std::vector<std::string>& fixed = {});

}  // namespace magic
