#pragma once

#include "magic/config.hpp"
#include "magic/errors.hpp"
#include "magic/trainer.hpp"

#include <filesystem>
#include <string>

namespace magic {

inline constexpr const char* kCheckpointFormat = "magic-checkpoint";
inline constexpr int kCheckpointVersion = 1;

/// Checkpoint failures, by kind.
///  version      - unknown format tag or unsupported version
///  integrity    - a blob is truncated, oversized or fails its hash
///  inconsistent - manifest, blobs and configuration disagree (names, shapes, counts)
///  io           - missing files or unwritable destination
class CheckpointError : public IoError {
 public:
  enum class Kind { version, integrity, inconsistent, io };
  CheckpointError(Kind kind, const std::string& message);
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

const char* to_string(CheckpointError::Kind kind);

/// Writes `dir/manifest.json` plus one `.bin` blob per tensor. Existing contents of `dir`
/// with the same names are replaced; the manifest is written last.
void save_checkpoint(const ModelState& state, const TrainConfig& cfg, const std::filesystem::path& dir);

struct LoadedCheckpoint {
  ModelState state;
  TrainConfig config;
};

/// Reads and fully validates a checkpoint; nothing is returned unless every check passes.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

/// Manifest-level metadata without reading the blobs.
struct CheckpointInfo {
  TrainConfig config;
  long iteration = 0;
  int version = 0;
};
CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);

/// Blob encoding: u64 LE rank, u64 LE dims, then f32 LE values.
std::vector<std::uint8_t> encode_blob(const Tensor4<float>& t);
Tensor4<float> decode_blob(std::span<const std::uint8_t> bytes);

}  // namespace magic
