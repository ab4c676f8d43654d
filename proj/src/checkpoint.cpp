#include "magic/checkpoint.hpp"

#include "magic/digest.hpp"
#include "magic/image_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <sstream>

namespace magic {

using json = nlohmann::json;
using Kind = CheckpointError::Kind;

CheckpointError::CheckpointError(Kind kind, const std::string& message)
    : IoError(std::string("checkpoint ") + to_string(kind) + " error: " + message), kind_(kind) {}

const char* to_string(CheckpointError::Kind kind) {
  switch (kind) {
    case Kind::version:
      return "version";
    case Kind::integrity:
      return "integrity";
    case Kind::inconsistent:
      return "inconsistent";
    case Kind::io:
      return "io";
  }
  return "unknown";
}

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
void put_le(std::uint8_t* p, U v) {
  std::memcpy(p, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(p, p + sizeof(U));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  std::uint8_t b[sizeof(U)];
  std::memcpy(b, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  U v;
  std::memcpy(&v, b, sizeof(U));
  return v;
}

struct Group {
  const char* name;
  ParamStore<float> ModelState::*store;
  ParamStore<float> AdamMoments::*moment;  // null for parameters
  AdamMoments ModelState::*moments;
};

// Fixed blob order.
const Group kGroups[] = {
    {"generator", &ModelState::generator, nullptr, nullptr},
    {"discriminator", &ModelState::discriminator, nullptr, nullptr},
    {"generator.adam_m", nullptr, &AdamMoments::m, &ModelState::gen_adam},
    {"generator.adam_v", nullptr, &AdamMoments::v, &ModelState::gen_adam},
    {"discriminator.adam_m", nullptr, &AdamMoments::m, &ModelState::disc_adam},
    {"discriminator.adam_v", nullptr, &AdamMoments::v, &ModelState::disc_adam},
};

ParamStore<float>& group_store(ModelState& s, const Group& g) {
  return g.store != nullptr ? s.*g.store : s.*g.moments.*g.moment;
}
const ParamStore<float>& group_store(const ModelState& s, const Group& g) {
  return g.store != nullptr ? s.*g.store : s.*g.moments.*g.moment;
}

std::string blob_file(const std::string& group, const std::string& name) {
  std::string f = group + "." + name;
  for (char& c : f) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '.' ||
                    c == '_' || c == '-';
    if (!ok) c = '_';
  }
  return f + ".bin";
}

std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

json read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::is_regular_file(path)) throw CheckpointError(Kind::io, "missing " + path.string());
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file(path);
  } catch (const IoError& e) {
    throw CheckpointError(Kind::io, e.what());
  }
  json m = json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (m.is_discarded() || !m.is_object()) throw CheckpointError(Kind::inconsistent, "manifest is not valid JSON");
  if (m.value("format", std::string()) != kCheckpointFormat) {
    throw CheckpointError(Kind::version, "not a " + std::string(kCheckpointFormat) + " manifest");
  }
  if (!m.contains("version") || !m["version"].is_number_integer()) {
    throw CheckpointError(Kind::version, "manifest has no version");
  }
  if (m["version"].get<int>() != kCheckpointVersion) {
    throw CheckpointError(Kind::version, "unsupported version " + std::to_string(m["version"].get<int>()) +
                                             " (this build reads version " + std::to_string(kCheckpointVersion) +
                                             ")");
  }
  return m;
}

TrainConfig manifest_config(const json& m) {
  if (!m.contains("config") || !m["config"].is_object()) {
    throw CheckpointError(Kind::inconsistent, "manifest has no config section");
  }
  KeyValues kv;
  for (const auto& [k, v] : m["config"].items()) {
    if (!v.is_string()) throw CheckpointError(Kind::inconsistent, "config value for " + k + " is not a string");
    kv[k] = v.get<std::string>();
  }
  try {
    TrainConfig cfg = apply_key_values(TrainConfig{}, kv);
    cfg.validate();
    return cfg;
  } catch (const ConfigError& e) {
    throw CheckpointError(Kind::inconsistent, std::string("stored config is invalid: ") + e.what());
  }
}

}  // namespace

std::vector<std::uint8_t> encode_blob(const Tensor4<float>& t) {
  std::vector<std::uint8_t> out(40 + 4 * std::size_t(t.size()));
  std::uint8_t* p = out.data();
  put_le<std::uint64_t>(p, 4);
  for (Index d : {t.n(), t.c(), t.h(), t.w()}) put_le<std::uint64_t>(p += 8, std::uint64_t(d));
  p += 8;
  for (float v : t.values()) {
    put_le<std::uint32_t>(p, std::bit_cast<std::uint32_t>(v));
    p += 4;
  }
  return out;
}

Tensor4<float> decode_blob(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) throw CheckpointError(Kind::integrity, "blob truncated before its header");
  const auto rank = get_le<std::uint64_t>(bytes.data());
  if (rank != 4) throw CheckpointError(Kind::inconsistent, "blob rank " + std::to_string(rank) + ", expected 4");
  if (bytes.size() < 8 + 8 * rank) throw CheckpointError(Kind::integrity, "blob truncated inside its header");
  std::uint64_t dims[4];
  std::uint64_t count = 1;
  for (int i = 0; i < 4; ++i) {
    dims[i] = get_le<std::uint64_t>(bytes.data() + 8 + 8 * i);
    if (dims[i] > (std::uint64_t(1) << 32) || (dims[i] != 0 && count > (std::uint64_t(1) << 40) / dims[i])) {
      throw CheckpointError(Kind::integrity, "blob header has implausible dimensions");
    }
    count *= dims[i];
  }
  const std::size_t expected = 40 + 4 * count;
  if (bytes.size() < expected) {
    throw CheckpointError(Kind::integrity, "blob truncated: " + std::to_string(bytes.size()) + " of " +
                                               std::to_string(expected) + " bytes");
  }
  if (bytes.size() > expected) throw CheckpointError(Kind::integrity, "blob has trailing bytes");
  Tensor4<float> t(Shape4{Index(dims[0]), Index(dims[1]), Index(dims[2]), Index(dims[3])});
  for (std::uint64_t i = 0; i < count; ++i) {
    t[Index(i)] = std::bit_cast<float>(get_le<std::uint32_t>(bytes.data() + 40 + 4 * i));
  }
  return t;
}

void save_checkpoint(const ModelState& state, const TrainConfig& cfg, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw CheckpointError(Kind::io, "cannot create " + dir.string() + ": " + ec.message());

  json tensors = json::array();
  for (const auto& g : kGroups) {
    for (const auto& [name, t] : group_store(state, g).entries()) {
      const auto blob = encode_blob(t);
      const std::string file = blob_file(g.name, name);
      try {
        write_file(dir / file, blob);
      } catch (const IoError& e) {
        throw CheckpointError(Kind::io, e.what());
      }
      tensors.push_back({{"group", g.name},
                         {"name", name},
                         {"file", file},
                         {"shape", {t.n(), t.c(), t.h(), t.w()}},
                         {"sha256", sha256_hex(blob)}});
    }
  }
  json m;
  m["format"] = kCheckpointFormat;
  m["version"] = kCheckpointVersion;
  m["iteration"] = state.iteration;
  m["config"] = to_key_values(cfg);
  m["rng"] = rng_state(state.rng);
  m["tensors"] = std::move(tensors);

  const std::string text = m.dump(2) + "\n";
  const auto tmp = dir / "manifest.json.tmp";
  try {
    write_file(tmp, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  } catch (const IoError& e) {
    throw CheckpointError(Kind::io, e.what());
  }
  std::filesystem::rename(tmp, dir / "manifest.json", ec);
  if (ec) throw CheckpointError(Kind::io, "cannot finalise manifest: " + ec.message());
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
  const json m = read_manifest(dir);
  CheckpointInfo info;
  info.version = m["version"].get<int>();
  info.config = manifest_config(m);
  if (!m.contains("iteration") || !m["iteration"].is_number_integer()) {
    throw CheckpointError(Kind::inconsistent, "manifest has no iteration");
  }
  info.iteration = m["iteration"].get<long>();
  return info;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  const json m = read_manifest(dir);
  LoadedCheckpoint out;
  out.config = manifest_config(m);
  if (!m.contains("iteration") || !m["iteration"].is_number_integer() || m["iteration"].get<long>() < 0) {
    throw CheckpointError(Kind::inconsistent, "manifest has no valid iteration");
  }
  if (!m.contains("tensors") || !m["tensors"].is_array()) {
    throw CheckpointError(Kind::inconsistent, "manifest has no tensor list");
  }

  // The configuration determines exactly which tensors must be present and their shapes.
  ModelState expected = init_state(out.config);
  std::size_t want = 0;
  for (const auto& g : kGroups) want += group_store(expected, g).size();
  const auto& list = m["tensors"];
  if (list.size() != want) {
    throw CheckpointError(Kind::inconsistent, "manifest lists " + std::to_string(list.size()) + " tensors, config needs " +
                                                  std::to_string(want));
  }

  std::size_t i = 0;
  for (const auto& g : kGroups) {
    for (auto& [name, target] : group_store(expected, g).entries()) {
      const auto& e = list[i++];
      if (!e.is_object() || e.value("group", "") != g.name || e.value("name", "") != name) {
        throw CheckpointError(Kind::inconsistent, "tensor " + std::to_string(i - 1) + " should be " + g.name + "/" + name);
      }
      const std::string file = e.value("file", "");
      if (file.empty() || file.find('/') != std::string::npos || file.find("..") == 0) {
        throw CheckpointError(Kind::inconsistent, "bad blob file name for " + name);
      }
      std::vector<std::int64_t> shape;
      try {
        shape = e.at("shape").get<std::vector<std::int64_t>>();
      } catch (const json::exception&) {
        throw CheckpointError(Kind::inconsistent, "bad shape entry for " + name);
      }
      const Shape4 listed = shape.size() == 4 ? Shape4{shape[0], shape[1], shape[2], shape[3]} : Shape4{};
      if (!(listed == target.shape())) {
        throw CheckpointError(Kind::inconsistent, "manifest shape of " + name + " does not match the config");
      }
      const auto path = dir / file;
      if (!std::filesystem::is_regular_file(path)) throw CheckpointError(Kind::io, "missing blob " + path.string());
      std::vector<std::uint8_t> bytes;
      try {
        bytes = read_file(path);
      } catch (const IoError& err) {
        throw CheckpointError(Kind::io, err.what());
      }
      Tensor4<float> t = decode_blob(bytes);
      if (sha256_hex(bytes) != e.value("sha256", "")) {
        throw CheckpointError(Kind::integrity, "hash mismatch for " + file);
      }
      if (!(t.shape() == target.shape())) {
        throw CheckpointError(Kind::inconsistent, "blob " + file + " shape disagrees with the manifest");
      }
      if (!t.all_finite()) throw CheckpointError(Kind::integrity, "blob " + file + " holds non-finite values");
      target = std::move(t);
    }
  }

  expected.iteration = m["iteration"].get<long>();
  if (m.contains("rng")) {
    if (!m["rng"].is_string()) throw CheckpointError(Kind::inconsistent, "rng state is not a string");
    std::istringstream is(m["rng"].get<std::string>());
    Rng rng;
    if (!(is >> rng)) throw CheckpointError(Kind::inconsistent, "unreadable rng state");
    expected.rng = rng;
  }
  out.state = std::move(expected);
  return out;
}

}  // namespace magic
