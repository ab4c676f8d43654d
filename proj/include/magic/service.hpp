#pragma once

#include "magic/checkpoint.hpp"
#include "magic/data.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace httplib {
class Server;
}

namespace magic {

/// Error surfaced to HTTP clients as {code, message} with the given status.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status_(status), code_(std::move(code)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }

 private:
  int status_;
  std::string code_;
};

using Clock = std::chrono::steady_clock;

struct ServiceOptions {
  std::vector<std::pair<std::string, std::filesystem::path>> checkpoints;  // id, directory
  std::vector<std::pair<std::string, std::filesystem::path>> corpora;      // id, directory
  std::chrono::seconds idle_timeout{30 * 60};
  Index thumbnail_size = 64;
  /// Overlap used when content is larger than the patch and inference is tiled.
  Index tile_overlap = 16;
  std::function<Clock::time_point()> clock = [] { return Clock::now(); };
};

struct RegisteredCheckpoint {
  std::string id;
  std::filesystem::path path;
  TrainConfig config;
  long iteration = 0;
  ParamStore<float> generator;
};

struct RegisteredCorpus {
  std::string id;
  std::filesystem::path path;
  Corpus corpus;
};

/// One step of a session's history; replaying the lineage from scratch reproduces the
/// current memory set.
struct LineageStep {
  std::string op;                // "create" or "resample"
  std::uint64_t seed = 0;
  std::vector<Index> indices;    // resample only, ascending
};

struct Session {
  std::string id;
  std::string checkpoint;
  std::string corpus;
  Index K = 0;
  std::uint64_t seed = 0;
  std::vector<LineageStep> lineage;
  std::vector<std::string> provenance;
  std::optional<Tensor4<float>> content;
  std::string content_sha256;  // of the uploaded bytes
  std::optional<std::vector<double>> usage;
  Clock::time_point last_used;
  std::mutex mutex;
};

/// Registry plus in-memory sessions. All methods are safe to call concurrently; each
/// session serializes its own mutations.
class SessionStore {
 public:
  explicit SessionStore(ServiceOptions options);

  nlohmann::json list_assets() const;
  nlohmann::json create_session(const std::string& checkpoint, const std::string& corpus, Index K,
                                std::uint64_t seed, const std::vector<std::uint8_t>* content = nullptr);
  nlohmann::json get_session(const std::string& id);
  /// indices empty = no-op; `all` replaces every template. Without a seed the next one is
  /// derived from the session seed and lineage length.
  nlohmann::json resample(const std::string& id, const std::vector<Index>& indices, bool all,
                          std::optional<std::uint64_t> seed);
  nlohmann::json set_content(const std::string& id, const std::vector<std::uint8_t>& image_bytes);
  nlohmann::json infer(const std::string& id);

  /// Drops sessions idle for longer than the timeout; returns how many were removed.
  std::size_t evict_idle();
  std::size_t session_count() const;

  /// Memory set after replaying `lineage` on `corpus` at patch size h x w.
  static std::vector<std::string> replay_lineage(const Corpus& corpus, Index K, Index h, Index w,
                                                 const std::vector<LineageStep>& lineage);

 private:
  std::shared_ptr<Session> find(const std::string& id);
  const RegisteredCheckpoint& checkpoint(const std::string& id) const;
  const RegisteredCorpus& corpus(const std::string& id) const;
  nlohmann::json describe(const Session& s) const;
  void apply_content(Session& s, const std::vector<std::uint8_t>& bytes) const;

  ServiceOptions options_;
  std::map<std::string, RegisteredCheckpoint> checkpoints_;
  std::map<std::string, RegisteredCorpus> corpora_;
  mutable std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t next_id_ = 1;
};

/// HTTP front end:
///   GET  /assets
///   POST /sessions                 JSON {checkpoint, corpus, k, seed} or multipart with a "content" file
///   GET  /sessions/{id}
///   POST /sessions/{id}/resample   JSON {indices: [..] | "all", seed?}
///   PUT  /sessions/{id}/content    multipart, file field "content"
///   POST /sessions/{id}/infer
class Service {
 public:
  explicit Service(ServiceOptions options);
  ~Service();

  SessionStore& store() { return store_; }

  /// Binds to host:port (port 0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); requires bind().
  void listen();
  /// listen() on a background thread; returns once the server accepts connections.
  void start();
  void stop();

 private:
  void routes();

  SessionStore store_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

}  // namespace magic
