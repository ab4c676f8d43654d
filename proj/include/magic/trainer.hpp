#pragma once

#include "magic/config.hpp"
#include "magic/data.hpp"
#include "magic/losses.hpp"
#include "magic/params.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>

namespace magic {

/// First and second moment estimates for one parameter store.
struct AdamMoments {
  ParamStore<float> m;
  ParamStore<float> v;

  static AdamMoments zeros_like(const ParamStore<float>& params) {
    return {params.zeros_like(), params.zeros_like()};
  }
};

/// One Adam step at 1-based step count `t`.
void adam_update(ParamStore<float>& params, const ParamStore<float>& grads, AdamMoments& moments,
                 const AdamConfig& cfg, long t);

/// Scales `grads` so their global L2 norm is at most max_norm (no-op when max_norm is 0).
/// Returns the norm before clipping.
double clip_global_norm(ParamStore<float>& grads, double max_norm);

struct ModelState {
  ParamStore<float> generator;
  ParamStore<float> discriminator;
  AdamMoments gen_adam;
  AdamMoments disc_adam;
  long iteration = 0;
  Rng rng;  // minibatch sampling stream
};

/// Fresh parameters and zero moments derived from cfg.seed.
ModelState init_state(const TrainConfig& cfg);

/// Non-finite loss or gradient. `term` names the first offending component.
class DivergenceError : public NumericError {
 public:
  DivergenceError(std::string term, LossReport report, long iteration);
  const std::string& term() const { return term_; }
  const LossReport& report() const { return report_; }
  long iteration() const { return iteration_; }

 private:
  std::string term_;
  LossReport report_;
  long iteration_;
};

/// Generator losses for one batch without updating anything.
LossReport evaluate_generator_loss(const ModelState& state, const Batch& batch, const TrainConfig& cfg);

/// Which halves of a step run; both by default. Disabling one is for inspection and tests.
struct StepPhases {
  bool discriminator = true;
  bool generator = true;
};

/// One discriminator update on real vs detached generated patches, then one generator
/// update against the updated discriminator. Increments state.iteration.
LossReport train_step(ModelState& state, const Batch& batch, const TrainConfig& cfg, StepPhases phases = {});

inline constexpr const char* kMetricsHeader = "iteration,adv_d,adv_g,content,entropy,tv,max_usage,total_g,wall_ms";

/// Append-only metrics CSV; the header is written when the file is new or empty.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path);
  void write(long iteration, const LossReport& r, double wall_ms);

 private:
  std::ofstream out_;
};

struct MetricsRow {
  long iteration = 0;
  LossReport report;
  double wall_ms = 0;
};

/// Parses a metrics file, checking the header matches kMetricsHeader.
std::vector<MetricsRow> read_metrics(const std::filesystem::path& path);

struct TrainHooks {
  /// Called after every step.
  std::function<void(const ModelState&, const LossReport&, double wall_ms)> on_step;
  /// Called on checkpoint cadence and once at the end.
  std::function<void(const ModelState&)> on_checkpoint;
};

/// Runs cfg.iterations steps starting from `state` (or a fresh state when absent).
ModelState train(const TrainConfig& cfg, const Corpus& style, const Corpus* content, const TrainHooks& hooks,
                 std::optional<ModelState> state = std::nullopt);

}  // namespace magic
