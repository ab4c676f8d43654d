#include "magic/trainer.hpp"

#include "magic/discriminator.hpp"
#include "magic/generator.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

namespace magic {

void adam_update(ParamStore<float>& params, const ParamStore<float>& grads, AdamMoments& moments,
                 const AdamConfig& cfg, long t) {
  if (t < 1) throw ConfigError("adam_update: step count starts at 1");
  const double c1 = 1.0 - std::pow(cfg.beta1, double(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(t));
  const float b1 = float(cfg.beta1), b2 = float(cfg.beta2);
  const float step = float(cfg.lr / c1), inv_c2 = float(1.0 / c2), eps = float(cfg.eps);
  auto& entries = params.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& name = entries[i].first;
    auto& p = entries[i].second.array();
    const auto& g = grads.at(name).array();
    auto& m = moments.m.at(name).array();
    auto& v = moments.v.at(name).array();
    m = b1 * m + (1.0f - b1) * g;
    v = b2 * v + (1.0f - b2) * g.square();
    if (cfg.lr == 0) continue;
    p -= step * m / ((v * inv_c2).sqrt() + eps);
  }
}

double clip_global_norm(ParamStore<float>& grads, double max_norm) {
  double sq = 0;
  for (const auto& [_, g] : grads.entries()) sq += g.array().template cast<double>().square().sum();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const float f = float(max_norm / norm);
    for (auto& [_, g] : grads.entries()) g.array() *= f;
  }
  return norm;
}

ModelState init_state(const TrainConfig& cfg) {
  cfg.validate();
  ModelState s;
  s.generator = init_generator<float>(cfg.generator, derive_seed(cfg.seed, 0));
  s.discriminator = init_discriminator<float>(cfg.discriminator, derive_seed(cfg.seed, 1));
  s.gen_adam = AdamMoments::zeros_like(s.generator);
  s.disc_adam = AdamMoments::zeros_like(s.discriminator);
  s.rng = Rng(derive_seed(cfg.seed, 2));
  return s;
}

DivergenceError::DivergenceError(std::string term, LossReport report, long iteration)
    : NumericError("training diverged at iteration " + std::to_string(iteration) + ": non-finite " + term),
      term_(std::move(term)),
      report_(report),
      iteration_(iteration) {}

namespace {

// The generator half of a step, recorded on its own tape.
struct GeneratorPass {
  Tape<float> tape;
  std::optional<Binding<float>> params;
  Var<float> fake;  // (B, 3, H, W)
  GeneratorLossTerms<float> terms;
};

void check_batch(const Batch& batch, const TrainConfig& cfg) {
  if (batch.size() < 1) throw ConfigError("train_step: empty batch");
  if (batch.guided() != cfg.generator.guided) {
    throw ConfigError(cfg.generator.guided ? "guided model needs content patches" : "unguided model takes no content");
  }
  for (const auto& m : batch.memory) {
    if (m.templates.h() != cfg.patch_h || m.templates.w() != cfg.patch_w) {
      throw ConfigError("batch patch size does not match the configuration");
    }
  }
}

template <typename F>
auto guarded(const char* term, const LossReport& report, long iteration, F&& f) {
  try {
    return f();
  } catch (const DivergenceError&) {
    throw;
  } catch (const NumericError&) {
    throw DivergenceError(term, report, iteration);
  }
}

void run_generator(GeneratorPass& pass, const ModelState& state, const Batch& batch, const TrainConfig& cfg,
                   bool requires_grad) {
  pass.params.emplace(pass.tape, state.generator, requires_grad);
  const Index B = batch.size();
  const float inv_b = 1.0f / float(B);
  std::vector<Var<float>> fakes;
  Var<float> entropy, tv, usage;
  auto accumulate = [&](Var<float>& acc, const Var<float>& term) {
    acc = acc.valid() ? add(acc, scale(term, inv_b)) : scale(term, inv_b);
  };
  for (Index b = 0; b < B; ++b) {
    const auto memory = pass.tape.constant(batch.memory[b].templates);
    std::optional<Var<float>> content;
    if (batch.guided()) content = pass.tape.constant(batch.content[b].image);
    const auto vars = generator_forward(*pass.params, cfg.generator, memory, content ? &*content : nullptr);
    fakes.push_back(vars.refined);
    accumulate(entropy, entropy_loss(vars.weights));
    accumulate(tv, tv_loss(vars.weights));
    accumulate(usage, max_usage_loss(vars.weights));
  }
  pass.fake = concat_elements(std::span<const Var<float>>(fakes));
  pass.terms.entropy = entropy;
  pass.terms.tv = tv;
  pass.terms.max_usage = usage;
  if (batch.guided()) {
    pass.terms.content = content_loss(pass.tape.constant(stack_images(batch.content)), pass.fake, cfg.content_levels);
  }
}

void fill_generator_report(LossReport& r, const GeneratorLossTerms<float>& t, const Var<float>& total) {
  r.adv_g = t.adv_g.item();
  r.content = t.content.valid() ? t.content.item() : 0.0;
  r.entropy = t.entropy.item();
  r.tv = t.tv.item();
  r.max_usage = t.max_usage.item();
  r.total_g = total.item();
}

void finish_update(ParamStore<float>& params, ParamStore<float> grads, AdamMoments& moments, const TrainConfig& cfg,
                   long t, const char* what, const LossReport& report) {
  if (!grads.all_finite()) throw DivergenceError(what, report, t);
  clip_global_norm(grads, cfg.grad_clip);
  adam_update(params, grads, moments, cfg.adam, t);
  if (!params.all_finite()) throw DivergenceError(what, report, t);
}

}  // namespace

LossReport evaluate_generator_loss(const ModelState& state, const Batch& batch, const TrainConfig& cfg) {
  check_batch(batch, cfg);
  GeneratorPass pass;
  run_generator(pass, state, batch, cfg, false);
  Binding<float> disc(pass.tape, state.discriminator, false);
  pass.terms.adv_g = adversarial_loss_g(discriminator_forward(disc, cfg.discriminator, pass.fake));
  const auto total = generator_total_loss(pass.terms, cfg.weights);
  LossReport r;
  fill_generator_report(r, pass.terms, total);
  return r;
}

LossReport train_step(ModelState& state, const Batch& batch, const TrainConfig& cfg, StepPhases phases) {
  check_batch(batch, cfg);
  const long t = state.iteration + 1;
  LossReport report;
  report.adv_d = report.adv_g = report.content = report.entropy = report.tv = report.max_usage = report.total_g =
      std::nan("");

  GeneratorPass gen;
  guarded("generator output", report, t, [&] {
    run_generator(gen, state, batch, cfg, true);
    return 0;
  });

  // Discriminator update against detached fakes.
  {
    Tape<float> tape;
    Binding<float> disc(tape, state.discriminator, phases.discriminator);
    const auto real = tape.constant(stack_images(batch.real_style));
    const auto fake = tape.constant(gen.fake.value());
    const auto loss = guarded("adv_d", report, t, [&] {
      return adversarial_loss_d(discriminator_forward(disc, cfg.discriminator, real),
                                discriminator_forward(disc, cfg.discriminator, fake));
    });
    report.adv_d = loss.item();
    if (!std::isfinite(report.adv_d)) throw DivergenceError("adv_d", report, t);
    if (phases.discriminator) {
      tape.backward(loss);
      finish_update(state.discriminator, disc.gradients(), state.disc_adam, cfg, t, "discriminator gradients",
                    report);
    }
  }

  // Generator update through the updated, frozen discriminator.
  Binding<float> frozen(gen.tape, state.discriminator, false);
  gen.terms.adv_g = guarded("adv_g", report, t, [&] {
    return adversarial_loss_g(discriminator_forward(frozen, cfg.discriminator, gen.fake));
  });
  const auto total = generator_total_loss(gen.terms, cfg.weights);
  fill_generator_report(report, gen.terms, total);
  if (const auto bad = report.first_non_finite(); !bad.empty()) throw DivergenceError(bad, report, t);
  if (phases.generator) {
    gen.tape.backward(total);
    finish_update(state.generator, gen.params->gradients(), state.gen_adam, cfg, t, "generator gradients", report);
  }

  state.iteration = t;
  return report;
}

namespace {

std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

}  // namespace

MetricsWriter::MetricsWriter(const std::filesystem::path& path) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  out_.open(path, std::ios::app);
  if (!out_) throw IoError("cannot open metrics file " + path.string());
  if (fresh) out_ << kMetricsHeader << '\n' << std::flush;
}

void MetricsWriter::write(long iteration, const LossReport& r, double wall_ms) {
  out_ << iteration << ',' << num(r.adv_d) << ',' << num(r.adv_g) << ',' << num(r.content) << ','
       << num(r.entropy) << ',' << num(r.tv) << ',' << num(r.max_usage) << ',' << num(r.total_g) << ','
       << num(wall_ms) << '\n'
       << std::flush;
  if (!out_) throw IoError("metrics write failed");
}

std::vector<MetricsRow> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw IoError("metrics file has an unexpected header");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 9) throw IoError("metrics row has " + std::to_string(cells.size()) + " columns");
    auto d = [&](std::size_t i) {
      double v = 0;
      const auto& c = cells[i];
      auto r = std::from_chars(c.data(), c.data() + c.size(), v);
      if (r.ec != std::errc() || r.ptr != c.data() + c.size()) throw IoError("malformed metrics value " + c);
      return v;
    };
    MetricsRow row;
    row.iteration = long(d(0));
    row.report = {d(1), d(2), d(3), d(4), d(5), d(6), d(7)};
    row.wall_ms = d(8);
    rows.push_back(row);
  }
  return rows;
}

ModelState train(const TrainConfig& cfg, const Corpus& style, const Corpus* content, const TrainHooks& hooks,
                 std::optional<ModelState> initial) {
  cfg.validate();
  if (cfg.generator.guided != (content != nullptr)) {
    throw ConfigError(cfg.generator.guided ? "guided training needs a content corpus"
                                           : "unguided training takes no content corpus");
  }
  ModelState state = initial ? std::move(*initial) : init_state(cfg);
  while (state.iteration < cfg.iterations) {
    const auto start = std::chrono::steady_clock::now();
    const Batch batch = make_minibatch(style, content, cfg.batch, cfg.k_range, cfg.patch_h, cfg.patch_w, state.rng);
    const LossReport report = train_step(state, batch, cfg);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    if (hooks.on_step) hooks.on_step(state, report, ms);
    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 &&
        state.iteration < cfg.iterations) {
      hooks.on_checkpoint(state);
    }
  }
  if (hooks.on_checkpoint) hooks.on_checkpoint(state);
  return state;
}

}  // namespace magic
