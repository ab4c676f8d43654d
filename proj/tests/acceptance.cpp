// Acceptance checks 1-10. One PASS/FAIL line per criterion; exit status 1 if any fails.
// Optional arguments select criteria, e.g. `magic_acceptance 1 4 9`.

#include "magic/checkpoint.hpp"
#include "magic/generator.hpp"
#include "magic/gradcheck.hpp"
#include "magic/losses.hpp"
#include "magic/rollout.hpp"
#include "magic/set_blocks.hpp"
#include "magic/trainer.hpp"
#include "support/helpers.hpp"
#include "support/synthetic.hpp"
#include "support/tempdir.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <algorithm>
#include <set>
#include <sstream>

using namespace magic;
using magic::test::random_permutation;
using magic::test::random_tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

std::span<const Index> as_span(const std::vector<Index>& v) { return {v.data(), v.size()}; }

GeneratorConfig tiny_generator(int depth, bool guided, bool warping) {
  GeneratorConfig cfg;
  cfg.blend = {.depth = depth, .base_channels = 4, .set_attention = true, .heads = 2};
  cfg.refine = {.depth = depth, .base_channels = 4, .set_attention = false};
  cfg.guided = guided;
  cfg.warping = warping;
  return cfg;
}

// Random weights everywhere, at a scale that keeps activations well away from zero.
void randomize(ParamStore<float>& p, std::uint64_t seed, float sigma) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, sigma);
  for (auto& [name, t] : p.entries())
    for (Index i = 0; i < t.size(); ++i) t[i] = n(rng);
}

// 1 -------------------------------------------------------------------------------------

void convexity(Outcome& o) {
  double worst_sum = 0, worst_below = 0, worst_above = 0;
  float min_a = 1;
  int trials = 0;
  for (Index K : {1, 2, 5}) {
    for (int t = 0; t < 1000; ++t, ++trials) {
      Tape<float> tape;
      const std::uint64_t seed = 1000003ull * std::uint64_t(K) + std::uint64_t(t);
      const auto m = random_tensor({K, 3, 16, 16}, seed);
      const auto logits = random_tensor({K, 1, 16, 16}, seed ^ 0x9e3779b97f4a7c15ull, -6.0, 6.0);
      const auto A = blend_weights(tape.constant(logits));
      const auto im = set_pool(tape.constant(m), A).value();
      const auto& a = A.value();
      min_a = std::min(min_a, a.array().minCoeff());
      for (Index p = 0; p < 256; ++p) {
        double s = 0;
        for (Index k = 0; k < K; ++k) s += a.data()[k * 256 + p];
        worst_sum = std::max(worst_sum, std::abs(s - 1.0));
        for (Index c = 0; c < 3; ++c) {
          float lo = std::numeric_limits<float>::infinity(), hi = -lo;
          for (Index k = 0; k < K; ++k) {
            lo = std::min(lo, m.channel(k, c)[p]);
            hi = std::max(hi, m.channel(k, c)[p]);
          }
          const float v = im.channel(0, c)[p];
          worst_below = std::max(worst_below, double(lo) - double(v));
          worst_above = std::max(worst_above, double(v) - double(hi));
        }
      }
    }
  }
  o.detail << trials << " draws; min A " << min_a << ", max |sum A - 1| " << worst_sum << ", max below hull "
           << worst_below << ", max above hull " << worst_above;
  o.require(min_a >= 0, "A >= 0");
  o.require(worst_sum <= 1e-5, "|sum A - 1| <= 1e-5");
  o.require(worst_below <= 0, "I_M >= min_k M");
  o.require(worst_above <= 1e-6, "I_M <= max_k M + 1e-6");
}

// 2 -------------------------------------------------------------------------------------

void permutation(Outcome& o) {
  float worst_collage = 0, worst_refined = 0;
  int exact_fail = 0, cases = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int depth = 1 + trial % 2;
    const bool guided = (trial / 2) % 2 == 1;
    const auto cfg = tiny_generator(depth, guided, true);
    auto params = init_generator<float>(cfg, 500 + trial);
    randomize(params, 900 + trial, 0.1f);
    for (Index K : {2, 3, 5}) {
      const std::uint64_t s = std::uint64_t(trial) * 16 + std::uint64_t(K);
      const auto m = random_tensor({K, 3, 8, 8}, s);
      const auto content = random_tensor({1, 3, 8, 8}, s + 7);
      const auto perm = random_permutation(K, s + 11);
      const auto* c = guided ? &content : nullptr;
      const auto a = generate(params, cfg, m, c);
      const auto b = generate(params, cfg, permute_elements(m, as_span(perm)), c);
      worst_collage = std::max(worst_collage, max_abs_diff(a.collage, b.collage));
      worst_refined = std::max(worst_refined, max_abs_diff(a.refined, b.refined));
      const bool exact = bitwise_equal(permute_elements(a.weights, as_span(perm)), b.weights) && a.theta && b.theta &&
                         bitwise_equal(permute_elements(*a.theta, as_span(perm)), *b.theta);
      exact_fail += exact ? 0 : 1;
      ++cases;
    }
  }
  o.detail << cases << " cases; max |dI_M| " << worst_collage << ", max |dI| " << worst_refined
           << ", inexact A/theta co-permutations " << exact_fail;
  o.require(worst_collage <= 1e-5f, "I_M invariant within 1e-5");
  o.require(worst_refined <= 1e-5f, "I invariant within 1e-5");
  o.require(exact_fail == 0, "A and theta co-permuted exactly");
}

// 3 -------------------------------------------------------------------------------------

// Gradient of a store-parameterized function w.r.t. its inputs and all parameters.
template <typename Build>
double store_gradcheck(const ParamStore<double>& store, std::vector<Tensor4<double>> inputs, Build build) {
  const std::size_t n_in = inputs.size();
  std::vector<std::string> names;
  for (const auto& [name, t] : store.entries()) {
    names.push_back(name);
    inputs.push_back(t);
  }
  auto f = [&](Tape<double>& tape, std::span<const Var<double>> in) {
    Binding<double> params(tape, store, false);
    for (std::size_t i = 0; i < names.size(); ++i) params.bind(names[i], in[n_in + i]);
    return build(params, in);
  };
  return gradcheck_tape(f, inputs, 1e-5);
}

void gradients(Outcome& o) {
  std::map<std::string, double> err;
  err["set_attention"] = gradcheck_tape(
      [](Tape<double>&, std::span<const Var<double>> in) {
        auto y = set_attention(in[0], in[1], in[2], in[3], in[4], 2);
        return weighted_sum(y, random_tensor<double>(y.shape(), 1));
      },
      {random_tensor<double>({3, 4, 2, 2}, 2), random_tensor<double>({4, 4, 1, 1}, 3),
       random_tensor<double>({4, 4, 1, 1}, 4), random_tensor<double>({4, 4, 1, 1}, 5),
       random_tensor<double>({4, 4, 1, 1}, 6)});
  err["set_pool"] = gradcheck_tape(
      [](Tape<double>&, std::span<const Var<double>> in) {
        auto y = set_pool(in[0], blend_weights(in[1]));
        return weighted_sum(y, random_tensor<double>(y.shape(), 7));
      },
      {random_tensor<double>({3, 3, 3, 3}, 8), random_tensor<double>({3, 1, 3, 3}, 9, -2, 2)});

  const auto logits = random_tensor<double>({3, 1, 3, 3}, 10, -2, 2);
  err["entropy"] = gradcheck_tape(
      [](Tape<double>&, std::span<const Var<double>> in) { return entropy_loss(blend_weights(in[0])); }, {logits});
  err["tv"] = gradcheck_tape(
      [](Tape<double>&, std::span<const Var<double>> in) { return tv_loss(blend_weights(in[0])); }, {logits});
  auto skewed = logits;  // a clear maximum keeps max_usage differentiable
  for (Index p = 0; p < 9; ++p) skewed.channel(0, 0)[p] += 2.0;
  err["max_usage"] = gradcheck_tape(
      [](Tape<double>&, std::span<const Var<double>> in) { return max_usage_loss(blend_weights(in[0])); }, {skewed});
  err["content"] = gradcheck_tape(
      [](Tape<double>&, std::span<const Var<double>> in) { return content_loss(in[0], in[1], 2); },
      {random_tensor<double>({2, 3, 4, 4}, 11), random_tensor<double>({2, 3, 4, 4}, 12)});
  err["adversarial"] = gradcheck_tape(
      [](Tape<double>&, std::span<const Var<double>> in) {
        return add(adversarial_loss_d(in[0], in[1]), adversarial_loss_g(in[1]));
      },
      {random_tensor<double>({2, 1, 2, 2}, 13, -3, 3), random_tensor<double>({2, 1, 2, 2}, 14, -3, 3)});

  for (bool warping : {false, true}) {
    auto cfg = tiny_generator(1, true, warping);
    auto store = init_generator<double>(cfg, 15);
    if (warping) {
      std::mt19937_64 rng(16);
      std::normal_distribution<double> n(0.0, 0.05);
      for (auto& v : store.at("gen.blend.head_warp.w").values()) v = n(rng);
    }
    err[warping ? "generator+warp" : "generator"] = store_gradcheck(
        store, {random_tensor<double>({2, 3, 4, 4}, 17), random_tensor<double>({1, 3, 4, 4}, 18)},
        [&](Binding<double>& params, std::span<const Var<double>> in) {
          auto out = generator_forward(params, cfg, in[0], &in[1]);
          return add(weighted_sum(out.refined, random_tensor<double>(out.refined.shape(), 19)),
                     weighted_sum(out.collage, random_tensor<double>(out.collage.shape(), 20)));
        });
  }

  DiscriminatorConfig dcfg;
  dcfg.depth = 2;
  dcfg.base_channels = 2;
  err["discriminator"] = store_gradcheck(init_discriminator<double>(dcfg, 21), {random_tensor<double>({1, 3, 16, 16}, 22)},
                                         [&](Binding<double>& params, std::span<const Var<double>> in) {
                                           auto y = discriminator_forward(params, dcfg, in[0]);
                                           return weighted_sum(y, random_tensor<double>(y.shape(), 23));
                                         });
  double worst = 0;
  for (const auto& [name, e] : err) {
    o.detail << name << " " << e << "; ";
    worst = std::max(worst, e);
  }
  o.detail << "max " << worst;
  o.require(worst <= 1e-4, "max relative error <= 1e-4");
}

// 4 -------------------------------------------------------------------------------------

void loss_bounds(Outcome& o) {
  Tape<double> tape;  // small; one tape for everything
  auto scalar = [](const Var<double>& v) { return v.value()[0]; };
  bool in_range = true;
  double uniform_err = 0, one_hot = 0, mu_uniform_err = 0;
  for (Index K : {1, 2, 3, 5, 8}) {
    for (int t = 0; t < 50; ++t) {
      const auto A = blend_weights(tape.constant(random_tensor<double>({K, 1, 6, 6}, 100 * K + t, -8, 8)));
      const double e = scalar(entropy_loss(A)), mu = scalar(max_usage_loss(A));
      in_range = in_range && e >= 0 && e <= std::log(double(K)) + 1e-12 && mu >= 1.0 / double(K) - 1e-12 && mu <= 1.0 + 1e-12;
    }
    const auto uniform = tape.constant(Tensor4<double>::constant({K, 1, 6, 6}, 1.0 / double(K)));
    uniform_err = std::max(uniform_err, std::abs(scalar(entropy_loss(uniform)) - std::log(double(K))));
    mu_uniform_err = std::max(mu_uniform_err, std::abs(scalar(max_usage_loss(uniform)) - 1.0 / double(K)));
    Tensor4<double> hot(K, 1, 6, 6);
    for (Index p = 0; p < 36; ++p) hot.data()[(p % K) * 36 + p] = 1.0;
    one_hot = std::max(one_hot, std::abs(scalar(entropy_loss(tape.constant(hot)))));
  }
  const double tv_const = scalar(tv_loss(tape.constant(Tensor4<double>::constant({3, 1, 5, 5}, 1.0 / 3.0))));
  const auto x = tape.constant(random_tensor<double>({2, 3, 8, 8}, 5));
  const double content_self = scalar(content_loss(x, x, 2));
  const auto zeros = tape.constant(Tensor4<double>(Shape4{2, 1, 4, 4}));
  const double adv_zero = scalar(adversarial_loss_d(zeros, zeros));
  o.detail << "entropy/max_usage in range " << (in_range ? "yes" : "no") << "; |H(one-hot)| " << one_hot
           << ", |H(uniform) - ln K| " << uniform_err << ", |max_usage(uniform) - 1/K| " << mu_uniform_err
           << "; tv(const) " << tv_const << "; content(x,x) " << content_self << "; adv_d(0,0) - 2ln2 "
           << adv_zero - 2 * std::log(2.0);
  o.require(in_range, "entropy in [0, ln K], max_usage in [1/K, 1]");
  o.require(one_hot <= 1e-6, "entropy(one-hot) = 0");
  o.require(uniform_err <= 1e-6, "entropy(uniform) = ln K");
  o.require(mu_uniform_err <= 1e-6, "max_usage(uniform) = 1/K");
  o.require(tv_const == 0, "tv(constant) = 0");
  o.require(content_self == 0, "content(x, x) = 0");
  o.require(std::abs(adv_zero - 2 * std::log(2.0)) <= 1e-6, "adv_d at zero logits = 2 ln 2");
}

// 5 -------------------------------------------------------------------------------------

void warping_identity(Outcome& o) {
  bool exact = true;
  for (int depth : {1, 2})
    for (bool guided : {false, true}) {
      auto off = tiny_generator(depth, guided, false);
      auto on = off;
      on.warping = true;
      const auto p_off = init_generator<float>(off, 40 + depth);
      const auto p_on = init_generator<float>(on, 40 + depth);
      const auto m = random_tensor({3, 3, 8, 8}, 41);
      const auto content = random_tensor({1, 3, 8, 8}, 42);
      const auto a = generate(p_off, off, m, guided ? &content : nullptr);
      const auto b = generate(p_on, on, m, guided ? &content : nullptr);
      exact = exact && b.theta && bitwise_equal(*b.theta, identity_theta<float>(3)) &&
              bitwise_equal(a.weights, b.weights) && bitwise_equal(a.collage, b.collage) &&
              bitwise_equal(a.refined, b.refined);
    }
  double round_trip = 0;
  for (Index s : {5, 8, 13}) {
    Tape<double> tape;
    const auto x = random_tensor<double>({2, 3, s, s + 3}, 43 + s);
    const auto y = grid_sample_bilinear(tape.constant(x), tape.constant(identity_theta<double>(2)));
    round_trip = std::max(round_trip, (y.value().array() - x.array()).abs().maxCoeff());
  }
  o.detail << "warp-on == warp-off at init: " << (exact ? "bitwise" : "differs") << "; identity round trip max err "
           << round_trip;
  o.require(exact, "bit-exact at initialization");
  o.require(round_trip <= 1e-6, "identity theta round trip <= 1e-6");
}

// 7, 8, 6 share the smoke runs ----------------------------------------------------------

struct SmokeRun {
  double seconds = 0;
  bool finite = true;
  std::vector<double> content;
  LossReport last;
  double eval_entropy = 0, eval_tv = 0, eval_max_usage = 0;
  ModelState state;
};

struct SmokeData {
  Corpus style = magic::test::two_texture_corpus(256, 64);
  Corpus content = magic::test::gradient_corpus(128, 64);
};

const SmokeData& smoke_data() {
  static const SmokeData d;
  return d;
}

TrainConfig smoke(double entropy, double tv) {
  TrainConfig cfg = smoke_config();
  cfg.seed = 7;
  cfg.weights.max_usage = 1.0;
  cfg.weights.entropy = entropy;
  cfg.weights.tv = tv;
  return cfg;
}

// Final regularizer values: mean over 8 fixed evaluation batches (independent of training).
SmokeRun run_smoke(const TrainConfig& cfg) {
  const auto& d = smoke_data();
  SmokeRun r;
  TrainHooks hooks;
  hooks.on_step = [&](const ModelState&, const LossReport& rep, double) {
    r.content.push_back(rep.content);
    r.finite = r.finite && rep.all_finite();
    r.last = rep;
  };
  const auto start = std::chrono::steady_clock::now();
  try {
    r.state = train(cfg, d.style, &d.content, hooks);
  } catch (const DivergenceError&) {
    r.finite = false;
    return r;
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  Rng rng(999);
  const int n = 8;
  for (int i = 0; i < n; ++i) {
    const auto b = make_minibatch(d.style, &d.content, 2, cfg.k_range, cfg.patch_h, cfg.patch_w, rng);
    const auto rep = evaluate_generator_loss(r.state, b, cfg);
    r.eval_entropy += rep.entropy / n;
    r.eval_tv += rep.tv / n;
    r.eval_max_usage += rep.max_usage / n;
  }
  return r;
}

double window_mean(const std::vector<double>& v, std::size_t end, std::size_t width) {
  double s = 0;
  for (std::size_t i = end - width; i < end; ++i) s += v[i];
  return s / double(width);
}

const SmokeRun& base_run() {
  static const SmokeRun r = run_smoke(smoke(1.0, 1.0));
  return r;
}

void smoke_training(Outcome& o) {
  const auto& r = base_run();
  const auto cfg = smoke(1.0, 1.0);
  o.require(r.finite && r.content.size() == std::size_t(cfg.iterations), "all losses finite");
  if (!r.finite || r.content.size() < 300) return;
  const double ma50 = window_mean(r.content, 50, 50), ma300 = window_mean(r.content, 300, 50);
  o.detail << "300 iterations in " << r.seconds << " s; content MA50 " << ma50 << " -> MA300 " << ma300
           << "; final max_usage " << r.last.max_usage << " (eval " << r.eval_max_usage << ")";
  o.require(r.seconds <= 15 * 60, "<= 15 minutes");
  o.require(ma300 < ma50, "content moving average decreases");
  o.require(r.last.max_usage <= 0.95 && r.eval_max_usage <= 0.95, "final max_usage <= 0.95");
}

void regularizers(Outcome& o) {
  const auto e_low = run_smoke(smoke(0.5, 1.0));
  const auto e_high = run_smoke(smoke(5.0, 1.0));
  const auto& tv_low = base_run();
  const auto tv_high = run_smoke(smoke(1.0, 100.0));
  o.detail << "entropy: lambda_E 0.5 -> " << e_low.eval_entropy << ", lambda_E 5 -> " << e_high.eval_entropy
           << "; tv: lambda_TV 1 -> " << tv_low.eval_tv << ", lambda_TV 100 -> " << tv_high.eval_tv;
  o.require(e_low.finite && e_high.finite && tv_low.finite && tv_high.finite, "runs finish");
  o.require(e_high.eval_entropy < e_low.eval_entropy, "entropy lower for lambda_E = 5");
  o.require(tv_high.eval_tv < tv_low.eval_tv, "tv lower for lambda_TV = 100");
}

void variable_k(Outcome& o) {
  const auto cfg = smoke(1.0, 1.0);
  const auto& r = base_run();
  o.require(r.finite, "smoke checkpoint available");
  if (!r.finite) return;
  magic::test::TempDir dir("magic-acceptance");
  save_checkpoint(r.state, cfg, dir.path());
  const auto loaded = load_checkpoint(dir.path());
  o.require(loaded.config.k_range.min == 2 && loaded.config.k_range.max == 4, "trained with K in [2, 4]");
  const auto& d = smoke_data();
  Rng rng(77);
  const auto content = sample_patch(d.content, 64, 64, rng).image;
  for (Index K : {1, 7}) {
    const auto m = sample_memory_set(d.style, K, 64, 64, rng);
    const auto g = generate(loaded.state.generator, loaded.config.generator, m.templates, &content);
    double worst_sum = 0, outside = 0;
    for (Index p = 0; p < 64 * 64; ++p) {
      double s = 0;
      for (Index k = 0; k < K; ++k) s += g.weights.data()[k * 4096 + p];
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
      for (Index c = 0; c < 3; ++c) {
        float lo = 2, hi = -2;
        for (Index k = 0; k < K; ++k) {
          lo = std::min(lo, m.templates.channel(k, c)[p]);
          hi = std::max(hi, m.templates.channel(k, c)[p]);
        }
        const float v = g.collage.channel(0, c)[p];
        outside = std::max({outside, double(lo) - v, double(v) - hi - 1e-6});
      }
    }
    const bool valid = g.weights.shape() == Shape4{K, 1, 64, 64} && g.refined.all_finite() &&
                       g.refined.array().abs().maxCoeff() <= 1.0f && g.weights.array().minCoeff() >= 0;
    o.detail << "K=" << K << ": max |sum A - 1| " << worst_sum << ", hull violation " << std::max(outside, 0.0)
             << (valid ? ", outputs valid; " : ", outputs INVALID; ");
    o.require(valid && worst_sum <= 1e-5 && outside <= 0, "K=" + std::to_string(K) + " convex and valid");
    if (K == 1) o.require(bitwise_equal(g.collage, m.templates), "K=1 collage equals its template");
  }
}

// 9 -------------------------------------------------------------------------------------

void rollout(Outcome& o) {
  std::mt19937_64 rng(31);
  int exact = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const Index T = std::uniform_int_distribution<Index>(8, 400)(rng);
    const Index V = std::uniform_int_distribution<Index>(0, T - 1)(rng);
    const Index H = std::uniform_int_distribution<Index>(T, 5 * T)(rng);
    const Index W = std::uniform_int_distribution<Index>(T, 5 * T)(rng);
    exact += (paste_counts(plan_tiles(H, W, T, V)) == 1).all() ? 1 : 0;
  }

  GeneratorConfig cfg = tiny_generator(2, true, false);
  cfg.blend.normalize = cfg.refine.normalize = false;
  const auto params = init_generator<float>(cfg, 8);
  const Index R = generator_receptive_radius(cfg), align = cfg.alignment();
  const Index V = (2 * R + 1 + align - 1) / align * align;
  const Index T = V + 4 * align;
  const Index L = T + 3 * (T - V) - align;
  const auto style = magic::test::two_texture_corpus(L + 20, L);
  const auto content = magic::test::gradient_corpus(L, L).images[0];
  const auto full = render_tiled(params, cfg, plan_tiles(L, L, L, 0), &content, style, 3, MemoryPolicy::canvas, 21);
  const auto tiled_plan = plan_tiles(L, L, T, V, align);
  const auto tiled = render_tiled(params, cfg, tiled_plan, &content, style, 3, MemoryPolicy::canvas, 21);
  const float diff = std::max({max_abs_diff(full.refined, tiled.refined), max_abs_diff(full.collage, tiled.collage),
                               max_abs_diff(full.weights, tiled.weights)});

  const auto poster = plan_tiles(2000, 2000, 384, 60);
  const auto poster_default = plan_tiles(2000, 2000, 384, 64);
  o.detail << "coverage exact on " << exact << "/50 plans; tiled vs full (R=" << R << ", T=" << T << ", V=" << V
           << ", " << tiled_plan.tiles.size() << " tiles on " << L << "x" << L << ") max diff " << diff
           << "; 2000x2000 T=384 V=60 -> " << poster.rows << "x" << poster.cols << " (V=64 -> " << poster_default.rows
           << "x" << poster_default.cols << ")";
  o.require(exact == 50, "write-count canvas all ones");
  o.require(diff <= 1e-5f, "tiled equals full within 1e-5");
  o.require(poster.rows == 6 && poster.cols == 6 && (paste_counts(poster) == 1).all(), "6x6 poster plan");
}

// 10 ------------------------------------------------------------------------------------

void persistence(Outcome& o) {
  TrainConfig cfg;
  cfg.patch_h = cfg.patch_w = 16;
  cfg.batch = 1;
  cfg.k_range = {2, 3};
  cfg.generator = tiny_generator(1, true, true);
  cfg.discriminator.depth = 2;
  cfg.discriminator.base_channels = 4;
  cfg.iterations = 3;
  cfg.seed = 9;
  magic::test::TempDir dir("magic-acceptance");
  const auto style = magic::test::two_texture_corpus(32, 16);
  const auto content = magic::test::gradient_corpus(32, 16);
  ModelState state;
  {
    MetricsWriter writer(dir / "metrics.csv");
    TrainHooks hooks;
    hooks.on_step = [&](const ModelState& s, const LossReport& r, double ms) { writer.write(s.iteration, r, ms); };
    state = train(cfg, style, &content, hooks);
  }
  save_checkpoint(state, cfg, dir / "ckpt");
  const auto loaded = load_checkpoint(dir / "ckpt");

  auto same = [](const ParamStore<float>& a, const ParamStore<float>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a.entries()[i].first != b.entries()[i].first || !bitwise_equal(a.entries()[i].second, b.entries()[i].second))
        return false;
    return true;
  };
  const bool round_trip = same(loaded.state.generator, state.generator) &&
                          same(loaded.state.discriminator, state.discriminator) &&
                          same(loaded.state.gen_adam.m, state.gen_adam.m) && same(loaded.state.gen_adam.v, state.gen_adam.v) &&
                          same(loaded.state.disc_adam.m, state.disc_adam.m) &&
                          same(loaded.state.disc_adam.v, state.disc_adam.v) && loaded.state.rng == state.rng &&
                          loaded.state.iteration == state.iteration && to_key_values(loaded.config) == to_key_values(cfg);

  // Truncate every blob in turn by one byte.
  int detected = 0, blobs = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir / "ckpt")) {
    if (entry.path().extension() != ".bin") continue;
    ++blobs;
    magic::test::TempDir copy("magic-acceptance");
    std::filesystem::copy(dir / "ckpt", copy.path(), std::filesystem::copy_options::recursive);
    const auto victim = copy / entry.path().filename().string();
    const auto size = std::filesystem::file_size(victim);
    std::filesystem::resize_file(victim, size - 1);
    try {
      load_checkpoint(copy.path());
    } catch (const CheckpointError& e) {
      detected += e.kind() == CheckpointError::Kind::integrity ? 1 : 0;
    }
  }

  std::ifstream in(dir / "metrics.csv");
  std::string header;
  std::getline(in, header);
  const auto rows = read_metrics(dir / "metrics.csv");
  bool columns = true;
  std::string line;
  std::ifstream again(dir / "metrics.csv");
  std::getline(again, line);
  while (std::getline(again, line)) columns = columns && std::count(line.begin(), line.end(), ',') == 8;
  o.detail << "round trip " << (round_trip ? "bitwise" : "DIFFERS") << "; truncation detected in " << detected << "/"
           << blobs << " blobs; metrics header '" << header << "', " << rows.size() << " rows";
  o.require(round_trip, "bitwise round trip");
  o.require(blobs > 0 && detected == blobs, "truncated blobs detected");
  o.require(header == "iteration,adv_d,adv_g,content,entropy,tv,max_usage,total_g,wall_ms" && header == kMetricsHeader &&
                rows.size() == 3 && columns,
            "metrics schema");
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<int, std::pair<const char*, std::function<void(Outcome&)>>>> criteria = {
      {1, {"convexity", convexity}},
      {2, {"permutation invariance", permutation}},
      {3, {"gradient checks", gradients}},
      {4, {"loss bounds", loss_bounds}},
      {5, {"warping identity", warping_identity}},
      {6, {"variable K", variable_k}},
      {7, {"guided training smoke", smoke_training}},
      {8, {"regularizer monotonicity", regularizers}},
      {9, {"rollout", rollout}},
      {10, {"persistence", persistence}},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failures = 0;
  for (const auto& [id, entry] : criteria) {
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      entry.second(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " [exception: " << e.what() << "]";
    }
    failures += o.pass ? 0 : 1;
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, entry.first, o.detail.str().c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
