#include "magic/generator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace magic {

template <typename T>
bool is_convex(const Tensor4<T>& A, double tol) {
  if (A.c() != 1) return false;
  const Index K = A.n(), HW = A.shape().plane();
  for (Index p = 0; p < HW; ++p) {
    double s = 0;
    for (Index k = 0; k < K; ++k) {
      const T a = A.data()[k * HW + p];
      if (!(a >= T(0))) return false;
      s += a;
    }
    if (std::abs(s - 1.0) > tol) return false;
  }
  return true;
}

template <typename T>
Var<T> assemble_input(const Var<T>& templates, const Var<T>* content) {
  if (content == nullptr) return templates;
  const auto& ts = templates.shape();
  const auto& cs = content->shape();
  if (cs.n != 1 || cs.h != ts.h || cs.w != ts.w) {
    throw ConfigError("assemble_input: content " + to_string(cs) + " does not match templates " +
                      to_string(ts));
  }
  return concat_channels(templates, replicate_elements(*content, ts.n));
}

template <typename T>
Var<T> blend_weights(const Var<T>& logits) {
  const auto& s = logits.shape();
  if (s.c != 1) throw ConfigError("blend_weights: logits must have one channel");
  const Index K = s.n, HW = s.plane();
  const Tensor4<T>& z = logits.value();
  Tensor4<T> out(s);
  std::vector<Index> order(static_cast<std::size_t>(K));
  for (Index p = 0; p < HW; ++p) {
    // Summation order is fixed by the logit values, making the result exactly
    // equivariant under permutations of the set.
    std::iota(order.begin(), order.end(), Index(0));
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return z.data()[a * HW + p] < z.data()[b * HW + p]; });
    const T m = z.data()[order.back() * HW + p];
    T denom = 0;
    for (Index k : order) denom += std::exp(z.data()[k * HW + p] - m);
    for (Index k = 0; k < K; ++k) out.data()[k * HW + p] = std::exp(z.data()[k * HW + p] - m) / denom;
  }
  const auto lid = logits.id();
  return logits.tape()->record(std::move(out), {logits},
                               [lid, K, HW](Tape<T>& t, const Tensor4<T>& a, const Tensor4<T>& g) {
                                 auto& dz = t.grad_accumulator(lid);
                                 for (Index p = 0; p < HW; ++p) {
                                   T dot = 0;
                                   for (Index k = 0; k < K; ++k) dot += a.data()[k * HW + p] * g.data()[k * HW + p];
                                   for (Index k = 0; k < K; ++k) {
                                     dz.data()[k * HW + p] += a.data()[k * HW + p] * (g.data()[k * HW + p] - dot);
                                   }
                                 }
                               });
}

template <typename T>
Var<T> warp_templates(const Var<T>& templates, const Var<T>& theta) {
  return grid_sample_bilinear(templates, theta);
}

template <typename T>
Var<T> set_pool(const Var<T>& templates, const Var<T>& A) {
  const auto& ts = templates.shape();
  const auto& as = A.shape();
  if (as.n != ts.n || as.c != 1 || as.h != ts.h || as.w != ts.w) {
    throw ConfigError("set_pool: weights " + to_string(as) + " do not match templates " + to_string(ts));
  }
  const double tol = std::is_same_v<T, float> ? 1e-4 : 1e-9;
  if (!is_convex(A.value(), tol)) {
    throw ConfigError("set_pool: blend weights are not a convex combination");
  }
  const Index K = ts.n, C = ts.c, HW = ts.plane();
  const Tensor4<T>& m = templates.value();
  const Tensor4<T>& a = A.value();
  Tensor4<T> out(1, C, ts.h, ts.w);
  std::vector<Index> order(static_cast<std::size_t>(K));
  for (Index p = 0; p < HW; ++p) {
    std::iota(order.begin(), order.end(), Index(0));
    std::stable_sort(order.begin(), order.end(), [&](Index x, Index y) {
      const T ax = a.data()[x * HW + p], ay = a.data()[y * HW + p];
      if (ax != ay) return ax < ay;
      for (Index c = 0; c < C; ++c) {
        const T mx = m.channel(x, c)[p];
        const T my = m.channel(y, c)[p];
        if (mx != my) return mx < my;
      }
      return false;
    });
    for (Index c = 0; c < C; ++c) {
      double acc = 0;
      T lo = m.channel(0, c)[p], hi = lo;
      for (Index k : order) {
        const T v = m.channel(k, c)[p];
        acc += double(a.data()[k * HW + p]) * double(v);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      // sum A = 1 only up to rounding; keep the result inside the hull
      out.channel(0, c)[p] = std::clamp(T(acc), lo, hi);
    }
  }
  const auto mid = templates.id(), aid = A.id();
  return templates.tape()->record(
      std::move(out), {templates, A}, [mid, aid, K, C, HW](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& g) {
        const Tensor4<T>& m = t.value(mid);
        const Tensor4<T>& a = t.value(aid);
        if (t.needs_grad(mid)) {
          auto& dm = t.grad_accumulator(mid);
          for (Index k = 0; k < K; ++k)
            for (Index c = 0; c < C; ++c) {
              T* dst = dm.channel(k, c);
              for (Index p = 0; p < HW; ++p) dst[p] += a.data()[k * HW + p] * g.channel(0, c)[p];
            }
        }
        if (t.needs_grad(aid)) {
          auto& da = t.grad_accumulator(aid);
          for (Index k = 0; k < K; ++k)
            for (Index c = 0; c < C; ++c) {
              const T* src = m.channel(k, c);
              for (Index p = 0; p < HW; ++p) da.data()[k * HW + p] += src[p] * g.channel(0, c)[p];
            }
        }
      });
}

void GeneratorConfig::validate() const {
  if (!blend.set_attention) throw ConfigError("generator: blend network must use set attention");
  if (refine.set_attention) throw ConfigError("generator: refinement network is purely convolutional");
  blend.validate();
  refine.validate();
}

template <typename T>
void add_generator(ParamStore<T>& store, const GeneratorConfig& cfg, Rng& rng) {
  cfg.validate();
  add_unet_body(store, "gen.blend", cfg.blend, cfg.input_channels(), rng);
  add_conv(store, "gen.blend.head_a", cfg.blend.base_channels, 1, 5, rng);
  if (cfg.warping) {
    // Zero weights and bias: the predicted warp starts at exactly the identity.
    store.add("gen.blend.head_warp.w", Tensor4<T>(6, cfg.blend.base_channels, 5, 5));
    store.add("gen.blend.head_warp.b", Tensor4<T>(6, 1, 1, 1));
  }
  add_unet(store, "gen.refine", cfg.refine, cfg.refine_input_channels(), 3, rng);
}

template <typename T>
ParamStore<T> init_generator(const GeneratorConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  ParamStore<T> store;
  add_generator(store, cfg, rng);
  return store;
}

template <typename T>
GeneratorVars<T> generator_forward(Binding<T>& params, const GeneratorConfig& cfg,
                                   const Var<T>& memory, const Var<T>* content) {
  if (memory.shape().c != 3) throw ConfigError("generator: templates must have 3 channels");
  if (cfg.guided != (content != nullptr)) {
    throw ConfigError(cfg.guided ? "generator: guided model needs a content image"
                                 : "generator: unguided model takes no content image");
  }
  GeneratorVars<T> out;
  const Var<T> input = assemble_input(memory, content);
  const Var<T> features = unet_body(params, "gen.blend", cfg.blend, input);
  out.logits = conv2d(features, params("gen.blend.head_a.w"), params("gen.blend.head_a.b"), 1);
  out.templates = memory;
  if (cfg.warping) {
    const Var<T> warp_map =
        conv2d(features, params("gen.blend.head_warp.w"), params("gen.blend.head_warp.b"), 1);
    const Var<T> identity = params.tape().constant(identity_theta<T>(memory.shape().n));
    out.theta = add(global_avg_pool(warp_map), identity);
    out.templates = warp_templates(memory, *out.theta);
  }
  out.weights = blend_weights(out.logits);
  out.collage = set_pool(out.templates, out.weights);
  const Var<T> refine_in = content ? concat_channels(out.collage, *content) : out.collage;
  out.refined = unet_forward(params, "gen.refine", cfg.refine, refine_in);
  return out;
}

template <typename T>
GeneratorOutput<T> generate(const ParamStore<T>& params, const GeneratorConfig& cfg,
                            const Tensor4<T>& memory, const Tensor4<T>* content) {
  Tape<T> tape;
  Binding<T> bound(tape, params, false);
  const Var<T> m = tape.constant(memory);
  std::optional<Var<T>> c;
  if (content) c = tape.constant(*content);
  const auto vars = generator_forward(bound, cfg, m, c ? &*c : nullptr);
  GeneratorOutput<T> out{vars.weights.value(), std::nullopt, vars.collage.value(), vars.refined.value()};
  if (vars.theta) out.theta = vars.theta->value();
  return out;
}

Index generator_receptive_radius(const GeneratorConfig& cfg) {
  Index radius = 0;
  for (Index x0 = 0; x0 < cfg.alignment(); ++x0) {
    const Interval mid = unet_input_interval(cfg.refine, {x0, x0});
    const Interval r = unet_input_interval(cfg.blend, mid);
    radius = std::max({radius, x0 - r.lo, r.hi - x0});
  }
  return radius;
}

std::vector<Color> element_palette(Index count, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::vector<Color> colors(static_cast<std::size_t>(count));
  for (auto& c : colors)
    for (auto& v : c) v = dist(rng);
  return colors;
}

Tensor4<float> colorize_weights(const Tensor4<float>& A, std::span<const Color> palette) {
  if (static_cast<Index>(palette.size()) < A.n()) throw ConfigError("colorize_weights: palette too small");
  const Index HW = A.shape().plane();
  Tensor4<float> out(1, 3, A.h(), A.w());
  for (Index k = 0; k < A.n(); ++k)
    for (Index c = 0; c < 3; ++c) {
      float* dst = out.channel(0, c);
      const float* a = A.channel(k, 0);
      for (Index p = 0; p < HW; ++p) dst[p] += a[p] * palette[static_cast<std::size_t>(k)][c];
    }
  return out;
}

Tensor4<float> colorize_weights(const Tensor4<float>& A, std::uint64_t seed) {
  const auto palette = element_palette(A.n(), seed);
  return colorize_weights(A, palette);
}

std::vector<double> usage_fractions(const Tensor4<float>& A) {
  const Index HW = A.shape().plane();
  std::vector<double> out(static_cast<std::size_t>(A.n()), 0.0);
  for (Index k = 0; k < A.n(); ++k) {
    const float* a = A.channel(k, 0);
    double s = 0;
    for (Index p = 0; p < HW; ++p) s += a[p];
    out[static_cast<std::size_t>(k)] = s / double(HW);
  }
  return out;
}

#define MAGIC_INSTANTIATE_GENERATOR(T)                                                          \
  template bool is_convex(const Tensor4<T>&, double);                                          \
  template Var<T> assemble_input(const Var<T>&, const Var<T>*);                                 \
  template Var<T> blend_weights(const Var<T>&);                                                 \
  template Var<T> warp_templates(const Var<T>&, const Var<T>&);                                 \
  template Var<T> set_pool(const Var<T>&, const Var<T>&);                                       \
  template void add_generator(ParamStore<T>&, const GeneratorConfig&, Rng&);                    \
  template ParamStore<T> init_generator(const GeneratorConfig&, std::uint64_t);                 \
  template GeneratorVars<T> generator_forward(Binding<T>&, const GeneratorConfig&, const Var<T>&, \
                                              const Var<T>*);                                   \
  template GeneratorOutput<T> generate(const ParamStore<T>&, const GeneratorConfig&,           \
                                       const Tensor4<T>&, const Tensor4<T>*);

MAGIC_INSTANTIATE_GENERATOR(float)
MAGIC_INSTANTIATE_GENERATOR(double)

}  // namespace magic
