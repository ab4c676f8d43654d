#include "magic/losses.hpp"

#include "magic/nn.hpp"

#include <cmath>
#include <limits>

namespace magic {
namespace {

template <typename T>
T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <typename T>
T sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Var<T> bce_with_logits_mean(const Var<T>& logits, bool target_one) {
  const Tensor4<T>& z = logits.value();
  if (!z.all_finite()) throw NumericError("adversarial loss: non-finite logits");
  double acc = 0;
  for (Index i = 0; i < z.size(); ++i) acc += target_one ? softplus(-z[i]) : softplus(z[i]);
  Tensor4<T> out(1, 1, 1, 1);
  out[0] = T(acc / double(z.size()));
  const auto id = logits.id();
  return logits.tape()->record(std::move(out), {logits},
                               [id, target_one](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& g) {
                                 const Tensor4<T>& z = t.value(id);
                                 auto& dz = t.grad_accumulator(id);
                                 const T scale = g[0] / T(z.size());
                                 for (Index i = 0; i < z.size(); ++i) {
                                   dz[i] += scale * (sigmoid(z[i]) - (target_one ? T(1) : T(0)));
                                 }
                               });
}

template <typename T>
void require_weights(const Var<T>& A, const char* op) {
  if (A.shape().c != 1) throw ConfigError(std::string(op) + ": blend weights must be (K, 1, H, W)");
}

}  // namespace

template <typename T>
Var<T> adversarial_loss_d(const Var<T>& real_logits, const Var<T>& fake_logits) {
  if (!(real_logits.shape() == fake_logits.shape())) {
    throw ConfigError("adversarial_loss_d: real and fake logit maps differ in shape");
  }
  return add(bce_with_logits_mean(real_logits, true), bce_with_logits_mean(fake_logits, false));
}

template <typename T>
Var<T> adversarial_loss_g(const Var<T>& fake_logits) {
  return bce_with_logits_mean(fake_logits, true);
}

template <typename T>
Var<T> content_loss(const Var<T>& content, const Var<T>& image, int levels) {
  if (!(content.shape() == image.shape())) {
    throw ConfigError("content_loss: shape mismatch " + to_string(content.shape()) + " vs " +
                      to_string(image.shape()));
  }
  if (levels < 0) throw ConfigError("content_loss: levels must be non-negative");
  Var<T> a = content, b = image;
  for (int l = 0; l < levels; ++l) {
    a = avg_pool2(a);
    b = avg_pool2(b);
  }
  const Tensor4<T>& av = a.value();
  const Tensor4<T>& bv = b.value();
  double acc = 0;
  for (Index i = 0; i < av.size(); ++i) acc += double(av[i] - bv[i]) * double(av[i] - bv[i]);
  Tensor4<T> out(1, 1, 1, 1);
  out[0] = T(acc / double(av.size()));
  const auto aid = a.id(), bid = b.id();
  return a.tape()->record(std::move(out), {a, b},
                          [aid, bid](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& g) {
                            const auto& av = t.value(aid).array();
                            const auto& bv = t.value(bid).array();
                            const T scale = T(2) * g[0] / T(av.size());
                            if (t.needs_grad(aid)) t.grad_accumulator(aid).array() += scale * (av - bv);
                            if (t.needs_grad(bid)) t.grad_accumulator(bid).array() += scale * (bv - av);
                          });
}

template <typename T>
Var<T> entropy_loss(const Var<T>& A) {
  require_weights(A, "entropy_loss");
  const Tensor4<T>& a = A.value();
  const Index HW = a.shape().plane();
  const T eps = T(kEntropyEps);
  double acc = 0;
  // log((a + eps) / (1 + eps)) <= 0, so the result stays in [0, ln K]
  for (Index i = 0; i < a.size(); ++i)
    acc -= double(a[i]) * std::log((double(a[i]) + kEntropyEps) / (1.0 + kEntropyEps));
  Tensor4<T> out(1, 1, 1, 1);
  out[0] = T(acc / double(HW));
  const auto id = A.id();
  return A.tape()->record(std::move(out), {A},
                          [id, HW, eps](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& g) {
                            const Tensor4<T>& a = t.value(id);
                            auto& da = t.grad_accumulator(id);
                            const T scale = g[0] / T(HW);
                            for (Index i = 0; i < a.size(); ++i) {
                              da[i] -= scale * (std::log((a[i] + eps) / (T(1) + eps)) + a[i] / (a[i] + eps));
                            }
                          });
}

template <typename T>
Var<T> tv_loss(const Var<T>& A) {
  require_weights(A, "tv_loss");
  const Tensor4<T>& a = A.value();
  const Index K = a.n(), H = a.h(), W = a.w();
  double acc = 0;
  for (Index k = 0; k < K; ++k) {
    const T* p = a.channel(k, 0);
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        if (x + 1 < W) acc += std::abs(double(p[y * W + x + 1] - p[y * W + x]));
        if (y + 1 < H) acc += std::abs(double(p[(y + 1) * W + x] - p[y * W + x]));
      }
  }
  const double norm = double(K * H * W);
  Tensor4<T> out(1, 1, 1, 1);
  out[0] = T(acc / norm);
  const auto id = A.id();
  return A.tape()->record(std::move(out), {A},
                          [id, K, H, W, norm](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& g) {
                            const Tensor4<T>& a = t.value(id);
                            auto& da = t.grad_accumulator(id);
                            const T scale = g[0] / T(norm);
                            auto sgn = [](T v) { return T((v > T(0)) - (v < T(0))); };
                            for (Index k = 0; k < K; ++k) {
                              const T* p = a.channel(k, 0);
                              T* d = da.channel(k, 0);
                              for (Index y = 0; y < H; ++y)
                                for (Index x = 0; x < W; ++x) {
                                  if (x + 1 < W) {
                                    const T s = scale * sgn(p[y * W + x + 1] - p[y * W + x]);
                                    d[y * W + x + 1] += s;
                                    d[y * W + x] -= s;
                                  }
                                  if (y + 1 < H) {
                                    const T s = scale * sgn(p[(y + 1) * W + x] - p[y * W + x]);
                                    d[(y + 1) * W + x] += s;
                                    d[y * W + x] -= s;
                                  }
                                }
                            }
                          });
}

template <typename T>
Var<T> max_usage_loss(const Var<T>& A) {
  require_weights(A, "max_usage_loss");
  const Tensor4<T>& a = A.value();
  const Index K = a.n(), HW = a.shape().plane();
  Index best = 0;
  double best_sum = -std::numeric_limits<double>::infinity();
  for (Index k = 0; k < K; ++k) {
    double s = 0;
    for (Index p = 0; p < HW; ++p) s += a.channel(k, 0)[p];
    if (s > best_sum) {
      best_sum = s;
      best = k;
    }
  }
  Tensor4<T> out(1, 1, 1, 1);
  out[0] = T(best_sum / double(HW));
  const auto id = A.id();
  return A.tape()->record(std::move(out), {A},
                          [id, best, HW](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& g) {
                            T* d = t.grad_accumulator(id).channel(best, 0);
                            const T v = g[0] / T(HW);
                            for (Index p = 0; p < HW; ++p) d[p] += v;
                          });
}

void LossWeights::validate() const {
  for (double v : {content, tv, entropy, max_usage}) {
    if (!std::isfinite(v) || v < 0) throw ConfigError("loss weights must be finite and non-negative");
  }
}

bool LossReport::all_finite() const { return first_non_finite().empty(); }

std::string LossReport::first_non_finite() const {
  const std::pair<const char*, double> entries[] = {{"adv_d", adv_d},     {"adv_g", adv_g},
                                                    {"content", content}, {"entropy", entropy},
                                                    {"tv", tv},           {"max_usage", max_usage},
                                                    {"total_g", total_g}};
  for (const auto& [name, v] : entries)
    if (!std::isfinite(v)) return name;
  return {};
}

template <typename T>
Var<T> generator_total_loss(const GeneratorLossTerms<T>& terms, const LossWeights& w) {
  w.validate();
  Var<T> total = terms.adv_g;
  auto accumulate = [&](const Var<T>& term, double weight) {
    if (term.valid() && weight != 0) total = add(total, scale(term, T(weight)));
  };
  accumulate(terms.content, w.content);
  accumulate(terms.tv, w.tv);
  accumulate(terms.entropy, w.entropy);
  accumulate(terms.max_usage, w.max_usage);
  return total;
}

#define MAGIC_INSTANTIATE_LOSSES(T)                                               \
  template Var<T> adversarial_loss_d(const Var<T>&, const Var<T>&);              \
  template Var<T> adversarial_loss_g(const Var<T>&);                             \
  template Var<T> content_loss(const Var<T>&, const Var<T>&, int);               \
  template Var<T> entropy_loss(const Var<T>&);                                   \
  template Var<T> tv_loss(const Var<T>&);                                        \
  template Var<T> max_usage_loss(const Var<T>&);                                 \
  template Var<T> generator_total_loss(const GeneratorLossTerms<T>&, const LossWeights&);

MAGIC_INSTANTIATE_LOSSES(float)
MAGIC_INSTANTIATE_LOSSES(double)

}  // namespace magic
