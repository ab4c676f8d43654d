#pragma once

#include "magic/autodiff.hpp"
#include "magic/errors.hpp"

#include <string>

namespace magic {

/// Mean binary cross-entropy of real logits against 1 plus fake logits against 0.
/// Minimising it trains the discriminator.
template <typename T>
Var<T> adversarial_loss_d(const Var<T>& real_logits, const Var<T>& fake_logits);

/// Non-saturating generator loss: mean BCE of fake logits against 1.
template <typename T>
Var<T> adversarial_loss_g(const Var<T>& fake_logits);

/// Mean squared difference after `levels` successive 2x average poolings of both images.
template <typename T>
Var<T> content_loss(const Var<T>& content, const Var<T>& image, int levels);

inline constexpr double kEntropyEps = 1e-8;

/// Mean over pixels of -sum_k A log(A + eps). A is (K, 1, H, W).
template <typename T>
Var<T> entropy_loss(const Var<T>& A);

/// Anisotropic L1 total variation of every weight plane, divided by K*H*W.
template <typename T>
Var<T> tv_loss(const Var<T>& A);

/// max_k sum_hw A_k / (H*W): the spatial share of the dominant template.
template <typename T>
Var<T> max_usage_loss(const Var<T>& A);

struct LossWeights {
  double content = 30.0;
  double tv = 1.0;
  double entropy = 1.0;
  double max_usage = 1.0;

  void validate() const;
};

struct LossReport {
  double adv_d = 0;
  double adv_g = 0;
  double content = 0;
  double entropy = 0;
  double tv = 0;
  double max_usage = 0;
  double total_g = 0;

  bool all_finite() const;
  /// Name of the first non-finite entry, or empty.
  std::string first_non_finite() const;
};

template <typename T>
struct GeneratorLossTerms {
  Var<T> adv_g;
  Var<T> content;  // invalid in unguided mode
  Var<T> entropy;
  Var<T> tv;
  Var<T> max_usage;
};

/// adv_g + w.content * content + w.tv * tv + w.entropy * entropy + w.max_usage * max_usage.
/// The content term is skipped when absent (unguided).
template <typename T>
Var<T> generator_total_loss(const GeneratorLossTerms<T>& terms, const LossWeights& w);

}  // namespace magic
