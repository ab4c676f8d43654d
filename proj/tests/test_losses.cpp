#include "doctest.h"

#include "magic/generator.hpp"
#include "magic/gradcheck.hpp"
#include "magic/losses.hpp"
#include "support/helpers.hpp"

#include <cmath>
#include <limits>

using namespace magic;
using magic::test::random_tensor;

namespace {

double value_of(const Var<double>& v) { return v.value()[0]; }

Tensor4<double> uniform_weights(Index K, Index h, Index w) {
  return Tensor4<double>::constant({K, 1, h, w}, 1.0 / double(K));
}

Tensor4<double> random_weights(Index K, Index h, Index w, std::uint64_t seed, double spread = 3) {
  Tape<double> tape;
  return blend_weights(tape.constant(random_tensor<double>({K, 1, h, w}, seed, -spread, spread))).value();
}

}  // namespace

TEST_CASE("adversarial_loss_d: hand-evaluated values") {
  Tape<double> tape;
  auto zero = tape.constant(Tensor4<double>(1, 1, 2, 2));
  CHECK(value_of(adversarial_loss_d(zero, zero)) == doctest::Approx(2 * std::log(2.0)).epsilon(1e-12));
  CHECK(std::abs(value_of(adversarial_loss_d(zero, zero)) - 1.3863) < 1e-4);

  auto real = tape.constant(Tensor4<double>::constant({1, 1, 1, 1}, 1.0));
  auto fake = tape.constant(Tensor4<double>::constant({1, 1, 1, 1}, -1.0));
  CHECK(value_of(adversarial_loss_d(real, fake)) == doctest::Approx(2 * std::log1p(std::exp(-1.0))));
  CHECK(std::abs(value_of(adversarial_loss_d(real, fake)) - 0.6265) < 1e-4);

  auto big = tape.constant(Tensor4<double>::constant({1, 1, 1, 1}, 60.0));
  auto small = tape.constant(Tensor4<double>::constant({1, 1, 1, 1}, -60.0));
  CHECK(value_of(adversarial_loss_d(big, small)) < 1e-20);

  CHECK_THROWS_AS(adversarial_loss_d(zero, real), ConfigError);
  Tensor4<double> nan(1, 1, 1, 1);
  nan[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(adversarial_loss_d(real, tape.constant(nan)), NumericError);
}

TEST_CASE("adversarial_loss_g: hand-evaluated values") {
  Tape<double> tape;
  CHECK(value_of(adversarial_loss_g(tape.constant(Tensor4<double>(1, 1, 3, 3)))) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  auto minus_one = tape.constant(Tensor4<double>::constant({1, 1, 1, 1}, -1.0));
  CHECK(std::abs(value_of(adversarial_loss_g(minus_one)) - 1.3133) < 1e-4);
  CHECK(value_of(adversarial_loss_g(tape.constant(Tensor4<double>::constant({1, 1, 1, 1}, 60.0)))) < 1e-20);
}

TEST_CASE("content_loss: pooled mean squared difference") {
  Tape<double> tape;
  const auto x = random_tensor<double>({1, 3, 8, 8}, 1);
  for (int levels : {0, 1, 2, 3}) CHECK(value_of(content_loss(tape.constant(x), tape.constant(x), levels)) == 0.0);

  auto zeros = tape.constant(Tensor4<double>(1, 3, 4, 4));
  auto ones = tape.constant(Tensor4<double>::constant({1, 3, 4, 4}, 1.0));
  CHECK(value_of(content_loss(zeros, ones, 0)) == 1.0);

  Tensor4<double> ic(1, 1, 2, 2), im(1, 1, 2, 2);
  im[0] = 1;
  im[3] = 1;
  CHECK(value_of(content_loss(tape.constant(ic), tape.constant(im), 1)) == doctest::Approx(0.25).epsilon(1e-15));

  const auto y = random_tensor<double>({1, 3, 8, 8}, 2);
  CHECK(value_of(content_loss(tape.constant(x), tape.constant(y), 2)) ==
        value_of(content_loss(tape.constant(y), tape.constant(x), 2)));
  CHECK_THROWS_AS(content_loss(zeros, tape.constant(x), 0), ConfigError);
}

TEST_CASE("entropy_loss: examples and bounds") {
  Tape<double> tape;
  for (Index K : {1, 2, 5}) {
    Tensor4<double> onehot(K, 1, 3, 3);
    for (Index p = 0; p < 9; ++p) onehot.channel(p % K, 0)[p] = 1.0;
    CHECK(std::abs(value_of(entropy_loss(tape.constant(onehot)))) <= 1e-6);
    CHECK(std::abs(value_of(entropy_loss(tape.constant(uniform_weights(K, 3, 3)))) - std::log(double(K))) <= 1e-6);
  }
  Tensor4<double> a(2, 1, 1, 1);
  a[0] = 0.9;
  a[1] = 0.1;
  const double expected = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
  CHECK(value_of(entropy_loss(tape.constant(a))) == doctest::Approx(expected).epsilon(1e-7));
  CHECK(std::abs(value_of(entropy_loss(tape.constant(a))) - 0.3251) < 1e-4);

  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Index K = 1 + Index(seed % 6);
    const double e = value_of(entropy_loss(tape.constant(random_weights(K, 4, 4, seed, 6))));
    CHECK(e >= -1e-6);
    CHECK(e <= std::log(double(K)) + 1e-6);
  }
}

TEST_CASE("tv_loss: examples and bounds") {
  Tape<double> tape;
  CHECK(value_of(tv_loss(tape.constant(uniform_weights(3, 5, 4)))) == 0.0);
  CHECK(value_of(tv_loss(tape.constant(random_weights(3, 1, 1, 1)))) == 0.0);
  Tensor4<double> checker(1, 1, 2, 2);
  checker[0] = 0;
  checker[1] = 1;
  checker[2] = 1;
  checker[3] = 0;
  CHECK(value_of(tv_loss(tape.constant(checker))) == 1.0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CHECK(value_of(tv_loss(tape.constant(random_weights(3, 4, 4, seed)))) > 0.0);
  }
}

TEST_CASE("max_usage_loss: examples and bounds") {
  Tape<double> tape;
  CHECK(value_of(max_usage_loss(tape.constant(Tensor4<double>::constant({1, 1, 3, 3}, 1.0)))) == 1.0);
  CHECK(value_of(max_usage_loss(tape.constant(uniform_weights(4, 3, 3)))) == doctest::Approx(0.25).epsilon(1e-15));
  Tensor4<double> a(2, 1, 2, 2);
  const double first[4] = {1, 1, 0.5, 0};
  for (int p = 0; p < 4; ++p) {
    a.channel(0, 0)[p] = first[p];
    a.channel(1, 0)[p] = 1 - first[p];
  }
  CHECK(value_of(max_usage_loss(tape.constant(a))) == 0.625);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Index K = 1 + Index(seed % 6);
    const double m = value_of(max_usage_loss(tape.constant(random_weights(K, 4, 4, seed, 6))));
    CHECK(m >= 1.0 / double(K) - 1e-12);
    CHECK(m <= 1.0 + 1e-12);
  }
}

TEST_CASE("generator_total_loss: weighting") {
  Tape<double> tape;
  const auto a = tape.constant(random_weights(3, 4, 4, 1));
  GeneratorLossTerms<double> terms{adversarial_loss_g(tape.constant(random_tensor<double>({1, 1, 2, 2}, 2))),
                                   content_loss(tape.constant(random_tensor<double>({1, 3, 4, 4}, 3)),
                                                tape.constant(random_tensor<double>({1, 3, 4, 4}, 4)), 1),
                                   entropy_loss(a), tv_loss(a), max_usage_loss(a)};
  LossWeights zero{0, 0, 0, 0};
  CHECK(value_of(generator_total_loss(terms, zero)) == value_of(terms.adv_g));

  LossWeights small{0, 0, 0.5, 0}, large{0, 0, 5, 0};
  const double base = value_of(terms.adv_g);
  CHECK((value_of(generator_total_loss(terms, large)) - base) ==
        doctest::Approx(10 * (value_of(generator_total_loss(terms, small)) - base)).epsilon(1e-12));

  LossWeights all{10, 1, 1, 1};
  const double expected = base + 10 * value_of(terms.content) + value_of(terms.tv) + value_of(terms.entropy) +
                          value_of(terms.max_usage);
  CHECK(value_of(generator_total_loss(terms, all)) == doctest::Approx(expected).epsilon(1e-12));

  // Unguided: no content term, the weight is ignored.
  auto unguided = terms;
  unguided.content = Var<double>();
  CHECK(value_of(generator_total_loss(unguided, all)) == doctest::Approx(expected - 10 * value_of(terms.content)));

  LossWeights negative{1, -1, 1, 1};
  CHECK_THROWS_AS(generator_total_loss(terms, negative), ConfigError);
}

TEST_CASE("gradcheck: losses at K = 2, 2x2") {
  const double tol = 1e-4;
  const auto logits = random_tensor<double>({2, 1, 2, 2}, 5, -2, 2);
  SUBCASE("entropy") {
    auto f = [](Tape<double>&, std::span<const Var<double>> in) { return entropy_loss(blend_weights(in[0])); };
    CHECK(gradcheck_tape(f, {logits}) <= tol);
  }
  SUBCASE("tv") {
    auto f = [](Tape<double>&, std::span<const Var<double>> in) { return tv_loss(blend_weights(in[0])); };
    CHECK(gradcheck_tape(f, {logits}) <= tol);
  }
  SUBCASE("max_usage away from ties") {
    auto f = [](Tape<double>&, std::span<const Var<double>> in) { return max_usage_loss(blend_weights(in[0])); };
    auto skewed = logits;
    for (Index p = 0; p < 4; ++p) skewed.channel(0, 0)[p] += 1.5;
    CHECK(gradcheck_tape(f, {skewed}) <= tol);
  }
  SUBCASE("content") {
    auto f = [](Tape<double>&, std::span<const Var<double>> in) { return content_loss(in[0], in[1], 1); };
    CHECK(gradcheck_tape(f, {random_tensor<double>({1, 3, 2, 2}, 6), random_tensor<double>({1, 3, 2, 2}, 7)}) <= tol);
  }
  SUBCASE("adversarial") {
    auto f = [](Tape<double>&, std::span<const Var<double>> in) {
      return add(adversarial_loss_d(in[0], in[1]), adversarial_loss_g(in[1]));
    };
    CHECK(gradcheck_tape(f, {random_tensor<double>({1, 1, 2, 2}, 8, -3, 3),
                             random_tensor<double>({1, 1, 2, 2}, 9, -3, 3)}) <= tol);
  }
}
