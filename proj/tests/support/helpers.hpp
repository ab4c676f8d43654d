#pragma once

#include "magic/tensor.hpp"

#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace magic::test {

template <typename T = float>
Tensor4<T> random_tensor(Shape4 s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor4<T> t(s);
  for (auto& v : t.values()) v = T(dist(rng));
  return t;
}

inline std::vector<Index> random_permutation(Index n, std::uint64_t seed) {
  std::vector<Index> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), Index(0));
  std::mt19937_64 rng(seed);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

/// Direct (non-im2col) same-padded convolution used as an oracle.
template <typename T>
Tensor4<T> reference_conv(const Tensor4<T>& x, const Tensor4<T>& w, const Tensor4<T>& b, int stride) {
  const Index k = w.h(), pad = k / 2;
  const Index ho = (x.h() + 2 * pad - k) / stride + 1, wo = (x.w() + 2 * pad - k) / stride + 1;
  Tensor4<T> out(x.n(), w.n(), ho, wo);
  for (Index n = 0; n < x.n(); ++n)
    for (Index co = 0; co < w.n(); ++co)
      for (Index oy = 0; oy < ho; ++oy)
        for (Index ox = 0; ox < wo; ++ox) {
          double acc = b[co];
          for (Index ci = 0; ci < x.c(); ++ci)
            for (Index ky = 0; ky < k; ++ky)
              for (Index kx = 0; kx < k; ++kx) {
                const Index iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= x.h() || ix < 0 || ix >= x.w()) continue;
                acc += double(w(co, ci, ky, kx)) * double(x(n, ci, iy, ix));
              }
          out(n, co, oy, ox) = T(acc);
        }
  return out;
}

}  // namespace magic::test
