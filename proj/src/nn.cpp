#include "magic/nn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace magic {
namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <typename T>
void require_same_shape(const Tensor4<T>& a, const Tensor4<T>& b, const char* op) {
  if (!(a.shape() == b.shape())) {
    throw ConfigError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                      to_string(b.shape()));
  }
}

// Upper bound on the im2col scratch buffer, in scalars. Large images are processed in
// bands of output rows so memory stays bounded regardless of resolution.
constexpr Index kIm2colBudget = Index(1) << 21;

struct ConvGeometry {
  Index c_in, c_out, k, pad, stride;
  Index h, w, h_out, w_out;
  Index patch() const { return c_in * k * k; }
  Index band_rows() const {
    return std::clamp<Index>(kIm2colBudget / std::max<Index>(1, w_out * patch()), 1, h_out);
  }
};

// Valid output columns [lo, hi) for kernel offset kx: 0 <= ox*stride + kx - pad < w.
inline std::pair<Index, Index> valid_span(const ConvGeometry& g, Index kx) {
  const Index off = kx - g.pad;
  Index lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  Index hi = g.w - 1 - off < 0 ? 0 : (g.w - 1 - off) / g.stride + 1;
  lo = std::min(lo, g.w_out);
  hi = std::clamp(hi, lo, g.w_out);
  return {lo, hi};
}

// Fills cols (rows = output pixels of rows [oy0, oy1), cols = (ci, ky, kx)).
// The edge loops are a pixel or two long; GCC would otherwise turn them into memset calls.
template <typename T>
#if defined(__GNUC__) && !defined(__clang__)
__attribute__((optimize("no-tree-loop-distribute-patterns")))
#endif
void im2col(const T* x, const ConvGeometry& g, Index oy0, Index oy1, Mat<T>& cols) {
  const Index rows = (oy1 - oy0) * g.w_out;
  cols.resize(rows, g.patch());
  for (Index ci = 0; ci < g.c_in; ++ci) {
    const T* plane = x + ci * g.h * g.w;
    for (Index ky = 0; ky < g.k; ++ky) {
      for (Index kx = 0; kx < g.k; ++kx) {
        T* col = cols.col((ci * g.k + ky) * g.k + kx).data();
        const auto [lo, hi] = valid_span(g, kx);
        const Index off = kx - g.pad;
        for (Index oy = oy0; oy < oy1; ++oy) {
          const Index iy = oy * g.stride + ky - g.pad;
          T* dst = col + (oy - oy0) * g.w_out;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(dst, g.w_out, T(0));
            continue;
          }
          const T* src = plane + iy * g.w + (off + lo * g.stride);
          for (Index ox = 0; ox < lo; ++ox) dst[ox] = T(0);
          if (g.stride == 1) {
            std::copy(src, src + (hi - lo), dst + lo);
          } else {
            for (Index ox = lo; ox < hi; ++ox) dst[ox] = src[(ox - lo) * g.stride];
          }
          for (Index ox = hi; ox < g.w_out; ++ox) dst[ox] = T(0);
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const Mat<T>& cols, const ConvGeometry& g, Index oy0, Index oy1, T* dx) {
  for (Index ci = 0; ci < g.c_in; ++ci) {
    T* plane = dx + ci * g.h * g.w;
    for (Index ky = 0; ky < g.k; ++ky) {
      for (Index kx = 0; kx < g.k; ++kx) {
        const T* col = cols.col((ci * g.k + ky) * g.k + kx).data();
        const auto [lo, hi] = valid_span(g, kx);
        const Index off = kx - g.pad;
        for (Index oy = oy0; oy < oy1; ++oy) {
          const Index iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = col + (oy - oy0) * g.w_out;
          T* dst = plane + iy * g.w + (off + lo * g.stride);
          if (g.stride == 1) {
            for (Index ox = lo; ox < hi; ++ox) dst[ox - lo] += src[ox];
          } else {
            for (Index ox = lo; ox < hi; ++ox) dst[(ox - lo) * g.stride] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void check_finite(const Tensor4<T>& x, const char* op) {
  if (!x.all_finite()) {
    throw NumericError(std::string(op) + ": non-finite input (corrupted upstream state)");
  }
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride) {
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (ws.h != ws.w || ws.h % 2 == 0) throw ConfigError("conv2d: kernel must be square and odd");
  if (ws.c != xs.c) {
    throw ConfigError("conv2d: kernel expects " + std::to_string(ws.c) + " input channels, got " +
                      std::to_string(xs.c));
  }
  if (bias.shape().n != ws.n || bias.value().size() != ws.n) {
    throw ConfigError("conv2d: bias must have one entry per output channel");
  }
  if (stride < 1) throw ConfigError("conv2d: stride must be positive");

  ConvGeometry g{};
  g.c_in = xs.c;
  g.c_out = ws.n;
  g.k = ws.h;
  g.pad = ws.h / 2;
  g.stride = stride;
  g.h = xs.h;
  g.w = xs.w;
  g.h_out = (xs.h + 2 * g.pad - g.k) / stride + 1;
  g.w_out = (xs.w + 2 * g.pad - g.k) / stride + 1;

  const Tensor4<T>& xv = x.value();
  Tensor4<T> out(xs.n, g.c_out, g.h_out, g.w_out);
  Eigen::Map<const Mat<T>> wt(weight.value().data(), g.patch(), g.c_out);
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.value().data(), g.c_out);
  const Index band = g.band_rows();

  Mat<T> cols;
  for (Index n = 0; n < xs.n; ++n) {
    auto out_n = out.plane_matrix(n);
    for (Index oy0 = 0; oy0 < g.h_out; oy0 += band) {
      const Index oy1 = std::min(g.h_out, oy0 + band);
      im2col(xv.element(n), g, oy0, oy1, cols);
      auto rows = out_n.middleRows(oy0 * g.w_out, (oy1 - oy0) * g.w_out);
      rows.noalias() = cols * wt;
      rows.rowwise() += b;
    }
  }

  Tape<T>& tape = *x.tape();
  const auto xid = x.id(), wid = weight.id(), bid = bias.id();
  return tape.record(std::move(out), {x, weight, bias},
                     [g, band, xid, wid, bid](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& gy) {
                       const Tensor4<T>& xv = t.value(xid);
                       Eigen::Map<const Mat<T>> wt(t.value(wid).data(), g.patch(), g.c_out);
                       const bool want_x = t.needs_grad(xid);
                       const bool want_w = t.needs_grad(wid);
                       if (t.needs_grad(bid)) {
                         auto& db = t.grad_accumulator(bid);
                         for (Index n = 0; n < gy.n(); ++n) {
                           for (Index c = 0; c < g.c_out; ++c) {
                             const T* p = gy.channel(n, c);
                             T s = 0;
                             for (Index i = 0; i < gy.shape().plane(); ++i) s += p[i];
                             db[c] += s;
                           }
                         }
                       }
                       if (!want_x && !want_w) return;
                       Mat<T> cols, dcols;
                       Mat<T> dwt;
                       if (want_w) dwt = Mat<T>::Zero(g.patch(), g.c_out);
                       for (Index n = 0; n < gy.n(); ++n) {
                         auto gy_n = gy.plane_matrix(n);
                         for (Index oy0 = 0; oy0 < g.h_out; oy0 += band) {
                           const Index oy1 = std::min(g.h_out, oy0 + band);
                           auto grows = gy_n.middleRows(oy0 * g.w_out, (oy1 - oy0) * g.w_out);
                           if (want_w) {
                             im2col(xv.element(n), g, oy0, oy1, cols);
                             dwt.noalias() += cols.transpose() * grows;
                           }
                           if (want_x) {
                             dcols.noalias() = grows * wt.transpose();
                             col2im_add(dcols, g, oy0, oy1, t.grad_accumulator(xid).element(n));
                           }
                         }
                       }
                       if (want_w) {
                         auto& dw = t.grad_accumulator(wid);
                         Eigen::Map<Mat<T>>(dw.data(), g.patch(), g.c_out) += dwt;
                       }
                     });
}

template <typename T>
Var<T> instance_norm(const Var<T>& x, T eps) {
  if (!(eps > T(0))) throw ConfigError("instance_norm: eps must be positive");
  const Tensor4<T>& xv = x.value();
  check_finite(xv, "instance_norm");
  const Index planes = xv.n() * xv.c();
  const Index hw = xv.shape().plane();
  Tensor4<T> out(xv.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(planes));
  for (Index p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * hw;
    T* dst = out.data() + p * hw;
    double sum = 0;
    for (Index i = 0; i < hw; ++i) sum += src[i];
    const double m = sum / double(hw);
    double sq = 0;
    for (Index i = 0; i < hw; ++i) sq += (src[i] - m) * (src[i] - m);
    const double var = sq / double(hw);
    const double s = 1.0 / std::sqrt(var + double(eps));
    inv_std[p] = T(s);
    for (Index i = 0; i < hw; ++i) dst[i] = T((src[i] - m) * s);
  }
  const auto xid = x.id();
  return x.tape()->record(
      std::move(out), {x},
      [xid, hw, inv_std = std::move(inv_std)](Tape<T>& t, const Tensor4<T>& y, const Tensor4<T>& gy) {
        auto& dx = t.grad_accumulator(xid);
        for (std::size_t p = 0; p < inv_std.size(); ++p) {
          const T* yp = y.data() + p * hw;
          const T* gp = gy.data() + p * hw;
          T* dp = dx.data() + p * hw;
          double mg = 0, mgy = 0;
          for (Index i = 0; i < hw; ++i) {
            mg += gp[i];
            mgy += gp[i] * yp[i];
          }
          mg /= double(hw);
          mgy /= double(hw);
          const double s = inv_std[p];
          for (Index i = 0; i < hw; ++i) dp[i] += T(s * (gp[i] - mg - yp[i] * mgy));
        }
      });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor4<T> out(x.shape());
  out.array() = x.value().array().max(T(0));
  const auto xid = x.id();
  return x.tape()->record(std::move(out), {x},
                          [xid](Tape<T>& t, const Tensor4<T>& y, const Tensor4<T>& gy) {
                            t.grad_accumulator(xid).array() +=
                                (y.array() > T(0)).select(gy.array(), T(0));
                          });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  Tensor4<T> out(x.shape());
  const auto& xa = x.value().array();
  out.array() = (xa > T(0)).select(xa, xa * slope);
  const auto xid = x.id();
  return x.tape()->record(std::move(out), {x},
                          [xid, slope](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& gy) {
                            const auto& xa = t.value(xid).array();
                            t.grad_accumulator(xid).array() +=
                                (xa > T(0)).select(gy.array(), gy.array() * slope);
                          });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  Tensor4<T> out(x.shape());
  out.array() = x.value().array().tanh();
  const auto xid = x.id();
  return x.tape()->record(std::move(out), {x},
                          [xid](Tape<T>& t, const Tensor4<T>& y, const Tensor4<T>& gy) {
                            t.grad_accumulator(xid).array() +=
                                gy.array() * (T(1) - y.array().square());
                          });
}

template <typename T>
Var<T> upsample_nearest2(const Var<T>& x) {
  const auto& s = x.shape();
  Tensor4<T> out(s.n, s.c, s.h * 2, s.w * 2);
  const Tensor4<T>& xv = x.value();
  for (Index p = 0; p < s.n * s.c; ++p) {
    const T* src = xv.data() + p * s.plane();
    T* dst = out.data() + p * s.plane() * 4;
    for (Index y = 0; y < 2 * s.h; ++y)
      for (Index xx = 0; xx < 2 * s.w; ++xx) dst[y * 2 * s.w + xx] = src[(y / 2) * s.w + xx / 2];
  }
  const auto xid = x.id();
  return x.tape()->record(std::move(out), {x},
                          [xid, s](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& gy) {
                            auto& dx = t.grad_accumulator(xid);
                            for (Index p = 0; p < s.n * s.c; ++p) {
                              const T* src = gy.data() + p * s.plane() * 4;
                              T* dst = dx.data() + p * s.plane();
                              for (Index y = 0; y < 2 * s.h; ++y)
                                for (Index xx = 0; xx < 2 * s.w; ++xx)
                                  dst[(y / 2) * s.w + xx / 2] += src[y * 2 * s.w + xx];
                            }
                          });
}

template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ConfigError("avg_pool2: spatial size must be even, got " + to_string(s));
  }
  const Index ho = s.h / 2, wo = s.w / 2;
  Tensor4<T> out(s.n, s.c, ho, wo);
  const Tensor4<T>& xv = x.value();
  for (Index p = 0; p < s.n * s.c; ++p) {
    const T* src = xv.data() + p * s.plane();
    T* dst = out.data() + p * ho * wo;
    for (Index y = 0; y < ho; ++y)
      for (Index xx = 0; xx < wo; ++xx)
        dst[y * wo + xx] = T(0.25) * (src[2 * y * s.w + 2 * xx] + src[2 * y * s.w + 2 * xx + 1] +
                                      src[(2 * y + 1) * s.w + 2 * xx] +
                                      src[(2 * y + 1) * s.w + 2 * xx + 1]);
  }
  const auto xid = x.id();
  return x.tape()->record(std::move(out), {x},
                          [xid, s, ho, wo](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& gy) {
                            auto& dx = t.grad_accumulator(xid);
                            for (Index p = 0; p < s.n * s.c; ++p) {
                              const T* src = gy.data() + p * ho * wo;
                              T* dst = dx.data() + p * s.plane();
                              for (Index y = 0; y < s.h; ++y)
                                for (Index xx = 0; xx < s.w; ++xx)
                                  dst[y * s.w + xx] += T(0.25) * src[(y / 2) * wo + xx / 2];
                            }
                          });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const auto& s = x.shape();
  Tensor4<T> out(s.n, s.c, 1, 1);
  const Tensor4<T>& xv = x.value();
  for (Index p = 0; p < s.n * s.c; ++p) {
    const T* src = xv.data() + p * s.plane();
    T acc = 0;
    for (Index i = 0; i < s.plane(); ++i) acc += src[i];
    out[p] = acc / T(s.plane());
  }
  const auto xid = x.id();
  return x.tape()->record(std::move(out), {x},
                          [xid, s](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& gy) {
                            auto& dx = t.grad_accumulator(xid);
                            for (Index p = 0; p < s.n * s.c; ++p) {
                              T* dst = dx.data() + p * s.plane();
                              const T g = gy[p] / T(s.plane());
                              for (Index i = 0; i < s.plane(); ++i) dst[i] += g;
                            }
                          });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ConfigError("concat_channels: incompatible shapes " + to_string(sa) + " and " +
                      to_string(sb));
  }
  Tensor4<T> out(sa.n, sa.c + sb.c, sa.h, sa.w);
  const Index ba = sa.c * sa.plane(), bb = sb.c * sb.plane();
  for (Index n = 0; n < sa.n; ++n) {
    std::copy_n(a.value().element(n), ba, out.element(n));
    std::copy_n(b.value().element(n), bb, out.element(n) + ba);
  }
  const auto aid = a.id(), bid = b.id();
  return a.tape()->record(
      std::move(out), {a, b}, [aid, bid, ba, bb, n = sa.n](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& gy) {
        for (Index e = 0; e < n; ++e) {
          const T* src = gy.element(e);
          if (t.needs_grad(aid)) {
            T* da = t.grad_accumulator(aid).element(e);
            for (Index i = 0; i < ba; ++i) da[i] += src[i];
          }
          if (t.needs_grad(bid)) {
            T* db = t.grad_accumulator(bid).element(e);
            for (Index i = 0; i < bb; ++i) db[i] += src[ba + i];
          }
        }
      });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, Index begin, Index count) {
  const auto& s = x.shape();
  if (begin < 0 || count <= 0 || begin + count > s.c) {
    throw ConfigError("slice_channels: range out of bounds for " + to_string(s));
  }
  Tensor4<T> out(s.n, count, s.h, s.w);
  const Index blk = count * s.plane();
  for (Index n = 0; n < s.n; ++n) std::copy_n(x.value().channel(n, begin), blk, out.element(n));
  const auto xid = x.id();
  return x.tape()->record(std::move(out), {x},
                          [xid, s, begin, blk](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& gy) {
                            auto& dx = t.grad_accumulator(xid);
                            for (Index n = 0; n < s.n; ++n) {
                              const T* src = gy.element(n);
                              T* dst = dx.channel(n, begin);
                              for (Index i = 0; i < blk; ++i) dst[i] += src[i];
                            }
                          });
}

template <typename T>
Var<T> concat_elements(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ConfigError("concat_elements: no inputs");
  Shape4 s = parts.front().shape();
  Index total = 0;
  for (const auto& p : parts) {
    const auto& ps = p.shape();
    if (ps.c != s.c || ps.h != s.h || ps.w != s.w) {
      throw ConfigError("concat_elements: incompatible shapes");
    }
    total += ps.n;
  }
  Tensor4<T> out(total, s.c, s.h, s.w);
  std::vector<std::pair<std::size_t, Index>> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.data() + at);
    offsets.emplace_back(p.id(), at);
    at += p.value().size();
  }
  std::vector<Var<T>> parents(parts.begin(), parts.end());
  return parts.front().tape()->record_range(
      std::move(out), parents,
      [offsets = std::move(offsets)](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& gy) {
        for (const auto& [id, off] : offsets) {
          if (!t.needs_grad(id)) continue;
          auto& d = t.grad_accumulator(id);
          for (Index i = 0; i < d.size(); ++i) d[i] += gy[off + i];
        }
      });
}

template <typename T>
Var<T> replicate_elements(const Var<T>& x, Index count) {
  const auto& s = x.shape();
  if (s.n != 1) throw ConfigError("replicate_elements: input must hold a single element");
  if (count < 1) throw ConfigError("replicate_elements: count must be positive");
  Tensor4<T> out(count, s.c, s.h, s.w);
  const Index blk = s.c * s.plane();
  for (Index n = 0; n < count; ++n) std::copy_n(x.value().data(), blk, out.element(n));
  const auto xid = x.id();
  return x.tape()->record(std::move(out), {x},
                          [xid, blk, count](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& gy) {
                            auto& dx = t.grad_accumulator(xid);
                            for (Index n = 0; n < count; ++n) {
                              const T* src = gy.element(n);
                              for (Index i = 0; i < blk; ++i) dx[i] += src[i];
                            }
                          });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor4<T> out(a.shape());
  out.array() = a.value().array() + b.value().array();
  const auto aid = a.id(), bid = b.id();
  return a.tape()->record(std::move(out), {a, b},
                          [aid, bid](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& gy) {
                            if (t.needs_grad(aid)) t.grad_accumulator(aid).array() += gy.array();
                            if (t.needs_grad(bid)) t.grad_accumulator(bid).array() += gy.array();
                          });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor4<T> out(x.shape());
  out.array() = x.value().array() * factor;
  const auto xid = x.id();
  return x.tape()->record(std::move(out), {x},
                          [xid, factor](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& gy) {
                            t.grad_accumulator(xid).array() += gy.array() * factor;
                          });
}

template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor4<T>& weights) {
  require_same_shape(x.value(), weights, "weighted_sum");
  Tensor4<T> out(1, 1, 1, 1);
  T acc = 0;
  for (Index i = 0; i < weights.size(); ++i) acc += x.value()[i] * weights[i];
  out[0] = acc;
  const auto xid = x.id();
  return x.tape()->record(std::move(out), {x},
                          [xid, weights](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& gy) {
                            t.grad_accumulator(xid).array() += weights.array() * gy[0];
                          });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  Tensor4<T> out(1, 1, 1, 1);
  T acc = 0;
  for (Index i = 0; i < x.value().size(); ++i) acc += x.value()[i];
  const T count = T(x.value().size());
  out[0] = acc / count;
  const auto xid = x.id();
  return x.tape()->record(std::move(out), {x},
                          [xid, count](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& gy) {
                            t.grad_accumulator(xid).array() += gy[0] / count;
                          });
}

template <typename T>
Tensor4<T> identity_theta(Index elements) {
  Tensor4<T> theta(elements, 6, 1, 1);
  for (Index n = 0; n < elements; ++n) {
    theta(n, 0, 0, 0) = T(1);
    theta(n, 4, 0, 0) = T(1);
  }
  return theta;
}

namespace {

// Source pixel coordinate for output pixel (row, col). Written relative to the output
// pixel so an identity map yields exactly integer coordinates.
template <typename T>
struct SamplePoint {
  T xn, yn;  // normalised output coordinates
  T ix, iy;  // source pixel coordinates
};

template <typename T>
SamplePoint<T> sample_point(const T* th, Index row, Index col, Index h, Index w) {
  SamplePoint<T> p;
  p.xn = T(2 * col + 1) / T(w) - T(1);
  p.yn = T(2 * row + 1) / T(h) - T(1);
  const T du = (th[0] - T(1)) * p.xn + th[1] * p.yn + th[2];
  const T dv = th[3] * p.xn + (th[4] - T(1)) * p.yn + th[5];
  p.ix = T(col) + du * T(w) / T(2);
  p.iy = T(row) + dv * T(h) / T(2);
  return p;
}

}  // namespace

template <typename T>
Var<T> grid_sample_bilinear(const Var<T>& x, const Var<T>& theta) {
  const auto& s = x.shape();
  const auto& ts = theta.shape();
  if (ts.n != s.n || ts.c * ts.h * ts.w != 6) {
    throw ConfigError("grid_sample_bilinear: need one 6-parameter affine map per element");
  }
  const Tensor4<T>& xv = x.value();
  const Tensor4<T>& tv = theta.value();
  check_finite(xv, "grid_sample_bilinear");
  check_finite(tv, "grid_sample_bilinear");
  Tensor4<T> out(s);
  for (Index n = 0; n < s.n; ++n) {
    const T* th = tv.data() + n * 6;
    for (Index r = 0; r < s.h; ++r) {
      for (Index col = 0; col < s.w; ++col) {
        const auto p = sample_point(th, r, col, s.h, s.w);
        const Index x0 = static_cast<Index>(std::floor(p.ix));
        const Index y0 = static_cast<Index>(std::floor(p.iy));
        const T fx = p.ix - T(x0), fy = p.iy - T(y0);
        const T wts[4] = {(T(1) - fx) * (T(1) - fy), fx * (T(1) - fy), (T(1) - fx) * fy, fx * fy};
        const Index xs[4] = {x0, x0 + 1, x0, x0 + 1};
        const Index ys[4] = {y0, y0, y0 + 1, y0 + 1};
        for (Index c = 0; c < s.c; ++c) {
          const T* plane = xv.channel(n, c);
          T v = 0;
          for (int q = 0; q < 4; ++q) {
            if (xs[q] >= 0 && xs[q] < s.w && ys[q] >= 0 && ys[q] < s.h) {
              v += wts[q] * plane[ys[q] * s.w + xs[q]];
            }
          }
          out(n, c, r, col) = v;
        }
      }
    }
  }
  const auto xid = x.id(), tid = theta.id();
  return x.tape()->record(
      std::move(out), {x, theta}, [xid, tid, s](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& gy) {
        const Tensor4<T>& xv = t.value(xid);
        const Tensor4<T>& tv = t.value(tid);
        const bool want_x = t.needs_grad(xid), want_t = t.needs_grad(tid);
        Tensor4<T>* dx = want_x ? &t.grad_accumulator(xid) : nullptr;
        Tensor4<T>* dt = want_t ? &t.grad_accumulator(tid) : nullptr;
        for (Index n = 0; n < s.n; ++n) {
          const T* th = tv.data() + n * 6;
          T acc[6] = {0, 0, 0, 0, 0, 0};
          for (Index r = 0; r < s.h; ++r) {
            for (Index col = 0; col < s.w; ++col) {
              const auto p = sample_point(th, r, col, s.h, s.w);
              const Index x0 = static_cast<Index>(std::floor(p.ix));
              const Index y0 = static_cast<Index>(std::floor(p.iy));
              const T fx = p.ix - T(x0), fy = p.iy - T(y0);
              auto inside = [&](Index yy, Index xx) { return xx >= 0 && xx < s.w && yy >= 0 && yy < s.h; };
              T d_ix = 0, d_iy = 0;
              for (Index c = 0; c < s.c; ++c) {
                const T g = gy(n, c, r, col);
                if (g == T(0)) continue;
                const T* plane = xv.channel(n, c);
                auto at = [&](Index yy, Index xx) { return inside(yy, xx) ? plane[yy * s.w + xx] : T(0); };
                const T v00 = at(y0, x0), v01 = at(y0, x0 + 1), v10 = at(y0 + 1, x0),
                        v11 = at(y0 + 1, x0 + 1);
                if (want_t) {
                  d_ix += g * ((T(1) - fy) * (v01 - v00) + fy * (v11 - v10));
                  d_iy += g * ((T(1) - fx) * (v10 - v00) + fx * (v11 - v01));
                }
                if (want_x) {
                  T* dplane = dx->channel(n, c);
                  const T wts[4] = {(T(1) - fx) * (T(1) - fy), fx * (T(1) - fy), (T(1) - fx) * fy,
                                    fx * fy};
                  const Index xs[4] = {x0, x0 + 1, x0, x0 + 1};
                  const Index ys[4] = {y0, y0, y0 + 1, y0 + 1};
                  for (int q = 0; q < 4; ++q)
                    if (inside(ys[q], xs[q])) dplane[ys[q] * s.w + xs[q]] += wts[q] * g;
                }
              }
              if (want_t) {
                const T hw = T(s.w) / T(2), hh = T(s.h) / T(2);
                acc[0] += d_ix * p.xn * hw;
                acc[1] += d_ix * p.yn * hw;
                acc[2] += d_ix * hw;
                acc[3] += d_iy * p.xn * hh;
                acc[4] += d_iy * p.yn * hh;
                acc[5] += d_iy * hh;
              }
            }
          }
          if (want_t) {
            for (int q = 0; q < 6; ++q) (*dt)[n * 6 + q] += acc[q];
          }
        }
      });
}

template <typename T>
Var<T> conv_block(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                  const ConvBlockOptions& opts) {
  Var<T> y = conv2d(x, weight, bias, opts.stride);
  if (opts.normalize) y = instance_norm(y, T(opts.norm_eps));
  switch (opts.activation) {
    case Activation::kRelu:
      return relu(y);
    case Activation::kLeakyRelu:
      return leaky_relu(y, T(opts.leaky_slope));
    case Activation::kNone:
      break;
  }
  return y;
}

#define MAGIC_INSTANTIATE_NN(T)                                                              \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int);                  \
  template Var<T> instance_norm(const Var<T>&, T);                                           \
  template Var<T> relu(const Var<T>&);                                                       \
  template Var<T> leaky_relu(const Var<T>&, T);                                              \
  template Var<T> tanh(const Var<T>&);                                                       \
  template Var<T> upsample_nearest2(const Var<T>&);                                          \
  template Var<T> avg_pool2(const Var<T>&);                                                  \
  template Var<T> global_avg_pool(const Var<T>&);                                            \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                             \
  template Var<T> slice_channels(const Var<T>&, Index, Index);                               \
  template Var<T> concat_elements(std::span<const Var<T>>);                                  \
  template Var<T> replicate_elements(const Var<T>&, Index);                                  \
  template Var<T> add(const Var<T>&, const Var<T>&);                                         \
  template Var<T> scale(const Var<T>&, T);                                                   \
  template Var<T> weighted_sum(const Var<T>&, const Tensor4<T>&);                            \
  template Var<T> mean(const Var<T>&);                                                       \
  template Var<T> grid_sample_bilinear(const Var<T>&, const Var<T>&);                        \
  template Tensor4<T> identity_theta(Index);                                                 \
  template Var<T> conv_block(const Var<T>&, const Var<T>&, const Var<T>&, const ConvBlockOptions&);

MAGIC_INSTANTIATE_NN(float)
MAGIC_INSTANTIATE_NN(double)

}  // namespace magic
