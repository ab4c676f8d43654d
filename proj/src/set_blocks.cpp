#include "magic/set_blocks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <vector>

namespace magic {
namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

// Pixel-major copy: buf[(p * K + k) * C + c] = x(k, c, p).
template <typename T>
std::vector<T> to_pixel_major(const Tensor4<T>& x) {
  const Index K = x.n(), C = x.c(), HW = x.shape().plane();
  std::vector<T> buf(static_cast<std::size_t>(x.size()));
  for (Index k = 0; k < K; ++k)
    for (Index c = 0; c < C; ++c) {
      const T* src = x.channel(k, c);
      for (Index p = 0; p < HW; ++p) buf[(p * K + k) * C + c] = src[p];
    }
  return buf;
}

template <typename T>
void add_from_pixel_major(const std::vector<T>& buf, Tensor4<T>& x) {
  const Index K = x.n(), C = x.c(), HW = x.shape().plane();
  for (Index k = 0; k < K; ++k)
    for (Index c = 0; c < C; ++c) {
      T* dst = x.channel(k, c);
      for (Index p = 0; p < HW; ++p) dst[p] += buf[(p * K + k) * C + c];
    }
}

template <typename T>
Tensor4<T> project(const Tensor4<T>& x, const Tensor4<T>& w) {
  const Index C = x.c(), D = w.n();
  Tensor4<T> out(x.n(), D, x.h(), x.w());
  Eigen::Map<const Mat<T>> wm(w.data(), C, D);
  for (Index n = 0; n < x.n(); ++n) out.plane_matrix(n).noalias() = x.plane_matrix(n) * wm;
  return out;
}

// Canonical order of the K elements at pixel p: lexicographic on their input features.
template <typename T>
void canonical_order(const std::vector<T>& xp, Index p, Index K, Index C, std::vector<Index>& order) {
  order.resize(static_cast<std::size_t>(K));
  std::iota(order.begin(), order.end(), Index(0));
  const T* base = xp.data() + p * K * C;
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return std::lexicographical_compare(base + a * C, base + (a + 1) * C, base + b * C,
                                        base + (b + 1) * C);
  });
}

// Attention probabilities for query i of head h at pixel p, in canonical order.
template <typename T>
void attention_row(const T* q, const T* k, Index K, Index D, Index dh, Index h, Index i,
                   const std::vector<Index>& order, std::vector<T>& prob) {
  const T inv_sqrt = T(1) / std::sqrt(T(dh));
  prob.resize(static_cast<std::size_t>(K));
  T m = -std::numeric_limits<T>::infinity();
  for (Index jj = 0; jj < K; ++jj) {
    const T* qi = q + i * D + h * dh;
    const T* kj = k + order[jj] * D + h * dh;
    T s = 0;
    for (Index d = 0; d < dh; ++d) s += qi[d] * kj[d];
    prob[jj] = s * inv_sqrt;
    m = std::max(m, prob[jj]);
  }
  T z = 0;
  for (Index jj = 0; jj < K; ++jj) {
    prob[jj] = std::exp(prob[jj] - m);
    z += prob[jj];
  }
  for (Index jj = 0; jj < K; ++jj) prob[jj] /= z;
}

}  // namespace

template <typename T>
Var<T> set_attention(const Var<T>& x, const Var<T>& wq, const Var<T>& wk, const Var<T>& wv,
                     const Var<T>& wo, int heads) {
  const Shape4 s = x.shape();
  const Index K = s.n, C = s.c, HW = s.plane();
  const Index D = wq.shape().n;
  for (const auto* w : {&wq, &wk, &wv}) {
    if (w->shape().n != D || w->shape().c != C || w->shape().h != 1 || w->shape().w != 1) {
      throw ConfigError("set_attention: projection must be (D, C, 1, 1)");
    }
  }
  if (wo.shape().n != C || wo.shape().c != D) throw ConfigError("set_attention: output projection must be (C, D, 1, 1)");
  if (heads < 1 || D % heads != 0) throw ConfigError("set_attention: heads must divide the attention width");
  const Index dh = D / heads;

  const Tensor4<T>& xv = x.value();
  auto q = std::make_shared<Tensor4<T>>(project(xv, wq.value()));
  auto kk = std::make_shared<Tensor4<T>>(project(xv, wk.value()));
  auto v = std::make_shared<Tensor4<T>>(project(xv, wv.value()));
  const std::vector<T> xp = to_pixel_major(xv);
  const std::vector<T> qp = to_pixel_major(*q), kp = to_pixel_major(*kk), vp = to_pixel_major(*v);

  // Mixed values, pixel-major (p, i, d).
  std::vector<T> op(static_cast<std::size_t>(HW * K * D), T(0));
  auto orders = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(HW * K));
  std::vector<Index> order;
  std::vector<T> prob;
  for (Index p = 0; p < HW; ++p) {
    canonical_order(xp, p, K, C, order);
    std::copy(order.begin(), order.end(), orders->begin() + p * K);
    const T* qpp = qp.data() + p * K * D;
    const T* kpp = kp.data() + p * K * D;
    const T* vpp = vp.data() + p * K * D;
    T* opp = op.data() + p * K * D;
    for (Index h = 0; h < heads; ++h) {
      for (Index i = 0; i < K; ++i) {
        attention_row(qpp, kpp, K, D, dh, h, i, order, prob);
        for (Index d = h * dh; d < (h + 1) * dh; ++d) {
          T acc = 0;
          for (Index jj = 0; jj < K; ++jj) acc += prob[jj] * vpp[order[jj] * D + d];
          opp[i * D + d] = acc;
        }
      }
    }
  }
  auto o = std::make_shared<Tensor4<T>>(K, D, s.h, s.w);
  for (Index i = 0; i < K; ++i)
    for (Index d = 0; d < D; ++d) {
      T* dst = o->channel(i, d);
      for (Index p = 0; p < HW; ++p) dst[p] = op[(p * K + i) * D + d];
    }

  Tensor4<T> out = xv;
  Eigen::Map<const Mat<T>> wom(wo.value().data(), D, C);
  for (Index n = 0; n < K; ++n) out.plane_matrix(n).noalias() += o->plane_matrix(n) * wom;

  const auto xid = x.id(), qid = wq.id(), kid = wk.id(), vid = wv.id(), oid = wo.id();
  return x.tape()->record(
      std::move(out), {x, wq, wk, wv, wo},
      [=](Tape<T>& t, const Tensor4<T>&, const Tensor4<T>& gy) {
        Eigen::Map<const Mat<T>> wom(t.value(oid).data(), D, C);
        const Tensor4<T>& xv = t.value(xid);
        if (t.needs_grad(xid)) t.grad_accumulator(xid).array() += gy.array();
        if (t.needs_grad(oid)) {
          Eigen::Map<Mat<T>> dwo(t.grad_accumulator(oid).data(), D, C);
          for (Index n = 0; n < K; ++n) dwo.noalias() += o->plane_matrix(n).transpose() * gy.plane_matrix(n);
        }
        const bool want_inner = t.needs_grad(xid) || t.needs_grad(qid) || t.needs_grad(kid) ||
                                t.needs_grad(vid);
        if (!want_inner) return;

        Tensor4<T> dO(K, D, s.h, s.w);
        for (Index n = 0; n < K; ++n) dO.plane_matrix(n).noalias() = gy.plane_matrix(n) * wom.transpose();
        const std::vector<T> dop = to_pixel_major(dO);
        const std::vector<T> qp = to_pixel_major(*q), kp = to_pixel_major(*kk), vp = to_pixel_major(*v);
        std::vector<T> dqp(qp.size(), T(0)), dkp(kp.size(), T(0)), dvp(vp.size(), T(0));
        std::vector<T> prob, dprob;
        std::vector<Index> order(static_cast<std::size_t>(K));
        const T inv_sqrt = T(1) / std::sqrt(T(dh));
        for (Index p = 0; p < HW; ++p) {
          std::copy(orders->begin() + p * K, orders->begin() + (p + 1) * K, order.begin());
          const Index base = p * K * D;
          for (Index h = 0; h < heads; ++h) {
            for (Index i = 0; i < K; ++i) {
              attention_row(qp.data() + base, kp.data() + base, K, D, dh, h, i, order, prob);
              dprob.assign(static_cast<std::size_t>(K), T(0));
              const T* doi = dop.data() + base + i * D + h * dh;
              T dot = 0;
              for (Index jj = 0; jj < K; ++jj) {
                const Index j = order[jj];
                const T* vj = vp.data() + base + j * D + h * dh;
                T* dvj = dvp.data() + base + j * D + h * dh;
                T dp = 0;
                for (Index d = 0; d < dh; ++d) {
                  dp += doi[d] * vj[d];
                  dvj[d] += prob[jj] * doi[d];
                }
                dprob[jj] = dp;
                dot += prob[jj] * dp;
              }
              const T* qi = qp.data() + base + i * D + h * dh;
              T* dqi = dqp.data() + base + i * D + h * dh;
              for (Index jj = 0; jj < K; ++jj) {
                const Index j = order[jj];
                const T ds = prob[jj] * (dprob[jj] - dot) * inv_sqrt;
                const T* kj = kp.data() + base + j * D + h * dh;
                T* dkj = dkp.data() + base + j * D + h * dh;
                for (Index d = 0; d < dh; ++d) {
                  dqi[d] += ds * kj[d];
                  dkj[d] += ds * qi[d];
                }
              }
            }
          }
        }
        Tensor4<T> dQ(K, D, s.h, s.w), dK(K, D, s.h, s.w), dV(K, D, s.h, s.w);
        add_from_pixel_major(dqp, dQ);
        add_from_pixel_major(dkp, dK);
        add_from_pixel_major(dvp, dV);
        const std::pair<std::size_t, const Tensor4<T>*> projections[3] = {{qid, &dQ}, {kid, &dK}, {vid, &dV}};
        for (const auto& [wid, dproj] : projections) {
          Eigen::Map<const Mat<T>> wm(t.value(wid).data(), C, D);
          if (t.needs_grad(wid)) {
            Eigen::Map<Mat<T>> dw(t.grad_accumulator(wid).data(), C, D);
            for (Index n = 0; n < K; ++n) dw.noalias() += xv.plane_matrix(n).transpose() * dproj->plane_matrix(n);
          }
          if (t.needs_grad(xid)) {
            auto& dx = t.grad_accumulator(xid);
            for (Index n = 0; n < K; ++n) dx.plane_matrix(n).noalias() += dproj->plane_matrix(n) * wm.transpose();
          }
        }
      });
}

template <typename T>
void add_set_attention(ParamStore<T>& store, const std::string& prefix, Index channels, int heads,
                       Rng& rng) {
  if (heads < 1 || channels % heads != 0) {
    throw ConfigError("set attention at " + prefix + ": heads (" + std::to_string(heads) +
                      ") must divide width " + std::to_string(channels));
  }
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(double(channels)));
  for (const char* name : {"q", "k", "v", "o"}) {
    Tensor4<T> w(channels, channels, 1, 1);
    for (auto& x : w.values()) x = T(dist(rng));
    store.add(prefix + "." + name, std::move(w));
  }
}

template <typename T>
Var<T> set_attention(Binding<T>& params, const std::string& prefix, const Var<T>& x, int heads) {
  return set_attention(x, params(prefix + ".q"), params(prefix + ".k"), params(prefix + ".v"),
                       params(prefix + ".o"), heads);
}

void UNetConfig::validate() const {
  if (depth < 0) throw ConfigError("UNet depth must be non-negative");
  if (base_channels < 1) throw ConfigError("UNet base_channels must be positive");
  if (set_attention) {
    for (int l = 0; l <= depth; ++l) {
      if (attends(l) && (heads < 1 || width(l) % heads != 0)) {
        throw ConfigError("UNet: heads must divide every attention width");
      }
    }
  }
}

namespace {

ConvBlockOptions block_options(const UNetConfig& cfg, int stride) {
  ConvBlockOptions o;
  o.stride = stride;
  o.normalize = cfg.normalize;
  o.norm_eps = cfg.norm_eps;
  o.activation = Activation::kRelu;
  return o;
}

template <typename T>
Var<T> level_block(Binding<T>& params, const std::string& name, const UNetConfig& cfg, int level,
                   int stride, const Var<T>& x) {
  Var<T> y = conv_block(x, params(name + ".conv.w"), params(name + ".conv.b"), block_options(cfg, stride));
  if (cfg.attends(level)) y = set_attention(params, name + ".attn", y, cfg.heads);
  return y;
}

}  // namespace

template <typename T>
void add_unet_body(ParamStore<T>& store, const std::string& prefix, const UNetConfig& cfg,
                   Index in_channels, Rng& rng) {
  cfg.validate();
  auto level = [&](const std::string& name, int l, Index c_in) {
    add_conv(store, name + ".conv", c_in, cfg.width(l), 5, rng);
    if (cfg.attends(l)) add_set_attention(store, name + ".attn", cfg.width(l), cfg.heads, rng);
  };
  level(prefix + ".enc0", 0, in_channels);
  for (int l = 1; l <= cfg.depth; ++l) level(prefix + ".down" + std::to_string(l), l, cfg.width(l - 1));
  for (int l = cfg.depth - 1; l >= 0; --l) {
    level(prefix + ".up" + std::to_string(l), l, cfg.width(l + 1) + cfg.width(l));
  }
}

template <typename T>
Var<T> unet_body(Binding<T>& params, const std::string& prefix, const UNetConfig& cfg,
                 const Var<T>& x, std::vector<Shape4>* encoder_shapes) {
  const Index align = cfg.alignment();
  if (x.shape().h % align != 0 || x.shape().w % align != 0) {
    throw ConfigError("UNet: spatial size " + std::to_string(x.shape().h) + "x" +
                      std::to_string(x.shape().w) + " not divisible by 2^depth = " +
                      std::to_string(align) + " (pad the input)");
  }
  std::vector<Var<T>> skips;
  skips.push_back(level_block(params, prefix + ".enc0", cfg, 0, 1, x));
  for (int l = 1; l <= cfg.depth; ++l) {
    skips.push_back(level_block(params, prefix + ".down" + std::to_string(l), cfg, l, 2, skips.back()));
  }
  if (encoder_shapes != nullptr) {
    encoder_shapes->clear();
    for (const auto& s : skips) encoder_shapes->push_back(s.shape());
  }
  Var<T> d = skips.back();
  for (int l = cfg.depth - 1; l >= 0; --l) {
    Var<T> merged = concat_channels(upsample_nearest2(d), skips[static_cast<std::size_t>(l)]);
    d = level_block(params, prefix + ".up" + std::to_string(l), cfg, l, 1, merged);
  }
  return d;
}

template <typename T>
void add_unet(ParamStore<T>& store, const std::string& prefix, const UNetConfig& cfg,
              Index in_channels, Index out_channels, Rng& rng) {
  add_unet_body(store, prefix, cfg, in_channels, rng);
  add_conv(store, prefix + ".head", cfg.base_channels, out_channels, 5, rng);
}

template <typename T>
Var<T> st_unet_forward(Binding<T>& params, const std::string& prefix, const UNetConfig& cfg,
                       const Var<T>& x) {
  Var<T> body = unet_body(params, prefix, cfg, x);
  return conv2d(body, params(prefix + ".head.w"), params(prefix + ".head.b"), 1);
}

template <typename T>
Var<T> unet_forward(Binding<T>& params, const std::string& prefix, const UNetConfig& cfg,
                    const Var<T>& x) {
  return tanh(st_unet_forward(params, prefix, cfg, x));
}

namespace {

Interval widen(Interval r, Index by) { return {r.lo - by, r.hi + by}; }
Interval hull(Interval a, Interval b) { return {std::min(a.lo, b.lo), std::max(a.hi, b.hi)}; }
Index floor_div2(Index v) { return v >= 0 ? v / 2 : -((-v + 1) / 2); }

}  // namespace

Interval unet_input_interval(const UNetConfig& cfg, Interval out) {
  const int depth = cfg.depth;
  // Requirements on decoder outputs (index = level) and on skip inputs.
  Interval dec = widen(out, 2);  // head conv
  std::vector<Interval> skip_req(static_cast<std::size_t>(depth + 1));
  Interval bottom = dec;
  for (int l = 0; l < depth; ++l) {
    const Interval concat = widen(dec, 2);
    skip_req[static_cast<std::size_t>(l)] = concat;
    dec = {floor_div2(concat.lo), floor_div2(concat.hi)};
    bottom = dec;
  }
  // bottom is now the requirement on the deepest encoder output.
  Interval enc = bottom;
  for (int l = depth - 1; l >= 0; --l) {
    const Interval from_down = {2 * enc.lo - 2, 2 * enc.hi + 2};
    enc = hull(from_down, skip_req[static_cast<std::size_t>(l)]);
  }
  return widen(enc, 2);  // enc0 conv
}

Index unet_receptive_radius(const UNetConfig& cfg) {
  Index radius = 0;
  for (Index x0 = 0; x0 < cfg.alignment(); ++x0) {
    const Interval r = unet_input_interval(cfg, {x0, x0});
    radius = std::max({radius, x0 - r.lo, r.hi - x0});
  }
  return radius;
}

#define MAGIC_INSTANTIATE_SET_BLOCKS(T)                                                                  \
  template Var<T> set_attention(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&,              \
                                const Var<T>&, int);                                                     \
  template void add_set_attention(ParamStore<T>&, const std::string&, Index, int, Rng&);                 \
  template Var<T> set_attention(Binding<T>&, const std::string&, const Var<T>&, int);                    \
  template void add_unet_body(ParamStore<T>&, const std::string&, const UNetConfig&, Index, Rng&);       \
  template Var<T> unet_body(Binding<T>&, const std::string&, const UNetConfig&, const Var<T>&, std::vector<Shape4>*);          \
  template void add_unet(ParamStore<T>&, const std::string&, const UNetConfig&, Index, Index, Rng&);     \
  template Var<T> st_unet_forward(Binding<T>&, const std::string&, const UNetConfig&, const Var<T>&);    \
  template Var<T> unet_forward(Binding<T>&, const std::string&, const UNetConfig&, const Var<T>&);

MAGIC_INSTANTIATE_SET_BLOCKS(float)
MAGIC_INSTANTIATE_SET_BLOCKS(double)

}  // namespace magic
