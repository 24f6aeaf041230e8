#pragma once

// Selective state-space layers (Mamba-style) for the temporal streams.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "findrec/ops.hpp"
#include "findrec/params.hpp"
#include "findrec/rng.hpp"

namespace findrec {

// Training-time switches shared by every module of one forward pass.
struct ForwardContext {
  bool training = false;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  double dropout = 0.0;

  std::uint64_t dropout_key(std::uint64_t site) const { return hash_key(seed, step, site); }
};

// Stable 64-bit FNV-1a, used to give every dropout site a fixed id.
inline std::uint64_t site_id(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct MambaConfig {
  std::size_t d_model = 128;
  std::size_t d_state = 16;
  std::size_t expand = 2;
  std::size_t conv_kernel = 4;
  std::size_t n_layers = 2;

  std::size_t d_inner() const { return expand * d_model; }

  void validate() const {
    if (d_model == 0 || d_state == 0 || expand == 0 || conv_kernel == 0 || n_layers == 0) {
      throw ConfigError("mamba dimensions must all be positive");
    }
  }
};

namespace scan_detail {

struct ScanDims {
  std::size_t B, L, D, N;
};

inline ScanDims check_scan_shapes(const Tensor& u, const Tensor& delta, const Tensor& Bm, const Tensor& Cm,
                                  const Tensor& A, const Tensor& Dskip) {
  if (u.rank() != 3 || delta.shape() != u.shape()) {
    throw ShapeMismatch("selective_scan: u and delta must share a (B,L,D) shape");
  }
  const std::size_t B = u.dim(0), L = u.dim(1), D = u.dim(2);
  if (A.rank() != 2 || A.dim(0) != D) throw ShapeMismatch("selective_scan: A must be (D,N)");
  const std::size_t N = A.dim(1);
  if (Bm.shape() != Shape{B, L, N} || Cm.shape() != Shape{B, L, N}) {
    throw ShapeMismatch("selective_scan: B_t and C_t must be (B,L,N)");
  }
  if (Dskip.shape() != Shape{D}) throw ShapeMismatch("selective_scan: D must be (D)");
  return {B, L, D, N};
}

}  // namespace scan_detail

// Literal transcription of the recurrence with an explicit state array:
//   h_t[c,n] = exp(delta_t[c] A[c,n]) h_{t-1}[c,n] + delta_t[c] B_t[n] u_t[c]
//   y_t[c]   = sum_n C_t[n] h_t[c,n] + D[c] u_t[c]
inline Tensor scan_reference(const Tensor& u, const Tensor& delta, const Tensor& Bm, const Tensor& Cm,
                             const Tensor& A, const Tensor& Dskip) {
  const auto [B, L, D, N] = scan_detail::check_scan_shapes(u, delta, Bm, Cm, A, Dskip);
  Tensor y(u.shape(), 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> h(D * N, 0.0);
    for (std::size_t t = 0; t < L; ++t) {
      for (std::size_t c = 0; c < D; ++c) {
        double acc = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const double dt = delta.at(b, t, c);
          h[c * N + n] = std::exp(dt * A.at(c, n)) * h[c * N + n] + dt * Bm.at(b, t, n) * u.at(b, t, c);
          acc += Cm.at(b, t, n) * h[c * N + n];
        }
        y.at(b, t, c) = acc + Dskip[c] * u.at(b, t, c);
      }
    }
  }
  return y;
}

// Differentiable selective scan, O(B L D N). Channels are independent, so the
// loop runs channel-outer with a length-N state; the backward pass recomputes
// each channel's state trajectory instead of storing B*L*D*N values.
inline ad::Var selective_scan(const ad::Var& u, const ad::Var& delta, const ad::Var& Bm, const ad::Var& Cm,
                              const ad::Var& A, const ad::Var& Dskip) {
  const auto dims = scan_detail::check_scan_shapes(u.value(), delta.value(), Bm.value(), Cm.value(),
                                                   A.value(), Dskip.value());
  const auto [B, L, D, N] = dims;
  Tensor y(u.shape(), 0.0);
  {
    const double* ud = u.value().data().data();
    const double* dd = delta.value().data().data();
    const double* bd = Bm.value().data().data();
    const double* cd = Cm.value().data().data();
    const double* ad_ = A.value().data().data();
    const double* sd = Dskip.value().data().data();
    double* yd = y.data().data();
    std::vector<double> h(N);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < D; ++c) {
        std::fill(h.begin(), h.end(), 0.0);
        for (std::size_t t = 0; t < L; ++t) {
          const std::size_t iu = (b * L + t) * D + c;
          const std::size_t in = (b * L + t) * N;
          const double dt = dd[iu];
          const double x = ud[iu];
          double acc = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            h[n] = std::exp(dt * ad_[c * N + n]) * h[n] + dt * bd[in + n] * x;
            acc += cd[in + n] * h[n];
          }
          if (!std::isfinite(acc)) throw NumericalError("selective_scan: state left the finite range");
          yd[iu] = acc + sd[c] * x;
        }
      }
    }
  }
  return ad::make_op("selective_scan", std::move(y), {u, delta, Bm, Cm, A, Dskip}, [dims](ad::Node& self) {
    const auto [B, L, D, N] = dims;
    auto& pu = *self.parents[0];
    auto& pd = *self.parents[1];
    auto& pB = *self.parents[2];
    auto& pC = *self.parents[3];
    auto& pA = *self.parents[4];
    auto& pS = *self.parents[5];
    const double* ud = pu.value.data().data();
    const double* dd = pd.value.data().data();
    const double* bd = pB.value.data().data();
    const double* cd = pC.value.data().data();
    const double* ad_ = pA.value.data().data();
    const double* sd = pS.value.data().data();
    const double* gy = self.grad.data().data();

    // Scratch gradients; copied into parents that need them.
    std::vector<double> gu(B * L * D, 0.0), gdelta(B * L * D, 0.0);
    std::vector<double> gB(B * L * N, 0.0), gC(B * L * N, 0.0);
    std::vector<double> gA(D * N, 0.0), gS(D, 0.0);

    std::vector<double> hs((L + 1) * N);  // hs[t+1] = h_t, hs[0] = 0
    std::vector<double> decay(L * N);
    std::vector<double> gh(N);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < D; ++c) {
        std::fill(hs.begin(), hs.begin() + static_cast<std::ptrdiff_t>(N), 0.0);
        for (std::size_t t = 0; t < L; ++t) {
          const std::size_t iu = (b * L + t) * D + c;
          const std::size_t in = (b * L + t) * N;
          for (std::size_t n = 0; n < N; ++n) {
            const double e = std::exp(dd[iu] * ad_[c * N + n]);
            decay[t * N + n] = e;
            hs[(t + 1) * N + n] = e * hs[t * N + n] + dd[iu] * bd[in + n] * ud[iu];
          }
        }
        std::fill(gh.begin(), gh.end(), 0.0);
        for (std::size_t tt = L; tt-- > 0;) {
          const std::size_t iu = (b * L + tt) * D + c;
          const std::size_t in = (b * L + tt) * N;
          const double g = gy[iu];
          const double dt = dd[iu];
          const double x = ud[iu];
          gS[c] += g * x;
          gu[iu] += g * sd[c];
          for (std::size_t n = 0; n < N; ++n) {
            const double h_t = hs[(tt + 1) * N + n];
            const double h_prev = hs[tt * N + n];
            gC[in + n] += g * h_t;
            gh[n] += g * cd[in + n];
            // h_t = e * h_prev + dt * B * x,  e = exp(dt * A)
            const double e = decay[tt * N + n];
            const double g_e = gh[n] * h_prev;
            gdelta[iu] += g_e * e * ad_[c * N + n] + gh[n] * bd[in + n] * x;
            gA[c * N + n] += g_e * e * dt;
            gB[in + n] += gh[n] * dt * x;
            gu[iu] += gh[n] * dt * bd[in + n];
            gh[n] *= e;  // carried to h_{t-1}
          }
        }
      }
    }
    auto flush = [](ad::Node& p, const std::vector<double>& g) {
      if (!p.requires_grad) return;
      auto dst = p.grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    };
    flush(pu, gu);
    flush(pd, gdelta);
    flush(pB, gB);
    flush(pC, gC);
    flush(pA, gA);
    flush(pS, gS);
  });
}

// Depthwise causal convolution over time, left-padded with K-1 zeros:
//   y[b,t,c] = bias[c] + sum_k w[c,k] x[b, t-(K-1)+k, c]
inline ad::Var causal_conv1d(const ad::Var& x, const ad::Var& w, const ad::Var& bias) {
  const auto& s = x.shape();
  if (s.size() != 3 || w.value().rank() != 2 || w.value().dim(0) != s[2] || bias.shape() != Shape{s[2]}) {
    throw ShapeMismatch("causal_conv1d: x " + shape_str(s) + ", w " + shape_str(w.shape()));
  }
  const std::size_t B = s[0], L = s[1], C = s[2], K = w.value().dim(1);
  Tensor y(s);
  const double* xd = x.value().data().data();
  const double* wd = w.value().data().data();
  const double* bd = bias.value().data().data();
  double* yd = y.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < L; ++t) {
      for (std::size_t c = 0; c < C; ++c) {
        double acc = bd[c];
        for (std::size_t k = 0; k < K; ++k) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(K - 1);
          if (src < 0) continue;
          acc += wd[c * K + k] * xd[(b * L + static_cast<std::size_t>(src)) * C + c];
        }
        yd[(b * L + t) * C + c] = acc;
      }
    }
  }
  return ad::make_op("causal_conv1d", std::move(y), {x, w, bias}, [B, L, C, K](ad::Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    const double* g = self.grad.data().data();
    const double* xd = px.value.data().data();
    const double* wd = pw.value.data().data();
    double* gx = px.requires_grad ? px.grad_buffer().data().data() : nullptr;
    double* gw = pw.requires_grad ? pw.grad_buffer().data().data() : nullptr;
    double* gb = pb.requires_grad ? pb.grad_buffer().data().data() : nullptr;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 0; t < L; ++t) {
        for (std::size_t c = 0; c < C; ++c) {
          const double gv = g[(b * L + t) * C + c];
          if (gb) gb[c] += gv;
          for (std::size_t k = 0; k < K; ++k) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(K - 1);
            if (src < 0) continue;
            const std::size_t xi = (b * L + static_cast<std::size_t>(src)) * C + c;
            if (gw) gw[c * K + k] += gv * xd[xi];
            if (gx) gx[xi] += gv * wd[c * K + k];
          }
        }
      }
    }
  });
}

// Gated selective-SSM block: in-projection into (u, gate), causal conv + silu
// on u, input-dependent (delta, B_t, C_t), scan, silu(gate) gating, out-projection.
struct MambaBlock {
  Linear in_proj;       // d_model -> 2 d_inner, no bias
  ad::Var conv_weight;  // (d_inner, K)
  ad::Var conv_bias;    // (d_inner)
  Linear dt_proj;       // d_inner -> d_inner
  ad::Var w_b;          // (d_inner, N)
  ad::Var w_c;          // (d_inner, N)
  ad::Var a_log;        // (d_inner, N); A = -exp(a_log)
  ad::Var d_skip;       // (d_inner)
  Linear out_proj;      // d_inner -> d_model, no bias
  std::size_t d_inner = 0;

  MambaBlock() = default;
  MambaBlock(ParamStore& store, const std::string& name, const MambaConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t D = cfg.d_inner(), N = cfg.d_state, K = cfg.conv_kernel;
    d_inner = D;
    in_proj = Linear(store, name + ".in_proj", cfg.d_model, 2 * D, rng, false);
    const double cb = 1.0 / std::sqrt(static_cast<double>(K));
    conv_weight = store.add(name + ".conv.weight", rng.uniform_tensor({D, K}, -cb, cb));
    conv_bias = store.add(name + ".conv.bias", rng.uniform_tensor({D}, -cb, cb));
    dt_proj = Linear(store, name + ".dt_proj", D, D, rng, true);
    // softplus(bias) log-uniform in [1e-3, 1e-1]
    Tensor dt_bias({D});
    for (auto& v : dt_bias.data()) {
      const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
      v = dt + std::log(-std::expm1(-dt));
    }
    dt_proj.bias.mutable_value() = dt_bias;
    const double sb = 1.0 / std::sqrt(static_cast<double>(D));
    w_b = store.add(name + ".w_b", rng.uniform_tensor({D, N}, -sb, sb));
    w_c = store.add(name + ".w_c", rng.uniform_tensor({D, N}, -sb, sb));
    Tensor alog({D, N});
    for (std::size_t c = 0; c < D; ++c) {
      for (std::size_t n = 0; n < N; ++n) alog.at(c, n) = std::log(static_cast<double>(n + 1));
    }
    a_log = store.add(name + ".a_log", std::move(alog));
    d_skip = store.add(name + ".d_skip", Tensor({D}, 1.0));
    out_proj = Linear(store, name + ".out_proj", D, cfg.d_model, rng, false);
  }

  ad::Var operator()(const ad::Var& x) const {
    ad::Var xz = in_proj(x);
    ad::Var u = ad::slice_last(xz, 0, d_inner);
    ad::Var gate = ad::slice_last(xz, d_inner, d_inner);
    ad::Var xc = ad::silu(causal_conv1d(u, conv_weight, conv_bias));
    ad::Var delta = ad::softplus(dt_proj(xc));
    ad::Var bt = ad::matmul(xc, w_b);
    ad::Var ct = ad::matmul(xc, w_c);
    ad::Var a = ad::neg(ad::exp(a_log));
    ad::Var y = selective_scan(xc, delta, bt, ct, a, d_skip);
    return out_proj(ad::mul(y, ad::silu(gate)));
  }
};

// x + alpha * dropout(block(layer_norm(x)))
struct MambaLayer {
  LayerNormParams norm;
  MambaBlock block;
  ad::Var alpha;
  std::uint64_t dropout_site = 0;

  MambaLayer() = default;
  MambaLayer(ParamStore& store, const std::string& name, const MambaConfig& cfg, Rng& rng)
      : norm(store, name + ".norm", cfg.d_model),
        block(store, name + ".block", cfg, rng),
        alpha(store.add(name + ".alpha", Tensor::scalar(1.0))),
        dropout_site(site_id(name + ".dropout")) {}

  ad::Var operator()(const ad::Var& x, const ForwardContext& ctx) const {
    ad::Var h = block(norm(x));
    if (ctx.training) h = ad::dropout(h, ctx.dropout, ctx.dropout_key(dropout_site));
    return ad::add(x, ad::mul(h, alpha));
  }
};

struct StackOutput {
  ad::Var sequence;  // (B, L, d)
  ad::Var last;      // (B, d) at valid_len - 1
};

inline std::vector<std::size_t> last_positions(std::span<const std::size_t> valid_len) {
  std::vector<std::size_t> pos(valid_len.size());
  for (std::size_t b = 0; b < valid_len.size(); ++b) {
    if (valid_len[b] < 1) throw ShapeMismatch("valid_len must be >= 1");
    pos[b] = valid_len[b] - 1;
  }
  return pos;
}

struct MambaStack {
  std::vector<MambaLayer> layers;

  MambaStack() = default;
  MambaStack(ParamStore& store, const std::string& name, const MambaConfig& cfg, Rng& rng) {
    cfg.validate();
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
      layers.emplace_back(store, name + ".layers." + std::to_string(i), cfg, rng);
    }
  }

  StackOutput operator()(const ad::Var& x, std::span<const std::size_t> valid_len,
                         const ForwardContext& ctx) const {
    ad::Var h = x;
    for (const auto& layer : layers) h = layer(h, ctx);
    const auto pos = last_positions(valid_len);
    return {h, ad::gather_positions(h, pos)};
  }
};

}  // namespace findrec
