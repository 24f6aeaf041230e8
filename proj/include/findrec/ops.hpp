#pragma once

// Differentiable primitives. Each function computes its forward value and
// registers the matching gradient rule with the tape.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "findrec/autodiff.hpp"
#include "findrec/rng.hpp"

namespace findrec::ad {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline ConstMatMap cmat(const Tensor& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  return ConstMatMap(t.data().data() + offset, static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(cols));
}
inline MatMap mmat(Tensor& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  return MatMap(t.data().data() + offset, static_cast<Eigen::Index>(rows),
                static_cast<Eigen::Index>(cols));
}

// How the right operand of a binary op maps onto the left operand's shape.
enum class Bcast { Same, Scalar, Suffix };

inline Bcast classify(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Bcast::Same;
  if (shape_numel(b) == 1) return Bcast::Scalar;
  if (b.size() < a.size()) {
    if (std::equal(b.rbegin(), b.rend(), a.rbegin())) return Bcast::Suffix;
  }
  throw ShapeMismatch(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " +
                      shape_str(a));
}

inline std::size_t bindex(Bcast k, std::size_t i, std::size_t nb) {
  switch (k) {
    case Bcast::Same: return i;
    case Bcast::Scalar: return 0;
    case Bcast::Suffix: return i % nb;
  }
  return 0;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic. The right operand may be the same shape, a scalar
// or a trailing suffix of the left shape (bias rows).

inline Var add(const Var& a, const Var& b) {
  if (a.numel() < b.numel()) return add(b, a);
  const auto kind = detail::classify(a.shape(), b.shape(), "add");
  const std::size_t n = a.numel(), nb = b.numel();
  Tensor out = a.value();
  const auto bd = b.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < n; ++i) od[i] += bd[detail::bindex(kind, i, nb)];
  return make_op("add", std::move(out), {a, b}, [kind, n, nb](Node& self) {
    const auto g = self.grad.data();
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto ga = pa.grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (pb.requires_grad) {
      auto gb = pb.grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i) gb[detail::bindex(kind, i, nb)] += g[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  const auto kind = detail::classify(a.shape(), b.shape(), "sub");
  const std::size_t n = a.numel(), nb = b.numel();
  Tensor out = a.value();
  const auto bd = b.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < n; ++i) od[i] -= bd[detail::bindex(kind, i, nb)];
  return make_op("sub", std::move(out), {a, b}, [kind, n, nb](Node& self) {
    const auto g = self.grad.data();
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto ga = pa.grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (pb.requires_grad) {
      auto gb = pb.grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i) gb[detail::bindex(kind, i, nb)] -= g[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  if (a.numel() < b.numel()) return mul(b, a);
  const auto kind = detail::classify(a.shape(), b.shape(), "mul");
  const std::size_t n = a.numel(), nb = b.numel();
  Tensor out = a.value();
  const auto bd = b.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < n; ++i) od[i] *= bd[detail::bindex(kind, i, nb)];
  return make_op("mul", std::move(out), {a, b}, [kind, n, nb](Node& self) {
    const auto g = self.grad.data();
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto av = pa.value.data();
    const auto bv = pb.value.data();
    if (pa.requires_grad) {
      auto ga = pa.grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[detail::bindex(kind, i, nb)];
    }
    if (pb.requires_grad) {
      auto gb = pb.grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i) gb[detail::bindex(kind, i, nb)] += g[i] * av[i];
    }
  });
}

// x: [B, ...] scaled row-wise by w: [B].
inline Var scale_rows(const Var& x, const Var& w) {
  if (w.value().rank() != 1 || x.value().rank() < 1 || x.value().dim(0) != w.value().dim(0)) {
    throw ShapeMismatch("scale_rows: " + shape_str(x.shape()) + " by " + shape_str(w.shape()));
  }
  const std::size_t rows = w.numel(), inner = x.numel() / rows;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= w.value()[i / inner];
  return make_op("scale_rows", std::move(out), {x, w}, [rows, inner](Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    const auto g = self.grad.data();
    if (px.requires_grad) {
      auto gx = px.grad_buffer().data();
      for (std::size_t i = 0; i < rows * inner; ++i) gx[i] += g[i] * pw.value[i / inner];
    }
    if (pw.requires_grad) {
      auto gw = pw.grad_buffer().data();
      for (std::size_t i = 0; i < rows * inner; ++i) gw[i / inner] += g[i] * px.value[i];
    }
  });
}

inline Var scale(const Var& x, double c) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= c;
  return make_op("scale", std::move(out), {x}, [c](Node& self) {
    auto& p = *self.parents[0];
    auto gp = p.grad_buffer().data();
    const auto g = self.grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) gp[i] += c * g[i];
  });
}

inline Var add_scalar(const Var& x, double c) {
  Tensor out = x.value();
  for (auto& v : out.data()) v += c;
  return make_op("add_scalar", std::move(out), {x}, [](Node& self) {
    auto gp = self.parents[0]->grad_buffer().data();
    const auto g = self.grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
  });
}

inline Var neg(const Var& x) { return scale(x, -1.0); }

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_op("reshape", std::move(out), {x}, [](Node& self) {
    auto gp = self.parents[0]->grad_buffer().data();
    const auto g = self.grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Unary activations.

enum class Activation { Silu, Gelu, Softplus, Exp, Sigmoid };

inline const char* activation_name(Activation k) {
  switch (k) {
    case Activation::Silu: return "silu";
    case Activation::Gelu: return "gelu";
    case Activation::Softplus: return "softplus";
    case Activation::Exp: return "exp";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "?";
}

inline double activation_value(Activation k, double x) {
  switch (k) {
    case Activation::Silu: return x * detail::sigmoid(x);
    case Activation::Gelu: return x * detail::normal_cdf(x);
    case Activation::Softplus: return detail::softplus(x);
    case Activation::Exp: return std::exp(x);
    case Activation::Sigmoid: return detail::sigmoid(x);
  }
  return 0.0;
}

// Derivative given input x and output y.
inline double activation_derivative(Activation k, double x, double y) {
  switch (k) {
    case Activation::Silu: {
      const double s = detail::sigmoid(x);
      return s * (1.0 + x * (1.0 - s));
    }
    case Activation::Gelu: return detail::normal_cdf(x) + x * detail::normal_pdf(x);
    case Activation::Softplus: return detail::sigmoid(x);
    case Activation::Exp: return y;
    case Activation::Sigmoid: return y * (1.0 - y);
  }
  return 0.0;
}

inline Var activation(const Var& x, Activation kind) {
  Tensor out(x.shape());
  const auto xd = x.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = activation_value(kind, xd[i]);
  return make_op(activation_name(kind), std::move(out), {x}, [kind](Node& self) {
    auto& p = *self.parents[0];
    auto gp = p.grad_buffer().data();
    const auto xv = p.value.data();
    const auto yv = self.value.data();
    const auto g = self.grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * activation_derivative(kind, xv[i], yv[i]);
  });
}

inline Var exp(const Var& x) { return activation(x, Activation::Exp); }
inline Var softplus(const Var& x) { return activation(x, Activation::Softplus); }
inline Var sigmoid(const Var& x) { return activation(x, Activation::Sigmoid); }
inline Var silu(const Var& x) { return activation(x, Activation::Silu); }
inline Var gelu(const Var& x) { return activation(x, Activation::Gelu); }

// ln(sigmoid(x)), overflow-safe.
inline Var log_sigmoid(const Var& x) {
  Tensor out(x.shape());
  const auto xd = x.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = -detail::softplus(-xd[i]);
  return make_op("log_sigmoid", std::move(out), {x}, [](Node& self) {
    auto& p = *self.parents[0];
    auto gp = p.grad_buffer().data();
    const auto xv = p.value.data();
    const auto g = self.grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * detail::sigmoid(-xv[i]);
  });
}

// ---------------------------------------------------------------------------
// Linear algebra.

// a: [..., k] times w: [k, n] -> [..., n]
inline Var matmul(const Var& a, const Var& w) {
  if (a.value().rank() < 1 || w.value().rank() != 2 || a.value().dim(-1) != w.value().dim(0)) {
    throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " x " + shape_str(w.shape()));
  }
  const std::size_t k = w.value().dim(0), n = w.value().dim(1);
  const std::size_t m = a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor out(out_shape);
  detail::mmat(out, m, n).noalias() = detail::cmat(a.value(), m, k) * detail::cmat(w.value(), k, n);
  return make_op("matmul", std::move(out), {a, w}, [m, k, n](Node& self) {
    auto& pa = *self.parents[0];
    auto& pw = *self.parents[1];
    const auto g = detail::cmat(self.grad, m, n);
    if (pa.requires_grad) {
      detail::mmat(pa.grad_buffer(), m, k).noalias() += g * detail::cmat(pw.value, k, n).transpose();
    }
    if (pw.requires_grad) {
      detail::mmat(pw.grad_buffer(), k, n).noalias() += detail::cmat(pa.value, m, k).transpose() * g;
    }
  });
}

// Batched product a: [B, m, k] times b: [B, k, n] -> [B, m, n]
inline Var bmm(const Var& a, const Var& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1]) {
    throw ShapeMismatch("bmm: " + shape_str(as) + " x " + shape_str(bs));
  }
  const std::size_t B = as[0], m = as[1], k = as[2], n = bs[2];
  Tensor out(Shape{B, m, n});
  for (std::size_t i = 0; i < B; ++i) {
    detail::mmat(out, m, n, i * m * n).noalias() =
        detail::cmat(a.value(), m, k, i * m * k) * detail::cmat(b.value(), k, n, i * k * n);
  }
  return make_op("bmm", std::move(out), {a, b}, [B, m, k, n](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < B; ++i) {
      const auto g = detail::cmat(self.grad, m, n, i * m * n);
      if (pa.requires_grad) {
        detail::mmat(pa.grad_buffer(), m, k, i * m * k).noalias() +=
            g * detail::cmat(pb.value, k, n, i * k * n).transpose();
      }
      if (pb.requires_grad) {
        detail::mmat(pb.grad_buffer(), k, n, i * k * n).noalias() +=
            detail::cmat(pa.value, m, k, i * m * k).transpose() * g;
      }
    }
  });
}

// Swaps the last two axes.
inline Var transpose(const Var& x) {
  const auto& s = x.shape();
  if (s.size() < 2) throw ShapeMismatch("transpose needs rank >= 2, got " + shape_str(s));
  const std::size_t r = s[s.size() - 2], c = s[s.size() - 1];
  const std::size_t batch = x.numel() / (r * c);
  Shape os = s;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  Tensor out(os);
  for (std::size_t b = 0; b < batch; ++b) {
    detail::mmat(out, c, r, b * r * c) = detail::cmat(x.value(), r, c, b * r * c).transpose();
  }
  return make_op("transpose", std::move(out), {x}, [batch, r, c](Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t b = 0; b < batch; ++b) {
      detail::mmat(p.grad_buffer(), r, c, b * r * c) += detail::cmat(self.grad, c, r, b * r * c).transpose();
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization.

// Softmax over the last axis, max-subtracted.
inline Var softmax(const Var& x) {
  const std::size_t d = x.value().dim(-1);
  const std::size_t rows = x.numel() / d;
  Tensor out(x.shape());
  const auto xd = x.value().data();
  auto od = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * d;
    double* yr = od.data() + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < d; ++j) yr[j] /= z;
  }
  return make_op("softmax", std::move(out), {x}, [rows, d](Node& self) {
    auto gp = self.parents[0]->grad_buffer().data();
    const auto y = self.value.data();
    const auto g = self.grad.data();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
      for (std::size_t j = 0; j < d; ++j) gp[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
    }
  });
}

// Softmax over the key axis of x: [B, Lq, Lk]; keys at index >= key_len[b]
// get exactly zero weight.
inline Var masked_softmax(const Var& x, std::span<const std::size_t> key_len) {
  const auto& s = x.shape();
  if (s.size() != 3 || key_len.size() != s[0]) {
    throw ShapeMismatch("masked_softmax: shape " + shape_str(s));
  }
  const std::size_t B = s[0], Lq = s[1], Lk = s[2];
  std::vector<std::size_t> lens(key_len.begin(), key_len.end());
  for (auto l : lens) {
    if (l < 1 || l > Lk) throw ShapeMismatch("masked_softmax: key length out of range");
  }
  Tensor out(s, 0.0);
  const auto xd = x.value().data();
  auto od = out.data();
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t kl = lens[b];
    for (std::size_t q = 0; q < Lq; ++q) {
      const double* xr = xd.data() + (b * Lq + q) * Lk;
      double* yr = od.data() + (b * Lq + q) * Lk;
      const double mx = *std::max_element(xr, xr + kl);
      double z = 0.0;
      for (std::size_t j = 0; j < kl; ++j) z += (yr[j] = std::exp(xr[j] - mx));
      for (std::size_t j = 0; j < kl; ++j) yr[j] /= z;
    }
  }
  return make_op("masked_softmax", std::move(out), {x}, [B, Lq, Lk, lens](Node& self) {
    auto gp = self.parents[0]->grad_buffer().data();
    const auto y = self.value.data();
    const auto g = self.grad.data();
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t q = 0; q < Lq; ++q) {
        const std::size_t o = (b * Lq + q) * Lk;
        double dot = 0.0;
        for (std::size_t j = 0; j < lens[b]; ++j) dot += g[o + j] * y[o + j];
        for (std::size_t j = 0; j < lens[b]; ++j) gp[o + j] += y[o + j] * (g[o + j] - dot);
      }
    }
  });
}

inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const std::size_t d = x.value().dim(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeMismatch("layer_norm: affine parameters must have shape (" + std::to_string(d) + ")");
  }
  const std::size_t rows = x.numel() / d;
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(rows);
  const auto xd = x.value().data();
  const auto gd = gamma.value().data();
  const auto bd = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * inv_std[r];
      xhat[r * d + j] = h;
      out[r * d + j] = gd[j] * h + bd[j];
    }
  }
  return make_op("layer_norm", std::move(out), {x, gamma, beta},
                 [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                   auto& px = *self.parents[0];
                   auto& pg = *self.parents[1];
                   auto& pb = *self.parents[2];
                   const auto g = self.grad.data();
                   const auto gam = pg.value.data();
                   if (pg.requires_grad) {
                     auto gg = pg.grad_buffer().data();
                     for (std::size_t i = 0; i < rows * d; ++i) gg[i % d] += g[i] * xhat[i];
                   }
                   if (pb.requires_grad) {
                     auto gb = pb.grad_buffer().data();
                     for (std::size_t i = 0; i < rows * d; ++i) gb[i % d] += g[i];
                   }
                   if (px.requires_grad) {
                     auto gx = px.grad_buffer().data();
                     const double inv_d = 1.0 / static_cast<double>(d);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double s1 = 0.0, s2 = 0.0;
                       for (std::size_t j = 0; j < d; ++j) {
                         const double gh = g[r * d + j] * gam[j];
                         s1 += gh;
                         s2 += gh * xhat[r * d + j];
                       }
                       for (std::size_t j = 0; j < d; ++j) {
                         const double gh = g[r * d + j] * gam[j];
                         gx[r * d + j] += inv_std[r] * (gh - s1 * inv_d - xhat[r * d + j] * s2 * inv_d);
                       }
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Structural ops.

// Concatenation along the last axis; leading extents must agree.
inline Var concat(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeMismatch("concat of nothing");
  Shape lead = xs[0].shape();
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& x : xs) {
    Shape l = x.shape();
    const std::size_t w = l.back();
    l.pop_back();
    if (l != lead) throw ShapeMismatch("concat: leading shapes differ");
    widths.push_back(w);
    total += w;
  }
  const std::size_t rows = shape_numel(lead);
  Shape os = lead;
  os.push_back(total);
  Tensor out(os);
  std::size_t off = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto src = xs[i].value().data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(src.data() + r * widths[i], widths[i], out.data().data() + r * total + off);
    }
    off += widths[i];
  }
  return make_op("concat", std::move(out), xs, [rows, total, widths](Node& self) {
    std::size_t off = 0;
    const auto g = self.grad.data();
    for (std::size_t i = 0; i < widths.size(); ++i) {
      auto& p = *self.parents[i];
      if (p.requires_grad) {
        auto gp = p.grad_buffer().data();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < widths[i]; ++j) gp[r * widths[i] + j] += g[r * total + off + j];
        }
      }
      off += widths[i];
    }
  });
}

// Channels [start, start+len) of the last axis.
inline Var slice_last(const Var& x, std::size_t start, std::size_t len) {
  const std::size_t d = x.value().dim(-1);
  if (len == 0 || start + len > d) throw ShapeMismatch("slice_last out of range");
  const std::size_t rows = x.numel() / d;
  Shape os = x.shape();
  os.back() = len;
  Tensor out(os);
  const auto src = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(src.data() + r * d + start, len, out.data().data() + r * len);
  }
  return make_op("slice", std::move(out), {x}, [rows, d, start, len](Node& self) {
    auto gp = self.parents[0]->grad_buffer().data();
    const auto g = self.grad.data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < len; ++j) gp[r * d + start + j] += g[r * len + j];
    }
  });
}

// Row gather from table [V, d] for ids of any shape S -> S x d. Row 0 is the
// padding row; it never receives gradient.
inline Var embedding(const Var& table, std::span<const std::int64_t> ids, Shape id_shape) {
  if (table.value().rank() != 2) throw ShapeMismatch("embedding table must be rank 2");
  if (shape_numel(id_shape) != ids.size()) throw ShapeMismatch("embedding: id shape mismatch");
  const std::size_t V = table.value().dim(0), d = table.value().dim(1);
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      throw IndexError("item id " + std::to_string(ids[i]) + " outside [0, " + std::to_string(V - 1) + "]");
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  Shape os = std::move(id_shape);
  os.push_back(d);
  Tensor out(os);
  const auto src = table.value().data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(src.data() + rows[i] * d, d, out.data().data() + i * d);
  }
  return make_op("embedding", std::move(out), {table}, [rows = std::move(rows), d](Node& self) {
    auto gp = self.parents[0]->grad_buffer().data();
    const auto g = self.grad.data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] == 0) continue;
      for (std::size_t j = 0; j < d; ++j) gp[rows[i] * d + j] += g[i * d + j];
    }
  });
}

// Train-mode dropout: element i is kept when counter_uniform(key, i) >= p and
// scaled by 1/(1-p). The mask is a pure function of (key, i).
inline Var dropout(const Var& x, double p, std::uint64_t key) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  Tensor out = x.value();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = counter_uniform(key, i) >= p ? keep_scale : 0.0;
    out[i] *= mask[i];
  }
  return make_op("dropout", std::move(out), {x}, [mask = std::move(mask)](Node& self) {
    auto gp = self.parents[0]->grad_buffer().data();
    const auto g = self.grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * mask[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions.

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return make_op("sum", Tensor::scalar(s), {x}, [](Node& self) {
    auto gp = self.parents[0]->grad_buffer().data();
    const double g = self.grad[0];
    for (auto& v : gp) v += g;
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// Sum over the last axis: [..., d] -> [...]
inline Var sum_last(const Var& x) {
  const std::size_t d = x.value().dim(-1);
  const std::size_t rows = x.numel() / d;
  Shape os = x.shape();
  os.pop_back();
  Tensor out(os);
  const auto src = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += src[r * d + j];
    out[r] = s;
  }
  return make_op("sum_last", std::move(out), {x}, [rows, d](Node& self) {
    auto gp = self.parents[0]->grad_buffer().data();
    const auto g = self.grad.data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < d; ++j) gp[r * d + j] += g[r];
    }
  });
}

// x: [B, L, d] -> [B, d], row b taken at position pos[b].
inline Var gather_positions(const Var& x, std::span<const std::size_t> pos) {
  const auto& s = x.shape();
  if (s.size() != 3 || pos.size() != s[0]) throw ShapeMismatch("gather_positions: shape " + shape_str(s));
  const std::size_t B = s[0], L = s[1], d = s[2];
  std::vector<std::size_t> p(pos.begin(), pos.end());
  Tensor out(Shape{B, d});
  for (std::size_t b = 0; b < B; ++b) {
    if (p[b] >= L) throw IndexError("gather_positions: position out of range");
    std::copy_n(x.value().data().data() + (b * L + p[b]) * d, d, out.data().data() + b * d);
  }
  return make_op("gather_positions", std::move(out), {x}, [p = std::move(p), L, d](Node& self) {
    auto gp = self.parents[0]->grad_buffer().data();
    const auto g = self.grad.data();
    for (std::size_t b = 0; b < p.size(); ++b) {
      for (std::size_t j = 0; j < d; ++j) gp[(b * L + p[b]) * d + j] += g[b * d + j];
    }
  });
}

// Mean over the first len[b] positions: [B, L, d] -> [B, d].
inline Var masked_mean(const Var& x, std::span<const std::size_t> len) {
  const auto& s = x.shape();
  if (s.size() != 3 || len.size() != s[0]) throw ShapeMismatch("masked_mean: shape " + shape_str(s));
  const std::size_t B = s[0], L = s[1], d = s[2];
  std::vector<std::size_t> n(len.begin(), len.end());
  Tensor out(Shape{B, d}, 0.0);
  const auto src = x.value().data();
  for (std::size_t b = 0; b < B; ++b) {
    if (n[b] < 1 || n[b] > L) throw ShapeMismatch("masked_mean: length out of range");
    for (std::size_t t = 0; t < n[b]; ++t) {
      for (std::size_t j = 0; j < d; ++j) out[b * d + j] += src[(b * L + t) * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) out[b * d + j] /= static_cast<double>(n[b]);
  }
  return make_op("masked_mean", std::move(out), {x}, [n = std::move(n), L, d](Node& self) {
    auto gp = self.parents[0]->grad_buffer().data();
    const auto g = self.grad.data();
    for (std::size_t b = 0; b < n.size(); ++b) {
      const double w = 1.0 / static_cast<double>(n[b]);
      for (std::size_t t = 0; t < n[b]; ++t) {
        for (std::size_t j = 0; j < d; ++j) gp[(b * L + t) * d + j] += w * g[b * d + j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Losses and scoring helpers over logits [B, V] where column 0 is padding.

// Column 0 set to -inf; it carries no gradient.
inline Var mask_padding_column(const Var& logits) {
  const auto& s = logits.shape();
  if (s.size() != 2) throw ShapeMismatch("mask_padding_column: logits must be rank 2");
  const std::size_t B = s[0], V = s[1];
  Tensor out = logits.value();
  for (std::size_t b = 0; b < B; ++b) out[b * V] = -std::numeric_limits<double>::infinity();
  return make_op(
      "mask_padding_column", std::move(out), {logits},
      [B, V](Node& self) {
        auto gp = self.parents[0]->grad_buffer().data();
        const auto g = self.grad.data();
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t j = 1; j < V; ++j) gp[b * V + j] += g[b * V + j];
        }
      },
      FiniteCheck::AllowNegInf);
}

// Mean over rows of -log softmax(logits[b, 1:])[target[b]].
inline Var cross_entropy(const Var& logits, std::span<const std::int64_t> targets) {
  const auto& s = logits.shape();
  if (s.size() != 2 || targets.size() != s[0]) throw ShapeMismatch("cross_entropy: shape " + shape_str(s));
  const std::size_t B = s[0], V = s[1];
  std::vector<std::size_t> t(B);
  for (std::size_t b = 0; b < B; ++b) {
    if (targets[b] < 1 || static_cast<std::size_t>(targets[b]) >= V) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[b]) + " outside [1, " +
                       std::to_string(V - 1) + "]");
    }
    t[b] = static_cast<std::size_t>(targets[b]);
  }
  Tensor probs(Shape{B, V}, 0.0);
  double loss = 0.0;
  const auto x = logits.value().data();
  for (std::size_t b = 0; b < B; ++b) {
    const double* xr = x.data() + b * V;
    double mx = xr[1];
    for (std::size_t j = 2; j < V; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::size_t j = 1; j < V; ++j) z += (probs[b * V + j] = std::exp(xr[j] - mx));
    for (std::size_t j = 1; j < V; ++j) probs[b * V + j] /= z;
    loss += (mx + std::log(z)) - xr[t[b]];
  }
  loss /= static_cast<double>(B);
  return make_op("cross_entropy", Tensor::scalar(loss), {logits},
                 [B, V, t = std::move(t), probs = std::move(probs)](Node& self) {
                   auto gp = self.parents[0]->grad_buffer().data();
                   const double g = self.grad[0] / static_cast<double>(B);
                   for (std::size_t b = 0; b < B; ++b) {
                     for (std::size_t j = 1; j < V; ++j) {
                       gp[b * V + j] += g * (probs[b * V + j] - (j == t[b] ? 1.0 : 0.0));
                     }
                   }
                 });
}

// out[b, i] = x[b, cols[b*m + i]] for x: [B, V].
inline Var pick(const Var& x, std::span<const std::size_t> cols, std::size_t m) {
  const auto& s = x.shape();
  if (s.size() != 2 || cols.size() != s[0] * m) throw ShapeMismatch("pick: shape " + shape_str(s));
  const std::size_t B = s[0], V = s[1];
  std::vector<std::size_t> c(cols.begin(), cols.end());
  Tensor out(Shape{B, m});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < m; ++i) {
      if (c[b * m + i] >= V) throw IndexError("pick: column out of range");
      out[b * m + i] = x.value()[b * V + c[b * m + i]];
    }
  }
  return make_op("pick", std::move(out), {x}, [c = std::move(c), m, V](Node& self) {
    auto gp = self.parents[0]->grad_buffer().data();
    const auto g = self.grad.data();
    for (std::size_t i = 0; i < c.size(); ++i) gp[(i / m) * V + c[i]] += g[i];
  });
}

}  // namespace findrec::ad
