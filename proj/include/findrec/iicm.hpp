#pragma once

// Cross-modal coordination: RBF-kernel alignment of paired summaries and a
// Stein-score entropy regularizer.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "findrec/ops.hpp"

namespace findrec {

// Stores h = 2 sigma^2, so K(x, y) = exp(-|x - y|^2 / h).
struct Bandwidth {
  double h = 1.0;
};

struct SteinConfig {
  double eta = 0.01;     // ridge, scaled by n in the solve
  double gamma = 0.1;    // entropy-term weight inside the coordination loss
  double lambda = 1e-3;  // weight of the coordination loss in the total objective

  void validate() const {
    if (!(eta > 0.0)) throw ConfigError("stein.eta must be > 0");
    if (gamma < 0.0) throw ConfigError("stein.gamma must be >= 0");
    if (lambda < 0.0) throw ConfigError("stein.lambda must be >= 0");
  }
};

struct ScoreEstimate {
  Tensor s_hat;  // (n, d); never differentiated through
};

inline double squared_distance(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeMismatch("squared_distance: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return s;
}

inline double rbf_kernel(std::span<const double> x, std::span<const double> y, Bandwidth bw) {
  return std::exp(-squared_distance(x, y) / bw.h);
}

inline std::span<const double> row(const Tensor& z, std::size_t i) {
  const std::size_t d = z.dim(1);
  return z.data().subspan(i * d, d);
}

// h = median pairwise squared distance / ln(n + 1); 1.0 when n == 1 or the
// median is zero.
inline Bandwidth median_bandwidth(const Tensor& z) {
  if (z.rank() != 2) throw ShapeMismatch("median_bandwidth expects (n, d) samples");
  const std::size_t n = z.dim(0);
  if (n < 2) return {1.0};
  std::vector<double> d2;
  d2.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) d2.push_back(squared_distance(row(z, i), row(z, j)));
  }
  const std::size_t mid = d2.size() / 2;
  std::nth_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(mid), d2.end());
  double med = d2[mid];
  if (d2.size() % 2 == 0) {
    const double lower = *std::max_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (med + lower);
  }
  if (!(med > 0.0)) return {1.0};
  return {med / std::log(static_cast<double>(n) + 1.0)};
}

inline Tensor gram_matrix(const Tensor& z, Bandwidth bw) {
  const std::size_t n = z.dim(0);
  Tensor k({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    k.at(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = rbf_kernel(row(z, i), row(z, j), bw);
      k.at(i, j) = v;
      k.at(j, i) = v;
    }
  }
  return k;
}

inline Tensor stack_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) throw ShapeMismatch("stack_rows");
  std::vector<double> data(a.vec());
  data.insert(data.end(), b.vec().begin(), b.vec().end());
  return Tensor({a.dim(0) + b.dim(0), a.dim(1)}, std::move(data));
}

// Differentiable per-row kernel values K(x_i, y_i) for paired (n, d) inputs;
// the bandwidth is a constant.
inline ad::Var paired_kernel(const ad::Var& x, const ad::Var& y, Bandwidth bw) {
  ad::Var diff = ad::sub(x, y);
  return ad::exp(ad::scale(ad::sum_last(ad::mul(diff, diff)), -1.0 / bw.h));
}

struct AlignmentTerms {
  ad::Var loss;        // 1 - mean_i K(img_i, txt_i)
  double raw_ek = 0.0; // mean_i K(img_i, txt_i)
  Bandwidth bandwidth;
};

// Bandwidth is estimated from the union of both modalities' rows.
inline AlignmentTerms alignment_loss(const ad::Var& z_img, const ad::Var& z_txt) {
  if (z_img.value().rank() != 2 || z_img.shape() != z_txt.shape()) {
    throw ShapeMismatch("alignment_loss: " + shape_str(z_img.shape()) + " vs " + shape_str(z_txt.shape()));
  }
  const Bandwidth bw = median_bandwidth(stack_rows(z_img.value(), z_txt.value()));
  ad::Var ek = ad::mean(paired_kernel(z_img, z_txt, bw));
  AlignmentTerms out;
  out.raw_ek = ek.item();
  out.loss = ad::add_scalar(ad::neg(ek), 1.0);
  out.bandwidth = bw;
  return out;
}

// Ridge-regularized kernel Stein estimate of grad log q at the samples:
//   S = -(K + eta n I)^-1 G,   G_i = sum_j (2/h)(z_i - z_j) K_ij
inline ScoreEstimate stein_score_estimate(const Tensor& z, double eta) {
  if (z.rank() != 2) throw ShapeMismatch("stein_score_estimate expects (n, d) samples");
  const std::size_t n = z.dim(0), d = z.dim(1);
  if (n < 2) throw DegenerateSamples("stein_score_estimate needs at least 2 samples");
  bool all_equal = true;
  for (std::size_t i = 1; i < n && all_equal; ++i) {
    all_equal = std::equal(row(z, i).begin(), row(z, i).end(), row(z, 0).begin());
  }
  if (all_equal) throw DegenerateSamples("stein_score_estimate: all samples identical");

  const Bandwidth bw = median_bandwidth(z);
  const Tensor k = gram_matrix(z, bw);
  Eigen::MatrixXd km(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const double c = 2.0 / bw.h;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double kij = k.at(i, j);
      km(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = kij;
      if (i == j) continue;
      for (std::size_t a = 0; a < d; ++a) {
        g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) += c * (z.at(i, a) - z.at(j, a)) * kij;
      }
    }
  }
  km.diagonal().array() += eta * static_cast<double>(n);
  Eigen::LLT<Eigen::MatrixXd> llt(km);
  if (llt.info() != Eigen::Success) throw SolveError("stein_score_estimate: regularized Gram not positive definite");
  Eigen::MatrixXd s = -llt.solve(g);
  if (!s.allFinite()) throw SolveError("stein_score_estimate: non-finite solution");

  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < d; ++a) out.at(i, a) = s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a));
  }
  return {std::move(out)};
}

// (1/n) sum_i <S_hat_i, z_i> with S_hat held constant. Its gradient with
// respect to anything upstream of z is minus the estimated entropy gradient.
inline ad::Var entropy_surrogate_loss(const ad::Var& z, double eta) {
  ScoreEstimate est = stein_score_estimate(z.value(), eta);
  const double n = static_cast<double>(z.value().dim(0));
  return ad::scale(ad::sum(ad::mul(z, ad::constant(std::move(est.s_hat)))), 1.0 / n);
}

struct IicmTerms {
  ad::Var loss;           // alignment + gamma * mean entropy surrogate
  double raw_ek = 0.0;    // batch-mean kernel similarity
  double l_align = 0.0;
  double l_ent = 0.0;     // 0 when skipped
  bool entropy_skipped = false;
};

inline IicmTerms iicm_loss(const ad::Var& z_img_last, const ad::Var& z_txt_last, const SteinConfig& cfg) {
  AlignmentTerms align = alignment_loss(z_img_last, z_txt_last);
  IicmTerms out;
  out.raw_ek = align.raw_ek;
  out.l_align = align.loss.item();
  out.loss = align.loss;
  if (cfg.gamma > 0.0) {
    try {
      ad::Var ent = ad::scale(
          ad::add(entropy_surrogate_loss(z_img_last, cfg.eta), entropy_surrogate_loss(z_txt_last, cfg.eta)), 0.5);
      out.l_ent = ent.item();
      out.loss = ad::add(out.loss, ad::scale(ent, cfg.gamma));
    } catch (const DegenerateSamples&) {
      out.entropy_skipped = true;
    }
  }
  return out;
}

}  // namespace findrec
