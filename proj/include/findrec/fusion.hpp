#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "findrec/encoders.hpp"

namespace findrec {

enum class LossKind { CrossEntropy, Bpr };

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "ce" || s == "cross_entropy") return LossKind::CrossEntropy;
  if (s == "bpr") return LossKind::Bpr;
  throw ConfigError("unknown loss kind '" + s + "' (expected ce or bpr)");
}

inline const char* loss_kind_name(LossKind k) { return k == LossKind::CrossEntropy ? "ce" : "bpr"; }

// Concat(z_id, o_exp) -> affine -> gelu -> dropout -> affine, output width d_id.
struct FusionHead {
  Linear fc1;
  Linear fc2;
  std::size_t d_id = 0;
  std::size_t d_hidden = 0;
  std::uint64_t dropout_site = 0;

  FusionHead() = default;
  FusionHead(ParamStore& store, const std::string& name, std::size_t d_id_, std::size_t d_hidden_, Rng& rng)
      : fc1(store, name + ".fc1", d_id_ + d_hidden_, d_id_, rng),
        fc2(store, name + ".fc2", d_id_, d_id_, rng),
        d_id(d_id_),
        d_hidden(d_hidden_),
        dropout_site(site_id(name + ".dropout")) {}

  ad::Var operator()(const ad::Var& z_id_last, const ad::Var& o_exp_last, const ForwardContext& ctx) const {
    if (z_id_last.value().rank() != 2 || o_exp_last.value().rank() != 2 ||
        z_id_last.value().dim(0) != o_exp_last.value().dim(0) || z_id_last.value().dim(1) != d_id ||
        o_exp_last.value().dim(1) != d_hidden) {
      throw ShapeMismatch("fuse: " + shape_str(z_id_last.shape()) + " and " + shape_str(o_exp_last.shape()));
    }
    ad::Var h = ad::gelu(fc1(ad::concat({z_id_last, o_exp_last})));
    if (ctx.training) h = ad::dropout(h, ctx.dropout, ctx.dropout_key(dropout_site));
    return fc2(h);
  }
};

// logits = s table^T with the padding column at -inf.
inline ad::Var score_items(const ad::Var& s, const EmbeddingTable& table) {
  return ad::mask_padding_column(ad::matmul(s, ad::transpose(table.table)));
}

inline ad::Var rec_loss_ce(const ad::Var& logits, std::span<const std::int64_t> targets) {
  return ad::cross_entropy(logits, targets);
}

// n_neg negatives per row drawn uniformly from [1, n_items] \ {target}, keyed
// by (key, row, draw).
inline std::vector<std::size_t> sample_negatives(std::span<const std::int64_t> targets, std::size_t n_items,
                                                 std::size_t n_neg, std::uint64_t key) {
  if (n_items < 2) throw ConfigError("BPR needs at least two catalog items");
  std::vector<std::size_t> out;
  out.reserve(targets.size() * n_neg);
  for (std::size_t b = 0; b < targets.size(); ++b) {
    for (std::size_t k = 0; k < n_neg; ++k) {
      const double u = counter_uniform(key, b * n_neg + k);
      // uniform over n_items - 1 non-target ids
      std::size_t j = 1 + static_cast<std::size_t>(u * static_cast<double>(n_items - 1));
      if (j >= static_cast<std::size_t>(targets[b])) ++j;
      out.push_back(j);
    }
  }
  return out;
}

// mean of -ln sigmoid(logit_pos - logit_neg) over all (row, negative) pairs.
inline ad::Var rec_loss_bpr(const ad::Var& logits, std::span<const std::int64_t> targets,
                            std::span<const std::size_t> negatives) {
  const std::size_t B = targets.size();
  if (B == 0 || negatives.size() % B != 0) throw ShapeMismatch("rec_loss_bpr: negatives per row mismatch");
  const std::size_t m = negatives.size() / B;
  std::vector<std::size_t> pos_cols;
  pos_cols.reserve(negatives.size());
  for (std::size_t b = 0; b < B; ++b) {
    if (targets[b] < 1) throw IndexError("rec_loss_bpr: target must be >= 1");
    for (std::size_t k = 0; k < m; ++k) pos_cols.push_back(static_cast<std::size_t>(targets[b]));
  }
  ad::Var pos = ad::pick(logits, pos_cols, m);
  ad::Var neg = ad::pick(logits, negatives, m);
  return ad::neg(ad::mean(ad::log_sigmoid(ad::sub(pos, neg))));
}

inline ad::Var total_loss(const ad::Var& l_rec, const ad::Var& l_iicm, double lambda) {
  if (lambda == 0.0 || !l_iicm.defined()) return l_rec;
  return ad::add(l_rec, ad::scale(l_iicm, lambda));
}

}  // namespace findrec
