#pragma once

// Multi-head image->text cross attention with per-head dense expert routing.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "findrec/mamba.hpp"

namespace findrec {

enum class Variant { Full, NoCrossAttn, NoIicm, NoMoe };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoCrossAttn: return "no_cross_attn";
    case Variant::NoIicm: return "no_iicm";
    case Variant::NoMoe: return "no_moe";
  }
  return "?";
}

// Row label used in ablation reports.
inline const char* variant_label(Variant v) {
  switch (v) {
    case Variant::Full: return "Full";
    case Variant::NoCrossAttn: return "w/o Cross-Attn";
    case Variant::NoIicm: return "w/o IICM";
    case Variant::NoMoe: return "w/o MoE";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::Full;
  if (s == "no_cross_attn") return Variant::NoCrossAttn;
  if (s == "no_iicm") return Variant::NoIicm;
  if (s == "no_moe") return Variant::NoMoe;
  throw ConfigError("unknown variant '" + s + "' (expected full, no_cross_attn, no_iicm or no_moe)");
}

struct HeadConfig {
  std::size_t heads = 8;
  std::size_t experts = 4;

  std::size_t head_dim(std::size_t d_hidden) const {
    if (heads == 0 || d_hidden % heads != 0) {
      throw ConfigError("heads (" + std::to_string(heads) + ") must divide d_hidden (" +
                        std::to_string(d_hidden) + ")");
    }
    return d_hidden / heads;
  }
};

inline std::vector<ad::Var> split_heads(const ad::Var& z, std::size_t heads) {
  const std::size_t d = z.value().dim(-1);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("cannot split " + std::to_string(d) + " channels into " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  std::vector<ad::Var> out;
  out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) out.push_back(ad::slice_last(z, h * dh, dh));
  return out;
}

// A = softmax(Zi Zt^T / sqrt(d_h)) over valid keys; O = Zi + A Zt.
inline ad::Var cross_attention_head(const ad::Var& zi, const ad::Var& zt, std::span<const std::size_t> valid_len) {
  if (zi.shape() != zt.shape() || zi.value().rank() != 3) {
    throw ShapeMismatch("cross_attention_head: " + shape_str(zi.shape()) + " vs " + shape_str(zt.shape()));
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(zi.value().dim(2)));
  ad::Var scores = ad::scale(ad::bmm(zi, ad::transpose(zt)), inv_sqrt);
  ad::Var attn = ad::masked_softmax(scores, valid_len);
  return ad::add(zi, ad::bmm(attn, zt));
}

// d_h -> 2 d_h -> d_h with gelu between.
struct Expert {
  Linear fc1;
  Linear fc2;

  Expert() = default;
  Expert(ParamStore& store, const std::string& name, std::size_t dh, Rng& rng)
      : fc1(store, name + ".fc1", dh, 2 * dh, rng), fc2(store, name + ".fc2", 2 * dh, dh, rng) {}

  ad::Var operator()(const ad::Var& x) const { return fc2(ad::gelu(fc1(x))); }
};

// Masked mean-pool -> affine -> softmax.
struct Router {
  Linear gate;

  Router() = default;
  Router(ParamStore& store, const std::string& name, std::size_t dh, std::size_t n_experts, Rng& rng)
      : gate(store, name, dh, n_experts, rng) {}

  ad::Var operator()(const ad::Var& o_h, std::span<const std::size_t> valid_len) const {
    return ad::softmax(gate(ad::masked_mean(o_h, valid_len)));
  }
};

inline ad::Var route(const Router& router, const ad::Var& o_h, std::span<const std::size_t> valid_len) {
  return router(o_h, valid_len);
}

// E = sum_k gates[:, k] * Expert_k(O), every expert evaluated.
inline ad::Var expert_mix(const std::vector<Expert>& experts, const ad::Var& o_h, const ad::Var& gates) {
  const auto& gs = gates.shape();
  if (gs.size() != 2 || gs[1] != experts.size() || gs[0] != o_h.value().dim(0)) {
    throw ShapeMismatch("expert_mix: gates " + shape_str(gs) + " for " + std::to_string(experts.size()) +
                        " experts");
  }
  ad::Var mixed;
  for (std::size_t k = 0; k < experts.size(); ++k) {
    ad::Var gk = ad::reshape(ad::slice_last(gates, k, 1), Shape{gs[0]});
    ad::Var term = ad::scale_rows(experts[k](o_h), gk);
    mixed = mixed.defined() ? ad::add(mixed, term) : term;
  }
  return mixed;
}

struct CrossModalHead {
  Router router;
  std::vector<Expert> experts;
};

struct CrossModalOutput {
  ad::Var sequence;  // O_exp (B, L, d_hidden)
  ad::Var last;      // (B, d_hidden) at valid_len - 1
  std::vector<ad::Var> gates;  // per head (B, N_e); empty for no_moe
};

struct CrossModalMoe {
  HeadConfig cfg;
  std::size_t d_hidden = 0;
  std::vector<CrossModalHead> heads;

  CrossModalMoe() = default;
  CrossModalMoe(ParamStore& store, const std::string& name, std::size_t d_hidden_, HeadConfig cfg_, Rng& rng)
      : cfg(cfg_), d_hidden(d_hidden_) {
    if (cfg.experts == 0) throw ConfigError("experts must be >= 1");
    const std::size_t dh = cfg.head_dim(d_hidden);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const std::string hn = name + ".heads." + std::to_string(h);
      CrossModalHead head;
      head.router = Router(store, hn + ".router", dh, cfg.experts, rng);
      for (std::size_t k = 0; k < cfg.experts; ++k) {
        head.experts.emplace_back(store, hn + ".experts." + std::to_string(k), dh, rng);
      }
      heads.push_back(std::move(head));
    }
  }

  CrossModalOutput operator()(const ad::Var& z_img, const ad::Var& z_txt, std::span<const std::size_t> valid_len,
                              Variant variant) const {
    if (z_img.shape() != z_txt.shape() || z_img.value().dim(-1) != d_hidden) {
      throw ShapeMismatch("cross_modal_forward: " + shape_str(z_img.shape()) + " vs " + shape_str(z_txt.shape()));
    }
    const auto img_heads = split_heads(z_img, cfg.heads);
    const auto txt_heads = split_heads(z_txt, cfg.heads);
    CrossModalOutput out;
    std::vector<ad::Var> mixed;
    mixed.reserve(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      ad::Var o = variant == Variant::NoCrossAttn ? ad::add(img_heads[h], txt_heads[h])
                                                  : cross_attention_head(img_heads[h], txt_heads[h], valid_len);
      if (variant == Variant::NoMoe) {
        mixed.push_back(heads[h].experts[0](o));
      } else {
        ad::Var g = route(heads[h].router, o, valid_len);
        out.gates.push_back(g);
        mixed.push_back(expert_mix(heads[h].experts, o, g));
      }
    }
    out.sequence = ad::concat(mixed);
    out.last = ad::gather_positions(out.sequence, last_positions(valid_len));
    return out;
  }
};

}  // namespace findrec
