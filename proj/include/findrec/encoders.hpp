#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "findrec/mamba.hpp"

namespace findrec {

enum class Modality { Text, Image };

inline const char* modality_name(Modality m) { return m == Modality::Text ? "text" : "image"; }

// Item-id embedding table with n_items + 1 rows; row 0 is padding and stays zero.
struct EmbeddingTable {
  ad::Var table;
  std::size_t n_items = 0;

  EmbeddingTable() = default;
  EmbeddingTable(ParamStore& store, const std::string& name, std::size_t n_items_, std::size_t d, Rng& rng)
      : n_items(n_items_) {
    Tensor init = rng.normal_tensor({n_items_ + 1, d}, 1.0 / std::sqrt(static_cast<double>(d)));
    for (std::size_t j = 0; j < d; ++j) init.at(0, j) = 0.0;
    table = store.add(name, std::move(init), /*frozen_row0=*/true);
  }

  std::size_t dim() const { return table.value().dim(1); }

  // ids: (B, L) row-major, values in [0, n_items].
  ad::Var embed(std::span<const std::int64_t> ids, std::size_t batch, std::size_t len) const {
    return ad::embedding(table, ids, Shape{batch, len});
  }
};

struct ModalityProjector {
  Linear proj;
  std::size_t d_raw = 0;

  ModalityProjector() = default;
  ModalityProjector(ParamStore& store, const std::string& name, std::size_t d_raw_, std::size_t d_hidden,
                    Rng& rng)
      : proj(store, name, d_raw_, d_hidden, rng), d_raw(d_raw_) {}

  // feats: (B, L, d_raw) -> (B, L, d_hidden)
  ad::Var operator()(const ad::Var& feats) const {
    if (feats.value().rank() != 3 || feats.value().dim(-1) != d_raw) {
      throw ShapeMismatch("project_modality: expected last extent " + std::to_string(d_raw) + ", got " +
                          shape_str(feats.shape()));
    }
    return proj(feats);
  }
};

struct ModalityOutput {
  ad::Var sequence;  // Z_mod (B, L, d_hidden)
  ad::Var last;      // z_last (B, d_align)
};

// projection -> one Mamba layer -> layer norm, plus an alignment head that
// maps the last valid position into the alignment space.
struct ModalityEncoder {
  Modality modality = Modality::Text;
  ModalityProjector projector;
  MambaLayer layer;
  LayerNormParams norm;
  ad::Var align_head;  // (d_hidden, d_align)

  ModalityEncoder() = default;
  ModalityEncoder(ParamStore& store, const std::string& name, Modality m, std::size_t d_raw,
                  std::size_t d_hidden, std::size_t d_align, const MambaConfig& mamba, Rng& rng)
      : modality(m), projector(store, name + ".proj", d_raw, d_hidden, rng) {
    MambaConfig mc = mamba;
    mc.d_model = d_hidden;
    layer = MambaLayer(store, name + ".mamba", mc, rng);
    norm = LayerNormParams(store, name + ".norm", d_hidden);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_hidden));
    align_head = store.add(name + ".align_head", rng.uniform_tensor({d_hidden, d_align}, -bound, bound));
  }

  ad::Var project(const ad::Var& feats) const { return projector(feats); }

  // E_mod: projected features (B, L, d_hidden).
  ModalityOutput encode(const ad::Var& projected, std::span<const std::size_t> valid_len,
                        const ForwardContext& ctx) const {
    ad::Var z = norm(layer(projected, ctx));
    const auto pos = last_positions(valid_len);
    return {z, ad::matmul(ad::gather_positions(z, pos), align_head)};
  }

  ModalityOutput operator()(const ad::Var& feats, std::span<const std::size_t> valid_len,
                            const ForwardContext& ctx) const {
    return encode(project(feats), valid_len, ctx);
  }
};

}  // namespace findrec
