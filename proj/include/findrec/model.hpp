#pragma once

// Full recommender: ID stream (embedding + Mamba stack), text and image
// encoders, cross-modal attention with expert routing, fusion and scoring.

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "findrec/crossmodal.hpp"
#include "findrec/data.hpp"
#include "findrec/fusion.hpp"
#include "findrec/iicm.hpp"

namespace findrec {

struct ModelConfig {
  std::size_t d_id = 128;
  std::size_t d_hidden = 256;
  std::size_t d_align = 512;
  std::size_t heads = 8;
  std::size_t experts = 4;
  std::size_t n_layers = 2;
  std::size_t d_state = 16;
  std::size_t expand = 2;
  std::size_t conv_kernel = 4;
  std::size_t max_len = 50;
  double dropout = 0.2;
  Variant variant = Variant::Full;

  MambaConfig mamba(std::size_t d_model) const {
    return MambaConfig{d_model, d_state, expand, conv_kernel, n_layers};
  }

  void validate() const {
    if (d_id == 0 || d_hidden == 0 || d_align == 0 || max_len == 0) throw ConfigError("model dims must be positive");
    if (experts == 0) throw ConfigError("model.experts must be >= 1");
    if (heads == 0 || d_hidden % heads != 0) throw ConfigError("model.heads must divide model.d_hidden");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout must be in [0, 1)");
    mamba(d_id).validate();
  }
};

// Catalog-dependent sizes fixed when a model is built for a dataset.
struct ModelShape {
  std::size_t n_items = 0;
  std::size_t text_dim = 0;
  std::size_t image_dim = 0;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"d_id", c.d_id},         {"d_hidden", c.d_hidden}, {"d_align", c.d_align},
          {"heads", c.heads},       {"experts", c.experts},   {"n_layers", c.n_layers},
          {"d_state", c.d_state},   {"expand", c.expand},     {"conv_kernel", c.conv_kernel},
          {"max_len", c.max_len},   {"dropout", c.dropout},   {"variant", variant_name(c.variant)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_id = j.at("d_id");
  c.d_hidden = j.at("d_hidden");
  c.d_align = j.at("d_align");
  c.heads = j.at("heads");
  c.experts = j.at("experts");
  c.n_layers = j.at("n_layers");
  c.d_state = j.at("d_state");
  c.expand = j.at("expand");
  c.conv_kernel = j.at("conv_kernel");
  c.max_len = j.at("max_len");
  c.dropout = j.at("dropout");
  c.variant = parse_variant(j.at("variant").get<std::string>());
  return c;
}

struct ModelOutput {
  ad::Var logits;      // (B, n_items + 1), column 0 at -inf
  ad::Var z_img_last;  // (B, d_align)
  ad::Var z_txt_last;  // (B, d_align)
  ad::Var z_id_last;   // (B, d_id)
  ad::Var o_exp_last;  // (B, d_hidden)
};

class FindRecModel {
 public:
  FindRecModel(const ModelConfig& cfg, const ModelShape& shape, std::uint64_t seed) : cfg_(cfg), shape_(shape) {
    cfg_.validate();
    if (shape.n_items < 1 || shape.text_dim < 1 || shape.image_dim < 1) {
      throw ConfigError("model shape needs a non-empty catalog and feature dims");
    }
    Rng rng(hash_key(seed, 0x6d6f64656cULL));
    items_ = EmbeddingTable(store_, "item_embedding", shape.n_items, cfg.d_id, rng);
    id_stream_ = MambaStack(store_, "id_stream", cfg.mamba(cfg.d_id), rng);
    text_ = ModalityEncoder(store_, "text", Modality::Text, shape.text_dim, cfg.d_hidden, cfg.d_align,
                            cfg.mamba(cfg.d_hidden), rng);
    image_ = ModalityEncoder(store_, "image", Modality::Image, shape.image_dim, cfg.d_hidden, cfg.d_align,
                             cfg.mamba(cfg.d_hidden), rng);
    cross_ = CrossModalMoe(store_, "crossmodal", cfg.d_hidden, HeadConfig{cfg.heads, cfg.experts}, rng);
    fusion_ = FusionHead(store_, "fusion", cfg.d_id, cfg.d_hidden, rng);
  }

  FindRecModel(const FindRecModel&) = delete;
  FindRecModel& operator=(const FindRecModel&) = delete;
  FindRecModel(FindRecModel&&) = default;
  FindRecModel& operator=(FindRecModel&&) = default;

  ModelOutput forward(const Batch& batch, const ForwardContext& ctx) const {
    if (batch.text_feats.rank() != 3 || batch.img_feats.rank() != 3) {
      throw ShapeMismatch("batch lacks modality features");
    }
    ForwardContext c = ctx;
    c.dropout = cfg_.dropout;
    ad::Var e_id = items_.embed(batch.item_ids, batch.size, batch.len);
    StackOutput id_out = id_stream_(e_id, batch.valid_len, c);
    ModalityOutput txt = text_(ad::constant(batch.text_feats), batch.valid_len, c);
    ModalityOutput img = image_(ad::constant(batch.img_feats), batch.valid_len, c);
    CrossModalOutput cm = cross_(img.sequence, txt.sequence, batch.valid_len, cfg_.variant);
    ad::Var s = fusion_(id_out.last, cm.last, c);
    return {score_items(s, items_), img.last, txt.last, id_out.last, cm.last};
  }

  const ModelConfig& config() const { return cfg_; }
  const ModelShape& shape() const { return shape_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  const EmbeddingTable& items() const { return items_; }
  const MambaStack& id_stream() const { return id_stream_; }
  const ModalityEncoder& text_encoder() const { return text_; }
  const ModalityEncoder& image_encoder() const { return image_; }
  const CrossModalMoe& crossmodal() const { return cross_; }
  const FusionHead& fusion() const { return fusion_; }

 private:
  ModelConfig cfg_;
  ModelShape shape_;
  ParamStore store_;
  EmbeddingTable items_;
  MambaStack id_stream_;
  ModalityEncoder text_;
  ModalityEncoder image_;
  CrossModalMoe cross_;
  FusionHead fusion_;
};

inline ModelShape shape_of(const PreparedData& data) {
  return {data.dataset.n_items(), data.text.dim(), data.image.dim()};
}

}  // namespace findrec
