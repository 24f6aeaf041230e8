#include <gtest/gtest.h>

#include "findrec/encoders.hpp"

using namespace findrec;
using ad::Var;

namespace {

MambaConfig enc_mamba() { return MambaConfig{8, 4, 2, 3, 1}; }

}  // namespace

TEST(EmbeddingTable, PaddingRowIsZeroAndGetsNoGradient) {
  Rng rng(1);
  ParamStore store;
  EmbeddingTable table(store, "items", 5, 4, rng);
  const std::vector<std::int64_t> ids = {0, 0};
  const Tensor pad = table.embed(ids, 1, 2).value();
  for (double v : pad.data()) EXPECT_EQ(v, 0.0);

  const std::vector<std::int64_t> mixed = {0, 3, 3, 0};
  ad::backward(ad::sum(table.embed(mixed, 2, 2)));
  const Tensor g = table.table.grad();
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(g.at(0, j), 0.0);
    EXPECT_EQ(g.at(3, j), 2.0);
  }
}

TEST(EmbeddingTable, RepeatedIdGivesIdenticalRowsAndRangeIsChecked) {
  Rng rng(1);
  ParamStore store;
  EmbeddingTable table(store, "items", 5, 4, rng);
  const std::vector<std::int64_t> ids = {2, 2};
  const Tensor e = table.embed(ids, 1, 2).value();
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(e.at(0, 0, j), e.at(0, 1, j));
  const std::vector<std::int64_t> bad = {6};
  EXPECT_THROW(table.embed(bad, 1, 1), IndexError);
}

TEST(ModalityProjector, IsExactlyAffine) {
  Rng rng(2);
  ParamStore store;
  ModalityProjector proj(store, "p", 3, 5, rng);
  const Tensor zero = proj(ad::constant(Tensor({1, 2, 3}, 0.0))).value();
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(zero.at(0, t, j), proj.proj.bias.value()[j]);
  }

  const Tensor x = rng.normal_tensor({1, 2, 3}, 1.0);
  const Tensor y = rng.normal_tensor({1, 2, 3}, 1.0);
  Tensor xy = x;
  for (std::size_t i = 0; i < x.numel(); ++i) xy[i] += y[i];
  const Tensor pxy = proj(ad::constant(xy)).value();
  const Tensor py = proj(ad::constant(y)).value();
  const Tensor xw = ad::matmul(ad::constant(x), proj.proj.weight).value();
  for (std::size_t i = 0; i < pxy.numel(); ++i) EXPECT_NEAR(pxy[i] - py[i], xw[i], 1e-13);

  // three collinear inputs map to three collinear outputs
  Tensor mid = x;
  for (std::size_t i = 0; i < x.numel(); ++i) mid[i] = 0.3 * x[i] + 0.7 * y[i];
  const Tensor px = proj(ad::constant(x)).value();
  const Tensor pm = proj(ad::constant(mid)).value();
  for (std::size_t i = 0; i < pm.numel(); ++i) EXPECT_NEAR(pm[i], 0.3 * px[i] + 0.7 * py[i], 1e-13);
}

TEST(ModalityProjector, RejectsWrongRawDimension) {
  Rng rng(2);
  ParamStore store;
  ModalityProjector proj(store, "p", 3, 5, rng);
  EXPECT_THROW(proj(ad::constant(Tensor({1, 2, 4}, 0.0))), ShapeMismatch);
}

TEST(ModalityEncoder, OutputShapes) {
  Rng rng(3);
  ParamStore store;
  ModalityEncoder enc(store, "text", Modality::Text, 5, 8, 12, enc_mamba(), rng);
  const std::vector<std::size_t> len = {4, 1, 2};
  const ModalityOutput out = enc(ad::constant(rng.normal_tensor({3, 4, 5}, 1.0)), len, ForwardContext{});
  EXPECT_EQ(out.sequence.shape(), (Shape{3, 4, 8}));
  EXPECT_EQ(out.last.shape(), (Shape{3, 12}));
}

TEST(ModalityEncoder, DefaultDimensions) {
  Rng rng(3);
  ParamStore store;
  MambaConfig mc;
  mc.n_layers = 1;
  ModalityEncoder enc(store, "image", Modality::Image, 16, 256, 512, mc, rng);
  const std::vector<std::size_t> len = {2};
  const ModalityOutput out = enc(ad::constant(rng.normal_tensor({1, 2, 16}, 1.0)), len, ForwardContext{});
  EXPECT_EQ(out.sequence.shape(), (Shape{1, 2, 256}));
  EXPECT_EQ(out.last.shape(), (Shape{1, 512}));
}

TEST(ModalityEncoder, CausalAndPaddingInvariant) {
  Rng rng(4);
  ParamStore store;
  ModalityEncoder enc(store, "text", Modality::Text, 5, 8, 6, enc_mamba(), rng);
  const Tensor x = rng.normal_tensor({1, 6, 5}, 1.0);
  const std::vector<std::size_t> len = {3};
  const ModalityOutput base = enc(ad::constant(x), len, ForwardContext{});

  Tensor tail = x;
  for (std::size_t t = 3; t < 6; ++t) {
    for (std::size_t j = 0; j < 5; ++j) tail.at(0, t, j) = t == 3 ? 0.0 : rng.normal(0.0, 5.0);
  }
  const ModalityOutput moved = enc(ad::constant(tail), len, ForwardContext{});
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(moved.sequence.value().at(0, t, j), base.sequence.value().at(0, t, j));
  }
  EXPECT_EQ(moved.last.value(), base.last.value());
}

TEST(ModalityEncoder, LengthOneSummaryDependsOnFirstPositionOnly) {
  Rng rng(5);
  ParamStore store;
  ModalityEncoder enc(store, "image", Modality::Image, 5, 8, 6, enc_mamba(), rng);
  const Tensor x = rng.normal_tensor({1, 4, 5}, 1.0);
  Tensor y = rng.normal_tensor({1, 4, 5}, 1.0);
  for (std::size_t j = 0; j < 5; ++j) y.at(0, 0, j) = x.at(0, 0, j);
  const std::vector<std::size_t> len = {1};
  EXPECT_EQ(enc(ad::constant(x), len, ForwardContext{}).last.value(),
            enc(ad::constant(y), len, ForwardContext{}).last.value());
}
