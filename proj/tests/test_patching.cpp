#include <gtest/gtest.h>

#include <cmath>

#include "ddit/patching.hpp"
#include "ddit/rng.hpp"

using namespace ddit;

namespace {

Latent random_latent(int h, int w, int c, std::uint64_t seed) {
  CounterRng rng(seed);
  Latent z(h, w, c);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = static_cast<float>(rng.normal());
  return z;
}

Mat<float> random_mat(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
  CounterRng rng(seed, 99);
  Mat<float> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(scale * rng.normal());
  return m;
}

PatchEmbedder<float> random_embedder(int edge, int channels, int d, std::uint64_t seed) {
  PatchEmbedder<float> e;
  e.edge = edge;
  e.channels = channels;
  e.weight = random_mat(edge * edge * channels, d, seed, 0.3);
  e.bias = random_mat(d, 1, seed + 1).col(0);
  return e;
}

}  // namespace

TEST(Patchify, SinglePatch) {
  const auto z = random_latent(4, 4, 1, 1);
  const auto p = patchify(z, 4);
  ASSERT_EQ(p.rows(), 1);
  ASSERT_EQ(p.cols(), 16);
  for (int i = 0; i < 16; ++i) EXPECT_EQ(p(0, i), z[static_cast<std::size_t>(i)]);
}

TEST(Patchify, RowMajorLayout) {
  std::vector<float> v(16);
  for (int i = 0; i < 16; ++i) v[static_cast<std::size_t>(i)] = static_cast<float>(i);
  const auto p = patchify(Latent(4, 4, 1, v), 2);
  ASSERT_EQ(p.rows(), 4);
  EXPECT_EQ(p(0, 0), 0);
  EXPECT_EQ(p(0, 1), 1);
  EXPECT_EQ(p(0, 2), 4);
  EXPECT_EQ(p(0, 3), 5);
  EXPECT_EQ(p(1, 0), 2);  // top-right patch next
  EXPECT_EQ(p(2, 0), 8);
}

TEST(Patchify, NonDivisibleThrows) {
  EXPECT_THROW(patchify(Latent(6, 6, 1), 4), ValidationError);
  EXPECT_THROW(depatchify(Mat<float>(3, 4), 2, 4, 4), ValidationError);
}

TEST(Patchify, RoundTripIsBitIdentical) {
  const auto z = random_latent(8, 8, 4, 42);
  for (int e : {1, 2, 4, 8}) EXPECT_EQ(depatchify(patchify(z, e), e, 8, 8), z);
}

TEST(Depatchify, PatchOrderMatters) {
  const auto z = random_latent(8, 8, 4, 42);
  Mat<float> p = patchify(z, 4);
  p.row(0).swap(p.row(3));
  EXPECT_NE(depatchify(p, 4, 8, 8), z);
}

TEST(BilinearResize, ConstantStaysConstant) {
  const Latent c(3, 3, 2, 1.25f);
  const auto r = bilinear_resize(c, 7);
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_FLOAT_EQ(r[i], 1.25f);
}

TEST(BilinearResize, SameSizeIsIdentity) {
  const auto z = random_latent(4, 4, 3, 5);
  EXPECT_EQ(bilinear_resize(z, 4), z);
}

TEST(BilinearResize, AlignCornersPreservesCorners) {
  const Latent z(2, 2, 1, std::vector<float>{0, 1, 2, 3});
  const auto r = bilinear_resize(z, 4);
  EXPECT_EQ(r.at(0, 0, 0), 0.f);
  EXPECT_EQ(r.at(0, 3, 0), 1.f);
  EXPECT_EQ(r.at(3, 0, 0), 2.f);
  EXPECT_EQ(r.at(3, 3, 0), 3.f);
  EXPECT_NEAR(r.at(1, 1, 0), 1.0f, 1e-6);  // (1/3)*1 + (1/3)*2
}

TEST(BilinearResize, MatrixMatchesDirectResize) {
  const auto z = random_latent(2, 2, 3, 8);
  const Mat<double> r = resize_matrix(2, 8, 3);
  Eigen::VectorXd x(12);
  for (int i = 0; i < 12; ++i) x[i] = z[static_cast<std::size_t>(i)];
  const Eigen::VectorXd y = r * x;
  const auto direct = bilinear_resize(z, 8);
  for (std::size_t i = 0; i < direct.size(); ++i) EXPECT_NEAR(y[static_cast<Eigen::Index>(i)], direct[i], 1e-6);
}

TEST(Embed, ZeroPatchesGiveBias) {
  auto e = random_embedder(2, 1, 5, 3);
  const Mat<float> patches = Mat<float>::Zero(4, 4);
  const auto seq = embed<float>(patches, e, Mat<float>::Zero(4, 5), Vec<float>::Zero(5), Vec<float>::Zero(5), 2, 2);
  for (int r = 0; r < 4; ++r)
    for (int k = 0; k < 5; ++k) EXPECT_EQ(seq.tokens(r, k), e.bias[k]);
}

TEST(Embed, ScalarIdentity) {
  PatchEmbedder<float> e;
  e.edge = 1;
  e.weight = Mat<float>::Ones(1, 1);
  e.bias = Vec<float>::Zero(1);
  Mat<float> p(1, 1);
  p(0, 0) = 3.5f;
  const auto seq = embed<float>(p, e, Mat<float>::Zero(1, 1), Vec<float>::Zero(1), Vec<float>::Zero(1), 1, 1);
  EXPECT_EQ(seq.tokens(0, 0), 3.5f);
}

TEST(Embed, MatchesTripleLoopOracle) {
  const int n = 16, pdim = 16, d = 8;
  auto e = random_embedder(2, 4, d, 4);
  const Mat<float> patches = random_mat(n, pdim, 5);
  const Mat<float> pos = random_mat(n, d, 6);
  const Vec<float> ident = random_mat(d, 1, 7).col(0), temb = random_mat(d, 1, 8).col(0);
  const auto seq = embed<float>(patches, e, pos, ident, temb, 4, 4);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < d; ++k) {
      double acc = 0;
      for (int j = 0; j < pdim; ++j) acc += double(patches(i, j)) * double(e.weight(j, k));
      acc += e.bias[k] + pos(i, k) + ident[k] + temb[k];
      EXPECT_NEAR(seq.tokens(i, k), acc, 1e-5);
    }
}

TEST(Embed, ShapeMismatchThrows) {
  auto e = random_embedder(2, 1, 4, 3);
  EXPECT_THROW(embed<float>(Mat<float>::Zero(4, 9), e, Mat<float>::Zero(4, 4), Vec<float>::Zero(4), Vec<float>::Zero(4), 2, 2),
               ValidationError);
}

TEST(Embed, IsAffine) {
  auto e = random_embedder(2, 2, 6, 9);
  const Mat<float> x = random_mat(4, 8, 10), y = random_mat(4, 8, 11), pos = random_mat(4, 6, 12);
  const Vec<float> id = random_mat(6, 1, 13).col(0), t = random_mat(6, 1, 14).col(0);
  auto f = [&](const Mat<float>& p) { return embed(p, e, pos, id, t, 2, 2).tokens; };
  const Mat<float> zero = f(Mat<float>::Zero(4, 8));
  const float a = 0.7f, b = -1.3f;
  const Mat<float> lhs = f(a * x + b * y) - zero;
  const Mat<float> rhs = a * (f(x) - zero) + b * (f(y) - zero);
  EXPECT_LE((lhs - rhs).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(PseudoInverse, UpsampledPatchesEmbedLikeBase) {
  for (int m : {2, 4}) {
    auto base = random_embedder(2, 4, 16, 21);
    PseudoInverseReport rep;
    const auto big = init_pseudo_inverse(base, m, &rep);
    EXPECT_EQ(big.edge, 2 * m);
    EXPECT_GT(rep.condition_number, 1.0);
    CounterRng rng(m);
    for (int trial = 0; trial < 100; ++trial) {
      Latent x(2, 2, 4);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.normal());
      const Mat<float> xb = patchify(x, 2), xu = patchify(bilinear_resize(x, 2 * m), 2 * m);
      const Mat<float> tb = xb * base.weight, tu = xu * big.weight;
      EXPECT_LE((tb - tu).cwiseAbs().maxCoeff(), 1e-5);
    }
  }
}

TEST(PseudoInverse, ZeroWeightsStayZero) {
  auto base = random_embedder(2, 2, 4, 2);
  base.weight.setZero();
  EXPECT_EQ(init_pseudo_inverse(base, 2).weight.cwiseAbs().maxCoeff(), 0.f);
}

TEST(PseudoInverse, MultiplierOneIsIdentity) {
  const auto base = random_embedder(2, 2, 4, 2);
  const auto same = init_pseudo_inverse(base, 1);
  EXPECT_EQ(same.weight, base.weight);
  EXPECT_EQ(same.bias, base.bias);
}

TEST(PseudoInverse, IllConditionedProjectionReportsConditionNumber) {
  const auto base = random_embedder(2, 1, 4, 2);
  try {
    init_pseudo_inverse(base, 2, nullptr, 1.0);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("condition number"), std::string::npos);
  }
}

TEST(UpsampledDeembedder, OutputIsUpsampledBaseOutput) {
  PatchDeembedder<float> base;
  base.edge = 2;
  base.channels = 2;
  base.weight = random_mat(6, 8, 30);
  base.bias = random_mat(8, 1, 31).col(0);
  const auto big = init_upsampled_deembedder(base, 2);
  const Mat<float> tok = random_mat(1, 6, 32);
  const Mat<float> small = tok * base.weight + base.bias.transpose();
  const Mat<float> large = tok * big.weight + big.bias.transpose();
  const Latent up = bilinear_resize(depatchify<float>(small, 2, 2, 2), 4);
  const Latent got = depatchify<float>(large, 4, 4, 4);
  for (std::size_t i = 0; i < up.size(); ++i) EXPECT_NEAR(got[i], up[i], 1e-5);
}

TEST(InterpolatePos, IdentityAtBaseSize) {
  PositionalGrid<float> pos{4, 4, random_mat(16, 3, 40), {}};
  EXPECT_EQ(interpolate_pos(pos, 1), pos.base);
}

TEST(InterpolatePos, ConstantGridStaysConstant) {
  PositionalGrid<float> pos{8, 8, Mat<float>::Constant(64, 5, 0.5f), {}};
  const auto g = interpolate_pos(pos, 4);
  EXPECT_EQ(g.rows(), 4);
  EXPECT_LE((g.array() - 0.5f).abs().maxCoeff(), 1e-7);
}

TEST(InterpolatePos, AlignCornersKeepsCornerEmbeddings) {
  PositionalGrid<float> pos{4, 4, random_mat(16, 3, 41), {}};
  const auto g = interpolate_pos(pos, 2);
  ASSERT_EQ(g.rows(), 4);
  EXPECT_LE((g.row(0) - pos.base.row(0)).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LE((g.row(1) - pos.base.row(3)).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LE((g.row(2) - pos.base.row(12)).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LE((g.row(3) - pos.base.row(15)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(SizeIdentifier, BaseEntryIsZero) {
  SizeIdentifier<float> id;
  id.hidden = 4;
  id.vectors[2] = Vec<float>::Ones(4);
  EXPECT_EQ(id.get(1), Vec<float>::Zero(4));
  EXPECT_EQ(id.get(2), Vec<float>::Ones(4));
  EXPECT_THROW(id.get(8), ValidationError);
}
