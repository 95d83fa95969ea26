/* Copyright 2026 The vla4d Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "test_helpers.hpp"
#include "vla4d/projector.hpp"

namespace vla4d::projector {
namespace {

using ad::Var;
using testing::gradcheck;

Tensor arange(int rows, int cols) {
  Tensor t({rows, cols});
  std::iota(t.data.begin(), t.data.end(), 0.0);
  return t;
}

Tensor identity(int n) {
  Tensor t({n, n});
  for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

// Nested-loop reference for the patch layout.
Tensor patchify_oracle(const Tensor& f, int H, int W, int K) {
  const int C = f.cols();
  Tensor out({H * W, C});
  int row = 0;
  for (int ph = 0; ph < H / K; ++ph) {
    for (int pw = 0; pw < W / K; ++pw) {
      for (int i = 0; i < K; ++i) {
        for (int j = 0; j < K; ++j, ++row) {
          const int src = (ph * K + i) * W + (pw * K + j);
          for (int c = 0; c < C; ++c) out.at(row, c) = f.at(src, c);
        }
      }
    }
  }
  return out;
}

TEST(Patchify, FourByFourHandLayout) {
  const Tensor f = arange(16, 1);  // cell (h, w) holds 4h + w
  const Tensor p = patchify(f, 4, 4, 2);
  EXPECT_EQ(std::vector<double>(p.data.begin(), p.data.begin() + 4), (std::vector<double>{0, 1, 4, 5}));
  EXPECT_EQ(std::vector<double>(p.data.begin() + 4, p.data.begin() + 8), (std::vector<double>{2, 3, 6, 7}));
  EXPECT_EQ(std::vector<double>(p.data.begin() + 12, p.data.end()), (std::vector<double>{10, 11, 14, 15}));
  EXPECT_EQ(p.data, patchify_oracle(f, 4, 4, 2).data);
}

TEST(Patchify, MatchesOracleOnRectangularMaps) {
  std::mt19937_64 rng(1);
  for (auto [H, W, K] : {std::tuple{6, 9, 3}, {8, 4, 4}, {10, 10, 5}, {12, 8, 2}}) {
    const Tensor f = ad::normal_tensor({H * W, 3}, 1.0, rng);
    EXPECT_EQ(patchify(f, H, W, K).data, patchify_oracle(f, H, W, K).data);
    EXPECT_EQ(unpatchify(patchify(f, H, W, K), H, W, K).data, f.data);
  }
}

TEST(Patchify, FullScaleCounts) {
  const auto idx = patch_layout(200, 200, 10);
  EXPECT_EQ(idx.size(), 40000u);  // 400 patches of 100 cells
  std::vector<int> sorted = idx;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 40000; ++i) ASSERT_EQ(sorted[i], i);
}

TEST(Patchify, NonDividingPatchThrows) {
  EXPECT_THROW(patch_layout(10, 12, 4), ShapeError);
  EXPECT_THROW(patchify(Tensor({12, 1}), 3, 4, 2), ShapeError);
}

TEST(Pool, MeanOverEachPatch) {
  Tensor p({4, 1}, std::vector<double>{1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(pool_patches(ad::constant(p), 4).value()[0], 2.5);
  Tensor q({4, 1}, std::vector<double>{4, 2, 1, 3});
  EXPECT_DOUBLE_EQ(pool_patches(ad::constant(q), 4).value()[0], 2.5);
  Tensor c({8, 2}, 0.75);
  const Tensor pooled = pool_patches(ad::constant(c), 4).value();
  for (double v : pooled.data) EXPECT_DOUBLE_EQ(v, 0.75);
}

class ProjectorTest : public ::testing::Test {
 protected:
  std::mt19937_64 rng{5};
  ParamStore store;

  Projector make(int K, int C, int Cl, int heads = 1) {
    return Projector(store, {K, C, Cl, heads}, rng);
  }
};

TEST_F(ProjectorTest, IdentityMapsUniformKeysGivePatchMean) {
  Projector p = make(2, 3, 5);
  p.wq.mutable_value() = identity(3);
  p.wk.mutable_value() = identity(3);
  p.wv.mutable_value() = identity(3);
  ad::NoGradGuard ng;
  // Every cell of a patch carries the same key (and so the same value).
  Tensor uniform({8, 3});
  for (int r = 0; r < 8; ++r) {
    for (int c = 0; c < 3; ++c) uniform.at(r, c) = (r / 4 + 1) * (c - 1.5);
  }
  Var pooled = pool_patches(ad::constant(uniform), 4);
  Tensor out = p.cross_attend(pooled, ad::constant(uniform)).value();
  for (std::int64_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], pooled.value()[i], 1e-12);

  // Keys made uniform by a zero key map while values still differ.
  p.wk.mutable_value() = Tensor({3, 3});
  const Tensor patches = ad::normal_tensor({8, 3}, 1.0, rng);
  pooled = pool_patches(ad::constant(patches), 4);
  out = p.cross_attend(pooled, ad::constant(patches)).value();
  for (std::int64_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], pooled.value()[i], 1e-12);
}

TEST_F(ProjectorTest, DominantKeySaturates) {
  const int C = 4;
  Projector p = make(2, C, 3);
  p.wq.mutable_value() = identity(C);
  p.wk.mutable_value() = identity(C);
  p.wv.mutable_value() = identity(C);
  const double s = std::sqrt(22.0 * std::sqrt(static_cast<double>(C)));  // margin s^2/sqrt(C) = 22
  Tensor patches({4, C});
  patches.at(2, 0) = s;  // cell 2 is the dominant key
  for (int c = 1; c < C; ++c) patches.at(0, c) = patches.at(1, c) = patches.at(3, c) = 0.3 * c;
  Tensor query({1, C});
  query.at(0, 0) = s;
  ad::NoGradGuard ng;
  const Tensor out = p.cross_attend(ad::constant(query), ad::constant(patches)).value();
  // Leftover weight at most 3 e^-22, times the largest value gap (s).
  const double bound = 3 * std::exp(-22.0) * s;
  ASSERT_LT(bound, 1e-6);
  for (int c = 0; c < C; ++c) EXPECT_NEAR(out.at(0, c), patches.at(2, c), bound);
}

TEST_F(ProjectorTest, CrossAttendGradientMatchesFiniteDifferences) {
  Projector p = make(2, 4, 3, 2);
  Var patches = testing::random_leaf({8, 4}, rng);
  const Var r = ad::constant(ad::normal_tensor({2, 4}, 1.0, rng));
  auto f = [&] { return ad::sum_all(ad::mul(p.cross_attend(pool_patches(patches, 4), patches), r)); };
  EXPECT_LT(gradcheck(f, {{"patches", patches}, {"wq", p.wq}, {"wk", p.wk}, {"wv", p.wv}}).worst, 1e-4);
}

TEST_F(ProjectorTest, EndToEndGradient) {
  Projector p = make(2, 3, 5);
  Var bev = testing::random_leaf({16, 3}, rng);
  p.b_out.mutable_value() = ad::normal_tensor({5}, 1.0, rng);
  const Var r = ad::constant(ad::normal_tensor({4, 5}, 1.0, rng));
  auto f = [&] { return ad::sum_all(ad::mul(p.forward(bev, 4, 4), r)); };
  const auto rep = gradcheck(f, {{"bev", bev}, {"wq", p.wq}, {"wk", p.wk}, {"wv", p.wv},
                                 {"w_out", p.w_out}, {"b_out", p.b_out}});
  EXPECT_LT(rep.worst, 1e-4) << rep.worst_name;
  EXPECT_LT(store.numel(), 5000);
}

TEST_F(ProjectorTest, ShapeContract) {
  Projector p = make(8, 64, 128);
  ad::NoGradGuard ng;
  const Tensor out = p.forward(ad::constant(ad::normal_tensor({1600, 64}, 1.0, rng)), 40, 40).value();
  EXPECT_EQ(out.shape, (Shape{25, 128}));
  for (auto [H, W, K] : {std::tuple{6, 4, 2}, {9, 3, 3}, {5, 5, 5}}) {
    ParamStore s;
    Projector q(s, {K, 6, 10, 2}, rng);
    EXPECT_EQ(q.forward(ad::constant(Tensor({H * W, 6})), H, W).shape(), (Shape{H / K * (W / K), 10}));
  }
}

TEST_F(ProjectorTest, ZeroInputZeroBiasGivesZeroTokens) {
  Projector p = make(4, 8, 6);
  ad::NoGradGuard ng;
  const Tensor out = p.forward(ad::constant(Tensor({64, 8})), 8, 8).value();
  for (double v : out.data) EXPECT_EQ(v, 0.0);
}

TEST_F(ProjectorTest, PatchLocality) {
  Projector p = make(2, 4, 6);
  p.b_out.mutable_value() = ad::normal_tensor({6}, 1.0, rng);
  Tensor bev = ad::normal_tensor({6 * 4, 4}, 1.0, rng);  // H = 6, W = 4 -> 3 x 2 patches
  ad::NoGradGuard ng;
  const Tensor before = p.forward(ad::constant(bev), 6, 4).value();
  // Cell (3, 1) lies in patch (1, 0) = token 2.
  for (int c = 0; c < 4; ++c) bev.at(3 * 4 + 1, c) += 0.5;
  const Tensor after = p.forward(ad::constant(bev), 6, 4).value();
  for (int n = 0; n < 6; ++n) {
    double diff = 0;
    for (int c = 0; c < 6; ++c) diff += std::abs(after.at(n, c) - before.at(n, c));
    if (n == 2) {
      EXPECT_GT(diff, 1e-6);
    } else {
      EXPECT_EQ(diff, 0.0) << "token " << n;
    }
  }
}

TEST_F(ProjectorTest, AttentionRowsSumToOne) {
  Projector p = make(4, 8, 6, 2);
  const Tensor w = p.attention_weights(ad::normal_tensor({64, 8}, 2.0, rng), 8, 8);
  ASSERT_EQ(w.shape, (Shape{4 * 2, 16}));
  for (int r = 0; r < w.rows(); ++r) EXPECT_NEAR(w.mat().row(r).sum(), 1.0, 1e-6);
}

TEST(Encoder, ShapeStrideAndFreeze) {
  std::mt19937_64 rng(3);
  ParamStore store;
  Encoder e(store, {16, 2}, rng);
  EXPECT_FALSE(e.weight.requires_grad());
  EXPECT_FALSE(e.bias.requires_grad());
  std::vector<double> sensor(2 * 8 * 6);
  for (auto& v : sensor) v = std::uniform_real_distribution<double>(0, 1)(rng);
  const BevFeature f = e.encode(sensor, 8, 6);
  EXPECT_EQ(f.H, 4);
  EXPECT_EQ(f.W, 3);
  EXPECT_EQ(f.data.shape, (Shape{12, 16}));
  EXPECT_TRUE(f.data.all_finite());
  EXPECT_THROW(e.encode(sensor, 6, 8 + 1), ShapeError);
  EXPECT_THROW(e.encode(std::vector<double>(2 * 7 * 6), 7, 6), ShapeError);
}

TEST(Encoder, PositionalCodeDistinguishesIdenticalCells) {
  std::mt19937_64 rng(3);
  ParamStore store;
  EncoderConfig cfg{16, 1};
  Encoder e(store, cfg, rng);
  const std::vector<double> flat(2 * 8 * 8, 0.0);
  const BevFeature f = e.encode(flat, 8, 8);
  // Interior cells see identical sensor neighbourhoods; only position differs.
  EXPECT_NE(f.data.mat().row(2 * 8 + 2), f.data.mat().row(5 * 8 + 3));

  ParamStore store2;
  std::mt19937_64 rng2(3);
  cfg.position = 0.0;
  Encoder plain(store2, cfg, rng2);
  const BevFeature g = plain.encode(flat, 8, 8);
  EXPECT_EQ(g.data.mat().row(2 * 8 + 2), g.data.mat().row(5 * 8 + 3));
}

}  // namespace
}  // namespace vla4d::projector
