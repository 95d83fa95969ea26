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

#include <cmath>
#include <numbers>

#include "test_helpers.hpp"
#include "vla4d/heads.hpp"
#include "vla4d/projector.hpp"

namespace vla4d::heads {
namespace {

using ad::Var;
using occgrid::GridSpec;

Eigen::RowVectorXd row_of(const Tensor& t) { return Eigen::Map<const Eigen::RowVectorXd>(t.data.data(), t.numel()); }

// Token n covers the K x K cells of patch (n / (W/K), n % (W/K)); inside the
// patch, cell (i, j) reads columns [(i K + j) C, (i K + j + 1) C).
Tensor lift_oracle(const Tensor& tokens, const Tensor& w, const Tensor& b, int H, int W, int K) {
  const int C = b.numel() / (K * K);
  const RowMatrix y = (tokens.mat() * w.mat()).rowwise() + row_of(b);
  Tensor out({H * W, C});
  for (int n = 0; n < tokens.rows(); ++n) {
    const int ph = n / (W / K), pw = n % (W / K);
    for (int i = 0; i < K; ++i) {
      for (int j = 0; j < K; ++j) {
        for (int c = 0; c < C; ++c) out.at((ph * K + i) * W + pw * K + j, c) = y(n, (i * K + j) * C + c);
      }
    }
  }
  return out;
}

TEST(LiftLayer, MatchesLayoutOracle) {
  std::mt19937_64 rng(1);
  ParamStore store;
  const LiftLayer lift(store, 6, 2, 3, rng);
  for (auto [H, W] : {std::pair{4, 4}, {6, 8}}) {
    const Tensor tok = ad::normal_tensor({(H / 2) * (W / 2), 6}, 1.0, rng);
    ad::NoGradGuard ng;
    const Tensor out = lift.forward(ad::constant(tok), H, W).value();
    const Tensor ref = lift_oracle(tok, lift.w.value(), lift.b.value(), H, W, 2);
    ASSERT_EQ(out.shape, (Shape{H * W, 3}));
    for (std::int64_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
  }
}

TEST(LiftLayer, TokenOnlyWritesItsPatch) {
  std::mt19937_64 rng(2);
  ParamStore store;
  const LiftLayer lift(store, 4, 4, 2, rng);
  Tensor tok = ad::normal_tensor({25, 4}, 1.0, rng);
  ad::NoGradGuard ng;
  const Tensor a = lift.forward(ad::constant(tok), 20, 20).value();
  for (int c = 0; c < 4; ++c) tok.at(7, c) += 1.0;  // patch (1, 2)
  const Tensor b = lift.forward(ad::constant(tok), 20, 20).value();
  for (int h = 0; h < 20; ++h) {
    for (int w = 0; w < 20; ++w) {
      const bool inside = h / 4 == 1 && w / 4 == 2;
      const double d = std::abs(a.at(h * 20 + w, 0) - b.at(h * 20 + w, 0)) +
                       std::abs(a.at(h * 20 + w, 1) - b.at(h * 20 + w, 1));
      if (inside) {
        EXPECT_GT(d, 0.0);
      } else {
        EXPECT_EQ(d, 0.0) << h << "," << w;
      }
    }
  }
}

TEST(LiftLayer, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  ParamStore store;
  const LiftLayer lift(store, 5, 2, 3, rng);
  Var tok = testing::random_leaf({4, 5}, rng);
  const Var r = ad::constant(ad::normal_tensor({16, 3}, 1.0, rng));
  auto f = [&] { return ad::sum_all(ad::mul(lift.forward(tok, 4, 4), r)); };
  const auto rep = testing::gradcheck(f, {{"tokens", tok}, {"w", lift.w}, {"b", lift.b}});
  EXPECT_LT(rep.worst, 1e-6) << rep.worst_name;
}

TEST(LiftLayer, WrongTokenCountThrows) {
  std::mt19937_64 rng(4);
  ParamStore store;
  const LiftLayer lift(store, 4, 4, 2, rng);
  EXPECT_THROW(lift.forward(ad::constant(Tensor({24, 4})), 20, 20), ShapeError);
  EXPECT_THROW(lift.forward(ad::constant(Tensor({25, 4})), 20, 18), ShapeError);
}

TEST(BilinearMix, IdentityAtSameSize) {
  const auto mix = bilinear_mix(5, 7, 5, 7);
  for (int i = 0; i < 35; ++i) {
    ASSERT_EQ(mix.terms[i].size(), 1u);
    EXPECT_EQ(mix.terms[i][0].first, i);
    EXPECT_EQ(mix.terms[i][0].second, 1.0);
  }
}

TEST(BilinearMix, WeightsArePartitionOfUnity) {
  const auto mix = bilinear_mix(20, 20, 40, 40);
  for (const auto& t : mix.terms) {
    double s = 0;
    for (const auto& [row, w] : t) {
      EXPECT_GE(w, 0.0);
      s += w;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(BilinearMix, UpsamplesLinearRampExactlyInside) {
  // A ramp in h is reproduced wherever no clamping happens.
  const int H = 10, W = 10, n = 20;
  Tensor f({H * W, 1});
  for (int h = 0; h < H; ++h) {
    for (int w = 0; w < W; ++w) f.at(h * W + w, 0) = 3.0 * h - w;
  }
  ad::NoGradGuard ng;
  const Tensor g = ad::row_mix(ad::constant(f), bilinear_mix(H, W, n, n)).value();
  for (int x = 1; x < n - 1; ++x) {
    for (int y = 1; y < n - 1; ++y) {
      const double u = (x + 0.5) * H / n - 0.5, v = (y + 0.5) * W / n - 0.5;
      EXPECT_NEAR(g.at(x * n + y, 0), 3.0 * u - v, 1e-12);
    }
  }
}

class OccFlowTest : public ::testing::Test {
 protected:
  std::mt19937_64 rng{5};
  ParamStore store;
  HeadConfig cfg;
  GridSpec spec = GridSpec::desk();
};

TEST_F(OccFlowTest, OutputShapes) {
  const OccFlowHead head(store, cfg, spec.nz, 9, rng);
  ad::NoGradGuard ng;
  const auto out = head.forward(ad::constant(ad::normal_tensor({1600, 64}, 1.0, rng)), 40, 40, spec);
  EXPECT_EQ(out.occ_logits.shape(), (Shape{12800, 9}));
  EXPECT_EQ(out.flow.shape(), (Shape{12800, 2}));
  // Coarser maps are resampled onto the grid.
  const auto coarse = head.forward(ad::constant(ad::normal_tensor({400, 64}, 1.0, rng)), 20, 20, spec);
  EXPECT_EQ(coarse.occ_logits.shape(), (Shape{12800, 9}));
}

TEST_F(OccFlowTest, ChannelsSplitIntoHeightBins) {
  const OccFlowHead head(store, cfg, spec.nz, 9, rng);
  const Tensor map = ad::normal_tensor({1600, 64}, 1.0, rng);
  ad::NoGradGuard ng;
  const Tensor logits = head.forward(ad::constant(map), 40, 40, spec).occ_logits.value();
  const int cp = head.features_per_bin();
  ASSERT_EQ(cp, 8);
  auto gelu = [](double v) {
    return 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (v + 0.044715 * v * v * v)));
  };
  for (auto [x, y, z] : {std::tuple{0, 0, 0}, {3, 17, 5}, {39, 39, 7}}) {
    const int cell = x * 40 + y;
    const Eigen::RowVectorXd feat = map.mat().row(cell).segment(z * cp, cp);
    Eigen::RowVectorXd h = feat * head.occ_w1.value().mat() +
                           row_of(head.occ_b1.value());
    h = h.unaryExpr(gelu);
    const Eigen::RowVectorXd ref =
        h * head.occ_w2.value().mat() + row_of(head.occ_b2.value());
    const int voxel = cell * spec.nz + z;
    for (int k = 0; k < 9; ++k) EXPECT_NEAR(logits.at(voxel, k), ref(k), 1e-10);
  }
}

TEST_F(OccFlowTest, BiasOnlyHeadPredictsFreeAndStill) {
  OccFlowHead head(store, cfg, spec.nz, 9, rng);
  head.occ_w2.mutable_value().data.assign(head.occ_w2.value().numel(), 0.0);
  head.occ_b2.mutable_value()[occgrid::kFree] = 2.0;
  head.flow_w2.mutable_value().data.assign(head.flow_w2.value().numel(), 0.0);
  ad::NoGradGuard ng;
  const auto out = head.forward(ad::constant(ad::normal_tensor({1600, 64}, 1.0, rng)), 40, 40, spec);
  const Tensor logits = out.occ_logits.value();
  for (int v = 0; v < logits.rows(); ++v) {
    Eigen::Index k;
    logits.mat().row(v).maxCoeff(&k);
    ASSERT_EQ(k, occgrid::kFree);
  }
  const Tensor flow = out.flow.value();
  for (double f : flow.data) ASSERT_EQ(f, 0.0);
}

TEST_F(OccFlowTest, ChannelCountMustSplitEvenly) {
  cfg.channels = 60;
  EXPECT_THROW(OccFlowHead(store, cfg, 8, 9, rng), ShapeError);
}

TEST_F(OccFlowTest, GradientMatchesFiniteDifferences) {
  cfg.channels = 8;
  cfg.occ_hidden = 6;
  cfg.flow_hidden = 5;
  const auto small = GridSpec::centered(4, 4, 2, 1.0, 1.0);
  const OccFlowHead head(store, cfg, small.nz, 3, rng);
  Var map = testing::random_leaf({4, 8}, rng);
  const Var r1 = ad::constant(ad::normal_tensor({32, 3}, 1.0, rng));
  const Var r2 = ad::constant(ad::normal_tensor({32, 2}, 1.0, rng));
  auto f = [&] {
    const auto o = head.forward(map, 2, 2, small);
    return ad::add(ad::sum_all(ad::mul(o.occ_logits, r1)), ad::sum_all(ad::mul(o.flow, r2)));
  };
  std::vector<std::pair<std::string, Var>> in = {{"map", map}};
  for (const auto& [name, v] : store.entries()) in.emplace_back(name, v);
  const auto rep = testing::gradcheck(f, in);
  EXPECT_LT(rep.worst, 1e-6) << rep.worst_name;
}

TEST(DiffusionSchedule, CosineIsValid) {
  const auto s = DiffusionSchedule::cosine(100);
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(s.alpha_bar[0], 1.0);
  EXPECT_GT(s.alpha_bar[1], 0.999);
  EXPECT_LT(s.alpha_bar[100], 1e-4);
  // Closed form before clipping: alpha_bar = f(t) / f(0).
  auto f = [](double t) {
    const double c = std::cos((t / 100 + 0.008) / 1.008 * std::numbers::pi / 2);
    return c * c;
  };
  for (int t = 1; t < 90; ++t) EXPECT_NEAR(s.alpha_bar[t], f(t) / f(0), 1e-12);
  EXPECT_THROW(DiffusionSchedule::cosine(0), ConfigError);
}

TEST(Diffuse, EndpointIsStandardNormal) {
  const auto s = DiffusionSchedule::cosine(100);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd;
  const std::vector<double> x0 = {2.0, -1.5};
  double sum = 0, sq = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const double v = diffuse(s, x0, 100, {nd(rng), nd(rng)})[i % 2];
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n, var = sq / n - mean * mean;
  EXPECT_LT(std::abs(mean), 0.05);
  EXPECT_GT(var, 0.9);
  EXPECT_LT(var, 1.1);
}

TEST(Diffuse, FirstStepIsNearlyClean) {
  const auto s = DiffusionSchedule::cosine(100);
  const auto y = diffuse(s, {1.0, -2.0}, 1, {0.3, 0.3});
  EXPECT_NEAR(y[0], 1.0, 0.02);
  EXPECT_NEAR(y[1], -2.0, 0.02);
  EXPECT_THROW(diffuse(s, {1.0}, 0, {0.0}), ConfigError);
  EXPECT_THROW(diffuse(s, {1.0}, 101, {0.0}), ConfigError);
}

TEST(StepEmbedding, SinCosHalves) {
  const Tensor e = step_embedding(7, 8);
  for (int j = 0; j < 4; ++j) {
    EXPECT_NEAR(e[j] * e[j] + e[4 + j] * e[4 + j], 1.0, 1e-12);
  }
  EXPECT_NEAR(e[0], std::sin(7.0), 1e-12);
}

class DiffusionTest : public ::testing::Test {
 protected:
  std::mt19937_64 rng{7};
  ParamStore store;
  HeadConfig cfg = [] {
    HeadConfig c;
    c.plan_hidden = 8;
    c.time_dim = 4;
    c.command_dim = 2;
    return c;
  }();
  static constexpr int kWidth = 4;

  occgrid::TrajectoryPlan plan() const {
    occgrid::TrajectoryPlan p;
    for (int i = 0; i < occgrid::kPlanFrames; ++i) p.waypoints[i] = {1.7 * (i + 1), 0.1 * i * i};
    return p;
  }
};

TEST_F(DiffusionTest, NormaliseRoundTrip) {
  const DiffusionHead head(store, cfg, kWidth, rng);
  const auto p = plan();
  const auto back = head.denormalise(head.normalise(p));
  for (int i = 0; i < occgrid::kPlanFrames; ++i) {
    EXPECT_NEAR(back.waypoints[i][0], p.waypoints[i][0], 1e-12);
    EXPECT_NEAR(back.waypoints[i][1], p.waypoints[i][1], 1e-12);
  }
}

TEST_F(DiffusionTest, ConditionLayout) {
  const DiffusionHead head(store, cfg, kWidth, rng);
  ad::NoGradGuard ng;
  const Tensor f = ad::normal_tensor({3, kWidth}, 1.0, rng);
  occgrid::EgoStatus ego;
  ego.speed = 5.0;
  ego.yaw_rate = 0.1;
  ego.accel = -0.5;
  const Tensor c = head.condition(ad::constant(f), 2, ego, true).value();
  ASSERT_EQ(c.shape, (Shape{1, head.cond_dim()}));
  for (int j = 0; j < kWidth; ++j) EXPECT_NEAR(c[j], f.mat().col(j).mean(), 1e-12);
  for (int j = 0; j < cfg.command_dim; ++j) EXPECT_EQ(c[kWidth + j], head.command_embed.value().at(2, j));
  const Tensor off = head.condition(ad::constant(f), 2, ego, false).value();
  for (int j = 0; j < 3; ++j) EXPECT_EQ(off[kWidth + cfg.command_dim + j], 0.0);
  EXPECT_NE(c[kWidth + cfg.command_dim], 0.0);
  EXPECT_THROW(head.condition(ad::constant(f), 4, std::nullopt, false), ConfigError);
}

TEST_F(DiffusionTest, LossGradientMatchesFiniteDifferences) {
  const DiffusionHead head(store, cfg, kWidth, rng);
  ASSERT_LE(store.numel(), 5000);
  Var f = testing::random_leaf({3, kWidth}, rng);
  std::normal_distribution<double> nd;
  std::vector<double> eps(DiffusionHead::kPlanDims);
  for (double& e : eps) e = nd(rng);
  const auto gt = plan();
  auto fn = [&] { return head.loss(gt, head.condition(f, 1, std::nullopt, false), 37, eps); };
  std::vector<std::pair<std::string, Var>> in = {{"f_star", f}};
  for (const auto& [name, v] : store.entries()) in.emplace_back(name, v);
  const auto rep = testing::gradcheck(fn, in);
  EXPECT_LT(rep.worst, 1e-4) << rep.worst_name;
}

TEST_F(DiffusionTest, SamplingIsSeedDeterministic) {
  const DiffusionHead head(store, cfg, kWidth, rng);
  ad::NoGradGuard ng;
  const Tensor c = head.condition(ad::constant(ad::normal_tensor({3, kWidth}, 1.0, rng)), 0,
                                  std::nullopt, false)
                       .value();
  const auto a = head.sample(c, 99);
  const auto b = head.sample(c, 99);
  const auto d = head.sample(c, 100);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(a.all_finite());
  EXPECT_NE(a, d);
}

TEST_F(DiffusionTest, SamplerStepBounds) {
  cfg.sampler_steps = 0;
  EXPECT_THROW(DiffusionHead(store, cfg, kWidth, rng), ConfigError);
}

class TextHeadTest : public ::testing::Test {
 protected:
  std::mt19937_64 rng{8};
  ParamStore store;
  backbone::LanguageModel make_lm() {
    backbone::LmConfig c;
    c.layers = 2;
    c.width = 16;
    c.heads = 2;
    c.ffn = 32;
    c.vocab = 13;
    c.max_seq = 32;
    return backbone::LanguageModel(store, c, rng);
  }
};

TEST_F(TextHeadTest, ShapesAndTying) {
  const auto lm = make_lm();
  const TextHead untied(store, lm.config(), lm.embedding, false, rng);
  ad::NoGradGuard ng;
  const Var h = ad::constant(ad::normal_tensor({5, 16}, 1.0, rng));
  EXPECT_EQ(untied.forward(h).shape(), (Shape{5, 13}));

  ParamStore other;
  std::mt19937_64 r2(1);
  backbone::LmConfig c = lm.config();
  const backbone::LanguageModel lm2(other, c, r2);
  const TextHead tied(other, c, lm2.embedding, true, r2);
  EXPECT_FALSE(other.contains("lm.head.w"));
  const Tensor logits = tied.forward(h).value();
  const Tensor n = ad::rms_norm(h, tied.norm).value();
  const RowMatrix ref = n.mat() * lm2.embedding.value().mat().transpose();
  EXPECT_LT((logits.mat() - ref).cwiseAbs().maxCoeff(), 1e-12);
}

TEST_F(TextHeadTest, GreedyDecodeMatchesFullRecompute) {
  const auto lm = make_lm();
  const TextHead head(store, lm.config(), lm.embedding, false, rng);
  const Tensor vision = ad::normal_tensor({3, 16}, 1.0, rng);
  const std::vector<int> prompt = {backbone::kBos, 7, 9};
  const auto got = greedy_decode(lm, head, vision, prompt, 8);

  // Naive decoder: full forward each step.
  ad::NoGradGuard ng;
  std::vector<int> ids = prompt, want;
  for (int step = 0; step < 8; ++step) {
    const Tensor h = lm.forward(ad::constant(vision), ids).layers.back().value();
    const RowMatrix logits = head.logits(h.mat().bottomRows(1));
    Eigen::Index best;
    logits.row(0).maxCoeff(&best);
    if (best == backbone::kEos) break;
    want.push_back(static_cast<int>(best));
    ids.push_back(static_cast<int>(best));
  }
  EXPECT_EQ(got, want);
}

TEST_F(TextHeadTest, GreedyDecodeStopsAtEos) {
  const auto lm = make_lm();
  TextHead head(store, lm.config(), lm.embedding, false, rng);
  const std::vector<int> prompt = {backbone::kBos, 4};
  {
    ad::NoGradGuard ng;
    const Tensor h = lm.forward(Var(), prompt).layers.back().value();
    const Tensor n = ad::rms_norm(ad::constant(h), head.norm).value();
    // Point the EOS column along the last normalised state.
    for (int j = 0; j < 16; ++j) head.w.mutable_value().at(j, backbone::kEos) = 100.0 * n.at(1, j);
  }
  EXPECT_TRUE(greedy_decode(lm, head, Tensor(), prompt, 5).empty());
}

}  // namespace
}  // namespace vla4d::heads
