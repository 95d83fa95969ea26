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
#include "vla4d/heads.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "vla4d/losses.hpp"
#include "vla4d/projector.hpp"

namespace vla4d::heads {

LiftLayer::LiftLayer(ParamStore& store, int lm_width, int patch, int channels, std::mt19937_64& rng)
    : patch_(patch), channels_(channels) {
  w = store.add("heads.lift.w",
                ad::normal_tensor({lm_width, patch * patch * channels}, 1.0 / std::sqrt(lm_width), rng));
  b = store.add("heads.lift.b", Tensor({patch * patch * channels}));
}

ad::Var LiftLayer::forward(const ad::Var& f_star, int H, int W) const {
  const int K = patch_;
  if (H % K != 0 || W % K != 0 || f_star.rows() != (H / K) * (W / K)) {
    throw ShapeError("lift_to_bev: " + std::to_string(f_star.rows()) + " tokens for a " +
                     std::to_string(H) + "x" + std::to_string(W) + " map with patch " +
                     std::to_string(K));
  }
  const ad::Var y = ad::linear(f_star, w, b);
  return projector::unpatchify(ad::reshape(y, {f_star.rows() * K * K, channels_}), H, W, K);
}

ad::RowMix bilinear_mix(int H, int W, int nx, int ny) {
  ad::RowMix mix;
  mix.in_rows = H * W;
  mix.terms.resize(static_cast<std::size_t>(nx) * ny);
  auto axis = [](int out, int in, int i, int& i0, int& i1, double& a) {
    double u = (i + 0.5) * in / out - 0.5;
    u = std::clamp(u, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<int>(std::floor(u));
    i1 = std::min(i0 + 1, in - 1);
    a = u - i0;
  };
  for (int x = 0; x < nx; ++x) {
    int h0, h1, w0, w1;
    double ah, aw;
    axis(nx, H, x, h0, h1, ah);
    for (int y = 0; y < ny; ++y) {
      axis(ny, W, y, w0, w1, aw);
      auto& t = mix.terms[static_cast<std::size_t>(x) * ny + y];
      const std::pair<int, double> c[4] = {{h0 * W + w0, (1 - ah) * (1 - aw)},
                                           {h0 * W + w1, (1 - ah) * aw},
                                           {h1 * W + w0, ah * (1 - aw)},
                                           {h1 * W + w1, ah * aw}};
      for (const auto& [row, wt] : c) {
        if (wt != 0.0) t.emplace_back(row, wt);
      }
    }
  }
  return mix;
}

OccFlowHead::OccFlowHead(ParamStore& store, const HeadConfig& cfg, int nz, int num_classes,
                         std::mt19937_64& rng)
    : cfg_(cfg), nz_(nz), classes_(num_classes) {
  if (nz <= 0 || cfg.channels % nz != 0) {
    throw ShapeError("occupancy head: " + std::to_string(cfg.channels) +
                     " channels do not split into " + std::to_string(nz) + " height bins");
  }
  const int cp = cfg.channels / nz;
  const double s = 1.0 / std::sqrt(cp);
  occ_w1 = store.add("heads.occ.w1", ad::normal_tensor({cp, cfg.occ_hidden}, s, rng));
  occ_b1 = store.add("heads.occ.b1", Tensor({cfg.occ_hidden}));
  occ_w2 = store.add("heads.occ.w2",
                     ad::normal_tensor({cfg.occ_hidden, num_classes}, 1.0 / std::sqrt(cfg.occ_hidden), rng));
  occ_b2 = store.add("heads.occ.b2", Tensor({num_classes}));
  flow_w1 = store.add("heads.flow.w1", ad::normal_tensor({cp, cfg.flow_hidden}, s, rng));
  flow_b1 = store.add("heads.flow.b1", Tensor({cfg.flow_hidden}));
  flow_w2 = store.add("heads.flow.w2",
                      ad::normal_tensor({cfg.flow_hidden, 2}, 0.1 / std::sqrt(cfg.flow_hidden), rng));
  flow_b2 = store.add("heads.flow.b2", Tensor({2}));
}

VoxelOutputs OccFlowHead::forward(const ad::Var& map, int H, int W,
                                  const occgrid::GridSpec& spec) const {
  if (spec.nz != nz_) throw ShapeError("occupancy head built for a different height bin count");
  if (map.rows() != H * W || map.cols() != cfg_.channels) {
    throw ShapeError("occupancy head: map " + shape_str(map.shape()) + " is not [" +
                     std::to_string(H * W) + ", " + std::to_string(cfg_.channels) + "]");
  }
  ad::Var grid = map;
  if (H != spec.nx || W != spec.ny) grid = ad::row_mix(map, bilinear_mix(H, W, spec.nx, spec.ny));
  // Row-major [cells, Z * C'] is already [cells * Z, C'].
  const ad::Var voxels =
      ad::reshape(grid, {static_cast<int>(spec.voxel_count()), features_per_bin()});
  VoxelOutputs out;
  out.occ_logits = ad::linear(ad::gelu(ad::linear(voxels, occ_w1, occ_b1)), occ_w2, occ_b2);
  out.flow = ad::scale(ad::linear(ad::gelu(ad::linear(voxels, flow_w1, flow_b1)), flow_w2, flow_b2),
                       cfg_.flow_scale);
  return out;
}

DiffusionSchedule DiffusionSchedule::cosine(int T, double offset) {
  if (T < 1) throw ConfigError("diffusion needs at least one step");
  auto f = [&](int t) {
    const double c = std::cos((static_cast<double>(t) / T + offset) / (1 + offset) * std::numbers::pi / 2);
    return c * c;
  };
  DiffusionSchedule s;
  s.T = T;
  s.beta.assign(static_cast<std::size_t>(T) + 1, 0.0);
  s.alpha_bar.assign(static_cast<std::size_t>(T) + 1, 1.0);
  for (int t = 1; t <= T; ++t) {
    s.beta[t] = std::min(1.0 - f(t) / f(t - 1), 0.999);
    s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - s.beta[t]);
  }
  return s;
}

void DiffusionSchedule::validate() const {
  for (int t = 1; t <= T; ++t) {
    if (!(beta[t] > 0.0 && beta[t] < 1.0)) throw ConfigError("diffusion beta outside (0, 1)");
    if (t > 1 && beta[t] < beta[t - 1]) throw ConfigError("diffusion betas not non-decreasing");
    if (!(alpha_bar[t] < alpha_bar[t - 1])) throw ConfigError("alpha_bar not strictly decreasing");
  }
}

std::vector<double> diffuse(const DiffusionSchedule& s, const std::vector<double>& x0, int t,
                            const std::vector<double>& eps) {
  if (t < 1 || t > s.T) throw ConfigError("diffusion step out of range");
  const double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

Tensor step_embedding(int t, int dim) {
  Tensor e({1, dim});
  const int half = dim / 2;
  for (int j = 0; j < half; ++j) {
    const double freq = std::exp(-std::log(10000.0) * j / std::max(1, half));
    e.data[j] = std::sin(t * freq);
    e.data[half + j] = std::cos(t * freq);
  }
  return e;
}

DiffusionHead::DiffusionHead(ParamStore& store, const HeadConfig& cfg, int lm_width,
                             std::mt19937_64& rng)
    : cfg_(cfg), lm_width_(lm_width), schedule_(DiffusionSchedule::cosine(cfg.diffusion_steps)) {
  if (cfg.sampler_steps < 1 || cfg.sampler_steps > cfg.diffusion_steps) {
    throw ConfigError("sampler steps must lie in [1, T]");
  }
  const int hid = cfg.plan_hidden;
  const int in = kPlanDims + cfg.time_dim + cond_dim();
  command_embed = store.add("heads.plan.command", ad::normal_tensor({4, cfg.command_dim}, 1.0, rng));
  w_in = store.add("heads.plan.in.w", ad::normal_tensor({in, hid}, 1.0 / std::sqrt(in), rng));
  b_in = store.add("heads.plan.in.b", Tensor({hid}));
  for (int i = 0; i < 3; ++i) {
    const std::string p = "heads.plan.block" + std::to_string(i) + ".";
    blocks.push_back({store.add(p + "w1", ad::normal_tensor({hid, hid}, 1.0 / std::sqrt(hid), rng)),
                      store.add(p + "b1", Tensor({hid})),
                      store.add(p + "w2", ad::normal_tensor({hid, hid}, 0.5 / std::sqrt(hid), rng)),
                      store.add(p + "b2", Tensor({hid}))});
  }
  w_out = store.add("heads.plan.out.w", ad::normal_tensor({hid, kPlanDims}, 1.0 / std::sqrt(hid), rng));
  b_out = store.add("heads.plan.out.b", Tensor({kPlanDims}));
}

ad::Var DiffusionHead::condition(const ad::Var& f_star, int command,
                                 const std::optional<occgrid::EgoStatus>& ego, bool use_ego) const {
  if (command < 0 || command >= 4) throw ConfigError("command id out of range");
  Tensor status({1, kEgoDims});
  if (use_ego && ego) status.data = {ego->speed / 10.0, ego->yaw_rate, ego->accel};
  return ad::concat_cols({ad::mean_rows(f_star), ad::gather_rows(command_embed, {command}),
                          ad::constant(std::move(status))});
}

ad::Var DiffusionHead::denoise(const ad::Var& tau_t, int t, const ad::Var& cond) const {
  const ad::Var in = ad::concat_cols({tau_t, ad::constant(step_embedding(t, cfg_.time_dim)), cond});
  ad::Var h = ad::linear(in, w_in, b_in);
  for (const auto& blk : blocks) {
    h = ad::add(h, ad::linear(ad::gelu(ad::linear(h, blk[0], blk[1])), blk[2], blk[3]));
  }
  return ad::linear(ad::gelu(h), w_out, b_out);
}

std::vector<double> DiffusionHead::normalise(const occgrid::TrajectoryPlan& p) const {
  std::vector<double> v;
  for (const auto& w : p.waypoints) {
    v.push_back(w[0] / cfg_.plan_scale);
    v.push_back(w[1] / cfg_.plan_scale);
  }
  return v;
}

occgrid::TrajectoryPlan DiffusionHead::denormalise(const std::vector<double>& v) const {
  occgrid::TrajectoryPlan p;
  for (int i = 0; i < occgrid::kPlanFrames; ++i) {
    p.waypoints[i] = {v[2 * i] * cfg_.plan_scale, v[2 * i + 1] * cfg_.plan_scale};
  }
  return p;
}

ad::Var DiffusionHead::loss(const occgrid::TrajectoryPlan& gt, const ad::Var& cond, int t,
                            const std::vector<double>& eps) const {
  const auto noised = diffuse(schedule_, normalise(gt), t, eps);
  const ad::Var pred = denoise(ad::constant(Tensor({1, kPlanDims}, noised)), t, cond);
  return losses::loss_action(ad::scale(pred, cfg_.plan_scale), gt);
}

occgrid::TrajectoryPlan DiffusionHead::sample(const Tensor& cond, std::uint64_t seed) const {
  ad::NoGradGuard guard;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> x(kPlanDims);
  for (double& v : x) v = nd(rng);
  const ad::Var c = ad::constant(cond);
  const int T = schedule_.T, S = cfg_.sampler_steps;
  std::vector<double> x0(kPlanDims);
  for (int i = S; i >= 1; --i) {
    const int t = static_cast<int>(std::lround(static_cast<double>(T) * i / S));
    const int t_next = static_cast<int>(std::lround(static_cast<double>(T) * (i - 1) / S));
    const Tensor d = denoise(ad::constant(Tensor({1, kPlanDims}, x)), t, c).value();
    x0.assign(d.data.begin(), d.data.end());
    if (t_next == 0) {
      x = x0;
      break;
    }
    const double ab = schedule_.alpha_bar[t], ab_next = schedule_.alpha_bar[t_next];
    for (int j = 0; j < kPlanDims; ++j) {
      const double eps = (x[j] - std::sqrt(ab) * x0[j]) / std::sqrt(1.0 - ab);
      x[j] = std::sqrt(ab_next) * x0[j] + std::sqrt(1.0 - ab_next) * eps;
    }
  }
  return denormalise(x);
}

TextHead::TextHead(ParamStore& store, const backbone::LmConfig& lm, const ad::Var& embedding,
                   bool tied, std::mt19937_64& rng)
    : embedding_(embedding), tied_(tied) {
  norm = store.add("lm.head.norm", Tensor({lm.width}, 1.0));
  if (!tied) w = store.add("lm.head.w", ad::normal_tensor({lm.width, lm.vocab}, 1.0 / std::sqrt(lm.width), rng));
}

ad::Var TextHead::forward(const ad::Var& hidden) const {
  const ad::Var n = ad::rms_norm(hidden, norm);
  return tied_ ? ad::matmul(n, ad::transpose(embedding_)) : ad::matmul(n, w);
}

RowMatrix TextHead::logits(const RowMatrix& hidden) const {
  ad::NoGradGuard guard;
  Tensor h({static_cast<int>(hidden.rows()), static_cast<int>(hidden.cols())});
  h.mat() = hidden;
  return forward(ad::constant(std::move(h))).value().mat();
}

std::vector<int> greedy_decode(const backbone::LanguageModel& lm, const TextHead& head,
                               const Tensor& vision, const std::vector<int>& prompt, int max_new) {
  backbone::KvSession session(lm);
  if (vision.numel() > 0) session.append(vision.mat());
  RowMatrix h = session.append_ids(prompt);
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    const RowMatrix logits = head.logits(h.bottomRows(1));
    Eigen::Index best;
    logits.row(0).maxCoeff(&best);
    const int tok = static_cast<int>(best);
    if (tok == backbone::kEos) break;
    out.push_back(tok);
    if (session.length() >= lm.config().max_seq) break;
    h = session.append_ids({tok});
  }
  return out;
}

}  // namespace vla4d::heads
