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
#include "vla4d/projector.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace vla4d::projector {

std::vector<int> patch_layout(int H, int W, int K) {
  if (K <= 0 || H <= 0 || W <= 0 || H % K != 0 || W % K != 0) {
    throw ShapeError("patch size " + std::to_string(K) + " does not divide BEV " +
                     std::to_string(H) + "x" + std::to_string(W));
  }
  const int ph = H / K, pw = W / K;
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(H) * W);
  for (int a = 0; a < ph; ++a) {
    for (int b = 0; b < pw; ++b) {
      for (int i = 0; i < K; ++i) {
        for (int j = 0; j < K; ++j) idx.push_back((a * K + i) * W + (b * K + j));
      }
    }
  }
  return idx;
}

Tensor patchify(const Tensor& f, int H, int W, int K) {
  if (f.rows() != H * W) throw ShapeError("patchify: expected " + std::to_string(H * W) + " rows");
  const auto idx = patch_layout(H, W, K);
  const int C = f.cols();
  Tensor out({H * W / (K * K), K * K, C});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(f.data.begin() + static_cast<std::ptrdiff_t>(idx[r]) * C, C,
                out.data.begin() + static_cast<std::ptrdiff_t>(r) * C);
  }
  return out;
}

Tensor unpatchify(const Tensor& patches, int H, int W, int K) {
  const auto idx = patch_layout(H, W, K);
  const int C = static_cast<int>(patches.numel() / (static_cast<std::int64_t>(H) * W));
  if (static_cast<std::int64_t>(C) * H * W != patches.numel()) {
    throw ShapeError("unpatchify: " + shape_str(patches.shape) + " does not fit the BEV");
  }
  Tensor out({H * W, C});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(patches.data.begin() + static_cast<std::ptrdiff_t>(r) * C, C,
                out.data.begin() + static_cast<std::ptrdiff_t>(idx[r]) * C);
  }
  return out;
}

ad::Var patchify(const ad::Var& f, int H, int W, int K) {
  if (f.rows() != H * W) throw ShapeError("patchify: expected " + std::to_string(H * W) + " rows");
  return ad::gather_rows(f, patch_layout(H, W, K));
}

ad::Var unpatchify(const ad::Var& patches, int H, int W, int K) {
  if (patches.rows() != H * W) throw ShapeError("unpatchify: expected " + std::to_string(H * W) + " rows");
  const auto idx = patch_layout(H, W, K);
  std::vector<int> inverse(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) inverse[static_cast<std::size_t>(idx[r])] = static_cast<int>(r);
  return ad::gather_rows(patches, inverse);
}

ad::Var pool_patches(const ad::Var& patches, int group) {
  const int rows = patches.rows();
  if (group <= 0 || rows % group != 0) throw ShapeError("pool_patches: bad group size");
  ad::RowMix mix;
  mix.in_rows = rows;
  mix.terms.resize(static_cast<std::size_t>(rows / group));
  for (int n = 0; n < rows / group; ++n) {
    for (int j = 0; j < group; ++j) mix.terms[n].emplace_back(n * group + j, 1.0 / group);
  }
  return ad::row_mix(patches, mix);
}

Projector::Projector(ParamStore& store, const ProjectorConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg) {
  if (cfg.channels % cfg.heads != 0) throw ConfigError("projector channels not divisible by heads");
  const int C = cfg.channels;
  const double s = 1.0 / std::sqrt(static_cast<double>(C));
  wq = store.add("projector.wq", ad::normal_tensor({C, C}, s, rng));
  wk = store.add("projector.wk", ad::normal_tensor({C, C}, s, rng));
  wv = store.add("projector.wv", ad::normal_tensor({C, C}, s, rng));
  w_out = store.add("projector.out.w", ad::normal_tensor({C, cfg.lm_width}, s, rng));
  b_out = store.add("projector.out.b", Tensor({cfg.lm_width}));
}

ad::Var Projector::cross_attend(const ad::Var& pooled, const ad::Var& patches) const {
  const int group = patches.rows() / pooled.rows();
  const ad::Var q = ad::matmul(pooled, wq);
  const ad::Var k = ad::matmul(patches, wk);
  const ad::Var v = ad::matmul(patches, wv);
  return ad::grouped_query_attention(q, k, v, group, cfg_.heads);
}

ad::Var Projector::forward(const ad::Var& bev, int H, int W) const {
  const int K = cfg_.patch;
  const ad::Var patches = patchify(bev, H, W, K);
  const ad::Var pooled = pool_patches(patches, K * K);
  return ad::linear(cross_attend(pooled, patches), w_out, b_out);
}

Tensor Projector::attention_weights(const Tensor& bev, int H, int W) const {
  ad::NoGradGuard guard;
  const int K = cfg_.patch;
  const ad::Var patches = patchify(ad::constant(bev), H, W, K);
  const ad::Var pooled = pool_patches(patches, K * K);
  return ad::grouped_attention_weights(ad::matmul(pooled, wq).value(),
                                       ad::matmul(patches, wk).value(), K * K, cfg_.heads);
}

Encoder::Encoder(ParamStore& store, const EncoderConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg) {
  if (cfg.channels <= 0 || cfg.stride <= 0) throw ConfigError("encoder channels and stride must be positive");
  weight = store.add("encoder.conv.w", ad::normal_tensor({cfg.channels, 18}, 0.6, rng));
  bias = store.add("encoder.conv.b", ad::normal_tensor({cfg.channels}, 0.2, rng));
  weight.set_requires_grad(false);
  bias.set_requires_grad(false);
}

namespace {

// Fixed 2D sinusoid: channels cycle through sin x, cos x, sin y, cos y with
// periods spread geometrically from 2 cells to twice the grid extent.
double position_code(int c, int C, int x, int y, int extent) {
  const int groups = std::max(1, C / 4);
  const int g = (c / 4) % groups;
  const double period =
      groups == 1 ? 2.0 : 2.0 * std::pow(static_cast<double>(extent), static_cast<double>(g) / (groups - 1));
  const double phase = 2.0 * std::numbers::pi * ((c % 4) < 2 ? x : y) / period;
  return (c % 2) == 0 ? std::sin(phase) : std::cos(phase);
}

}  // namespace

BevFeature Encoder::encode(const std::vector<double>& sensor, int nx, int ny) const {
  if (sensor.size() != 2 * static_cast<std::size_t>(nx) * ny) {
    throw ShapeError("encoder: sensor raster does not match " + std::to_string(nx) + "x" +
                     std::to_string(ny));
  }
  const int st = cfg_.stride;
  if (nx % st != 0 || ny % st != 0) throw ShapeError("encoder: stride does not divide the grid");
  const int C = cfg_.channels;
  const Tensor& w = weight.value();
  const Tensor& b = bias.value();
  auto px = [&](int ch, int x, int y) {
    if (x < 0 || y < 0 || x >= nx || y >= ny) return 0.0;
    return sensor[(static_cast<std::size_t>(ch) * nx + x) * ny + y];
  };
  BevFeature f{nx / st, ny / st, C, Tensor({nx / st * (ny / st), C})};
  const double inv = 1.0 / (st * st);
  std::vector<double> patch(18);
  for (int x = 0; x < nx; ++x) {
    for (int y = 0; y < ny; ++y) {
      int k = 0;
      for (int ch = 0; ch < 2; ++ch) {
        for (int dx = -1; dx <= 1; ++dx) {
          for (int dy = -1; dy <= 1; ++dy) patch[k++] = px(ch, x + dx, y + dy);
        }
      }
      double* out = f.data.data.data() + static_cast<std::size_t>((x / st) * f.W + y / st) * C;
      for (int c = 0; c < C; ++c) {
        double s = b[c];
        for (int j = 0; j < 18; ++j) s += w.at(c, j) * patch[j];
        out[c] += (std::tanh(s) + cfg_.position * position_code(c, C, x, y, std::max(nx, ny))) * inv;
      }
    }
  }
  return f;
}

}  // namespace vla4d::projector
