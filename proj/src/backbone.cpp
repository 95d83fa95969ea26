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
#include "vla4d/backbone.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <set>

namespace vla4d::backbone {

namespace {

const std::string kSpace = "\xe2\x96\x81";  // U+2581, marks one leading space

bool is_letter(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }

}  // namespace

Vocabulary Vocabulary::build(const std::vector<std::string>& words) {
  std::vector<std::string> tokens = {"<pad>", "<bos>", "<eos>", "<OCC>", "</OCC>", "<unk>", kSpace};
  for (int c = 33; c < 127; ++c) {
    const std::string s(1, static_cast<char>(c));
    tokens.push_back(s);
    tokens.push_back(kSpace + s);
  }
  std::set<std::string> sorted;
  for (const auto& w : words) {
    if (w.size() > 1 && std::all_of(w.begin(), w.end(), is_letter)) sorted.insert(w);
  }
  for (const auto& w : sorted) {
    tokens.push_back(w);
    tokens.push_back(kSpace + w);
  }
  return Vocabulary(std::move(tokens));
}

std::vector<std::string> Vocabulary::harvest_words(const std::vector<std::string>& texts) {
  std::set<std::string> words;
  for (const auto& t : texts) {
    std::size_t i = 0;
    while (i < t.size()) {
      if (!is_letter(t[i])) {
        ++i;
        continue;
      }
      std::size_t j = i;
      while (j < t.size() && is_letter(t[j])) ++j;
      words.insert(t.substr(i, j - i));
      i = j;
    }
  }
  return {words.begin(), words.end()};
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < 6 || tokens_[kPad] != "<pad>" || tokens_[kBos] != "<bos>" ||
      tokens_[kEos] != "<eos>" || tokens_[kOccOpen] != "<OCC>" || tokens_[kOccClose] != "</OCC>") {
    throw FormatError("vocabulary does not start with the reserved specials");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw FormatError("duplicate vocabulary entry \"" + tokens_[i] + "\"");
    }
  }
}

int Vocabulary::id(const std::string& piece) const {
  auto it = ids_.find(piece);
  return it == ids_.end() ? kUnk : it->second;
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> out;
  bool space = false;
  auto flush_space = [&] {
    if (space) out.push_back(id(kSpace));
    space = false;
  };
  std::size_t i = 0;
  while (i < text.size()) {
    if (text.substr(i, 5) == "<OCC>") {
      flush_space();
      out.push_back(kOccOpen);
      i += 5;
      continue;
    }
    if (text.substr(i, 6) == "</OCC>") {
      flush_space();
      out.push_back(kOccClose);
      i += 6;
      continue;
    }
    const char c = text[i];
    if (c == ' ') {
      flush_space();
      space = true;
      ++i;
      continue;
    }
    const std::string lead = space ? kSpace : "";
    space = false;
    if (is_letter(c)) {
      std::size_t j = i;
      while (j < text.size() && is_letter(text[j])) ++j;
      const std::string word(text.substr(i, j - i));
      const int w = word.size() > 1 ? id(lead + word) : kUnk;
      if (w != kUnk) {
        out.push_back(w);
      } else {
        for (std::size_t k = i; k < j; ++k) {
          out.push_back(id((k == i ? lead : "") + std::string(1, text[k])));
        }
      }
      i = j;
      continue;
    }
    out.push_back(id(lead + std::string(1, c)));
    ++i;
  }
  flush_space();
  return out;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int t : ids) {
    if (t == kPad || t == kBos || t == kEos) continue;
    if (t < 0 || t >= size()) {
      out += "?";
      continue;
    }
    if (t == kUnk) {
      out += "?";
      continue;
    }
    const std::string& s = tokens_[static_cast<std::size_t>(t)];
    if (s.compare(0, kSpace.size(), kSpace) == 0) {
      out += ' ';
      out += s.substr(kSpace.size());
    } else {
      out += s;
    }
  }
  return out;
}

void LmConfig::validate() const {
  if (layers < 1 || width < 2 || heads < 1 || ffn < 1 || max_seq < 1 || vocab < 6) {
    throw ConfigError("lm: layers, width, heads, ffn, max_seq and vocab must be positive");
  }
  if (width % heads != 0 || (width / heads) % 2 != 0) {
    throw ConfigError("lm: width must split into heads of even size");
  }
  if (activation != "silu" && activation != "gelu") {
    throw ConfigError("lm: activation must be silu or gelu");
  }
}

HiddenMode hidden_mode_from_name(const std::string& name) {
  if (name == "last") return HiddenMode::kLast;
  if (name == "weighted") return HiddenMode::kWeighted;
  throw ConfigError("hidden mode must be last or weighted, got \"" + name + "\"");
}

const char* hidden_mode_name(HiddenMode m) { return m == HiddenMode::kLast ? "last" : "weighted"; }

LanguageModel::LanguageModel(ParamStore& store, const LmConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg.validate();
  const int C = cfg.width;
  const double s = 1.0 / std::sqrt(static_cast<double>(C));
  const double depth = 1.0 / std::sqrt(2.0 * cfg.layers);
  embedding = store.add("lm.embed", ad::normal_tensor({cfg.vocab, C}, 0.5, rng));
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "lm.layers." + std::to_string(l) + ".";
    Block b;
    b.norm1 = store.add(p + "norm1", Tensor({C}, 1.0));
    b.wq = store.add(p + "wq", ad::normal_tensor({C, C}, s, rng));
    b.wk = store.add(p + "wk", ad::normal_tensor({C, C}, s, rng));
    b.wv = store.add(p + "wv", ad::normal_tensor({C, C}, s, rng));
    b.wo = store.add(p + "wo", ad::normal_tensor({C, C}, s * depth, rng));
    b.norm2 = store.add(p + "norm2", Tensor({C}, 1.0));
    b.w1 = store.add(p + "w1", ad::normal_tensor({C, cfg.ffn}, s, rng));
    b.w2 = store.add(p + "w2", ad::normal_tensor({cfg.ffn, C}, depth / std::sqrt(cfg.ffn), rng));
    blocks.push_back(b);
  }
}

ad::Var LanguageModel::embed(const std::vector<int>& ids) const {
  for (int t : ids) {
    if (t < 0 || t >= cfg_.vocab) throw ShapeError("token id " + std::to_string(t) + " out of vocabulary");
  }
  return ad::gather_rows(embedding, ids);
}

ad::Var LanguageModel::activate(const ad::Var& x) const {
  return cfg_.activation == "gelu" ? ad::gelu(x) : ad::silu(x);
}

HiddenStates LanguageModel::forward(const ad::Var& vision, const std::vector<int>& ids) const {
  const int n_vis = vision.defined() ? vision.rows() : 0;
  const int seq = n_vis + static_cast<int>(ids.size());
  if (seq > cfg_.max_seq) {
    throw LengthError("sequence of " + std::to_string(seq) + " exceeds max_seq " +
                      std::to_string(cfg_.max_seq));
  }
  if (seq == 0) throw LengthError("empty sequence");
  if (vision.defined() && vision.cols() != cfg_.width) {
    throw ShapeError("vision tokens " + shape_str(vision.shape()) + " do not match LM width");
  }
  std::vector<ad::Var> parts;
  if (n_vis > 0) parts.push_back(vision);
  if (!ids.empty()) parts.push_back(embed(ids));
  ad::Var x = parts.size() == 1 ? parts[0] : ad::concat_rows(parts);
  HiddenStates hs;
  hs.layers.push_back(x);
  for (const Block& b : blocks) {
    const ad::Var a = ad::rms_norm(x, b.norm1);
    const ad::Var att = ad::causal_attention(ad::matmul(a, b.wq), ad::matmul(a, b.wk),
                                             ad::matmul(a, b.wv), cfg_.heads, cfg_.rope_base);
    x = ad::add(x, ad::matmul(att, b.wo));
    const ad::Var m = ad::rms_norm(x, b.norm2);
    x = ad::add(x, ad::matmul(activate(ad::matmul(m, b.w1)), b.w2));
    hs.layers.push_back(x);
  }
  return hs;
}

ad::Var combine_hidden(const HiddenStates& states, HiddenMode mode, const ad::Var& logits) {
  if (states.layers.empty()) throw ShapeError("combine_hidden: no states");
  if (mode == HiddenMode::kLast) return states.layers.back();
  if (!logits.defined() || logits.value().numel() != static_cast<std::int64_t>(states.layers.size())) {
    throw ShapeError("combine_hidden: need one logit per hidden state");
  }
  const int L = static_cast<int>(states.layers.size());
  const ad::Var w = ad::softmax_rows(ad::reshape(logits, {1, L}));
  return ad::weighted_sum(states.layers, w);
}

std::vector<double> hidden_weights(const Tensor& logits) {
  std::vector<double> w(logits.data.begin(), logits.data.end());
  const double m = *std::max_element(w.begin(), w.end());
  double z = 0;
  for (double& v : w) z += (v = std::exp(v - m));
  for (double& v : w) v /= z;
  return w;
}

ad::Var extract_vision_states(const ad::Var& combined, int n) {
  if (n < 0 || combined.rows() < n) {
    throw LengthError("cannot extract " + std::to_string(n) + " vision states from " +
                      std::to_string(combined.rows()) + " rows");
  }
  return ad::slice_rows(combined, 0, n);
}

// ---- incremental inference ---------------------------------------------------

namespace {

RowMatrix rms(const RowMatrix& x, const Tensor& w) {
  RowMatrix out(x.rows(), x.cols());
  const double c = static_cast<double>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double inv = 1.0 / std::sqrt(x.row(i).squaredNorm() / c + 1e-6);
    for (Eigen::Index j = 0; j < x.cols(); ++j) out(i, j) = x(i, j) * inv * w.data[static_cast<std::size_t>(j)];
  }
  return out;
}

}  // namespace

KvSession::KvSession(const LanguageModel& lm)
    : lm_(lm),
      keys_(static_cast<std::size_t>(lm.config().layers)),
      values_(static_cast<std::size_t>(lm.config().layers)) {
  const int C = lm.config().width;
  for (auto& k : keys_) k.resize(0, C);
  for (auto& v : values_) v.resize(0, C);
}

RowMatrix KvSession::append_ids(const std::vector<int>& ids) {
  ad::NoGradGuard guard;
  return append(lm_.embed(ids).value().mat());
}

RowMatrix KvSession::append(const RowMatrix& input) {
  const LmConfig& cfg = lm_.config();
  const int m = static_cast<int>(input.rows());
  if (length_ + m > cfg.max_seq) {
    throw LengthError("sequence of " + std::to_string(length_ + m) + " exceeds max_seq " +
                      std::to_string(cfg.max_seq));
  }
  const int C = cfg.width, heads = cfg.heads, dh = C / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  RowMatrix x = input;
  for (std::size_t l = 0; l < lm_.blocks.size(); ++l) {
    const Block& b = lm_.blocks[l];
    const RowMatrix a = rms(x, b.norm1.value());
    RowMatrix q = a * b.wq.value().mat();
    RowMatrix k = a * b.wk.value().mat();
    const RowMatrix v = a * b.wv.value().mat();
    ad::apply_rope(q, heads, cfg.rope_base, length_, false);
    ad::apply_rope(k, heads, cfg.rope_base, length_, false);
    RowMatrix& K = keys_[l];
    RowMatrix& V = values_[l];
    K.conservativeResize(length_ + m, C);
    V.conservativeResize(length_ + m, C);
    K.bottomRows(m) = k;
    V.bottomRows(m) = v;
    RowMatrix att(m, C);
    for (int h = 0; h < heads; ++h) {
      RowMatrix s = q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose();
      s *= inv_sqrt;
      for (int i = 0; i < m; ++i) {
        const int visible = length_ + i + 1;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < visible; ++j) mx = std::max(mx, s(i, j));
        double z = 0;
        for (int j = 0; j < visible; ++j) z += (s(i, j) = std::exp(s(i, j) - mx));
        for (int j = 0; j < visible; ++j) s(i, j) /= z;
        for (int j = visible; j < length_ + m; ++j) s(i, j) = 0.0;
      }
      att.middleCols(h * dh, dh).noalias() = s * V.middleCols(h * dh, dh);
    }
    x += att * b.wo.value().mat();
    const RowMatrix mm = rms(x, b.norm2.value());
    RowMatrix f = mm * b.w1.value().mat();
    if (cfg.activation == "gelu") {
      f = f.unaryExpr([](double u) {
        return 0.5 * u * (1.0 + std::tanh(0.7978845608028654 * (u + 0.044715 * u * u * u)));
      });
    } else {
      f = f.unaryExpr([](double u) { return u / (1.0 + std::exp(-u)); });
    }
    x += f * b.w2.value().mat();
  }
  length_ += m;
  return x;
}

}  // namespace vla4d::backbone
