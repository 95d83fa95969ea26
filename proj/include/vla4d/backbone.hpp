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
#pragma once

#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vla4d/autograd.hpp"
#include "vla4d/params.hpp"

namespace vla4d::backbone {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kOccOpen = 3;
inline constexpr int kOccClose = 4;
inline constexpr int kUnk = 5;

// Closed vocabulary over the QA language. Pieces are words, single digits and
// single printable characters, each with a variant carrying one leading space
// ("▁" prefix), so decode(encode(s)) == s for printable ASCII text.
class Vocabulary {
 public:
  // Specials, every printable ASCII character and the given words.
  static Vocabulary build(const std::vector<std::string>& words);
  // Words harvested from free text (maximal letter runs).
  static std::vector<std::string> harvest_words(const std::vector<std::string>& texts);
  explicit Vocabulary(std::vector<std::string> tokens);
  Vocabulary() = default;

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int id(const std::string& piece) const;  // kUnk when absent

  std::vector<int> encode(std::string_view text) const;
  // Drops PAD/BOS/EOS.
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

struct LmConfig {
  int layers = 4;
  int width = 128;  // C_l
  int heads = 4;
  int ffn = 256;
  int max_seq = 512;
  int vocab = 0;
  double rope_base = 10000.0;
  std::string activation = "silu";  // "silu" | "gelu"

  void validate() const;
};

// F_0 (input embeddings) through F_l (output of block l), each [seq, C_l].
struct HiddenStates {
  std::vector<ad::Var> layers;
};

enum class HiddenMode { kLast, kWeighted };
HiddenMode hidden_mode_from_name(const std::string& name);
const char* hidden_mode_name(HiddenMode m);

struct Block {
  ad::Var norm1, wq, wk, wv, wo, norm2, w1, w2;
};

// Pre-norm decoder-only transformer with rotary positions.
class LanguageModel {
 public:
  LanguageModel(ParamStore& store, const LmConfig& cfg, std::mt19937_64& rng);

  const LmConfig& config() const { return cfg_; }
  ad::Var embed(const std::vector<int>& ids) const;
  // Causal pass over [vision prefix ; embedded text]. `vision` may be
  // undefined for text-only input. Throws LengthError past max_seq.
  HiddenStates forward(const ad::Var& vision, const std::vector<int>& ids) const;
  ad::Var activate(const ad::Var& x) const;

  ad::Var embedding;  // [V, C_l]
  std::vector<Block> blocks;

 private:
  LmConfig cfg_;
};

// kLast -> F_l; kWeighted -> sum_i softmax(logits)_i F_i. `logits` has l + 1
// entries and is ignored in kLast mode.
ad::Var combine_hidden(const HiddenStates& states, HiddenMode mode, const ad::Var& logits);
std::vector<double> hidden_weights(const Tensor& logits);

// First n rows (the vision prefix). Throws LengthError if seq < n.
ad::Var extract_vision_states(const ad::Var& combined, int n);

// Incremental inference with cached keys/values. Reproduces
// LanguageModel::forward row for row without building a graph.
class KvSession {
 public:
  explicit KvSession(const LanguageModel& lm);

  // Appends already-embedded rows [m, C_l]; returns the last-layer hidden
  // states of those rows.
  RowMatrix append(const RowMatrix& x);
  RowMatrix append_ids(const std::vector<int>& ids);
  int length() const { return length_; }

 private:
  const LanguageModel& lm_;
  std::vector<RowMatrix> keys_, values_;
  int length_ = 0;
};

}  // namespace vla4d::backbone
