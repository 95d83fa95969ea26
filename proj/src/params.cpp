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
#include "vla4d/params.hpp"

#include <cstring>

namespace vla4d {

ad::Var ParamStore::add(const std::string& name, Tensor init) {
  if (contains(name)) throw ConfigError("duplicate parameter " + name);
  ad::Var v(std::move(init), true);
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, v);
  return v;
}

const ad::Var& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return entries_[it->second].second;
}

std::int64_t ParamStore::numel(std::string_view prefix) const {
  std::int64_t n = 0;
  for (const auto& [name, v] : entries_) {
    if (has_prefix(name, prefix)) n += v.value().numel();
  }
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, v] : entries_) v.zero_grad();
}

void ParamStore::set_trainable(std::string_view prefix, bool on) {
  for (auto& [name, v] : entries_) {
    if (has_prefix(name, prefix)) v.set_requires_grad(on);
  }
}

std::uint64_t ParamStore::hash(std::string_view prefix) const {
  std::uint64_t h = 1469598103934665603ull;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, v] : entries_) {
    if (!has_prefix(name, prefix)) continue;
    feed(name.data(), name.size());
    for (int d : v.shape()) feed(&d, sizeof d);
    feed(v.value().data.data(), v.value().data.size() * sizeof(double));
  }
  return h;
}

}  // namespace vla4d
