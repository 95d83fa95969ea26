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

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vla4d/autograd.hpp"

namespace vla4d {

// Named trainable arrays in registration order. Modules keep their own Var
// handles; the store shares the same nodes, so updates through either are
// visible to both.
class ParamStore {
 public:
  ad::Var add(const std::string& name, Tensor init);
  const ad::Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::pair<std::string, ad::Var>>& entries() const { return entries_; }
  std::int64_t numel(std::string_view prefix = "") const;

  void zero_grad();
  void set_trainable(std::string_view prefix, bool on);
  // FNV-1a over names, shapes and raw value bytes of matching parameters.
  std::uint64_t hash(std::string_view prefix = "") const;

 private:
  std::vector<std::pair<std::string, ad::Var>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline bool has_prefix(std::string_view name, std::string_view prefix) {
  return name.substr(0, prefix.size()) == prefix;
}

}  // namespace vla4d
