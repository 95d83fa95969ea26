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

#include <cstddef>
#include <functional>

namespace vla4d {

// Worker cap: hardware concurrency, limited by DRIVEPI_NUM_WORKERS if set.
int worker_count();

// Runs fn(i) for i in [0, n) over worker_count() threads. Work is split into
// contiguous blocks so results never depend on the partitioning.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  int workers = 0);

}  // namespace vla4d
