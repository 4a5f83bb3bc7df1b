// Copyright 2026 The Waffle Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// End-to-end finite-difference check of WaffleIron::backward.

#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "waffle/backbone.hpp"
#include "waffle/nn.hpp"
#include "waffle/training.hpp"

namespace oracle {

struct ModelCheck {
  double error = 0.0;
  std::size_t scalars = 0;
};

/// `loss(logits)` returns a LossResult<double>. With max_per_tensor > 0 only
/// that many randomly chosen entries of each larger tensor are perturbed.
template <typename LossFn>
ModelCheck model_grad_check(waffle::WaffleIron<double>& model, const waffle::SceneInputs<double>& in,
                            const waffle::ForwardOptions& opt, std::uint64_t rng_seed, LossFn loss, double eps,
                            std::size_t max_per_tensor = 0, std::uint64_t sample_seed = 0) {
  model.params().zero_grad();
  {
    waffle::Rng rng(rng_seed);
    waffle::ForwardTape<double> tape;
    const auto logits = model.forward(in, opt, &rng, &tape);
    model.backward(in, tape, loss(logits).grad);
  }
  waffle::Rng pick(sample_seed);
  std::vector<waffle::nn::GradTarget> targets;
  for (auto& [name, p] : model.params()) {
    if (!p.trainable) continue;
    const std::size_t n = p.value.size();
    if (max_per_tensor == 0 || n <= max_per_tensor) {
      targets.push_back({name, p.value.values(), p.grad.values()});
      continue;
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < max_per_tensor; ++i) std::swap(idx[i], idx[i + pick.index(n - i)]);
    for (std::size_t i = 0; i < max_per_tensor; ++i)
      targets.push_back({name + "[" + std::to_string(idx[i]) + "]", p.value.values().subspan(idx[i], 1),
                         p.grad.values().subspan(idx[i], 1)});
  }
  auto objective = [&] {
    waffle::Rng rng(rng_seed);
    return loss(model.forward(in, opt, &rng)).value;
  };
  ModelCheck out;
  for (const auto& t : targets) out.scalars += t.values.size();
  out.error = waffle::nn::grad_check(objective, targets, eps);
  return out;
}

/// Batch statistics without running-stat updates, no stochastic depth.
inline waffle::ForwardOptions check_options() { return {true, false, false}; }

}  // namespace oracle
