/* Copyright 2026 The ecglab Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "ecglab/layers.hpp"

namespace ecglab {

/// Sum of squared values over trainable tensors flagged for weight decay
/// (conv/linear/GRU weights; biases and batch-norm affine terms excluded).
/// Callers scale by lambda/2.
template <typename T>
Tensor<T> l2_penalty(const ParamSet<T>& params) {
  Tensor<T> total;
  for (const auto& p : params) {
    if (!p.trainable || !p.decay) continue;
    auto sq = sum_squares(p.tensor);
    total = total.defined() ? add(total, sq) : sq;
  }
  return total.defined() ? total : Tensor<T>::scalar(T(0));
}

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over the trainable tensors of a ParamSet. The set's
/// order defines the moment slots, so the optimizer must be rebuilt if the
/// model's parameter list changes.
template <typename T>
class Adam {
 public:
  Adam(const ParamSet<T>& params, AdamOptions opts = {}) : options(opts) {
    for (const auto& p : params)
      if (p.trainable) {
        slots_.push_back({p.name, p.tensor, std::vector<T>(p.tensor.size(), T(0)), std::vector<T>(p.tensor.size(), T(0))});
      }
  }

  /// Applies one update. Tensors without a gradient are treated as zero
  /// gradient. A non-finite gradient aborts the whole step before any
  /// parameter moves.
  void step() {
    for (const auto& s : slots_) {
      for (T g : s.param.grad())
        if (!std::isfinite(g)) throw NumericError("non-finite gradient in tensor '" + s.name + "'");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(options.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(options.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(options.beta1), b2 = static_cast<T>(options.beta2);
    const T step_size = static_cast<T>(options.lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(options.eps);
    for (auto& s : slots_) {
      auto g = s.param.grad();
      auto w = s.param.data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const T gi = g.empty() ? T(0) : g[i];
        s.m[i] = b1 * s.m[i] + (T(1) - b1) * gi;
        s.v[i] = b2 * s.v[i] + (T(1) - b2) * gi * gi;
        w[i] -= step_size * s.m[i] / (std::sqrt(s.v[i]) * inv_sqrt_bc2 + eps);
      }
    }
  }

  void zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
  }

  std::int64_t steps() const { return t_; }
  double lr() const { return options.lr; }
  void set_lr(double lr) { options.lr = lr; }

  struct Slot {
    std::string name;
    Tensor<T> param;
    std::vector<T> m, v;
  };
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }
  void set_steps(std::int64_t t) { t_ = t; }

  AdamOptions options;

 private:
  std::vector<Slot> slots_;
  std::int64_t t_ = 0;
};

/// Reduce-on-plateau in "min" mode: an epoch improves when the metric is
/// strictly below the best seen so far; after `patience` consecutive epochs
/// without improvement the learning rate is multiplied by `factor`.
struct PlateauScheduler {
  double lr = 1e-3;
  double factor = 0.5;
  int patience = 25;
  double best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;

  /// Feeds one epoch's metric; returns true when the rate was reduced.
  bool update(double metric) {
    if (metric < best) {
      best = metric;
      bad_epochs = 0;
      return false;
    }
    if (++bad_epochs >= patience) {
      lr *= factor;
      bad_epochs = 0;
      return true;
    }
    return false;
  }
};

}  // namespace ecglab
