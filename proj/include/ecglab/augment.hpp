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

// Minority-class augmentation: one unconditional diffusion model per class,
// trained on that class's training segments only.

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ecglab/diffusion.hpp"
#include "ecglab/metrics.hpp"

namespace ecglab {

inline constexpr Index kMinAugmentSegments = 8;

inline const std::vector<std::string>& default_minority_classes() {
  static const std::vector<std::string> names{"AAP", "FVN", "VFW", "JEB", "VEB"};
  return names;
}

struct AugmentConfig {
  GRUUNetConfig unet;  // input_len is taken from the data
  DiffusionOptions diffusion;
  Index train_steps = 2000;
  std::optional<GenQualityOptions> quality;  // default: GenQualityOptions::for_length(L)
  std::filesystem::path checkpoint_dir;      // empty: keep models in memory only
  std::uint64_t seed = 0;
};

struct AugmentResult {
  std::string class_name;
  SegmentSet merged;
  SegmentSet synthetic;
  std::optional<GenQualityReport> quality;  // absent when fewer than two rows were sampled
  std::vector<double> losses;
  std::filesystem::path checkpoint;
};

/// Trains on `class_name`'s rows of `train`, samples `count` segments and
/// merges them. Refuses classes with fewer than kMinAugmentSegments rows.
inline AugmentResult augment_class_workflow(const SegmentSet& train, const std::string& class_name, Index count,
                                            const AugmentConfig& cfg) {
  const auto cls = train.class_index(class_name);
  if (!cls) throw ConfigError("class '" + class_name + "' is not in the training class table");
  if (count < 0) throw ConfigError("augmentation count must be >= 0");
  std::vector<Index> rows;
  for (Index i = 0; i < train.size(); ++i)
    if (train.labels[i] == *cls) rows.push_back(i);
  if (static_cast<Index>(rows.size()) < kMinAugmentSegments)
    throw ConfigError("class '" + class_name + "' has " + std::to_string(rows.size()) +
                      " training segments; a diffusion model needs at least " + std::to_string(kMinAugmentSegments) +
                      " to fit anything but noise");
  const SegmentSet real = train.subset(rows);

  const std::uint64_t seed = derive_seed(cfg.seed, {0xa09ULL, static_cast<std::uint64_t>(*cls)});
  GRUUNetConfig ucfg = cfg.unet;
  ucfg.input_len = train.segment_len;
  DiffusionOptions dopt = cfg.diffusion;
  dopt.seed = seed;
  GRUUNet<float> model(ucfg, seed);
  DiffusionTrainer<float> trainer(model, dopt);

  AugmentResult out;
  out.class_name = class_name;
  out.losses.reserve(static_cast<std::size_t>(cfg.train_steps));
  for (Index s = 0; s < cfg.train_steps; ++s) out.losses.push_back(trainer.step(real));

  if (!cfg.checkpoint_dir.empty()) {
    out.checkpoint = cfg.checkpoint_dir / ("diffusion_" + class_name + ".ckpt");
    write_checkpoint(out.checkpoint, trainer.checkpoint());
    write_sidecar(out.checkpoint, make_sidecar(ucfg, dopt, class_name));
  }

  if (count > 0) {
    const auto samples = p_sample_loop(model, trainer.schedule(), count, derive_seed(seed, {0x5a3ULL}));
    out.synthetic = samples_to_set(samples, train.class_names, *cls, train.rate_hz);
  } else {
    out.synthetic = train.like();
  }
  out.merged = augment_merge(train, out.synthetic, class_name, count);
  if (out.synthetic.size() >= 2) {
    auto q = cfg.quality.value_or(GenQualityOptions::for_length(train.segment_len));
    q.seed = seed;
    out.quality = gen_quality_report(real, out.synthetic, q);
  } else if (count == 1) {
    warn("class '" + class_name + "': one synthetic segment, no quality report");
  }
  return out;
}

/// Runs the workflow for several classes, up to `jobs` at a time. Models are
/// independent; merging happens afterwards in the order of `classes`.
inline std::vector<AugmentResult> augment_classes(const SegmentSet& train, const std::vector<std::string>& classes,
                                                  Index count, const AugmentConfig& cfg, int jobs = 1,
                                                  SegmentSet* merged = nullptr) {
  for (const auto& c : classes)
    if (!train.class_index(c)) throw ConfigError("class '" + c + "' is not in the training class table");
  std::vector<AugmentResult> results(classes.size());
  std::vector<std::exception_ptr> errors(classes.size());
  auto run = [&](std::size_t i) {
    try {
      results[i] = augment_class_workflow(train, classes[i], count, cfg);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  jobs = std::max(1, jobs);
  for (std::size_t b = 0; b < classes.size(); b += static_cast<std::size_t>(jobs)) {
    const std::size_t e = std::min(classes.size(), b + static_cast<std::size_t>(jobs));
    if (e - b == 1) {
      run(b);
      continue;
    }
    std::vector<std::thread> pool;
    for (std::size_t i = b; i < e; ++i) pool.emplace_back(run, i);
    for (auto& t : pool) t.join();
  }
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);
  if (merged) {
    *merged = train;
    for (const auto& r : results) *merged = augment_merge(*merged, r.synthetic, r.class_name, r.synthetic.size());
  }
  return results;
}

}  // namespace ecglab
