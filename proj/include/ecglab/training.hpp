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

// Shared training plumbing and the single-task DFNet trainer.

#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ecglab/checkpoint.hpp"
#include "ecglab/data.hpp"
#include "ecglab/dfnet.hpp"

namespace ecglab {

inline void to_json(nlohmann::json& j, const DFNetConfig& c) {
  j = {{"base_channels", c.base_channels}, {"input_len", c.input_len},       {"cls_num", c.cls_num},
       {"dilation_rates", c.dilation_rates}, {"se_reduction", c.se_reduction}};
}

inline void from_json(const nlohmann::json& j, DFNetConfig& c) {
  c.base_channels = j.at("base_channels").get<Index>();
  c.input_len = j.at("input_len").get<Index>();
  c.cls_num = j.at("cls_num").get<Index>();
  c.dilation_rates = j.at("dilation_rates").get<std::array<Index, 3>>();
  c.se_reduction = j.at("se_reduction").get<Index>();
}

struct TrainOptions {
  Index batch_size = 32;
  double lr = 1e-3;
  double l2 = 1e-5;  // lambda; the loss adds lambda/2 * sum ||W||^2
  int patience = 25;
  double factor = 0.5;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const TrainOptions& o) {
  j = {{"batch_size", o.batch_size}, {"lr", o.lr},         {"l2", o.l2},
       {"patience", o.patience},     {"factor", o.factor}, {"seed", o.seed}};
}

inline void from_json(const nlohmann::json& j, TrainOptions& o) {
  o.batch_size = j.at("batch_size").get<Index>();
  o.lr = j.at("lr").get<double>();
  o.l2 = j.at("l2").get<double>();
  o.patience = j.at("patience").get<int>();
  o.factor = j.at("factor").get<double>();
  o.seed = j.at("seed").get<std::uint64_t>();
}

/// Deterministic hold-out: `fraction` of rows go to validation.
inline std::pair<SegmentSet, SegmentSet> carve_validation(const SegmentSet& set, double fraction, std::uint64_t seed) {
  if (fraction <= 0) return {set, set.like()};
  auto [train, val] = split_train_test(set, 1.0 - fraction, derive_seed(seed, {0x7a1ULL}));
  return {std::move(train), std::move(val)};
}

struct ClassifierEval {
  double ce = 0;
  double accuracy = 0;
  std::vector<int> predictions;
};

/// Eval-mode pass over a whole set. `forward` maps an (n, 1, L) batch to logits.
template <typename T, typename F>
ClassifierEval evaluate_classifier(F&& forward, const SegmentSet& set, Index batch_size = 256) {
  ClassifierEval out;
  if (set.empty()) return out;
  NoGradGuard no_grad;
  double ce_sum = 0;
  Index correct = 0;
  for (Index b = 0; b < set.size(); b += batch_size) {
    const auto rows = iota_rows(std::min(batch_size, set.size() - b));
    std::vector<Index> idx(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) idx[i] = b + rows[i];
    auto logits = forward(gather_batch<T>(set, idx));
    const auto labels = gather_labels(set, idx);
    ce_sum += static_cast<double>(cross_entropy(logits, labels).item()) * static_cast<double>(idx.size());
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
    out.predictions.insert(out.predictions.end(), pred.begin(), pred.end());
  }
  out.ce = ce_sum / static_cast<double>(set.size());
  out.accuracy = static_cast<double>(correct) / static_cast<double>(set.size());
  return out;
}

inline void check_finite_loss(double loss, const std::string& what) {
  if (!std::isfinite(loss)) throw NumericError(what + " is not finite (" + std::to_string(loss) + ")");
}

/// Appends one JSON object per line.
class HistoryWriter {
 public:
  HistoryWriter() = default;
  explicit HistoryWriter(const std::filesystem::path& path, bool append = false) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    os_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!os_) throw DataIntegrityError("cannot open history file '" + path.string() + "'");
  }
  void write(const nlohmann::json& row) {
    if (os_.is_open()) os_ << row.dump() << '\n' << std::flush;
  }

 private:
  std::ofstream os_;
};

/// Batches of one epoch, with a trailing single row folded into the previous
/// batch so train-mode batch norm always sees at least two rows.
inline std::vector<std::vector<Index>> training_batches(Index n, Index batch_size, std::uint64_t seed, Index epoch) {
  auto batches = epoch_batches(n, batch_size, seed, epoch);
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back()[0]);
    batches.pop_back();
  }
  return batches;
}

// ---------------------------------------------------------------- single task

struct SingleEpochStats {
  Index epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_ce = 0;
  double val_acc = 0;
  double seconds = 0;
};

inline nlohmann::json to_json(const SingleEpochStats& s) {
  return {{"epoch", s.epoch},   {"lr", s.lr},         {"train_loss", s.train_loss}, {"train_acc", s.train_acc},
          {"val_ce", s.val_ce}, {"val_acc", s.val_acc}, {"seconds", s.seconds}};
}

/// CE + lambda/2 * L2 over shuffled mini-batches, Adam, plateau schedule on
/// validation CE.
template <typename T>
class SingleTaskTrainer {
 public:
  SingleTaskTrainer(DFNet<T>& model, TrainOptions opts)
      : model_(model), opts_(opts), params_(model.params()), adam_(params_, {.lr = opts.lr}) {
    sched_.lr = opts.lr;
    sched_.patience = opts.patience;
    sched_.factor = opts.factor;
  }

  Index epoch() const { return epoch_; }
  const PlateauScheduler& scheduler() const { return sched_; }
  Adam<T>& optimizer() { return adam_; }

  /// One optimisation step on the given rows; returns the total loss.
  double step(const SegmentSet& train, std::span<const Index> rows) {
    adam_.zero_grad();
    auto logits = model_.forward(gather_batch<T>(train, rows), Mode::Train);
    auto loss = cross_entropy(logits, gather_labels(train, rows));
    if (opts_.l2 > 0) loss = add(loss, scale(l2_penalty(params_), static_cast<T>(opts_.l2 / 2)));
    const double value = static_cast<double>(loss.item());
    check_finite_loss(value, "training loss");
    backward(loss);
    adam_.step();
    return value;
  }

  SingleEpochStats run_epoch(const SegmentSet& train, const SegmentSet& val) {
    const auto t0 = std::chrono::steady_clock::now();
    SingleEpochStats st;
    st.epoch = epoch_;
    st.lr = adam_.options.lr;
    double loss_sum = 0;
    Index seen = 0;
    for (const auto& rows : training_batches(train.size(), opts_.batch_size, opts_.seed, epoch_)) {
      loss_sum += step(train, rows) * static_cast<double>(rows.size());
      seen += static_cast<Index>(rows.size());
    }
    st.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    auto fwd = [&](const Tensor<T>& x) { return model_.forward(x, Mode::Eval); };
    st.train_acc = evaluate_classifier<T>(fwd, train).accuracy;
    const auto v = evaluate_classifier<T>(fwd, val.empty() ? train : val);
    st.val_ce = v.ce;
    st.val_acc = v.accuracy;
    if (sched_.update(v.ce)) adam_.set_lr(sched_.lr);
    ++epoch_;
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return st;
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    export_params(ck, params_);
    export_adam(ck, adam_);
    ck.meta["kind"] = "dfnet";
    ck.meta["config"] = model_.config;
    ck.meta["train"] = opts_;
    ck.meta["epoch"] = epoch_;
    ck.meta["scheduler"] = to_json(sched_);
    return ck;
  }

  void restore(const Checkpoint& ck) {
    import_params(ck, params_);
    import_adam(ck, adam_);
    epoch_ = ck.meta.at("epoch").get<Index>();
    sched_ = plateau_from_json(ck.meta.at("scheduler"));
  }

 private:
  DFNet<T>& model_;
  TrainOptions opts_;
  ParamSet<T> params_;
  Adam<T> adam_;
  PlateauScheduler sched_;
  Index epoch_ = 0;
};

}  // namespace ecglab
