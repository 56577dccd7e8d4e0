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

// Multi-task DFNet with customised gate control: four encoder experts, two
// task gates with fixed zero entries, and two independent neck+head towers.
// Training follows the half-blind scheme: each step concatenates a batch of
// each dataset, both towers see all 2*n_B rows, and each task is supervised
// only on its own half.

#pragma once

#include <array>
#include <chrono>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ecglab/training.hpp"

namespace ecglab {

inline constexpr int kTaskM = 0;
inline constexpr int kTaskP = 1;
inline constexpr Index kNumExperts = 4;

struct CGCConfig {
  DFNetConfig backbone;  // cls_num unused; each tower has its own
  Index classes_m = 12;
  Index classes_p = 9;
  // Row i lists which experts task i may draw on.
  std::array<std::array<bool, kNumExperts>, 2> task_expert_mask{{{true, true, true, false}, {false, true, true, true}}};
  double alpha = 1.0;
  double beta = 1.0;

  std::vector<int> enabled(int task) const {
    std::vector<int> out;
    for (int k = 0; k < kNumExperts; ++k)
      if (task_expert_mask[task][k]) out.push_back(k);
    return out;
  }

  DFNetConfig tower_config(int task) const {
    DFNetConfig c = backbone;
    c.cls_num = task == kTaskM ? classes_m : classes_p;
    return c;
  }

  void validate() const {
    tower_config(kTaskM).validate();
    tower_config(kTaskP).validate();
    for (int t : {kTaskM, kTaskP})
      if (enabled(t).empty()) throw ConfigError("task " + std::to_string(t) + " has no enabled expert");
    if (alpha < 0 || beta < 0) throw ConfigError("loss weights must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const CGCConfig& c) {
  j = {{"backbone", c.backbone}, {"classes_m", c.classes_m}, {"classes_p", c.classes_p},
       {"task_expert_mask", c.task_expert_mask}, {"alpha", c.alpha}, {"beta", c.beta}};
}

inline void from_json(const nlohmann::json& j, CGCConfig& c) {
  c.backbone = j.at("backbone").get<DFNetConfig>();
  c.classes_m = j.at("classes_m").get<Index>();
  c.classes_p = j.at("classes_p").get<Index>();
  c.task_expert_mask = j.at("task_expert_mask").get<std::array<std::array<bool, kNumExperts>, 2>>();
  c.alpha = j.at("alpha").get<double>();
  c.beta = j.at("beta").get<double>();
}

/// softmax(Linear(GAP(x))) over the task's enabled experts only; disabled
/// experts never enter the computation.
template <typename T>
class GateNetwork {
 public:
  GateNetwork() = default;
  GateNetwork(std::vector<int> experts, Rng& rng)
      : proj(1, static_cast<Index>(experts.size()), rng), experts(std::move(experts)) {}

  /// x (N, 1, L) -> (N, |enabled|).
  Tensor<T> forward(const Tensor<T>& x) const { return softmax(proj.forward(mean_last(x))); }

  void collect(ParamSet<T>& ps, const std::string& prefix) const { proj.collect(ps, join_name(prefix, "proj")); }

  Linear<T> proj;
  std::vector<int> experts;
};

template <typename T>
struct MultiTaskOutput {
  Tensor<T> logits_m;
  Tensor<T> logits_p;
  std::array<Tensor<T>, 2> gates;
};

template <typename T>
class MultiTaskDFNet {
 public:
  using scalar_type = T;

  explicit MultiTaskDFNet(const CGCConfig& cfg, std::uint64_t seed = 0) : config(cfg) {
    cfg.validate();
    Rng rng(seed);
    experts.reserve(kNumExperts);
    for (Index k = 0; k < kNumExperts; ++k) experts.emplace_back(cfg.backbone, rng);
    for (int t : {kTaskM, kTaskP}) gates[t] = GateNetwork<T>(cfg.enabled(t), rng);
    for (int t : {kTaskM, kTaskP}) towers[t] = DFNetTower<T>(cfg.tower_config(t), rng);
  }

  /// Per-task gate weights over enabled experts, (N, |enabled_i|).
  std::array<Tensor<T>, 2> gate_weights(const Tensor<T>& x) const { return {gates[0].forward(x), gates[1].forward(x)}; }

  /// Dense (N, 2, 4) gate matrix with structural zeros, for audits and reports.
  static Tensor<T> gate_matrix(const std::array<Tensor<T>, 2>& g, const std::array<std::vector<int>, 2>& enabled) {
    const Index n = g[0].dim(0);
    auto out = Tensor<T>::zeros({n, 2, kNumExperts});
    for (int t = 0; t < 2; ++t)
      for (Index b = 0; b < n; ++b)
        for (std::size_t j = 0; j < enabled[t].size(); ++j)
          out.data()[(b * 2 + t) * kNumExperts + enabled[t][j]] = g[t].data()[b * static_cast<Index>(enabled[t].size()) + static_cast<Index>(j)];
    return out;
  }

  Tensor<T> gate_matrix(const Tensor<T>& x) const {
    NoGradGuard ng;
    return gate_matrix(gate_weights(x), {gates[0].experts, gates[1].experts});
  }

  /// Y^E_i = sum_k g_ik E_k(x) over enabled experts, each expert run once.
  std::array<Tensor<T>, 2> cgc_forward(const Tensor<T>& x, Mode mode, std::array<Tensor<T>, 2>* gate_out = nullptr,
                                       std::array<bool, 2> tasks = {true, true}) {
    check_input(x);
    std::array<Tensor<T>, kNumExperts> feats;
    for (int t = 0; t < 2; ++t)
      if (tasks[t])
        for (int k : gates[t].experts)
          if (!feats[k].defined()) feats[k] = experts[k].forward(x, mode);
    std::array<Tensor<T>, 2> g;
    std::array<Tensor<T>, 2> ye;
    for (int t = 0; t < 2; ++t) {
      if (!tasks[t]) continue;
      g[t] = gates[t].forward(x);
      std::vector<Tensor<T>> xs;
      for (int k : gates[t].experts) xs.push_back(feats[k]);
      ye[t] = weighted_sum(xs, g[t]);
    }
    if (gate_out) *gate_out = g;
    return ye;
  }

  /// Both towers over the whole concatenated [X^M; X^P] batch.
  MultiTaskOutput<T> forward(const Tensor<T>& x, Mode mode) {
    check_input(x);
    if (x.dim(0) % 2 != 0)
      throw ShapeError("multi-task batch must hold 2*n_B rows, got " + std::to_string(x.dim(0)));
    MultiTaskOutput<T> out;
    auto ye = cgc_forward(x, mode, &out.gates);
    out.logits_m = towers[kTaskM].forward(ye[kTaskM], mode);
    out.logits_p = towers[kTaskP].forward(ye[kTaskP], mode);
    return out;
  }

  /// Logits of a single task; only that task's experts run.
  Tensor<T> forward_task(const Tensor<T>& x, int task, Mode mode) {
    std::array<bool, 2> tasks{task == kTaskM, task == kTaskP};
    auto ye = cgc_forward(x, mode, nullptr, tasks);
    return towers[task].forward(ye[task], mode);
  }

  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 3 || x.dim(1) != 1 || x.dim(2) % 8 != 0)
      throw ShapeError("multi-task model expects (N, 1, L) with L a multiple of 8, got " + shape_str(x.shape()));
  }

  /// Checkpoint names: expert{k}.*, gate{i}.*, tower{i}.*.
  ParamSet<T> params() const {
    ParamSet<T> ps;
    for (Index k = 0; k < kNumExperts; ++k) experts[k].collect(ps, "expert" + std::to_string(k));
    for (int t = 0; t < 2; ++t) gates[t].collect(ps, "gate" + std::to_string(t));
    for (int t = 0; t < 2; ++t) towers[t].collect(ps, "tower" + std::to_string(t));
    return ps;
  }

  CGCConfig config;
  std::vector<DFNetEncoder<T>> experts;
  std::array<GateNetwork<T>, 2> gates;
  std::array<DFNetTower<T>, 2> towers;
};

/// Parameter count of one prefix group (e.g. "expert0", "tower1").
template <typename T>
std::size_t count_params_with_prefix(const ParamSet<T>& ps, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& p : ps)
    if (p.trainable && p.name.rfind(prefix + ".", 0) == 0) n += static_cast<std::size_t>(p.tensor.size());
  return n;
}

template <typename T>
struct MultiTaskLoss {
  Tensor<T> total;
  double ce_m = 0;
  double ce_p = 0;
  double penalty = 0;
};

/// alpha*CE_M(logits_M[0:n_B]) + beta*CE_P(logits_P[n_B:2n_B]) + lambda/2 * L2.
template <typename T>
MultiTaskLoss<T> total_loss(const MultiTaskOutput<T>& out, std::span<const int> y_m, std::span<const int> y_p,
                            const ParamSet<T>& params, double alpha, double beta, double lambda) {
  const Index nb = static_cast<Index>(y_m.size());
  if (static_cast<Index>(y_p.size()) != nb || out.logits_m.dim(0) != 2 * nb)
    throw ShapeError("total_loss: label counts do not match the 2*n_B logit rows");
  MultiTaskLoss<T> l;
  auto ce_m = cross_entropy(slice_rows(out.logits_m, 0, nb), y_m);
  auto ce_p = cross_entropy(slice_rows(out.logits_p, nb, 2 * nb), y_p);
  l.ce_m = static_cast<double>(ce_m.item());
  l.ce_p = static_cast<double>(ce_p.item());
  l.total = add(scale(ce_m, static_cast<T>(alpha)), scale(ce_p, static_cast<T>(beta)));
  if (lambda > 0) {
    auto pen = l2_penalty(params);
    l.penalty = static_cast<double>(pen.item());
    l.total = add(l.total, scale(pen, static_cast<T>(lambda / 2)));
  }
  return l;
}

// ---------------------------------------------------------------- training

struct MultiTaskEpochStats {
  Index epoch = 0;
  double lr = 0;
  double loss = 0;
  double ce_m = 0;
  double ce_p = 0;
  double acc_m = 0;
  double acc_p = 0;
  double val_loss = 0;
  double seconds = 0;
};

inline nlohmann::json to_json(const MultiTaskEpochStats& s) {
  return {{"epoch", s.epoch}, {"lr", s.lr},       {"loss", s.loss},         {"ce_m", s.ce_m},      {"ce_p", s.ce_p},
          {"acc_m", s.acc_m}, {"acc_p", s.acc_p}, {"val_loss", s.val_loss}, {"seconds", s.seconds}};
}

template <typename T>
struct StepAudit {
  Index epoch = 0;
  Index step = 0;
  const Tensor<T>* gate_matrix = nullptr;  // (2*n_B, 2, 4)
};

/// Half-blind dual-dataset training. State is (params, Adam moments,
/// scheduler, epoch, step); batch order is a pure function of the seed, so
/// a restored trainer continues bit-identically.
template <typename T>
class MultiTaskTrainer {
 public:
  MultiTaskTrainer(MultiTaskDFNet<T>& model, TrainOptions opts, const SegmentSet& train_m, const SegmentSet& train_p,
                   const SegmentSet* val_m = nullptr, const SegmentSet* val_p = nullptr)
      : model_(model),
        opts_(opts),
        train_m_(train_m),
        train_p_(train_p),
        val_m_(val_m),
        val_p_(val_p),
        params_(model.params()),
        adam_(params_, {.lr = opts.lr}),
        iter_(train_m.size(), train_p.size(),
              DualBatchPlan::make(train_m.size(), train_p.size(), opts.batch_size, opts.seed)) {
    if (train_m.segment_len != train_p.segment_len) throw ShapeError("task datasets have different segment lengths");
    if (train_m.num_classes() > model.config.classes_m || train_p.num_classes() > model.config.classes_p)
      throw ConfigError("dataset class tables are wider than the model's towers");
    sched_.lr = opts.lr;
    sched_.patience = opts.patience;
    sched_.factor = opts.factor;
  }

  Index epoch() const { return epoch_; }
  Index step_in_epoch() const { return step_; }
  Index steps_per_epoch() const { return iter_.steps_per_epoch(); }
  const PlateauScheduler& scheduler() const { return sched_; }
  Adam<T>& optimizer() { return adam_; }
  const ParamSet<T>& params() const { return params_; }

  void set_audit(std::function<void(const StepAudit<T>&)> fn) { audit_ = std::move(fn); }
  void set_history(HistoryWriter* h) { history_ = h; }
  /// Called after every completed epoch, e.g. to write a checkpoint.
  void set_epoch_callback(std::function<void(const MultiTaskEpochStats&)> fn) { on_epoch_ = std::move(fn); }
  /// Eval-mode accuracy over the full training sets each epoch (default on).
  void set_track_train_accuracy(bool on) { track_acc_ = on; }

  /// One optimisation step. Returns its loss terms.
  MultiTaskLoss<T> step() {
    const auto rows = iter_.rows(epoch_, step_);
    const auto x = concat<T>({gather_batch<T>(train_m_, rows.m), gather_batch<T>(train_p_, rows.p)}, 0);
    const auto y_m = gather_labels(train_m_, rows.m);
    const auto y_p = gather_labels(train_p_, rows.p);
    adam_.zero_grad();
    auto out = model_.forward(x, Mode::Train);
    if (audit_) {
      auto gm = MultiTaskDFNet<T>::gate_matrix(out.gates, {model_.gates[0].experts, model_.gates[1].experts});
      audit_({epoch_, step_, &gm});
    }
    auto loss = total_loss(out, y_m, y_p, params_, model_.config.alpha, model_.config.beta, opts_.l2);
    check_finite_loss(static_cast<double>(loss.total.item()), "multi-task loss at epoch " + std::to_string(epoch_) +
                                                                  " step " + std::to_string(step_));
    backward(loss.total);
    adam_.step();
    acc_loss_ += static_cast<double>(loss.total.item());
    acc_ce_m_ += loss.ce_m;
    acc_ce_p_ += loss.ce_p;
    ++acc_steps_;
    if (++step_ == iter_.steps_per_epoch()) finish_epoch();
    return loss;
  }

  /// Runs steps until the current epoch completes.
  MultiTaskEpochStats run_epoch() {
    const Index target = epoch_ + 1;
    while (epoch_ < target) step();
    return last_;
  }

  const MultiTaskEpochStats& last_epoch() const { return last_; }

  /// Eval-mode CE and accuracy of one task on a dataset.
  ClassifierEval evaluate(int task, const SegmentSet& set) {
    return evaluate_classifier<T>([&](const Tensor<T>& x) { return model_.forward_task(x, task, Mode::Eval); }, set);
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    export_params(ck, params_);
    export_adam(ck, adam_);
    ck.meta["kind"] = "multitask";
    ck.meta["config"] = model_.config;
    ck.meta["train"] = opts_;
    ck.meta["epoch"] = epoch_;
    ck.meta["step"] = step_;
    ck.meta["scheduler"] = to_json(sched_);
    ck.meta["partial"] = {{"loss", acc_loss_}, {"ce_m", acc_ce_m_}, {"ce_p", acc_ce_p_}, {"steps", acc_steps_}};
    return ck;
  }

  void restore(const Checkpoint& ck) {
    if (ck.meta.value("kind", "") != "multitask") throw DataIntegrityError("checkpoint is not a multi-task checkpoint");
    import_params(ck, params_);
    import_adam(ck, adam_);
    epoch_ = ck.meta.at("epoch").get<Index>();
    step_ = ck.meta.at("step").get<Index>();
    sched_ = plateau_from_json(ck.meta.at("scheduler"));
    const auto& p = ck.meta.at("partial");
    acc_loss_ = p.at("loss").get<double>();
    acc_ce_m_ = p.at("ce_m").get<double>();
    acc_ce_p_ = p.at("ce_p").get<double>();
    acc_steps_ = p.at("steps").get<Index>();
  }

 private:
  void finish_epoch() {
    MultiTaskEpochStats st;
    st.epoch = epoch_;
    st.lr = adam_.options.lr;
    st.loss = acc_loss_ / static_cast<double>(acc_steps_);
    st.ce_m = acc_ce_m_ / static_cast<double>(acc_steps_);
    st.ce_p = acc_ce_p_ / static_cast<double>(acc_steps_);
    if (track_acc_) {
      st.acc_m = evaluate(kTaskM, train_m_).accuracy;
      st.acc_p = evaluate(kTaskP, train_p_).accuracy;
    }
    const auto& vm = (val_m_ && !val_m_->empty()) ? *val_m_ : train_m_;
    const auto& vp = (val_p_ && !val_p_->empty()) ? *val_p_ : train_p_;
    st.val_loss = model_.config.alpha * evaluate(kTaskM, vm).ce + model_.config.beta * evaluate(kTaskP, vp).ce;
    if (sched_.update(st.val_loss)) adam_.set_lr(sched_.lr);
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start_).count();
    epoch_start_ = std::chrono::steady_clock::now();
    ++epoch_;
    step_ = 0;
    acc_loss_ = acc_ce_m_ = acc_ce_p_ = 0;
    acc_steps_ = 0;
    last_ = st;
    if (history_) history_->write(to_json(st));
    if (on_epoch_) on_epoch_(st);
  }

  MultiTaskDFNet<T>& model_;
  TrainOptions opts_;
  const SegmentSet& train_m_;
  const SegmentSet& train_p_;
  const SegmentSet* val_m_;
  const SegmentSet* val_p_;
  ParamSet<T> params_;
  Adam<T> adam_;
  PlateauScheduler sched_;
  DualBatchIterator iter_;
  Index epoch_ = 0;
  Index step_ = 0;
  double acc_loss_ = 0, acc_ce_m_ = 0, acc_ce_p_ = 0;
  Index acc_steps_ = 0;
  bool track_acc_ = true;
  MultiTaskEpochStats last_;
  HistoryWriter* history_ = nullptr;
  std::function<void(const StepAudit<T>&)> audit_;
  std::function<void(const MultiTaskEpochStats&)> on_epoch_;
  std::chrono::steady_clock::time_point epoch_start_ = std::chrono::steady_clock::now();
};

}  // namespace ecglab
