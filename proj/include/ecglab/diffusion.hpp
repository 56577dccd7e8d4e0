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

// Denoising diffusion with a GRU-bottleneck 1-D U-Net noise predictor.
//
//   stem      conv k7 1 -> C                                       C  x L
//   encoder   4 x [res, res, attention, down]   down: s2, 2x channels
//             (the fourth "down" is stride 1, shape preserving)
//             closing res                                          8C x L/8
//   middle    GRU stack (input = hidden = 8C) over the length axis
//   decoder   attention, res                                       8C x L/8
//             4 x [res(cat skip), res(cat skip), attention, up]
//             up: nearest x2 + conv k3, channels / 2 (last: conv k3 only)
//   out       conv k3 C -> 1                                       1  x L
//
// Each encoder block stashes its post-first-res map and its post-attention
// map. Decoder block j mirrors encoder block 3-j: its first res block takes
// the post-attention map, its second the post-first-res map.

#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ecglab/checkpoint.hpp"
#include "ecglab/data.hpp"
#include "ecglab/layers.hpp"

namespace ecglab {

// ---------------------------------------------------------------- schedule

/// Steps are 1-based; alpha_bar(0) is 1.
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  Index steps() const { return static_cast<Index>(betas.size()); }
  double beta(Index t) const { return betas.at(check(t)); }
  double alpha(Index t) const { return alphas.at(check(t)); }
  double alpha_bar(Index t) const { return t == 0 ? 1.0 : alpha_bars.at(check(t)); }
  double sigma(Index t) const { return std::sqrt(beta(t)); }

 private:
  std::size_t check(Index t) const {
    if (t < 1 || t > steps())
      throw ConfigError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
    return static_cast<std::size_t>(t - 1);
  }
};

inline NoiseSchedule schedule_from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ConfigError("noise schedule needs at least one step");
  NoiseSchedule s;
  double prod = 1.0;
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("beta " + std::to_string(b) + " outside (0, 1)");
    s.alphas.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bars.push_back(prod);
  }
  s.betas = std::move(betas);
  return s;
}

/// Linearly spaced betas from beta_1 to beta_T.
inline NoiseSchedule make_schedule(Index steps, double beta_1 = 1e-4, double beta_T = 0.02) {
  if (steps < 2) throw ConfigError("noise schedule needs T >= 2, got " + std::to_string(steps));
  if (!(beta_1 > 0.0 && beta_1 < 1.0) || !(beta_T > 0.0 && beta_T < 1.0))
    throw ConfigError("beta bounds must lie in (0, 1)");
  if (!(beta_1 < beta_T)) throw ConfigError("beta_1 must be below beta_T");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (Index i = 0; i < steps; ++i)
    betas[static_cast<std::size_t>(i)] = beta_1 + (beta_T - beta_1) * static_cast<double>(i) / static_cast<double>(steps - 1);
  return schedule_from_betas(std::move(betas));
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, one step per row of (N, ...).
template <typename T>
Tensor<T> q_sample(const NoiseSchedule& s, const Tensor<T>& x0, std::span<const Index> ts, const Tensor<T>& eps) {
  if (x0.shape() != eps.shape()) throw ShapeError("q_sample: x0 " + shape_str(x0.shape()) + " vs eps " + shape_str(eps.shape()));
  if (x0.rank() < 1 || static_cast<Index>(ts.size()) != x0.dim(0))
    throw ShapeError("q_sample: need one step per row");
  const Index n = x0.dim(0), row = n ? x0.size() / n : 0;
  std::vector<T> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const Index t = ts[static_cast<std::size_t>(i)];
    if (t < 0 || t > s.steps()) throw ConfigError("q_sample: step " + std::to_string(t) + " out of range");
    a[i] = static_cast<T>(std::sqrt(s.alpha_bar(t)));
    b[i] = static_cast<T>(std::sqrt(1.0 - s.alpha_bar(t)));
  }
  auto scales = [&](const std::vector<T>& v) {
    std::vector<T> full(static_cast<std::size_t>(x0.size()));
    for (Index i = 0; i < n; ++i) std::fill_n(full.begin() + i * row, row, v[i]);
    return Tensor<T>::from(x0.shape(), std::move(full));
  };
  return add(mul(x0, scales(a)), mul(eps, scales(b)));
}

/// Sinusoidal embedding of integer steps, (N, dim): [sin(t w_k), cos(t w_k)]
/// with w_k = 10000^(-k / (dim/2)).
template <typename T>
Tensor<T> timestep_embedding(std::span<const Index> ts, Index dim) {
  if (dim < 2 || dim % 2 != 0) throw ConfigError("time embedding dimension must be even and >= 2");
  const Index half = dim / 2, n = static_cast<Index>(ts.size());
  std::vector<T> v(static_cast<std::size_t>(n * dim));
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < half; ++k) {
      const double w = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      const double a = static_cast<double>(ts[static_cast<std::size_t>(i)]) * w;
      v[i * dim + k] = static_cast<T>(std::sin(a));
      v[i * dim + half + k] = static_cast<T>(std::cos(a));
    }
  return Tensor<T>::from({n, dim}, std::move(v));
}

// ---------------------------------------------------------------- network

struct GRUUNetConfig {
  Index base_channels = 64;
  Index input_len = 512;
  Index attention_heads = 4;
  Index gru_layers = 16;
  Index time_embed_dim = 128;
  bool bypass_gru = false;  // test hook: identity in place of the GRU stack

  void validate() const {
    if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
    if (input_len <= 0 || input_len % 8 != 0)
      throw ConfigError("input_len must be a positive multiple of 8, got " + std::to_string(input_len));
    if (attention_heads < 1 || base_channels % attention_heads != 0)
      throw ConfigError("base_channels must be divisible by attention_heads");
    if (gru_layers < 1) throw ConfigError("gru_layers must be >= 1");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw ConfigError("time_embed_dim must be even and >= 2");
  }
};

inline void to_json(nlohmann::json& j, const GRUUNetConfig& c) {
  j = {{"base_channels", c.base_channels},     {"input_len", c.input_len},   {"attention_heads", c.attention_heads},
       {"gru_layers", c.gru_layers},           {"time_embed_dim", c.time_embed_dim}, {"bypass_gru", c.bypass_gru}};
}

inline void from_json(const nlohmann::json& j, GRUUNetConfig& c) {
  c.base_channels = j.at("base_channels").get<Index>();
  c.input_len = j.at("input_len").get<Index>();
  c.attention_heads = j.at("attention_heads").get<Index>();
  c.gru_layers = j.at("gru_layers").get<Index>();
  c.time_embed_dim = j.at("time_embed_dim").get<Index>();
  c.bypass_gru = j.value("bypass_gru", false);
}

/// Skip maps in stash order: block 0 (res, attention), block 1 (...), ...
template <typename T>
struct SkipStash {
  std::vector<Tensor<T>> maps;
};

/// Self-attention with an identity shortcut.
template <typename T>
Tensor<T> residual_attention(MultiHeadSelfAttention<T>& attn, const Tensor<T>& x) {
  return add(x, attn.forward(x));
}

template <typename T>
class UNetDownBlock {
 public:
  UNetDownBlock() = default;
  UNetDownBlock(Index c, Index heads, Index temb, bool downsample, Rng& rng)
      : res1(c, c, true, rng, 3, temb),
        res2(c, c, true, rng, 3, temb),
        attn(c, heads, rng),
        down(c, downsample ? 2 * c : c, 3, rng, downsample ? 2 : 1) {}

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& temb, Mode mode, SkipStash<T>& stash) {
    auto h = res1.forward(x, mode, &temb);
    stash.maps.push_back(h);
    h = residual_attention(attn, res2.forward(h, mode, &temb));
    stash.maps.push_back(h);
    return down.forward(h);
  }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    res1.collect(ps, join_name(prefix, "res1"));
    res2.collect(ps, join_name(prefix, "res2"));
    attn.collect(ps, join_name(prefix, "attn"));
    down.collect(ps, join_name(prefix, "down"));
  }

  ResBlock<T> res1, res2;
  MultiHeadSelfAttention<T> attn;
  Conv1d<T> down;
};

template <typename T>
class UNetUpBlock {
 public:
  UNetUpBlock() = default;
  UNetUpBlock(Index c, Index heads, Index temb, bool upsample, Rng& rng)
      : res1(2 * c, c, true, rng, 3, temb),
        res2(2 * c, c, true, rng, 3, temb),
        attn(c, heads, rng),
        up(c, upsample ? c / 2 : c, 3, rng),
        upsample(upsample) {}

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& skip_res, const Tensor<T>& skip_attn, const Tensor<T>& temb,
                    Mode mode) {
    auto h = res1.forward(concat<T>({x, skip_attn}, 1), mode, &temb);
    h = res2.forward(concat<T>({h, skip_res}, 1), mode, &temb);
    h = residual_attention(attn, h);
    return up.forward(upsample ? upsample_nearest(h, 2) : h);
  }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    res1.collect(ps, join_name(prefix, "res1"));
    res2.collect(ps, join_name(prefix, "res2"));
    attn.collect(ps, join_name(prefix, "attn"));
    up.collect(ps, join_name(prefix, "up"));
  }

  ResBlock<T> res1, res2;
  MultiHeadSelfAttention<T> attn;
  Conv1d<T> up;
  bool upsample = true;
};

/// Noise predictor eps_hat(x_t, t): (N, 1, L) -> (N, 1, L).
template <typename T>
class GRUUNet {
 public:
  using scalar_type = T;
  static constexpr int kBlocks = 4;

  explicit GRUUNet(const GRUUNetConfig& cfg, std::uint64_t seed = 0) : config(cfg) {
    cfg.validate();
    Rng rng(seed);
    const Index c = cfg.base_channels, te = cfg.time_embed_dim, heads = cfg.attention_heads;
    time_fc1 = Linear<T>(te, te, rng);
    time_fc2 = Linear<T>(te, te, rng);
    stem = Conv1d<T>(1, c, 7, rng);
    Index ch = c;
    for (int i = 0; i < kBlocks; ++i) {
      const bool last = i == kBlocks - 1;
      down.emplace_back(ch, heads, te, !last, rng);
      if (!last) ch *= 2;
    }
    enc_out = ResBlock<T>(ch, ch, true, rng, 3, te);
    gru = GRUStack<T>(ch, ch, cfg.gru_layers, rng);
    mid_attn = MultiHeadSelfAttention<T>(ch, heads, rng);
    mid_res = ResBlock<T>(ch, ch, true, rng, 3, te);
    for (int j = 0; j < kBlocks; ++j) {
      const bool last = j == kBlocks - 1;
      up.emplace_back(ch, heads, te, !last, rng);
      if (!last) ch /= 2;
    }
    out = Conv1d<T>(c, 1, 3, rng);
    init_for_diffusion();
  }

  /// The ReLU-gain defaults compound through the un-normalised convs and the
  /// residual attentions, so those are tamed: plain convs get a 1/sqrt(fan_in)
  /// bound, attention output projections and the final conv start at zero
  /// (identity attentions, eps_hat = 0 at step 0).
  void init_for_diffusion() {
    auto shrink = [](Conv1d<T>& conv) {
      for (auto& w : conv.weight.data()) w = static_cast<T>(w / std::sqrt(T(6)));
    };
    auto zero = [](Tensor<T>& t) { std::fill(t.data().begin(), t.data().end(), T(0)); };
    shrink(stem);
    for (auto& b : down) {
      shrink(b.down);
      zero(b.attn.out.weight);
      zero(b.attn.out.bias);
    }
    for (auto& b : up) {
      shrink(b.up);
      zero(b.attn.out.weight);
      zero(b.attn.out.bias);
    }
    zero(mid_attn.out.weight);
    zero(mid_attn.out.bias);
    zero(out.weight);
    zero(out.bias);
  }

  /// SiLU(MLP(sinusoid(t))), fed to every res block.
  Tensor<T> time_features(std::span<const Index> ts) const {
    return silu(time_fc2.forward(silu(time_fc1.forward(timestep_embedding<T>(ts, config.time_embed_dim)))));
  }

  /// Stem and encoder; returns f_E (N, 8C, L/8) and fills the 8 skip maps.
  Tensor<T> encode(const Tensor<T>& x, const Tensor<T>& temb, Mode mode, SkipStash<T>& stash) {
    auto h = stem.forward(x);
    trace_shape("stem", h);
    for (int i = 0; i < kBlocks; ++i) {
      h = down[i].forward(h, temb, mode, stash);
      trace_shape("enc" + std::to_string(i), h);
    }
    h = enc_out.forward(h, mode, &temb);
    trace_shape("bottleneck", h);
    return h;
  }

  /// GRU over the length axis; (N, 8C, L/8) in and out.
  Tensor<T> middle(const Tensor<T>& f) const {
    if (config.bypass_gru) return f;
    auto y = permute(gru.forward(permute(f, {0, 2, 1})), {0, 2, 1});
    trace_shape("gru", y);
    return y;
  }

  Tensor<T> decode(const Tensor<T>& f, const Tensor<T>& temb, Mode mode, const SkipStash<T>& stash) {
    if (stash.maps.size() != 2 * kBlocks)
      throw StateError("decoder needs " + std::to_string(2 * kBlocks) + " skip maps, got " +
                       std::to_string(stash.maps.size()));
    auto h = mid_res.forward(residual_attention(mid_attn, f), mode, &temb);
    trace_shape("f1", h);
    for (int j = 0; j < kBlocks; ++j) {
      const int e = kBlocks - 1 - j;
      h = up[j].forward(h, stash.maps[2 * e], stash.maps[2 * e + 1], temb, mode);
      trace_shape("dec" + std::to_string(j), h);
    }
    auto y = out.forward(h);
    trace_shape("out", y);
    return y;
  }

  Tensor<T> forward(const Tensor<T>& x, std::span<const Index> ts, Mode mode) {
    check_input(x);
    if (static_cast<Index>(ts.size()) != x.dim(0)) throw ShapeError("GRUUNet: need one step per row");
    const auto temb = time_features(ts);
    SkipStash<T> stash;
    auto f = encode(x, temb, mode, stash);
    return decode(middle(f), temb, mode, stash);
  }

  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 3 || x.dim(1) != 1 || x.dim(2) % 8 != 0)
      throw ShapeError("GRUUNet expects (N, 1, L) with L a multiple of 8, got " + shape_str(x.shape()));
  }

  ParamSet<T> params() const {
    ParamSet<T> ps;
    time_fc1.collect(ps, "time.fc1");
    time_fc2.collect(ps, "time.fc2");
    stem.collect(ps, "stem");
    for (std::size_t i = 0; i < down.size(); ++i) down[i].collect(ps, "enc." + std::to_string(i));
    enc_out.collect(ps, "enc.out");
    gru.collect(ps, "gru");
    mid_attn.collect(ps, "dec.attn");
    mid_res.collect(ps, "dec.res");
    for (std::size_t j = 0; j < up.size(); ++j) up[j].collect(ps, "dec." + std::to_string(j));
    out.collect(ps, "out");
    return ps;
  }

  GRUUNetConfig config;
  Linear<T> time_fc1, time_fc2;
  Conv1d<T> stem;
  std::vector<UNetDownBlock<T>> down;
  ResBlock<T> enc_out;
  GRUStack<T> gru;
  MultiHeadSelfAttention<T> mid_attn;
  ResBlock<T> mid_res;
  std::vector<UNetUpBlock<T>> up;
  Conv1d<T> out;
};

/// Output shapes of every traced stage for a (1, 1, L) input at step 1.
template <typename T>
std::vector<ShapeRecord> trace_unet_shapes(GRUUNet<T>& model, Index len) {
  NoGradGuard no_grad;
  ShapeTraceScope trace;
  const std::vector<Index> ts{1};
  model.forward(Tensor<T>::zeros({1, 1, len}), ts, Mode::Eval);
  return trace.records();
}

// ---------------------------------------------------------------- objective

/// MSE between the injected noise and the prediction on x_t.
/// `predict` maps (x_t, steps) to eps_hat.
template <typename T, typename F>
Tensor<T> diffusion_loss(F&& predict, const NoiseSchedule& s, const Tensor<T>& x0, std::span<const Index> ts,
                         const Tensor<T>& eps) {
  auto xt = q_sample(s, x0, ts, eps);
  return mse(predict(xt, ts), eps);
}

/// Per-row step uniform in [1, T] and standard-normal noise shaped like x0.
struct NoiseDraw {
  std::vector<Index> steps;
  std::vector<double> eps;
};

inline NoiseDraw draw_noise(Rng& rng, Index rows, Index row_len, Index steps) {
  NoiseDraw d;
  d.steps.resize(static_cast<std::size_t>(rows));
  for (auto& t : d.steps) t = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(steps)));
  d.eps.resize(static_cast<std::size_t>(rows * row_len));
  for (auto& e : d.eps) e = rng.normal();
  return d;
}

/// Ancestral sampling from x_T ~ N(0, I):
///   x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z,
/// with z = 0 at t = 1. Eval mode; a pure function of weights, schedule and seed.
template <typename T, typename F>
Tensor<T> p_sample_loop(F&& predict, const NoiseSchedule& s, Index n, Index len, std::uint64_t seed,
                        Index batch_size = 64) {
  NoGradGuard no_grad;
  Rng rng(derive_seed(seed, {0x5a3b1eULL}));
  std::vector<T> x(static_cast<std::size_t>(n * len));
  for (auto& v : x) v = static_cast<T>(rng.normal());
  for (Index t = s.steps(); t >= 1; --t) {
    const double c_eps = s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t));
    const double c_x = 1.0 / std::sqrt(s.alpha(t));
    const double sig = s.sigma(t);
    for (Index b = 0; b < n; b += batch_size) {
      const Index rows = std::min(batch_size, n - b);
      std::vector<T> chunk(x.begin() + b * len, x.begin() + (b + rows) * len);
      const std::vector<Index> ts(static_cast<std::size_t>(rows), t);
      const auto eps_hat = predict(Tensor<T>::from({rows, 1, len}, std::move(chunk)), std::span<const Index>(ts));
      const auto e = eps_hat.data();
      for (Index i = 0; i < rows * len; ++i) {
        T& xi = x[static_cast<std::size_t>(b * len + i)];
        xi = static_cast<T>(c_x * (static_cast<double>(xi) - c_eps * static_cast<double>(e[i])));
      }
    }
    if (t > 1)
      for (auto& v : x) v = static_cast<T>(static_cast<double>(v) + sig * rng.normal());
  }
  return Tensor<T>::from({n, 1, len}, std::move(x));
}

template <typename T>
Tensor<T> p_sample_loop(GRUUNet<T>& model, const NoiseSchedule& s, Index n, std::uint64_t seed) {
  auto predict = [&](const Tensor<T>& xt, std::span<const Index> ts) { return model.forward(xt, ts, Mode::Eval); };
  return p_sample_loop<T>(predict, s, n, model.config.input_len, seed);
}

/// Packs an (n, 1, L) sample tensor into a labelled set.
template <typename T>
SegmentSet samples_to_set(const Tensor<T>& samples, const std::vector<std::string>& class_names, int label,
                          double rate_hz = kTargetRateHz) {
  detail::require_rank(samples.shape(), 3, "samples_to_set");
  SegmentSet out;
  out.segment_len = samples.dim(2);
  out.rate_hz = rate_hz;
  out.class_names = class_names;
  const auto v = samples.data();
  std::vector<float> row(static_cast<std::size_t>(out.segment_len));
  for (Index i = 0; i < samples.dim(0); ++i) {
    for (Index j = 0; j < out.segment_len; ++j) row[j] = static_cast<float>(v[i * out.segment_len + j]);
    out.push_back(row, label);
  }
  return out;
}

// ---------------------------------------------------------------- training

struct DiffusionOptions {
  Index steps = 100;  // T
  double beta_1 = 1e-4;
  double beta_T = 0.02;
  Index batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const DiffusionOptions& o) {
  j = {{"steps", o.steps}, {"beta_1", o.beta_1}, {"beta_T", o.beta_T},
       {"batch_size", o.batch_size}, {"lr", o.lr}, {"seed", o.seed}};
}

inline void from_json(const nlohmann::json& j, DiffusionOptions& o) {
  o.steps = j.at("steps").get<Index>();
  o.beta_1 = j.at("beta_1").get<double>();
  o.beta_T = j.at("beta_T").get<double>();
  o.batch_size = j.at("batch_size").get<Index>();
  o.lr = j.at("lr").get<double>();
  o.seed = j.at("seed").get<std::uint64_t>();
}

/// Noise-prediction training on the segments of one class. The rows, steps
/// and noise of update k depend only on (seed, k), so a restored trainer
/// continues exactly where the original left off.
template <typename T>
class DiffusionTrainer {
 public:
  DiffusionTrainer(GRUUNet<T>& model, DiffusionOptions opts)
      : model_(model),
        opts_(opts),
        schedule_(make_schedule(opts.steps, opts.beta_1, opts.beta_T)),
        params_(model.params()),
        adam_(params_, {.lr = opts.lr}) {
    if (opts.batch_size < 2) throw ConfigError("diffusion batch_size must be >= 2 for batch norm");
  }

  const NoiseSchedule& schedule() const { return schedule_; }
  std::int64_t step_index() const { return step_; }
  Adam<T>& optimizer() { return adam_; }

  /// One Adam update; returns the MSE before the update.
  double step(const SegmentSet& data) {
    if (data.segment_len != model_.config.input_len)
      throw ShapeError("diffusion data has segment length " + std::to_string(data.segment_len) + ", model expects " +
                       std::to_string(model_.config.input_len));
    if (data.size() < 2) throw ConfigError("diffusion training needs at least two segments");
    Rng rng(derive_seed(opts_.seed, {0xd1ffULL, static_cast<std::uint64_t>(step_)}));
    const Index rows = std::min(opts_.batch_size, data.size());
    std::vector<Index> idx(static_cast<std::size_t>(rows));
    if (rows == data.size()) {
      idx = iota_rows(rows);
    } else {
      const auto perm = rng.permutation(static_cast<std::size_t>(data.size()));
      for (Index i = 0; i < rows; ++i) idx[i] = static_cast<Index>(perm[static_cast<std::size_t>(i)]);
    }
    const auto draw = draw_noise(rng, rows, data.segment_len, schedule_.steps());
    auto eps = Tensor<T>::from({rows, 1, data.segment_len}, std::vector<T>(draw.eps.begin(), draw.eps.end()));
    adam_.zero_grad();
    auto predict = [&](const Tensor<T>& xt, std::span<const Index> ts) { return model_.forward(xt, ts, Mode::Train); };
    auto loss = diffusion_loss<T>(predict, schedule_, gather_batch<T>(data, idx), draw.steps, eps);
    const double value = static_cast<double>(loss.item());
    check_finite(value);
    backward(loss);
    adam_.step();
    ++step_;
    return value;
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    export_params(ck, params_);
    export_adam(ck, adam_);
    ck.meta["kind"] = "diffusion";
    ck.meta["config"] = model_.config;
    ck.meta["train"] = opts_;
    ck.meta["step"] = step_;
    return ck;
  }

  void restore(const Checkpoint& ck) {
    if (ck.meta.value("kind", "") != "diffusion") throw DataIntegrityError("not a diffusion checkpoint");
    import_params(ck, params_);
    import_adam(ck, adam_);
    step_ = ck.meta.at("step").get<std::int64_t>();
  }

 private:
  static void check_finite(double v) {
    if (!std::isfinite(v)) throw NumericError("diffusion loss is not finite (" + std::to_string(v) + ")");
  }

  GRUUNet<T>& model_;
  DiffusionOptions opts_;
  NoiseSchedule schedule_;
  ParamSet<T> params_;
  Adam<T> adam_;
  std::int64_t step_ = 0;
};

// ---------------------------------------------------------------- sidecar

struct DiffusionSidecar {
  Index steps = 100;
  double beta_1 = 1e-4;
  double beta_T = 0.02;
  Index base_channels = 16;
  Index input_len = 128;
  Index gru_layers = 2;
  std::string class_name;
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const DiffusionSidecar& s) {
  return {{"T", s.steps},
          {"beta_1", s.beta_1},
          {"beta_T", s.beta_T},
          {"C", s.base_channels},
          {"L", s.input_len},
          {"gru_layers", s.gru_layers},
          {"class_name", s.class_name},
          {"seed", s.seed}};
}

inline DiffusionSidecar sidecar_from_json(const nlohmann::json& j) {
  DiffusionSidecar s;
  s.steps = j.at("T").get<Index>();
  s.beta_1 = j.at("beta_1").get<double>();
  s.beta_T = j.at("beta_T").get<double>();
  s.base_channels = j.at("C").get<Index>();
  s.input_len = j.at("L").get<Index>();
  s.gru_layers = j.at("gru_layers").get<Index>();
  s.class_name = j.at("class_name").get<std::string>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

inline DiffusionSidecar make_sidecar(const GRUUNetConfig& cfg, const DiffusionOptions& o, std::string class_name) {
  return {o.steps, o.beta_1, o.beta_T, cfg.base_channels, cfg.input_len, cfg.gru_layers, std::move(class_name), o.seed};
}

/// `<checkpoint>.json` next to the checkpoint file.
inline std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p += ".json";
  return p;
}

inline void write_sidecar(const std::filesystem::path& checkpoint, const DiffusionSidecar& s) {
  std::ofstream os(sidecar_path(checkpoint), std::ios::trunc);
  if (!os) throw DataIntegrityError("cannot write sidecar for '" + checkpoint.string() + "'");
  os << to_json(s).dump(2) << '\n';
}

inline DiffusionSidecar read_sidecar(const std::filesystem::path& checkpoint) {
  const auto p = sidecar_path(checkpoint);
  std::ifstream is(p);
  if (!is) throw DataIntegrityError("missing diffusion sidecar '" + p.string() + "'");
  try {
    return sidecar_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw DataIntegrityError("malformed sidecar '" + p.string() + "': " + e.what());
  }
}

}  // namespace ecglab
