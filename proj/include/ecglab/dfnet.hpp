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

// Single-task DFNet: strided/dilated convolutional encoder, three-branch
// dilated fusion neck and squeeze-excitation head.
//
//   encoder  conv1 (C/2, s2) -> res1 x3 -> conv2 (C, s2) -> res2 x6     C   x L/4
//   neck     conv3 (2C, s2, d1) -> res3 x3                 = Y_R1      2C x L/8
//            conv4 (4C, d2)     -> res4 x3                 = Y_R2      4C x L/8
//            conv5 (8C, d3)     -> res5 x3                 = Y_R3      8C x L/8
//            fusion_conv(concat(Y_R1, Y_R2, Y_R3))         = Y_D       8C x L/8
//   head     SE-res x2 (8C) -> SE-res (cls_num) -> global average pool

#pragma once

#include <array>
#include <string>
#include <vector>

#include "ecglab/layers.hpp"

namespace ecglab {

struct DFNetConfig {
  Index base_channels = 16;
  Index input_len = 512;
  Index cls_num = 12;
  std::array<Index, 3> dilation_rates{1, 2, 3};
  Index se_reduction = 8;

  void validate() const {
    if (base_channels < 2 || base_channels % 2 != 0) throw ConfigError("base_channels must be even and >= 2");
    if (input_len <= 0 || input_len % 8 != 0) throw ConfigError("input_len must be a positive multiple of 8");
    if (cls_num < 2) throw ConfigError("cls_num must be at least 2");
    for (Index d : dilation_rates)
      if (d < 1) throw ConfigError("dilation rates must be >= 1");
    if (se_reduction < 1) throw ConfigError("se_reduction must be >= 1");
  }
};

namespace detail {
template <typename T>
std::vector<ResBlock<T>> res_stack(Index channels, int count, Rng& rng) {
  std::vector<ResBlock<T>> blocks;
  blocks.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) blocks.emplace_back(channels, channels, true, rng);
  return blocks;
}

template <typename T>
Tensor<T> run_stack(std::vector<ResBlock<T>>& blocks, Tensor<T> x, Mode mode) {
  for (auto& b : blocks) x = b.forward(x, mode);
  return x;
}

template <typename T>
void collect_stack(const std::vector<ResBlock<T>>& blocks, ParamSet<T>& ps, const std::string& prefix) {
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(ps, join_name(prefix, std::to_string(i)));
}
}  // namespace detail

/// (N, 1, L) -> (N, C, L/4). Also serves as a CGC expert.
template <typename T>
class DFNetEncoder {
 public:
  DFNetEncoder() = default;
  DFNetEncoder(const DFNetConfig& cfg, Rng& rng)
      : conv1(1, cfg.base_channels / 2, 3, rng, 2),
        res1(detail::res_stack<T>(cfg.base_channels / 2, 3, rng)),
        conv2(cfg.base_channels / 2, cfg.base_channels, 3, rng, 2),
        res2(detail::res_stack<T>(cfg.base_channels, 6, rng)) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    auto h = conv1.forward(x, mode);
    trace_shape("conv1", h);
    h = detail::run_stack(res1, h, mode);
    trace_shape("res1", h);
    h = conv2.forward(h, mode);
    trace_shape("conv2", h);
    h = detail::run_stack(res2, h, mode);
    trace_shape("res2", h);
    return h;
  }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    conv1.collect(ps, join_name(prefix, "conv1"));
    detail::collect_stack(res1, ps, join_name(prefix, "res1"));
    conv2.collect(ps, join_name(prefix, "conv2"));
    detail::collect_stack(res2, ps, join_name(prefix, "res2"));
  }

  ConvBNAct<T> conv1;
  std::vector<ResBlock<T>> res1;
  ConvBNAct<T> conv2;
  std::vector<ResBlock<T>> res2;
};

/// (N, C, L/4) -> Y_D (N, 8C, L/8).
template <typename T>
class DFNetNeck {
 public:
  DFNetNeck() = default;
  DFNetNeck(const DFNetConfig& cfg, Rng& rng) {
    const Index c = cfg.base_channels;
    const auto& d = cfg.dilation_rates;
    conv3 = ConvBNAct<T>(c, 2 * c, 3, rng, 2, d[0]);
    res3 = detail::res_stack<T>(2 * c, 3, rng);
    conv4 = ConvBNAct<T>(2 * c, 4 * c, 3, rng, 1, d[1]);
    res4 = detail::res_stack<T>(4 * c, 3, rng);
    conv5 = ConvBNAct<T>(4 * c, 8 * c, 3, rng, 1, d[2]);
    res5 = detail::res_stack<T>(8 * c, 3, rng);
    fusion = ConvBNAct<T>(14 * c, 8 * c, 3, rng);
  }

  /// Y_R1, Y_R2, Y_R3; each branch feeds the next.
  std::array<Tensor<T>, 3> forward_branches(const Tensor<T>& x, Mode mode) {
    auto h = conv3.forward(x, mode);
    trace_shape("conv3", h);
    auto r1 = detail::run_stack(res3, h, mode);
    trace_shape("res3", r1);
    h = conv4.forward(r1, mode);
    trace_shape("conv4", h);
    auto r2 = detail::run_stack(res4, h, mode);
    trace_shape("res4", r2);
    h = conv5.forward(r2, mode);
    trace_shape("conv5", h);
    auto r3 = detail::run_stack(res5, h, mode);
    trace_shape("res5", r3);
    return {r1, r2, r3};
  }

  Tensor<T> fuse(const std::array<Tensor<T>, 3>& branches, Mode mode) {
    const Index len = branches[0].dim(2);
    for (const auto& b : branches)
      if (b.dim(2) != len) throw ShapeError("neck branch lengths differ: " + shape_str(b.shape()));
    auto y = fusion.forward(concat<T>({branches[0], branches[1], branches[2]}, 1), mode);
    trace_shape("fusion_conv", y);
    return y;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) { return fuse(forward_branches(x, mode), mode); }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    conv3.collect(ps, join_name(prefix, "conv3"));
    detail::collect_stack(res3, ps, join_name(prefix, "res3"));
    conv4.collect(ps, join_name(prefix, "conv4"));
    detail::collect_stack(res4, ps, join_name(prefix, "res4"));
    conv5.collect(ps, join_name(prefix, "conv5"));
    detail::collect_stack(res5, ps, join_name(prefix, "res5"));
    fusion.collect(ps, join_name(prefix, "fusion_conv"));
  }

  ConvBNAct<T> conv3, conv4, conv5, fusion;
  std::vector<ResBlock<T>> res3, res4, res5;
};

/// Y_D (N, 8C, L/8) -> raw logits (N, cls_num).
template <typename T>
class DFNetHead {
 public:
  DFNetHead() = default;
  DFNetHead(const DFNetConfig& cfg, Rng& rng)
      : se1(8 * cfg.base_channels, 8 * cfg.base_channels, cfg.se_reduction, rng),
        se2(8 * cfg.base_channels, 8 * cfg.base_channels, cfg.se_reduction, rng),
        se3(8 * cfg.base_channels, cfg.cls_num, cfg.se_reduction, rng) {}

  Tensor<T> forward(const Tensor<T>& y, Mode mode) {
    auto h = se2.forward(se1.forward(y, mode), mode);
    trace_shape("se_res", h);
    h = se3.forward(h, mode);
    trace_shape("se_res_out", h);
    auto logits = mean_last(h);
    trace_shape("pooling", logits);
    return logits;
  }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    se1.collect(ps, join_name(prefix, "se1"));
    se2.collect(ps, join_name(prefix, "se2"));
    se3.collect(ps, join_name(prefix, "se3"));
  }

  SEResBlock<T> se1, se2, se3;
};

/// Neck + head; one per task in the multi-task model.
template <typename T>
class DFNetTower {
 public:
  DFNetTower() = default;
  DFNetTower(const DFNetConfig& cfg, Rng& rng) : neck(cfg, rng), head(cfg, rng) {}

  Tensor<T> forward(const Tensor<T>& features, Mode mode) { return head.forward(neck.forward(features, mode), mode); }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    neck.collect(ps, join_name(prefix, "neck"));
    head.collect(ps, join_name(prefix, "head"));
  }

  DFNetNeck<T> neck;
  DFNetHead<T> head;
};

template <typename T>
class DFNet {
 public:
  using scalar_type = T;

  explicit DFNet(const DFNetConfig& cfg, std::uint64_t seed = 0) : config(cfg) {
    cfg.validate();
    Rng rng(seed);
    encoder = DFNetEncoder<T>(cfg, rng);
    tower = DFNetTower<T>(cfg, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    check_input(x);
    return tower.forward(encoder.forward(x, mode), mode);
  }

  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 3 || x.dim(1) != 1 || x.dim(2) % 8 != 0)
      throw ShapeError("DFNet expects (N, 1, L) with L a multiple of 8, got " + shape_str(x.shape()));
  }

  /// Checkpoint names: encoder.*, neck.*, head.*.
  ParamSet<T> params() const {
    ParamSet<T> ps;
    encoder.collect(ps, "encoder");
    tower.collect(ps, "");
    return ps;
  }

  DFNetConfig config;
  DFNetEncoder<T> encoder;
  DFNetTower<T> tower;
};

template <typename M>
std::size_t count_params(const M& model) {
  return model.params().count_trainable();
}

/// 2 x MACs of one eval-mode forward pass on a (1, 1, L) input, in GFLOPs.
template <typename M>
double estimate_flops(M& model, Index len) {
  using T = typename M::scalar_type;
  NoGradGuard no_grad;
  MacCounterScope counter;
  model.forward(Tensor<T>::zeros({1, 1, len}), Mode::Eval);
  return 2.0 * static_cast<double>(counter.macs()) / 1e9;
}

/// Output shapes of every traced stage for a (1, 1, L) input.
template <typename M>
std::vector<ShapeRecord> trace_shapes(M& model, Index len) {
  using T = typename M::scalar_type;
  NoGradGuard no_grad;
  ShapeTraceScope trace;
  model.forward(Tensor<T>::zeros({1, 1, len}), Mode::Eval);
  return trace.records();
}

}  // namespace ecglab
