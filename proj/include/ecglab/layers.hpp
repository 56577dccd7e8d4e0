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

// Parameter registry and the layer set shared by the classifier and the
// diffusion network.

#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "ecglab/ops.hpp"
#include "ecglab/rng.hpp"

namespace ecglab {

enum class Mode { Train, Eval };

/// A named model tensor. Buffers such as batch-norm running statistics are
/// registered with `trainable = false` so they travel with checkpoints.
template <typename T>
struct ParamTensor {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
  bool decay = false;  // counted by the L2 penalty
};

template <typename T>
class ParamSet {
 public:
  void add(std::string name, Tensor<T> tensor, bool trainable, bool decay) {
    items_.push_back({std::move(name), std::move(tensor), trainable, decay});
  }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  std::size_t size() const { return items_.size(); }
  ParamTensor<T>& operator[](std::size_t i) { return items_[i]; }
  const ParamTensor<T>& operator[](std::size_t i) const { return items_[i]; }

  const ParamTensor<T>* find(const std::string& name) const {
    for (const auto& p : items_)
      if (p.name == name) return &p;
    return nullptr;
  }

  /// Total number of trainable scalars.
  std::size_t count_trainable() const {
    std::size_t n = 0;
    for (const auto& p : items_)
      if (p.trainable) n += static_cast<std::size_t>(p.tensor.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : items_)
      if (p.trainable) p.tensor.zero_grad();
  }

 private:
  std::vector<ParamTensor<T>> items_;
};

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

namespace init {
template <typename T>
Tensor<T> uniform(Shape shape, double bound, Rng& rng) {
  auto t = Tensor<T>::zeros(std::move(shape), true);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

/// Kaiming-uniform (ReLU gain) on fan-in.
template <typename T>
Tensor<T> kaiming(Shape shape, Index fan_in, Rng& rng) {
  return uniform<T>(std::move(shape), std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
}

template <typename T>
Tensor<T> bias(Index n, Index fan_in, Rng& rng) {
  return uniform<T>({n}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}
}  // namespace init

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(Index in, Index out, Rng& rng, bool with_bias = true)
      : weight(init::kaiming<T>({out, in}, in, rng)) {
    if (with_bias) bias = init::bias<T>(out, in, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight, bias.defined() ? &bias : nullptr); }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    ps.add(join_name(prefix, "weight"), weight, true, true);
    if (bias.defined()) ps.add(join_name(prefix, "bias"), bias, true, false);
  }

  Index in_features() const { return weight.dim(1); }
  Index out_features() const { return weight.dim(0); }

  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(Index cin, Index cout, Index kernel, Rng& rng, Index stride = 1, Index dilation = 1)
      : weight(init::kaiming<T>({cout, cin, kernel}, cin * kernel, rng)),
        bias(init::bias<T>(cout, cin * kernel, rng)),
        stride(stride),
        dilation(dilation) {}

  Tensor<T> forward(const Tensor<T>& x) const { return conv1d(x, weight, &bias, stride, dilation); }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    ps.add(join_name(prefix, "weight"), weight, true, true);
    ps.add(join_name(prefix, "bias"), bias, true, false);
  }

  Index in_channels() const { return weight.dim(1); }
  Index out_channels() const { return weight.dim(0); }

  Tensor<T> weight;
  Tensor<T> bias;
  Index stride = 1;
  Index dilation = 1;
};

template <typename T>
class BatchNorm1d {
 public:
  BatchNorm1d() = default;
  explicit BatchNorm1d(Index channels)
      : gamma(Tensor<T>::full({channels}, T(1), true)),
        beta(Tensor<T>::zeros({channels}, true)),
        running_mean(Tensor<T>::zeros({channels})),
        running_var(Tensor<T>::full({channels}, T(1))) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    return batch_norm(x, gamma, beta, running_mean.data(), running_var.data(), mode == Mode::Train);
  }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    ps.add(join_name(prefix, "weight"), gamma, true, false);
    ps.add(join_name(prefix, "bias"), beta, true, false);
    ps.add(join_name(prefix, "running_mean"), running_mean, false, false);
    ps.add(join_name(prefix, "running_var"), running_var, false, false);
  }

  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

/// conv -> batch norm -> SiLU.
template <typename T>
class ConvBNAct {
 public:
  ConvBNAct() = default;
  ConvBNAct(Index cin, Index cout, Index kernel, Rng& rng, Index stride = 1, Index dilation = 1)
      : conv(cin, cout, kernel, rng, stride, dilation), bn(cout) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode) { return silu(bn.forward(conv.forward(x), mode)); }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    conv.collect(ps, join_name(prefix, "conv"));
    bn.collect(ps, join_name(prefix, "bn"));
  }

  Conv1d<T> conv;
  BatchNorm1d<T> bn;
};

/// Two conv -> BN -> SiLU stages. With `residual`, the input (or its 1x1
/// projection when the channel count changes) is added to the result. An
/// optional time embedding is projected and added after the first conv.
template <typename T>
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(Index cin, Index cout, bool residual, Rng& rng, Index kernel = 3, Index time_dim = 0)
      : conv1(cin, cout, kernel, rng), bn1(cout), conv2(cout, cout, kernel, rng), bn2(cout), residual(residual) {
    if (residual && cin != cout) proj = std::make_unique<Conv1d<T>>(cin, cout, 1, rng);
    if (time_dim > 0) time_proj = std::make_unique<Linear<T>>(time_dim, cout, rng);
  }

  /// `temb` is the already-activated time embedding (N, time_dim), if any.
  Tensor<T> forward(const Tensor<T>& x, Mode mode, const Tensor<T>* temb = nullptr) {
    auto h = conv1.forward(x);
    if (time_proj) {
      if (!temb) throw ConfigError("ResBlock: time-conditioned block called without a time embedding");
      h = add_channel(h, time_proj->forward(*temb));
    }
    h = silu(bn1.forward(h, mode));
    h = silu(bn2.forward(conv2.forward(h), mode));
    if (!residual) return h;
    return add(h, proj ? proj->forward(x) : x);
  }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    conv1.collect(ps, join_name(prefix, "conv1"));
    bn1.collect(ps, join_name(prefix, "bn1"));
    conv2.collect(ps, join_name(prefix, "conv2"));
    bn2.collect(ps, join_name(prefix, "bn2"));
    if (proj) proj->collect(ps, join_name(prefix, "proj"));
    if (time_proj) time_proj->collect(ps, join_name(prefix, "time_proj"));
  }

  Conv1d<T> conv1;
  BatchNorm1d<T> bn1;
  Conv1d<T> conv2;
  BatchNorm1d<T> bn2;
  std::unique_ptr<Conv1d<T>> proj;
  std::unique_ptr<Linear<T>> time_proj;
  bool residual = true;
};

/// Squeeze-and-excitation residual block:
///   y = shortcut(x) + ResBlock_{residual=false}(x) * sigmoid(F_ex(ReLU(F_sq(GAP(x)))))
/// with the gate broadcast over length. The shortcut is the identity, or a
/// 1x1 projection when the block changes the channel count.
template <typename T>
class SEResBlock {
 public:
  SEResBlock() = default;
  SEResBlock(Index cin, Index cout, Index reduction, Rng& rng)
      : branch(cin, cout, false, rng) {
    const Index hidden = squeezed_width(cin, reduction);
    squeeze = Linear<T>(cin, hidden, rng);
    excite = Linear<T>(hidden, cout, rng);
    if (cin != cout) proj = std::make_unique<Conv1d<T>>(cin, cout, 1, rng);
  }

  static Index squeezed_width(Index channels, Index reduction) {
    if (reduction < 1) throw ConfigError("SE reduction ratio must be >= 1");
    if (channels < reduction) {
      warn("SE block with " + std::to_string(channels) + " channels < reduction " + std::to_string(reduction) +
           "; clamping squeeze width to 1");
      return 1;
    }
    return channels / reduction;
  }

  /// Channel gate in (0, 1), shaped (N, cout).
  Tensor<T> gate(const Tensor<T>& x) const {
    return sigmoid(excite.forward(relu(squeeze.forward(mean_last(x)))));
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    auto y = mul_channel(branch.forward(x, mode), gate(x));
    return add(proj ? proj->forward(x) : x, y);
  }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    branch.collect(ps, join_name(prefix, "branch"));
    squeeze.collect(ps, join_name(prefix, "squeeze"));
    excite.collect(ps, join_name(prefix, "excite"));
    if (proj) proj->collect(ps, join_name(prefix, "proj"));
  }

  ResBlock<T> branch;
  Linear<T> squeeze;
  Linear<T> excite;
  std::unique_ptr<Conv1d<T>> proj;
};

/// Multi-head scaled dot-product self-attention over (N, C, L) maps. No
/// positional encoding is applied, so the op is permutation-equivariant in L.
template <typename T>
class MultiHeadSelfAttention {
 public:
  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(Index channels, Index heads, Rng& rng)
      : query(channels, channels, rng),
        key(channels, channels, rng),
        value(channels, channels, rng),
        out(channels, channels, rng),
        heads(heads) {
    if (heads < 1 || channels % heads != 0)
      throw ConfigError("attention: " + std::to_string(channels) + " channels not divisible by " +
                        std::to_string(heads) + " heads");
  }

  Tensor<T> forward(const Tensor<T>& x) {
    detail::require_rank(x.shape(), 3, "attention");
    const Index n = x.dim(0), c = x.dim(1), len = x.dim(2), d = c / heads;
    if (c != query.in_features())
      throw ShapeError("attention: input " + shape_str(x.shape()) + " for " + std::to_string(query.in_features()) +
                       " channels");
    auto seq = permute(x, {0, 2, 1});
    auto split = [&](const Tensor<T>& t) {
      return reshape(permute(reshape(t, {n, len, heads, d}), {0, 2, 1, 3}), {n * heads, len, d});
    };
    // 1/sqrt(d) is applied to q, which is far smaller than the score matrix.
    auto q = scale(split(query.forward(seq)), T(1) / std::sqrt(static_cast<T>(d)));
    auto k = split(key.forward(seq));
    auto v = split(value.forward(seq));
    last_attention = softmax(bmm(q, k, true));
    auto ctx = reshape(permute(reshape(bmm(last_attention, v), {n, heads, len, d}), {0, 2, 1, 3}), {n, len, c});
    return permute(out.forward(ctx), {0, 2, 1});
  }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    query.collect(ps, join_name(prefix, "query"));
    key.collect(ps, join_name(prefix, "key"));
    value.collect(ps, join_name(prefix, "value"));
    out.collect(ps, join_name(prefix, "out"));
  }

  Linear<T> query, key, value, out;
  Index heads = 4;
  Tensor<T> last_attention;  // (N*heads, L, L) from the latest forward
};

/// Stack of unidirectional GRU layers over (N, T, I), zero initial state.
template <typename T>
class GRUStack {
 public:
  struct Layer {
    Tensor<T> w_ih, w_hh, b_ih, b_hh;
  };

  GRUStack() = default;
  GRUStack(Index input, Index hidden, Index num_layers, Rng& rng) : hidden(hidden) {
    if (num_layers < 1) throw ConfigError("GRU stack needs at least one layer");
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (Index l = 0; l < num_layers; ++l) {
      const Index in = l == 0 ? input : hidden;
      layers.push_back({init::uniform<T>({3 * hidden, in}, bound, rng), init::uniform<T>({3 * hidden, hidden}, bound, rng),
                        init::uniform<T>({3 * hidden}, bound, rng), init::uniform<T>({3 * hidden}, bound, rng)});
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> h = x;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& p = layers[l];
      if (h.rank() != 3 || h.dim(2) != p.w_ih.dim(1))
        throw ShapeError("GRU layer " + std::to_string(l) + " expects input size " + std::to_string(p.w_ih.dim(1)) +
                         ", got " + shape_str(h.shape()));
      h = gru_layer(h, p.w_ih, p.w_hh, p.b_ih, p.b_hh);
    }
    return h;
  }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto s = std::to_string(l);
      ps.add(join_name(prefix, "weight_ih_l" + s), layers[l].w_ih, true, true);
      ps.add(join_name(prefix, "weight_hh_l" + s), layers[l].w_hh, true, true);
      ps.add(join_name(prefix, "bias_ih_l" + s), layers[l].b_ih, true, false);
      ps.add(join_name(prefix, "bias_hh_l" + s), layers[l].b_hh, true, false);
    }
  }

  std::vector<Layer> layers;
  Index hidden = 0;
};

/// Index of the largest logit per row; ties resolve to the lowest index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  detail::require_rank(logits.shape(), 2, "argmax_rows");
  const Index n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (Index r = 0; r < n; ++r) {
    const T* row = logits.ptr() + r * k;
    int best = 0;
    for (Index i = 1; i < k; ++i)
      if (row[i] > row[best]) best = static_cast<int>(i);
    out[r] = best;
  }
  return out;
}

}  // namespace ecglab
