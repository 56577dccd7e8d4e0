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

// Differentiable tensor operations. Layouts are row-major; sequence models use
// (batch, channels, length) for convolutional maps and (batch, time, features)
// for recurrent/attention inputs.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ecglab/tensor.hpp"

namespace ecglab {

namespace detail {
template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using CArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
ArrMap<T> arr(T* p, Index n) {
  return ArrMap<T>(p, n);
}
template <typename T>
CArrMap<T> carr(const T* p, Index n) {
  return CArrMap<T>(p, n);
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
}

template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& x, F f, D dfdx) {
  auto out = make_output<T>(x.shape());
  const T* xv = x.ptr();
  T* ov = out.ptr();
  const auto n = x.size();
  for (Index i = 0; i < n; ++i) ov[i] = f(xv[i]);
  Node<T>* xn = x.node();
  attach(out, {&x}, [xn, dfdx](Node<T>& self) {
    T* g = xn->grad_data();
    const T* xv = xn->value.data();
    const T* yv = self.value.data();
    const T* gy = self.grad.data();
    for (std::size_t i = 0; i < self.value.size(); ++i) g[i] += gy[i] * dfdx(xv[i], yv[i]);
  });
  return out;
}
}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  auto out = detail::make_output<T>(a.shape());
  for (Index i = 0; i < a.size(); ++i) out.ptr()[i] = a.ptr()[i] + b.ptr()[i];
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  detail::attach(out, {&a, &b}, [an, bn](Node<T>& self) {
    const auto n = self.value.size();
    if (an->requires_grad) {
      T* g = an->grad_data();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      T* g = bn->grad_data();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  auto out = detail::make_output<T>(a.shape());
  for (Index i = 0; i < a.size(); ++i) out.ptr()[i] = a.ptr()[i] - b.ptr()[i];
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  detail::attach(out, {&a, &b}, [an, bn](Node<T>& self) {
    const auto n = self.value.size();
    if (an->requires_grad) {
      T* g = an->grad_data();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      T* g = bn->grad_data();
      for (std::size_t i = 0; i < n; ++i) g[i] -= self.grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  auto out = detail::make_output<T>(a.shape());
  for (Index i = 0; i < a.size(); ++i) out.ptr()[i] = a.ptr()[i] * b.ptr()[i];
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  detail::attach(out, {&a, &b}, [an, bn](Node<T>& self) {
    const auto n = self.value.size();
    if (an->requires_grad) {
      T* g = an->grad_data();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      T* g = bn->grad_data();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  auto out = detail::make_output<T>(x.shape());
  detail::arr(out.ptr(), out.size()) = detail::carr(x.ptr(), x.size()).logistic();
  Node<T>* xn = x.node();
  detail::attach(out, {&x}, [xn](Node<T>& self) {
    const auto n = static_cast<Index>(self.value.size());
    auto y = detail::carr(self.value.data(), n);
    detail::arr(xn->grad_data(), n) += detail::carr(self.grad.data(), n) * y * (T(1) - y);
  });
  return out;
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  auto out = detail::make_output<T>(x.shape());
  detail::arr(out.ptr(), out.size()) = detail::carr(x.ptr(), x.size()).tanh();
  Node<T>* xn = x.node();
  detail::attach(out, {&x}, [xn](Node<T>& self) {
    const auto n = static_cast<Index>(self.value.size());
    auto y = detail::carr(self.value.data(), n);
    detail::arr(xn->grad_data(), n) += detail::carr(self.grad.data(), n) * (T(1) - y.square());
  });
  return out;
}

/// x * sigmoid(x); the sigmoid is kept for the backward pass.
template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  auto out = detail::make_output<T>(x.shape());
  const Index n = x.size();
  std::shared_ptr<Buffer<T>> sig;
  if (detail::will_record({&x})) sig = std::make_shared<Buffer<T>>(static_cast<std::size_t>(n));
  if (sig) {
    auto s = detail::arr(sig->data(), n);
    s = detail::carr(x.ptr(), n).logistic();
    detail::arr(out.ptr(), n) = detail::carr(x.ptr(), n) * s;
  } else {
    detail::arr(out.ptr(), n) = detail::carr(x.ptr(), n) * detail::carr(x.ptr(), n).logistic();
  }
  Node<T>* xn = x.node();
  detail::attach(out, {&x}, [xn, sig, n](Node<T>& self) {
    auto s = detail::carr(sig->data(), n);
    auto y = detail::carr(self.value.data(), n);
    detail::arr(xn->grad_data(), n) += detail::carr(self.grad.data(), n) * (s + y * (T(1) - s));
  });
  return out;
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  const T acc = detail::carr(x.ptr(), x.size()).sum();
  auto out = Tensor<T>::scalar(acc);
  Node<T>* xn = x.node();
  detail::attach(out, {&x}, [xn](Node<T>& self) {
    T* g = xn->grad_data();
    const T gy = self.grad[0];
    for (std::size_t i = 0; i < xn->value.size(); ++i) g[i] += gy;
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> sum_squares(const Tensor<T>& x) {
  const T acc = detail::carr(x.ptr(), x.size()).square().sum();
  auto out = Tensor<T>::scalar(acc);
  Node<T>* xn = x.node();
  detail::attach(out, {&x}, [xn](Node<T>& self) {
    const auto n = static_cast<Index>(xn->value.size());
    detail::arr(xn->grad_data(), n) += (T(2) * self.grad[0]) * detail::carr(xn->value.data(), n);
  });
  return out;
}

/// Mean squared error between `pred` and `target`.
template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require_same_shape(pred.shape(), target.shape(), "mse");
  if (pred.size() == 0) throw ShapeError("mse of empty tensors");
  return scale(sum_squares(sub(pred, target)), T(1) / static_cast<T>(pred.size()));
}

/// Mean over the last axis: (N, C, L) -> (N, C); generally (..., L) -> (...).
template <typename T>
Tensor<T> mean_last(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("mean_last expects rank >= 2, got " + shape_str(x.shape()));
  const Index len = x.shape().back();
  if (len == 0) throw ShapeError("global average pooling over zero-length axis");
  Shape os(x.shape().begin(), x.shape().end() - 1);
  auto out = detail::make_output<T>(os);
  const Index rows = out.size();
  for (Index r = 0; r < rows; ++r) {
    T acc = 0;
    const T* p = x.ptr() + r * len;
    for (Index i = 0; i < len; ++i) acc += p[i];
    out.ptr()[r] = acc / static_cast<T>(len);
  }
  Node<T>* xn = x.node();
  detail::attach(out, {&x}, [xn, rows, len](Node<T>& self) {
    T* g = xn->grad_data();
    const T inv = T(1) / static_cast<T>(len);
    for (Index r = 0; r < rows; ++r) {
      const T gy = self.grad[r] * inv;
      for (Index i = 0; i < len; ++i) g[r * len + i] += gy;
    }
  });
  return out;
}

// ---------------------------------------------------------------- shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto out = Tensor<T>::from(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  Node<T>* xn = x.node();
  detail::attach(out, {&x}, [xn](Node<T>& self) {
    T* g = xn->grad_data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
  return out;
}

/// General axis permutation for rank <= 4.
template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::vector<int> perm) {
  const auto r = x.rank();
  if (perm.size() != r || r > 4) throw ShapeError("permute: bad permutation for " + shape_str(x.shape()));
  Shape in(4, 1), os(r);
  for (std::size_t i = 0; i < r; ++i) in[4 - r + i] = x.shape()[i];
  for (std::size_t i = 0; i < r; ++i) os[i] = x.shape().at(static_cast<std::size_t>(perm[i]));
  // Pad to rank 4 by prepending unit axes.
  std::vector<int> p4(4);
  const int pad = static_cast<int>(4 - r);
  for (int i = 0; i < pad; ++i) p4[i] = i;
  for (std::size_t i = 0; i < r; ++i) p4[pad + i] = perm[i] + pad;
  Index in_stride[4];
  in_stride[3] = 1;
  for (int i = 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * in[i + 1];
  Index out_dims[4], src_stride[4];
  for (int i = 0; i < 4; ++i) {
    out_dims[i] = in[p4[i]];
    src_stride[i] = in_stride[p4[i]];
  }
  auto out = detail::make_output<T>(os);
  auto map_index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(x.size()));
  Index o = 0;
  for (Index a = 0; a < out_dims[0]; ++a)
    for (Index b = 0; b < out_dims[1]; ++b)
      for (Index c = 0; c < out_dims[2]; ++c)
        for (Index d = 0; d < out_dims[3]; ++d) {
          const Index s = a * src_stride[0] + b * src_stride[1] + c * src_stride[2] + d * src_stride[3];
          (*map_index)[o] = s;
          out.ptr()[o++] = x.ptr()[s];
        }
  Node<T>* xn = x.node();
  detail::attach(out, {&x}, [xn, map_index](Node<T>& self) {
    T* g = xn->grad_data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*map_index)[i]] += self.grad[i];
  });
  return out;
}

/// Concatenation along `axis`.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat of nothing");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat axis out of range for " + shape_str(s0));
  Index outer = 1, inner = 1, total = 0;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
    if (!ok) throw ShapeError("concat: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    total += s[axis];
  }
  Shape os = s0;
  os[axis] = total;
  auto out = detail::make_output<T>(os);
  std::vector<Index> widths;
  for (const auto& x : xs) widths.push_back(x.shape()[axis] * inner);
  const Index row = total * inner;
  Index off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (Index o = 0; o < outer; ++o)
      std::copy_n(xs[k].ptr() + o * widths[k], widths[k], out.ptr() + o * row + off);
    off += widths[k];
  }
  std::vector<Node<T>*> nodes;
  for (const auto& x : xs) nodes.push_back(x.node());
  detail::attach(out, xs, [nodes, widths, outer, row](Node<T>& self) {
    Index off = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (nodes[k]->requires_grad) {
        T* g = nodes[k]->grad_data();
        for (Index o = 0; o < outer; ++o)
          for (Index i = 0; i < widths[k]; ++i) g[o * widths[k] + i] += self.grad[o * row + off + i];
      }
      off += widths[k];
    }
  });
  return out;
}

/// Rows [begin, end) along the leading axis.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, Index begin, Index end) {
  if (x.rank() == 0 || begin < 0 || end > x.dim(0) || begin > end)
    throw ShapeError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                     shape_str(x.shape()));
  Shape os = x.shape();
  os[0] = end - begin;
  const Index stride = x.dim(0) ? x.size() / x.dim(0) : 0;
  auto out = detail::make_output<T>(os);
  std::copy_n(x.ptr() + begin * stride, (end - begin) * stride, out.ptr());
  Node<T>* xn = x.node();
  detail::attach(out, {&x}, [xn, begin, stride](Node<T>& self) {
    T* g = xn->grad_data() + begin * stride;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
  return out;
}

// ---------------------------------------------------------------- channel broadcasts

/// x: (N, C, L), v: (N, C) -> x + v broadcast over L.
template <typename T>
Tensor<T> add_channel(const Tensor<T>& x, const Tensor<T>& v) {
  detail::require_rank(x.shape(), 3, "add_channel");
  if (v.shape() != Shape{x.dim(0), x.dim(1)})
    throw ShapeError("add_channel: " + shape_str(v.shape()) + " does not broadcast onto " + shape_str(x.shape()));
  const Index rows = x.dim(0) * x.dim(1), len = x.dim(2);
  auto out = detail::make_output<T>(x.shape());
  for (Index r = 0; r < rows; ++r)
    for (Index i = 0; i < len; ++i) out.ptr()[r * len + i] = x.ptr()[r * len + i] + v.ptr()[r];
  Node<T>* xn = x.node();
  Node<T>* vn = v.node();
  detail::attach(out, {&x, &v}, [xn, vn, rows, len](Node<T>& self) {
    if (xn->requires_grad) {
      T* g = xn->grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (vn->requires_grad) {
      T* g = vn->grad_data();
      for (Index r = 0; r < rows; ++r) {
        T acc = 0;
        for (Index i = 0; i < len; ++i) acc += self.grad[r * len + i];
        g[r] += acc;
      }
    }
  });
  return out;
}

/// x: (N, C, L), g: (N, C) -> x * g broadcast over L.
template <typename T>
Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& gate) {
  detail::require_rank(x.shape(), 3, "mul_channel");
  if (gate.shape() != Shape{x.dim(0), x.dim(1)})
    throw ShapeError("mul_channel: " + shape_str(gate.shape()) + " does not broadcast onto " +
                     shape_str(x.shape()));
  const Index rows = x.dim(0) * x.dim(1), len = x.dim(2);
  auto out = detail::make_output<T>(x.shape());
  for (Index r = 0; r < rows; ++r)
    for (Index i = 0; i < len; ++i) out.ptr()[r * len + i] = x.ptr()[r * len + i] * gate.ptr()[r];
  Node<T>* xn = x.node();
  Node<T>* gn = gate.node();
  detail::attach(out, {&x, &gate}, [xn, gn, rows, len](Node<T>& self) {
    if (xn->requires_grad) {
      T* g = xn->grad_data();
      for (Index r = 0; r < rows; ++r)
        for (Index i = 0; i < len; ++i) g[r * len + i] += self.grad[r * len + i] * gn->value[r];
    }
    if (gn->requires_grad) {
      T* g = gn->grad_data();
      for (Index r = 0; r < rows; ++r) {
        T acc = 0;
        for (Index i = 0; i < len; ++i) acc += self.grad[r * len + i] * xn->value[r * len + i];
        g[r] += acc;
      }
    }
  });
  return out;
}

/// sum_k weights[:, k] * xs[k], each xs[k] shaped (N, ...), weights (N, K).
template <typename T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& xs, const Tensor<T>& weights) {
  if (xs.empty()) throw ShapeError("weighted_sum of nothing");
  const Index n = xs[0].dim(0);
  const Index k = static_cast<Index>(xs.size());
  if (weights.shape() != Shape{n, k})
    throw ShapeError("weighted_sum: weights " + shape_str(weights.shape()) + " do not match " +
                     std::to_string(k) + " inputs of batch " + std::to_string(n));
  for (const auto& x : xs) detail::require_same_shape(x.shape(), xs[0].shape(), "weighted_sum");
  const Index per = n ? xs[0].size() / n : 0;
  auto out = detail::make_output<T>(xs[0].shape());
  for (Index j = 0; j < k; ++j)
    for (Index b = 0; b < n; ++b) {
      const T w = weights.ptr()[b * k + j];
      const T* src = xs[j].ptr() + b * per;
      T* dst = out.ptr() + b * per;
      for (Index i = 0; i < per; ++i) dst[i] += w * src[i];
    }
  std::vector<Tensor<T>> inputs = xs;
  inputs.push_back(weights);
  std::vector<Node<T>*> nodes;
  for (const auto& x : xs) nodes.push_back(x.node());
  Node<T>* wn = weights.node();
  detail::attach(out, inputs, [nodes, wn, n, k, per](Node<T>& self) {
    for (Index j = 0; j < k; ++j) {
      Node<T>* xn = nodes[j];
      if (xn->requires_grad) {
        T* g = xn->grad_data();
        for (Index b = 0; b < n; ++b) {
          const T w = wn->value[b * k + j];
          for (Index i = 0; i < per; ++i) g[b * per + i] += w * self.grad[b * per + i];
        }
      }
      if (wn->requires_grad) {
        T* g = wn->grad_data();
        for (Index b = 0; b < n; ++b) {
          T acc = 0;
          for (Index i = 0; i < per; ++i) acc += self.grad[b * per + i] * xn->value[b * per + i];
          g[b * k + j] += acc;
        }
      }
    }
  });
  return out;
}

/// Nearest-neighbour upsampling along the last axis.
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, Index factor = 2) {
  detail::require_rank(x.shape(), 3, "upsample_nearest");
  const Index rows = x.dim(0) * x.dim(1), len = x.dim(2);
  auto out = detail::make_output<T>({x.dim(0), x.dim(1), len * factor});
  for (Index r = 0; r < rows; ++r)
    for (Index i = 0; i < len * factor; ++i) out.ptr()[r * len * factor + i] = x.ptr()[r * len + i / factor];
  Node<T>* xn = x.node();
  detail::attach(out, {&x}, [xn, rows, len, factor](Node<T>& self) {
    T* g = xn->grad_data();
    for (Index r = 0; r < rows; ++r)
      for (Index i = 0; i < len * factor; ++i) g[r * len + i / factor] += self.grad[r * len * factor + i];
  });
  return out;
}

// ---------------------------------------------------------------- softmax & losses

/// Softmax over the last axis with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() == 0) throw ShapeError("softmax of a rank-0 tensor");
  const Index k = x.shape().back();
  const Index rows = k ? x.size() / k : 0;
  auto out = detail::make_output<T>(x.shape());
  for (Index r = 0; r < rows; ++r) {
    const auto in = detail::carr(x.ptr() + r * k, k);
    auto o = detail::arr(out.ptr() + r * k, k);
    o = (in - in.maxCoeff()).exp();
    o /= o.sum();
  }
  Node<T>* xn = x.node();
  detail::attach(out, {&x}, [xn, rows, k](Node<T>& self) {
    T* g = xn->grad_data();
    for (Index r = 0; r < rows; ++r) {
      const auto y = detail::carr(self.value.data() + r * k, k);
      const auto gy = detail::carr(self.grad.data() + r * k, k);
      const T dot = (gy * y).sum();
      detail::arr(g + r * k, k) += y * (gy - dot);
    }
  });
  return out;
}

/// Mean cross-entropy of raw logits (N, K) against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  detail::require_rank(logits.shape(), 2, "cross_entropy");
  const Index n = logits.dim(0), k = logits.dim(1);
  if (static_cast<Index>(labels.size()) != n)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  if (n == 0) throw ShapeError("cross_entropy over an empty batch");
  for (int y : labels)
    if (y < 0 || y >= k)
      throw ConfigError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
  auto probs = std::make_shared<Buffer<T>>(static_cast<std::size_t>(n * k));
  T loss = 0;
  for (Index r = 0; r < n; ++r) {
    const T* in = logits.ptr() + r * k;
    const T mx = *std::max_element(in, in + k);
    T z = 0;
    for (Index i = 0; i < k; ++i) z += ((*probs)[r * k + i] = std::exp(in[i] - mx));
    for (Index i = 0; i < k; ++i) (*probs)[r * k + i] /= z;
    loss += (mx + std::log(z)) - in[labels[r]];
  }
  auto out = Tensor<T>::scalar(loss / static_cast<T>(n));
  Node<T>* ln = logits.node();
  std::vector<int> ys(labels.begin(), labels.end());
  detail::attach(out, {&logits}, [ln, probs, ys, n, k](Node<T>& self) {
    T* g = ln->grad_data();
    const T s = self.grad[0] / static_cast<T>(n);
    for (Index r = 0; r < n; ++r)
      for (Index i = 0; i < k; ++i)
        g[r * k + i] += s * ((*probs)[r * k + i] - (i == ys[r] ? T(1) : T(0)));
  });
  return out;
}

// ---------------------------------------------------------------- dense algebra

/// x (..., in) * W^T + b with W (out, in) and optional b (out).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* b = nullptr) {
  detail::require_rank(w.shape(), 2, "linear weight");
  const Index out_f = w.dim(0), in_f = w.dim(1);
  if (x.rank() == 0 || x.shape().back() != in_f)
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  if (b && b->shape() != Shape{out_f})
    throw ShapeError("linear: bias " + shape_str(b->shape()) + " for weight " + shape_str(w.shape()));
  const Index rows = in_f ? x.size() / in_f : 0;
  Shape os = x.shape();
  os.back() = out_f;
  auto out = detail::make_output<T>(os);
  {
    detail::CMatMap<T> X(x.ptr(), rows, in_f);
    detail::CMatMap<T> W(w.ptr(), out_f, in_f);
    detail::MatMap<T> Y(out.ptr(), rows, out_f);
    Y.noalias() = X * W.transpose();
    if (b) Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->ptr(), out_f);
  }
  count_macs(static_cast<std::uint64_t>(rows * in_f * out_f));
  Node<T>* xn = x.node();
  Node<T>* wn = w.node();
  Node<T>* bn = b ? b->node() : nullptr;
  auto backward_fn = [xn, wn, bn, rows, in_f, out_f](Node<T>& self) {
    detail::CMatMap<T> G(self.grad.data(), rows, out_f);
    if (xn->requires_grad) {
      detail::MatMap<T> GX(xn->grad_data(), rows, in_f);
      GX.noalias() += G * detail::CMatMap<T>(wn->value.data(), out_f, in_f);
    }
    if (wn->requires_grad) {
      detail::MatMap<T> GW(wn->grad_data(), out_f, in_f);
      GW.noalias() += G.transpose() * detail::CMatMap<T>(xn->value.data(), rows, in_f);
    }
    if (bn && bn->requires_grad) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> GB(bn->grad_data(), out_f);
      GB += G.colwise().sum();
    }
  };
  if (b)
    detail::attach(out, {&x, &w, b}, backward_fn);
  else
    detail::attach(out, {&x, &w}, backward_fn);
  return out;
}

/// Batched product of (B, m, k) with (B, k, n), or with (B, n, k)^T when
/// `transpose_b` is set.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  detail::require_rank(a.shape(), 3, "bmm lhs");
  detail::require_rank(b.shape(), 3, "bmm rhs");
  const Index batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const Index n = transpose_b ? b.dim(1) : b.dim(2);
  const Index bk = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != batch || bk != k)
    throw ShapeError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                     (transpose_b ? "^T" : "") + " do not compose");
  auto out = detail::make_output<T>({batch, m, n});
  for (Index i = 0; i < batch; ++i) {
    detail::CMatMap<T> A(a.ptr() + i * m * k, m, k);
    detail::MatMap<T> C(out.ptr() + i * m * n, m, n);
    if (transpose_b)
      C.noalias() = A * detail::CMatMap<T>(b.ptr() + i * n * k, n, k).transpose();
    else
      C.noalias() = A * detail::CMatMap<T>(b.ptr() + i * k * n, k, n);
  }
  count_macs(static_cast<std::uint64_t>(batch * m * n * k));
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  detail::attach(out, {&a, &b}, [an, bn, batch, m, n, k, transpose_b](Node<T>& self) {
    for (Index i = 0; i < batch; ++i) {
      detail::CMatMap<T> G(self.grad.data() + i * m * n, m, n);
      detail::CMatMap<T> A(an->value.data() + i * m * k, m, k);
      if (transpose_b) {
        detail::CMatMap<T> B(bn->value.data() + i * n * k, n, k);
        if (an->requires_grad) detail::MatMap<T>(an->grad_data() + i * m * k, m, k).noalias() += G * B;
        if (bn->requires_grad) detail::MatMap<T>(bn->grad_data() + i * n * k, n, k).noalias() += G.transpose() * A;
      } else {
        detail::CMatMap<T> B(bn->value.data() + i * k * n, k, n);
        if (an->requires_grad)
          detail::MatMap<T>(an->grad_data() + i * m * k, m, k).noalias() += G * B.transpose();
        if (bn->requires_grad) detail::MatMap<T>(bn->grad_data() + i * k * n, k, n).noalias() += A.transpose() * G;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------- convolution

/// Output length of a "same"-padded strided convolution.
constexpr Index conv_out_len(Index len, Index stride) { return (len + stride - 1) / stride; }

namespace detail {
// Output positions o in [first, second) whose tap o*stride+shift lands inside [0, len).
inline std::pair<Index, Index> valid_taps(Index shift, Index stride, Index len, Index lo) {
  Index o0 = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
  Index o1 = len - 1 - shift < 0 ? 0 : (len - 1 - shift) / stride + 1;
  o1 = std::min(o1, lo);
  return {std::min(o0, o1), o1};
}
}  // namespace detail

/// 1-D convolution, x (N, Cin, L), w (Cout, Cin, k), optional bias (Cout).
/// Symmetric zero padding of (k-1)*dilation/2 gives ceil(L/stride) outputs.
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* b, Index stride = 1,
                 Index dilation = 1) {
  detail::require_rank(x.shape(), 3, "conv1d input");
  detail::require_rank(w.shape(), 3, "conv1d weight");
  const Index n = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const Index cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin)
    throw ShapeError("conv1d: input " + shape_str(x.shape()) + " has " + std::to_string(cin) +
                     " channels but weight " + shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)));
  if (k % 2 == 0) throw ConfigError("conv1d: kernel size must be odd, got " + std::to_string(k));
  if (stride < 1 || dilation < 1) throw ConfigError("conv1d: stride and dilation must be >= 1");
  if (b && b->shape() != Shape{cout}) throw ShapeError("conv1d: bias " + shape_str(b->shape()));
  const Index pad = (k - 1) * dilation / 2;
  const Index lo = conv_out_len(len, stride);
  const Index rows = cin * k, cols = n * lo;

  auto col = std::make_shared<Buffer<T>>(static_cast<std::size_t>(rows * cols), T(0));
  for (Index s = 0; s < n; ++s)
    for (Index c = 0; c < cin; ++c) {
      const T* xs = x.ptr() + (s * cin + c) * len;
      for (Index j = 0; j < k; ++j) {
        T* dst = col->data() + (c * k + j) * cols + s * lo;
        const Index shift = j * dilation - pad;
        const auto [o0, o1] = detail::valid_taps(shift, stride, len, lo);
        const T* src = xs + o0 * stride + shift;
        if (stride == 1)
          std::copy(src, src + (o1 - o0), dst + o0);
        else
          for (Index o = o0; o < o1; ++o) dst[o] = src[(o - o0) * stride];
      }
    }
  detail::RowMat<T> y(cout, cols);
  y.noalias() = detail::CMatMap<T>(w.ptr(), cout, rows) * detail::CMatMap<T>(col->data(), rows, cols);
  auto out = detail::make_output<T>({n, cout, lo});
  for (Index s = 0; s < n; ++s)
    for (Index c = 0; c < cout; ++c) {
      const T bias = b ? b->ptr()[c] : T(0);
      const T* src = y.data() + c * cols + s * lo;
      T* dst = out.ptr() + (s * cout + c) * lo;
      for (Index o = 0; o < lo; ++o) dst[o] = src[o] + bias;
    }
  count_macs(static_cast<std::uint64_t>(cout * rows * cols));

  Node<T>* xn = x.node();
  Node<T>* wn = w.node();
  Node<T>* bn = b ? b->node() : nullptr;
  auto backward_fn = [=](Node<T>& self) {
    detail::RowMat<T> gy(cout, cols);
    for (Index s = 0; s < n; ++s)
      for (Index c = 0; c < cout; ++c)
        std::copy_n(self.grad.data() + (s * cout + c) * lo, lo, gy.data() + c * cols + s * lo);
    if (wn->requires_grad)
      detail::MatMap<T>(wn->grad_data(), cout, rows).noalias() +=
          gy * detail::CMatMap<T>(col->data(), rows, cols).transpose();
    if (bn && bn->requires_grad) {
      T* gb = bn->grad_data();
      for (Index c = 0; c < cout; ++c) gb[c] += gy.row(c).sum();
    }
    if (xn->requires_grad) {
      detail::RowMat<T> gcol(rows, cols);
      gcol.noalias() = detail::CMatMap<T>(wn->value.data(), cout, rows).transpose() * gy;
      T* gx = xn->grad_data();
      for (Index s = 0; s < n; ++s)
        for (Index c = 0; c < cin; ++c) {
          T* gxs = gx + (s * cin + c) * len;
          for (Index j = 0; j < k; ++j) {
            const T* src = gcol.data() + (c * k + j) * cols + s * lo;
            const Index shift = j * dilation - pad;
            const auto [o0, o1] = detail::valid_taps(shift, stride, len, lo);
            T* dst = gxs + o0 * stride + shift;
            if (stride == 1)
              detail::arr(dst, o1 - o0) += detail::carr(src + o0, o1 - o0);
            else
              for (Index o = o0; o < o1; ++o) dst[(o - o0) * stride] += src[o];
          }
        }
    }
  };
  if (b)
    detail::attach(out, {&x, &w, b}, backward_fn);
  else
    detail::attach(out, {&x, &w}, backward_fn);
  return out;
}

// ---------------------------------------------------------------- batch norm

/// Per-channel batch normalisation over (N, C, L) or (N, C). In training mode
/// batch statistics are used and the running buffers are updated in place.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, std::span<T> running_mean,
                     std::span<T> running_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  if (x.rank() != 2 && x.rank() != 3) throw ShapeError("batch_norm expects (N,C) or (N,C,L), got " + shape_str(x.shape()));
  const Index n = x.dim(0), c = x.dim(1), len = x.rank() == 3 ? x.dim(2) : 1;
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c} || static_cast<Index>(running_mean.size()) != c ||
      static_cast<Index>(running_var.size()) != c)
    throw ShapeError("batch_norm: parameters do not match " + std::to_string(c) + " channels");
  if (training && n < 2)
    throw ConfigError("batch_norm: training mode needs a batch of at least 2; use eval mode for single samples");
  const Index m = n * len;
  auto out = detail::make_output<T>(x.shape());
  auto xhat = std::make_shared<Buffer<T>>(static_cast<std::size_t>(x.size()));
  auto invstd = std::make_shared<Buffer<T>>(static_cast<std::size_t>(c));
  for (Index ch = 0; ch < c; ++ch) {
    T mu, var;
    if (training) {
      double acc = 0;
      for (Index s = 0; s < n; ++s) acc += detail::carr(x.ptr() + (s * c + ch) * len, len).template cast<double>().sum();
      const double mu_d = acc / static_cast<double>(m);
      double sq = 0;
      for (Index s = 0; s < n; ++s)
        sq += (detail::carr(x.ptr() + (s * c + ch) * len, len).template cast<double>() - mu_d).square().sum();
      mu = static_cast<T>(mu_d);
      var = static_cast<T>(sq / static_cast<double>(m));
      const T unbiased = m > 1 ? static_cast<T>(sq / static_cast<double>(m - 1)) : var;
      running_mean[ch] = (T(1) - momentum) * running_mean[ch] + momentum * mu;
      running_var[ch] = (T(1) - momentum) * running_var[ch] + momentum * unbiased;
    } else {
      mu = running_mean[ch];
      var = running_var[ch];
    }
    const T inv = T(1) / std::sqrt(var + eps);
    (*invstd)[ch] = inv;
    const T g = gamma.ptr()[ch], bt = beta.ptr()[ch];
    for (Index s = 0; s < n; ++s) {
      const Index off = (s * c + ch) * len;
      auto h = detail::arr(xhat->data() + off, len);
      h = (detail::carr(x.ptr() + off, len) - mu) * inv;
      detail::arr(out.ptr() + off, len) = g * h + bt;
    }
  }
  Node<T>* xn = x.node();
  Node<T>* gn = gamma.node();
  Node<T>* bn = beta.node();
  detail::attach(out, {&x, &gamma, &beta}, [=](Node<T>& self) {
    const T* gy = self.grad.data();
    for (Index ch = 0; ch < c; ++ch) {
      T sum_g = 0, sum_gh = 0;
      for (Index s = 0; s < n; ++s) {
        const Index off = (s * c + ch) * len;
        auto g_row = detail::carr(gy + off, len);
        sum_g += g_row.sum();
        sum_gh += (g_row * detail::carr(xhat->data() + off, len)).sum();
      }
      if (bn->requires_grad) bn->grad_data()[ch] += sum_g;
      if (gn->requires_grad) gn->grad_data()[ch] += sum_gh;
      if (xn->requires_grad) {
        T* gx = xn->grad_data();
        const T g = gn->value[ch], inv = (*invstd)[ch];
        const T mt = static_cast<T>(m);
        for (Index s = 0; s < n; ++s) {
          const Index off = (s * c + ch) * len;
          auto dst = detail::arr(gx + off, len);
          auto g_row = detail::carr(gy + off, len);
          if (training)
            dst += (g * inv / mt) * (mt * g_row - sum_g - detail::carr(xhat->data() + off, len) * sum_gh);
          else
            dst += g_row * (g * inv);
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------- recurrent

/// One GRU layer over x (N, T, I) with zero initial state. Gate order (r, z, n):
///   r = sigma(W_ir x + b_ir + W_hr h + b_hr)
///   z = sigma(W_iz x + b_iz + W_hz h + b_hz)
///   n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
///   h' = (1 - z) * n + z * h
/// w_ih (3H, I), w_hh (3H, H), b_ih and b_hh (3H). Returns (N, T, H).
template <typename T>
Tensor<T> gru_layer(const Tensor<T>& x, const Tensor<T>& w_ih, const Tensor<T>& w_hh, const Tensor<T>& b_ih,
                    const Tensor<T>& b_hh) {
  detail::require_rank(x.shape(), 3, "gru_layer input");
  const Index n = x.dim(0), steps = x.dim(1), in = x.dim(2);
  const Index h3 = w_ih.dim(0), hid = h3 / 3;
  if (w_ih.shape() != Shape{3 * hid, in} || w_hh.shape() != Shape{3 * hid, hid} || b_ih.shape() != Shape{3 * hid} ||
      b_hh.shape() != Shape{3 * hid})
    throw ShapeError("gru_layer: input " + shape_str(x.shape()) + " incompatible with weights " +
                     shape_str(w_ih.shape()) + " / " + shape_str(w_hh.shape()));
  auto out = detail::make_output<T>({n, steps, hid});
  if (n == 0 || steps == 0) return out;

  // Input projections for every step at once.
  auto gi = std::make_shared<detail::RowMat<T>>(n * steps, h3);
  gi->noalias() = detail::CMatMap<T>(x.ptr(), n * steps, in) * detail::CMatMap<T>(w_ih.ptr(), h3, in).transpose();
  gi->rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b_ih.ptr(), h3);

  const std::size_t cache = static_cast<std::size_t>(n * steps * hid);
  auto r_c = std::make_shared<Buffer<T>>(cache);
  auto z_c = std::make_shared<Buffer<T>>(cache);
  auto n_c = std::make_shared<Buffer<T>>(cache);
  auto ghn_c = std::make_shared<Buffer<T>>(cache);

  detail::RowMat<T> h = detail::RowMat<T>::Zero(n, hid);
  detail::RowMat<T> gh(n, h3);
  detail::CMatMap<T> whh(w_hh.ptr(), h3, hid);
  const Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bhh(b_hh.ptr(), h3);
  for (Index t = 0; t < steps; ++t) {
    gh.noalias() = h * whh.transpose();
    gh.rowwise() += bhh;
    for (Index s = 0; s < n; ++s) {
      const T* gis = gi->data() + (s * steps + t) * h3;
      const T* ghs = gh.data() + s * h3;
      const Index base = (s * steps + t) * hid;
      for (Index j = 0; j < hid; ++j) {
        const T r = T(1) / (T(1) + std::exp(-(gis[j] + ghs[j])));
        const T z = T(1) / (T(1) + std::exp(-(gis[hid + j] + ghs[hid + j])));
        const T cand = std::tanh(gis[2 * hid + j] + r * ghs[2 * hid + j]);
        const T hn = (T(1) - z) * cand + z * h(s, j);
        (*r_c)[base + j] = r;
        (*z_c)[base + j] = z;
        (*n_c)[base + j] = cand;
        (*ghn_c)[base + j] = ghs[2 * hid + j];
        out.ptr()[base + j] = hn;
      }
    }
    for (Index s = 0; s < n; ++s)
      for (Index j = 0; j < hid; ++j) h(s, j) = out.ptr()[(s * steps + t) * hid + j];
  }
  count_macs(static_cast<std::uint64_t>(n * steps * h3 * (in + hid)));

  Node<T>* xn = x.node();
  Node<T>* wihn = w_ih.node();
  Node<T>* whhn = w_hh.node();
  Node<T>* bihn = b_ih.node();
  Node<T>* bhhn = b_hh.node();
  detail::attach(out, {&x, &w_ih, &w_hh, &b_ih, &b_hh}, [=](Node<T>& self) {
    detail::RowMat<T> dgi(n * steps, h3);
    detail::RowMat<T> dgh(n, h3);
    detail::RowMat<T> dh = detail::RowMat<T>::Zero(n, hid);
    detail::RowMat<T> hprev(n, hid);
    detail::CMatMap<T> whh(whhn->value.data(), h3, hid);
    const T* hs = self.value.data();
    for (Index t = steps - 1; t >= 0; --t) {
      for (Index s = 0; s < n; ++s)
        for (Index j = 0; j < hid; ++j) {
          dh(s, j) += self.grad[(s * steps + t) * hid + j];
          hprev(s, j) = t > 0 ? hs[(s * steps + t - 1) * hid + j] : T(0);
        }
      for (Index s = 0; s < n; ++s) {
        const Index base = (s * steps + t) * hid;
        T* dgis = dgi.data() + (s * steps + t) * h3;
        T* dghs = dgh.data() + s * h3;
        for (Index j = 0; j < hid; ++j) {
          const T r = (*r_c)[base + j], z = (*z_c)[base + j], cand = (*n_c)[base + j];
          const T g = dh(s, j);
          const T dcand = g * (T(1) - z) * (T(1) - cand * cand);
          const T dz = g * (hprev(s, j) - cand) * z * (T(1) - z);
          const T dr = dcand * (*ghn_c)[base + j] * r * (T(1) - r);
          dgis[j] = dr;
          dgis[hid + j] = dz;
          dgis[2 * hid + j] = dcand;
          dghs[j] = dr;
          dghs[hid + j] = dz;
          dghs[2 * hid + j] = dcand * r;
          dh(s, j) = g * z;
        }
      }
      if (whhn->requires_grad)
        detail::MatMap<T>(whhn->grad_data(), h3, hid).noalias() += dgh.transpose() * hprev;
      if (bhhn->requires_grad) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bhhn->grad_data(), h3) += dgh.colwise().sum();
      }
      dh.noalias() += dgh * whh;
    }
    if (xn->requires_grad)
      detail::MatMap<T>(xn->grad_data(), n * steps, in).noalias() +=
          dgi * detail::CMatMap<T>(wihn->value.data(), h3, in);
    if (wihn->requires_grad)
      detail::MatMap<T>(wihn->grad_data(), h3, in).noalias() +=
          dgi.transpose() * detail::CMatMap<T>(xn->value.data(), n * steps, in);
    if (bihn->requires_grad)
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bihn->grad_data(), h3) += dgi.colwise().sum();
  });
  return out;
}

}  // namespace ecglab
