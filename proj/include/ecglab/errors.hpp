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

#include <atomic>
#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>

namespace ecglab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not compose (channel mismatch, bad concat, ...).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyper-parameters or model configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data (bad files, tampered shards).
class DataIntegrityError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values during training or optimisation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Operation invoked in the wrong lifecycle state.
class StateError : public Error {
 public:
  using Error::Error;
};

// Warnings go to a process-wide sink. Tests swap the sink to observe them.
using WarningSink = std::function<void(const std::string&)>;

namespace detail {
inline std::mutex& warn_mutex() {
  static std::mutex m;
  return m;
}
inline WarningSink& warn_sink() {
  static WarningSink sink = [](const std::string& msg) { std::cerr << "ecglab warning: " << msg << '\n'; };
  return sink;
}
inline std::atomic<std::size_t>& warn_count() {
  static std::atomic<std::size_t> n{0};
  return n;
}
}  // namespace detail

inline void warn(const std::string& msg) {
  detail::warn_count().fetch_add(1);
  std::lock_guard<std::mutex> lock(detail::warn_mutex());
  if (detail::warn_sink()) detail::warn_sink()(msg);
}

/// Number of warnings emitted so far in this process.
inline std::size_t warning_count() { return detail::warn_count().load(); }

/// Replaces the warning sink, returning the previous one.
inline WarningSink set_warning_sink(WarningSink sink) {
  std::lock_guard<std::mutex> lock(detail::warn_mutex());
  auto old = std::move(detail::warn_sink());
  detail::warn_sink() = std::move(sink);
  return old;
}

}  // namespace ecglab
