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

// Checkpoint container shared by every model:
//
//   [u64 little-endian header length][JSON header][f32 little-endian blob]
//
// The header is {"tensors": [{name, shape, dtype: "f32", offset, length}],
// "meta": {...}} where offset and length are byte counts relative to the
// start of the blob.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ecglab/optim.hpp"

namespace ecglab {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedArray> tensors;

  const NamedArray* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

/// Writes via a temporary file and rename so readers never see partial files.
inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    if (static_cast<Index>(t.values.size()) != numel(t.shape))
      throw ShapeError("checkpoint tensor '" + t.name + "' has " + std::to_string(t.values.size()) +
                       " values for shape " + shape_str(t.shape));
    const std::uint64_t bytes = t.values.size() * sizeof(float);
    header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"dtype", "f32"}, {"offset", offset}, {"length", bytes}});
    offset += bytes;
  }
  header["meta"] = ckpt.meta;
  const std::string text = header.dump();
  const std::uint64_t len = text.size();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataIntegrityError("cannot open '" + tmp.string() + "' for writing");
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : ckpt.tensors)
      os.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * sizeof(float)));
    if (!os) throw DataIntegrityError("short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataIntegrityError("cannot open checkpoint '" + path.string() + "'");
  const auto file_size = std::filesystem::file_size(path);
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!is || len > file_size - sizeof(len)) throw DataIntegrityError("checkpoint '" + path.string() + "': bad header length");
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataIntegrityError("checkpoint '" + path.string() + "': malformed header: " + e.what());
  }
  const std::uint64_t blob_start = sizeof(len) + len;
  const std::uint64_t blob_size = file_size - blob_start;
  Checkpoint ckpt;
  ckpt.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    NamedArray t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<Shape>();
    if (entry.at("dtype") != "f32") throw DataIntegrityError("tensor '" + t.name + "': unsupported dtype");
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto bytes = entry.at("length").get<std::uint64_t>();
    if (bytes != static_cast<std::uint64_t>(numel(t.shape)) * sizeof(float) || offset + bytes > blob_size)
      throw DataIntegrityError("checkpoint tensor '" + t.name + "' is inconsistent with its shape or the file size");
    t.values.resize(bytes / sizeof(float));
    is.seekg(static_cast<std::streamoff>(blob_start + offset));
    is.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(bytes));
    if (!is) throw DataIntegrityError("checkpoint tensor '" + t.name + "': short read");
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

template <typename T>
void export_params(Checkpoint& ckpt, const ParamSet<T>& params) {
  for (const auto& p : params)
    ckpt.tensors.push_back({p.name, p.tensor.shape(), std::vector<float>(p.tensor.data().begin(), p.tensor.data().end())});
}

/// Copies every model tensor from the checkpoint; missing names or shape
/// mismatches are errors.
template <typename T>
void import_params(const Checkpoint& ckpt, ParamSet<T>& params) {
  for (auto& p : params) {
    const auto* src = ckpt.find(p.name);
    if (!src) throw DataIntegrityError("checkpoint is missing tensor '" + p.name + "'");
    if (src->shape != p.tensor.shape())
      throw ShapeError("checkpoint tensor '" + p.name + "' has shape " + shape_str(src->shape) + ", model expects " +
                       shape_str(p.tensor.shape()));
    auto dst = p.tensor.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src->values[i]);
  }
}

template <typename T>
void export_adam(Checkpoint& ckpt, const Adam<T>& adam) {
  ckpt.meta["adam"] = {{"step", adam.steps()},
                       {"lr", adam.options.lr},
                       {"beta1", adam.options.beta1},
                       {"beta2", adam.options.beta2},
                       {"eps", adam.options.eps}};
  for (const auto& s : adam.slots()) {
    ckpt.tensors.push_back({"adam.m." + s.name, s.param.shape(), std::vector<float>(s.m.begin(), s.m.end())});
    ckpt.tensors.push_back({"adam.v." + s.name, s.param.shape(), std::vector<float>(s.v.begin(), s.v.end())});
  }
}

template <typename T>
void import_adam(const Checkpoint& ckpt, Adam<T>& adam) {
  if (!ckpt.meta.contains("adam")) throw DataIntegrityError("checkpoint has no optimizer state");
  const auto& a = ckpt.meta["adam"];
  adam.set_steps(a.at("step").get<std::int64_t>());
  adam.options.lr = a.at("lr").get<double>();
  adam.options.beta1 = a.at("beta1").get<double>();
  adam.options.beta2 = a.at("beta2").get<double>();
  adam.options.eps = a.at("eps").get<double>();
  for (auto& s : adam.slots()) {
    const auto* m = ckpt.find("adam.m." + s.name);
    const auto* v = ckpt.find("adam.v." + s.name);
    if (!m || !v) throw DataIntegrityError("checkpoint is missing optimizer moments for '" + s.name + "'");
    if (m->values.size() != s.m.size() || v->values.size() != s.v.size())
      throw ShapeError("optimizer moments for '" + s.name + "' have the wrong size");
    for (std::size_t i = 0; i < s.m.size(); ++i) {
      s.m[i] = static_cast<T>(m->values[i]);
      s.v[i] = static_cast<T>(v->values[i]);
    }
  }
}

inline nlohmann::json to_json(const PlateauScheduler& s) {
  return {{"lr", s.lr}, {"factor", s.factor}, {"patience", s.patience}, {"best", s.best}, {"bad_epochs", s.bad_epochs}};
}

inline PlateauScheduler plateau_from_json(const nlohmann::json& j) {
  PlateauScheduler s;
  s.lr = j.at("lr").get<double>();
  s.factor = j.at("factor").get<double>();
  s.patience = j.at("patience").get<int>();
  s.best = j.at("best").is_null() ? std::numeric_limits<double>::infinity() : j.at("best").get<double>();
  s.bad_epochs = j.at("bad_epochs").get<int>();
  return s;
}

}  // namespace ecglab
