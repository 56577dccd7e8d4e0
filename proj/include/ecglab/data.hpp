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

// Signal ingestion, segmentation, shard persistence and batch streams.

#pragma once

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ecglab/errors.hpp"
#include "ecglab/rng.hpp"
#include "ecglab/tensor.hpp"

namespace ecglab {

inline constexpr Index kSegmentLen = 512;
inline constexpr double kTargetRateHz = 250.0;

struct RawRecord {
  std::vector<double> samples;
  double rate_hz = kTargetRateHz;
  std::string lead_name;

  void validate() const {
    if (!(rate_hz > 0) || !std::isfinite(rate_hz))
      throw DataIntegrityError("record '" + lead_name + "': rate_hz must be positive");
    if (samples.empty()) throw DataIntegrityError("record '" + lead_name + "' has no samples");
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (!std::isfinite(samples[i]))
        throw DataIntegrityError("record '" + lead_name + "': non-finite sample at index " + std::to_string(i));
  }
};

struct Annotation {
  Index sample = 0;
  std::string label;
};
using AnnotationList = std::vector<Annotation>;

/// N fixed-length rows stored as raw float amplitudes.
struct SegmentSet {
  Index segment_len = kSegmentLen;
  double rate_hz = kTargetRateHz;
  std::vector<float> data;
  std::vector<int> labels;
  std::vector<std::string> class_names;

  Index size() const { return static_cast<Index>(labels.size()); }
  bool empty() const { return labels.empty(); }
  Index num_classes() const { return static_cast<Index>(class_names.size()); }

  std::span<const float> row(Index i) const {
    return {data.data() + i * segment_len, static_cast<std::size_t>(segment_len)};
  }
  std::span<float> row(Index i) { return {data.data() + i * segment_len, static_cast<std::size_t>(segment_len)}; }

  template <typename R>
  void push_back(const R& values, int label) {
    if (static_cast<Index>(std::size(values)) != segment_len)
      throw ShapeError("segment has " + std::to_string(std::size(values)) + " values, expected " +
                       std::to_string(segment_len));
    for (auto v : values) data.push_back(static_cast<float>(v));
    labels.push_back(label);
  }

  std::optional<int> class_index(const std::string& name) const {
    auto it = std::find(class_names.begin(), class_names.end(), name);
    if (it == class_names.end()) return std::nullopt;
    return static_cast<int>(it - class_names.begin());
  }

  /// Empty set sharing this set's class table and geometry.
  SegmentSet like() const {
    SegmentSet s;
    s.segment_len = segment_len;
    s.rate_hz = rate_hz;
    s.class_names = class_names;
    return s;
  }

  SegmentSet subset(std::span<const Index> rows) const {
    SegmentSet s = like();
    s.data.reserve(rows.size() * static_cast<std::size_t>(segment_len));
    for (Index r : rows) s.push_back(row(r), labels[r]);
    return s;
  }

  std::vector<Index> class_counts() const {
    std::vector<Index> counts(class_names.size(), 0);
    for (int l : labels) ++counts[l];
    return counts;
  }

  void validate() const {
    if (segment_len <= 0) throw DataIntegrityError("segment_len must be positive");
    if (static_cast<Index>(data.size()) != size() * segment_len)
      throw DataIntegrityError("segment data holds " + std::to_string(data.size()) + " values for " +
                               std::to_string(size()) + " rows of " + std::to_string(segment_len));
    for (int l : labels)
      if (l < 0 || l >= num_classes()) throw DataIntegrityError("label " + std::to_string(l) + " is outside the class table");
    for (std::size_t i = 0; i < data.size(); ++i)
      if (!std::isfinite(data[i]))
        throw DataIntegrityError("non-finite value in row " + std::to_string(static_cast<Index>(i) / segment_len));
  }
};

// ---------------------------------------------------------------- text inputs

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_real(const std::string& text, const std::string& where) {
  double v = 0;
  const auto* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end) throw DataIntegrityError(where + ": cannot parse '" + text + "' as a number");
  return v;
}

}  // namespace detail

/// Signal file: a `# rate_hz=<real>` header, then one amplitude per line.
inline RawRecord read_signal_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataIntegrityError("cannot open signal file '" + path.string() + "'");
  RawRecord rec;
  rec.lead_name = path.stem().string();
  bool have_rate = false;
  std::string line;
  for (Index lineno = 1; std::getline(is, line); ++lineno) {
    const std::string where = path.string() + ":" + std::to_string(lineno);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      const auto pos = t.find("rate_hz=");
      if (pos != std::string::npos) {
        rec.rate_hz = detail::parse_real(detail::trim(t.substr(pos + 8)), where);
        have_rate = true;
      }
      continue;
    }
    rec.samples.push_back(detail::parse_real(t, where));
  }
  if (!have_rate) throw DataIntegrityError(path.string() + ": missing '# rate_hz=' header");
  rec.validate();
  return rec;
}

inline void write_signal_file(const std::filesystem::path& path, const RawRecord& rec) {
  std::ofstream os(path);
  if (!os) throw DataIntegrityError("cannot write '" + path.string() + "'");
  os.precision(17);
  os << "# rate_hz=" << rec.rate_hz << "\n";
  for (double v : rec.samples) os << v << "\n";
}

/// Annotation file: `<sample_index>,<class_name>` per line; `#` starts a comment.
inline AnnotationList read_annotation_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataIntegrityError("cannot open annotation file '" + path.string() + "'");
  AnnotationList out;
  std::string line;
  for (Index lineno = 1; std::getline(is, line); ++lineno) {
    const std::string where = path.string() + ":" + std::to_string(lineno);
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto comma = t.find(',');
    if (comma == std::string::npos) throw DataIntegrityError(where + ": expected '<sample_index>,<class_name>'");
    const std::string idx = detail::trim(t.substr(0, comma));
    Annotation a;
    auto [p, ec] = std::from_chars(idx.data(), idx.data() + idx.size(), a.sample);
    if (ec != std::errc() || p != idx.data() + idx.size() || a.sample < 0)
      throw DataIntegrityError(where + ": bad sample index '" + idx + "'");
    a.label = detail::trim(t.substr(comma + 1));
    if (a.label.empty()) throw DataIntegrityError(where + ": empty class name");
    out.push_back(std::move(a));
  }
  return out;
}

// ---------------------------------------------------------------- signal ops

/// Linear interpolation onto round(n * target / rate) points spanning the same
/// interval, so the first and last samples are kept.
inline RawRecord resample(const RawRecord& rec, double target_hz) {
  rec.validate();
  if (!(target_hz > 0) || !std::isfinite(target_hz)) throw ConfigError("resample: target rate must be positive");
  RawRecord out;
  out.rate_hz = target_hz;
  out.lead_name = rec.lead_name;
  if (target_hz == rec.rate_hz) {
    out.samples = rec.samples;
    return out;
  }
  const auto n = static_cast<Index>(rec.samples.size());
  const auto m = static_cast<Index>(std::llround(static_cast<double>(n) * target_hz / rec.rate_hz));
  out.samples.resize(static_cast<std::size_t>(m));
  if (m == 0) return out;
  if (m == 1 || n == 1) {
    std::fill(out.samples.begin(), out.samples.end(), rec.samples.front());
    if (m > 1 && n > 1) out.samples.back() = rec.samples.back();
    return out;
  }
  const double step = static_cast<double>(n - 1) / static_cast<double>(m - 1);
  for (Index i = 0; i < m; ++i) {
    const double pos = static_cast<double>(i) * step;
    const auto lo = std::min(static_cast<Index>(pos), n - 2);
    const double frac = pos - static_cast<double>(lo);
    out.samples[i] = rec.samples[lo] + frac * (rec.samples[lo + 1] - rec.samples[lo]);
  }
  out.samples.back() = rec.samples.back();
  return out;
}

/// Moves event indices from a record of `n_in` samples onto the grid of its
/// resampled copy with `n_out` samples (same spanning interval as resample()).
inline AnnotationList resample_annotations(const AnnotationList& ann, Index n_in, Index n_out) {
  if (n_in <= 0 || n_out <= 0) throw ConfigError("resample_annotations: record lengths must be positive");
  AnnotationList out = ann;
  if (n_in == n_out) return out;
  const double scale = n_in > 1 ? static_cast<double>(n_out - 1) / static_cast<double>(n_in - 1) : 0.0;
  for (auto& a : out) {
    if (a.sample < 0 || a.sample >= n_in)
      throw DataIntegrityError("annotation at sample " + std::to_string(a.sample) + " lies beyond the record (" +
                               std::to_string(n_in) + " samples)");
    a.sample = std::min(n_out - 1, static_cast<Index>(std::llround(static_cast<double>(a.sample) * scale)));
  }
  return out;
}

struct SegmentReport {
  Index emitted = 0;
  Index skipped_edge = 0;     // window would cross a record boundary
  Index skipped_unknown = 0;  // label not in a fixed class table
};

/// One window [e - win/2, e + win/2) per event. With `classes` given the
/// table is fixed and unknown labels are skipped; otherwise it is built in
/// first-appearance order.
inline SegmentSet segment_events(const RawRecord& rec, const AnnotationList& ann, Index win = kSegmentLen,
                                 const std::vector<std::string>* classes = nullptr, SegmentReport* report = nullptr) {
  if (win <= 0 || win % 2 != 0) throw ConfigError("segment window must be a positive even length, got " + std::to_string(win));
  rec.validate();
  SegmentSet out;
  out.segment_len = win;
  out.rate_hz = rec.rate_hz;
  if (classes) out.class_names = *classes;
  SegmentReport rep;
  const auto n = static_cast<Index>(rec.samples.size());
  const Index half = win / 2;
  for (const auto& a : ann) {
    if (a.sample >= n)
      throw DataIntegrityError("annotation at sample " + std::to_string(a.sample) + " lies beyond the record (" +
                               std::to_string(n) + " samples)");
    auto cls = out.class_index(a.label);
    if (!cls) {
      if (classes) {
        ++rep.skipped_unknown;
        continue;
      }
      out.class_names.push_back(a.label);
      cls = static_cast<int>(out.class_names.size()) - 1;
    }
    if (a.sample - half < 0 || a.sample + half > n) {
      ++rep.skipped_edge;
      continue;
    }
    const auto first = rec.samples.begin() + (a.sample - half);
    out.push_back(std::span<const double>(&*first, static_cast<std::size_t>(win)), *cls);
  }
  rep.emitted = out.size();
  if (report) *report = rep;
  return out;
}

/// Per-segment z-score with population std; near-constant input is only centred.
template <typename T>
std::vector<T> normalize_segment(std::span<const T> seg) {
  std::vector<T> out(seg.begin(), seg.end());
  if (seg.empty()) return out;
  double mean = 0;
  for (T v : seg) {
    if (!std::isfinite(static_cast<double>(v))) throw DataIntegrityError("normalize_segment: non-finite value");
    mean += static_cast<double>(v);
  }
  mean /= static_cast<double>(seg.size());
  double var = 0;
  for (T v : seg) var += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
  const double sd = std::sqrt(var / static_cast<double>(seg.size()));
  const double inv = sd < 1e-8 ? 1.0 : 1.0 / sd;
  for (auto& v : out) v = static_cast<T>((static_cast<double>(v) - mean) * inv);
  return out;
}

inline SegmentSet normalized(const SegmentSet& set) {
  SegmentSet out = set;
  for (Index i = 0; i < out.size(); ++i) {
    auto z = normalize_segment<float>(set.row(i));
    std::copy(z.begin(), z.end(), out.row(i).begin());
  }
  return out;
}

/// Concatenates sets that share a class table and geometry.
inline SegmentSet concat_sets(const std::vector<const SegmentSet*>& parts) {
  if (parts.empty()) return {};
  SegmentSet out = parts.front()->like();
  for (const auto* p : parts) {
    if (p->class_names != out.class_names || p->segment_len != out.segment_len)
      throw ConfigError("cannot concatenate segment sets with different class tables or lengths");
    out.data.insert(out.data.end(), p->data.begin(), p->data.end());
    out.labels.insert(out.labels.end(), p->labels.begin(), p->labels.end());
  }
  return out;
}

/// Re-indexes `set` onto `classes`, which must contain all of its names.
inline SegmentSet remap_classes(const SegmentSet& set, const std::vector<std::string>& classes) {
  SegmentSet out = set;
  out.class_names = classes;
  for (auto& l : out.labels) {
    const auto& name = set.class_names[l];
    auto it = std::find(classes.begin(), classes.end(), name);
    if (it == classes.end()) throw ConfigError("class '" + name + "' is missing from the target class table");
    l = static_cast<int>(it - classes.begin());
  }
  return out;
}

inline std::pair<SegmentSet, SegmentSet> split_train_test(const SegmentSet& set, double ratio, std::uint64_t seed) {
  if (!(ratio > 0 && ratio < 1)) throw ConfigError("split ratio must lie in (0, 1)");
  if (set.empty()) {
    warn("split_train_test: empty segment set");
    return {set.like(), set.like()};
  }
  Rng rng(seed);
  const auto perm = rng.permutation(static_cast<std::size_t>(set.size()));
  const auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(set.size())));
  std::vector<Index> train(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<Index> test(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
  return {set.subset(train), set.subset(test)};
}

inline SegmentSet augment_merge(const SegmentSet& train, const SegmentSet& synthetic, const std::string& class_name,
                                Index count = 900) {
  const auto cls = train.class_index(class_name);
  if (!cls) throw ConfigError("class '" + class_name + "' is not in the training class table");
  if (count < 0 || count > synthetic.size())
    throw ConfigError("augment_merge: requested " + std::to_string(count) + " synthetic rows but only " +
                      std::to_string(synthetic.size()) + " are available");
  if (synthetic.segment_len != train.segment_len) throw ShapeError("augment_merge: segment length mismatch");
  for (Index i = 0; i < synthetic.size(); ++i)
    if (synthetic.class_names.at(synthetic.labels[i]) != class_name)
      throw ConfigError("augment_merge: synthetic row " + std::to_string(i) + " is not labelled '" + class_name + "'");
  SegmentSet out = train;
  for (Index i = 0; i < count; ++i) out.push_back(synthetic.row(i), *cls);
  return out;
}

// ---------------------------------------------------------------- shards

struct ShardEntry {
  int class_index = 0;
  std::string path;
  Index count = 0;
};

struct DatasetManifest {
  std::string name;
  Index segment_len = kSegmentLen;
  double rate_hz = kTargetRateHz;
  std::vector<std::string> classes;
  std::vector<ShardEntry> shards;
  bool synthetic = false;
};

inline void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = {{"name", m.name}, {"segment_len", m.segment_len}, {"rate_hz", m.rate_hz}, {"classes", m.classes}};
  j["shards"] = nlohmann::json::array();
  for (const auto& s : m.shards) j["shards"].push_back({{"class", s.class_index}, {"path", s.path}, {"count", s.count}});
  if (m.synthetic) j["synthetic"] = true;
}

inline void from_json(const nlohmann::json& j, DatasetManifest& m) {
  m.name = j.at("name").get<std::string>();
  m.segment_len = j.at("segment_len").get<Index>();
  m.rate_hz = j.at("rate_hz").get<double>();
  m.classes = j.at("classes").get<std::vector<std::string>>();
  m.shards.clear();
  for (const auto& s : j.at("shards"))
    m.shards.push_back({s.at("class").get<int>(), s.at("path").get<std::string>(), s.at("count").get<Index>()});
  m.synthetic = j.value("synthetic", false);
}

inline constexpr const char* kManifestFile = "manifest.json";

/// Writes one shard per run of equal labels, so reading restores row order,
/// and a manifest.json next to them.
inline DatasetManifest write_shards(const SegmentSet& set, const std::filesystem::path& dir, const std::string& name,
                                    bool synthetic = false) {
  static_assert(std::endian::native == std::endian::little, "shard I/O assumes a little-endian host");
  set.validate();
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.name = name;
  m.segment_len = set.segment_len;
  m.rate_hz = set.rate_hz;
  m.classes = set.class_names;
  m.synthetic = synthetic;
  Index begin = 0;
  while (begin < set.size()) {
    Index end = begin;
    while (end < set.size() && set.labels[end] == set.labels[begin]) ++end;
    char fname[32];
    std::snprintf(fname, sizeof fname, "shard_%05zu.f32", m.shards.size());
    std::ofstream os(dir / fname, std::ios::binary | std::ios::trunc);
    if (!os) throw DataIntegrityError("cannot write shard '" + (dir / fname).string() + "'");
    os.write(reinterpret_cast<const char*>(set.data.data() + begin * set.segment_len),
             static_cast<std::streamsize>((end - begin) * set.segment_len * sizeof(float)));
    if (!os) throw DataIntegrityError("short write to shard '" + (dir / fname).string() + "'");
    m.shards.push_back({set.labels[begin], fname, end - begin});
    begin = end;
  }
  nlohmann::json j = m;
  std::ofstream(dir / kManifestFile) << j.dump(2) << "\n";
  return m;
}

inline DatasetManifest read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw DataIntegrityError("cannot open manifest '" + manifest_path.string() + "'");
  try {
    return nlohmann::json::parse(is).get<DatasetManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw DataIntegrityError("manifest '" + manifest_path.string() + "': " + e.what());
  }
}

/// Accepts either the manifest file or the directory that holds it.
inline SegmentSet read_shards(std::filesystem::path manifest_path) {
  if (std::filesystem::is_directory(manifest_path)) manifest_path /= kManifestFile;
  const auto m = read_manifest(manifest_path);
  const auto dir = manifest_path.parent_path();
  SegmentSet set;
  set.segment_len = m.segment_len;
  set.rate_hz = m.rate_hz;
  set.class_names = m.classes;
  for (const auto& s : m.shards) {
    const auto path = dir / s.path;
    if (s.class_index < 0 || s.class_index >= static_cast<int>(m.classes.size()))
      throw DataIntegrityError("shard '" + s.path + "' has class index " + std::to_string(s.class_index) +
                               " outside the class table");
    std::error_code ec;
    const auto bytes = std::filesystem::file_size(path, ec);
    if (ec) throw DataIntegrityError("shard '" + s.path + "' is missing");
    const auto expect = static_cast<std::uintmax_t>(s.count * m.segment_len) * sizeof(float);
    if (bytes != expect)
      throw DataIntegrityError("shard '" + s.path + "' holds " + std::to_string(bytes) + " bytes but the manifest count " +
                               std::to_string(s.count) + " implies " + std::to_string(expect));
    const auto old = set.data.size();
    set.data.resize(old + static_cast<std::size_t>(s.count * m.segment_len));
    std::ifstream is(path, std::ios::binary);
    is.read(reinterpret_cast<char*>(set.data.data() + old), static_cast<std::streamsize>(bytes));
    if (!is) throw DataIntegrityError("short read from shard '" + s.path + "'");
    set.labels.insert(set.labels.end(), static_cast<std::size_t>(s.count), s.class_index);
  }
  set.validate();
  return set;
}

// ---------------------------------------------------------------- batches

/// Copies rows into an (n, 1, L) tensor.
template <typename T>
Tensor<T> gather_batch(const SegmentSet& set, std::span<const Index> rows) {
  auto out = Tensor<T>::zeros({static_cast<Index>(rows.size()), 1, set.segment_len});
  auto dst = out.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = set.row(rows[i]);
    std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(i) * set.segment_len);
  }
  return out;
}

inline std::vector<int> gather_labels(const SegmentSet& set, std::span<const Index> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (Index r : rows) out.push_back(set.labels[r]);
  return out;
}

inline std::vector<Index> iota_rows(Index n) {
  std::vector<Index> r(static_cast<std::size_t>(n));
  std::iota(r.begin(), r.end(), Index{0});
  return r;
}

struct DualBatchPlan {
  Index batch_size = 1;
  Index steps_per_epoch = 1;
  std::uint64_t seed = 0;

  static DualBatchPlan make(Index n_m, Index n_p, Index batch_size, std::uint64_t seed) {
    if (batch_size <= 0) throw ConfigError("batch size must be positive");
    if (n_m <= 0 || n_p <= 0) throw ConfigError("both datasets must be non-empty");
    auto ceil_div = [](Index a, Index b) { return (a + b - 1) / b; };
    return {batch_size, std::max(ceil_div(n_m, batch_size), ceil_div(n_p, batch_size)), seed};
  }
};

struct DualBatchRows {
  std::vector<Index> m;
  std::vector<Index> p;
};

/// Row stream for the two-dataset loop. Each dataset is read as an endless
/// concatenation of shuffled passes; pass k of epoch e uses a permutation
/// derived from (seed, dataset, e, k), so any (epoch, step) is addressable
/// without replaying earlier ones.
class DualBatchIterator {
 public:
  DualBatchIterator(Index n_m, Index n_p, DualBatchPlan plan) : plan_(plan), n_{n_m, n_p} {
    if (n_m <= 0 || n_p <= 0) throw ConfigError("dual batch stream needs two non-empty datasets");
    if (plan.batch_size > n_m || plan.batch_size > n_p)
      warn("batch size " + std::to_string(plan.batch_size) + " exceeds a dataset size (" + std::to_string(n_m) + ", " +
           std::to_string(n_p) + "); rows repeat within a batch");
  }

  const DualBatchPlan& plan() const { return plan_; }
  Index steps_per_epoch() const { return plan_.steps_per_epoch; }

  DualBatchRows rows(Index epoch, Index step) {
    if (step < 0 || step >= plan_.steps_per_epoch) throw ConfigError("step " + std::to_string(step) + " is outside the epoch");
    return {stream(0, epoch, step), stream(1, epoch, step)};
  }

 private:
  std::vector<Index> stream(int which, Index epoch, Index step) {
    const Index n = n_[which];
    std::vector<Index> out;
    out.reserve(static_cast<std::size_t>(plan_.batch_size));
    for (Index q = step * plan_.batch_size; q < (step + 1) * plan_.batch_size; ++q) {
      const Index pass = q / n;
      out.push_back(permutation(which, epoch, pass)[static_cast<std::size_t>(q % n)]);
    }
    return out;
  }

  const std::vector<Index>& permutation(int which, Index epoch, Index pass) {
    auto& c = cache_[which];
    if (!c.valid || c.epoch != epoch || c.pass != pass) {
      Rng rng(derive_seed(plan_.seed, {0xd0a1ULL, static_cast<std::uint64_t>(which), static_cast<std::uint64_t>(epoch),
                                       static_cast<std::uint64_t>(pass)}));
      const auto p = rng.permutation(static_cast<std::size_t>(n_[which]));
      c.perm.assign(p.begin(), p.end());
      c.epoch = epoch;
      c.pass = pass;
      c.valid = true;
    }
    return c.perm;
  }

  struct Cache {
    bool valid = false;
    Index epoch = 0, pass = 0;
    std::vector<Index> perm;
  };

  DualBatchPlan plan_;
  Index n_[2];
  Cache cache_[2];
};

/// Shuffled mini-batches over one dataset; the last batch may be short.
inline std::vector<std::vector<Index>> epoch_batches(Index n, Index batch_size, std::uint64_t seed, Index epoch) {
  if (batch_size <= 0) throw ConfigError("batch size must be positive");
  Rng rng(derive_seed(seed, {0xba7cULL, static_cast<std::uint64_t>(epoch)}));
  const auto perm = rng.permutation(static_cast<std::size_t>(n));
  std::vector<std::vector<Index>> out;
  for (Index b = 0; b < n; b += batch_size)
    out.emplace_back(perm.begin() + b, perm.begin() + std::min(n, b + batch_size));
  return out;
}

}  // namespace ecglab
