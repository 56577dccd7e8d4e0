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

// Classification reports, AAMI regrouping and the synthetic-signal quality
// suite (PCA Frechet distance, DTW statistics, Welch PSD + KL).

#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>
#include <nlohmann/json.hpp>

#include "ecglab/data.hpp"
#include "ecglab/errors.hpp"
#include "ecglab/rng.hpp"

namespace ecglab {

// ---------------------------------------------------------------- classification

struct ConfusionMatrix {
  Index k = 0;
  std::vector<std::int64_t> counts;  // row = true, column = predicted

  std::int64_t at(Index truth, Index pred) const { return counts[static_cast<std::size_t>(truth * k + pred)]; }
  std::int64_t total() const {
    std::int64_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
};

inline ConfusionMatrix confusion_matrix(std::span<const int> truth, std::span<const int> pred, Index k) {
  if (truth.size() != pred.size())
    throw ShapeError("label sequences differ in length: " + std::to_string(truth.size()) + " vs " +
                      std::to_string(pred.size()));
  if (k < 1) throw ConfigError("class count must be >= 1");
  ConfusionMatrix cm{k, std::vector<std::int64_t>(static_cast<std::size_t>(k * k), 0)};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= k || pred[i] < 0 || pred[i] >= k)
      throw ConfigError("label out of range [0, " + std::to_string(k) + ") at position " + std::to_string(i));
    ++cm.counts[static_cast<std::size_t>(truth[i] * k + pred[i])];
  }
  return cm;
}

struct ClassMetrics {
  std::string name;
  double accuracy = 0;  // one-vs-rest
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  std::int64_t support = 0;
};

struct ClassificationReport {
  std::vector<ClassMetrics> classes;
  ClassMetrics macro;  // unweighted means over classes
  double overall_accuracy = 0;
  ConfusionMatrix confusion;
};

inline ClassificationReport classification_report(std::span<const int> truth, std::span<const int> pred, Index k,
                                                  std::vector<std::string> names = {}) {
  if (names.empty())
    for (Index c = 0; c < k; ++c) names.push_back(std::to_string(c));
  if (static_cast<Index>(names.size()) != k) throw ConfigError("class name table does not match class count");
  ClassificationReport r;
  r.confusion = confusion_matrix(truth, pred, k);
  const auto& cm = r.confusion;
  const auto n = static_cast<double>(cm.total());
  std::int64_t correct = 0;
  for (Index c = 0; c < k; ++c) {
    std::int64_t tp = cm.at(c, c), row = 0, col = 0;
    for (Index j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    correct += tp;
    const std::int64_t fn = row - tp, fp = col - tp, tn = cm.total() - tp - fn - fp;
    ClassMetrics m;
    m.name = names[static_cast<std::size_t>(c)];
    m.support = row;
    m.accuracy = n > 0 ? static_cast<double>(tp + tn) / n : 0.0;
    m.precision = col > 0 ? static_cast<double>(tp) / static_cast<double>(col) : 0.0;
    m.recall = row > 0 ? static_cast<double>(tp) / static_cast<double>(row) : 0.0;
    m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    if (row == 0 && col == 0) warn("class '" + m.name + "' absent from labels and predictions; metrics set to 0");
    r.classes.push_back(m);
  }
  r.macro.name = "Avg";
  for (const auto& m : r.classes) {
    r.macro.accuracy += m.accuracy / static_cast<double>(k);
    r.macro.precision += m.precision / static_cast<double>(k);
    r.macro.recall += m.recall / static_cast<double>(k);
    r.macro.f1 += m.f1 / static_cast<double>(k);
    r.macro.support += m.support;
  }
  r.overall_accuracy = n > 0 ? static_cast<double>(correct) / n : 0.0;
  return r;
}

inline nlohmann::json to_json(const ClassMetrics& m) {
  return {{"class", m.name},   {"accuracy", m.accuracy}, {"precision", m.precision},
          {"recall", m.recall}, {"f1", m.f1},             {"support", m.support}};
}

inline nlohmann::json to_json(const ClassificationReport& r) {
  nlohmann::json j;
  j["classes"] = nlohmann::json::array();
  for (const auto& m : r.classes) j["classes"].push_back(to_json(m));
  j["macro"] = to_json(r.macro);
  j["overall_accuracy"] = r.overall_accuracy;
  j["confusion"] = {{"k", r.confusion.k}, {"counts", r.confusion.counts}};
  return j;
}

/// class,Acc,Prec,Rec,F1 rows followed by the Avg row.
inline std::string to_csv(const ClassificationReport& r) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << "class,Acc,Prec,Rec,F1\n";
  auto row = [&](const ClassMetrics& m) {
    os << m.name << ',' << m.accuracy << ',' << m.precision << ',' << m.recall << ',' << m.f1 << '\n';
  };
  for (const auto& m : r.classes) row(m);
  row(r.macro);
  return os.str();
}

// ---------------------------------------------------------------- AAMI regrouping

struct AAMIMap {
  std::vector<std::string> groups;           // output order
  std::map<std::string, std::string> group;  // class name -> group name

  /// Checks that every class in `classes` is mapped to a listed group.
  void validate(const std::vector<std::string>& classes) const {
    for (const auto& c : classes) {
      auto it = group.find(c);
      if (it == group.end()) throw ConfigError("AAMI map has no group for class '" + c + "'");
      if (std::find(groups.begin(), groups.end(), it->second) == groups.end())
        throw ConfigError("AAMI map sends '" + c + "' to unlisted group '" + it->second + "'");
    }
  }
};

/// Six groups over the 12 beat classes; E holds the escape beat.
inline AAMIMap default_aami_map() {
  AAMIMap m;
  m.groups = {"N", "S", "V", "F", "Q", "E"};
  m.group = {{"NOR", "N"}, {"LBB", "N"}, {"RBB", "N"}, {"APB", "S"}, {"AAP", "S"}, {"PVC", "V"},
             {"VEB", "V"}, {"VFW", "V"}, {"FVN", "F"}, {"PB", "Q"},  {"FPN", "Q"}, {"JEB", "E"}};
  return m;
}

/// JSON object mapping class name -> group name. Groups are ordered by
/// first appearance in the 12-class table when one is given, else by name.
inline AAMIMap aami_map_from_json(const nlohmann::json& j, const std::vector<std::string>& class_order = {}) {
  if (!j.is_object()) throw ConfigError("AAMI map must be a JSON object of class -> group");
  AAMIMap m;
  for (const auto& [k, v] : j.items()) m.group[k] = v.get<std::string>();
  auto add_group = [&](const std::string& g) {
    if (std::find(m.groups.begin(), m.groups.end(), g) == m.groups.end()) m.groups.push_back(g);
  };
  for (const auto& c : class_order)
    if (auto it = m.group.find(c); it != m.group.end()) add_group(it->second);
  for (const auto& [k, g] : m.group) add_group(g);
  return m;
}

inline AAMIMap read_aami_map(const std::filesystem::path& path, const std::vector<std::string>& class_order = {}) {
  std::ifstream is(path);
  if (!is) throw DataIntegrityError("cannot open AAMI map '" + path.string() + "'");
  try {
    return aami_map_from_json(nlohmann::json::parse(is), class_order);
  } catch (const nlohmann::json::exception& e) {
    throw DataIntegrityError("malformed AAMI map '" + path.string() + "': " + e.what());
  }
}

/// Relabels indices into `classes` as indices into `map.groups`.
inline std::vector<int> aami_regroup(std::span<const int> labels, const std::vector<std::string>& classes,
                                     const AAMIMap& map) {
  std::vector<int> lut(classes.size(), -1);
  for (std::size_t c = 0; c < classes.size(); ++c) {
    auto it = map.group.find(classes[c]);
    if (it == map.group.end()) continue;
    auto g = std::find(map.groups.begin(), map.groups.end(), it->second);
    if (g != map.groups.end()) lut[c] = static_cast<int>(g - map.groups.begin());
  }
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int l = labels[i];
    if (l < 0 || l >= static_cast<int>(classes.size())) throw ConfigError("label " + std::to_string(l) + " out of range");
    if (lut[static_cast<std::size_t>(l)] < 0)
      throw ConfigError("class '" + classes[static_cast<std::size_t>(l)] + "' has no AAMI group");
    out[i] = lut[static_cast<std::size_t>(l)];
  }
  return out;
}

// ---------------------------------------------------------------- Frechet distance

using MatrixXd = Eigen::MatrixXd;
using VectorXd = Eigen::VectorXd;

namespace detail {
/// Symmetric PSD square root via eigen-decomposition; eigenvalues below
/// `floor` (rounding dust, possibly negative) are treated as zero.
inline MatrixXd sqrtm_psd(const MatrixXd& a, double floor = 1e-10) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (a + a.transpose()));
  VectorXd ev = es.eigenvalues();
  for (Index i = 0; i < ev.size(); ++i) ev[i] = ev[i] < floor ? 0.0 : std::sqrt(ev[i]);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

inline MatrixXd rows_to_matrix(const SegmentSet& s) {
  MatrixXd m(s.size(), s.segment_len);
  for (Index i = 0; i < s.size(); ++i) {
    const auto r = s.row(i);
    for (Index j = 0; j < s.segment_len; ++j) m(i, j) = r[static_cast<std::size_t>(j)];
  }
  return m;
}
}  // namespace detail

struct GaussianStats {
  VectorXd mean;
  MatrixXd cov;  // unbiased (n - 1)
};

inline GaussianStats gaussian_stats(const MatrixXd& x) {
  if (x.rows() < 2) throw ConfigError("Gaussian fit needs at least two rows");
  GaussianStats g;
  g.mean = x.colwise().mean().transpose();
  const MatrixXd c = x.rowwise() - g.mean.transpose();
  g.cov = c.transpose() * c / static_cast<double>(x.rows() - 1);
  return g;
}

/// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)). The trace term is taken
/// as Tr((S1^(1/2) S2 S1^(1/2))^(1/2)), which has the same spectrum and stays
/// symmetric.
inline double frechet_distance(const VectorXd& mu1, const MatrixXd& s1, const VectorXd& mu2, const MatrixXd& s2) {
  if (mu1.size() != mu2.size() || s1.rows() != mu1.size() || s2.rows() != mu2.size() || s1.cols() != s1.rows() ||
      s2.cols() != s2.rows())
    throw ShapeError("frechet_distance: inconsistent dimensions");
  const MatrixXd r1 = detail::sqrtm_psd(s1);
  const MatrixXd cross = detail::sqrtm_psd(r1 * s2 * r1);
  const double d = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * cross.trace();
  return std::max(d, 0.0);
}

struct PCABasis {
  VectorXd mean;
  MatrixXd components;  // (k, D), rows ordered by decreasing variance
  VectorXd variances;

  MatrixXd project(const MatrixXd& x) const {
    if (x.cols() != mean.size()) throw ShapeError("PCA projection: dimension mismatch");
    return (x.rowwise() - mean.transpose()) * components.transpose();
  }
};

/// Top-k principal axes of the centred rows of `x`.
inline PCABasis pca_fit(const MatrixXd& x, Index k) {
  if (k < 1) throw ConfigError("PCA needs k >= 1");
  if (x.rows() < k + 1) throw ConfigError("PCA with k=" + std::to_string(k) + " needs at least k+1 rows, got " +
                                          std::to_string(x.rows()));
  if (x.cols() < k) throw ConfigError("PCA k exceeds the signal dimension");
  PCABasis b;
  b.mean = x.colwise().mean().transpose();
  const MatrixXd c = x.rowwise() - b.mean.transpose();
  Eigen::BDCSVD<MatrixXd> svd(c, Eigen::ComputeThinV);
  const VectorXd sv = svd.singularValues();
  const double top = sv.size() ? sv[0] : 0.0;
  if (sv.size() < k || !(sv[k - 1] > 1e-10 * std::max(top, 1.0)))
    throw ConfigError("reference set is rank deficient for k=" + std::to_string(k) +
                      " principal components; choose a smaller k");
  b.components = svd.matrixV().leftCols(k).transpose();
  b.variances = sv.head(k).array().square() / static_cast<double>(x.rows() - 1);
  // Deterministic sign: largest-magnitude loading of each axis is positive.
  for (Index i = 0; i < k; ++i) {
    Index arg = 0;
    b.components.row(i).cwiseAbs().maxCoeff(&arg);
    if (b.components(i, arg) < 0) b.components.row(i) *= -1.0;
  }
  return b;
}

/// Frechet distance between Gaussian fits of `real` and `gen` in the top-k
/// PCA space of `real`.
inline double pca_fid(const MatrixXd& real, const MatrixXd& gen, Index k) {
  if (real.cols() != gen.cols()) throw ShapeError("pca_fid: signal lengths differ");
  if (gen.rows() < k + 1) throw ConfigError("pca_fid: generated set needs at least k+1 rows");
  const auto basis = pca_fit(real, k);
  const auto a = gaussian_stats(basis.project(real));
  const auto b = gaussian_stats(basis.project(gen));
  return frechet_distance(a.mean, a.cov, b.mean, b.cov);
}

inline double pca_fid(const SegmentSet& real, const SegmentSet& gen, Index k) {
  return pca_fid(detail::rows_to_matrix(real), detail::rows_to_matrix(gen), k);
}

// ---------------------------------------------------------------- DTW

/// Classic DTW with |a_i - b_j| local cost and no window.
template <typename A, typename B>
double dtw_distance(const A& a, const B& b) {
  const std::size_t n = std::size(a), m = std::size(b);
  if (n == 0 || m == 0) throw ConfigError("DTW of an empty sequence");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
  prev[0] = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = inf;
    const double ai = static_cast<double>(a[i - 1]);
    for (std::size_t j = 1; j <= m; ++j) {
      const double cost = std::abs(ai - static_cast<double>(b[j - 1]));
      cur[j] = cost + std::min({prev[j], cur[j - 1], prev[j - 1]});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

struct DTWStats {
  double mean = 0;
  double stddev = 0;  // population
  Index pairs = 0;
};

/// Statistics over `pairs` uniformly drawn (real, gen) pairs. `pairs <= 0`
/// selects min(500, N*M). Work is split over `jobs` threads with each pair
/// written to its own slot, so the result does not depend on `jobs`.
inline DTWStats dtw_stats(const SegmentSet& real, const SegmentSet& gen, Index pairs, std::uint64_t seed,
                          int jobs = 1) {
  if (real.empty() || gen.empty()) throw ConfigError("dtw_stats needs non-empty sets");
  if (pairs <= 0) pairs = std::min<Index>(500, real.size() * gen.size());
  Rng rng(derive_seed(seed, {0xd7aULL}));
  std::vector<std::pair<Index, Index>> draws(static_cast<std::size_t>(pairs));
  for (auto& d : draws)
    d = {static_cast<Index>(rng.below(static_cast<std::uint64_t>(real.size()))),
         static_cast<Index>(rng.below(static_cast<std::uint64_t>(gen.size())))};
  std::vector<double> dist(draws.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) dist[i] = dtw_distance(real.row(draws[i].first), gen.row(draws[i].second));
  };
  jobs = std::max(1, std::min<int>(jobs, static_cast<int>(draws.size())));
  if (jobs == 1) {
    work(0, draws.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (draws.size() + static_cast<std::size_t>(jobs) - 1) / static_cast<std::size_t>(jobs);
    for (int t = 0; t < jobs; ++t) {
      const std::size_t b = static_cast<std::size_t>(t) * chunk, e = std::min(draws.size(), b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
    for (auto& th : pool) th.join();
  }
  DTWStats s;
  s.pairs = pairs;
  for (double d : dist) s.mean += d;
  s.mean /= static_cast<double>(dist.size());
  for (double d : dist) s.stddev += (d - s.mean) * (d - s.mean);
  s.stddev = std::sqrt(s.stddev / static_cast<double>(dist.size()));
  return s;
}

// ---------------------------------------------------------------- Welch PSD

struct WelchOptions {
  Index segment = 256;
  Index overlap = 128;
  double rate_hz = kTargetRateHz;
};

struct PowerSpectrum {
  std::vector<double> freqs;
  std::vector<double> psd;
};

/// One-sided density estimate of one signal: periodic Hann window, per-segment
/// mean removal, |FFT|^2 / (fs * sum w^2), interior bins doubled, averaged
/// over segments.
inline PowerSpectrum welch_psd(std::span<const float> x, const WelchOptions& o) {
  const Index seg = o.segment, step = o.segment - o.overlap;
  if (seg < 2) throw ConfigError("Welch segment must be >= 2");
  if (o.overlap < 0 || step <= 0) throw ConfigError("Welch overlap must lie in [0, segment)");
  if (static_cast<Index>(x.size()) < seg)
    throw ConfigError("signal of length " + std::to_string(x.size()) + " shorter than Welch segment " +
                      std::to_string(seg));
  std::vector<double> w(static_cast<std::size_t>(seg));
  double wss = 0;
  for (Index i = 0; i < seg; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(seg));
    wss += w[i] * w[i];
  }
  const Index bins = seg / 2 + 1;
  PowerSpectrum out;
  out.psd.assign(static_cast<std::size_t>(bins), 0.0);
  for (Index b = 0; b < bins; ++b) out.freqs.push_back(o.rate_hz * static_cast<double>(b) / static_cast<double>(seg));
  Eigen::FFT<double> fft;
  std::vector<double> buf(static_cast<std::size_t>(seg));
  std::vector<std::complex<double>> spec;
  Index count = 0;
  for (Index start = 0; start + seg <= static_cast<Index>(x.size()); start += step, ++count) {
    double mu = 0;
    for (Index i = 0; i < seg; ++i) mu += x[static_cast<std::size_t>(start + i)];
    mu /= static_cast<double>(seg);
    for (Index i = 0; i < seg; ++i) buf[i] = (x[static_cast<std::size_t>(start + i)] - mu) * w[i];
    fft.fwd(spec, buf);
    for (Index b = 0; b < bins; ++b) {
      double p = std::norm(spec[static_cast<std::size_t>(b)]) / (o.rate_hz * wss);
      if (b != 0 && !(seg % 2 == 0 && b == bins - 1)) p *= 2.0;
      out.psd[b] += p;
    }
  }
  for (auto& p : out.psd) p /= static_cast<double>(count);
  return out;
}

/// Mean PSD across all signals of a set.
inline PowerSpectrum welch_psd(const SegmentSet& set, const WelchOptions& o) {
  if (set.empty()) throw ConfigError("Welch PSD of an empty set");
  if (o.segment & (o.segment - 1)) warn("Welch segment " + std::to_string(o.segment) + " is not a power of two");
  PowerSpectrum mean;
  for (Index i = 0; i < set.size(); ++i) {
    auto p = welch_psd(set.row(i), o);
    if (i == 0) {
      mean = std::move(p);
      continue;
    }
    for (std::size_t b = 0; b < p.psd.size(); ++b) mean.psd[b] += p.psd[b];
  }
  for (auto& v : mean.psd) v /= static_cast<double>(set.size());
  return mean;
}

/// KL(p || q) after adding `floor` to every bin and normalising each to sum 1.
/// Accumulated as sum p log(p/q) - p + q, whose terms are individually
/// non-negative; per-term rounding below zero is clipped.
inline double kl_psd(std::span<const double> p, std::span<const double> q, double floor = 1e-12) {
  if (p.size() != q.size() || p.empty()) throw ShapeError("kl_psd: spectra differ in length or are empty");
  double sp = 0, sq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0 || q[i] < 0) throw ConfigError("kl_psd: negative power");
    sp += p[i] + floor;
    sq += q[i] + floor;
  }
  double kl = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = (p[i] + floor) / sp, b = (q[i] + floor) / sq;
    kl += std::max(0.0, a * std::log(a / b) - a + b);
  }
  return kl;
}

// ---------------------------------------------------------------- quality report

struct GenQualityOptions {
  Index pca_dims = 32;
  Index dtw_pairs = 0;  // 0: min(500, N*M)
  WelchOptions welch;
  std::uint64_t seed = 0;
  int jobs = 1;

  /// Defaults adjusted to a segment length: the Welch segment is capped at L
  /// with half overlap.
  static GenQualityOptions for_length(Index len) {
    GenQualityOptions o;
    if (len < o.welch.segment) {
      o.welch.segment = len;
      o.welch.overlap = len / 2;
    }
    return o;
  }
};

struct GenQualityReport {
  double fid = 0;
  double mu_dtw = 0;
  double sigma_dtw = 0;
  double kl = 0;
  Index pair_count = 0;
  Index pca_dims = 0;
  WelchOptions welch;
  std::uint64_t seed = 0;
  Index real_count = 0;
  Index gen_count = 0;
};

inline nlohmann::json to_json(const GenQualityReport& r) {
  return {{"fid", r.fid},
          {"mu_dtw", r.mu_dtw},
          {"sigma_dtw", r.sigma_dtw},
          {"kl", r.kl},
          {"kl_direction", "real||gen"},
          {"pair_count", r.pair_count},
          {"pca_dims", r.pca_dims},
          {"welch", {{"segment", r.welch.segment}, {"overlap", r.welch.overlap}, {"window", "hann"}, {"rate_hz", r.welch.rate_hz}}},
          {"seed", r.seed},
          {"real_count", r.real_count},
          {"gen_count", r.gen_count}};
}

/// PCA dims are reduced (with a warning) when either set has too few rows.
inline GenQualityReport gen_quality_report(const SegmentSet& real, const SegmentSet& gen, GenQualityOptions o) {
  if (real.empty() || gen.empty()) throw ConfigError("quality report needs non-empty real and generated sets");
  if (real.segment_len != gen.segment_len) throw ShapeError("real and generated segments differ in length");
  const Index k = std::min({o.pca_dims, real.size() - 1, gen.size() - 1, real.segment_len});
  if (k < 1) throw ConfigError("quality report needs at least two real and two generated segments");
  if (k < o.pca_dims) warn("PCA dims reduced from " + std::to_string(o.pca_dims) + " to " + std::to_string(k));
  GenQualityReport r;
  r.pca_dims = k;
  r.fid = pca_fid(real, gen, k);
  const auto d = dtw_stats(real, gen, o.dtw_pairs, o.seed, o.jobs);
  r.mu_dtw = d.mean;
  r.sigma_dtw = d.stddev;
  r.pair_count = d.pairs;
  o.welch.rate_hz = real.rate_hz;
  r.kl = kl_psd(welch_psd(real, o.welch).psd, welch_psd(gen, o.welch).psd);
  r.welch = o.welch;
  r.seed = o.seed;
  r.real_count = real.size();
  r.gen_count = gen.size();
  return r;
}

}  // namespace ecglab
