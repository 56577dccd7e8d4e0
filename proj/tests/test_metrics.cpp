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

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>

#include "ecglab/metrics.hpp"
#include "support/tempdir.hpp"

namespace ecglab {
namespace {

// ---------------------------------------------------------------- classification

TEST(ClassificationReport, HandCountedThreeClassCase) {
  const std::vector<int> truth{0, 0, 0, 1, 1, 2, 2, 2, 2, 2};
  const std::vector<int> pred{0, 1, 0, 1, 1, 2, 2, 0, 2, 1};
  const auto r = classification_report(truth, pred, 3, {"a", "b", "c"});
  EXPECT_EQ(r.confusion.at(0, 0), 2);
  EXPECT_EQ(r.confusion.at(2, 1), 1);
  EXPECT_DOUBLE_EQ(r.overall_accuracy, 0.7);
  // class a: tp 2, fp 1, fn 1, tn 6
  EXPECT_DOUBLE_EQ(r.classes[0].precision, 2.0 / 3);
  EXPECT_DOUBLE_EQ(r.classes[0].recall, 2.0 / 3);
  EXPECT_DOUBLE_EQ(r.classes[0].accuracy, 0.8);
  // class b: tp 2, fp 2, fn 0
  EXPECT_DOUBLE_EQ(r.classes[1].precision, 0.5);
  EXPECT_DOUBLE_EQ(r.classes[1].recall, 1.0);
  EXPECT_DOUBLE_EQ(r.classes[1].f1, 2 * 0.5 / 1.5);
  // class c: tp 3, fp 0, fn 2
  EXPECT_DOUBLE_EQ(r.classes[2].precision, 1.0);
  EXPECT_DOUBLE_EQ(r.classes[2].recall, 0.6);
  EXPECT_DOUBLE_EQ(r.classes[2].accuracy, 0.8);
  EXPECT_NEAR(r.macro.precision, (2.0 / 3 + 0.5 + 1.0) / 3, 1e-15);
  EXPECT_NEAR(r.macro.recall, (2.0 / 3 + 1.0 + 0.6) / 3, 1e-15);
  EXPECT_EQ(r.macro.name, "Avg");
}

TEST(ClassificationReport, AbsentClassScoresZero) {
  const std::vector<int> truth{0, 1, 0, 1};
  const auto r = classification_report(truth, truth, 3);
  EXPECT_EQ(r.classes[2].precision, 0.0);
  EXPECT_EQ(r.classes[2].recall, 0.0);
  EXPECT_EQ(r.classes[2].f1, 0.0);
  EXPECT_EQ(r.classes[0].f1, 1.0);
  EXPECT_DOUBLE_EQ(r.macro.f1, 2.0 / 3);
}

TEST(ClassificationReport, RejectsBadInput) {
  const std::vector<int> a{0, 1}, b{0}, c{0, 3};
  EXPECT_THROW(classification_report(a, b, 2), ShapeError);
  EXPECT_THROW(classification_report(a, c, 2), ConfigError);
  EXPECT_THROW(classification_report(a, a, 2, {"x"}), ConfigError);
}

TEST(ClassificationReport, CsvAndJsonLayout) {
  const std::vector<int> truth{0, 1, 1}, pred{0, 1, 0};
  const auto r = classification_report(truth, pred, 2, {"NOR", "PVC"});
  const auto csv = to_csv(r);
  std::istringstream is(csv);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "class,Acc,Prec,Rec,F1");
  EXPECT_EQ(lines[1].rfind("NOR,", 0), 0u);
  EXPECT_EQ(lines[3].rfind("Avg,", 0), 0u);
  const auto j = to_json(r);
  EXPECT_EQ(j["classes"].size(), 2u);
  EXPECT_EQ(j["confusion"]["counts"].size(), 4u);
  EXPECT_DOUBLE_EQ(j["overall_accuracy"].get<double>(), 2.0 / 3);
}

// ---------------------------------------------------------------- AAMI regrouping

const std::vector<std::string> kTwelve{"NOR", "LBB", "RBB", "APB", "AAP", "PVC",
                                       "VEB", "VFW", "FVN", "PB",  "FPN", "JEB"};

TEST(AAMI, DefaultMapCoversTwelveClasses) {
  const auto m = default_aami_map();
  EXPECT_NO_THROW(m.validate(kTwelve));
  const std::vector<int> labels{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
  const auto g = aami_regroup(labels, kTwelve, m);
  EXPECT_EQ(g, (std::vector<int>{0, 0, 0, 1, 1, 2, 2, 2, 3, 4, 4, 5}));
}

TEST(AAMI, RegroupingNeverLowersOverallAccuracy) {
  // Merging classes can only turn errors into hits.
  const auto m = default_aami_map();
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> truth(50), pred(50);
    for (int i = 0; i < 50; ++i) {
      truth[i] = static_cast<int>(rng.below(12));
      pred[i] = rng.uniform() < 0.6 ? truth[i] : static_cast<int>(rng.below(12));
    }
    const double fine = classification_report(truth, pred, 12).overall_accuracy;
    const double coarse = classification_report(aami_regroup(truth, kTwelve, m), aami_regroup(pred, kTwelve, m), 6)
                              .overall_accuracy;
    EXPECT_GE(coarse, fine);
  }
}

TEST(AAMI, JsonMapAndErrors) {
  const auto m = aami_map_from_json(nlohmann::json{{"PVC", "V"}, {"NOR", "N"}, {"LBB", "N"}}, {"NOR", "LBB", "PVC"});
  EXPECT_EQ(m.groups, (std::vector<std::string>{"N", "V"}));
  const std::vector<std::string> cls{"NOR", "LBB", "PVC"};
  const std::vector<int> labels{2, 0, 1};
  EXPECT_EQ(aami_regroup(labels, cls, m), (std::vector<int>{1, 0, 0}));
  EXPECT_THROW(m.validate({"NOR", "JEB"}), ConfigError);
  const std::vector<std::string> with_jeb{"NOR", "JEB"};
  const std::vector<int> one{1};
  EXPECT_THROW(aami_regroup(one, with_jeb, m), ConfigError);
  EXPECT_THROW(aami_map_from_json(nlohmann::json::array()), ConfigError);

  testing::TempDir dir("aami");
  std::ofstream(dir / "bad.json") << "{not json";
  EXPECT_THROW(read_aami_map(dir / "bad.json"), DataIntegrityError);
  EXPECT_THROW(read_aami_map(dir / "none.json"), DataIntegrityError);
}

// ---------------------------------------------------------------- Frechet distance

TEST(Frechet, ReferenceValueForTwoDimensionalGaussians) {
  Eigen::Vector2d m1(0.5, -1.0), m2(0.0, 0.25);
  Eigen::Matrix2d s1, s2;
  s1 << 2.0, 0.3, 0.3, 1.0;
  s2 << 1.0, -0.2, -0.2, 0.5;
  // scipy.linalg.sqrtm based reference
  EXPECT_NEAR(frechet_distance(m1, s1, m2, s2), 2.1871281113712535, 1e-10);
  EXPECT_NEAR(frechet_distance(m2, s2, m1, s1), 2.1871281113712535, 1e-10);
}

TEST(Frechet, OneDimensionalClosedForm) {
  // (mu1 - mu2)^2 + (sigma1 - sigma2)^2
  Eigen::VectorXd a(1), b(1);
  a << 0.0;
  b << 0.6;
  Eigen::MatrixXd sa(1, 1), sb(1, 1);
  sa << 4.0;
  sb << 1.0;
  EXPECT_NEAR(frechet_distance(a, sa, b, sb), 0.36 + 1.0, 1e-12);
}

TEST(Frechet, IdenticalSetsScoreZero) {
  Rng rng(3);
  Eigen::MatrixXd x(200, 20);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  EXPECT_LT(pca_fid(x, x, 10), 1e-8);
  Eigen::MatrixXd shifted = x.array() + 1.0;
  EXPECT_NEAR(pca_fid(x, shifted, 20), 20.0, 1e-8);  // every axis moves by the unit mean shift
}

TEST(Frechet, RankDeficientPCAIsRefused) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(10, 6);
  for (int i = 0; i < 10; ++i) x(i, 0) = i;  // rank 1
  try {
    pca_fit(x, 3);
    FAIL() << "expected a rank error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("smaller"), std::string::npos) << e.what();
  }
  EXPECT_THROW(pca_fit(x, 10), ConfigError);
}

TEST(PCA, ComponentsAreOrthonormalAndOrdered) {
  Rng rng(4);
  Eigen::MatrixXd x(300, 5);
  for (Index i = 0; i < 300; ++i)
    for (Index j = 0; j < 5; ++j) x(i, j) = rng.normal() * (5.0 - static_cast<double>(j));
  const auto b = pca_fit(x, 3);
  const Eigen::MatrixXd g = b.components * b.components.transpose();
  EXPECT_TRUE(g.isApprox(Eigen::MatrixXd::Identity(3, 3), 1e-12));
  EXPECT_GT(b.variances[0], b.variances[1]);
  EXPECT_GT(b.variances[1], b.variances[2]);
  EXPECT_GT(std::abs(b.components(0, 0)), 0.9);
}

// ---------------------------------------------------------------- DTW

double brute_dtw(const std::vector<double>& a, const std::vector<double>& b) {
  // Minimum over every monotone path from (0,0) to (n-1,m-1).
  std::function<double(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> double {
    const double c = std::abs(a[i] - b[j]);
    if (i + 1 == a.size() && j + 1 == b.size()) return c;
    double best = std::numeric_limits<double>::infinity();
    if (i + 1 < a.size()) best = std::min(best, go(i + 1, j));
    if (j + 1 < b.size()) best = std::min(best, go(i, j + 1));
    if (i + 1 < a.size() && j + 1 < b.size()) best = std::min(best, go(i + 1, j + 1));
    return c + best;
  };
  return go(0, 0);
}

TEST(DTW, MatchesExhaustivePathSearch) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(1 + rng.below(5)), b(1 + rng.below(5));
    for (auto& v : a) v = std::round(rng.normal() * 4) / 2;
    for (auto& v : b) v = std::round(rng.normal() * 4) / 2;
    EXPECT_NEAR(dtw_distance(a, b), brute_dtw(a, b), 1e-12);
    EXPECT_DOUBLE_EQ(dtw_distance(a, b), dtw_distance(b, a));
  }
}

TEST(DTW, SmallHandCases) {
  EXPECT_EQ(dtw_distance(std::vector<double>{0, 0}, std::vector<double>{1}), 2.0);
  EXPECT_EQ(dtw_distance(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 2, 3}), 0.0);
  EXPECT_THROW(dtw_distance(std::vector<double>{}, std::vector<double>{1}), ConfigError);
}

SegmentSet noise_set(Index n, Index len, std::uint64_t seed, double hz = 0) {
  SegmentSet s;
  s.segment_len = len;
  s.class_names = {"x"};
  Rng rng(seed);
  std::vector<float> row(static_cast<std::size_t>(len));
  for (Index i = 0; i < n; ++i) {
    for (Index t = 0; t < len; ++t)
      row[t] = static_cast<float>(std::sin(2 * std::numbers::pi * hz * static_cast<double>(t) / s.rate_hz) +
                                  0.3 * rng.normal());
    s.push_back(row, 0);
  }
  return s;
}

TEST(DTWStats, DeterministicAndIndependentOfJobs) {
  const auto a = noise_set(12, 40, 1), b = noise_set(9, 40, 2);
  const auto s1 = dtw_stats(a, b, 50, 7, 1);
  const auto s3 = dtw_stats(a, b, 50, 7, 3);
  EXPECT_EQ(s1.mean, s3.mean);
  EXPECT_EQ(s1.stddev, s3.stddev);
  EXPECT_EQ(s1.pairs, 50);
  EXPECT_NE(dtw_stats(a, b, 50, 8).mean, s1.mean);
  EXPECT_EQ(dtw_stats(a, b, 0, 7).pairs, 108);  // min(500, 12 * 9)
}

// ---------------------------------------------------------------- Welch / KL

TEST(Welch, MatchesScipyReference) {
  // scipy.signal.welch(x, fs=250, window="hann", nperseg=256, noverlap=128)
  std::vector<float> x(512);
  for (int n = 0; n < 512; ++n)
    x[n] = static_cast<float>(std::sin(2 * std::numbers::pi * 10 * n / 250.0) +
                              0.5 * std::cos(2 * std::numbers::pi * 37 * n / 250.0) +
                              0.1 * (static_cast<double>((n * 7919) % 13) - 6) / 6);
  WelchOptions o;
  o.rate_hz = 250;
  const auto p = welch_psd(x, o);
  ASSERT_EQ(p.psd.size(), 129u);
  EXPECT_DOUBLE_EQ(p.freqs[1], 0.9765625);
  EXPECT_DOUBLE_EQ(p.freqs[10], 9.765625);
  const std::vector<std::pair<int, double>> ref{{0, 2.0289581042093265e-04}, {1, 9.538964372640132e-05},
                                                {5, 8.676300844710773e-07},  {10, 0.31680022029563976},
                                                {11, 0.15726018145070042},   {38, 0.08444917003166774},
                                                {60, 3.37479182090934e-05},  {128, 8.49247838713155e-12}};
  for (auto [bin, v] : ref) EXPECT_NEAR(p.psd[bin], v, 1e-6 * v + 1e-15) << "bin " << bin;
  EXPECT_EQ(std::max_element(p.psd.begin(), p.psd.end()) - p.psd.begin(), 10);
}

TEST(Welch, SetAverageAndValidation) {
  const auto s = noise_set(4, 128, 3, 20);
  WelchOptions o;
  o.segment = 128;
  o.overlap = 64;
  const auto mean = welch_psd(s, o);
  std::vector<double> manual(65, 0.0);
  for (Index i = 0; i < 4; ++i) {
    const auto p = welch_psd(s.row(i), o);
    for (std::size_t b = 0; b < 65; ++b) manual[b] += p.psd[b] / 4;
  }
  for (std::size_t b = 0; b < 65; ++b) EXPECT_NEAR(mean.psd[b], manual[b], 1e-15);
  o.segment = 256;
  EXPECT_THROW(welch_psd(s, o), ConfigError);
  o.segment = 64;
  o.overlap = 64;
  EXPECT_THROW(welch_psd(s, o), ConfigError);
}

TEST(KL, HandValuesAndProperties) {
  const std::vector<double> p{0.5, 0.5}, q{0.9, 0.1};
  EXPECT_NEAR(kl_psd(p, q), 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(5.0), 1e-9);
  EXPECT_EQ(kl_psd(p, p), 0.0);
  const std::vector<double> scaled{5.0, 5.0};
  EXPECT_NEAR(kl_psd(scaled, q), kl_psd(p, q), 1e-9);  // normalised first
  const std::vector<double> zero{1.0, 0.0};
  EXPECT_TRUE(std::isfinite(kl_psd(p, zero)));
  EXPECT_THROW(kl_psd(p, std::vector<double>{1.0}), ShapeError);
  EXPECT_THROW(kl_psd(p, std::vector<double>{1.0, -1.0}), ConfigError);
}

// ---------------------------------------------------------------- report

TEST(GenQualityReport, SchemaAndIdentity) {
  const auto real = noise_set(40, 128, 11, 5);
  const auto r = gen_quality_report(real, real, GenQualityOptions::for_length(128));
  EXPECT_LT(r.fid, 1e-8);
  EXPECT_EQ(r.kl, 0.0);
  EXPECT_EQ(r.welch.segment, 128);
  EXPECT_EQ(r.welch.overlap, 64);
  EXPECT_EQ(r.pca_dims, 32);
  EXPECT_EQ(r.pair_count, 500);
  const auto j = to_json(r);
  for (const char* k : {"fid", "mu_dtw", "sigma_dtw", "kl", "kl_direction", "pair_count", "pca_dims", "welch", "seed",
                        "real_count", "gen_count"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(j["kl_direction"], "real||gen");
}

TEST(GenQualityReport, SeparatesDifferentDistributions) {
  const auto real = noise_set(60, 128, 12, 5);
  const auto near = noise_set(60, 128, 13, 5);
  const auto far = noise_set(60, 128, 14, 30);
  const auto o = GenQualityOptions::for_length(128);
  const auto rn = gen_quality_report(real, near, o);
  const auto rf = gen_quality_report(real, far, o);
  EXPECT_LT(rn.kl, rf.kl);
  EXPECT_LT(rn.mu_dtw, rf.mu_dtw);
  EXPECT_LT(rn.fid, rf.fid);
}

TEST(GenQualityReport, ReducesPcaDimsForSmallSets) {
  const auto real = noise_set(5, 64, 1), gen = noise_set(9, 64, 2);
  const auto r = gen_quality_report(real, gen, GenQualityOptions::for_length(64));
  EXPECT_EQ(r.pca_dims, 4);
  EXPECT_THROW(gen_quality_report(noise_set(1, 64, 1), gen, GenQualityOptions::for_length(64)), ConfigError);
  EXPECT_THROW(gen_quality_report(real, noise_set(4, 32, 1), GenQualityOptions{}), ShapeError);
}

}  // namespace
}  // namespace ecglab
