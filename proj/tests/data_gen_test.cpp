// Copyright 2026 The adaptlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "adaptlab/data_gen.hpp"
#include "adaptlab/model.hpp"

namespace {

using namespace adaptlab;
using namespace adaptlab::data;
using numerics::Matrix;
using numerics::Rng;

GeneratorState default_gen(std::uint64_t seed = 3) {
  DominoConfig cfg;
  cfg.seed = seed;
  return build_generators(cfg);
}

Matrix columns(const Matrix& x, std::size_t begin, std::size_t end) {
  Matrix out(x.rows(), end - begin);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = x(i, j);
  return out;
}

double match_rate(const Dataset& ds) {
  std::size_t m = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) m += ds.labels[i] == ds.simple_labels[i];
  return static_cast<double>(m) / static_cast<double>(ds.size());
}

// Train on one sample, score on another.
double probe_accuracy(const Matrix& h_fit, const std::vector<int>& y_fit, const Matrix& h_eval,
                      const std::vector<int>& y_eval, std::size_t c) {
  Rng rng(77);
  const auto head = model::fit_softmax_probe(h_fit, y_fit, c, 30, 0.05, rng);
  return model::argmax_accuracy(numerics::forward_logits(head, h_eval), y_eval);
}

// --- config and generators --------------------------------------------------

TEST(DominoConfig, Validation) {
  DominoConfig c;
  c.complex_dim = 4;
  EXPECT_THROW(build_generators(c), ConfigError);
  c = {};
  c.rho = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.sigma_simple = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(DominoConfig{}.input_dim(), 13u);
}

TEST(Generators, DirectionsAreOrthonormal) {
  for (std::uint64_t seed : {0u, 1u, 99u}) {
    const GeneratorState g = default_gen(seed);
    const Matrix gram = numerics::matmul_bt(g.directions, g.directions);
    for (std::size_t i = 0; i < gram.rows(); ++i)
      for (std::size_t j = 0; j < gram.cols(); ++j)
        EXPECT_NEAR(gram(i, j), i == j ? 1.0 : 0.0, 1e-10);
    // Reserved directions are orthogonal to the class directions too.
    const Matrix cross = numerics::matmul_bt(g.reserved_directions, g.directions);
    for (double v : cross.values()) EXPECT_NEAR(v, 0.0, 1e-10);
    EXPECT_NEAR(numerics::norm2(g.blob_direction), 1.0, 1e-12);
  }
}

TEST(Generators, DeterministicPerSeed) {
  EXPECT_EQ(default_gen(5).directions, default_gen(5).directions);
  const Matrix d = numerics::add(default_gen(5).directions,
                                 numerics::scaled(default_gen(6).directions, -1.0));
  EXPECT_GT(numerics::frobenius_norm_sq(d), 0.0);
}

TEST(Generators, NoReservedDirectionsWhenComplexBlockIsTight) {
  DominoConfig c;
  c.complex_dim = c.num_classes;
  const GeneratorState g = build_generators(c);
  EXPECT_TRUE(g.reserved_directions.empty());
  Rng rng(1);
  EXPECT_THROW(sample_anomalies(AnomalyKind::kHeldoutClass, 5, g, rng), ConfigError);
}

// --- sample -----------------------------------------------------------------

TEST(Sample, FullCorrelationPairsEverySample) {
  Rng rng(1);
  const Dataset ds = sample(default_gen(), 5000, rng, 1.0);
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(ds.labels[i], ds.simple_labels[i]);
}

TEST(Sample, MatchRateFollowsMixtureRule) {
  const GeneratorState g = default_gen();
  for (double rho : {0.95, 0.2, 0.5}) {
    Rng rng(static_cast<std::uint64_t>(rho * 1000));
    const Dataset ds = sample(g, 100000, rng, rho);
    EXPECT_NEAR(match_rate(ds), rho + (1.0 - rho) / 5.0, 0.01) << "rho " << rho;
  }
}

TEST(Sample, UnpairedSplitMatchesAtChance) {
  Rng rng(2);
  const Dataset ds = sample(default_gen(), 100000, rng, kUnpairedRho);
  EXPECT_NEAR(match_rate(ds), 0.2, 0.01);
}

TEST(Sample, LayoutAndLabels) {
  Rng rng(3);
  const GeneratorState g = default_gen();
  const Dataset ds = sample(g, 2000, rng, 1.0);
  ASSERT_EQ(ds.inputs.cols(), 13u);
  double complex_norm = 0.0, simple_peak = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ASSERT_GE(ds.labels[i], 0);
    ASSERT_LT(ds.labels[i], 5);
    simple_peak += ds.inputs(i, ds.simple_labels[i]);
    // |<x_complex, v_y>| is about 1 for the labeled direction.
    double proj = 0.0;
    for (std::size_t t = 0; t < 8; ++t) proj += ds.inputs(i, 5 + t) * g.directions(ds.labels[i], t);
    complex_norm += std::abs(proj);
  }
  EXPECT_NEAR(simple_peak / 2000.0, 1.0, 0.02);
  EXPECT_NEAR(complex_norm / 2000.0, 1.0, 0.02);
}

TEST(Sample, ComplexClassMeansVanish) {
  Rng rng(4);
  const Dataset ds = sample(default_gen(), 50000, rng, 1.0);
  std::vector<std::vector<double>> mean(5, std::vector<double>(8, 0.0));
  std::vector<double> count(5, 0.0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    count[ds.labels[i]] += 1.0;
    for (std::size_t t = 0; t < 8; ++t) mean[ds.labels[i]][t] += ds.inputs(i, 5 + t);
  }
  for (std::size_t c = 0; c < 5; ++c)
    for (double v : mean[c]) EXPECT_NEAR(v / count[c], 0.0, 0.03);
}

TEST(Sample, DeterministicAndRejectsEmpty) {
  const GeneratorState g = default_gen();
  Rng a(9), b(9);
  EXPECT_EQ(sample(g, 100, a, 0.9), sample(g, 100, b, 0.9));
  EXPECT_THROW(sample(g, 0, a), ConfigError);
  EXPECT_THROW(sample(g, 5, a, -0.1), ConfigError);
}

// Held-out mean cross-entropy of a probe.
double probe_loss(const numerics::Graph& head, const Matrix& h, const std::vector<int>& y) {
  return numerics::evaluate_loss(numerics::forward_logits(head, h),
                                 numerics::SoftmaxCrossEntropy{y})
      .value;
}

// Property: a linear read-out of the complex block carries no information
// about y (held-out loss stays at ln C), while the simple block is linearly
// separable against its own label.
TEST(Sample, LinearInformationPerBlock) {
  const GeneratorState g = default_gen();
  Rng r1(10), r2(11);
  const Dataset fit = sample(g, 10000, r1, 1.0);
  const Dataset eval = sample(g, 5000, r2, 1.0);
  Rng p1(77), p2(78);
  const auto complex_head =
      model::fit_softmax_probe(columns(fit.inputs, 5, 13), fit.labels, 5, 30, 0.05, p1);
  EXPECT_GE(probe_loss(complex_head, columns(eval.inputs, 5, 13), eval.labels),
            std::log(5.0) - 0.01);

  const auto simple_head =
      model::fit_softmax_probe(columns(fit.inputs, 0, 5), fit.simple_labels, 5, 30, 0.05, p2);
  EXPECT_LT(probe_loss(simple_head, columns(eval.inputs, 0, 5), eval.simple_labels), 0.1);
  EXPECT_GE(model::argmax_accuracy(numerics::forward_logits(simple_head, columns(eval.inputs, 0, 5)),
                                   eval.simple_labels),
            0.99);
}

// Zero class means do not pin argmax accuracy at chance: scoring class c by
// <x, v_c> is right on every positively signed sample and wrong otherwise.
TEST(Sample, SignAlignedLinearRuleScoresHalf) {
  const GeneratorState g = default_gen();
  Rng rng(12);
  const Dataset ds = sample(g, 20000, rng, 1.0);
  const numerics::Graph rule({numerics::Affine{g.directions, std::vector<double>(5, 0.0)}});
  const double acc = model::argmax_accuracy(
      numerics::forward_logits(rule, columns(ds.inputs, 5, 13)), ds.labels);
  EXPECT_NEAR(acc, 0.5, 0.02);
}

// --- sample_ood -------------------------------------------------------------

TEST(SampleOod, NullShiftReproducesSample) {
  const GeneratorState g = default_gen();
  Rng a(12), b(12);
  const Dataset plain = sample(g, 500, a, 0.95);
  const Dataset shifted = sample_ood(g, {0.0, 1.0}, 500, 0.95, b);
  EXPECT_EQ(plain.inputs, shifted.inputs);
  EXPECT_EQ(plain.labels, shifted.labels);
  EXPECT_EQ(shifted.provenance.split, Split::kOodTest);
}

TEST(SampleOod, RotationIsOrthogonal) {
  const GeneratorState g = default_gen();
  for (double angle : {kPi / 6.0, 1.0, kPi}) {
    const Matrix r = shift_rotation(g, angle);
    const Matrix rtr = numerics::matmul_at(r, r);
    for (std::size_t i = 0; i < rtr.rows(); ++i)
      for (std::size_t j = 0; j < rtr.cols(); ++j)
        EXPECT_NEAR(rtr(i, j), i == j ? 1.0 : 0.0, 1e-10);
    const Matrix rotated = numerics::matmul_bt(g.directions, r);
    for (std::size_t c = 0; c < rotated.rows(); ++c)
      EXPECT_NEAR(numerics::norm2(rotated.row(c)), 1.0, 1e-10);
  }
  // Every vector turns by exactly the angle (pairs of planes, even d_c).
  const Matrix r = shift_rotation(g, kPi / 6.0);
  const Matrix rotated = numerics::matmul_bt(g.directions, r);
  for (std::size_t c = 0; c < 5; ++c)
    EXPECT_NEAR(numerics::dot(rotated.row(c), g.directions.row(c)), std::cos(kPi / 6.0), 1e-10);
}

// A small MLP trained on unshifted complex blocks keeps most of its accuracy
// under the default shift.
TEST(SampleOod, TrainedOracleRetainsAccuracy) {
  const GeneratorState g = default_gen();
  Rng r1(13), r2(14), init(15), shuffle(16);
  const Dataset fit = sample(g, 5000, r1, 1.0);
  const Dataset ood = sample_ood(g, ShiftConfig{}, 2000, 1.0, r2);
  const Matrix x = columns(fit.inputs, 5, 13);
  const std::size_t widths[] = {8, 32, 5};
  numerics::Graph net = numerics::make_mlp(widths, init);
  numerics::SgdMomentum opt(net, 0.9);
  for (int epoch = 0; epoch < 30; ++epoch) {
    const auto order = shuffle.permutation(x.rows());
    for (std::size_t s = 0; s < order.size(); s += 64) {
      std::span<const std::size_t> idx(order.data() + s, std::min<std::size_t>(64, order.size() - s));
      std::vector<int> y;
      for (auto i : idx) y.push_back(fit.labels[i]);
      const auto acts = numerics::forward(net, numerics::gather_rows(x, idx));
      opt.step(net, numerics::backward(net, acts, numerics::SoftmaxCrossEntropy{y}).params, 0.05);
    }
  }
  const double acc = model::argmax_accuracy(
      numerics::forward_logits(net, columns(ood.inputs, 5, 13)), ood.labels);
  EXPECT_GE(acc, 0.5);
}

// --- corrupt ----------------------------------------------------------------

TEST(Corrupt, MagnitudeTableAndSeverityRange) {
  EXPECT_EQ(corruption_magnitude(CorruptionKind::kMaskZero, 2), 0.25);
  EXPECT_EQ(corruption_magnitude(CorruptionKind::kScaleDown, 3), 0.4);
  EXPECT_THROW(corruption_magnitude(CorruptionKind::kGaussianNoise, 0), ConfigError);
  EXPECT_THROW(corruption_magnitude(CorruptionKind::kGaussianNoise, 4), ConfigError);
  EXPECT_THROW(corruption_from_string("blur"), ConfigError);
  // Severities grow harsher: larger noise/shift/mask, smaller scale factor.
  for (auto k : kAllCorruptions) {
    const double m1 = corruption_magnitude(k, 1), m2 = corruption_magnitude(k, 2),
                 m3 = corruption_magnitude(k, 3);
    if (k == CorruptionKind::kScaleDown) {
      EXPECT_GT(m1, m2);
      EXPECT_GT(m2, m3);
    } else {
      EXPECT_LT(m1, m2);
      EXPECT_LT(m2, m3);
    }
  }
}

TEST(Corrupt, ZeroNoiseLeavesInputs) {
  Rng rng(1), crng(2);
  const Dataset ds = sample(default_gen(), 100, rng, 1.0);
  EXPECT_EQ(corrupt_with_magnitude(ds, CorruptionKind::kGaussianNoise, 0.0, crng).inputs,
            ds.inputs);
}

TEST(Corrupt, MaskZeroCountsRoundHalfUp) {
  Rng rng(1), crng(2);
  Dataset ds = sample(default_gen(), 200, rng, 1.0);
  for (double& v : ds.inputs.values()) v = 1.0 + std::abs(v);  // no natural zeros
  const Dataset masked = corrupt(ds, {CorruptionKind::kMaskZero, 2}, crng);
  for (std::size_t i = 0; i < masked.size(); ++i) {
    std::size_t zeros = 0;
    for (double v : masked.inputs.row(i)) zeros += v == 0.0;
    EXPECT_EQ(zeros, 3u);  // round(0.25 * 13)
  }
}

TEST(Corrupt, ScaleDownIsExact) {
  Rng rng(1), crng(2);
  const Dataset ds = sample(default_gen(), 100, rng, 1.0);
  const Dataset out = corrupt(ds, {CorruptionKind::kScaleDown, 2}, crng);
  for (std::size_t i = 0; i < ds.inputs.size(); ++i)
    EXPECT_EQ(out.inputs.values()[i], 0.6 * ds.inputs.values()[i]);
}

TEST(Corrupt, PreservesLabelsCountsAndTagsProvenance) {
  Rng rng(1);
  const Dataset ds = sample(default_gen(), 300, rng, 0.95);
  for (auto k : kAllCorruptions) {
    for (int s = 1; s <= 3; ++s) {
      Rng crng(s);
      const Dataset out = corrupt(ds, {k, s}, crng);
      EXPECT_EQ(out.size(), ds.size());
      EXPECT_EQ(out.labels, ds.labels);
      EXPECT_EQ(out.simple_labels, ds.simple_labels);
      EXPECT_EQ(out.provenance.to_string(), "corrupted:" + to_string(k) + ":" + std::to_string(s));
    }
  }
}

// --- anomalies --------------------------------------------------------------

TEST(Anomalies, GaussianMoments) {
  Rng rng(5);
  const Matrix x = sample_anomalies(AnomalyKind::kGaussian, 10000, default_gen(), rng);
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) m += x(i, j);
    EXPECT_NEAR(m / 10000.0, 0.0, 0.05);
  }
}

TEST(Anomalies, UniformRange) {
  Rng rng(5);
  const Matrix x = sample_anomalies(AnomalyKind::kUniform, 2000, default_gen(), rng);
  for (double v : x.values()) {
    EXPECT_GE(v, -2.0);
    EXPECT_LT(v, 2.0);
  }
}

// Power iteration on the sample covariance: the blob direction dominates.
TEST(Anomalies, BlobCovarianceIsRankDominated) {
  Rng rng(6);
  const GeneratorState g = default_gen();
  const Matrix x = sample_anomalies(AnomalyKind::kBlob, 5000, g, rng);
  const std::size_t d = x.cols();
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x(i, j) / x.rows();
  std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        cov[a][b] += (x(i, a) - mean[a]) * (x(i, b) - mean[b]) / (x.rows() - 1);
  double trace = 0.0;
  for (std::size_t a = 0; a < d; ++a) trace += cov[a][a];
  std::vector<double> v(d, 1.0);
  double lambda = 0.0;
  for (int it = 0; it < 200; ++it) {
    std::vector<double> w(d, 0.0);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) w[a] += cov[a][b] * v[b];
    double n = 0.0;
    for (double t : w) n += t * t;
    n = std::sqrt(n);
    lambda = n;
    for (std::size_t a = 0; a < d; ++a) v[a] = w[a] / n;
  }
  EXPECT_GT(lambda / trace, 0.9);
  double align = 0.0;
  for (std::size_t a = 0; a < d; ++a) align += v[a] * g.blob_direction[a];
  EXPECT_NEAR(std::abs(align), 1.0, 1e-3);
}

TEST(Anomalies, HeldoutClassUsesReservedDirections) {
  Rng rng(7);
  const GeneratorState g = default_gen();
  const Matrix x = sample_anomalies(AnomalyKind::kHeldoutClass, 1000, g, rng);
  ASSERT_EQ(x.cols(), 13u);
  double on_reserved = 0.0, on_classes = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto xc = x.row(i).subspan(5);
    for (std::size_t k = 0; k < 2; ++k)
      on_reserved += std::abs(numerics::dot(xc, g.reserved_directions.row(k)));
    for (std::size_t c = 0; c < 5; ++c)
      on_classes += std::abs(numerics::dot(xc, g.directions.row(c)));
  }
  EXPECT_GT(on_reserved / 1000.0, 0.9);        // about 1 + noise on one of two
  EXPECT_LT(on_classes / (5 * 1000.0), 0.2);   // only noise
}

TEST(Anomalies, RejectsEmptyRequest) {
  Rng rng(1);
  EXPECT_THROW(sample_anomalies(AnomalyKind::kGaussian, 0, default_gen(), rng), ConfigError);
}

// --- csv --------------------------------------------------------------------

TEST(Csv, HeaderAndRows) {
  Rng rng(1);
  Dataset ds = sample(default_gen(), 3, rng, 1.0);
  ds.provenance.split = Split::kIdTest;
  std::ostringstream os;
  write_csv(os, ds);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line,
            "x_0,x_1,x_2,x_3,x_4,x_5,x_6,x_7,x_8,x_9,x_10,x_11,x_12,y,l_s,provenance");
  int rows = 0;
  while (std::getline(is, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 15);
    EXPECT_TRUE(line.ends_with(",id_test"));
  }
  EXPECT_EQ(rows, 3);
  // 17 significant digits round-trip exactly.
  std::istringstream again(os.str());
  std::getline(again, line);
  std::getline(again, line);
  EXPECT_EQ(std::stod(line.substr(0, line.find(','))), ds.inputs(0, 0));
}

}  // namespace
