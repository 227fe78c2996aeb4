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

// Vector "dominoes": each sample concatenates a simple block (a noisy one-hot
// of the simple label) with a complex block (a noisy, randomly signed class
// direction). The label always comes from the complex block. The simple label
// agrees with it with probability rho, otherwise it is drawn uniformly.
//
// Input layout: columns [0, C) hold the simple block, [C, C + d_c) the complex
// block.

#ifndef ADAPTLAB_DATA_GEN_HPP_
#define ADAPTLAB_DATA_GEN_HPP_

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "adaptlab/numerics.hpp"

namespace adaptlab::data {

using numerics::Matrix;
using numerics::Rng;

inline constexpr double kPi = 3.14159265358979323846;

struct DominoConfig {
  std::size_t num_classes = 5;
  std::size_t complex_dim = 8;
  double rho = 1.0;
  double sigma_simple = 0.1;
  double sigma_complex = 0.15;
  std::uint64_t seed = 0;

  std::size_t simple_dim() const { return num_classes; }
  std::size_t input_dim() const { return num_classes + complex_dim; }

  void validate() const {
    if (num_classes < 2) throw ConfigError("DominoConfig: need at least 2 classes");
    if (complex_dim < num_classes) {
      throw ConfigError("DominoConfig: complex_dim (" + std::to_string(complex_dim) +
                        ") must be >= num_classes (" + std::to_string(num_classes) + ")");
    }
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("DominoConfig: rho must lie in [0,1]");
    if (!(sigma_simple > 0.0) || !(sigma_complex > 0.0)) {
      throw ConfigError("DominoConfig: noise levels must be positive");
    }
  }
};

struct ShiftConfig {
  double rotation_angle = kPi / 6.0;
  double noise_scale = 1.5;
};

enum class Split { kTrain, kIdTest, kOodTest, kRandomized, kCorrupted, kAnomaly };

enum class CorruptionKind { kGaussianNoise, kUniformNoise, kMaskZero, kScaleDown, kConstantShift };

enum class AnomalyKind { kGaussian, kUniform, kBlob, kHeldoutClass };

inline constexpr std::array<CorruptionKind, 5> kAllCorruptions = {
    CorruptionKind::kGaussianNoise, CorruptionKind::kUniformNoise, CorruptionKind::kMaskZero,
    CorruptionKind::kScaleDown, CorruptionKind::kConstantShift};

inline constexpr std::array<AnomalyKind, 4> kAllAnomalies = {
    AnomalyKind::kGaussian, AnomalyKind::kUniform, AnomalyKind::kBlob,
    AnomalyKind::kHeldoutClass};

inline std::string to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::kGaussianNoise: return "gaussian_noise";
    case CorruptionKind::kUniformNoise: return "uniform_noise";
    case CorruptionKind::kMaskZero: return "mask_zero";
    case CorruptionKind::kScaleDown: return "scale_down";
    case CorruptionKind::kConstantShift: return "constant_shift";
  }
  return "?";
}

inline std::string to_string(AnomalyKind k) {
  switch (k) {
    case AnomalyKind::kGaussian: return "gaussian";
    case AnomalyKind::kUniform: return "uniform";
    case AnomalyKind::kBlob: return "blob";
    case AnomalyKind::kHeldoutClass: return "heldout_class";
  }
  return "?";
}

inline CorruptionKind corruption_from_string(const std::string& s) {
  for (CorruptionKind k : kAllCorruptions)
    if (to_string(k) == s) return k;
  throw ConfigError("unknown corruption kind '" + s + "'");
}

inline AnomalyKind anomaly_from_string(const std::string& s) {
  for (AnomalyKind k : kAllAnomalies)
    if (to_string(k) == s) return k;
  throw ConfigError("unknown anomaly kind '" + s + "'");
}

struct Provenance {
  Split split = Split::kTrain;
  CorruptionKind corruption = CorruptionKind::kGaussianNoise;
  int severity = 0;
  AnomalyKind anomaly = AnomalyKind::kGaussian;

  std::string to_string() const {
    switch (split) {
      case Split::kTrain: return "train";
      case Split::kIdTest: return "id_test";
      case Split::kOodTest: return "ood_test";
      case Split::kRandomized: return "randomized";
      case Split::kCorrupted:
        return "corrupted:" + data::to_string(corruption) + ":" + std::to_string(severity);
      case Split::kAnomaly: return "anomaly:" + data::to_string(anomaly);
    }
    return "?";
  }
  bool operator==(const Provenance&) const = default;
};

struct Dataset {
  Matrix inputs;                // n x (C + d_c)
  std::vector<int> labels;      // complex-block class
  std::vector<int> simple_labels;
  Provenance provenance;

  std::size_t size() const { return inputs.rows(); }
  bool operator==(const Dataset&) const = default;
};

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::kGaussianNoise;
  int severity = 1;
};

// Per-kind magnitudes for severities 1..3.
inline double corruption_magnitude(CorruptionKind kind, int severity) {
  if (severity < 1 || severity > 3) {
    throw ConfigError("corruption severity must be 1, 2 or 3 (got " +
                      std::to_string(severity) + ")");
  }
  static constexpr double kGaussian[] = {0.1, 0.2, 0.4};
  static constexpr double kUniform[] = {0.1, 0.2, 0.4};
  static constexpr double kMask[] = {0.1, 0.25, 0.5};
  static constexpr double kScale[] = {0.8, 0.6, 0.4};
  static constexpr double kShift[] = {0.2, 0.5, 1.0};
  const int i = severity - 1;
  switch (kind) {
    case CorruptionKind::kGaussianNoise: return kGaussian[i];
    case CorruptionKind::kUniformNoise: return kUniform[i];
    case CorruptionKind::kMaskZero: return kMask[i];
    case CorruptionKind::kScaleDown: return kScale[i];
    case CorruptionKind::kConstantShift: return kShift[i];
  }
  throw ConfigError("unknown corruption kind");
}

// Number of reserved directions for the held-out-class anomaly set.
inline constexpr std::size_t kHeldoutDirections = 2;

struct GeneratorState {
  DominoConfig config;
  Matrix directions;           // C x d_c, orthonormal rows
  Matrix reserved_directions;  // K x d_c, orthonormal to directions; empty if d_c < C + K
  std::vector<double> blob_direction;  // unit vector in input space
};

namespace detail {

// Orthonormalizes the rows of m in place (modified Gram-Schmidt).
inline bool orthonormalize_rows(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto ri = m.row(i);
    for (std::size_t j = 0; j < i; ++j) {
      auto rj = m.row(j);
      const double d = numerics::dot(ri, rj);
      for (std::size_t t = 0; t < ri.size(); ++t) ri[t] -= d * rj[t];
    }
    const double n = numerics::norm2(ri);
    if (n < 1e-8) return false;
    for (double& v : ri) v /= n;
  }
  return true;
}

inline Matrix random_orthonormal_rows(std::size_t rows, std::size_t cols, Rng& rng) {
  for (;;) {
    Matrix m = rng.normal_matrix(rows, cols);
    if (orthonormalize_rows(m)) return m;
  }
}

struct SampleParams {
  const Matrix* directions;
  double sigma_complex;
  double rho;
};

inline Dataset sample_dominoes(const GeneratorState& gen, const SampleParams& sp,
                               std::size_t n, Rng& rng) {
  const DominoConfig& cfg = gen.config;
  const std::size_t c = cfg.num_classes;
  const std::size_t dc = cfg.complex_dim;
  Dataset ds;
  ds.inputs = Matrix(n, c + dc);
  ds.labels.resize(n);
  ds.simple_labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto x = ds.inputs.row(i);
    const std::size_t lc = rng.below(c);
    const double sign = rng.coin() ? 1.0 : -1.0;
    auto dir = sp.directions->row(lc);
    for (std::size_t t = 0; t < dc; ++t) {
      x[c + t] = sign * dir[t] + sp.sigma_complex * rng.normal();
    }
    const bool paired = rng.uniform() < sp.rho;
    const std::size_t ls = paired ? lc : rng.below(c);
    for (std::size_t t = 0; t < c; ++t) {
      x[t] = (t == ls ? 1.0 : 0.0) + cfg.sigma_simple * rng.normal();
    }
    ds.labels[i] = static_cast<int>(lc);
    ds.simple_labels[i] = static_cast<int>(ls);
  }
  return ds;
}

}  // namespace detail

inline GeneratorState build_generators(const DominoConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  Rng dir_rng = rng.derive("class_directions");
  const std::size_t c = cfg.num_classes;
  const std::size_t total =
      cfg.complex_dim >= c + kHeldoutDirections ? c + kHeldoutDirections : c;
  Matrix all = detail::random_orthonormal_rows(total, cfg.complex_dim, dir_rng);

  GeneratorState gen;
  gen.config = cfg;
  gen.directions = Matrix(c, cfg.complex_dim);
  std::copy_n(all.data(), c * cfg.complex_dim, gen.directions.data());
  if (total > c) {
    gen.reserved_directions = Matrix(kHeldoutDirections, cfg.complex_dim);
    std::copy_n(all.data() + c * cfg.complex_dim, kHeldoutDirections * cfg.complex_dim,
                gen.reserved_directions.data());
  }
  Rng blob_rng = rng.derive("blob_direction");
  Matrix u = detail::random_orthonormal_rows(1, cfg.input_dim(), blob_rng);
  gen.blob_direction = u.values();
  return gen;
}

// At rho = 0 every simple label is an independent uniform draw, so the simple
// block carries no information about y (match rate exactly 1/C). Randomized
// test splits and the pretraining stream use this.
inline constexpr double kUnpairedRho = 0.0;

// Samples n dominoes; rho defaults to the generator's configured correlation.
inline Dataset sample(const GeneratorState& gen, std::size_t n, Rng& rng,
                      std::optional<double> rho_override = std::nullopt) {
  if (n < 1) throw ConfigError("sample: n must be >= 1");
  const double rho = rho_override.value_or(gen.config.rho);
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("sample: rho must lie in [0,1]");
  Dataset ds = detail::sample_dominoes(
      gen, {&gen.directions, gen.config.sigma_complex, rho}, n, rng);
  ds.provenance.split = Split::kTrain;
  return ds;
}

// Orthogonal map on the complex space that rotates every vector by `angle`:
// R = Q * blockdiag(rot(angle), ...) * Q^T for a seeded orthonormal basis Q.
// For odd d_c the last basis vector is left fixed. angle == 0 yields exactly I.
inline Matrix shift_rotation(const GeneratorState& gen, double angle) {
  const std::size_t dc = gen.config.complex_dim;
  if (angle == 0.0) return Matrix::identity(dc);
  Rng rng = Rng(gen.config.seed).derive("shift_rotation");
  Matrix q = detail::random_orthonormal_rows(dc, dc, rng);  // rows are basis vectors
  Matrix block = Matrix::identity(dc);
  const double cs = std::cos(angle);
  const double sn = std::sin(angle);
  for (std::size_t k = 0; k + 1 < dc; k += 2) {
    block(k, k) = cs;
    block(k, k + 1) = -sn;
    block(k + 1, k) = sn;
    block(k + 1, k + 1) = cs;
  }
  // R = Q^T B Q with q's rows as basis vectors.
  return numerics::matmul(numerics::transpose(q), numerics::matmul(block, q));
}

inline Dataset sample_ood(const GeneratorState& gen, const ShiftConfig& shift, std::size_t n,
                          double rho, Rng& rng) {
  if (n < 1) throw ConfigError("sample_ood: n must be >= 1");
  if (!(shift.noise_scale > 0.0)) throw ConfigError("sample_ood: noise_scale must be > 0");
  const Matrix rot = shift_rotation(gen, shift.rotation_angle);
  const Matrix shifted =
      shift.rotation_angle == 0.0 ? gen.directions : numerics::matmul_bt(gen.directions, rot);
  Dataset ds = detail::sample_dominoes(
      gen, {&shifted, shift.noise_scale * gen.config.sigma_complex, rho}, n, rng);
  ds.provenance.split = Split::kOodTest;
  return ds;
}

// Applies a corruption of the given magnitude; see corrupt() for severities.
inline Dataset corrupt_with_magnitude(const Dataset& ds, CorruptionKind kind, double magnitude,
                                      Rng& rng) {
  Dataset out = ds;
  Matrix& x = out.inputs;
  const std::size_t d = x.cols();
  switch (kind) {
    case CorruptionKind::kGaussianNoise:
      for (double& v : x.values()) v += magnitude * rng.normal();
      break;
    case CorruptionKind::kUniformNoise:
      for (double& v : x.values()) v += rng.uniform(-magnitude, magnitude);
      break;
    case CorruptionKind::kMaskZero: {
      const auto m = static_cast<std::size_t>(std::floor(magnitude * static_cast<double>(d) + 0.5));
      for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j : rng.choose(d, std::min(m, d))) x(i, j) = 0.0;
      }
      break;
    }
    case CorruptionKind::kScaleDown:
      for (double& v : x.values()) v *= magnitude;
      break;
    case CorruptionKind::kConstantShift:
      for (double& v : x.values()) v += magnitude;
      break;
  }
  return out;
}

inline Dataset corrupt(const Dataset& ds, const CorruptionSpec& spec, Rng& rng) {
  Dataset out =
      corrupt_with_magnitude(ds, spec.kind, corruption_magnitude(spec.kind, spec.severity), rng);
  out.provenance.split = Split::kCorrupted;
  out.provenance.corruption = spec.kind;
  out.provenance.severity = spec.severity;
  return out;
}

// Unlabeled anomaly inputs in the domino input space.
inline Matrix sample_anomalies(AnomalyKind kind, std::size_t n, const GeneratorState& gen,
                               Rng& rng) {
  if (n < 1) throw ConfigError("sample_anomalies: n must be >= 1");
  const std::size_t d = gen.config.input_dim();
  Matrix x(n, d);
  switch (kind) {
    case AnomalyKind::kGaussian:
      for (double& v : x.values()) v = rng.normal();
      break;
    case AnomalyKind::kUniform:
      for (double& v : x.values()) v = rng.uniform(-2.0, 2.0);
      break;
    case AnomalyKind::kBlob:
      for (std::size_t i = 0; i < n; ++i) {
        const double s = rng.uniform(-2.0, 2.0);
        for (std::size_t j = 0; j < d; ++j) {
          x(i, j) = s * gen.blob_direction[j] + 0.1 * rng.normal();
        }
      }
      break;
    case AnomalyKind::kHeldoutClass: {
      if (gen.reserved_directions.empty()) {
        throw ConfigError("sample_anomalies: heldout_class needs complex_dim >= num_classes + " +
                          std::to_string(kHeldoutDirections));
      }
      // Dominoes whose complex block uses a reserved direction. The simple block
      // is a regular (uniformly drawn) one-hot so only the complex part is novel.
      const std::size_t c = gen.config.num_classes;
      const std::size_t dc = gen.config.complex_dim;
      for (std::size_t i = 0; i < n; ++i) {
        auto row = x.row(i);
        const std::size_t k = rng.below(kHeldoutDirections);
        const double sign = rng.coin() ? 1.0 : -1.0;
        auto dir = gen.reserved_directions.row(k);
        for (std::size_t t = 0; t < dc; ++t) {
          row[c + t] = sign * dir[t] + gen.config.sigma_complex * rng.normal();
        }
        const std::size_t ls = rng.below(c);
        for (std::size_t t = 0; t < c; ++t) {
          row[t] = (t == ls ? 1.0 : 0.0) + gen.config.sigma_simple * rng.normal();
        }
      }
      break;
    }
  }
  return x;
}

// CSV layout: x_0..x_{d-1},y,l_s,provenance. Doubles use 17 significant digits.
inline void write_csv(std::ostream& os, const Dataset& ds) {
  const std::size_t d = ds.inputs.cols();
  for (std::size_t j = 0; j < d; ++j) os << "x_" << j << ",";
  os << "y,l_s,provenance\n";
  const std::string prov = ds.provenance.to_string();
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", ds.inputs(i, j));
      os << buf << ",";
    }
    if (i < ds.labels.size()) os << ds.labels[i];
    os << ",";
    if (i < ds.simple_labels.size()) os << ds.simple_labels[i];
    os << "," << prov << "\n";
  }
}

}  // namespace adaptlab::data

#endif  // ADAPTLAB_DATA_GEN_HPP_
