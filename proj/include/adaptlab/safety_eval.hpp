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

// Generalization and safety metrics: accuracies, binned calibration RMSE,
// max-softmax anomaly AUROC, L-inf PGD robustness and linear CKA.

#ifndef ADAPTLAB_SAFETY_EVAL_HPP_
#define ADAPTLAB_SAFETY_EVAL_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "adaptlab/data_gen.hpp"
#include "adaptlab/model.hpp"
#include "adaptlab/numerics.hpp"

namespace adaptlab::safety {

using model::ModelState;
using numerics::Matrix;
using numerics::Rng;

struct MetricReport {
  double id_acc = 0.0;     // unshifted, training correlation
  double ood_acc = 0.0;    // shifted, training correlation
  double corr_acc = 0.0;   // unshifted, simple block always paired (rho = 1)
  double rand_acc = 0.0;   // shifted, simple label independent of y
  double mca = 0.0;        // mean accuracy over the corrupted sets
  double adv_acc = 0.0;    // PGD accuracy on id_test
  double calib_id = 0.0;   // 1 - RMS calibration error
  double calib_corrupted = 0.0;
  double calib_ood = 0.0;
  double anomaly_auroc = 0.0;  // mean over anomaly kinds
  double cka = 0.0;            // snapshot vs adapted representation on id_test
  std::vector<std::pair<std::string, double>> corruption_acc;
};

struct PgdConfig {
  double epsilon = 0.05;
  int steps = 10;
  double step_fraction = 0.25;  // step = epsilon * step_fraction
  bool random_start = true;
  std::uint64_t seed = 0;
};

// Index of the largest entry; the lowest index wins ties.
inline std::size_t predicted_class(std::span<const double> row) { return numerics::argmax(row); }

inline double accuracy_from_logits(const Matrix& logits, const std::vector<int>& y) {
  if (logits.rows() == 0) throw ConfigError("accuracy: empty dataset");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (predicted_class(logits.row(i)) == static_cast<std::size_t>(y[i])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

inline double accuracy(const ModelState& m, const data::Dataset& ds) {
  if (ds.size() == 0) throw ConfigError("accuracy: empty dataset");
  return accuracy_from_logits(model::logits(m, ds.inputs), ds.labels);
}

// Root-mean-square calibration error over equal-width confidence bins, each
// nonempty bin weighted by its count.
inline double calibration_rmse(std::span<const double> confidence, std::span<const char> correct,
                               int bins = 15) {
  if (confidence.empty()) throw ConfigError("calibration_rmse: empty input");
  if (confidence.size() != correct.size()) {
    throw ConfigError("calibration_rmse: confidence/correct size mismatch");
  }
  if (bins < 1) throw ConfigError("calibration_rmse: need at least one bin");
  std::vector<double> conf_sum(bins, 0.0);
  std::vector<std::size_t> hits(bins, 0), count(bins, 0);
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    const double c = confidence[i];
    if (!(c >= 0.0 && c <= 1.0)) throw ConfigError("calibration_rmse: confidence outside [0,1]");
    const int b = std::min(bins - 1, static_cast<int>(std::floor(c * bins)));
    conf_sum[b] += c;
    count[b] += 1;
    hits[b] += correct[i] ? 1 : 0;
  }
  double total = 0.0;
  for (int b = 0; b < bins; ++b) {
    if (count[b] == 0) continue;
    const double n = static_cast<double>(count[b]);
    const double gap = static_cast<double>(hits[b]) / n - conf_sum[b] / n;
    total += n * gap * gap;
  }
  return std::sqrt(total / static_cast<double>(confidence.size()));
}

struct Confidences {
  std::vector<double> confidence;  // max softmax probability
  std::vector<char> correct;
};

inline Confidences confidences(const Matrix& probs, const std::vector<int>& y) {
  Confidences out;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const std::size_t k = predicted_class(probs.row(i));
    out.confidence.push_back(probs(i, k));
    out.correct.push_back(static_cast<std::size_t>(y[i]) == k ? 1 : 0);
  }
  return out;
}

inline std::vector<double> max_softmax(const Matrix& probs) {
  std::vector<double> out(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    auto r = probs.row(i);
    out[i] = *std::max_element(r.begin(), r.end());
  }
  return out;
}

// P(id score > anomaly score) + 0.5 P(tie), counted over all pairs by sorting.
inline double auroc(std::span<const double> id_scores, std::span<const double> anomaly_scores) {
  if (id_scores.empty() || anomaly_scores.empty()) {
    throw ConfigError("auroc: both score sets must be nonempty");
  }
  std::vector<double> anom(anomaly_scores.begin(), anomaly_scores.end());
  std::sort(anom.begin(), anom.end());
  // Twice the credit, kept integral: 2 per win, 1 per tie.
  std::uint64_t credit = 0;
  for (double s : id_scores) {
    const auto lo = std::lower_bound(anom.begin(), anom.end(), s);
    const auto hi = std::upper_bound(lo, anom.end(), s);
    credit += 2 * static_cast<std::uint64_t>(lo - anom.begin()) +
              static_cast<std::uint64_t>(hi - lo);
  }
  const double pairs =
      2.0 * static_cast<double>(id_scores.size()) * static_cast<double>(anom.size());
  return static_cast<double>(credit) / pairs;
}

// Linear CKA of column-centered representations:
// ||H1^T H2||_F^2 / (||H1^T H1||_F ||H2^T H2||_F).
inline double linear_cka(const Matrix& h1, const Matrix& h2) {
  if (h1.rows() != h2.rows()) throw ConfigError("linear_cka: sample counts differ");
  if (h1.rows() == 0) throw ConfigError("linear_cka: empty representation");
  auto center = [](Matrix m) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < m.rows(); ++i) mean += m(i, j);
      mean /= static_cast<double>(m.rows());
      for (std::size_t i = 0; i < m.rows(); ++i) m(i, j) -= mean;
    }
    return m;
  };
  const Matrix a = center(h1);
  const Matrix b = center(h2);
  const double cross = numerics::frobenius_norm_sq(numerics::matmul_at(a, b));
  const double self_a = numerics::frobenius_norm_sq(numerics::matmul_at(a, a));
  const double self_b = numerics::frobenius_norm_sq(numerics::matmul_at(b, b));
  if (!(self_a > 0.0) || !(self_b > 0.0)) {
    throw ConfigError("linear_cka: zero-variance representation");
  }
  return std::min(1.0, cross / std::sqrt(self_a * self_b));
}

// Gradient of the summed cross-entropy with respect to the model input.
inline Matrix input_gradient(const ModelState& m, const Matrix& x, const std::vector<int>& y) {
  const auto acts_e = numerics::forward(m.extractor, x);
  const auto acts_h = numerics::forward(m.head, acts_e.logits());
  auto gh = numerics::backward(m.head, acts_h, numerics::SoftmaxCrossEntropy{y},
                               numerics::Reduction::kSum);
  return numerics::backward_from(m.extractor, acts_e, std::move(gh.input_grad)).input_grad;
}

// Accuracy under an L-inf PGD attack with random start and sign-gradient steps.
inline double pgd_accuracy(const ModelState& m, const data::Dataset& ds, const PgdConfig& cfg) {
  if (ds.size() == 0) throw ConfigError("pgd: empty dataset");
  if (!(cfg.epsilon >= 0.0)) throw ConfigError("pgd: epsilon must be >= 0");
  Rng rng = Rng(cfg.seed).derive("pgd_start");
  const double eps = cfg.epsilon;
  const double step = eps * cfg.step_fraction;
  Matrix adv = ds.inputs;
  if (cfg.random_start) {
    for (double& v : adv.values()) v += rng.uniform(-eps, eps);
  }
  constexpr std::size_t kChunk = 1024;
  std::size_t hits = 0;
  for (std::size_t s = 0; s < ds.size(); s += kChunk) {
    const std::size_t e = std::min(ds.size(), s + kChunk);
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < e; ++i) idx.push_back(i);
    const Matrix x0 = numerics::gather_rows(ds.inputs, idx);
    Matrix x = numerics::gather_rows(adv, idx);
    const std::vector<int> y(ds.labels.begin() + s, ds.labels.begin() + e);
    for (int t = 0; t < cfg.steps; ++t) {
      const Matrix g = input_gradient(m, x, y);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double gi = g.values()[i];
        const double sg = gi > 0.0 ? 1.0 : (gi < 0.0 ? -1.0 : 0.0);
        const double base = x0.values()[i];
        x.values()[i] = std::clamp(x.values()[i] + step * sg, base - eps, base + eps);
      }
    }
    const Matrix lg = model::logits(m, x);
    for (std::size_t i = 0; i < lg.rows(); ++i) {
      if (predicted_class(lg.row(i)) == static_cast<std::size_t>(y[i])) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(ds.size());
}

// ---------------------------------------------------------------------------
// Evaluation sets and the full suite
// ---------------------------------------------------------------------------

struct EvalSets {
  std::map<std::string, data::Dataset> labeled;  // id_test, ood_test, correlated, ...
  std::map<std::string, Matrix> anomalies;       // anomaly:<kind>
};

inline std::string corrupted_key(data::CorruptionKind k, int severity) {
  return "corrupted:" + data::to_string(k) + ":" + std::to_string(severity);
}

inline std::string anomaly_key(data::AnomalyKind k) { return "anomaly:" + data::to_string(k); }

inline std::vector<std::string> required_labeled_splits() {
  std::vector<std::string> out = {"id_test", "ood_test", "correlated", "randomized"};
  for (auto k : data::kAllCorruptions)
    for (int s = 1; s <= 3; ++s) out.push_back(corrupted_key(k, s));
  return out;
}

inline std::vector<std::string> required_anomaly_sets() {
  std::vector<std::string> out;
  for (auto k : data::kAllAnomalies) out.push_back(anomaly_key(k));
  return out;
}

// Builds every split evaluate_suite needs, each from its own substream of rng.
inline EvalSets make_eval_sets(const data::GeneratorState& gen, double rho,
                               const data::ShiftConfig& shift, std::size_t n_test,
                               std::size_t n_anomaly, const Rng& rng) {
  EvalSets sets;
  Rng r_id = rng.derive("id_test");
  data::Dataset id = data::sample(gen, n_test, r_id, rho);
  id.provenance.split = data::Split::kIdTest;
  Rng r_ood = rng.derive("ood_test");
  sets.labeled["ood_test"] = data::sample_ood(gen, shift, n_test, rho, r_ood);
  Rng r_corr = rng.derive("correlated");
  data::Dataset corr = data::sample(gen, n_test, r_corr, 1.0);
  corr.provenance.split = data::Split::kIdTest;
  sets.labeled["correlated"] = std::move(corr);
  Rng r_rand = rng.derive("randomized");
  data::Dataset rand = data::sample_ood(gen, shift, n_test, data::kUnpairedRho, r_rand);
  rand.provenance.split = data::Split::kRandomized;
  sets.labeled["randomized"] = std::move(rand);
  std::uint64_t idx = 0;
  for (auto k : data::kAllCorruptions) {
    for (int s = 1; s <= 3; ++s) {
      Rng rc = rng.derive("corrupt", idx++);
      sets.labeled[corrupted_key(k, s)] = data::corrupt(id, {k, s}, rc);
    }
  }
  sets.labeled["id_test"] = std::move(id);
  idx = 0;
  for (auto k : data::kAllAnomalies) {
    Rng ra = rng.derive("anomaly", idx++);
    sets.anomalies[anomaly_key(k)] = data::sample_anomalies(k, n_anomaly, gen, ra);
  }
  return sets;
}

inline MetricReport evaluate_suite(const ModelState& m, const EvalSets& sets,
                                   const PgdConfig& pgd) {
  std::string missing;
  for (const auto& key : required_labeled_splits())
    if (!sets.labeled.contains(key)) missing += " " + key;
  for (const auto& key : required_anomaly_sets())
    if (!sets.anomalies.contains(key)) missing += " " + key;
  if (!missing.empty()) throw ConfigError("evaluate_suite: missing splits:" + missing);

  auto one_minus_rmse = [&](const data::Dataset& ds) {
    const Confidences c = confidences(model::predict(m, ds.inputs), ds.labels);
    return 1.0 - calibration_rmse(c.confidence, c.correct);
  };

  MetricReport r;
  const data::Dataset& id = sets.labeled.at("id_test");
  r.id_acc = accuracy(m, id);
  r.ood_acc = accuracy(m, sets.labeled.at("ood_test"));
  r.corr_acc = accuracy(m, sets.labeled.at("correlated"));
  r.rand_acc = accuracy(m, sets.labeled.at("randomized"));
  r.calib_id = one_minus_rmse(id);
  r.calib_ood = one_minus_rmse(sets.labeled.at("ood_test"));

  double acc_sum = 0.0, calib_sum = 0.0;
  std::size_t nc = 0;
  for (auto k : data::kAllCorruptions) {
    for (int s = 1; s <= 3; ++s) {
      const std::string key = corrupted_key(k, s);
      const data::Dataset& ds = sets.labeled.at(key);
      const double a = accuracy(m, ds);
      r.corruption_acc.emplace_back(key, a);
      acc_sum += a;
      calib_sum += one_minus_rmse(ds);
      ++nc;
    }
  }
  r.mca = acc_sum / static_cast<double>(nc);
  r.calib_corrupted = calib_sum / static_cast<double>(nc);

  const std::vector<double> id_scores = max_softmax(model::predict(m, id.inputs));
  double auc_sum = 0.0;
  for (const auto& key : required_anomaly_sets()) {
    auc_sum += auroc(id_scores, max_softmax(model::predict(m, sets.anomalies.at(key))));
  }
  r.anomaly_auroc = auc_sum / static_cast<double>(required_anomaly_sets().size());

  r.adv_acc = pgd_accuracy(m, id, pgd);
  r.cka = linear_cka(model::embed(m.pretrained_snapshot, id.inputs),
                     model::embed(m.extractor, id.inputs));
  return r;
}

}  // namespace adaptlab::safety

#endif  // ADAPTLAB_SAFETY_EVAL_HPP_
