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

#ifndef ADAPTLAB_MODEL_HPP_
#define ADAPTLAB_MODEL_HPP_

#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "adaptlab/data_gen.hpp"
#include "adaptlab/numerics.hpp"

namespace adaptlab::model {

using numerics::Graph;
using numerics::Matrix;
using numerics::Rng;

class PretrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kHiddenWidth = 64;
inline constexpr std::size_t kRepresentationDim = 32;

// Extractor: affine-relu-affine-relu-affine with widths [d_in, 64, 64, p].
inline Graph make_extractor(std::size_t input_dim, Rng& rng,
                            std::size_t rep_dim = kRepresentationDim) {
  const std::size_t widths[] = {input_dim, kHiddenWidth, kHiddenWidth, rep_dim};
  return numerics::make_mlp(widths, rng);
}

// Linear head with 1/fan_in weight variance and zero bias.
inline Graph make_head(std::size_t rep_dim, std::size_t num_classes, Rng& rng) {
  const std::size_t widths[] = {rep_dim, num_classes};
  return numerics::make_mlp(widths, rng);
}

struct ModelState {
  Graph extractor;
  Graph head;
  Graph pretrained_snapshot;  // extractor as it was when adaptation started
};

inline Matrix embed(const Graph& extractor, const Matrix& x) {
  return numerics::forward_logits(extractor, x);
}

inline Matrix logits(const ModelState& m, const Matrix& x) {
  return numerics::forward_logits(m.head, embed(m.extractor, x));
}

inline Matrix predict(const ModelState& m, const Matrix& x) {
  return numerics::softmax(logits(m, x));
}

// ---------------------------------------------------------------------------
// Linear read-outs used to check what a representation encodes.
// ---------------------------------------------------------------------------

// Softmax probe trained by minibatch SGD (momentum 0.9) on a fixed feature
// matrix; returns the trained head.
inline Graph fit_softmax_probe(const Matrix& h, const std::vector<int>& y,
                               std::size_t num_classes, std::size_t epochs, double lr,
                               Rng& rng, std::size_t batch = 128) {
  Rng init = rng.derive("probe_init");
  Rng shuffle = rng.derive("probe_shuffle");
  Graph head = make_head(h.cols(), num_classes, init);
  numerics::SgdMomentum opt(head, 0.9);
  const std::size_t n = h.rows();
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto order = shuffle.permutation(n);
    for (std::size_t s = 0; s < n; s += batch) {
      std::span<const std::size_t> idx(order.data() + s, std::min(batch, n - s));
      Matrix hb = numerics::gather_rows(h, idx);
      std::vector<int> yb;
      for (std::size_t i : idx) yb.push_back(y[i]);
      auto acts = numerics::forward(head, hb);
      auto g = numerics::backward(head, acts, numerics::SoftmaxCrossEntropy{yb});
      opt.step(head, g.params, lr);
    }
  }
  return head;
}

inline double argmax_accuracy(const Matrix& logits, const std::vector<int>& y) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (numerics::argmax(logits.row(i)) == static_cast<std::size_t>(y[i])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

// Least-squares affine map from features to targets: returns (p+1) x t
// coefficients with the bias in the last row.
inline Matrix fit_least_squares(const Matrix& h, const Matrix& target, double ridge = 1e-8) {
  Matrix a(h.rows(), h.cols() + 1, 1.0);
  for (std::size_t i = 0; i < h.rows(); ++i)
    for (std::size_t j = 0; j < h.cols(); ++j) a(i, j) = h(i, j);
  return numerics::cholesky_solve(numerics::matmul_at(a, a), numerics::matmul_at(a, target),
                                  ridge);
}

inline Matrix apply_least_squares(const Matrix& h, const Matrix& coef) {
  Matrix out(h.rows(), coef.cols());
  for (std::size_t i = 0; i < h.rows(); ++i) {
    for (std::size_t k = 0; k < coef.cols(); ++k) {
      double s = coef(h.cols(), k);
      for (std::size_t j = 0; j < h.cols(); ++j) s += h(i, j) * coef(j, k);
      out(i, k) = s;
    }
  }
  return out;
}

// Pooled coefficient of determination over all target columns.
inline double r_squared(const Matrix& pred, const Matrix& target) {
  double sse = 0.0, sst = 0.0;
  for (std::size_t j = 0; j < target.cols(); ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < target.rows(); ++i) mean += target(i, j);
    mean /= static_cast<double>(target.rows());
    for (std::size_t i = 0; i < target.rows(); ++i) {
      const double r = pred(i, j) - target(i, j);
      const double c = target(i, j) - mean;
      sse += r * r;
      sst += c * c;
    }
  }
  return 1.0 - sse / sst;
}

inline Matrix simple_block(const data::Dataset& ds, std::size_t num_classes) {
  Matrix s(ds.size(), num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = 0; j < num_classes; ++j) s(i, j) = ds.inputs(i, j);
  return s;
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct PretrainConfig {
  std::size_t epochs = 50;
  std::size_t num_samples = 20000;
  std::size_t batch_size = 128;
  double lr = 0.01;
  double momentum = 0.9;
  double recon_weight = 1.0;  // lambda on the simple-block reconstruction term
  std::size_t rep_dim = kRepresentationDim;
  std::uint64_t seed = 0;
  // Post-check thresholds.
  double min_probe_accuracy = 0.90;
  double min_recon_r2 = 0.8;
  std::size_t check_samples = 5000;
};

struct PretrainResult {
  Graph extractor;
  double probe_accuracy = 0.0;  // fresh softmax probe on h, complex features only
  double recon_r2 = 0.0;        // least-squares recovery of the simple block from h
  std::vector<double> loss_log;
};

struct RepresentationChecks {
  double probe_accuracy = 0.0;
  double recon_r2 = 0.0;
};

// Fits both read-outs on one fresh unpaired sample and scores them on another.
inline RepresentationChecks check_representation(const Graph& extractor,
                                                 const data::GeneratorState& gen,
                                                 std::size_t n, Rng rng) {
  const std::size_t c = gen.config.num_classes;
  const double rho = data::kUnpairedRho;
  Rng fit_rng = rng.derive("check_fit");
  Rng eval_rng = rng.derive("check_eval");
  const data::Dataset fit = data::sample(gen, n, fit_rng, rho);
  const data::Dataset eval = data::sample(gen, n, eval_rng, rho);
  const Matrix h_fit = embed(extractor, fit.inputs);
  const Matrix h_eval = embed(extractor, eval.inputs);

  Rng probe_rng = rng.derive("check_probe");
  const Graph probe = fit_softmax_probe(h_fit, fit.labels, c, 20, 0.01, probe_rng);
  RepresentationChecks out;
  out.probe_accuracy =
      argmax_accuracy(numerics::forward_logits(probe, h_eval), eval.labels);

  const Matrix coef = fit_least_squares(h_fit, simple_block(fit, c));
  out.recon_r2 = r_squared(apply_least_squares(h_eval, coef), simple_block(eval, c));
  return out;
}

// Jointly trains the extractor, a temporary classification head and a temporary
// reconstruction head on dominoes whose simple block is uninformative
// (unpaired). Loss = CE(y) + lambda * MSE(simple block). Both heads are
// discarded; the extractor must pass the representation checks.
inline PretrainResult pretrain(const data::GeneratorState& gen, const PretrainConfig& cfg) {
  if (cfg.epochs == 0 || cfg.num_samples == 0 || cfg.batch_size == 0) {
    throw ConfigError("pretrain: epochs, samples and batch size must be positive");
  }
  const std::size_t c = gen.config.num_classes;
  Rng rng(cfg.seed);
  Rng data_rng = rng.derive("pretrain_data");
  Rng init_rng = rng.derive("pretrain_init");
  Rng shuffle_rng = rng.derive("pretrain_shuffle");

  const data::Dataset train =
      data::sample(gen, cfg.num_samples, data_rng, data::kUnpairedRho);
  const Matrix target = simple_block(train, c);

  PretrainResult result;
  result.extractor = make_extractor(gen.config.input_dim(), init_rng, cfg.rep_dim);
  Graph cls_head = make_head(cfg.rep_dim, c, init_rng);
  Graph rec_head = make_head(cfg.rep_dim, c, init_rng);
  numerics::SgdMomentum opt_e(result.extractor, cfg.momentum);
  numerics::SgdMomentum opt_c(cls_head, cfg.momentum);
  numerics::SgdMomentum opt_r(rec_head, cfg.momentum);

  const std::size_t n = train.size();
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto order = shuffle_rng.permutation(n);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < n; s += cfg.batch_size) {
      std::span<const std::size_t> idx(order.data() + s, std::min(cfg.batch_size, n - s));
      const Matrix xb = numerics::gather_rows(train.inputs, idx);
      const Matrix tb = numerics::gather_rows(target, idx);
      std::vector<int> yb;
      for (std::size_t i : idx) yb.push_back(train.labels[i]);

      auto acts_e = numerics::forward(result.extractor, xb);
      auto acts_c = numerics::forward(cls_head, acts_e.logits());
      auto acts_r = numerics::forward(rec_head, acts_e.logits());
      auto g_c = numerics::backward(cls_head, acts_c, numerics::SoftmaxCrossEntropy{yb});
      auto g_r = numerics::backward(rec_head, acts_r, numerics::MeanSquaredError{tb});
      numerics::scale(g_r.params, cfg.recon_weight);
      Matrix dh = g_c.input_grad;
      for (std::size_t i = 0; i < dh.size(); ++i)
        dh.values()[i] += cfg.recon_weight * g_r.input_grad.values()[i];
      auto g_e = numerics::backward_from(result.extractor, acts_e, std::move(dh));

      const double loss = g_c.loss + cfg.recon_weight * g_r.loss;
      if (!std::isfinite(loss)) {
        throw PretrainError("pretrain: non-finite loss at epoch " + std::to_string(e));
      }
      epoch_loss += loss;
      ++batches;
      opt_e.step(result.extractor, g_e.params, cfg.lr);
      opt_c.step(cls_head, g_c.params, cfg.lr);
      opt_r.step(rec_head, g_r.params, cfg.lr);
    }
    result.loss_log.push_back(epoch_loss / static_cast<double>(batches));
  }

  const RepresentationChecks checks =
      check_representation(result.extractor, gen, cfg.check_samples, rng.derive("checks"));
  result.probe_accuracy = checks.probe_accuracy;
  result.recon_r2 = checks.recon_r2;
  if (result.probe_accuracy < cfg.min_probe_accuracy || result.recon_r2 < cfg.min_recon_r2) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "pretrain: representation checks failed (probe accuracy %.4f, need %.2f; "
                  "simple-block R^2 %.4f, need %.2f; final loss %.4g)",
                  result.probe_accuracy, cfg.min_probe_accuracy, result.recon_r2,
                  cfg.min_recon_r2, result.loss_log.back());
    throw PretrainError(buf);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// Text format, one token stream:
//
//   adaptlab-checkpoint 1
//   graphs <count>
//   graph <name> <num_layers>
//   affine <out> <in>
//   <out*in weights, row-major>
//   <out biases>
//   relu
//   ...
//
// Values are written with 17 significant digits so a reload is bit-exact.

inline void write_graph(std::ostream& os, const std::string& name, const Graph& g) {
  os << "graph " << name << " " << g.layers().size() << "\n";
  char buf[32];
  auto put = [&](double v, bool last) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << buf << (last ? "\n" : " ");
  };
  for (const auto& layer : g.layers()) {
    if (const auto* a = std::get_if<numerics::Affine>(&layer)) {
      os << "affine " << a->out_dim() << " " << a->in_dim() << "\n";
      const auto& w = a->weight.values();
      for (std::size_t i = 0; i < w.size(); ++i) put(w[i], i + 1 == w.size());
      for (std::size_t i = 0; i < a->bias.size(); ++i) put(a->bias[i], i + 1 == a->bias.size());
    } else {
      os << "relu\n";
    }
  }
}

inline void save_checkpoint(std::ostream& os,
                            const std::vector<std::pair<std::string, const Graph*>>& graphs) {
  os << "adaptlab-checkpoint 1\n";
  os << "graphs " << graphs.size() << "\n";
  for (const auto& [name, g] : graphs) write_graph(os, name, *g);
}

inline std::vector<std::pair<std::string, Graph>> load_checkpoint(std::istream& is) {
  auto expect = [&](const std::string& want) {
    std::string tok;
    if (!(is >> tok) || tok != want) {
      throw ConfigError("checkpoint: expected '" + want + "', found '" + tok + "'");
    }
  };
  auto read_count = [&](const char* what) {
    long long v = -1;
    if (!(is >> v) || v < 0) throw ConfigError(std::string("checkpoint: bad ") + what);
    return static_cast<std::size_t>(v);
  };
  expect("adaptlab-checkpoint");
  if (read_count("version") != 1) throw ConfigError("checkpoint: unsupported version");
  expect("graphs");
  const std::size_t count = read_count("graph count");
  std::vector<std::pair<std::string, Graph>> out;
  for (std::size_t gi = 0; gi < count; ++gi) {
    expect("graph");
    std::string name;
    is >> name;
    const std::size_t nl = read_count("layer count");
    std::vector<numerics::Layer> layers;
    for (std::size_t li = 0; li < nl; ++li) {
      std::string kind;
      is >> kind;
      if (kind == "relu") {
        layers.emplace_back(numerics::Relu{});
      } else if (kind == "affine") {
        const std::size_t rows = read_count("affine rows");
        const std::size_t cols = read_count("affine cols");
        std::vector<double> w(rows * cols), b(rows);
        for (double& v : w)
          if (!(is >> v)) throw ConfigError("checkpoint: truncated weights in graph " + name);
        for (double& v : b)
          if (!(is >> v)) throw ConfigError("checkpoint: truncated bias in graph " + name);
        layers.emplace_back(numerics::Affine{Matrix(rows, cols, std::move(w)), std::move(b)});
      } else {
        throw ConfigError("checkpoint: unknown layer kind '" + kind + "'");
      }
    }
    out.emplace_back(name, Graph(std::move(layers)));
  }
  return out;
}

inline const Graph& find_graph(const std::vector<std::pair<std::string, Graph>>& graphs,
                               const std::string& name) {
  for (const auto& [n, g] : graphs)
    if (n == name) return g;
  throw ConfigError("checkpoint: missing graph '" + name + "'");
}

inline void save_model(const std::string& path, const ModelState& m) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path);
  save_checkpoint(os, {{"extractor", &m.extractor},
                       {"head", &m.head},
                       {"pretrained_snapshot", &m.pretrained_snapshot}});
}

// Loads a model and checks that the three graphs fit together.
inline ModelState load_model(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read " + path);
  const auto graphs = load_checkpoint(is);
  ModelState m{find_graph(graphs, "extractor"), find_graph(graphs, "head"),
               find_graph(graphs, "pretrained_snapshot")};
  if (m.head.input_dim() != m.extractor.output_dim() ||
      m.pretrained_snapshot.input_dim() != m.extractor.input_dim() ||
      m.pretrained_snapshot.output_dim() != m.extractor.output_dim()) {
    throw ConfigError("checkpoint: graph shapes in " + path + " do not fit together");
  }
  return m;
}

inline void save_extractor(const std::string& path, const Graph& extractor) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path);
  save_checkpoint(os, {{"extractor", &extractor}});
}

inline Graph load_extractor(const std::string& path, std::size_t expected_input_dim) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read " + path);
  Graph g = find_graph(load_checkpoint(is), "extractor");
  if (g.input_dim() != expected_input_dim) {
    throw ConfigError("checkpoint: extractor input dim " + std::to_string(g.input_dim()) +
                      " does not match expected " + std::to_string(expected_input_dim));
  }
  return g;
}

}  // namespace adaptlab::model

#endif  // ADAPTLAB_MODEL_HPP_
