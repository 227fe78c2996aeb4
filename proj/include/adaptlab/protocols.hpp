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

// Adaptation protocols: linear probing (LP), fine-tuning (FT), LP followed by
// FT from the probe (LP+FT), and the hardness-promoting probe variants that
// regularize the head in latent space (VAT, UDP) or average sparse probes
// (Soup). VAT and UDP may be applied during the LP stage, the FT stage, or both.
//
// Random substreams of a run, all derived from ProtocolConfig::seed:
//   head_init/i   head (or soup probe i) initialization
//   soup_mask/i   feature mask of soup probe i
//   lp_shuffle    minibatch order during LP
//   lp_perturb    VAT start directions during LP
//   ft_shuffle    minibatch order during FT
//   ft_perturb    VAT start directions during FT
//   scratch_init  extractor initialization for FT from scratch

#ifndef ADAPTLAB_PROTOCOLS_HPP_
#define ADAPTLAB_PROTOCOLS_HPP_

#include <algorithm>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "adaptlab/data_gen.hpp"
#include "adaptlab/model.hpp"
#include "adaptlab/numerics.hpp"

namespace adaptlab::protocols {

using model::ModelState;
using numerics::Graph;
using numerics::Matrix;
using numerics::Rng;

enum class Kind { kLp, kFt, kLpFt };
enum class Mitigation { kNone, kVat, kUdp, kSoup };
enum class Stage { kLp, kFt, kBoth };

struct VatConfig {
  double alpha = 0.01;
  double epsilon = 0.1;  // L2 radius in latent space
  double xi = 1e-6;
  int power_iters = 1;
};

struct UdpConfig {
  double epsilon = 0.01;  // L2 radius in latent space
  int ascent_steps = 5;
  double step_size() const { return epsilon / 4.0; }
};

struct SoupConfig {
  std::size_t k = 5;
  double sparsity = 0.5;         // fraction of latent dims masked per probe
  bool identical_probes = false;  // every probe uses init and mask of probe 0
};

struct ProtocolConfig {
  Kind kind = Kind::kLp;
  Mitigation mitigation = Mitigation::kNone;
  Stage stage = Stage::kLp;
  bool from_scratch = false;  // FT only: re-initialize the extractor
  double lp_lr = 0.1;
  double ft_lr = 1e-3;
  std::size_t lp_epochs = 100;
  std::size_t ft_epochs = 20;
  std::size_t batch_size = 128;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  VatConfig vat;
  UdpConfig udp;
  SoupConfig soup;

  bool has_lp_stage() const { return kind != Kind::kFt; }
  bool has_ft_stage() const { return kind != Kind::kLp; }
  bool mitigates_lp() const {
    return mitigation != Mitigation::kNone && has_lp_stage() &&
           (stage == Stage::kLp || stage == Stage::kBoth);
  }
  bool mitigates_ft() const {
    return mitigation != Mitigation::kNone && has_ft_stage() &&
           (stage == Stage::kFt || stage == Stage::kBoth);
  }

  void validate() const {
    auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
    if (has_lp_stage() && !finite_nonneg(lp_lr)) throw ConfigError("protocol: invalid lp_lr");
    if (has_ft_stage() && !finite_nonneg(ft_lr)) throw ConfigError("protocol: invalid ft_lr");
    if (batch_size == 0) throw ConfigError("protocol: batch_size must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("protocol: momentum in [0,1)");
    if (from_scratch && kind != Kind::kFt) {
      throw ConfigError("protocol: from_scratch applies to plain FT only");
    }
    if (mitigation == Mitigation::kSoup && stage != Stage::kLp) {
      throw ConfigError("protocol: Soup is an LP-stage mitigation only");
    }
    if (mitigation != Mitigation::kNone) {
      if (kind == Kind::kLp && stage != Stage::kLp) {
        throw ConfigError("protocol: LP has no FT stage to mitigate");
      }
      if (kind == Kind::kFt && stage != Stage::kFt) {
        throw ConfigError("protocol: FT has no LP stage to mitigate");
      }
    }
    if (mitigation == Mitigation::kVat) {
      if (!(vat.epsilon > 0.0) || !(vat.alpha >= 0.0) || !(vat.xi > 0.0) ||
          vat.power_iters < 1) {
        throw ConfigError("protocol: VAT needs epsilon > 0, alpha >= 0, xi > 0");
      }
    }
    if (mitigation == Mitigation::kUdp) {
      if (!(udp.epsilon >= 0.0) || udp.ascent_steps < 0) {
        throw ConfigError("protocol: UDP needs epsilon >= 0");
      }
    }
    if (mitigation == Mitigation::kSoup) {
      if (soup.k < 1) throw ConfigError("protocol: Soup needs k >= 1");
      if (!(soup.sparsity >= 0.0 && soup.sparsity < 1.0)) {
        throw ConfigError("protocol: Soup sparsity must lie in [0,1)");
      }
    }
  }
};

inline std::string to_string(Mitigation m) {
  switch (m) {
    case Mitigation::kNone: return "";
    case Mitigation::kVat: return "VAT";
    case Mitigation::kUdp: return "UDP";
    case Mitigation::kSoup: return "Soup";
  }
  return "?";
}

// Canonical display name: LP, FT, FT(scratch), LP+FT, LP(VAT)+FT, LP+FT(UDP),
// LP(VAT)+FT(VAT), ...
inline std::string protocol_name(const ProtocolConfig& c) {
  const std::string m = "(" + to_string(c.mitigation) + ")";
  std::string lp = "LP" + (c.mitigates_lp() ? m : "");
  std::string ft = "FT" + (c.mitigates_ft() ? m : "") + (c.from_scratch ? "(scratch)" : "");
  switch (c.kind) {
    case Kind::kLp: return lp;
    case Kind::kFt: return ft;
    case Kind::kLpFt: return lp + "+" + ft;
  }
  return "?";
}

// Parses a protocol name into kind, mitigation, stage and from_scratch. Other
// fields keep their defaults.
inline ProtocolConfig parse_protocol(std::string_view name) {
  auto fail = [&]() -> ConfigError {
    return ConfigError("unknown protocol '" + std::string(name) + "'");
  };
  struct Part {
    std::string base;
    std::string arg;
  };
  auto split_part = [&](std::string_view s) {
    Part p;
    const auto open = s.find('(');
    if (open == std::string_view::npos) {
      p.base = std::string(s);
      return p;
    }
    if (s.back() != ')') throw fail();
    p.base = std::string(s.substr(0, open));
    p.arg = std::string(s.substr(open + 1, s.size() - open - 2));
    return p;
  };
  auto mitigation_of = [&](const std::string& a) {
    if (a.empty()) return Mitigation::kNone;
    if (a == "VAT") return Mitigation::kVat;
    if (a == "UDP") return Mitigation::kUdp;
    if (a == "Soup") return Mitigation::kSoup;
    throw fail();
  };

  ProtocolConfig c;
  const auto plus = name.find('+');
  if (plus == std::string_view::npos) {
    Part p = split_part(name);
    if (p.base == "LP") {
      c.kind = Kind::kLp;
      c.mitigation = mitigation_of(p.arg);
      c.stage = Stage::kLp;
    } else if (p.base == "FT") {
      c.kind = Kind::kFt;
      if (p.arg == "scratch") {
        c.from_scratch = true;
      } else {
        c.mitigation = mitigation_of(p.arg);
        if (c.mitigation == Mitigation::kSoup) throw fail();
      }
      c.stage = Stage::kFt;
    } else {
      throw fail();
    }
  } else {
    Part lp = split_part(name.substr(0, plus));
    Part ft = split_part(name.substr(plus + 1));
    if (lp.base != "LP" || ft.base != "FT") throw fail();
    c.kind = Kind::kLpFt;
    const Mitigation ml = mitigation_of(lp.arg);
    const Mitigation mf = mitigation_of(ft.arg);
    if (mf == Mitigation::kSoup) throw fail();
    if (ml != Mitigation::kNone && mf != Mitigation::kNone) {
      if (ml != mf) throw fail();
      c.mitigation = ml;
      c.stage = Stage::kBoth;
    } else if (ml != Mitigation::kNone) {
      c.mitigation = ml;
      c.stage = Stage::kLp;
    } else {
      c.mitigation = mf;
      c.stage = mf == Mitigation::kNone ? Stage::kLp : Stage::kFt;
    }
  }
  if (protocol_name(c) != name) throw fail();
  return c;
}

struct AdaptedModel {
  ModelState model;
  std::vector<double> lp_loss_log;  // mean training loss per LP epoch
  std::vector<double> ft_loss_log;  // mean training loss per FT epoch
};

// ---------------------------------------------------------------------------
// Latent perturbations
// ---------------------------------------------------------------------------

namespace detail {

// Scales every row to unit L2 norm; rows with norm below 1e-12 become zero.
inline void normalize_rows(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    const double n = numerics::norm2(r);
    if (n < 1e-12) {
      std::fill(r.begin(), r.end(), 0.0);
    } else {
      for (double& v : r) v /= n;
    }
  }
}

}  // namespace detail

// One power iteration for the KL-maximizing latent perturbation of radius
// epsilon. Rows whose KL gradient vanishes receive a zero perturbation.
inline Matrix vat_perturbation(const Graph& head, const Matrix& h, const VatConfig& cfg,
                               Rng& rng) {
  const Matrix reference = numerics::softmax(numerics::forward_logits(head, h));
  Matrix d = rng.normal_matrix(h.rows(), h.cols());
  detail::normalize_rows(d);
  for (int it = 0; it < cfg.power_iters; ++it) {
    const Matrix probe = numerics::add(h, numerics::scaled(d, cfg.xi));
    const auto acts = numerics::forward(head, probe);
    // Gradient with respect to the perturbed point; per-sample (sum) reduction
    // so that the row norms do not shrink with the batch size.
    d = numerics::backward(head, acts, numerics::KlDivergence{reference},
                           numerics::Reduction::kSum)
            .input_grad;
    detail::normalize_rows(d);
  }
  return numerics::scaled(d, cfg.epsilon);
}

// Entropy-ascent latent perturbation within the L2 ball of radius epsilon:
// normalized gradient steps, projection onto the ball, and a per-sample accept
// rule that keeps a step only if that sample's entropy does not decrease.
inline Matrix udp_perturbation(const Graph& head, const Matrix& h, const UdpConfig& cfg) {
  Matrix delta(h.rows(), h.cols());
  if (cfg.epsilon == 0.0 || cfg.ascent_steps == 0) return delta;
  const double step = cfg.step_size();
  std::vector<double> current =
      numerics::row_entropy(numerics::softmax(numerics::forward_logits(head, h)));
  for (int s = 0; s < cfg.ascent_steps; ++s) {
    const auto acts = numerics::forward(head, numerics::add(h, delta));
    const Matrix g =
        numerics::backward(head, acts, numerics::Entropy{}, numerics::Reduction::kSum)
            .input_grad;
    Matrix cand = delta;
    for (std::size_t i = 0; i < h.rows(); ++i) {
      auto gi = g.row(i);
      const double gn = numerics::norm2(gi);
      if (gn < 1e-12) continue;
      auto ci = cand.row(i);
      for (std::size_t j = 0; j < ci.size(); ++j) ci[j] += step * gi[j] / gn;
      const double cn = numerics::norm2(ci);
      if (cn > cfg.epsilon) {
        for (double& v : ci) v *= cfg.epsilon / cn;
      }
    }
    const std::vector<double> cand_h = numerics::row_entropy(
        numerics::softmax(numerics::forward_logits(head, numerics::add(h, cand))));
    for (std::size_t i = 0; i < h.rows(); ++i) {
      if (cand_h[i] >= current[i]) {
        std::copy(cand.row(i).begin(), cand.row(i).end(), delta.row(i).begin());
        current[i] = cand_h[i];
      }
    }
  }
  return delta;
}

// Loss, head gradients and latent gradient of one batch objective.
struct HeadObjective {
  double loss = 0.0;
  std::vector<numerics::AffineGrad> head_grads;
  Matrix dh;
};

inline HeadObjective cross_entropy_objective(const Graph& head, const Matrix& h,
                                             const std::vector<int>& y) {
  const auto acts = numerics::forward(head, h);
  auto g = numerics::backward(head, acts, numerics::SoftmaxCrossEntropy{y});
  return {g.loss, std::move(g.params), std::move(g.input_grad)};
}

// CE(g(h), y) + alpha * KL(stopgrad p(y|g(h)) || p(y|g(h + delta))).
inline HeadObjective vat_objective(const Graph& head, const Matrix& h, const std::vector<int>& y,
                                   const VatConfig& cfg, Rng& rng) {
  const Matrix delta = vat_perturbation(head, h, cfg, rng);
  const auto acts = numerics::forward(head, h);
  auto ce = numerics::backward(head, acts, numerics::SoftmaxCrossEntropy{y});
  const Matrix reference = numerics::softmax(acts.logits());
  const auto acts_adv = numerics::forward(head, numerics::add(h, delta));
  auto kl = numerics::backward(head, acts_adv, numerics::KlDivergence{reference});
  HeadObjective out{ce.loss + cfg.alpha * kl.loss, std::move(ce.params),
                    std::move(ce.input_grad)};
  numerics::accumulate(out.head_grads, kl.params, cfg.alpha);
  for (std::size_t i = 0; i < out.dh.size(); ++i) {
    out.dh.values()[i] += cfg.alpha * kl.input_grad.values()[i];
  }
  return out;
}

inline double vat_loss(const Graph& head, const Matrix& h, const std::vector<int>& y,
                       const VatConfig& cfg, Rng& rng) {
  return vat_objective(head, h, y, cfg, rng).loss;
}

// CE(g(h + delta_u), y) with the entropy-ascent perturbation held fixed.
inline HeadObjective udp_objective(const Graph& head, const Matrix& h, const std::vector<int>& y,
                                   const UdpConfig& cfg) {
  const Matrix delta = udp_perturbation(head, h, cfg);
  return cross_entropy_objective(head, numerics::add(h, delta), y);
}

inline HeadObjective head_objective(const Graph& head, const Matrix& h, const std::vector<int>& y,
                                    Mitigation m, const ProtocolConfig& cfg, Rng& rng) {
  switch (m) {
    case Mitigation::kVat: return vat_objective(head, h, y, cfg.vat, rng);
    case Mitigation::kUdp: return udp_objective(head, h, y, cfg.udp);
    default: return cross_entropy_objective(head, h, y);
  }
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<int> gather_labels(const std::vector<int>& y,
                                      std::span<const std::size_t> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(y[i]);
  return out;
}

inline void check_loss(double loss, const char* stage, std::size_t epoch) {
  if (!std::isfinite(loss)) {
    throw RunError(std::string(stage) + ": non-finite loss at epoch " + std::to_string(epoch));
  }
}

inline Matrix mask_columns(const Matrix& h, const std::vector<double>& mask) {
  Matrix out = h;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] *= mask[j];
  }
  return out;
}

// Order-invariant mean: sort, then min + sum of offsets / k. Exact when all
// values are equal.
inline double stable_mean(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double offsets = 0.0;
  for (double x : v) offsets += x - v.front();
  return v.front() + offsets / static_cast<double>(v.size());
}

}  // namespace detail

// Trains a linear head on fixed features with minibatch SGD.
inline Graph train_head(Graph head, const Matrix& h, const std::vector<int>& y,
                        const ProtocolConfig& cfg, Mitigation m, Rng& shuffle, Rng& perturb,
                        std::vector<double>& loss_log) {
  numerics::SgdMomentum opt(head, cfg.momentum);
  const std::size_t n = h.rows();
  for (std::size_t e = 0; e < cfg.lp_epochs; ++e) {
    const auto order = shuffle.permutation(n);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < n; s += cfg.batch_size) {
      std::span<const std::size_t> idx(order.data() + s, std::min(cfg.batch_size, n - s));
      const Matrix hb = numerics::gather_rows(h, idx);
      const auto yb = detail::gather_labels(y, idx);
      HeadObjective obj = head_objective(head, hb, yb, m, cfg, perturb);
      detail::check_loss(obj.loss, "LP", e);
      opt.step(head, obj.head_grads, cfg.lp_lr);
      total += obj.loss;
      ++batches;
    }
    loss_log.push_back(total / static_cast<double>(std::max<std::size_t>(batches, 1)));
  }
  return head;
}

struct SoupResult {
  Graph head;                            // the averaged probe
  std::vector<Graph> probes;             // trained probes, masked columns zeroed
  std::vector<std::vector<double>> masks;
  std::vector<double> loss_log;
};

// Averages probes entrywise with an order-invariant mean.
inline Graph average_heads(const std::vector<Graph>& probes) {
  if (probes.empty()) throw ConfigError("soup: no probes to average");
  Graph out = probes.front();
  numerics::Affine& a = out.affine(0);
  std::vector<double> vals(probes.size());
  for (std::size_t i = 0; i < a.weight.size(); ++i) {
    for (std::size_t k = 0; k < probes.size(); ++k)
      vals[k] = probes[k].affine(0).weight.values()[i];
    a.weight.values()[i] = detail::stable_mean(vals);
  }
  for (std::size_t i = 0; i < a.bias.size(); ++i) {
    for (std::size_t k = 0; k < probes.size(); ++k) vals[k] = probes[k].affine(0).bias[i];
    a.bias[i] = detail::stable_mean(vals);
  }
  return out;
}

// Jointly trains k masked linear probes on (1/k) * sum_i CE_i and averages them.
inline SoupResult soup_train(const Matrix& h, const std::vector<int>& y, std::size_t num_classes,
                             const SoupConfig& scfg, const ProtocolConfig& cfg, const Rng& run_rng) {
  if (scfg.k < 1) throw ConfigError("soup: k must be >= 1");
  if (!(scfg.sparsity >= 0.0 && scfg.sparsity < 1.0)) {
    throw ConfigError("soup: sparsity must lie in [0,1)");
  }
  const std::size_t p = h.cols();
  const auto masked =
      static_cast<std::size_t>(std::floor(scfg.sparsity * static_cast<double>(p) + 0.5));
  SoupResult out;
  std::vector<numerics::SgdMomentum> opts;
  for (std::size_t i = 0; i < scfg.k; ++i) {
    const std::size_t src = scfg.identical_probes ? 0 : i;
    Rng init = run_rng.derive("head_init", src);
    out.probes.push_back(model::make_head(p, num_classes, init));
    std::vector<double> mask(p, 1.0);
    Rng mask_rng = run_rng.derive("soup_mask", src);
    for (std::size_t j : mask_rng.choose(p, std::min(masked, p))) mask[j] = 0.0;
    out.masks.push_back(std::move(mask));
    opts.emplace_back(out.probes.back(), cfg.momentum);
  }
  Rng shuffle = run_rng.derive("lp_shuffle");
  const double weight = 1.0 / static_cast<double>(scfg.k);
  const std::size_t n = h.rows();
  for (std::size_t e = 0; e < cfg.lp_epochs; ++e) {
    const auto order = shuffle.permutation(n);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < n; s += cfg.batch_size) {
      std::span<const std::size_t> idx(order.data() + s, std::min(cfg.batch_size, n - s));
      const Matrix hb = numerics::gather_rows(h, idx);
      const auto yb = detail::gather_labels(y, idx);
      double batch_loss = 0.0;
      for (std::size_t i = 0; i < scfg.k; ++i) {
        HeadObjective obj =
            cross_entropy_objective(out.probes[i], detail::mask_columns(hb, out.masks[i]), yb);
        detail::check_loss(obj.loss, "LP(Soup)", e);
        numerics::scale(obj.head_grads, weight);
        opts[i].step(out.probes[i], obj.head_grads, cfg.lp_lr);
        batch_loss += obj.loss;
      }
      total += batch_loss * weight;
      ++batches;
    }
    out.loss_log.push_back(total / static_cast<double>(std::max<std::size_t>(batches, 1)));
  }
  for (std::size_t i = 0; i < scfg.k; ++i) {
    numerics::Affine& a = out.probes[i].affine(0);
    for (std::size_t r = 0; r < a.weight.rows(); ++r)
      for (std::size_t j = 0; j < p; ++j)
        if (out.masks[i][j] == 0.0) a.weight(r, j) = 0.0;
  }
  out.head = average_heads(out.probes);
  return out;
}

// Trains a fresh head (seeded from head_init/0) on frozen features. The
// extractor is copied unchanged.
inline AdaptedModel run_lp(const ModelState& start, const data::Dataset& train,
                           const ProtocolConfig& cfg) {
  if (train.size() == 0) throw ConfigError("run_lp: empty training set");
  if (start.head.layers().empty()) throw ConfigError("run_lp: start model has no head");
  const Rng run_rng(cfg.seed);
  // Only the head's shape is used; LP always starts from a fresh head.
  const std::size_t c = start.head.output_dim();
  const Matrix h = model::embed(start.extractor, train.inputs);

  AdaptedModel out;
  out.model.extractor = start.extractor;
  out.model.pretrained_snapshot = start.pretrained_snapshot;
  if (cfg.mitigates_lp() && cfg.mitigation == Mitigation::kSoup) {
    SoupResult soup = soup_train(h, train.labels, c, cfg.soup, cfg, run_rng);
    out.model.head = std::move(soup.head);
    out.lp_loss_log = std::move(soup.loss_log);
    return out;
  }
  Rng init = run_rng.derive("head_init", 0);
  Rng shuffle = run_rng.derive("lp_shuffle");
  Rng perturb = run_rng.derive("lp_perturb");
  const Mitigation m = cfg.mitigates_lp() ? cfg.mitigation : Mitigation::kNone;
  out.model.head = train_head(model::make_head(h.cols(), c, init), h, train.labels, cfg, m,
                              shuffle, perturb, out.lp_loss_log);
  return out;
}

// Fine-tunes extractor and head jointly from `init`.
inline AdaptedModel run_ft(const ModelState& init, const data::Dataset& train,
                           const ProtocolConfig& cfg) {
  if (train.size() == 0) throw ConfigError("run_ft: empty training set");
  const Rng run_rng(cfg.seed);
  Rng shuffle = run_rng.derive("ft_shuffle");
  Rng perturb = run_rng.derive("ft_perturb");
  const Mitigation m = cfg.mitigates_ft() ? cfg.mitigation : Mitigation::kNone;

  AdaptedModel out;
  out.model = init;
  Graph& extractor = out.model.extractor;
  Graph& head = out.model.head;
  numerics::SgdMomentum opt_e(extractor, cfg.momentum);
  numerics::SgdMomentum opt_h(head, cfg.momentum);
  const std::size_t n = train.size();
  for (std::size_t e = 0; e < cfg.ft_epochs; ++e) {
    const auto order = shuffle.permutation(n);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < n; s += cfg.batch_size) {
      std::span<const std::size_t> idx(order.data() + s, std::min(cfg.batch_size, n - s));
      const Matrix xb = numerics::gather_rows(train.inputs, idx);
      const auto yb = detail::gather_labels(train.labels, idx);
      const auto acts = numerics::forward(extractor, xb);
      HeadObjective obj = head_objective(head, acts.logits(), yb, m, cfg, perturb);
      detail::check_loss(obj.loss, "FT", e);
      const auto ge = numerics::backward_from(extractor, acts, std::move(obj.dh));
      opt_e.step(extractor, ge.params, cfg.ft_lr);
      opt_h.step(head, obj.head_grads, cfg.ft_lr);
      total += obj.loss;
      ++batches;
    }
    out.ft_loss_log.push_back(total / static_cast<double>(std::max<std::size_t>(batches, 1)));
  }
  return out;
}

// Dispatches on cfg.kind. The returned model keeps the extractor as it was at
// the start of adaptation in pretrained_snapshot.
inline AdaptedModel run_protocol(const Graph& pretrained, const data::Dataset& train,
                                 std::size_t num_classes, const ProtocolConfig& cfg) {
  cfg.validate();
  const Rng run_rng(cfg.seed);
  ModelState start;
  if (cfg.from_scratch) {
    Rng init = run_rng.derive("scratch_init");
    start.extractor =
        model::make_extractor(pretrained.input_dim(), init, pretrained.output_dim());
  } else {
    start.extractor = pretrained;
  }
  start.pretrained_snapshot = start.extractor;
  Rng head_init = run_rng.derive("head_init", 0);
  start.head = model::make_head(start.extractor.output_dim(), num_classes, head_init);

  switch (cfg.kind) {
    case Kind::kLp: return run_lp(start, train, cfg);
    case Kind::kFt: return run_ft(start, train, cfg);
    case Kind::kLpFt: {
      AdaptedModel lp = run_lp(start, train, cfg);
      AdaptedModel ft = run_ft(lp.model, train, cfg);
      ft.lp_loss_log = std::move(lp.lp_loss_log);
      return ft;
    }
  }
  throw ConfigError("run_protocol: unknown kind");
}

}  // namespace adaptlab::protocols

#endif  // ADAPTLAB_PROTOCOLS_HPP_
