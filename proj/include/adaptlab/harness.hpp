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

// Study runner: expands a config into (rho, protocol, grid point, seed) runs,
// executes them on a bounded worker pool, picks hyperparameters on held-out
// ID validation accuracy and ranks the selected protocols per metric.
//
// Data for a rho setting depends only on (data_seed, rho index); the protocol
// seed varies training randomness. Every run reuses one pretrained extractor.

#ifndef ADAPTLAB_HARNESS_HPP_
#define ADAPTLAB_HARNESS_HPP_

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "adaptlab/data_gen.hpp"
#include "adaptlab/model.hpp"
#include "adaptlab/numerics.hpp"
#include "adaptlab/protocols.hpp"
#include "adaptlab/safety_eval.hpp"

namespace adaptlab::harness {

using numerics::Graph;
using numerics::Rng;

struct Grids {
  std::vector<double> lp_lr = {0.01, 0.1, 1.0};
  std::vector<double> ft_lr = {1e-4, 1e-3};
  std::vector<double> lp_ft_ft_lr = {1e-5, 1e-4};  // FT stage after a probe
  std::vector<double> vat_alpha = {0.001, 0.01, 0.1};
  std::vector<double> udp_epsilon = {0.005, 0.01, 0.02, 0.1};
  std::vector<std::size_t> soup_k = {5, 10, 20};
};

struct StudyConfig {
  data::DominoConfig domino;  // rho is ignored; see rhos
  data::ShiftConfig shift;
  std::vector<double> rhos = {0.95, 0.99, 1.0};
  std::vector<std::string> protocols;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::size_t n_train = 20000;  // before the validation split
  std::size_t n_test = 5000;
  std::size_t n_anomaly = 1000;
  double val_fraction = 0.1;

  model::PretrainConfig pretrain;
  std::string extractor_path;  // load instead of pretraining when set

  std::size_t lp_epochs = 100;
  std::size_t ft_epochs = 20;
  std::size_t batch_size = 128;
  double momentum = 0.9;
  Grids grids;
  double vat_epsilon = 0.1;
  double vat_xi = 1e-6;
  int udp_ascent_steps = 5;
  double soup_sparsity = 0.5;
  safety::PgdConfig pgd;

  std::size_t n_val() const {
    return static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(n_train)));
  }

  void validate() const;
};

// One hyperparameter point. Entries a protocol does not use stay 0, so the
// tuple order is a valid tie-break within a protocol.
struct HpPoint {
  double lp_lr = 0.0;
  double ft_lr = 0.0;
  double vat_alpha = 0.0;
  double udp_epsilon = 0.0;
  std::size_t soup_k = 0;

  auto tuple() const { return std::tuple(lp_lr, ft_lr, vat_alpha, udp_epsilon, soup_k); }
  bool operator==(const HpPoint&) const = default;
  bool operator<(const HpPoint& o) const { return tuple() < o.tuple(); }
};

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

inline void StudyConfig::validate() const {
  domino.validate();
  if (protocols.empty()) throw ConfigError("config: protocol list is empty");
  for (const auto& p : protocols) protocols::parse_protocol(p).validate();
  if (std::set<std::string>(protocols.begin(), protocols.end()).size() != protocols.size()) {
    throw ConfigError("config: protocols must be distinct");
  }
  if (seeds.empty()) throw ConfigError("config: seed list is empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("config: seeds must be distinct");
  }
  if (rhos.empty()) throw ConfigError("config: rho list is empty");
  for (double r : rhos) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("config: rho values must lie in [0,1]");
  }
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ConfigError("config: val_fraction must lie in (0,1)");
  }
  if (n_val() < 1 || n_val() >= n_train) {
    throw ConfigError("config: n_train too small for the validation split");
  }
  if (n_test < 1 || n_anomaly < 1) throw ConfigError("config: n_test and n_anomaly must be >= 1");
  if (batch_size == 0) throw ConfigError("config: batch_size must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("config: momentum in [0,1)");
  auto check = [](const auto& v, const char* name, auto ok) {
    if (v.empty()) throw ConfigError(std::string("config: grid ") + name + " is empty");
    for (auto x : v)
      if (!ok(x)) throw ConfigError(std::string("config: bad value in grid ") + name);
  };
  auto nonneg = [](double x) { return std::isfinite(x) && x >= 0.0; };
  check(grids.lp_lr, "lp_lr", nonneg);
  check(grids.ft_lr, "ft_lr", nonneg);
  check(grids.lp_ft_ft_lr, "lp_ft_ft_lr", nonneg);
  check(grids.vat_alpha, "vat_alpha", nonneg);
  check(grids.udp_epsilon, "udp_epsilon", nonneg);
  check(grids.soup_k, "soup_k", [](std::size_t k) { return k >= 1; });
  if (!(vat_epsilon > 0.0)) throw ConfigError("config: vat_epsilon must be positive");
  if (!(soup_sparsity >= 0.0 && soup_sparsity < 1.0)) {
    throw ConfigError("config: soup_sparsity must lie in [0,1)");
  }
  if (!(pgd.epsilon >= 0.0) || pgd.steps < 0) throw ConfigError("config: bad pgd settings");
  if (pretrain.epochs == 0 || pretrain.num_samples == 0) {
    throw ConfigError("config: pretrain epochs and samples must be positive");
  }
}

namespace detail {

using FieldReader = std::function<void(const nlohmann::json&, const std::string&)>;

template <typename T>
FieldReader reads(T& out) {
  return [&out](const nlohmann::json& j, const std::string& key) {
    try {
      out = j.get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config: key '" + key + "' has the wrong type");
    }
  };
}

}  // namespace detail

// Flat JSON object; every key is optional and unknown keys are rejected.
inline StudyConfig parse_study_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  StudyConfig c;
  using detail::reads;
  const std::map<std::string, detail::FieldReader> fields = {
      {"num_classes", reads(c.domino.num_classes)},
      {"complex_dim", reads(c.domino.complex_dim)},
      {"sigma_simple", reads(c.domino.sigma_simple)},
      {"sigma_complex", reads(c.domino.sigma_complex)},
      {"data_seed", reads(c.domino.seed)},
      {"shift_angle", reads(c.shift.rotation_angle)},
      {"shift_noise_scale", reads(c.shift.noise_scale)},
      {"rhos", reads(c.rhos)},
      {"protocols", reads(c.protocols)},
      {"seeds", reads(c.seeds)},
      {"n_train", reads(c.n_train)},
      {"n_test", reads(c.n_test)},
      {"n_anomaly", reads(c.n_anomaly)},
      {"val_fraction", reads(c.val_fraction)},
      {"pretrain_epochs", reads(c.pretrain.epochs)},
      {"pretrain_samples", reads(c.pretrain.num_samples)},
      {"pretrain_lr", reads(c.pretrain.lr)},
      {"pretrain_recon_weight", reads(c.pretrain.recon_weight)},
      {"pretrain_seed", reads(c.pretrain.seed)},
      {"extractor", reads(c.extractor_path)},
      {"lp_epochs", reads(c.lp_epochs)},
      {"ft_epochs", reads(c.ft_epochs)},
      {"batch_size", reads(c.batch_size)},
      {"momentum", reads(c.momentum)},
      {"lp_lr_grid", reads(c.grids.lp_lr)},
      {"ft_lr_grid", reads(c.grids.ft_lr)},
      {"lp_ft_ft_lr_grid", reads(c.grids.lp_ft_ft_lr)},
      {"vat_alpha_grid", reads(c.grids.vat_alpha)},
      {"udp_epsilon_grid", reads(c.grids.udp_epsilon)},
      {"soup_k_grid", reads(c.grids.soup_k)},
      {"vat_epsilon", reads(c.vat_epsilon)},
      {"udp_ascent_steps", reads(c.udp_ascent_steps)},
      {"soup_sparsity", reads(c.soup_sparsity)},
      {"pgd_epsilon", reads(c.pgd.epsilon)},
      {"pgd_steps", reads(c.pgd.steps)},
  };
  for (const auto& [key, value] : j.items()) {
    auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("config: unknown key '" + key + "'");
    it->second(value, key);
  }
  c.validate();
  return c;
}

inline StudyConfig load_study_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path + ": " + e.what());
  }
  return parse_study_config(j);
}

inline nlohmann::json to_json(const StudyConfig& c) {
  return {
      {"num_classes", c.domino.num_classes},
      {"complex_dim", c.domino.complex_dim},
      {"sigma_simple", c.domino.sigma_simple},
      {"sigma_complex", c.domino.sigma_complex},
      {"data_seed", c.domino.seed},
      {"shift_angle", c.shift.rotation_angle},
      {"shift_noise_scale", c.shift.noise_scale},
      {"rhos", c.rhos},
      {"protocols", c.protocols},
      {"seeds", c.seeds},
      {"n_train", c.n_train},
      {"n_test", c.n_test},
      {"n_anomaly", c.n_anomaly},
      {"val_fraction", c.val_fraction},
      {"pretrain_epochs", c.pretrain.epochs},
      {"pretrain_samples", c.pretrain.num_samples},
      {"pretrain_lr", c.pretrain.lr},
      {"pretrain_recon_weight", c.pretrain.recon_weight},
      {"pretrain_seed", c.pretrain.seed},
      {"extractor", c.extractor_path},
      {"lp_epochs", c.lp_epochs},
      {"ft_epochs", c.ft_epochs},
      {"batch_size", c.batch_size},
      {"momentum", c.momentum},
      {"lp_lr_grid", c.grids.lp_lr},
      {"ft_lr_grid", c.grids.ft_lr},
      {"lp_ft_ft_lr_grid", c.grids.lp_ft_ft_lr},
      {"vat_alpha_grid", c.grids.vat_alpha},
      {"udp_epsilon_grid", c.grids.udp_epsilon},
      {"soup_k_grid", c.grids.soup_k},
      {"vat_epsilon", c.vat_epsilon},
      {"udp_ascent_steps", c.udp_ascent_steps},
      {"soup_sparsity", c.soup_sparsity},
      {"pgd_epsilon", c.pgd.epsilon},
      {"pgd_steps", c.pgd.steps},
  };
}

// ---------------------------------------------------------------------------
// Run expansion
// ---------------------------------------------------------------------------

// Fixed (non-swept) protocol settings from the study config.
inline protocols::ProtocolConfig base_protocol(const StudyConfig& c, const std::string& name) {
  protocols::ProtocolConfig p = protocols::parse_protocol(name);
  p.lp_epochs = c.lp_epochs;
  p.ft_epochs = c.ft_epochs;
  p.batch_size = c.batch_size;
  p.momentum = c.momentum;
  p.vat.epsilon = c.vat_epsilon;
  p.vat.xi = c.vat_xi;
  p.udp.ascent_steps = c.udp_ascent_steps;
  p.soup.sparsity = c.soup_sparsity;
  return p;
}

// Cartesian product of the grids a protocol actually uses, in ascending order.
inline std::vector<HpPoint> hyperparameter_grid(const protocols::ProtocolConfig& p,
                                                const Grids& g) {
  using protocols::Kind;
  using protocols::Mitigation;
  std::vector<double> lp = p.has_lp_stage() ? g.lp_lr : std::vector<double>{0.0};
  std::vector<double> ft = {0.0};
  if (p.kind == Kind::kFt) ft = g.ft_lr;
  if (p.kind == Kind::kLpFt) ft = g.lp_ft_ft_lr;
  std::vector<double> alpha = {0.0}, eps = {0.0};
  std::vector<std::size_t> k = {0};
  if (p.mitigation == Mitigation::kVat) alpha = g.vat_alpha;
  if (p.mitigation == Mitigation::kUdp) eps = g.udp_epsilon;
  if (p.mitigation == Mitigation::kSoup) k = g.soup_k;

  std::vector<HpPoint> out;
  for (double a : lp)
    for (double b : ft)
      for (double c : alpha)
        for (double d : eps)
          for (std::size_t e : k) out.push_back({a, b, c, d, e});
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline protocols::ProtocolConfig apply_point(protocols::ProtocolConfig p, const HpPoint& hp) {
  using protocols::Mitigation;
  if (p.has_lp_stage()) p.lp_lr = hp.lp_lr;
  if (p.has_ft_stage()) p.ft_lr = hp.ft_lr;
  if (p.mitigation == Mitigation::kVat) p.vat.alpha = hp.vat_alpha;
  if (p.mitigation == Mitigation::kUdp) p.udp.epsilon = hp.udp_epsilon;
  if (p.mitigation == Mitigation::kSoup) p.soup.k = hp.soup_k;
  return p;
}

struct RunSpec {
  std::size_t run_id = 0;
  std::size_t rho_index = 0;
  double rho = 0.0;
  std::string protocol;
  HpPoint hp;
  std::uint64_t seed = 0;
  protocols::ProtocolConfig config;
};

// Ordered by rho, then protocol (config order), grid point, seed.
inline std::vector<RunSpec> expand_runs(const StudyConfig& c) {
  std::vector<RunSpec> out;
  for (std::size_t ri = 0; ri < c.rhos.size(); ++ri) {
    for (const auto& name : c.protocols) {
      const auto base = base_protocol(c, name);
      for (const HpPoint& hp : hyperparameter_grid(base, c.grids)) {
        for (std::uint64_t seed : c.seeds) {
          RunSpec r;
          r.run_id = out.size();
          r.rho_index = ri;
          r.rho = c.rhos[ri];
          r.protocol = protocols::protocol_name(base);
          r.hp = hp;
          r.seed = seed;
          r.config = apply_point(base, hp);
          r.config.seed = seed;
          out.push_back(std::move(r));
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics bookkeeping
// ---------------------------------------------------------------------------

struct MetricField {
  const char* name;
  double safety::MetricReport::*member;
};

inline const std::vector<MetricField>& metric_fields() {
  using R = safety::MetricReport;
  static const std::vector<MetricField> fields = {
      {"id_acc", &R::id_acc},
      {"ood_acc", &R::ood_acc},
      {"corr_acc", &R::corr_acc},
      {"rand_acc", &R::rand_acc},
      {"mca", &R::mca},
      {"adv_acc", &R::adv_acc},
      {"calib_id", &R::calib_id},
      {"calib_corrupted", &R::calib_corrupted},
      {"calib_ood", &R::calib_ood},
      {"anomaly_auroc", &R::anomaly_auroc},
      {"cka", &R::cka},
  };
  return fields;
}

// Metrics that enter the rank table. CKA is a diagnostic of how far the
// representation moved, not a quality where higher is better.
inline std::vector<std::string> rank_metric_names() {
  std::vector<std::string> out;
  for (const auto& f : metric_fields())
    if (std::string(f.name) != "cka") out.push_back(f.name);
  return out;
}

struct RunResult {
  RunSpec spec;
  bool ok = false;
  std::string error;
  double id_val_acc = std::numeric_limits<double>::quiet_NaN();
  safety::MetricReport metrics;
};

struct SummaryRow {
  double rho = 0.0;
  std::string protocol;
  HpPoint hp;
  std::size_t n_seeds = 0;
  std::size_t n_ok = 0;
  bool selected = false;
  double id_val_acc = std::numeric_limits<double>::quiet_NaN();
  std::map<std::string, double> metrics;  // seed means over successful runs
};

// Groups consecutive runs sharing (rho, protocol, grid point); relies on the
// expand_runs ordering.
inline std::vector<SummaryRow> summarize(const std::vector<RunResult>& runs) {
  std::vector<SummaryRow> out;
  std::size_t i = 0;
  while (i < runs.size()) {
    const RunSpec& s = runs[i].spec;
    std::size_t j = i;
    while (j < runs.size() && runs[j].spec.rho_index == s.rho_index &&
           runs[j].spec.protocol == s.protocol && runs[j].spec.hp == s.hp) {
      ++j;
    }
    SummaryRow row;
    row.rho = s.rho;
    row.protocol = s.protocol;
    row.hp = s.hp;
    row.n_seeds = j - i;
    double val = 0.0;
    std::map<std::string, double> sums;
    for (std::size_t q = i; q < j; ++q) {
      if (!runs[q].ok) continue;
      ++row.n_ok;
      val += runs[q].id_val_acc;
      for (const auto& f : metric_fields()) sums[f.name] += runs[q].metrics.*(f.member);
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const double n = static_cast<double>(row.n_ok);
    row.id_val_acc = row.n_ok ? val / n : nan;
    for (const auto& f : metric_fields()) row.metrics[f.name] = row.n_ok ? sums[f.name] / n : nan;
    out.push_back(std::move(row));
    i = j;
  }
  return out;
}

struct Candidate {
  HpPoint hp;
  double mean_id_val = 0.0;
};

// Highest mean validation accuracy; ties go to the smallest hyperparameter
// tuple. NaN candidates (no successful seed) are never chosen.
inline std::optional<std::size_t> select_best(const std::vector<Candidate>& cands) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (std::isnan(cands[i].mean_id_val)) continue;
    if (!best) {
      best = i;
      continue;
    }
    const Candidate& b = cands[*best];
    if (cands[i].mean_id_val > b.mean_id_val ||
        (cands[i].mean_id_val == b.mean_id_val && cands[i].hp < b.hp)) {
      best = i;
    }
  }
  return best;
}

// Sets SummaryRow::selected for the best grid point of every (rho, protocol).
inline void select_hyperparameters(std::vector<SummaryRow>& rows) {
  std::map<std::pair<double, std::string>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].selected = false;
    groups[{rows[i].rho, rows[i].protocol}].push_back(i);
  }
  for (const auto& [key, idx] : groups) {
    std::vector<Candidate> cands;
    for (std::size_t i : idx) cands.push_back({rows[i].hp, rows[i].id_val_acc});
    if (auto b = select_best(cands)) rows[idx[*b]].selected = true;
  }
}

// ---------------------------------------------------------------------------
// Ranking
// ---------------------------------------------------------------------------

// Rank 1 goes to the largest value; tied values share the mean of their ranks.
inline std::vector<double> average_ranks(const std::vector<double>& values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t q = i; q <= j; ++q) ranks[order[q]] = r;
    i = j + 1;
  }
  return ranks;
}

// protocol -> metric -> value, for one setting.
using MetricTable = std::map<std::string, std::map<std::string, double>>;

struct Setting {
  std::string label;
  MetricTable table;
};

struct RankTable {
  std::vector<std::string> metrics;
  std::vector<std::string> protocols;
  std::vector<std::string> settings;
  // ranks[metric][setting][protocol]
  std::vector<std::vector<std::vector<double>>> ranks;
  // mean_rank[metric][protocol], averaged over settings
  std::vector<std::vector<double>> mean_rank;
};

inline RankTable rank_protocols(const std::vector<Setting>& settings,
                                const std::vector<std::string>& metrics) {
  if (settings.empty()) throw ConfigError("rank_protocols: need at least one setting");
  RankTable t;
  t.metrics = metrics;
  for (const auto& [p, _] : settings.front().table) t.protocols.push_back(p);
  if (t.protocols.size() < 2) throw ConfigError("rank_protocols: need at least two protocols");
  for (const auto& s : settings) {
    t.settings.push_back(s.label);
    if (s.table.size() != t.protocols.size()) {
      throw ConfigError("rank_protocols: setting " + s.label + " has a different protocol set");
    }
  }
  const std::size_t np = t.protocols.size();
  for (const auto& metric : metrics) {
    std::vector<std::vector<double>> per_setting;
    std::vector<double> mean(np, 0.0);
    for (const auto& s : settings) {
      std::vector<double> values;
      for (const auto& p : t.protocols) {
        auto pit = s.table.find(p);
        if (pit == s.table.end()) {
          throw ConfigError("rank_protocols: protocol " + p + " missing in " + s.label);
        }
        auto mit = pit->second.find(metric);
        if (mit == pit->second.end() || std::isnan(mit->second)) {
          throw ConfigError("rank_protocols: metric " + metric + " missing for " + p + " in " +
                            s.label);
        }
        values.push_back(mit->second);
      }
      per_setting.push_back(average_ranks(values));
      for (std::size_t i = 0; i < np; ++i) mean[i] += per_setting.back()[i];
    }
    for (double& m : mean) m /= static_cast<double>(settings.size());
    t.ranks.push_back(std::move(per_setting));
    t.mean_rank.push_back(std::move(mean));
  }
  return t;
}

inline std::string rho_label(double rho);

// Ranks the selected rows, one setting per rho.
inline RankTable rank_selected(const std::vector<SummaryRow>& rows) {
  std::map<double, Setting> by_rho;
  for (const auto& r : rows) {
    if (!r.selected) continue;
    Setting& s = by_rho[r.rho];
    s.label = rho_label(r.rho);
    s.table[r.protocol] = r.metrics;
  }
  std::vector<Setting> settings;
  for (auto& [_, s] : by_rho) settings.push_back(std::move(s));
  return rank_protocols(settings, rank_metric_names());
}

// ---------------------------------------------------------------------------
// Formatting
// ---------------------------------------------------------------------------

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string rho_label(double rho) { return "rho=" + format_double(rho); }

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch == '\n' ? ' ' : ch;
  }
  return out + "\"";
}

namespace detail {

inline void write_hp(std::ostream& os, const protocols::ProtocolConfig& p, const HpPoint& hp) {
  using protocols::Mitigation;
  auto opt = [&](bool used, const std::string& v) { os << ',' << (used ? v : ""); };
  opt(p.has_lp_stage(), format_double(hp.lp_lr));
  opt(p.has_ft_stage(), format_double(hp.ft_lr));
  opt(p.mitigation == Mitigation::kVat, format_double(hp.vat_alpha));
  opt(p.mitigation == Mitigation::kUdp, format_double(hp.udp_epsilon));
  opt(p.mitigation == Mitigation::kSoup, std::to_string(hp.soup_k));
}

inline const char* kHpHeader = "lp_lr,ft_lr,vat_alpha,udp_epsilon,soup_k";

}  // namespace detail

inline void write_runs_csv(std::ostream& os, const std::vector<RunResult>& runs) {
  os << "run_id,rho,protocol," << detail::kHpHeader << ",seed,status,id_val_acc";
  for (const auto& f : metric_fields()) os << ',' << f.name;
  os << ",error\n";
  for (const auto& r : runs) {
    os << r.spec.run_id << ',' << format_double(r.spec.rho) << ',' << r.spec.protocol;
    detail::write_hp(os, r.spec.config, r.spec.hp);
    os << ',' << r.spec.seed << ',' << (r.ok ? "ok" : "failed");
    const double nan = std::numeric_limits<double>::quiet_NaN();
    os << ',' << format_double(r.ok ? r.id_val_acc : nan);
    for (const auto& f : metric_fields()) os << ',' << format_double(r.ok ? r.metrics.*(f.member) : nan);
    os << ',' << csv_quote(r.error) << '\n';
  }
}

inline void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
  os << "rho,protocol," << detail::kHpHeader << ",n_seeds,n_ok,selected,id_val_acc";
  for (const auto& f : metric_fields()) os << ',' << f.name;
  os << '\n';
  for (const auto& r : rows) {
    os << format_double(r.rho) << ',' << r.protocol;
    detail::write_hp(os, protocols::parse_protocol(r.protocol), r.hp);
    os << ',' << r.n_seeds << ',' << r.n_ok << ',' << (r.selected ? 1 : 0) << ','
       << format_double(r.id_val_acc);
    for (const auto& f : metric_fields()) os << ',' << format_double(r.metrics.at(f.name));
    os << '\n';
  }
}

inline void write_ranks_csv(std::ostream& os, const std::optional<RankTable>& t) {
  os << "metric,setting,protocol,rank\n";
  if (!t) return;
  for (std::size_t m = 0; m < t->metrics.size(); ++m) {
    for (std::size_t s = 0; s < t->settings.size(); ++s)
      for (std::size_t p = 0; p < t->protocols.size(); ++p)
        os << t->metrics[m] << ',' << t->settings[s] << ',' << t->protocols[p] << ','
           << format_double(t->ranks[m][s][p]) << '\n';
    for (std::size_t p = 0; p < t->protocols.size(); ++p)
      os << t->metrics[m] << ",mean," << t->protocols[p] << ','
         << format_double(t->mean_rank[m][p]) << '\n';
  }
}

inline void write_summary_md(std::ostream& os, const std::vector<SummaryRow>& rows,
                             const std::optional<RankTable>& t, std::size_t failed_runs) {
  char buf[32];
  auto fixed = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  os << "# Study summary\n\n";
  if (failed_runs) os << "**" << failed_runs << " run(s) failed; see runs.csv.**\n\n";
  os << "Selected grid point per (rho, protocol), seed means.\n\n";
  os << "| rho | protocol | id_val";
  for (const auto& f : metric_fields()) os << " | " << f.name;
  os << " |\n|---|---|---";
  for (std::size_t i = 0; i < metric_fields().size(); ++i) os << "|---";
  os << "|\n";
  for (const auto& r : rows) {
    if (!r.selected) continue;
    os << "| " << format_double(r.rho) << " | " << r.protocol << " | " << fixed(r.id_val_acc);
    for (const auto& f : metric_fields()) os << " | " << fixed(r.metrics.at(f.name));
    os << " |\n";
  }
  if (!t) {
    os << "\nRanks unavailable (fewer than two protocols with a selected point in every "
          "setting).\n";
    return;
  }
  os << "\nMean rank over settings (1 = best).\n\n| protocol";
  for (const auto& m : t->metrics) os << " | " << m;
  os << " |\n|---";
  for (std::size_t i = 0; i < t->metrics.size(); ++i) os << "|---";
  os << "|\n";
  for (std::size_t p = 0; p < t->protocols.size(); ++p) {
    os << "| " << t->protocols[p];
    for (std::size_t m = 0; m < t->metrics.size(); ++m) {
      std::snprintf(buf, sizeof buf, "%.2f", t->mean_rank[m][p]);
      os << " | " << buf;
    }
    os << " |\n";
  }
}

// Reads summary.csv back (used by `rank`).
inline std::vector<SummaryRow> read_summary_csv(std::istream& is) {
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
      if (ch == ',') {
        out.push_back(cur);
        cur.clear();
      } else {
        cur += ch;
      }
    }
    out.push_back(cur);
    return out;
  };
  auto num = [](const std::string& s) -> double {
    if (s.empty()) return 0.0;
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
      throw ConfigError("summary.csv: bad number '" + s + "'");
    }
    return v;
  };
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("summary.csv: empty file");
  const std::vector<std::string> header = split(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* need : {"rho", "protocol", "selected", "id_val_acc"}) {
    if (!col.contains(need)) throw ConfigError(std::string("summary.csv: missing column ") + need);
  }
  std::vector<SummaryRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != header.size()) throw ConfigError("summary.csv: ragged row");
    SummaryRow r;
    r.rho = num(f[col["rho"]]);
    r.protocol = f[col["protocol"]];
    r.hp = {num(f[col["lp_lr"]]), num(f[col["ft_lr"]]), num(f[col["vat_alpha"]]),
            num(f[col["udp_epsilon"]]), static_cast<std::size_t>(num(f[col["soup_k"]]))};
    r.n_seeds = static_cast<std::size_t>(num(f[col["n_seeds"]]));
    r.n_ok = static_cast<std::size_t>(num(f[col["n_ok"]]));
    r.selected = f[col["selected"]] == "1";
    r.id_val_acc = num(f[col["id_val_acc"]]);
    for (const auto& m : metric_fields()) {
      if (col.contains(m.name)) r.metrics[m.name] = num(f[col[m.name]]);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

inline std::string pretrain_cache_key(const data::DominoConfig& d,
                                      const model::PretrainConfig& p) {
  std::ostringstream os;
  os << d.num_classes << '/' << d.complex_dim << '/' << format_double(d.sigma_simple) << '/'
     << format_double(d.sigma_complex) << '/' << d.seed << '|' << p.epochs << '/'
     << p.num_samples << '/' << p.batch_size << '/' << format_double(p.lr) << '/'
     << format_double(p.momentum) << '/' << format_double(p.recon_weight) << '/' << p.rep_dim
     << '/' << p.seed;
  return os.str();
}

// Pretrained extractors keyed by (domino build, pretrain config). Thread safe;
// concurrent requests for the same key pretrain once.
class ExtractorCache {
 public:
  model::PretrainResult get(const data::GeneratorState& gen, const model::PretrainConfig& cfg) {
    const std::string key = pretrain_cache_key(gen.config, cfg);
    std::shared_ptr<Entry> e;
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto& slot = entries_[key];
      if (!slot) slot = std::make_shared<Entry>();
      e = slot;
    }
    std::call_once(e->once, [&] { e->result = model::pretrain(gen, cfg); });
    return e->result;
  }

 private:
  struct Entry {
    std::once_flag once;
    model::PretrainResult result;
  };
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<Entry>> entries_;
};

struct SettingData {
  data::Dataset train;
  data::Dataset val;
  safety::EvalSets eval;
};

namespace detail {

inline data::Dataset slice(const data::Dataset& ds, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx;
  for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
  data::Dataset out;
  out.inputs = numerics::gather_rows(ds.inputs, idx);
  out.labels.assign(ds.labels.begin() + begin, ds.labels.begin() + end);
  out.simple_labels.assign(ds.simple_labels.begin() + begin, ds.simple_labels.begin() + end);
  out.provenance = ds.provenance;
  return out;
}

}  // namespace detail

// Training pool, validation tail and evaluation sets for one rho.
inline SettingData build_setting(const data::GeneratorState& gen, const StudyConfig& c,
                                 std::size_t rho_index) {
  const Rng base = Rng(c.domino.seed).derive("setting", rho_index);
  const double rho = c.rhos.at(rho_index);
  Rng train_rng = base.derive("train");
  const data::Dataset pool = data::sample(gen, c.n_train, train_rng, rho);
  SettingData s;
  const std::size_t n_fit = c.n_train - c.n_val();
  s.train = detail::slice(pool, 0, n_fit);
  s.val = detail::slice(pool, n_fit, c.n_train);
  s.eval = safety::make_eval_sets(gen, rho, c.shift, c.n_test, c.n_anomaly, base.derive("eval"));
  return s;
}

inline RunResult execute_run(const RunSpec& spec, const Graph& extractor,
                             const SettingData& data, std::size_t num_classes,
                             const safety::PgdConfig& pgd_base) {
  RunResult r;
  r.spec = spec;
  try {
    const protocols::AdaptedModel am =
        protocols::run_protocol(extractor, data.train, num_classes, spec.config);
    safety::PgdConfig pgd = pgd_base;
    pgd.seed = spec.seed;
    r.id_val_acc = safety::accuracy(am.model, data.val);
    r.metrics = safety::evaluate_suite(am.model, data.eval, pgd);
    r.ok = true;
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
  }
  return r;
}

struct StudyOptions {
  std::size_t workers = 1;
  // Called under a lock as each run finishes, in completion order.
  std::function<void(const RunResult&)> on_run_done;
};

struct StudyResult {
  std::vector<RunResult> runs;  // ordered by run_id
  std::vector<SummaryRow> summary;
  std::optional<RankTable> ranks;
  std::string rank_error;  // why ranks is empty, if it is
  std::size_t failed = 0;
};

// Resolves the extractor every run starts from: loaded from cfg.extractor_path
// when set, otherwise pretrained through the cache.
inline Graph study_extractor(const data::GeneratorState& gen, const StudyConfig& c,
                             ExtractorCache& cache) {
  if (!c.extractor_path.empty()) return model::load_extractor(c.extractor_path, gen.config.input_dim());
  return cache.get(gen, c.pretrain).extractor;
}

inline StudyResult run_study(const StudyConfig& c, const StudyOptions& opt,
                             ExtractorCache& cache) {
  c.validate();
  const data::GeneratorState gen = data::build_generators(c.domino);
  const std::vector<RunSpec> specs = expand_runs(c);

  StudyResult out;
  out.runs.resize(specs.size());

  Graph extractor;
  std::string setup_error;
  try {
    extractor = study_extractor(gen, c, cache);
  } catch (const std::exception& e) {
    setup_error = std::string("pretrained extractor unavailable: ") + e.what();
  }

  std::vector<SettingData> settings;
  if (setup_error.empty()) {
    for (std::size_t ri = 0; ri < c.rhos.size(); ++ri) settings.push_back(build_setting(gen, c, ri));
  }

  std::mutex report_mu;
  auto finish = [&](std::size_t i, RunResult r) {
    std::lock_guard<std::mutex> lock(report_mu);
    out.runs[i] = std::move(r);
    if (opt.on_run_done) opt.on_run_done(out.runs[i]);
  };

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= specs.size()) return;
      if (!setup_error.empty()) {
        RunResult r;
        r.spec = specs[i];
        r.error = setup_error;
        finish(i, std::move(r));
        continue;
      }
      finish(i, execute_run(specs[i], extractor, settings[specs[i].rho_index],
                            c.domino.num_classes, c.pgd));
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(opt.workers, 1, std::max<std::size_t>(1, specs.size()));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (const auto& r : out.runs) out.failed += r.ok ? 0 : 1;
  out.summary = summarize(out.runs);
  select_hyperparameters(out.summary);
  try {
    out.ranks = rank_selected(out.summary);
  } catch (const ConfigError& e) {
    out.rank_error = e.what();
  }
  return out;
}

inline void write_text(const std::filesystem::path& p, const std::function<void(std::ostream&)>& fn) {
  std::ofstream os(p);
  if (!os) throw RunError("cannot write " + p.string());
  fn(os);
  if (!os) throw RunError("write failed for " + p.string());
}

inline void write_reports(const std::filesystem::path& dir, const StudyConfig& c,
                          const StudyResult& r) {
  std::filesystem::create_directories(dir);
  write_text(dir / "config.json", [&](std::ostream& os) { os << to_json(c).dump(2) << '\n'; });
  write_text(dir / "runs.csv", [&](std::ostream& os) { write_runs_csv(os, r.runs); });
  write_text(dir / "summary.csv", [&](std::ostream& os) { write_summary_csv(os, r.summary); });
  write_text(dir / "ranks.csv", [&](std::ostream& os) { write_ranks_csv(os, r.ranks); });
  write_text(dir / "summary.md",
             [&](std::ostream& os) { write_summary_md(os, r.summary, r.ranks, r.failed); });
}

}  // namespace adaptlab::harness

#endif  // ADAPTLAB_HARNESS_HPP_
