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

// Command line front end. Exit codes: 0 success, 1 a run or I/O step failed,
// 2 bad configuration or arguments.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "adaptlab/harness.hpp"

namespace fs = std::filesystem;
using namespace adaptlab;

namespace {

constexpr int kExitRunFailed = 1;
constexpr int kExitConfig = 2;

struct Common {
  std::string config;
  std::vector<std::uint64_t> seeds;
};

harness::StudyConfig load(const Common& common) {
  harness::StudyConfig c = harness::load_study_config(common.config);
  if (!common.seeds.empty()) {
    c.seeds = common.seeds;
    c.validate();
  }
  return c;
}

int report_study(const harness::StudyConfig& c, const std::string& out, std::size_t workers) {
  harness::ExtractorCache cache;
  harness::StudyOptions opt;
  opt.workers = workers;
  const std::size_t total = harness::expand_runs(c).size();
  std::size_t done = 0;
  opt.on_run_done = [&](const harness::RunResult& r) {
    ++done;
    std::fprintf(stderr, "[%zu/%zu] rho=%s %s seed=%llu %s\n", done, total,
                 harness::format_double(r.spec.rho).c_str(), r.spec.protocol.c_str(),
                 static_cast<unsigned long long>(r.spec.seed),
                 r.ok ? "ok" : ("FAILED: " + r.error).c_str());
  };
  const harness::StudyResult res = harness::run_study(c, opt, cache);
  harness::write_reports(out, c, res);
  if (!res.rank_error.empty()) std::fprintf(stderr, "ranks skipped: %s\n", res.rank_error.c_str());
  std::fprintf(stderr, "%zu runs, %zu failed; reports in %s\n", res.runs.size(), res.failed,
               out.c_str());
  return res.failed ? kExitRunFailed : 0;
}

int cmd_pretrain(const Common& common, const std::string& out) {
  const harness::StudyConfig c = load(common);
  const data::GeneratorState gen = data::build_generators(c.domino);
  model::PretrainResult r;
  try {
    r = model::pretrain(gen, c.pretrain);
  } catch (const model::PretrainError& e) {
    std::fprintf(stderr, "pretraining failed: %s\n", e.what());
    return kExitRunFailed;
  }
  fs::create_directories(out);
  model::save_extractor((fs::path(out) / "extractor.txt").string(), r.extractor);
  nlohmann::json info = {{"probe_accuracy", r.probe_accuracy},
                         {"recon_r2", r.recon_r2},
                         {"loss_log", r.loss_log}};
  std::ofstream(fs::path(out) / "pretrain.json") << info.dump(2) << '\n';
  std::printf("probe_accuracy %.4f recon_r2 %.4f\n", r.probe_accuracy, r.recon_r2);
  return 0;
}

int cmd_rank(const std::string& in) {
  std::ifstream is(fs::path(in) / "summary.csv");
  if (!is) throw ConfigError("rank: no summary.csv in " + in);
  const std::vector<harness::SummaryRow> rows = harness::read_summary_csv(is);
  const harness::RankTable t = harness::rank_selected(rows);
  std::ofstream os(fs::path(in) / "ranks.csv");
  harness::write_ranks_csv(os, t);
  std::printf("%-18s", "protocol");
  for (const auto& m : t.metrics) std::printf(" %15s", m.c_str());
  std::printf("\n");
  for (std::size_t p = 0; p < t.protocols.size(); ++p) {
    std::printf("%-18s", t.protocols[p].c_str());
    for (std::size_t m = 0; m < t.metrics.size(); ++m) std::printf(" %15.2f", t.mean_rank[m][p]);
    std::printf("\n");
  }
  return 0;
}

// Writes one labeled split for the given rho index as CSV.
int cmd_dataset(const Common& common, std::size_t rho_index, const std::string& split,
                const std::string& out) {
  const harness::StudyConfig c = load(common);
  if (rho_index >= c.rhos.size()) throw ConfigError("dataset: rho index out of range");
  const data::GeneratorState gen = data::build_generators(c.domino);
  const harness::SettingData s = harness::build_setting(gen, c, rho_index);
  const data::Dataset* ds = nullptr;
  if (split == "train") ds = &s.train;
  else if (split == "val") ds = &s.val;
  else if (auto it = s.eval.labeled.find(split); it != s.eval.labeled.end()) ds = &it->second;
  if (!ds) throw ConfigError("dataset: unknown split '" + split + "'");
  std::ofstream os(out);
  if (!os) throw RunError("cannot write " + out);
  data::write_csv(os, *ds);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adaptlab: adaptation protocol studies on synthetic dominoes"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--seed", common.seeds, "Override the config seed list (repeatable)");

  std::string out, in, protocol, split = "id_test";
  std::size_t workers = 1, rho_index = 0;

  auto* pre = app.add_subcommand("pretrain", "Pretrain and save the shared extractor");
  pre->add_option("--config", common.config)->required();
  pre->add_option("--out", out)->required();

  auto* adapt = app.add_subcommand("adapt", "Sweep one protocol over the config grid");
  adapt->add_option("--config", common.config)->required();
  adapt->add_option("--protocol", protocol, "e.g. LP, FT, LP+FT, LP(VAT)+FT")->required();
  adapt->add_option("--out", out)->required();
  adapt->add_option("--workers", workers)->check(CLI::PositiveNumber);

  auto* study = app.add_subcommand("study", "Run every protocol, select and rank");
  study->add_option("--config", common.config)->required();
  study->add_option("--out", out)->required();
  study->add_option("--workers", workers)->check(CLI::PositiveNumber);

  auto* rank = app.add_subcommand("rank", "Recompute ranks from a study directory");
  rank->add_option("--in", in)->required();

  auto* dataset = app.add_subcommand("dataset", "Dump one generated split as CSV");
  dataset->add_option("--config", common.config)->required();
  dataset->add_option("--rho-index", rho_index);
  dataset->add_option("--split", split, "train, val, id_test, ood_test, correlated, randomized, "
                                        "corrupted:<kind>:<severity>");
  dataset->add_option("--out", out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*pre) return cmd_pretrain(common, out);
    if (*adapt) {
      harness::StudyConfig c = load(common);
      c.protocols = {protocol};
      c.validate();
      return report_study(c, out, workers);
    }
    if (*study) return report_study(load(common), out, workers);
    if (*rank) return cmd_rank(in);
    if (*dataset) return cmd_dataset(common, rho_index, split, out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRunFailed;
  }
  return 0;
}
