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
#include <limits>

#include <gtest/gtest.h>

#include "adaptlab/protocols.hpp"
#include "reference.hpp"

namespace {

using namespace adaptlab;
using namespace adaptlab::protocols;
using numerics::Graph;
using numerics::Matrix;
using numerics::Rng;

struct Fixture {
  data::GeneratorState gen = data::build_generators(data::DominoConfig{});
  Graph extractor;
  data::Dataset train;

  Fixture() {
    Rng init(101);
    extractor = model::make_extractor(13, init);
    Rng r(102);
    train = data::sample(gen, 300, r, 0.9);
  }
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

ProtocolConfig quick(std::string_view name, std::uint64_t seed = 5) {
  ProtocolConfig c = parse_protocol(name);
  c.lp_epochs = 3;
  c.ft_epochs = 2;
  c.batch_size = 64;
  c.seed = seed;
  return c;
}

AdaptedModel run(const ProtocolConfig& c) {
  return run_protocol(fx().extractor, fx().train, 5, c);
}

void expect_same(const AdaptedModel& a, const AdaptedModel& b) {
  EXPECT_EQ(a.model.extractor, b.model.extractor);
  EXPECT_EQ(a.model.head, b.model.head);
  EXPECT_EQ(a.model.pretrained_snapshot, b.model.pretrained_snapshot);
  EXPECT_EQ(a.lp_loss_log, b.lp_loss_log);
  EXPECT_EQ(a.ft_loss_log, b.ft_loss_log);
}

// --- names ------------------------------------------------------------------

TEST(ProtocolName, RoundTripsEveryValidName) {
  for (const char* name :
       {"LP", "FT", "FT(scratch)", "LP+FT", "LP(VAT)", "LP(UDP)", "LP(Soup)", "FT(VAT)",
        "FT(UDP)", "LP(VAT)+FT", "LP(UDP)+FT", "LP(Soup)+FT", "LP+FT(VAT)", "LP+FT(UDP)",
        "LP(VAT)+FT(VAT)", "LP(UDP)+FT(UDP)"}) {
    const ProtocolConfig c = parse_protocol(name);
    EXPECT_EQ(protocol_name(c), name);
    EXPECT_NO_THROW(c.validate()) << name;
  }
}

TEST(ProtocolName, ParsesStructure) {
  ProtocolConfig c = parse_protocol("LP(UDP)+FT");
  EXPECT_EQ(c.kind, Kind::kLpFt);
  EXPECT_EQ(c.mitigation, Mitigation::kUdp);
  EXPECT_TRUE(c.mitigates_lp());
  EXPECT_FALSE(c.mitigates_ft());
  c = parse_protocol("LP+FT(VAT)");
  EXPECT_FALSE(c.mitigates_lp());
  EXPECT_TRUE(c.mitigates_ft());
  c = parse_protocol("LP(VAT)+FT(VAT)");
  EXPECT_EQ(c.stage, Stage::kBoth);
  EXPECT_TRUE(c.mitigates_lp() && c.mitigates_ft());
  c = parse_protocol("FT(scratch)");
  EXPECT_TRUE(c.from_scratch);
  EXPECT_FALSE(c.has_lp_stage());
}

TEST(ProtocolName, RejectsInvalidNames) {
  for (const char* name :
       {"", "lp", "LP+", "+FT", "FT+LP", "LP(", "LP(VAT", "FT(Soup)", "LP+FT(Soup)",
        "LP(Soup)+FT(Soup)", "LP(VAT)+FT(UDP)", "LP+FT(scratch)", "LP(scratch)", "LP()",
        "LP(XYZ)", "LP+FT+FT", " LP"}) {
    EXPECT_THROW(parse_protocol(name), ConfigError) << "'" << name << "'";
  }
}

TEST(ProtocolConfig, ValidationRejectsBadValues) {
  auto bad = [](auto mutate) {
    ProtocolConfig c = parse_protocol("LP(VAT)+FT");
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](ProtocolConfig& c) { c.lp_lr = -1.0; });
  bad([](ProtocolConfig& c) { c.ft_lr = std::numeric_limits<double>::quiet_NaN(); });
  bad([](ProtocolConfig& c) { c.batch_size = 0; });
  bad([](ProtocolConfig& c) { c.momentum = 1.0; });
  bad([](ProtocolConfig& c) { c.vat.epsilon = 0.0; });
  bad([](ProtocolConfig& c) { c.vat.alpha = -0.1; });
  bad([](ProtocolConfig& c) { c.from_scratch = true; });

  ProtocolConfig s = parse_protocol("LP(Soup)+FT");
  s.soup.k = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = parse_protocol("LP(Soup)+FT");
  s.soup.sparsity = 1.0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = parse_protocol("LP(UDP)+FT");
  s.udp.epsilon = -0.01;
  EXPECT_THROW(s.validate(), ConfigError);
  // Learning rate zero is a legal (frozen) configuration.
  s = parse_protocol("LP+FT");
  s.lp_lr = 0.0;
  s.ft_lr = 0.0;
  EXPECT_NO_THROW(s.validate());
}

// --- structural invariants --------------------------------------------------

TEST(Lp, LeavesTheExtractorBitIdentical) {
  for (const char* name : {"LP", "LP(VAT)", "LP(UDP)", "LP(Soup)"}) {
    const AdaptedModel m = run(quick(name));
    EXPECT_EQ(m.model.extractor, fx().extractor) << name;
    EXPECT_EQ(m.model.pretrained_snapshot, fx().extractor) << name;
    EXPECT_EQ(m.lp_loss_log.size(), 3u);
    EXPECT_TRUE(m.ft_loss_log.empty());
  }
}

TEST(Lp, ZeroEpochsLeavesTheHeadAtItsInitialization) {
  ProtocolConfig c = quick("LP");
  c.lp_epochs = 0;
  const AdaptedModel m = run(c);
  Rng init = Rng(c.seed).derive("head_init", 0);
  EXPECT_EQ(m.model.head, model::make_head(32, 5, init));
}

TEST(Lp, LossDecreases) {
  ProtocolConfig c = quick("LP");
  c.lp_epochs = 20;
  const AdaptedModel m = run(c);
  EXPECT_LT(m.lp_loss_log.back(), m.lp_loss_log.front());
}

TEST(Ft, ZeroEpochsIsTheIdentity) {
  ProtocolConfig c = quick("FT");
  c.ft_epochs = 0;
  const AdaptedModel m = run(c);
  EXPECT_EQ(m.model.extractor, fx().extractor);
  Rng init = Rng(c.seed).derive("head_init", 0);
  EXPECT_EQ(m.model.head, model::make_head(32, 5, init));

  ProtocolConfig lpft = quick("LP+FT");
  lpft.ft_epochs = 0;
  AdaptedModel only_lp = run(quick("LP"));
  AdaptedModel both = run(lpft);
  EXPECT_EQ(both.model.head, only_lp.model.head);
  EXPECT_EQ(both.model.extractor, only_lp.model.extractor);
  EXPECT_EQ(both.lp_loss_log, only_lp.lp_loss_log);
}

TEST(Ft, MovesTheExtractorAndKeepsTheSnapshot) {
  const AdaptedModel m = run(quick("LP+FT"));
  EXPECT_NE(m.model.extractor, fx().extractor);
  EXPECT_EQ(m.model.pretrained_snapshot, fx().extractor);
  EXPECT_EQ(m.lp_loss_log.size(), 3u);
  EXPECT_EQ(m.ft_loss_log.size(), 2u);
}

TEST(Ft, ScratchStartsFromAFreshExtractor) {
  ProtocolConfig c = quick("FT(scratch)");
  c.ft_epochs = 0;
  const AdaptedModel m = run(c);
  EXPECT_NE(m.model.extractor, fx().extractor);
  EXPECT_EQ(m.model.pretrained_snapshot, m.model.extractor);
  Rng init = Rng(c.seed).derive("scratch_init");
  EXPECT_EQ(m.model.extractor, model::make_extractor(13, init, 32));
}

TEST(Protocols, DeterministicPerSeed) {
  for (const char* name : {"FT", "LP(VAT)+FT", "LP(UDP)+FT", "LP(Soup)+FT", "LP+FT(VAT)"}) {
    expect_same(run(quick(name, 9)), run(quick(name, 9)));
    EXPECT_NE(run(quick(name, 9)).model.head, run(quick(name, 10)).model.head) << name;
  }
}

TEST(Protocols, DivergenceRaisesRunError) {
  ProtocolConfig c = quick("FT");
  c.ft_lr = 1e300;
  EXPECT_THROW(run(c), RunError);
}

TEST(Protocols, EmptyTrainingSetIsAConfigError) {
  data::Dataset empty = fx().train;
  empty.inputs = Matrix(0, 13);
  empty.labels.clear();
  empty.simple_labels.clear();
  EXPECT_THROW(run_protocol(fx().extractor, empty, 5, quick("LP")), ConfigError);
}

// Degenerate mitigation settings reduce to the unmitigated protocol bit for bit.
TEST(Mitigations, DegenerateSettingsReproduceTheBaseProtocol) {
  const AdaptedModel base = run(quick("LP+FT"));

  ProtocolConfig vat = quick("LP(VAT)+FT(VAT)");
  vat.vat.alpha = 0.0;
  expect_same(run(vat), base);

  ProtocolConfig udp = quick("LP(UDP)+FT(UDP)");
  udp.udp.epsilon = 0.0;
  expect_same(run(udp), base);

  ProtocolConfig udp_steps = quick("LP(UDP)+FT");
  udp_steps.udp.ascent_steps = 0;
  expect_same(run(udp_steps), base);

  ProtocolConfig soup = quick("LP(Soup)+FT");
  soup.soup.k = 1;
  soup.soup.sparsity = 0.0;
  expect_same(run(soup), base);
}

TEST(Mitigations, NonDegenerateSettingsChangeTheResult) {
  const AdaptedModel base = run(quick("LP+FT"));
  ProtocolConfig vat = quick("LP(VAT)+FT");
  vat.vat.alpha = 1.0;
  EXPECT_NE(run(vat).model.head, base.model.head);
  ProtocolConfig udp = quick("LP(UDP)+FT");
  udp.udp.epsilon = 0.5;
  EXPECT_NE(run(udp).model.head, base.model.head);
}

// --- VAT --------------------------------------------------------------------

// With two classes the KL between p(h) and p(h + d) depends on d only through
// (w0 - w1) . d, so the adversarial direction is +-(w0 - w1) for every row.
TEST(Vat, TwoClassDirectionIsTheLogitDifferenceAxis) {
  Rng rng(30);
  const Graph head = model::make_head(6, 2, rng);
  const Matrix h = rng.normal_matrix(20, 6);
  VatConfig cfg;
  cfg.epsilon = 0.3;
  const Matrix d = vat_perturbation(head, h, cfg, rng);
  std::vector<double> axis(6);
  for (std::size_t j = 0; j < 6; ++j)
    axis[j] = head.affine(0).weight(0, j) - head.affine(0).weight(1, j);
  const double an = numerics::norm2(axis);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_NEAR(numerics::norm2(d.row(i)), 0.3, 1e-9);
    EXPECT_NEAR(std::abs(numerics::dot(d.row(i), axis)) / (0.3 * an), 1.0, 1e-6);
  }
}

// In general the direction found should raise the KL well above a random
// direction of the same length.
TEST(Vat, PerturbationIsMoreAdversarialThanRandom) {
  Rng rng(31);
  Graph head = model::make_head(8, 5, rng);
  head.affine(0).weight = numerics::scaled(head.affine(0).weight, 4.0);
  const Matrix h = rng.normal_matrix(200, 8);
  VatConfig cfg;
  cfg.epsilon = 0.2;
  const Matrix ref = numerics::softmax(numerics::forward_logits(head, h));
  auto kl = [&](const Matrix& d) {
    return numerics::evaluate_loss(numerics::forward_logits(head, numerics::add(h, d)),
                                   numerics::KlDivergence{ref})
        .value;
  };
  Matrix rnd = rng.normal_matrix(200, 8);
  detail::normalize_rows(rnd);
  EXPECT_GT(kl(vat_perturbation(head, h, cfg, rng)), 3.0 * kl(numerics::scaled(rnd, 0.2)));
}

// The objective's gradients match finite differences of
// CE(W h) + alpha KL(p_ref || W(h + delta)) with delta and p_ref held fixed.
TEST(Vat, ObjectiveGradientsMatchFiniteDifferences) {
  Rng rng(32);
  const Graph head = model::make_head(4, 3, rng);
  const Matrix h = rng.normal_matrix(6, 4);
  const std::vector<int> y{0, 1, 2, 0, 1, 2};
  VatConfig cfg;
  cfg.alpha = 0.7;
  cfg.epsilon = 0.5;
  Rng r1(33), r2(33);
  const HeadObjective obj = vat_objective(head, h, y, cfg, r1);
  const Matrix delta = vat_perturbation(head, h, cfg, r2);
  const ref::Rows p_ref = [&] {
    ref::Rows out;
    for (const auto& z : ref::forward(head, ref::to_rows(h))) out.push_back(ref::softmax_row(z));
    return out;
  }();

  auto objective = [&](const Graph& g, const Matrix& hh) {
    ref::LossSpec ce{ref::LossKind::kCe, y, {}};
    ref::LossSpec kl{ref::LossKind::kKl, {}, p_ref};
    return ref::loss(ref::forward(g, ref::to_rows(hh)), ce) +
           cfg.alpha * ref::loss(ref::forward(g, ref::to_rows(numerics::add(hh, delta))), kl);
  };
  EXPECT_NEAR(obj.loss, objective(head, h), 1e-12);

  const double step = 1e-6;
  Graph probe = head;
  auto& w = probe.affine(0).weight.values();
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double keep = w[i];
    w[i] = keep + step;
    const double up = objective(probe, h);
    w[i] = keep - step;
    const double down = objective(probe, h);
    w[i] = keep;
    EXPECT_LT(ref::rel_error(obj.head_grads[0].weight.values()[i], (up - down) / (2 * step)),
              1e-5);
  }
  for (std::size_t i = 0; i < h.size(); ++i) {
    Matrix hp = h, hm = h;
    hp.values()[i] += step;
    hm.values()[i] -= step;
    const double fd = (objective(head, hp) - objective(head, hm)) / (2 * step);
    EXPECT_LT(ref::rel_error(obj.dh.values()[i], fd), 1e-5);
  }
}

TEST(Vat, LossIsAtLeastCrossEntropy) {
  Rng rng(34);
  const Graph head = model::make_head(4, 3, rng);
  const Matrix h = rng.normal_matrix(10, 4);
  const std::vector<int> y{0, 1, 2, 0, 1, 2, 0, 1, 2, 0};
  const double ce = cross_entropy_objective(head, h, y).loss;
  VatConfig cfg;
  cfg.alpha = 1.0;
  EXPECT_GE(vat_loss(head, h, y, cfg, rng), ce);
  cfg.alpha = 0.0;
  EXPECT_EQ(vat_loss(head, h, y, cfg, rng), ce);
}

// --- UDP --------------------------------------------------------------------

TEST(Udp, RaisesEntropyInsideTheBall) {
  Rng rng(40);
  Graph head = model::make_head(8, 5, rng);
  head.affine(0).weight = numerics::scaled(head.affine(0).weight, 5.0);
  const Matrix h = rng.normal_matrix(100, 8);
  UdpConfig cfg;
  cfg.epsilon = 0.3;
  const Matrix d = udp_perturbation(head, h, cfg);
  const auto before = numerics::row_entropy(numerics::softmax(numerics::forward_logits(head, h)));
  const auto after = numerics::row_entropy(
      numerics::softmax(numerics::forward_logits(head, numerics::add(h, d))));
  double gain = 0.0;
  for (std::size_t i = 0; i < 100; ++i) {
    EXPECT_LE(numerics::norm2(d.row(i)), 0.3 + 1e-12);
    EXPECT_GE(after[i], before[i]);
    gain += after[i] - before[i];
  }
  EXPECT_GT(gain / 100.0, 0.01);
}

TEST(Udp, UniformPredictionsGetNoPerturbation) {
  // Zero weights: the entropy is already maximal and its gradient vanishes.
  Graph head({numerics::Affine{Matrix(3, 4), {0.0, 0.0, 0.0}}});
  Rng rng(41);
  const Matrix h = rng.normal_matrix(5, 4);
  UdpConfig cfg;
  cfg.epsilon = 0.5;
  EXPECT_EQ(udp_perturbation(head, h, cfg), Matrix(5, 4));
}

// --- Soup -------------------------------------------------------------------

TEST(Soup, MasksAndAveraging) {
  Rng rng(50);
  const Matrix h = rng.normal_matrix(120, 10);
  std::vector<int> y(120);
  for (std::size_t i = 0; i < 120; ++i) y[i] = static_cast<int>(i % 4);
  ProtocolConfig cfg = quick("LP(Soup)");
  SoupConfig s;
  s.k = 4;
  s.sparsity = 0.3;
  const SoupResult r = soup_train(h, y, 4, s, cfg, Rng(cfg.seed));
  ASSERT_EQ(r.probes.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    std::size_t zeros = 0;
    for (std::size_t j = 0; j < 10; ++j) {
      if (r.masks[i][j] != 0.0) continue;
      ++zeros;
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(r.probes[i].affine(0).weight(c, j), 0.0);
    }
    EXPECT_EQ(zeros, 3u);
  }
  EXPECT_NE(r.masks[0], r.masks[1]);
  const auto& avg = r.head.affine(0);
  for (std::size_t i = 0; i < avg.weight.size(); ++i) {
    double mean = 0.0;
    for (const auto& p : r.probes) mean += p.affine(0).weight.values()[i] / 4.0;
    EXPECT_NEAR(avg.weight.values()[i], mean, 1e-15);
  }
}

TEST(Soup, IdenticalProbesAverageToAnyOneOfThem) {
  Rng rng(51);
  const Matrix h = rng.normal_matrix(100, 6);
  std::vector<int> y(100);
  for (std::size_t i = 0; i < 100; ++i) y[i] = static_cast<int>(i % 3);
  ProtocolConfig cfg = quick("LP(Soup)");
  SoupConfig s;
  s.k = 5;
  s.identical_probes = true;
  const SoupResult r = soup_train(h, y, 3, s, cfg, Rng(cfg.seed));
  for (const auto& p : r.probes) EXPECT_EQ(p, r.probes[0]);
  EXPECT_EQ(r.head, r.probes[0]);
}

TEST(Soup, AverageIsOrderInvariant) {
  Rng rng(52);
  std::vector<Graph> probes;
  for (int i = 0; i < 6; ++i) probes.push_back(model::make_head(7, 3, rng));
  const Graph a = average_heads(probes);
  std::reverse(probes.begin(), probes.end());
  std::swap(probes[1], probes[4]);
  EXPECT_EQ(average_heads(probes), a);
  EXPECT_THROW(average_heads({}), ConfigError);
}

}  // namespace
