#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "imask/errors.hpp"
#include "imask/evaluation.hpp"
#include "imask/pretraining.hpp"
#include "oracles.hpp"

using namespace imask;

namespace {

std::vector<int> random_labels(std::size_t n, Rng& rng) {
  std::bernoulli_distribution coin(0.4);
  std::vector<int> out(n);
  for (auto& v : out) v = coin(rng) ? 1 : 0;
  out[0] = 0;
  out[1] = 1;
  return out;
}

// Tiny split dataset for fine-tuning; images carry their label in brightness.
Dataset separable(std::size_t n, std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.count = n;
  cfg.seed = seed;
  Dataset ds = generate_synthetic_dataset(cfg);
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 0.02);
  for (std::size_t i = 0; i < n; ++i) {
    const double level = ds.manifest.records[i].label ? 0.8 : 0.2;
    for (double& v : ds.images[i].pixels) v = level + noise(rng);
  }
  ds.manifest = split(ds.manifest, {0.6, 0.2, 0.2}, seed);
  return ds;
}

}  // namespace

TEST(Accuracy, BasicCases) {
  const std::vector<int> labels{1, 1, 1, 0}, preds{1, 1, 0, 0};
  EXPECT_EQ(accuracy(preds, labels), 0.75);
  EXPECT_EQ(accuracy(labels, labels), 1.0);
  EXPECT_THROW(accuracy(std::vector<int>{}, std::vector<int>{}), std::invalid_argument);
  EXPECT_THROW(accuracy(preds, std::vector<int>{1}), std::invalid_argument);
}

TEST(MacroF1, HandComputedExamples) {
  // class 1: P = 2/2, R = 2/3; class 0: P = 1/2, R = 1/1
  const double f1 = 2.0 * (1.0 * (2.0 / 3.0)) / (1.0 + 2.0 / 3.0);
  const double f0 = 2.0 * (0.5 * 1.0) / (0.5 + 1.0);
  EXPECT_EQ(macro_f1(std::vector<int>{1, 1, 0, 0}, std::vector<int>{1, 1, 1, 0}), (f0 + f1) / 2.0);
  EXPECT_NEAR((f0 + f1) / 2.0, 11.0 / 15.0, 1e-15);
  // all-one-class predictions on balanced labels: F1 = 2/3 and 0
  const std::vector<int> balanced{0, 1, 0, 1, 0, 1};
  const std::vector<int> ones(6, 1);
  EXPECT_EQ(accuracy(ones, balanced), 0.5);
  EXPECT_EQ(macro_f1(ones, balanced), (2.0 * (0.5 * 1.0) / (0.5 + 1.0) + 0.0) / 2.0);
  EXPECT_NEAR(macro_f1(ones, balanced), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(macro_f1(balanced, balanced), 1.0);
}

TEST(MacroF1, DeclaredClassAbsentEverywhereScoresZero) {
  const std::vector<int> y{0, 1, 1, 0};
  EXPECT_EQ(macro_f1(y, y), 1.0);
  EXPECT_NEAR(macro_f1(y, y, 3), 2.0 / 3.0, 1e-15);
  EXPECT_THROW(macro_f1(std::vector<int>{}, std::vector<int>{}), std::invalid_argument);
}

TEST(MacroF1, InvariantUnderRelabeling) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(trial) % 40;
    auto labels = random_labels(n, rng);
    auto preds = random_labels(n, rng);
    const double f = macro_f1(preds, labels);
    for (auto* v : {&labels, &preds})
      for (int& x : *v) x = 1 - x;
    EXPECT_NEAR(macro_f1(preds, labels), f, 1e-15);
    EXPECT_GE(f, 0.0);
    EXPECT_LE(f, 1.0);
  }
}

TEST(Auroc, MatchesThePairwiseOracle) {
  Rng rng(2);
  std::uniform_int_distribution<int> coarse(0, 5);
  for (std::size_t n : {2, 3, 20, 57, 120, 200}) {
    for (int trial = 0; trial < 10; ++trial) {
      const auto labels = random_labels(n, rng);
      std::vector<double> scores(n);
      // half the trials use coarse scores so ties are common
      for (auto& s : scores) s = trial % 2 ? coarse(rng) / 5.0 : oracle::random_tensor({1}, rng)[0];
      const double a = auroc(scores, labels);
      EXPECT_NEAR(a, oracle::pairwise_auroc(scores, labels), 1e-12);
      EXPECT_GE(a, 0.0);
      EXPECT_LE(a, 1.0);
    }
  }
}

TEST(Auroc, EdgeCases) {
  EXPECT_EQ(auroc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, std::vector<int>{0, 0, 1, 1}), 0.0);
  EXPECT_EQ(auroc(std::vector<double>(5, 0.3), std::vector<int>{0, 1, 0, 1, 1}), 0.5);
  EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), std::invalid_argument);
  EXPECT_THROW(auroc(std::vector<double>{0.1, std::nan("")}, std::vector<int>{0, 1}), std::invalid_argument);
  EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{0, 2}), std::invalid_argument);
}

TEST(Aggregate, MeanAndSampleStd) {
  std::vector<RunMetrics> runs;
  const double f1[] = {0.6, 0.7, 0.8, 0.75, 0.65};
  for (int s = 0; s < 5; ++s) runs.push_back({static_cast<std::uint64_t>(s), {0.9, f1[s], 0.95}});
  const EvalResult r = aggregate("intelligent", 13, runs);
  EXPECT_EQ(r.run_count, 5u);
  EXPECT_NEAR(r.mean.macro_f1, 0.7, 1e-15);
  double ss = 0;
  for (double v : f1) ss += (v - 0.7) * (v - 0.7);
  EXPECT_NEAR(r.std.macro_f1, std::sqrt(ss / 4.0), 1e-15);
  EXPECT_EQ(r.std.accuracy, 0.0);
  EXPECT_EQ(aggregate("x", 1, {runs[0]}).std.macro_f1, 0.0);
}

TEST(Report, TwelveRowsStableOrderAndExactRoundTrip) {
  std::vector<EvalResult> results;
  Rng rng(3);
  // deliberately shuffled input order
  for (std::size_t budget : {129, 13, 66})
    for (Method m : {Method::kIntelligent, Method::kReconstruction, Method::kContextPrediction,
                     Method::kContextRestoration}) {
      std::vector<RunMetrics> runs;
      for (std::uint64_t s = 0; s < 3; ++s) {
        const auto v = oracle::random_tensor({3}, rng, 0.0, 1.0);
        runs.push_back({s, {v[0], v[1], v[2]}});
      }
      results.push_back(aggregate(std::string(method_name(m)), budget, runs));
    }
  const std::string csv = report(results);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 13);
  const auto back = parse_report(csv);
  ASSERT_EQ(back.size(), 12u);
  EXPECT_EQ(back.front().budget, 13u);
  EXPECT_EQ(back.front().method, "reconstruction");
  EXPECT_EQ(back[3].method, "intelligent");
  EXPECT_EQ(back.back().budget, 129u);
  for (const auto& row : back) {
    const auto it = std::find_if(results.begin(), results.end(), [&](const EvalResult& r) {
      return r.budget == row.budget && r.method == row.method;
    });
    ASSERT_NE(it, results.end());
    EXPECT_EQ(row.run_count, 3u);
    EXPECT_EQ(row.mean.accuracy, it->mean.accuracy);
    EXPECT_EQ(row.std.macro_f1, it->std.macro_f1);
    EXPECT_EQ(row.mean.auroc, it->mean.auroc);
  }
  EXPECT_EQ(report(back), csv);
  const std::string runs = report_runs(results);
  EXPECT_EQ(std::count(runs.begin(), runs.end(), '\n'), 1 + 36);
}

TEST(Report, EmptyInputIsHeaderOnly) {
  const std::string csv = report({});
  EXPECT_EQ(csv,
            "budget,method,runs,accuracy_mean,accuracy_std,macro_f1_mean,macro_f1_std,auroc_mean,"
            "auroc_std\n");
  EXPECT_TRUE(parse_report(csv).empty());
  EXPECT_THROW(parse_report("budget,method\n"), ParseError);
}

TEST(Heatmap, CountsAreConservedAndRendered) {
  SyntheticConfig cfg;
  cfg.count = 37;
  const Dataset ds = generate_synthetic_dataset(cfg);
  Rng rng(4);
  QNetwork q(EncoderSpec{}, 3, QHead::kGlobalAverage, rng);
  const ActionSpace space = ActionSpace::with_default_patch(32, 3);
  const auto all = ds.indices(Split::kNone);
  const Heatmap h = mask_heatmap(q, space, ds, all);
  EXPECT_EQ(h.total(), 37u);
  EXPECT_EQ(h.counts.size(), 9u);
  const Image img = render_heatmap(h, space);
  EXPECT_EQ(img.height, 32u);
  double peak = 0;
  for (double v : img.pixels) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    peak = std::max(peak, v);
  }
  EXPECT_EQ(peak, 1.0);
  const std::string csv = heatmap_csv(h, space);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "action,grid_row,grid_col,anchor_row,anchor_col,count");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 10);
  EXPECT_THROW(mask_heatmap(q, space, ds, {}), DataError);
  EXPECT_THROW(mask_heatmap(q, ActionSpace::with_default_patch(32, 2), ds, all), ArchitectureError);
}

TEST(Heatmap, UntrainedQNetworksShowNoPreferredCell) {
  // A random head is exchangeable across actions, so over many initialisations
  // the greedy cell is uniform.
  SyntheticConfig cfg;
  cfg.count = 4;
  const Dataset ds = generate_synthetic_dataset(cfg);
  const ActionSpace space = ActionSpace::with_default_patch(32, 3);
  std::vector<std::size_t> counts(9, 0);
  for (std::uint64_t seed = 0; seed < 180; ++seed) {
    Rng rng(seed);
    QNetwork q(EncoderSpec{{4, 4, 4, 4}, 32, 3, 2}, 3, QHead::kGlobalAverage, rng);
    const Heatmap h = mask_heatmap(q, space, ds, {seed % 4});
    for (std::size_t a = 0; a < 9; ++a) counts[a] += h.counts[a];
  }
  EXPECT_GT(chi_square_uniform_p(counts), 0.01);
}

TEST(ChiSquare, ReferenceValues) {
  // chi2 = 10/3 on 2 dof, where p = exp(-chi2 / 2)
  EXPECT_NEAR(chi_square_uniform_p(std::vector<std::size_t>{10, 20, 15}), std::exp(-5.0 / 3.0), 1e-12);
  EXPECT_NEAR(chi_square_gof_p(std::vector<std::size_t>{30, 70}, std::vector<double>{0.3, 0.7}), 1.0, 1e-12);
  EXPECT_LT(chi_square_homogeneity_p(std::vector<std::size_t>{90, 10}, std::vector<std::size_t>{10, 90}), 1e-10);
  EXPECT_NEAR(chi_square_homogeneity_p(std::vector<std::size_t>{5, 0, 5}, std::vector<std::size_t>{5, 0, 5}), 1.0,
              1e-12);
}

TEST(Finetune, SeparableDataIsClassifiedPerfectly) {
  const Dataset ds = separable(60, 5);
  Rng rng(5);
  PredictionNetwork net(EncoderSpec{}, rng);
  FinetuneConfig cfg;
  cfg.epochs = 15;
  cfg.base_lr = 1e-3;
  const FinetuneResult r = finetune_classifier(net.state(), net.spec(), ds, 36, cfg);
  EXPECT_EQ(r.test.accuracy, 1.0);
  EXPECT_EQ(r.test.macro_f1, 1.0);
  EXPECT_EQ(r.test.auroc, 1.0);
  EXPECT_EQ(r.labeled.size(), 36u);
}

TEST(Finetune, DeterministicAndBudgetChecked) {
  SyntheticConfig sc;
  sc.count = 80;
  Dataset ds = generate_synthetic_dataset(sc);
  ds.manifest = split(ds.manifest, {0.6, 0.2, 0.2}, 1);
  Rng rng(6);
  PredictionNetwork net(EncoderSpec{}, rng);
  FinetuneConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 2;
  const FinetuneResult a = finetune_classifier(net.state(), net.spec(), ds, 13, cfg);
  const FinetuneResult b = finetune_classifier(net.state(), net.spec(), ds, 13, cfg);
  EXPECT_EQ(a.test.macro_f1, b.test.macro_f1);
  EXPECT_EQ(a.test.auroc, b.test.auroc);
  EXPECT_EQ(a.best_epoch, b.best_epoch);
  EXPECT_EQ(a.labeled, b.labeled);
  EXPECT_THROW(finetune_classifier(net.state(), net.spec(), ds, 49, cfg), DataError);
  EXPECT_THROW(finetune_classifier(net.state(), net.spec(), ds, 1, cfg), DataError);
  QNetwork q(EncoderSpec{}, 3, QHead::kGlobalAverage, rng);
  EXPECT_THROW(finetune_classifier(q.state(), q.spec(), ds, 13, cfg), ArchitectureError);
}

TEST(Finetune, FiveSeedAggregate) {
  SyntheticConfig sc;
  sc.count = 60;
  Dataset ds = generate_synthetic_dataset(sc);
  ds.manifest = split(ds.manifest, {0.6, 0.2, 0.2}, 1);
  Rng rng(7);
  PredictionNetwork net(EncoderSpec{}, rng);
  std::vector<RunMetrics> runs;
  for (std::uint64_t s = 0; s < 5; ++s) {
    FinetuneConfig cfg;
    cfg.epochs = 2;
    cfg.seed = s;
    runs.push_back({s, finetune_classifier(net.state(), net.spec(), ds, 13, cfg).test});
  }
  const EvalResult r = aggregate("reconstruction", 13, runs);
  EXPECT_EQ(r.run_count, 5u);
  for (const Metrics* m : {&r.mean, &r.std}) {
    for (double v : {m->accuracy, m->macro_f1, m->auroc}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}
