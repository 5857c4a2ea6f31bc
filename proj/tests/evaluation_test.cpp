#include <gtest/gtest.h>

#include <random>

#include "ega/evaluation.hpp"

using namespace ega;

namespace {

double brute_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double good = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1;
      good += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  return good / pairs;
}

}  // namespace

TEST(Auc, WorkedExample) {
  const std::vector<double> s{0.9, 0.8, 0.1};
  const std::vector<int> y{1, 0, 1};
  EXPECT_DOUBLE_EQ(*auc(s, y), 0.5);
}

TEST(Auc, MatchesPairwiseCountWithTies) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> bin(0, 1), lvl(0, 4);
  for (int rep = 0; rep < 500; ++rep) {
    const std::size_t n = 2 + rep % 9;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = 0.25 * lvl(rng);  // coarse levels force ties
      y[i] = bin(rng);
    }
    const auto a = auc(s, y);
    const bool both = std::count(y.begin(), y.end(), 1) > 0 && std::count(y.begin(), y.end(), 0) > 0;
    ASSERT_EQ(a.has_value(), both);
    if (both) {
      ASSERT_NEAR(*a, brute_auc(s, y), 1e-12);
    }
  }
}

TEST(Auc, SingleClassUndefined) {
  const std::vector<double> s{0.1, 0.2};
  const std::vector<int> y{1, 1};
  EXPECT_FALSE(auc(s, y).has_value());
}

TEST(Recall, TopKAndOversizedK) {
  const std::vector<double> s{0.9, 0.1, 0.5, 0.7};
  const std::vector<int> y{1, 1, 0, 0};
  EXPECT_DOUBLE_EQ(*recall_at_k(s, y, 1), 0.5);
  EXPECT_DOUBLE_EQ(*recall_at_k(s, y, 3), 0.5);
  EXPECT_DOUBLE_EQ(*recall_at_k(s, y, 10), 1.0);
  const std::vector<int> none{0, 0, 0, 0};
  EXPECT_FALSE(recall_at_k(s, none, 2).has_value());
}

TEST(ExpectedValue, SingleSlotExample) {
  const std::vector<AuctionOutcome> o{{{0}, {1.0}, {0.05}}};
  const auto ev = expected_value_metrics(o);
  EXPECT_NEAR(ev.ectr, 5.0, 1e-12);
  EXPECT_NEAR(ev.erpm, 50.0, 1e-12);
}

TEST(ExpectedValue, AveragesOverRequests) {
  const std::vector<AuctionOutcome> o{{{0, 1}, {1.0, 0.5}, {0.1, 0.2}}, {{}, {}, {}}};
  const auto ev = expected_value_metrics(o);
  EXPECT_NEAR(ev.ectr, 15.0, 1e-12);
  EXPECT_NEAR(ev.erpm, 100.0, 1e-12);
}

TEST(Deviation, Examples) {
  EXPECT_NEAR(*deviation(0.12, 0.1), 0.2, 1e-12);
  EXPECT_NEAR(*deviation(0.1, 0.1), 0.0, 1e-12);
  EXPECT_NEAR(*deviation(0.0, 0.1), 1.0, 1e-12);
  EXPECT_FALSE(deviation(0.1, 0.0).has_value());
}

TEST(Regret, SecondPriceIsTruthful) {
  const std::vector<double> bids{1.0, 0.5, 0.3};
  std::vector<AuctionInstance> inst{{reference::second_price({1.0, 1.0, 1.0}), bids, bids}};
  const auto grid = default_gamma_grid();
  const auto rep = psi_metric(inst, grid);
  ASSERT_TRUE(rep.psi.has_value());
  EXPECT_EQ(*rep.psi, 0.0);
  EXPECT_EQ(rep.terms, 1u);
}

TEST(Regret, FirstPriceShading) {
  const std::vector<double> bids{1.0, 0.5};
  const auto grid = default_gamma_grid();
  const double v = 1.0;
  const auto est = empirical_regret(reference::first_price({1.0, 1.0}), bids, 0,
                                    std::span<const double>(&v, 1), grid);
  EXPECT_NEAR(est.regret, 0.4, 1e-12);
  EXPECT_NEAR(est.best_gamma, 0.6, 1e-12);
  EXPECT_NEAR(est.truthful_utility, 0.0, 1e-15);

  // Zero truthful utility cannot enter the ratio.
  std::vector<AuctionInstance> inst{{reference::first_price({1.0, 1.0}), bids, bids}};
  const auto rep = psi_metric(inst, grid);
  EXPECT_FALSE(rep.psi.has_value());
  EXPECT_EQ(rep.skipped, 1u);
  EXPECT_NEAR(rep.mean_regret, 0.4, 1e-12);
}

TEST(Regret, ShadedFirstPricePsi) {
  // v = 1 bidding 0.8 against 0.5: u = 0.2, best deviation 0.64 gains 0.16.
  std::vector<AuctionInstance> inst{{reference::first_price({1.0, 1.0}), {0.8, 0.5}, {1.0, 0.5}}};
  const auto rep = psi_metric(inst, default_gamma_grid());
  ASSERT_TRUE(rep.psi.has_value());
  EXPECT_NEAR(*rep.psi, 0.8, 1e-9);
}

TEST(Regret, NeverNegative) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  const auto grid = default_gamma_grid();
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> bids(4), ctr(4);
    for (auto& b : bids) b = u(rng);
    for (auto& c : ctr) c = u(rng) / 2;
    const double v = u(rng);
    for (const auto& mech : {reference::first_price(ctr), reference::second_price(ctr)}) {
      const auto est = empirical_regret(mech, bids, rep % 4, std::span<const double>(&v, 1), grid);
      ASSERT_GE(est.regret, 0.0);
    }
  }
}

TEST(FlopsModel, ClosedFormPlugIns) {
  EXPECT_DOUBLE_EQ(flops_model::block(1, 1), 28.0);
  EXPECT_DOUBLE_EQ(flops_model::block2(1, 1, 1), 28.0);
  EXPECT_DOUBLE_EQ(flops_model::pre(1, 1, 1), 3.0);
  EXPECT_DOUBLE_EQ(flops_model::gcf(1, 1, 1, 1), 34.0);
  EXPECT_DOUBLE_EQ(flops_model::mif(1, 1, 1, 1, 1), 2.0);
}

TEST(FlopsModel, ApproximationRatio) {
  EXPECT_NEAR(flops_model::approx_ratio(3, 6, 0.033, 1000, 128), 0.9697, 1e-3);
}

TEST(FlopsMeasure, ClusterStackTracksClosedForm) {
  FlopsSetup s;
  s.rec = {.depth = 2, .fusion_interval = 1, .dim = 32, .clusters = 16, .heads = 2};
  s.auc = {.slots = 5, .dim = 32, .clusters = 16, .heads = 2};
  s.candidates = 200;
  s.behaviors = 32;
  const auto rep = measure_flops(s);
  const FlopsRow* gcf = nullptr;
  for (const auto& r : rep.rows)
    if (r.module == "gcf") gcf = &r;
  ASSERT_NE(gcf, nullptr);
  EXPECT_GT(gcf->ratio(), 1.0);
  EXPECT_LT(gcf->ratio(), 1.10);
  EXPECT_GT(rep.ega_over_mca_closed, 0.0);
}

TEST(FlopsMeasure, EmptyStackCountsNothing) {
  FlopsSetup s;
  s.rec = {.depth = 0, .fusion_interval = 1, .dim = 8, .clusters = 4, .heads = 1};
  s.auc = {.slots = 2, .dim = 8, .clusters = 4, .heads = 1};
  s.candidates = 10;
  s.behaviors = 4;
  const auto rep = measure_flops(s);
  EXPECT_EQ(rep.rows[0].measured, 0.0);
  EXPECT_EQ(rep.rows[1].measured, 0.0);
  EXPECT_EQ(rep.rows[2].measured, 0.0);
}
