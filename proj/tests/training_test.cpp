#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ega/training.hpp"
#include "tiny_model.hpp"

using namespace ega;

namespace {

std::map<std::string, Matrix> snapshot(const ParamStore& s, std::string_view prefix) {
  std::map<std::string, Matrix> out;
  for (const auto& n : s.names(prefix)) out.emplace(n, s.value(n));
  return out;
}

bool unchanged(const ParamStore& s, const std::map<std::string, Matrix>& snap) {
  for (const auto& [n, m] : snap)
    if (s.value(n).data() != m.data()) return false;
  return true;
}

// Independent greedy: repeatedly pick, per slot, the max column entry not yet used.
std::vector<std::size_t> oracle_greedy(const std::vector<std::vector<double>>& z, std::size_t skip) {
  const std::size_t n = z.size(), k = z[0].size();
  std::vector<bool> used(n, false);
  if (skip < n) used[skip] = true;
  std::vector<std::size_t> y;
  for (std::size_t s = 0; s < k; ++s) {
    double best = -1;
    std::size_t arg = n;
    for (std::size_t j = 0; j < n; ++j)
      if (!used[j] && z[j][s] > best) {
        best = z[j][s];
        arg = j;
      }
    if (arg == n) break;
    used[arg] = true;
    y.push_back(arg);
  }
  return y;
}

}  // namespace

TEST(Popularity, MassFollowsPowerLaw) {
  const std::vector<double> counts{16, 1};
  const auto w = popularity_weights(counts);
  EXPECT_NEAR(w[0] / w[1], 8.0, 1e-12);
}

TEST(Popularity, UniformCountsSampleUniformly) {
  const std::vector<double> counts(10, 3.0);
  Rng rng(4);
  std::vector<int> hits(10, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) hits[sample_negatives(counts, 1, rng)[0]]++;
  const double p = 0.1, sd = std::sqrt(draws * p * (1 - p));
  for (int h : hits) EXPECT_LT(std::abs(h - draws * p), 3 * sd);
}

TEST(Popularity, HeavierItemsDrawnMoreOften) {
  const std::vector<double> counts{16, 1};
  Rng rng(5);
  int first = 0;
  const int draws = 90000;
  for (int i = 0; i < draws; ++i) first += sample_negatives(counts, 1, rng)[0] == 0;
  // 8:1 mass ratio
  EXPECT_NEAR(first / static_cast<double>(draws), 8.0 / 9.0, 0.01);
}

TEST(Popularity, WithoutReplacementAndRejections) {
  const std::vector<double> counts{1, 0, 2, 5, 1};
  Rng rng(6);
  for (int i = 0; i < 200; ++i) {
    auto s = sample_negatives(counts, 4, rng);
    std::sort(s.begin(), s.end());
    EXPECT_EQ(s, (std::vector<std::size_t>{0, 2, 3, 4}));  // zero mass never drawn
  }
  EXPECT_THROW(sample_negatives(counts, 5, rng), std::invalid_argument);
  EXPECT_THROW(sample_negatives(counts, 6, rng), std::invalid_argument);
  EXPECT_THROW(sample_negatives(std::vector<double>{}, 0, rng), std::invalid_argument);
}

TEST(Popularity, DeterministicUnderSeed) {
  const std::vector<double> counts{1, 4, 9, 16, 25, 36};
  Rng a(7), b(7);
  EXPECT_EQ(sample_negatives(counts, 3, a), sample_negatives(counts, 3, b));
}

TEST(Pretrain, InitialLossIsLn2PerLabel) {
  auto m = tiny::model();
  const auto reqs = tiny::requests(3);
  EXPECT_NEAR(pretrain_loss(m, reqs), std::log(2.0) * 7, 1e-9);
}

TEST(Pretrain, StepReducesLossOnFixedBatch) {
  auto m = tiny::model();
  const auto reqs = tiny::requests(8);
  m.train_only({"features/", "recformer/"});
  const auto gen = snapshot(m.store(), "aucformer/");
  Adam opt({.lr = 1e-2});
  const double before = pretrain_loss(m, reqs);
  for (int i = 0; i < 20; ++i) pretrain_step(m, reqs, opt);
  EXPECT_LT(pretrain_loss(m, reqs), before);
  EXPECT_TRUE(unchanged(m.store(), gen));
}

TEST(RewardModel, FreezesEmbeddingsAndTrainsEvaluator) {
  auto m = tiny::model();
  const auto reqs = tiny::requests(6);
  EXPECT_NEAR(reward_model_loss(m, reqs), std::log(2.0) * 3, 1e-9);
  m.train_only({"recformer/", AucFormer::evaluator_prefix()});
  const auto feats = snapshot(m.store(), "features/");
  const auto gen = snapshot(m.store(), AucFormer::generator_prefix());
  const auto eval = snapshot(m.store(), AucFormer::evaluator_prefix());
  Adam opt({.lr = 1e-2});
  for (int i = 0; i < 5; ++i) reward_model_step(m, reqs, opt);
  EXPECT_TRUE(unchanged(m.store(), feats));
  EXPECT_TRUE(unchanged(m.store(), gen));
  EXPECT_FALSE(unchanged(m.store(), eval));
  EXPECT_THROW(m.store().update("features/ad0", [](Tensor&) {}), FrozenParameterError);
}

TEST(Rlaf, SingleSlotRewardExample) {
  Matrix z(2, 1);
  z(0, 0) = 0.6;
  z(1, 0) = 0.4;
  const std::vector<double> bids{3.0, 2.0};
  SlateCtr ctr = [](std::span<const std::size_t> y) { return std::vector<double>(y.size(), 1.0); };
  const auto r = compute_rlaf_rewards(z, bids, ctr);
  ASSERT_EQ(r.slate, (std::vector<std::size_t>{0}));
  EXPECT_DOUBLE_EQ(r.revenue, 3.0);
  EXPECT_DOUBLE_EQ(r.rewards[0], 1.0);
}

TEST(Rlaf, RewardsMatchExhaustiveOracle) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 3 + rep % 5, k = 1 + rep % 3;
    std::vector<std::vector<double>> zz(n, std::vector<double>(k));
    Matrix z(n, k);
    std::vector<double> bids(n), quality(n);
    for (std::size_t j = 0; j < n; ++j) {
      bids[j] = u(rng);
      quality[j] = u(rng);
      for (std::size_t s = 0; s < k; ++s) z(j, s) = zz[j][s] = u(rng);
    }
    // position-dependent, set-dependent click model
    auto ctr_of = [&](std::span<const std::size_t> y) {
      std::vector<double> q(y.size());
      double crowd = 0;
      for (auto j : y) crowd += quality[j];
      for (std::size_t s = 0; s < y.size(); ++s) q[s] = quality[y[s]] / (1.0 + s) / (1.0 + 0.1 * crowd);
      return q;
    };
    auto rev = [&](const std::vector<std::size_t>& y) {
      const auto q = ctr_of(y);
      double v = 0;
      for (std::size_t s = 0; s < y.size(); ++s) v += bids[y[s]] * q[s];
      return v;
    };
    const auto r = compute_rlaf_rewards(z, bids, ctr_of);
    const auto y = oracle_greedy(zz, n);
    ASSERT_EQ(r.slate, y);
    ASSERT_NEAR(r.revenue, rev(y), 1e-12);
    for (std::size_t i = 0; i < y.size(); ++i)
      ASSERT_NEAR(r.rewards[i], rev(y) - rev(oracle_greedy(zz, y[i])), 1e-12);
  }
}

TEST(Rlaf, StepMovesOnlyTheGenerator) {
  auto m = tiny::model();
  const auto reqs = tiny::requests(4);
  std::vector<CachedRequest> cache;
  for (const auto& r : reqs) cache.push_back(cache_request(m, r));
  ASSERT_EQ(cache[0].h_ad.rows(), 12u);
  m.train_only({AucFormer::generator_prefix()});
  const auto rec = snapshot(m.store(), "recformer/");
  const auto eval = snapshot(m.store(), AucFormer::evaluator_prefix());
  const auto gen = snapshot(m.store(), AucFormer::generator_prefix());
  Adam opt({.lr = 1e-2});
  const auto st = rlaf_step(m, cache, opt);
  EXPECT_TRUE(std::isfinite(st.loss));
  EXPECT_GT(st.mean_revenue, 0.0);
  EXPECT_TRUE(unchanged(m.store(), rec));
  EXPECT_TRUE(unchanged(m.store(), eval));
  EXPECT_FALSE(unchanged(m.store(), gen));
}

TEST(Lagrangian, ProjectedDualAscent) {
  LagrangianState lag;
  lag.rho = 2.0;
  lag.dual_update(7, 0.5);
  EXPECT_DOUBLE_EQ(lag.multiplier(7), 1.0);
  lag.dual_update(7, 0.0);
  EXPECT_DOUBLE_EQ(lag.multiplier(7), 1.0);
  EXPECT_THROW(lag.dual_update(7, -0.1), std::invalid_argument);

  LagrangianState per;
  per.rho = 1.0;
  per.period = 2;
  per.observe(3, 0.2);
  per.end_step();
  EXPECT_DOUBLE_EQ(per.multiplier(3), 0.0);
  per.observe(3, 0.4);
  per.end_step();
  EXPECT_NEAR(per.multiplier(3), 0.3, 1e-12);
}

TEST(Payment, StepMovesOnlyThePaymentNet) {
  auto m = tiny::model();
  const auto reqs = tiny::requests(4);
  std::vector<CachedRequest> cache;
  for (const auto& r : reqs) cache.push_back(cache_request(m, r));
  m.train_only({AucFormer::payment_prefix()});
  const auto gen = snapshot(m.store(), AucFormer::generator_prefix());
  const auto pay = snapshot(m.store(), AucFormer::payment_prefix());
  LagrangianState lag;
  Adam opt({.lr = 1e-2});
  const auto grid = default_gamma_grid();
  const auto st = payment_step(m, cache, opt, lag, grid);
  EXPECT_NEAR(st.mean_rate, 0.5, 1e-12);  // zero-initialized output layer
  EXPECT_GE(st.mean_regret, 0.0);
  EXPECT_GT(st.revenue, 0.0);
  EXPECT_TRUE(unchanged(m.store(), gen));
  EXPECT_FALSE(unchanged(m.store(), pay));
  EXPECT_EQ(lag.steps, 1u);
}

TEST(Payment, MechanismOutcomeIsIndividuallyRational) {
  auto m = tiny::model();
  const auto reqs = tiny::requests(3);
  for (const auto& r : reqs) {
    const auto c = cache_request(m, r);
    FrozenAuction fa(m, c);
    const auto o = fa.run(c.bids);
    ASSERT_EQ(o.winners.size(), 3u);
    for (std::size_t s = 0; s < o.winners.size(); ++s) {
      EXPECT_GE(o.payments[s], 0.0);
      EXPECT_LE(o.payments[s], c.bids[o.winners[s]]);
    }
    const auto g = fa.run_gsp(c.bids);
    ASSERT_EQ(g.ctr.size(), 3u);
  }
}

TEST(Rlaf, ZeroRewardsGiveZeroGradient) {
  auto m = tiny::model();
  const auto c = cache_request(m, tiny::requests(1)[0]);
  m.train_only({AucFormer::generator_prefix()});
  ParamStore& s = m.store();
  s.zero_grad();
  Tape t;
  auto g = m.aucformer().generator().forward(t, s, t.constant(c.h_ad), t.constant(Matrix::col_vector(c.pctr)),
                                             c.bids, false);
  const std::vector<std::size_t> slate{0, 1, 2};
  const std::vector<double> zero(3, 0.0);
  Var loss = rlaf_objective(g.log_z, slate, zero);
  EXPECT_EQ(t.scalar(loss), 0.0);
  t.backward(loss, 1.0);
  for (const auto& n : s.names(AucFormer::generator_prefix()))
    for (double x : s.at(n).grad.data()) ASSERT_EQ(x, 0.0) << n;
}

TEST(Rlaf, SingleSlotAscentRaisesChosenProbability) {
  auto m = tiny::model(3, 1);
  const auto c = cache_request(m, tiny::requests(1, 1)[0]);
  m.train_only({AucFormer::generator_prefix()});
  ParamStore& s = m.store();
  auto chosen_z = [&](std::size_t ad) {
    Tape t;
    auto g = m.aucformer().generator().forward(t, s, t.constant(c.h_ad), t.constant(Matrix::col_vector(c.pctr)),
                                               c.bids, false);
    return t.value(g.z)(ad, 0);
  };
  Tape t;
  auto g = m.aucformer().generator().forward(t, s, t.constant(c.h_ad), t.constant(Matrix::col_vector(c.pctr)),
                                             c.bids, false);
  const auto slate = greedy_select(t.value(g.z), {});
  ASSERT_EQ(slate.size(), 1u);
  const double before = t.value(g.z)(slate[0], 0);
  s.zero_grad();
  const std::vector<double> reward{1.0};
  t.backward(rlaf_objective(g.log_z, slate, reward), 1.0);
  Adam opt({.lr = 1e-2});
  opt.step(s, Adam::trainable(s));
  EXPECT_GT(chosen_z(slate[0]), before);
}

TEST(Payment, RevenueOnlyObjectiveRaisesRates) {
  auto m = tiny::model();
  std::vector<CachedRequest> cache;
  for (const auto& r : tiny::requests(4)) cache.push_back(cache_request(m, r));
  m.train_only({AucFormer::payment_prefix()});
  LagrangianState lag;
  lag.rho = 0.0;
  Adam opt({.lr = 1e-2});
  const auto grid = default_gamma_grid();
  const auto first = payment_step(m, cache, opt, lag, grid);
  for (const auto& [ad, l] : lag.lambda) EXPECT_EQ(l, 0.0) << ad;
  const auto second = payment_step(m, cache, opt, lag, grid);
  EXPECT_GT(second.mean_rate, first.mean_rate);
}

TEST(Payment, WithoutRegretLossIsNegativeRevenue) {
  auto m = tiny::model();
  std::vector<CachedRequest> cache;
  for (const auto& r : tiny::requests(3)) cache.push_back(cache_request(m, r));
  m.train_only({AucFormer::payment_prefix()});
  LagrangianState lag;
  Adam opt;
  const std::vector<double> truthful_only{1.0};  // no misreport, so regret is 0
  const auto st = payment_step(m, cache, opt, lag, truthful_only);
  EXPECT_EQ(st.mean_regret, 0.0);
  EXPECT_NEAR(st.loss, -st.revenue, 1e-12);
}
