#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "ega/numerics/autodiff.hpp"
#include "ega/numerics/nn.hpp"
#include "fd_oracle.hpp"

using namespace ega;

TEST(Matmul, IdentityAndHandArithmetic) {
  Matrix m{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(matmul(Matrix::identity(2), m), m);
  EXPECT_EQ(matmul(Matrix{{1, 2}, {3, 4}}, Matrix{{0}, {1}}), (Matrix{{2}, {4}}));
}

TEST(Matmul, FlopCounterIsTwoMkn) {
  std::mt19937_64 rng(3);
  const auto a = fdtest::random_matrix(7, 5, rng);
  const auto b = fdtest::random_matrix(5, 3, rng);
  const auto before = flops::count();
  matmul(a, b);
  EXPECT_EQ(flops::count() - before, 210u);
}

TEST(Matmul, CounterIsAdditive) {
  std::mt19937_64 rng(4);
  const auto a = fdtest::random_matrix(4, 6, rng);
  const auto b = fdtest::random_matrix(6, 2, rng);
  const auto c = fdtest::random_matrix(2, 5, rng);
  flops::Scope f;
  auto ab = matmul(a, b);
  const auto first = f.elapsed();
  flops::Scope g;
  matmul(ab, c);
  EXPECT_EQ(f.elapsed(), first + g.elapsed());
  EXPECT_EQ(first, 2u * 4 * 6 * 2);
}

TEST(Matmul, MismatchReportsBothShapes) {
  try {
    matmul(Matrix(2, 3), Matrix(4, 1));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos);
    EXPECT_NE(msg.find("4x1"), std::string::npos);
  }
}

TEST(RowSoftmax, Examples) {
  auto s = row_softmax(Matrix{{0, 0, 0}, {std::log(2.0), 0, 0}});
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(s(0, j), 1.0 / 3.0, 1e-15);
  auto t = row_softmax(Matrix{{std::log(2.0), 0}});
  EXPECT_NEAR(t(0, 0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(t(0, 1), 1.0 / 3.0, 1e-15);

  // long double reference
  auto u = row_softmax(Matrix{{1, 2, 3}});
  long double z = 0;
  for (int k = 1; k <= 3; ++k) z += std::exp(static_cast<long double>(k));
  for (int k = 1; k <= 3; ++k)
    EXPECT_NEAR(u(0, k - 1), static_cast<double>(std::exp(static_cast<long double>(k)) / z), 1e-12);
}

TEST(RowSoftmax, RowsSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    auto m = fdtest::random_matrix(5, 7, rng, 30.0);
    auto s = row_softmax(m);
    auto shifted = m;
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) shifted(i, j) += 100.0 * static_cast<double>(i);
    auto s2 = row_softmax(shifted);
    for (std::size_t i = 0; i < m.rows(); ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < m.cols(); ++j) {
        EXPECT_GE(s(i, j), 0.0);
        EXPECT_NEAR(s(i, j), s2(i, j), 1e-12);
        sum += s(i, j);
      }
      EXPECT_NEAR(sum, 1.0, 1e-9);
    }
  }
}

TEST(Dice, Examples) {
  auto st = DiceState::fresh(1);
  EXPECT_EQ(dice(Matrix{{0.0}}, st, false)(0, 0), 0.0);

  auto one = DiceState::fresh(3);
  one.alpha = {1, 1, 1};
  Matrix x{{-2, 0.3, 5}, {1, -1, 0}};
  auto y = dice(x, one, false);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y.data()[i], x.data()[i], 1e-15);

  DiceState s{{0.0}, {1.0}, {0.0}, 0.0};
  EXPECT_NEAR(dice(Matrix{{1.0}}, s, false)(0, 0), 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(dice(Matrix{{1.0}}, s, false)(0, 0), 0.73106, 1e-5);
}

TEST(Dice, TrainingUpdatesRunningStatsInferenceDoesNot) {
  auto st = DiceState::fresh(2);
  Matrix x{{1, 2}, {3, 6}};
  dice(x, st, false);
  EXPECT_EQ(st.mean[0], 0.0);
  dice(x, st, true);
  EXPECT_NEAR(st.mean[0], 0.01 * 2.0, 1e-15);
  EXPECT_NEAR(st.mean[1], 0.01 * 4.0, 1e-15);
  EXPECT_NEAR(st.var[1], 0.99 + 0.01 * 4.0, 1e-15);
}

TEST(Dice, ChannelMismatchRejected) {
  auto st = DiceState::fresh(2);
  EXPECT_THROW(dice(Matrix(1, 3), st, false), ShapeError);
}

TEST(Gradient, LinearSumGivesBroadcastOfX) {
  ParamStore store;
  store.add("w", Matrix{{0.3, -0.2, 0.1}, {0.5, 0.4, -0.7}});
  const Matrix x{{1.5}, {-2.0}, {0.25}};
  gradient_of([&](Tape& t) { return ad::sum(ad::matmul(t.param(store, "w"), t.constant(x))); }, store);
  const Matrix& g = store.grad("w");
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(g(i, j), x(j, 0));
}

TEST(Gradient, SigmoidBceAtZeroLogit) {
  ParamStore store;
  store.add("logit", Matrix{{0.0}});
  const double loss = gradient_of(
      [&](Tape& t) { return ad::bce(ad::sigmoid(t.param(store, "logit")), Matrix{{1.0}}); }, store);
  EXPECT_NEAR(loss, std::log(2.0), 1e-15);
  EXPECT_NEAR(store.grad("logit")(0, 0), -0.5, 1e-15);
}

TEST(Gradient, BceClampAtPerfectPrediction) {
  Tape t;
  Var l = ad::bce(t.constant(Matrix{{1.0, 0.0}}), Matrix{{1.0, 0.0}});
  EXPECT_NEAR(t.scalar(l), -2.0 * std::log(1.0 - 1e-7), 1e-15);
}

TEST(Gradient, RandomTwoLayerNetMatchesFiniteDifferences) {
  for (unsigned seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    ParamStore store;
    Linear l1("net.l1", 4, 6), l2("net.l2", 6, 1);
    DiceUnit act("net.act", 6);
    LayerNorm ln("net.ln", 6);
    l1.init(store, rng);
    l2.init(store, rng);
    act.init(store);
    ln.init(store);
    fdtest::randomize(store, rng);
    const Matrix x = fdtest::random_matrix(5, 4, rng);
    Matrix y(5, 1);
    for (std::size_t i = 0; i < 5; ++i) y(i, 0) = (i % 2);
    auto loss = [&](Tape& t) {
      Var h = ln.forward(t, store, act.forward(t, store, l1.forward(t, store, t.constant(x)), false));
      Var p = ad::sigmoid(l2.forward(t, store, h));
      Var sm = ad::row_softmax(h);
      return ad::add(ad::bce(p, y), ad::sum(ad::mul(sm, sm)));
    };
    const auto r = fdtest::compare(loss, store);
    EXPECT_LT(r.max_rel, 1e-4) << "seed " << seed << " worst " << r.worst;
  }
}

TEST(Gradient, ElementwiseOpsMatchFiniteDifferences) {
  for (unsigned seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(100 + seed);
    ParamStore store;
    store.add("a", fdtest::random_matrix(3, 4, rng));
    store.add("b", fdtest::random_matrix(3, 4, rng));
    store.add("c", fdtest::random_matrix(3, 1, rng));
    store.add("r", fdtest::random_matrix(1, 4, rng));
    store.add("s", fdtest::random_matrix(1, 1, rng));
    auto loss = [&](Tape& t) {
      Var a = t.param(store, "a"), b = t.param(store, "b");
      Var c = t.param(store, "c"), r = t.param(store, "r"), s = t.param(store, "s");
      Var x = ad::add_row(ad::mul_col(ad::sub(a, ad::scale(b, 0.7)), c), r);
      Var y = ad::add_col(ad::mul_scalar(ad::exp(ad::scale(x, 0.3)), s), c);
      Var z = ad::concat_rows({ad::transpose(ad::slice_cols(y, 1, 2)), ad::slice_cols(ad::slice_rows(a, 0, 2), 1, 3)});
      Var g = ad::gather_rows(y, {2, 0, 2});
      Var ls = ad::row_log_softmax(ad::concat_cols({g, ad::broadcast_rows(r, 3)}));
      Var w = ad::normalize_cols(ad::log(ad::add_scalar(ad::sigmoid(z), 0.1)));
      Var q = ad::mul(ad::one_minus(ad::sigmoid(b)), a);
      return ad::add(ad::add(ad::sum(ad::mul(w, w)), ad::sum(ls)), ad::sum(ad::mul(q, q)));
    };
    const auto r = fdtest::compare(loss, store);
    EXPECT_LT(r.max_rel, 1e-4) << "seed " << seed << " worst " << r.worst;
  }
}

TEST(Gradient, Deterministic) {
  std::mt19937_64 rng(5);
  ParamStore store;
  Linear l("l", 3, 2);
  l.init(store, rng);
  const Matrix x = fdtest::random_matrix(4, 3, rng);
  auto f = [&](Tape& t) { return ad::sum(ad::sigmoid(l.forward(t, store, t.constant(x)))); };
  gradient_of(f, store);
  const Matrix g1 = store.grad("l.w");
  gradient_of(f, store);
  EXPECT_EQ(g1, store.grad("l.w"));
}

TEST(Graph, ForeignAndUnboundVariablesRejected) {
  Tape a, b;
  Var x = a.constant(Matrix(2, 2));
  Var y = b.constant(Matrix(2, 2));
  EXPECT_THROW(ad::add(x, y), GraphError);
  EXPECT_THROW(ad::sigmoid(Var{}), GraphError);
}

TEST(Graph, NonFiniteRejected) {
  Tape t;
  EXPECT_THROW(t.constant(Matrix{{std::nan("")}}), NumericError);
  EXPECT_THROW(ad::log(t.constant(Matrix{{0.0}})), NumericError);
}

TEST(ParamStore, FrozenTensorsGetZeroGradAndRejectUpdates) {
  ParamStore store;
  store.add("emb/t", Matrix{{1.0, 2.0}});
  store.add("head/w", Matrix{{0.5}, {0.5}});
  store.set_frozen("emb/", true);
  gradient_of([&](Tape& t) { return ad::sum(ad::matmul(t.param(store, "emb/t"), t.param(store, "head/w"))); },
              store);
  EXPECT_EQ(store.grad("emb/t"), Matrix(1, 2));
  EXPECT_NE(store.grad("head/w"), Matrix(2, 1));
  Adam opt;
  EXPECT_THROW(opt.step(store, {"emb/t"}), FrozenParameterError);
  EXPECT_NO_THROW(opt.step(store, Adam::trainable(store)));
  EXPECT_EQ(store.value("emb/t"), (Matrix{{1.0, 2.0}}));
  EXPECT_THROW(store.add("head/w", Matrix(1, 1)), std::invalid_argument);
}

TEST(ParamStore, BuffersAreNotTrainable) {
  ParamStore store;
  DiceUnit d("d", 2);
  d.init(store);
  EXPECT_THROW(store.update("d.mean", [](Tensor&) {}), FrozenParameterError);
  EXPECT_EQ(Adam::trainable(store), std::vector<std::string>{"d.alpha"});
}

TEST(Checkpoint, RoundTripIsBitExact) {
  std::mt19937_64 rng(1);
  ParamStore a;
  Mlp mlp("m", {3, 4, 1});
  mlp.init(a, rng);
  fdtest::randomize(a, rng);
  std::stringstream ss;
  checkpoint::write(ss, a);
  const std::string bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 8), std::string("EGACKPT\0", 8));
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1u);
  ParamStore b;
  checkpoint::read(ss, b);
  for (const auto& [n, t] : a) {
    EXPECT_EQ(t.value, b.value(n)) << n;
    EXPECT_EQ(t.kind, b.at(n).kind) << n;
  }
}

TEST(Checkpoint, CorruptInputRejected) {
  ParamStore s;
  std::stringstream bad("NOTACKPT");
  EXPECT_THROW(checkpoint::read(bad, s), CheckpointError);
  ParamStore a;
  a.add("x", Matrix{{1, 2}});
  std::stringstream ss;
  checkpoint::write(ss, a);
  std::string bytes = ss.str();
  std::stringstream trunc(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(checkpoint::read(trunc, s), CheckpointError);
}

TEST(Mlp, ZeroFinalLayerGivesHalf) {
  std::mt19937_64 rng(2);
  ParamStore store;
  Mlp mlp("m", {6, 128, 32, 1});
  mlp.init(store, rng);
  Tape t;
  auto p = t.value(mlp.forward(t, store, t.constant(fdtest::random_matrix(4, 6, rng)), false));
  for (double v : p.data()) EXPECT_EQ(v, 0.5);
}
