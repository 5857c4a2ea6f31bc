#include <gtest/gtest.h>

#include <filesystem>

#include "ega/feature_store.hpp"
#include "tiny_model.hpp"

using namespace ega;

namespace {

struct Fixture {
  HybridFeatureService svc = tiny::service(30, 4, 8, 4);
  ParamStore store;
  Fixture() {
    Rng rng(1);
    svc.init(store, rng);
  }
};

}  // namespace

TEST(EmbeddingTable, NullRowReadsZero) {
  EmbeddingTable tab("t", 5, 3);
  ParamStore store;
  Rng rng(2);
  tab.init(store, rng);
  store.value("t")(0, 1) = 7.0;  // even if the stored row drifts
  Tape t;
  const FeatureId ids[] = {0, 2, 0};
  const Matrix e = t.value(tab.lookup(t, store, ids));
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(e(0, j), 0.0);
    EXPECT_EQ(e(2, j), 0.0);
    EXPECT_EQ(e(1, j), store.value("t")(2, j));
  }
  const FeatureId bad[] = {5};
  EXPECT_THROW(tab.lookup(t, store, bad), UnknownIdError);
}

TEST(FeatureService, IdenticalFeaturesGiveIdenticalRows) {
  Fixture f;
  AdFeatureRecord a{100, {2, 3}, 1.0, 1.0}, b{101, {2, 3}, 2.0, 2.0};
  const AdFeatureRecord recs[] = {a, b};
  Tape t;
  const Matrix e = t.value(f.svc.embed_ads(t, f.store, recs));
  ASSERT_EQ(e.rows(), 2u);
  ASSERT_EQ(e.cols(), 8u);
  for (std::size_t j = 0; j < e.cols(); ++j) EXPECT_EQ(e(0, j), e(1, j));
}

TEST(FeatureService, LocalCountersPerAd) {
  Fixture f;
  Tape t;
  const AdId ids[] = {1, 2, 3};
  f.svc.embed_ads(t, f.store, ids);
  const auto c = f.svc.counters_report();
  EXPECT_EQ(c.local_fetches, 3u);
  EXPECT_EQ(c.remote_calls, 0u);
  EXPECT_EQ(c.bytes_local, 3u * 2u * f.svc.schema().ad_feature_width() * 8u);
}

TEST(FeatureService, OneRemoteCallRegardlessOfCandidates) {
  std::vector<std::uint64_t> remote_bytes;
  for (std::size_t n : {10u, 1000u}) {
    HybridFeatureService svc(tiny::schema(), tiny::ads(n), tiny::users(2, n, 4));
    ParamStore store;
    Rng rng(3);
    svc.init(store, rng);
    Tape t;
    svc.fetch_user(t, store, UserId{1});
    std::vector<AdId> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = i + 1;
    svc.embed_ads(t, store, ids);
    const auto c = svc.counters_report();
    EXPECT_EQ(c.remote_calls, 1u);
    EXPECT_EQ(c.local_fetches, n);
    remote_bytes.push_back(c.bytes_remote);
  }
  EXPECT_EQ(remote_bytes[0], remote_bytes[1]);
}

TEST(FeatureService, EmptyBehaviorsArePaddedWithZeros) {
  Fixture f;
  UserFeatureRecord u{9, {1}, {}, 1, 1};
  Tape t;
  auto e = f.svc.fetch_user(t, f.store, u);
  const Matrix& b = t.value(e.e_bhvr);
  ASSERT_EQ(b.rows(), 4u);
  for (double x : b.data()) EXPECT_EQ(x, 0.0);
  EXPECT_EQ(t.value(e.e_u).cols(), 8u);
}

TEST(FeatureService, UnknownIdsAreReported) {
  Fixture f;
  Tape t;
  const AdId ids[] = {1, 999};
  try {
    f.svc.embed_ads(t, f.store, ids);
    FAIL() << "expected UnknownIdError";
  } catch (const UnknownIdError& e) {
    EXPECT_EQ(e.id(), 999u);
  }
  EXPECT_THROW(f.svc.fetch_user(t, f.store, UserId{77}), UnknownIdError);
  AdFeatureRecord bad{5, {9, 1}, 1.0, 1.0};
  const AdFeatureRecord recs[] = {bad};
  EXPECT_THROW(f.svc.embed_ads(t, f.store, recs), UnknownIdError);
}

TEST(FeatureService, RejectsDuplicateIds) {
  auto a = tiny::ads(3);
  a.push_back(a[0]);
  EXPECT_THROW(HybridFeatureService(tiny::schema(), a, {}), std::invalid_argument);
}

TEST(Corpus, JsonLinesRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "ega_corpus_test";
  std::filesystem::create_directories(dir);
  const auto ads = tiny::ads(7);
  const auto users = tiny::users(3, 7, 4);
  corpus::write_lines((dir / "ads.jsonl").string(), ads);
  corpus::write_lines((dir / "users.jsonl").string(), users);
  const auto a2 = corpus::read_ads((dir / "ads.jsonl").string());
  const auto u2 = corpus::read_users((dir / "users.jsonl").string());
  ASSERT_EQ(a2.size(), ads.size());
  for (std::size_t i = 0; i < ads.size(); ++i) {
    EXPECT_EQ(a2[i].ad_id, ads[i].ad_id);
    EXPECT_EQ(a2[i].features, ads[i].features);
    EXPECT_EQ(a2[i].bid, ads[i].bid);
  }
  ASSERT_EQ(u2.size(), users.size());
  EXPECT_EQ(u2[2].behaviors.size(), 4u);
  EXPECT_EQ(u2[2].behaviors[3].ad_id, users[2].behaviors[3].ad_id);

  std::ofstream((dir / "bad.jsonl").string()) << R"({"schema":2,"type":"ad"})" << "\n";
  EXPECT_THROW(corpus::read_ads((dir / "bad.jsonl").string()), corpus::FormatError);
  std::filesystem::remove_all(dir);
}
