#pragma once

// Small hand-built corpus and model for unit tests.

#include <random>
#include <vector>

#include "ega/training.hpp"

namespace tiny {

inline ega::FeatureSchema schema(std::size_t dim = 8, std::size_t behaviors = 4) {
  ega::FeatureSchema s;
  s.ad_vocab = {6, 5};
  s.user_vocab = {4};
  s.time_vocab = 3;
  s.location_vocab = 3;
  s.dim = dim;
  s.behavior_len = behaviors;
  return s;
}

inline std::vector<ega::AdFeatureRecord> ads(std::size_t n, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<ega::FeatureId> f0(1, 5), f1(1, 4);
  std::lognormal_distribution<double> bid(0.0, 0.5);
  std::vector<ega::AdFeatureRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double b = bid(rng);
    out.push_back({i + 1, {f0(rng), f1(rng)}, b, b});
  }
  return out;
}

inline std::vector<ega::UserFeatureRecord> users(std::size_t n, std::size_t n_ads, std::size_t behaviors,
                                                 std::uint64_t seed = 2) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<ega::AdId> a(1, n_ads);
  std::vector<ega::UserFeatureRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    ega::UserFeatureRecord u{i + 1, {static_cast<ega::FeatureId>(1 + i % 3)}, {}, 1, 2};
    for (std::size_t j = 0; j < behaviors; ++j) u.behaviors.push_back({a(rng), static_cast<std::int64_t>(j)});
    out.push_back(u);
  }
  return out;
}

inline ega::HybridFeatureService service(std::size_t n_ads = 30, std::size_t n_users = 4,
                                         std::size_t dim = 8, std::size_t behaviors = 4) {
  return {schema(dim, behaviors), ads(n_ads), users(n_users, n_ads, behaviors)};
}

inline ega::RecFormerConfig rec_config(std::size_t dim = 8) {
  return {.depth = 2, .fusion_interval = 1, .dim = dim, .clusters = 4, .heads = 2};
}
inline ega::AucFormerConfig auc_config(std::size_t dim = 8, std::size_t slots = 3) {
  return {.slots = slots, .dim = dim, .clusters = 4, .heads = 2, .depth = 1, .hidden1 = 16, .hidden2 = 8};
}

inline ega::EgaModel model(std::uint64_t seed = 5, std::size_t slots = 3) {
  ega::EgaModel m(service(), rec_config(), auc_config(8, slots));
  ega::Rng rng(seed);
  m.init(rng);
  return m;
}

// Requests over a pool of `pool` ads: first `slots` exposed, next `negatives` unexposed.
inline std::vector<ega::RequestSample> requests(std::size_t count, std::size_t slots = 3,
                                                std::size_t negatives = 4, std::size_t pool = 12,
                                                std::uint64_t seed = 9) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution click(0.3);
  std::vector<ega::RequestSample> out;
  for (std::size_t r = 0; r < count; ++r) {
    ega::RequestSample s;
    s.request_id = r;
    s.user = 1 + r % 4;
    std::vector<ega::AdId> all(30);
    for (std::size_t i = 0; i < 30; ++i) all[i] = i + 1;
    std::shuffle(all.begin(), all.end(), rng);
    s.pool.assign(all.begin(), all.begin() + pool);
    s.exposed.assign(s.pool.begin(), s.pool.begin() + slots);
    s.unexposed.assign(s.pool.begin() + slots, s.pool.begin() + slots + negatives);
    for (std::size_t i = 0; i < slots; ++i) s.exposed_clicks.push_back(click(rng));
    for (std::size_t i = 0; i < negatives; ++i) s.unexposed_clicks.push_back(click(rng));
    out.push_back(s);
  }
  return out;
}

}  // namespace tiny
