#pragma once

// Synthetic auction world with a planted logistic click model.
//
// Every user and ad has a hidden latent vector; the click probability of ad a for
// user u in slot k is sigmoid(u.a + position_bias[k]). Categorical features are
// quantile bins of the latents, so they carry the signal a model can learn.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ega/evaluation.hpp"
#include "ega/feature_store.hpp"
#include "ega/training.hpp"

namespace ega::harness {

struct WorldConfig {
  std::size_t n_ads = 2000;
  std::size_t n_users = 400;
  std::size_t pool = 500;  // candidates per request
  std::size_t slots = 5;
  std::size_t behaviors = 64;
  std::size_t negatives = 32;
  std::size_t latent_dim = 4;
  double latent_std = 1.2;
  // Per-ad click offset carried as one extra latent coordinate (user side fixed at 1).
  double ad_offset_mean = -3.0;
  double ad_offset_std = 0.5;
  std::size_t bins = 8;
  std::size_t noise_vocab = 10;  // one uninformative ad feature
  std::size_t time_vocab = 4;
  std::size_t location_vocab = 8;
  double bid_mu = 0.0;
  double bid_sigma = 0.5;
  double value_scale = 1.0;  // v = value_scale * b
  std::vector<double> position_bias{0.5, 0.0, -0.5, -1.0, -1.5};
  double exposure_temperature = 1.0;
  std::size_t train_requests = 4000;
  std::size_t test_requests = 200;
  std::uint64_t seed = 7;

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw std::invalid_argument("world config: " + what);
    };
    need(slots >= 1, "slots must be >= 1");
    need(slots <= pool, "slots (" + std::to_string(slots) + ") must be <= pool (" + std::to_string(pool) + ")");
    need(pool <= n_ads, "pool (" + std::to_string(pool) + ") must be <= n_ads (" + std::to_string(n_ads) + ")");
    need(slots + negatives <= pool, "slots + negatives must be <= pool");
    need(behaviors <= n_ads, "behaviors must be <= n_ads");
    need(n_users >= 1, "n_users must be >= 1");
    need(position_bias.size() == slots, "position_bias needs exactly `slots` entries");
    need(bins >= 1 && noise_vocab >= 1, "bins and noise_vocab must be >= 1");
    need(bid_sigma >= 0 && latent_std >= 0 && ad_offset_std >= 0, "standard deviations must be >= 0");
    need(value_scale >= 1.0, "value_scale must be >= 1 (values never below bids)");
    need(exposure_temperature >= 0, "exposure_temperature must be >= 0");
  }

  FeatureSchema schema(std::size_t dim) const {
    FeatureSchema s;
    s.ad_vocab.assign(latent_dim + (latent_dim > 0 ? 1 : 0), bins + 1);
    s.ad_vocab.push_back(noise_vocab + 1);
    s.user_vocab.assign(latent_dim, bins + 1);
    if (s.user_vocab.empty()) s.user_vocab.push_back(1);
    s.time_vocab = time_vocab + 1;
    s.location_vocab = location_vocab + 1;
    s.dim = dim;
    s.behavior_len = behaviors;
    return s;
  }
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct ClickOracle {
  std::vector<std::vector<double>> user_latent;  // index = user id - 1
  std::vector<std::vector<double>> ad_latent;    // index = ad id - 1
  std::vector<double> position_bias;

  double affinity(UserId u, AdId a) const {
    const auto& x = user_latent.at(u - 1);
    const auto& y = ad_latent.at(a - 1);
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
  }
  // slot < 0: no position effect (platform-wide label)
  double click_probability(UserId u, AdId a, int slot = -1) const {
    return sigmoid(affinity(u, a) + (slot >= 0 ? position_bias.at(static_cast<std::size_t>(slot)) : 0.0));
  }
};

struct World {
  WorldConfig config;
  std::vector<AdFeatureRecord> ads;
  std::vector<UserFeatureRecord> users;
  ClickOracle oracle;
  std::vector<double> popularity;  // per ad index: 1 + behavior occurrences
};

namespace detail {

// Bin edges at standard-normal quantiles of N(0, std), so bins are roughly equally filled.
inline FeatureId latent_bin(double x, double std, std::size_t bins) {
  if (bins <= 1 || std <= 0) return 1;
  const double z = x / std;
  const double cdf = 0.5 * std::erfc(-z / std::sqrt(2.0));
  const auto b = static_cast<std::size_t>(cdf * static_cast<double>(bins));
  return static_cast<FeatureId>(1 + std::min(b, bins - 1));
}

inline Rng stream(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32)};
  return Rng(seq);
}

inline double gumbel(Rng& rng) {
  std::uniform_real_distribution<double> u(std::numeric_limits<double>::min(), 1.0);
  return -std::log(-std::log(u(rng)));
}

}  // namespace detail

inline World generate_world(const WorldConfig& cfg) {
  cfg.validate();
  World w;
  w.config = cfg;
  Rng rng = detail::stream(cfg.seed, 0x776f726c64ULL);
  std::normal_distribution<double> latent(0.0, cfg.latent_std);
  std::normal_distribution<double> offset(cfg.ad_offset_mean, cfg.ad_offset_std);
  std::lognormal_distribution<double> bid(cfg.bid_mu, cfg.bid_sigma);
  std::uniform_int_distribution<FeatureId> noise(1, static_cast<FeatureId>(cfg.noise_vocab));
  std::uniform_int_distribution<FeatureId> time(1, static_cast<FeatureId>(cfg.time_vocab));
  std::uniform_int_distribution<FeatureId> loc(1, static_cast<FeatureId>(cfg.location_vocab));

  w.oracle.position_bias = cfg.position_bias;
  for (std::size_t i = 0; i < cfg.n_ads; ++i) {
    std::vector<double> z(cfg.latent_dim);
    for (double& x : z) x = latent(rng);
    AdFeatureRecord a;
    a.ad_id = i + 1;
    for (double x : z) a.features.push_back(detail::latent_bin(x, cfg.latent_std, cfg.bins));
    if (cfg.latent_dim > 0) {
      const double off = offset(rng);
      z.push_back(off);
      a.features.push_back(detail::latent_bin(off - cfg.ad_offset_mean, cfg.ad_offset_std, cfg.bins));
    }
    a.features.push_back(noise(rng));
    a.bid = bid(rng);
    a.private_value = cfg.value_scale * a.bid;
    w.ads.push_back(std::move(a));
    w.oracle.ad_latent.push_back(std::move(z));
  }
  w.popularity.assign(cfg.n_ads, 1.0);
  for (std::size_t u = 0; u < cfg.n_users; ++u) {
    std::vector<double> z(cfg.latent_dim);
    for (double& x : z) x = latent(rng);
    UserFeatureRecord r;
    r.user_id = u + 1;
    for (double x : z) r.features.push_back(detail::latent_bin(x, cfg.latent_std, cfg.bins));
    if (r.features.empty()) r.features.push_back(kNullFeature);
    if (cfg.latent_dim > 0) z.push_back(1.0);
    r.time_bucket = time(rng);
    r.location_bucket = loc(rng);
    w.oracle.user_latent.push_back(std::move(z));
    // History: L distinct ads drawn by affinity (Gumbel top-L), in time order.
    std::vector<std::pair<double, std::size_t>> key(cfg.n_ads);
    for (std::size_t a = 0; a < cfg.n_ads; ++a)
      key[a] = {w.oracle.affinity(r.user_id, a + 1) + detail::gumbel(rng), a};
    std::partial_sort(key.begin(), key.begin() + static_cast<std::ptrdiff_t>(cfg.behaviors), key.end(),
                      std::greater<>());
    for (std::size_t j = 0; j < cfg.behaviors; ++j) {
      r.behaviors.push_back({key[j].second + 1, static_cast<std::int64_t>(j)});
      w.popularity[key[j].second] += 1.0;
    }
    w.users.push_back(std::move(r));
  }
  return w;
}

// One request: N-candidate pool, K exposed by noisy oracle ranking of b*p, clicks
// with position bias on the exposed ads, popularity-sampled unexposed ads with
// position-free labels.
inline RequestSample simulate_request(const World& w, UserId user, std::uint64_t request_id, Rng& rng) {
  const auto& c = w.config;
  if (user == 0 || user > w.users.size()) throw UnknownIdError("simulate_request: unknown user", user);
  RequestSample r;
  r.request_id = request_id;
  r.user = user;

  std::vector<std::size_t> idx(c.n_ads);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < c.pool; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, c.n_ads - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(c.pool);
  for (auto i : idx) r.pool.push_back(i + 1);

  std::vector<std::pair<double, std::size_t>> score(c.pool);
  for (std::size_t j = 0; j < c.pool; ++j) {
    const AdId a = r.pool[j];
    const double s = std::log(w.ads[a - 1].bid * w.oracle.click_probability(user, a));
    const double g = detail::gumbel(rng);
    score[j] = {c.exposure_temperature == INFINITY ? g : s + c.exposure_temperature * g, j};
  }
  std::partial_sort(score.begin(), score.begin() + static_cast<std::ptrdiff_t>(c.slots), score.end(),
                    std::greater<>());
  std::vector<char> exposed(c.pool, 0);
  std::bernoulli_distribution coin;
  for (std::size_t k = 0; k < c.slots; ++k) {
    const std::size_t j = score[k].second;
    exposed[j] = 1;
    r.exposed.push_back(r.pool[j]);
    const double p = w.oracle.click_probability(user, r.pool[j], static_cast<int>(k));
    r.exposed_clicks.push_back(coin(rng, decltype(coin)::param_type(p)));
  }

  std::vector<std::size_t> rest;
  std::vector<double> counts;
  for (std::size_t j = 0; j < c.pool; ++j)
    if (!exposed[j]) {
      rest.push_back(j);
      counts.push_back(w.popularity[r.pool[j] - 1]);
    }
  for (std::size_t s : sample_negatives(counts, c.negatives, rng)) {
    const AdId a = r.pool[rest[s]];
    r.unexposed.push_back(a);
    r.unexposed_clicks.push_back(coin(rng, decltype(coin)::param_type(w.oracle.click_probability(user, a))));
  }
  return r;
}

// Train and test splits come from separate RNG streams of the world seed.
inline std::vector<RequestSample> simulate_requests(const World& w, std::size_t count, std::uint64_t tag,
                                                    std::uint64_t first_id) {
  Rng rng = detail::stream(w.config.seed, tag);
  std::uniform_int_distribution<UserId> user(1, w.users.size());
  std::vector<RequestSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const UserId u = user(rng);
    out.push_back(simulate_request(w, u, first_id + i, rng));
  }
  return out;
}

inline constexpr std::uint64_t kTrainStream = 0x747261696eULL;
inline constexpr std::uint64_t kTestStream = 0x74657374ULL;

// AUC of the true click probabilities on the labeled ads of the given requests.
inline double bayes_auc(const World& w, std::span<const RequestSample> reqs) {
  std::vector<double> s;
  std::vector<int> y;
  for (const auto& r : reqs) {
    for (std::size_t k = 0; k < r.exposed.size(); ++k) {
      s.push_back(w.oracle.click_probability(r.user, r.exposed[k], static_cast<int>(k)));
      y.push_back(r.exposed_clicks[k]);
    }
    for (std::size_t k = 0; k < r.unexposed.size(); ++k) {
      s.push_back(w.oracle.click_probability(r.user, r.unexposed[k]));
      y.push_back(r.unexposed_clicks[k]);
    }
  }
  return auc(s, y).value_or(0.5);
}

// ---- request serialization --------------------------------------------------

inline nlohmann::json to_json(const RequestSample& r) {
  return {{"schema", corpus::kSchemaVersion},
          {"type", "request"},
          {"request_id", r.request_id},
          {"user", r.user},
          {"pool", r.pool},
          {"exposed", r.exposed},
          {"exposed_clicks", r.exposed_clicks},
          {"unexposed", r.unexposed},
          {"unexposed_clicks", r.unexposed_clicks}};
}

inline RequestSample request_from_json(const nlohmann::json& j) {
  corpus::check_header(j, "request");
  RequestSample r;
  r.request_id = j.at("request_id").get<std::uint64_t>();
  r.user = j.at("user").get<UserId>();
  r.pool = j.at("pool").get<std::vector<AdId>>();
  r.exposed = j.at("exposed").get<std::vector<AdId>>();
  r.exposed_clicks = j.at("exposed_clicks").get<std::vector<int>>();
  r.unexposed = j.at("unexposed").get<std::vector<AdId>>();
  r.unexposed_clicks = j.at("unexposed_clicks").get<std::vector<int>>();
  return r;
}

inline void write_requests(const std::string& path, const std::vector<RequestSample>& reqs) {
  std::ofstream os(path);
  if (!os) throw corpus::FormatError("cannot write " + path);
  for (const auto& r : reqs) os << to_json(r).dump() << '\n';
}

inline std::vector<RequestSample> read_requests(const std::string& path) {
  return corpus::read_lines(path, request_from_json);
}

}  // namespace ega::harness
