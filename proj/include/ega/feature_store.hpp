#pragma once

// In-process hybrid feature service: ad features live in a local store and are
// fetched per candidate; user features (categorical, context, behavior sequence)
// come from a remote store in exactly one call per request.

#include <atomic>
#include <cstdint>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "ega/numerics/autodiff.hpp"
#include "ega/numerics/nn.hpp"

namespace ega {

class UnknownIdError : public std::out_of_range {
 public:
  UnknownIdError(const std::string& what, std::uint64_t id)
      : std::out_of_range(what + " " + std::to_string(id)), id_(id) {}
  std::uint64_t id() const noexcept { return id_; }

 private:
  std::uint64_t id_;
};

using AdId = std::uint64_t;
using UserId = std::uint64_t;
using FeatureId = std::uint32_t;

inline constexpr FeatureId kNullFeature = 0;
inline constexpr AdId kNullAd = 0;

struct AdFeatureRecord {
  AdId ad_id = kNullAd;
  std::vector<FeatureId> features;
  double bid = 1.0;
  double private_value = 1.0;
};

struct Behavior {
  AdId ad_id = kNullAd;
  std::int64_t timestamp = 0;
};

struct UserFeatureRecord {
  UserId user_id = 0;
  std::vector<FeatureId> features;
  std::vector<Behavior> behaviors;
  FeatureId time_bucket = kNullFeature;
  FeatureId location_bucket = kNullFeature;
};

// Vocabulary sizes include the reserved null id 0.
struct FeatureSchema {
  std::vector<std::size_t> ad_vocab;
  std::vector<std::size_t> user_vocab;
  std::size_t time_vocab = 1;
  std::size_t location_vocab = 1;
  std::size_t dim = 32;
  std::size_t behavior_len = 16;

  std::size_t ad_feature_width() const {
    const std::size_t n = std::max<std::size_t>(ad_vocab.size(), 1);
    return std::max<std::size_t>(1, (dim + n / 2) / n);
  }
  std::size_t user_feature_width() const {
    const std::size_t n = std::max<std::size_t>(user_vocab.size() + 2, 1);
    return std::max<std::size_t>(1, (dim + n / 2) / n);
  }
  bool ad_needs_projection() const { return ad_vocab.size() * ad_feature_width() != dim; }
};

struct AccessCounters {
  std::uint64_t local_fetches = 0;
  std::uint64_t remote_calls = 0;
  std::uint64_t bytes_local = 0;
  std::uint64_t bytes_remote = 0;

  bool operator==(const AccessCounters&) const = default;
  bool dominates(const AccessCounters& o) const {
    return local_fetches >= o.local_fetches && remote_calls >= o.remote_calls &&
           bytes_local >= o.bytes_local && bytes_remote >= o.bytes_remote;
  }
};

// Embedding table whose row 0 (the null id) always reads as zeros.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(std::string name, std::size_t vocab, std::size_t dim)
      : name_(std::move(name)), vocab_(vocab), dim_(dim) {}

  void init(ParamStore& store, Rng& rng) const {
    // Unit variance: small embeddings get drowned by the attention residual branch.
    Matrix rows = uniform_init(vocab_, dim_, 1, rng);
    for (double& x : rows.data()) x *= std::sqrt(3.0);
    for (std::size_t j = 0; j < dim_; ++j) rows(0, j) = 0.0;
    store.add(name_, std::move(rows));
  }

  Var lookup(Tape& t, ParamStore& store, std::span<const FeatureId> ids) const {
    std::vector<std::size_t> idx(ids.size());
    Matrix mask(ids.size(), 1);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] >= vocab_) throw UnknownIdError(name_ + ": unknown feature id", ids[i]);
      idx[i] = ids[i];
      mask(i, 0) = ids[i] == kNullFeature ? 0.0 : 1.0;
    }
    return ad::mul_col(ad::gather_rows(t.param(store, name_), std::move(idx)), t.constant(mask));
  }

  const std::string& name() const noexcept { return name_; }
  std::size_t vocab() const noexcept { return vocab_; }
  std::size_t dim() const noexcept { return dim_; }

 private:
  std::string name_;
  std::size_t vocab_ = 0;
  std::size_t dim_ = 0;
};

class HybridFeatureService {
 public:
  static constexpr const char* kPrefix = "features/";

  HybridFeatureService() = default;
  HybridFeatureService(FeatureSchema schema, std::vector<AdFeatureRecord> ads,
                       std::vector<UserFeatureRecord> users)
      : schema_(std::move(schema)) {
    const std::size_t wa = schema_.ad_feature_width();
    for (std::size_t f = 0; f < schema_.ad_vocab.size(); ++f)
      ad_tables_.emplace_back(std::string(kPrefix) + "ad" + std::to_string(f), schema_.ad_vocab[f], wa);
    const std::size_t wu = schema_.user_feature_width();
    for (std::size_t f = 0; f < schema_.user_vocab.size(); ++f)
      user_tables_.emplace_back(std::string(kPrefix) + "user" + std::to_string(f),
                                schema_.user_vocab[f], wu);
    time_table_ = EmbeddingTable(std::string(kPrefix) + "time", schema_.time_vocab, wu);
    location_table_ = EmbeddingTable(std::string(kPrefix) + "location", schema_.location_vocab, wu);
    for (auto& a : ads) {
      validate(a);
      const AdId id = a.ad_id;
      if (!ads_.emplace(id, std::move(a)).second)
        throw std::invalid_argument("HybridFeatureService: duplicate ad id " + std::to_string(id));
    }
    for (auto& u : users) {
      const UserId id = u.user_id;
      if (!users_.emplace(id, std::move(u)).second)
        throw std::invalid_argument("HybridFeatureService: duplicate user id " + std::to_string(id));
    }
  }

  HybridFeatureService(const HybridFeatureService& o)
      : schema_(o.schema_),
        ad_tables_(o.ad_tables_),
        user_tables_(o.user_tables_),
        time_table_(o.time_table_),
        location_table_(o.location_table_),
        ads_(o.ads_),
        users_(o.users_) {}

  void init(ParamStore& store, Rng& rng) const {
    for (const auto& t : ad_tables_) t.init(store, rng);
    for (const auto& t : user_tables_) t.init(store, rng);
    time_table_.init(store, rng);
    location_table_.init(store, rng);
    const std::size_t ad_cat = ad_tables_.size() * schema_.ad_feature_width();
    if (schema_.ad_needs_projection())
      store.add(ad_projection(), uniform_init(ad_cat, schema_.dim, ad_cat, rng));
    user_projection().init(store, rng);
  }

  // E_ad rows for the given records, in order. Counts one local fetch per ad.
  Var embed_ads(Tape& t, ParamStore& store, std::span<const AdFeatureRecord> records) const {
    for (const auto& r : records) validate(r);
    Var e = embed_rows(t, store, records);
    local_fetches_ += records.size();
    bytes_local_ += records.size() * ad_tables_.size() * schema_.ad_feature_width() * sizeof(double);
    return e;
  }

  Var embed_ads(Tape& t, ParamStore& store, std::span<const AdId> ids) const {
    std::vector<AdFeatureRecord> recs;
    recs.reserve(ids.size());
    for (AdId id : ids) recs.push_back(ad(id));
    return embed_ads(t, store, recs);
  }

  struct UserEmbedding {
    Var e_u;     // 1 x d
    Var e_bhvr;  // L x d
  };

  // One remote call per request regardless of how many candidates follow.
  UserEmbedding fetch_user(Tape& t, ParamStore& store, const UserFeatureRecord& user) const {
    if (user.features.size() != user_tables_.size())
      throw ShapeError("fetch_user: expected " + std::to_string(user_tables_.size()) +
                       " user features, got " + std::to_string(user.features.size()));
    if (user.behaviors.size() > schema_.behavior_len)
      throw ShapeError("fetch_user: behavior sequence longer than " +
                       std::to_string(schema_.behavior_len));
    std::vector<Var> parts;
    for (std::size_t f = 0; f < user_tables_.size(); ++f) {
      const FeatureId id = user.features[f];
      parts.push_back(user_tables_[f].lookup(t, store, std::span<const FeatureId>(&id, 1)));
    }
    parts.push_back(time_table_.lookup(t, store, std::span<const FeatureId>(&user.time_bucket, 1)));
    parts.push_back(
        location_table_.lookup(t, store, std::span<const FeatureId>(&user.location_bucket, 1)));
    Var e_u = user_projection().forward(t, store, ad::concat_cols(parts));

    std::vector<AdFeatureRecord> rows(schema_.behavior_len);
    for (auto& r : rows) r.features.assign(ad_tables_.size(), kNullFeature);
    for (std::size_t i = 0; i < user.behaviors.size(); ++i)
      if (user.behaviors[i].ad_id != kNullAd) rows[i] = ad(user.behaviors[i].ad_id);
    Var e_bhvr = schema_.behavior_len == 0 ? t.constant(Matrix(0, schema_.dim))
                                           : embed_rows(t, store, rows);

    remote_calls_ += 1;
    bytes_remote_ += remote_payload_bytes();
    return {e_u, e_bhvr};
  }

  UserEmbedding fetch_user(Tape& t, ParamStore& store, UserId id) const {
    return fetch_user(t, store, user(id));
  }

  AccessCounters counters_report() const {
    return AccessCounters{local_fetches_.load(), remote_calls_.load(), bytes_local_.load(),
                          bytes_remote_.load()};
  }

  // User payload size: categorical + context ids, then (ad id, timestamp) per slot.
  std::size_t remote_payload_bytes() const {
    return (user_tables_.size() + 2) * sizeof(FeatureId) + schema_.behavior_len * 16;
  }

  const AdFeatureRecord& ad(AdId id) const {
    auto it = ads_.find(id);
    if (it == ads_.end()) throw UnknownIdError("feature store: unknown ad id", id);
    return it->second;
  }
  const UserFeatureRecord& user(UserId id) const {
    auto it = users_.find(id);
    if (it == users_.end()) throw UnknownIdError("feature store: unknown user id", id);
    return it->second;
  }
  bool has_ad(AdId id) const { return ads_.contains(id); }

  const FeatureSchema& schema() const noexcept { return schema_; }
  std::size_t ad_count() const noexcept { return ads_.size(); }
  std::size_t user_count() const noexcept { return users_.size(); }
  const std::vector<EmbeddingTable>& ad_tables() const noexcept { return ad_tables_; }

  std::string ad_projection() const { return std::string(kPrefix) + "ad_proj.w"; }
  Linear user_projection() const {
    return Linear(std::string(kPrefix) + "user_proj",
                  (user_tables_.size() + 2) * schema_.user_feature_width(), schema_.dim);
  }

 private:
  void validate(const AdFeatureRecord& a) const {
    if (a.features.size() != schema_.ad_vocab.size())
      throw ShapeError("ad " + std::to_string(a.ad_id) + ": expected " +
                       std::to_string(schema_.ad_vocab.size()) + " categorical features");
    if (!(a.bid > 0.0)) throw std::invalid_argument("ad " + std::to_string(a.ad_id) + ": bid must be > 0");
    if (!(a.private_value > 0.0))
      throw std::invalid_argument("ad " + std::to_string(a.ad_id) + ": private value must be > 0");
    for (std::size_t f = 0; f < a.features.size(); ++f)
      if (a.features[f] >= schema_.ad_vocab[f])
        throw UnknownIdError("ad feature " + std::to_string(f) + ": unknown id", a.features[f]);
  }

  Var embed_rows(Tape& t, ParamStore& store, std::span<const AdFeatureRecord> records) const {
    std::vector<Var> parts;
    std::vector<FeatureId> ids(records.size());
    for (std::size_t f = 0; f < ad_tables_.size(); ++f) {
      for (std::size_t i = 0; i < records.size(); ++i) ids[i] = records[i].features[f];
      parts.push_back(ad_tables_[f].lookup(t, store, ids));
    }
    Var cat = ad::concat_cols(parts);
    if (schema_.ad_needs_projection()) cat = ad::matmul(cat, t.param(store, ad_projection()));
    return cat;
  }

  FeatureSchema schema_;
  std::vector<EmbeddingTable> ad_tables_;
  std::vector<EmbeddingTable> user_tables_;
  EmbeddingTable time_table_;
  EmbeddingTable location_table_;
  std::unordered_map<AdId, AdFeatureRecord> ads_;
  std::unordered_map<UserId, UserFeatureRecord> users_;

  mutable std::atomic<std::uint64_t> local_fetches_{0};
  mutable std::atomic<std::uint64_t> remote_calls_{0};
  mutable std::atomic<std::uint64_t> bytes_local_{0};
  mutable std::atomic<std::uint64_t> bytes_remote_{0};
};

// Line-delimited JSON corpus files. Each line carries "schema": kCorpusSchemaVersion.
namespace corpus {

inline constexpr int kSchemaVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::json to_json(const AdFeatureRecord& a) {
  return {{"schema", kSchemaVersion}, {"type", "ad"},       {"ad_id", a.ad_id},
          {"features", a.features},   {"bid", a.bid},       {"private_value", a.private_value}};
}

inline nlohmann::json to_json(const UserFeatureRecord& u) {
  nlohmann::json beh = nlohmann::json::array();
  for (const auto& b : u.behaviors) beh.push_back({b.ad_id, b.timestamp});
  return {{"schema", kSchemaVersion},     {"type", "user"},
          {"user_id", u.user_id},         {"features", u.features},
          {"behaviors", beh},             {"time_bucket", u.time_bucket},
          {"location_bucket", u.location_bucket}};
}

inline void check_header(const nlohmann::json& j, const char* type) {
  if (j.value("schema", -1) != kSchemaVersion)
    throw FormatError(std::string("corpus: unsupported schema version in ") + type + " record");
  if (j.value("type", std::string()) != type)
    throw FormatError(std::string("corpus: expected a '") + type + "' record");
}

inline AdFeatureRecord ad_from_json(const nlohmann::json& j) {
  check_header(j, "ad");
  AdFeatureRecord a;
  a.ad_id = j.at("ad_id").get<AdId>();
  a.features = j.at("features").get<std::vector<FeatureId>>();
  a.bid = j.at("bid").get<double>();
  a.private_value = j.at("private_value").get<double>();
  return a;
}

inline UserFeatureRecord user_from_json(const nlohmann::json& j) {
  check_header(j, "user");
  UserFeatureRecord u;
  u.user_id = j.at("user_id").get<UserId>();
  u.features = j.at("features").get<std::vector<FeatureId>>();
  for (const auto& b : j.at("behaviors")) u.behaviors.push_back({b.at(0).get<AdId>(), b.at(1).get<std::int64_t>()});
  u.time_bucket = j.at("time_bucket").get<FeatureId>();
  u.location_bucket = j.at("location_bucket").get<FeatureId>();
  return u;
}

template <class Record>
void write_lines(const std::string& path, const std::vector<Record>& records) {
  std::ofstream os(path);
  if (!os) throw FormatError("corpus: cannot write " + path);
  for (const auto& r : records) os << to_json(r).dump() << '\n';
}

template <class Parse>
auto read_lines(const std::string& path, Parse parse) {
  std::ifstream is(path);
  if (!is) throw FormatError("corpus: cannot open " + path);
  std::vector<decltype(parse(nlohmann::json{}))> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(parse(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<AdFeatureRecord> read_ads(const std::string& path) {
  return read_lines(path, ad_from_json);
}
inline std::vector<UserFeatureRecord> read_users(const std::string& path) {
  return read_lines(path, user_from_json);
}

}  // namespace corpus
}  // namespace ega
