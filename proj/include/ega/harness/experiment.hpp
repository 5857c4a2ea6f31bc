#pragma once

// Phase driver: gen-data -> pretrain -> train-reward -> rlaf -> train-payment,
// plus evaluation. Everything lives under one output directory:
//
//   config.cfg                resolved run configuration
//   data/*.jsonl, world.json  corpus, requests and world summary
//   checkpoints/<phase>.ckpt  full parameter store after each phase
//   metrics.jsonl             per-step training records
//   report.json, report.csv   latest evaluation

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ega/evaluation.hpp"
#include "ega/harness/config.hpp"
#include "ega/harness/world.hpp"
#include "ega/training.hpp"

namespace ega::harness {

namespace fs = std::filesystem;

class MissingPhaseError : public std::runtime_error {
 public:
  explicit MissingPhaseError(std::string phase)
      : std::runtime_error("missing prerequisite: run '" + phase + "' first"), phase_(std::move(phase)) {}
  const std::string& phase() const noexcept { return phase_; }

 private:
  std::string phase_;
};

// ---- reports ----------------------------------------------------------------

struct MechanismMetrics {
  std::string name;
  double ectr = 0.0;
  double erpm = 0.0;
  std::optional<double> psi;
  double mean_regret = 0.0;
  std::size_t psi_terms = 0;
  std::size_t psi_skipped = 0;
};

struct MetricReport {
  std::optional<double> auc;
  std::optional<double> recall_at_k;
  std::size_t k = 0;
  std::optional<double> deviation;
  std::vector<MechanismMetrics> mechanisms;

  const MechanismMetrics* mechanism(std::string_view name) const {
    for (const auto& m : mechanisms)
      if (m.name == name) return &m;
    return nullptr;
  }
};

struct RunReport {
  std::string run_id;
  std::string phase;
  std::uint64_t seed = 0;
  MetricReport metrics;
  std::optional<FlopsReport> flops;
  double wall_time = 0.0;  // seconds; informational, excluded from equality

  bool same_results(const RunReport& o) const;
};

namespace detail {

inline nlohmann::json opt(const std::optional<double>& x) { return x ? nlohmann::json(*x) : nlohmann::json(); }
inline std::optional<double> opt(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace detail

inline nlohmann::json to_json(const RunReport& r) {
  nlohmann::json mech = nlohmann::json::array();
  for (const auto& m : r.metrics.mechanisms)
    mech.push_back({{"name", m.name},
                    {"ectr", m.ectr},
                    {"erpm", m.erpm},
                    {"psi", detail::opt(m.psi)},
                    {"mean_regret", m.mean_regret},
                    {"psi_terms", m.psi_terms},
                    {"psi_skipped", m.psi_skipped}});
  nlohmann::json j = {{"run_id", r.run_id},
                      {"phase", r.phase},
                      {"seed", r.seed},
                      {"wall_time", r.wall_time},
                      {"metrics",
                       {{"auc", detail::opt(r.metrics.auc)},
                        {"recall_at_k", detail::opt(r.metrics.recall_at_k)},
                        {"k", r.metrics.k},
                        {"deviation", detail::opt(r.metrics.deviation)},
                        {"mechanisms", mech}}}};
  if (r.flops) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.flops->rows)
      rows.push_back({{"module", row.module},
                      {"closed_form", row.closed_form},
                      {"measured", row.measured},
                      {"note", row.note}});
    j["flops"] = {{"rows", rows},
                  {"ega_over_mca_closed", r.flops->ega_over_mca_closed},
                  {"approx_ratio", r.flops->approx_ratio}};
  }
  return j;
}

inline RunReport run_report_from_json(const nlohmann::json& j) {
  RunReport r;
  r.run_id = j.at("run_id").get<std::string>();
  r.phase = j.at("phase").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.wall_time = j.at("wall_time").get<double>();
  const auto& m = j.at("metrics");
  r.metrics.auc = detail::opt(m.at("auc"));
  r.metrics.recall_at_k = detail::opt(m.at("recall_at_k"));
  r.metrics.k = m.at("k").get<std::size_t>();
  r.metrics.deviation = detail::opt(m.at("deviation"));
  for (const auto& x : m.at("mechanisms"))
    r.metrics.mechanisms.push_back({x.at("name").get<std::string>(), x.at("ectr").get<double>(),
                                    x.at("erpm").get<double>(), detail::opt(x.at("psi")),
                                    x.at("mean_regret").get<double>(), x.at("psi_terms").get<std::size_t>(),
                                    x.at("psi_skipped").get<std::size_t>()});
  if (j.contains("flops")) {
    FlopsReport f;
    for (const auto& row : j["flops"].at("rows"))
      f.rows.push_back({row.at("module").get<std::string>(), row.at("closed_form").get<double>(),
                        row.at("measured").get<double>(), row.at("note").get<std::string>()});
    f.ega_over_mca_closed = j["flops"].at("ega_over_mca_closed").get<double>();
    f.approx_ratio = j["flops"].at("approx_ratio").get<double>();
    r.flops = f;
  }
  return r;
}

inline bool RunReport::same_results(const RunReport& o) const {
  auto strip = [](const RunReport& r) {
    auto j = to_json(r);
    j.erase("wall_time");
    return j.dump();
  };
  return strip(*this) == strip(o);
}

// One row per (metric, mechanism); mechanism is empty for model-level metrics.
inline std::string to_csv(const RunReport& r) {
  std::string out = "run_id,phase,seed,mechanism,metric,value\n";
  auto row = [&](const std::string& mech, const std::string& metric, const std::optional<double>& v) {
    out += r.run_id + "," + r.phase + "," + std::to_string(r.seed) + "," + mech + "," + metric + "," +
           (v ? detail::fmt(*v) : std::string()) + "\n";
  };
  row("", "auc", r.metrics.auc);
  row("", "recall_at_" + std::to_string(r.metrics.k), r.metrics.recall_at_k);
  row("", "deviation", r.metrics.deviation);
  for (const auto& m : r.metrics.mechanisms) {
    row(m.name, "ectr", m.ectr);
    row(m.name, "erpm", m.erpm);
    row(m.name, "psi", m.psi);
    row(m.name, "mean_regret", m.mean_regret);
  }
  return out;
}

// ---- pipeline ------------------------------------------------------------------

enum class Phase { pretrain, reward, rlaf, payment };

inline const char* phase_command(Phase p) {
  switch (p) {
    case Phase::pretrain: return "pretrain";
    case Phase::reward: return "train-reward";
    case Phase::rlaf: return "rlaf";
    case Phase::payment: return "train-payment";
  }
  return "";
}
inline const char* phase_file(Phase p) {
  switch (p) {
    case Phase::pretrain: return "pretrain";
    case Phase::reward: return "reward";
    case Phase::rlaf: return "rlaf";
    case Phase::payment: return "payment";
  }
  return "";
}
inline constexpr Phase kPhases[] = {Phase::pretrain, Phase::reward, Phase::rlaf, Phase::payment};

struct StepRecord {
  std::string phase;
  std::size_t step = 0;
  nlohmann::json values;
};

class Pipeline {
 public:
  Pipeline(RunConfig cfg, fs::path out) : cfg_(std::move(cfg)), out_(std::move(out)) {
    cfg_.world.seed = cfg_.seed;
    cfg_.validate();
  }

  const RunConfig& config() const noexcept { return cfg_; }
  const fs::path& out_dir() const noexcept { return out_; }
  fs::path data_dir() const { return out_ / "data"; }
  fs::path checkpoint(Phase p) const { return out_ / "checkpoints" / (std::string(phase_file(p)) + ".ckpt"); }

  // Optional observer for per-step records (also appended to metrics.jsonl).
  std::function<void(const StepRecord&)> on_step;

  // ---- data ----

  nlohmann::json gen_data() {
    fs::create_directories(data_dir());
    const World w = generate_world(cfg_.world);
    const auto train = simulate_requests(w, cfg_.world.train_requests, kTrainStream, 0);
    const auto test = simulate_requests(w, cfg_.world.test_requests, kTestStream, 1'000'000'000ULL);
    corpus::write_lines((data_dir() / "ads.jsonl").string(), w.ads);
    corpus::write_lines((data_dir() / "users.jsonl").string(), w.users);
    write_requests((data_dir() / "requests_train.jsonl").string(), train);
    write_requests((data_dir() / "requests_test.jsonl").string(), test);
    const double bayes = bayes_auc(w, test);
    nlohmann::json meta = {{"schema", corpus::kSchemaVersion},
                           {"ads", w.ads.size()},
                           {"users", w.users.size()},
                           {"train_requests", train.size()},
                           {"test_requests", test.size()},
                           {"bayes_auc", bayes}};
    std::ofstream((data_dir() / "world.json").string()) << meta.dump(2) << '\n';
    std::ofstream((out_ / "config.cfg").string()) << dump_config(cfg_);
    data_.reset();
    return meta;
  }

  bool has_data() const { return fs::exists(data_dir() / "world.json"); }

  // ---- phases ----

  void pretrain() {
    EgaModel& m = fresh_model();
    m.train_only({HybridFeatureService::kPrefix, RecFormer::kPrefix});
    Adam opt({.lr = cfg_.train.pretrain_lr});
    const auto& reqs = data().train;
    Rng rng = detail::stream(cfg_.seed, 0x7072ULL);
    BatchCursor<RequestSample> cur(reqs, cfg_.train.batch, rng);
    for (std::size_t s = 0; s < cfg_.train.pretrain_steps; ++s) {
      const double loss = pretrain_step(m, cur.next(), opt);
      record("pretrain", s, {{"loss", loss}});
    }
    save(Phase::pretrain);
  }

  void train_reward() {
    EgaModel& m = model_after(Phase::pretrain);
    m.train_only({RecFormer::kPrefix, AucFormer::evaluator_prefix()});
    Adam opt({.lr = cfg_.train.reward_lr});
    Rng rng = detail::stream(cfg_.seed, 0x7277ULL);
    BatchCursor<RequestSample> cur(data().train, cfg_.train.batch, rng);
    for (std::size_t s = 0; s < cfg_.train.reward_steps; ++s) {
      const double loss = reward_model_step(m, cur.next(), opt);
      record("train-reward", s, {{"loss", loss}});
    }
    save(Phase::reward);
  }

  void rlaf() {
    EgaModel& m = model_after(Phase::reward);
    m.train_only({AucFormer::generator_prefix()});
    const auto cache = cache_train(m, cfg_.train.rlaf_requests);
    Adam opt({.lr = cfg_.train.rlaf_lr});
    Rng rng = detail::stream(cfg_.seed, 0x726cULL);
    BatchCursor<CachedRequest> cur(cache, cfg_.train.batch, rng);
    for (std::size_t s = 0; s < cfg_.train.rlaf_steps; ++s) {
      const auto st = rlaf_step(m, cur.next(), opt);
      record("rlaf", s,
             {{"loss", st.loss},
              {"mean_reward", st.mean_reward},
              {"revenue", st.mean_revenue},
              {"bid_weight", m.store().value(m.aucformer().generator().bias_weight_name())(0, 0)}});
    }
    save(Phase::rlaf);
  }

  void train_payment() {
    EgaModel& m = model_after(Phase::rlaf);
    m.train_only({AucFormer::payment_prefix()});
    const auto cache = cache_train(m, cfg_.train.payment_requests);
    Adam opt({.lr = cfg_.train.payment_lr});
    LagrangianState lag;
    lag.rho = cfg_.train.rho;
    lag.period = cfg_.train.dual_period;
    const auto grid = default_gamma_grid();
    Rng rng = detail::stream(cfg_.seed, 0x7061ULL);
    BatchCursor<CachedRequest> cur(cache, cfg_.train.batch, rng);
    for (std::size_t s = 0; s < cfg_.train.payment_steps; ++s) {
      const auto st = payment_step(m, cur.next(), opt, lag, grid);
      record("train-payment", s,
             {{"loss", st.loss}, {"revenue", st.revenue}, {"regret", st.mean_regret}, {"rate", st.mean_rate}});
    }
    save(Phase::payment);
  }

  void run(Phase p) {
    switch (p) {
      case Phase::pretrain: return pretrain();
      case Phase::reward: return train_reward();
      case Phase::rlaf: return rlaf();
      case Phase::payment: return train_payment();
    }
  }

  // ---- evaluation ----

  // Loads the newest available checkpoint (an untrained model when none exist).
  RunReport evaluate() {
    const auto t0 = std::chrono::steady_clock::now();
    std::string phase = "untrained";
    std::optional<Phase> latest;
    for (Phase p : kPhases)
      if (fs::exists(checkpoint(p))) latest = p;
    EgaModel& m = latest ? model_after(*latest) : fresh_model();
    if (latest) phase = phase_command(*latest);
    RunReport rep;
    rep.run_id = "ega-s" + std::to_string(cfg_.seed);
    rep.phase = phase;
    rep.seed = cfg_.seed;
    rep.metrics = evaluate_model(m);
    rep.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_report(rep);
    return rep;
  }

  MetricReport evaluate_model(EgaModel& m) {
    const auto& test = data().test;
    MetricReport out;
    out.k = cfg_.train.recall_k;
    std::vector<double> scores;
    std::vector<int> labels;
    double recall_sum = 0.0, pctr_sum = 0.0, clicks = 0.0;
    std::size_t recall_n = 0, exposed_n = 0;
    std::vector<CachedRequest> cache;
    cache.reserve(test.size());
    for (const auto& r : test) {
      cache.push_back(cache_request(m, r));
      const auto& c = cache.back();
      std::unordered_map<AdId, double> by_id;
      for (std::size_t j = 0; j < c.ads.size(); ++j) by_id.emplace(c.ads[j], c.pctr[j]);
      std::vector<double> s;
      std::vector<int> y;
      for (std::size_t k = 0; k < r.exposed.size(); ++k) {
        s.push_back(by_id.at(r.exposed[k]));
        y.push_back(r.exposed_clicks[k]);
        pctr_sum += s.back();
        clicks += y.back();
        ++exposed_n;
      }
      for (std::size_t k = 0; k < r.unexposed.size(); ++k) {
        s.push_back(by_id.at(r.unexposed[k]));
        y.push_back(r.unexposed_clicks[k]);
      }
      if (auto rc = recall_at_k(s, y, out.k)) {
        recall_sum += *rc;
        ++recall_n;
      }
      scores.insert(scores.end(), s.begin(), s.end());
      labels.insert(labels.end(), y.begin(), y.end());
    }
    out.auc = auc(scores, labels);
    if (recall_n > 0) out.recall_at_k = recall_sum / static_cast<double>(recall_n);
    if (exposed_n > 0)
      out.deviation = deviation(pctr_sum / static_cast<double>(exposed_n), clicks / static_cast<double>(exposed_n));

    out.mechanisms.push_back(mechanism_metrics(m, cache, "ega", false));
    out.mechanisms.push_back(mechanism_metrics(m, cache, "gsp", true));
    return out;
  }

  // ---- checkpoints ----

  // Model with the parameters saved after `p`; earliest missing phase is reported.
  EgaModel& model_after(Phase p) {
    require(p);
    EgaModel& m = fresh_model();
    ega::checkpoint::load(checkpoint(p).string(), m.store());
    return m;
  }

  void require(Phase p) const {
    if (!has_data()) throw MissingPhaseError("gen-data");
    for (Phase q : kPhases) {
      if (!fs::exists(checkpoint(q))) throw MissingPhaseError(phase_command(q));
      if (q == p) break;
    }
  }

  EgaModel& fresh_model() {
    const Data& d = data();
    model_.emplace(HybridFeatureService(cfg_.world.schema(cfg_.model.dim), d.ads, d.users), cfg_.recformer(),
                   cfg_.aucformer());
    Rng rng = detail::stream(cfg_.seed, 0x696e6974ULL);
    model_->init(rng);
    return *model_;
  }

  EgaModel* model() { return model_ ? &*model_ : nullptr; }

 private:
  struct Data {
    std::vector<AdFeatureRecord> ads;
    std::vector<UserFeatureRecord> users;
    std::vector<RequestSample> train, test;
  };

  // Cycles through a shuffled copy of the items; reshuffles every epoch.
  template <class T>
  class BatchCursor {
   public:
    BatchCursor(const std::vector<T>& items, std::size_t batch, Rng& rng)
        : items_(items), batch_(std::min(batch, items.size())), rng_(rng), order_(items.size()) {
      if (items.empty()) throw std::invalid_argument("training: no requests available");
      std::iota(order_.begin(), order_.end(), 0);
      std::shuffle(order_.begin(), order_.end(), rng_);
    }
    std::vector<T> next() {
      std::vector<T> out;
      out.reserve(batch_);
      while (out.size() < batch_) {
        if (pos_ == order_.size()) {
          pos_ = 0;
          std::shuffle(order_.begin(), order_.end(), rng_);
        }
        out.push_back(items_[order_[pos_++]]);
      }
      return out;
    }

   private:
    const std::vector<T>& items_;
    std::size_t batch_;
    Rng& rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
  };

  const Data& data() {
    if (data_) return *data_;
    if (!has_data()) throw MissingPhaseError("gen-data");
    Data d;
    d.ads = corpus::read_ads((data_dir() / "ads.jsonl").string());
    d.users = corpus::read_users((data_dir() / "users.jsonl").string());
    d.train = read_requests((data_dir() / "requests_train.jsonl").string());
    d.test = read_requests((data_dir() / "requests_test.jsonl").string());
    for (const auto& r : d.train) r.validate(cfg_.world.slots, cfg_.world.negatives);
    for (const auto& r : d.test) r.validate(cfg_.world.slots, cfg_.world.negatives);
    data_ = std::move(d);
    return *data_;
  }

  std::vector<CachedRequest> cache_train(EgaModel& m, std::size_t count) {
    const auto& train = data().train;
    std::vector<CachedRequest> out;
    for (std::size_t i = 0; i < std::min(count, train.size()); ++i) out.push_back(cache_request(m, train[i]));
    return out;
  }

  MechanismMetrics mechanism_metrics(EgaModel& m, const std::vector<CachedRequest>& cache, std::string name,
                                     bool gsp) {
    MechanismMetrics mm;
    mm.name = std::move(name);
    std::vector<AuctionOutcome> outcomes;
    std::vector<std::unique_ptr<FrozenAuction>> auctions;
    std::vector<AuctionInstance> inst;
    for (std::size_t i = 0; i < cache.size(); ++i) {
      auctions.push_back(std::make_unique<FrozenAuction>(m, cache[i]));
      const FrozenAuction& fa = *auctions.back();
      outcomes.push_back(gsp ? fa.run_gsp(cache[i].bids) : fa.run(cache[i].bids));
      if (i < cfg_.train.psi_requests)
        inst.push_back({gsp ? fa.gsp_mechanism() : fa.mechanism(), cache[i].bids, cache[i].values});
    }
    const auto ev = expected_value_metrics(outcomes);
    mm.ectr = ev.ectr;
    mm.erpm = ev.erpm;
    const auto psi = psi_metric(inst, default_gamma_grid());
    mm.psi = psi.psi;
    mm.mean_regret = psi.mean_regret;
    mm.psi_terms = psi.terms;
    mm.psi_skipped = psi.skipped;
    return mm;
  }

  void save(Phase p) {
    fs::create_directories(checkpoint(p).parent_path());
    ega::checkpoint::save(checkpoint(p).string(), model_->store());
  }

  void record(const std::string& phase, std::size_t step, nlohmann::json values) {
    StepRecord rec{phase, step, std::move(values)};
    if (on_step) on_step(rec);
    if (cfg_.train.log_every == 0 || (step % cfg_.train.log_every != 0)) return;
    nlohmann::json j = {{"phase", phase}, {"step", step}};
    for (auto& [k, v] : rec.values.items()) j[k] = v;
    std::ofstream(out_ / "metrics.jsonl", std::ios::app) << j.dump() << '\n';
  }

  void write_report(const RunReport& rep) {
    fs::create_directories(out_);
    std::ofstream(out_ / "report.json") << to_json(rep).dump(2) << '\n';
    std::ofstream(out_ / "report.csv") << to_csv(rep);
  }

  RunConfig cfg_;
  fs::path out_;
  std::optional<Data> data_;
  std::optional<EgaModel> model_;
};

}  // namespace ega::harness
