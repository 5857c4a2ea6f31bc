#pragma once

// Flat `key = value` run configuration. Lines starting with '#' are comments;
// lists are comma separated. Unknown keys are errors.

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ega/harness/world.hpp"

namespace ega::harness {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  std::size_t dim = 32;
  std::size_t clusters = 16;
  std::size_t heads = 4;
  std::size_t depth = 2;            // cluster layers per stack
  std::size_t fusion_interval = 1;  // fuse after every this many layers
  bool fusion = true;
  std::size_t evaluator_depth = 2;  // refinement / evaluator layers
  std::size_t hidden1 = 128;
  std::size_t hidden2 = 32;
  double bid_weight_init = 4.0;  // initial log-weight of the generator's bid term
};

struct TrainConfig {
  std::size_t batch = 32;
  std::size_t pretrain_steps = 400;
  std::size_t reward_steps = 200;
  std::size_t rlaf_steps = 200;
  std::size_t payment_steps = 200;
  double pretrain_lr = 1e-3;
  double reward_lr = 1e-3;
  double rlaf_lr = 1e-3;
  double payment_lr = 1e-3;
  std::size_t rlaf_requests = 256;     // cached training requests for the generator
  std::size_t payment_requests = 256;  // cached training requests for the payment net
  double rho = 30.0;  // per-request regret is O(0.1), so the penalty needs weight
  std::size_t dual_period = 10;
  std::size_t psi_requests = 100;  // test requests used for regret / psi
  std::size_t recall_k = 10;
  std::size_t log_every = 10;
};

struct RunConfig {
  std::uint64_t seed = 7;
  WorldConfig world;
  ModelConfig model;
  TrainConfig train;

  RecFormerConfig recformer() const {
    return {.depth = model.depth,
            .fusion_interval = model.fusion_interval,
            .dim = model.dim,
            .clusters = model.clusters,
            .heads = model.heads,
            .fusion = model.fusion};
  }
  AucFormerConfig aucformer() const {
    return {.slots = world.slots,
            .dim = model.dim,
            .clusters = model.clusters,
            .heads = model.heads,
            .depth = model.evaluator_depth,
            .hidden1 = model.hidden1,
            .hidden2 = model.hidden2,
            .bid_weight_init = model.bid_weight_init};
  }

  void validate() const {
    world.validate();
    recformer().validate();
    aucformer().validate();
    if (train.batch == 0) throw ConfigError("train.batch must be >= 1");
    if (!(train.rho > 0)) throw ConfigError("train.rho must be > 0");
    if (train.dual_period == 0) throw ConfigError("train.dual_period must be >= 1");
    if (train.psi_requests > world.test_requests)
      throw ConfigError("train.psi_requests must be <= world.test_requests");
    for (double lr : {train.pretrain_lr, train.reward_lr, train.rlaf_lr, train.payment_lr})
      if (!(lr > 0)) throw ConfigError("learning rates must be > 0");
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end)
    throw ConfigError("config: bad value '" + v + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: bad boolean '" + v + "' for " + key);
}

inline std::string fmt(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

// One accessor per key: a setter from text and a getter to text.
struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field field(T RunConfig::*group, auto T::*member) {
  using V = std::remove_reference_t<decltype(std::declval<T&>().*member)>;
  Field f;
  f.set = [group, member](RunConfig& c, const std::string& v) {
    auto& dst = c.*group.*member;
    if constexpr (std::is_same_v<V, bool>) {
      dst = parse_bool("", v);
    } else if constexpr (std::is_same_v<V, std::vector<double>>) {
      dst.clear();
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ',')) dst.push_back(parse_number<double>("list", trim(item)));
    } else {
      dst = parse_number<V>("", v);
    }
  };
  f.get = [group, member](const RunConfig& c) -> std::string {
    const auto& src = c.*group.*member;
    if constexpr (std::is_same_v<V, bool>) {
      return src ? "true" : "false";
    } else if constexpr (std::is_same_v<V, std::vector<double>>) {
      std::string s;
      for (std::size_t i = 0; i < src.size(); ++i) s += (i ? "," : "") + fmt(src[i]);
      return s;
    } else if constexpr (std::is_floating_point_v<V>) {
      return fmt(src);
    } else {
      return std::to_string(src);
    }
  };
  return f;
}

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    t["seed"] = {[](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); },
                 [](const RunConfig& c) { return std::to_string(c.seed); }};
#define EGA_W(name) t["world." #name] = field(&RunConfig::world, &WorldConfig::name)
#define EGA_M(name) t["model." #name] = field(&RunConfig::model, &ModelConfig::name)
#define EGA_T(name) t["train." #name] = field(&RunConfig::train, &TrainConfig::name)
    EGA_W(n_ads); EGA_W(n_users); EGA_W(pool); EGA_W(slots); EGA_W(behaviors); EGA_W(negatives);
    EGA_W(latent_dim); EGA_W(latent_std); EGA_W(ad_offset_mean); EGA_W(ad_offset_std); EGA_W(bins);
    EGA_W(noise_vocab); EGA_W(time_vocab); EGA_W(location_vocab); EGA_W(bid_mu); EGA_W(bid_sigma); EGA_W(value_scale); EGA_W(position_bias);
    EGA_W(exposure_temperature); EGA_W(train_requests); EGA_W(test_requests);
    EGA_M(dim); EGA_M(clusters); EGA_M(heads); EGA_M(depth); EGA_M(fusion_interval); EGA_M(fusion);
    EGA_M(evaluator_depth); EGA_M(hidden1); EGA_M(hidden2); EGA_M(bid_weight_init);
    EGA_T(batch); EGA_T(pretrain_steps); EGA_T(reward_steps); EGA_T(rlaf_steps); EGA_T(payment_steps);
    EGA_T(pretrain_lr); EGA_T(reward_lr); EGA_T(rlaf_lr); EGA_T(payment_lr); EGA_T(rlaf_requests);
    EGA_T(payment_requests); EGA_T(rho); EGA_T(dual_period); EGA_T(psi_requests); EGA_T(recall_k);
    EGA_T(log_every);
#undef EGA_W
#undef EGA_M
#undef EGA_T
    return t;
  }();
  return table;
}

}  // namespace detail

// Applies one `key = value` assignment.
inline void set_option(RunConfig& c, const std::string& key, const std::string& value) {
  const auto& f = detail::fields();
  auto it = f.find(key);
  if (it == f.end()) throw ConfigError("config: unknown key '" + key + "'");
  try {
    it->second.set(c, value);
  } catch (const ConfigError&) {
    throw ConfigError("config: bad value '" + value + "' for " + key);
  }
}

inline RunConfig parse_config(std::istream& is, RunConfig base = {}) {
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    line = detail::trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
    set_option(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  base.world.seed = base.seed;
  return base;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  return parse_config(is);
}

inline std::string dump_config(const RunConfig& c) {
  std::string out;
  for (const auto& [k, f] : detail::fields()) out += k + " = " + f.get(c) + "\n";
  return out;
}

}  // namespace ega::harness
