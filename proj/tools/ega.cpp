// ega: command-line driver for data generation, the training phases, evaluation,
// the FLOPs table and report printing.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ega/harness/experiment.hpp"

namespace fs = std::filesystem;
using namespace ega;
using namespace ega::harness;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::vector<std::string> overrides;
};

// --config wins, then the config saved by gen-data, then defaults.
RunConfig resolve(const Options& o) {
  RunConfig c;
  if (!o.config.empty()) {
    c = load_config(o.config);
  } else if (fs::exists(fs::path(o.out) / "config.cfg")) {
    c = load_config((fs::path(o.out) / "config.cfg").string());
  }
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_option(c, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  if (o.seed) c.seed = *o.seed;
  c.world.seed = c.seed;
  return c;
}

void print_flops(const FlopsReport& r) {
  std::printf("%-14s %16s %16s %8s\n", "module", "closed_form", "measured", "ratio");
  for (const auto& row : r.rows) {
    std::printf("%-14s %16.0f %16.0f %8s%s\n", row.module.c_str(), row.closed_form, row.measured,
                row.measured > 0 ? std::to_string(row.ratio()).substr(0, 6).c_str() : "-",
                row.flagged() ? "  *" : "");
  }
  for (const auto& row : r.rows)
    if (row.flagged()) std::printf("* %s: %s\n", row.module.c_str(), row.note.c_str());
  std::printf("ega/mca (closed form): %.4f\n", r.ega_over_mca_closed);
  std::printf("large-N approximation:  %.4f\n", r.approx_ratio);
}

void print_report(const RunReport& r) {
  auto show = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("n/a"); };
  std::printf("run %s  phase %s  seed %llu\n", r.run_id.c_str(), r.phase.c_str(),
              static_cast<unsigned long long>(r.seed));
  std::printf("auc %s  recall@%zu %s  dev %s\n", show(r.metrics.auc).c_str(), r.metrics.k,
              show(r.metrics.recall_at_k).c_str(), show(r.metrics.deviation).c_str());
  std::printf("%-6s %10s %10s %10s %12s %8s\n", "mech", "eCTR(%)", "eRPM", "psi", "mean_regret", "skipped");
  for (const auto& m : r.metrics.mechanisms)
    std::printf("%-6s %10.4f %10.4f %10s %12.6f %8zu\n", m.name.c_str(), m.ectr, m.erpm, show(m.psi).c_str(),
                m.mean_regret, m.psi_skipped);
}

void fail(const std::string& kind, const std::string& message, const std::string& phase = {}) {
  nlohmann::json j = {{"error", kind}, {"message", message}};
  if (!phase.empty()) j["phase"] = phase;
  std::cerr << j.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic end-to-end ad auction pipeline"};
  app.require_subcommand(1, 1);
  Options o;
  app.add_option("--config", o.config, "run configuration file (key = value)");
  app.add_option("--seed", o.seed, "seed for the world, sampling and initialization");
  app.add_option("--out", o.out, "output directory")->capture_default_str();
  app.add_option("--set", o.overrides, "override one config key, e.g. --set train.rlaf_steps=50");

  struct Cmd {
    const char* name;
    const char* help;
  };
  const std::vector<Cmd> cmds = {
      {"gen-data", "generate the synthetic corpus and request logs"},
      {"pretrain", "train embeddings and the set-aware CTR model"},
      {"train-reward", "train the slate evaluator"},
      {"rlaf", "fine-tune the generator with auction feedback"},
      {"train-payment", "train the payment network"},
      {"evaluate", "score the newest checkpoint on the test split"},
      {"flops", "print closed-form vs measured FLOPs (fresh weights)"},
      {"report", "print the latest evaluation report"},
  };
  std::map<std::string, CLI::App*> sub;
  for (const auto& c : cmds) sub[c.name] = app.add_subcommand(c.name, c.help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help() << '\n';
    fail("usage", e.what());
    return 2;
  }

  try {
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "report") {
      const fs::path path = fs::path(o.out) / "report.json";
      if (!fs::exists(path)) throw MissingPhaseError("evaluate");
      std::ifstream is(path);
      print_report(run_report_from_json(nlohmann::json::parse(is)));
      return 0;
    }
    const RunConfig cfg = resolve(o);
    if (cmd == "flops") {
      FlopsSetup s;
      s.rec = cfg.recformer();
      s.auc = cfg.aucformer();
      s.candidates = cfg.world.pool;
      s.behaviors = cfg.world.behaviors;
      s.seed = cfg.seed;
      print_flops(measure_flops(s));
      return 0;
    }
    Pipeline p(cfg, o.out);
    if (cmd == "gen-data") {
      std::cout << p.gen_data().dump(2) << '\n';
    } else if (cmd == "pretrain") {
      p.pretrain();
    } else if (cmd == "train-reward") {
      p.train_reward();
    } else if (cmd == "rlaf") {
      p.rlaf();
    } else if (cmd == "train-payment") {
      p.train_payment();
    } else if (cmd == "evaluate") {
      print_report(p.evaluate());
    }
    return 0;
  } catch (const MissingPhaseError& e) {
    fail("missing_phase", e.what(), e.phase());
  } catch (const ConfigError& e) {
    fail("config", e.what());
  } catch (const std::exception& e) {
    fail("runtime", e.what());
  }
  return 1;
}
