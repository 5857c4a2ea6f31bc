#pragma once

// A run configuration small enough to push every phase through in seconds.

#include <filesystem>
#include <random>
#include <string>

#include "ega/harness/config.hpp"

namespace tiny {

inline ega::harness::RunConfig run_config(std::uint64_t seed = 11) {
  ega::harness::RunConfig c;
  c.seed = seed;
  auto& w = c.world;
  w.n_ads = 80;
  w.n_users = 12;
  w.pool = 24;
  w.slots = 3;
  w.behaviors = 8;
  w.negatives = 6;
  w.latent_dim = 2;
  w.bins = 4;
  w.position_bias = {0.0, -0.5, -1.0};
  w.train_requests = 40;
  w.test_requests = 12;
  auto& m = c.model;
  m.dim = 8;
  m.clusters = 4;
  m.heads = 2;
  m.depth = 1;
  m.evaluator_depth = 1;
  m.hidden1 = 16;
  m.hidden2 = 8;
  auto& t = c.train;
  t.batch = 4;
  t.pretrain_steps = 4;
  t.reward_steps = 3;
  t.rlaf_steps = 3;
  t.payment_steps = 3;
  t.rlaf_requests = 6;
  t.payment_requests = 6;
  t.psi_requests = 6;
  t.dual_period = 2;
  return c;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& tag) {
  std::random_device rd;
  auto p = std::filesystem::temp_directory_path() / ("ega-" + tag + "-" + std::to_string(rd()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace tiny
