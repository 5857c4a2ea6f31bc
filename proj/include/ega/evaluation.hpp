#pragma once

// Offline metrics, counterfactual-bid regret and the FLOPs accountant.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ega/aucformer.hpp"
#include "ega/numerics/matrix.hpp"
#include "ega/recformer.hpp"

namespace ega {

// ---- ranking ---------------------------------------------------------------

// Fraction of (positive, negative) pairs ordered correctly, ties counting half.
inline std::optional<double> auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc: scores/labels length mismatch");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0, neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j - 1) + 1.0;  // average 1-based rank
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]] != 0) {
        rank_sum += mid;
        pos += 1;
      } else {
        neg += 1;
      }
    }
    i = j;
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

// |top-k by score ∩ positives| / |positives|; ties in score go to the lower index.
inline std::optional<double> recall_at_k(std::span<const double> scores, std::span<const int> labels,
                                         std::size_t k) {
  if (scores.size() != labels.size()) throw ShapeError("recall_at_k: length mismatch");
  const auto positives = std::count_if(labels.begin(), labels.end(), [](int l) { return l != 0; });
  if (positives == 0) return std::nullopt;
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t hit = 0;
  for (std::size_t i = 0; i < std::min(k, idx.size()); ++i) hit += labels[idx[i]] != 0;
  return static_cast<double>(hit) / static_cast<double>(positives);
}

// ---- expected value -------------------------------------------------------

struct ExpectedValue {
  double ectr = 0.0;  // percent
  double erpm = 0.0;  // currency per mille
};

inline ExpectedValue expected_value_metrics(std::span<const AuctionOutcome> outcomes) {
  ExpectedValue ev;
  if (outcomes.empty()) return ev;
  for (const auto& o : outcomes) {
    for (std::size_t s = 0; s < o.winners.size(); ++s) {
      ev.ectr += o.ctr[s];
      ev.erpm += o.ctr[s] * o.payments[s];
    }
  }
  const double n = static_cast<double>(outcomes.size());
  ev.ectr = ev.ectr / n * 100.0;
  ev.erpm = ev.erpm / n * 1000.0;
  return ev;
}

inline std::optional<double> deviation(double mean_pctr, double realized_ctr) {
  if (!(realized_ctr > 0.0)) return std::nullopt;
  return std::abs(1.0 - mean_pctr / realized_ctr);
}

// ---- incentive compatibility ----------------------------------------------

using Mechanism = std::function<AuctionOutcome(std::span<const double> bids)>;

// Expected utility (v - p) * ctr of `ad` if it holds a slot, else 0.
inline double utility(const AuctionOutcome& o, std::size_t ad, double value) {
  for (std::size_t s = 0; s < o.winners.size(); ++s)
    if (o.winners[s] == ad) return (value - o.payments[s]) * o.ctr[s];
  return 0.0;
}

// {0.2, 0.4, ..., 2.0}
inline std::vector<double> default_gamma_grid() {
  std::vector<double> g;
  for (int j = 1; j <= 10; ++j) g.push_back(0.2 * j);
  return g;
}

struct RegretEstimate {
  double regret = 0.0;  // mean over valuation samples
  std::size_t samples = 0;
  std::vector<double> grid;
  double best_gamma = 1.0;  // maximizer for the last sample
  double truthful_utility = 0.0;  // mean over samples
};

// For each sampled value v: max over gamma of u(v; gamma*b_i) - u(v; b_i), other
// bids fixed. The unperturbed report is always a candidate, so the result is >= 0.
inline RegretEstimate empirical_regret(const Mechanism& mech, std::span<const double> bids,
                                       std::size_t ad, std::span<const double> value_samples,
                                       std::span<const double> grid) {
  if (ad >= bids.size()) throw std::out_of_range("empirical_regret: ad index out of range");
  RegretEstimate r;
  r.grid.assign(grid.begin(), grid.end());
  r.samples = value_samples.size();
  if (value_samples.empty()) return r;
  std::vector<double> b(bids.begin(), bids.end());
  const AuctionOutcome truthful = mech(b);
  std::vector<AuctionOutcome> alt;
  alt.reserve(grid.size());
  for (double g : grid) {
    b[ad] = g * bids[ad];
    alt.push_back(mech(b));
  }
  for (double v : value_samples) {
    const double base = utility(truthful, ad, v);
    double best = 0.0;
    for (std::size_t k = 0; k < grid.size(); ++k) {
      const double gain = utility(alt[k], ad, v) - base;
      if (gain > best) {
        best = gain;
        r.best_gamma = grid[k];
      }
    }
    r.regret += best;
    r.truthful_utility += base;
  }
  r.regret /= static_cast<double>(value_samples.size());
  r.truthful_utility /= static_cast<double>(value_samples.size());
  return r;
}

struct AuctionInstance {
  Mechanism mechanism;
  std::vector<double> bids;
  std::vector<double> values;
};

struct PsiReport {
  std::optional<double> psi;
  std::size_t terms = 0;
  std::size_t skipped = 0;
  double mean_regret = 0.0;  // over all winning-slot ads, skipped ones included
};

inline constexpr double kUtilityFloor = 1e-9;

// Mean of regret/utility over winning-slot ads; ads with utility <= 1e-9 are
// skipped and counted.
inline PsiReport psi_metric(std::span<const AuctionInstance> instances,
                            std::span<const double> grid) {
  PsiReport rep;
  double ratio_sum = 0.0, regret_sum = 0.0;
  std::size_t ads = 0;
  for (const auto& inst : instances) {
    const AuctionOutcome o = inst.mechanism(inst.bids);
    for (std::size_t s = 0; s < o.winners.size(); ++s) {
      const std::size_t i = o.winners[s];
      const double v = inst.values[i];
      const RegretEstimate est =
          empirical_regret(inst.mechanism, inst.bids, i, std::span<const double>(&v, 1), grid);
      regret_sum += est.regret;
      ++ads;
      if (est.truthful_utility <= kUtilityFloor) {
        ++rep.skipped;
        continue;
      }
      ratio_sum += est.regret / est.truthful_utility;
      ++rep.terms;
    }
  }
  if (rep.terms > 0) rep.psi = ratio_sum / static_cast<double>(rep.terms);
  if (ads > 0) rep.mean_regret = regret_sum / static_cast<double>(ads);
  return rep;
}

// Single-slot reference auctions with fixed per-bidder click probabilities.
namespace reference {

inline Mechanism first_price(std::vector<double> ctr) {
  return [ctr = std::move(ctr)](std::span<const double> bids) {
    const auto it = std::max_element(bids.begin(), bids.end());
    const std::size_t w = static_cast<std::size_t>(it - bids.begin());
    return AuctionOutcome{{w}, {bids[w]}, {ctr[w]}};
  };
}

inline Mechanism second_price(std::vector<double> ctr) {
  return [ctr = std::move(ctr)](std::span<const double> bids) {
    const auto it = std::max_element(bids.begin(), bids.end());
    const std::size_t w = static_cast<std::size_t>(it - bids.begin());
    double second = 0.0;
    for (std::size_t j = 0; j < bids.size(); ++j)
      if (j != w) second = std::max(second, bids[j]);
    return AuctionOutcome{{w}, {second}, {ctr[w]}};
  };
}

}  // namespace reference

// ---- FLOPs ------------------------------------------------------------------

namespace flops_model {

inline double block(double l, double d) { return 4 * l * l * d + 24 * l * d * d; }
inline double block2(double l1, double l2, double d) {
  return 4 * l1 * l2 * d + 20 * l1 * d * d + 4 * l2 * d * d;
}
inline double pre(double n, double l, double d) { return n * d + 2 * l * d * d; }
inline double rank(double m_r, double n_r, double l, double d) {
  return m_r * (4 * n_r * (l + 1) * (l + 1) * d + 24 * n_r * (l + 1) * d * d);
}
inline double mca(double n, double m_r, double n_r, double l, double d) {
  return pre(n, l, d) + rank(m_r, n_r, l, d);
}
inline double gcf(double m, double n, double nc, double d) {
  return m * (6 * n * nc * d + 4 * n * nc * d + 24 * n * d * d);
}
inline double mif(double m_k, double n, double l, double nc, double d) {
  return m_k * (n + l) * nc * d;
}
inline double auf(double m_e, double n_a, double k, double d) {
  return m_e * (4 * n_a * n_a * d + 24 * n_a * d * d) +
         m_e * (4 * k * n_a * d + 18 * k * d * d + 4 * n_a * d * d);
}
inline double ega(double m, double m_k, double m_e, double n, double l, double nc, double n_a,
                  double k, double d) {
  return gcf(m, n, nc, d) + mif(m_k, n, l, nc, d) + auf(m_e, n_a, k, d);
}

// Large-N approximation of ega/mca with N_r = alpha*N:
//   2 m_k N L d^2 / (m_r N_r 4 L^2 d)
inline double approx_ratio(double m_k, double m_r, double alpha, double l, double d) {
  return 2 * m_k * l * d * d / (m_r * alpha * 4 * l * l * d);
}

}  // namespace flops_model

struct FlopsRow {
  std::string module;
  double closed_form = 0.0;
  double measured = 0.0;
  std::string note;

  double ratio() const { return closed_form > 0 ? measured / closed_form : 0.0; }
  bool flagged() const { return closed_form > 0 && std::abs(ratio() - 1.0) > 0.10; }
};

struct FlopsReport {
  std::vector<FlopsRow> rows;
  double ega_over_mca_closed = 0.0;
  double approx_ratio = 0.0;
};

struct FlopsSetup {
  RecFormerConfig rec;
  AucFormerConfig auc;
  std::size_t candidates = 500;  // N
  std::size_t behaviors = 64;    // L
  std::size_t ranked = 0;        // N_r for the MCA reference; 0 means alpha*N
  double alpha = 0.033;
  std::uint64_t seed = 1;
};

// Runs forward passes of freshly initialized modules and compares the counted
// matrix-product FLOPs with the closed forms. Weights never leave this function.
inline FlopsReport measure_flops(const FlopsSetup& s) {
  Rng rng(s.seed);
  const std::size_t n = s.candidates, l = s.behaviors, d = s.rec.dim;
  const std::size_t k = s.auc.slots;
  auto random_rows = [&](std::size_t rows) {
    std::normal_distribution<double> g(0.0, 1.0);
    Matrix m(rows, d);
    for (double& x : m.data()) x = g(rng);
    return m;
  };
  ParamStore store;
  RecFormer rec(s.rec);
  rec.init(store, rng);
  AucFormer auc(s.auc);
  auc.init(store, rng);

  FlopsReport rep;
  Tape t;
  Var e_ad = t.constant(random_rows(n));
  Var e_bh = t.constant(random_rows(l));
  Var e_u = t.constant(random_rows(1));

  std::uint64_t ad_stack = 0, usr_stack = 0, fusion = 0;
  {
    // Replays RecFormer::encode with a counter around each part.
    const RecFormerConfig& c = s.rec;
    Var h_ad = e_ad, h_usr = e_bh;
    const auto& layers = rec.ad_layers();
    for (std::size_t i = 0; i < c.depth; ++i) {
      flops::Scope a;
      h_ad = layers[i].forward(t, store, h_ad, false);
      ad_stack += a.elapsed();
    }
    flops::Scope u;
    for (std::size_t i = 0; i < c.depth; ++i) {
      ClusterAttentionLayer usr(std::string(RecFormer::kPrefix) + "usr.l" + std::to_string(i),
                                {c.dim, c.clusters, c.heads});
      h_usr = usr.forward(t, store, h_usr, false);
    }
    usr_stack = u.elapsed();
    flops::Scope whole;
    rec.encode(t, store, e_ad, e_bh, false);
    fusion = whole.elapsed() - ad_stack - usr_stack;
  }
  const double nc = static_cast<double>(s.rec.clusters);
  rep.rows.push_back({"gcf", flops_model::gcf(s.rec.depth, n, nc, d), static_cast<double>(ad_stack),
                      "ad-set stack only; counts the cluster projection (2NN_cd per layer) the closed form omits"});
  rep.rows.push_back({"gcf_behavior", flops_model::gcf(s.rec.depth, l, nc, d),
                      static_cast<double>(usr_stack), "behavior stack, same closed form with N = L"});
  rep.rows.push_back({"mif", flops_model::mif(s.rec.fused_layer_count(), n, l, nc, d),
                      static_cast<double>(fusion),
                      "closed form counts only the attention products; measured includes the projections and feed-forward of each fusion layer"});

  // AucFormer inference: generator over N candidates, evaluator and payment on K.
  std::uint64_t gen = 0, eval = 0;
  {
    Var pctr = t.constant(Matrix(n, 1, 0.1));
    std::vector<double> bids(n, 1.0);
    flops::Scope g;
    auto out = auc.generator().forward(t, store, e_ad, pctr, bids, false);
    gen = g.elapsed();
    const auto y = greedy_select(t.value(out.z));
    Var sel = ad::gather_rows(e_ad, y);
    flops::Scope e;
    Var q = auc.evaluator().forward(t, store, sel, e_u, false);
    auc.payment().forward(t, store, sel, q, std::vector<double>(y.size(), 1.0), false);
    eval = e.elapsed();
  }
  rep.rows.push_back({"auf", flops_model::auf(s.auc.depth, n, k, d), static_cast<double>(gen + eval),
                      "closed form assumes self-attention over the N_a valid ads; the generator here "
                      "attends from K slot tokens to cluster summaries of the ads"});

  const double n_r = s.ranked > 0 ? static_cast<double>(s.ranked) : s.alpha * static_cast<double>(n);
  const double ega_cf = flops_model::ega(s.rec.depth, s.rec.fused_layer_count(), s.auc.depth, n, l, nc,
                                         n, k, d);
  const double mca_cf = flops_model::mca(n, s.rec.depth, n_r, l, d);
  rep.rows.push_back({"ega_total", ega_cf, static_cast<double>(ad_stack + usr_stack + fusion + gen + eval),
                      "sum of the module rows"});
  rep.rows.push_back({"mca_total", mca_cf, 0.0, "closed form only"});
  rep.ega_over_mca_closed = ega_cf / mca_cf;
  rep.approx_ratio = flops_model::approx_ratio(s.rec.fused_layer_count(), s.rec.depth, s.alpha, l, d);
  return rep;
}

}  // namespace ega
