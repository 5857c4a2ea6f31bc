#pragma once

// Slot allocation and pricing over the encoded candidate set: a non-autoregressive
// generator that scores every (ad, slot) pair at once, greedy masked decoding, a
// slate-order-aware click evaluator, a sigmoid-rate payment network and a GSP
// baseline.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ega/numerics/autodiff.hpp"
#include "ega/numerics/nn.hpp"
#include "ega/recformer.hpp"

namespace ega {

struct AucFormerConfig {
  std::size_t slots = 5;  // K
  std::size_t dim = 32;
  std::size_t clusters = 16;
  std::size_t heads = 4;
  std::size_t depth = 2;  // refinement / evaluator layers
  std::size_t hidden1 = 128;
  std::size_t hidden2 = 32;
  double bid_weight_init = 0.0;  // starting w_z

  void validate() const {
    if (slots == 0) throw std::invalid_argument("aucformer: need at least one slot");
    ClusterAttentionShape{dim, clusters, heads}.validate();
  }
};

inline void require_positive_bids(std::span<const double> bids) {
  for (std::size_t i = 0; i < bids.size(); ++i)
    if (!(bids[i] > 0.0) || !std::isfinite(bids[i]))
      throw std::invalid_argument("bid of candidate " + std::to_string(i) + " must be positive, got " +
                                  std::to_string(bids[i]));
}

struct GeneratorOutput {
  Var slot_scores;  // A = H_ad T^T, N x K
  Var logits;       // A plus the bid bias
  Var z;            // column softmax over candidates
  Var log_z;
};

class SlotGenerator {
 public:
  SlotGenerator() = default;
  SlotGenerator(std::string prefix, AucFormerConfig cfg) : prefix_(std::move(prefix)), cfg_(cfg) {
    cfg_.validate();
    for (std::size_t l = 0; l < cfg_.depth; ++l)
      refine_.emplace_back(prefix_ + "/refine.l" + std::to_string(l),
                           ClusterAttentionShape{cfg_.dim, cfg_.clusters, cfg_.heads});
  }

  void init(ParamStore& store, Rng& rng) const {
    store.add(slots_name(), uniform_init(cfg_.slots, cfg_.dim, cfg_.dim, rng));
    store.add(bias_weight_name(), Matrix(1, 1, cfg_.bid_weight_init));
    for (const auto& l : refine_) l.init(store, rng);
  }

  // T: slot tokens cross-attending to the candidate states. K x d.
  Var slot_tokens(Tape& t, ParamStore& store, Var h_ad, bool training) const {
    Var tok = t.param(store, slots_name());
    for (const auto& l : refine_) tok = l.forward_cross(t, store, tok, h_ad, training);
    return tok;
  }

  Var slot_scores(Tape& t, ParamStore& store, Var h_ad, bool training) const {
    return ad::matmul(h_ad, ad::transpose(slot_tokens(t, store, h_ad, training)));
  }

  // Adds e^{w_z} * pctr_j * b_j to every column of `scores` and normalizes each
  // column over the candidates.
  GeneratorOutput allocate(Tape& t, ParamStore& store, Var scores, Var pctr,
                           std::span<const double> bids) const {
    const Matrix& a = t.value(scores);
    const Matrix& q = t.value(pctr);
    if (a.rows() != bids.size() || q.rows() != bids.size() || q.cols() != 1 ||
        a.cols() != cfg_.slots)
      throw ShapeError("generator: scores " + a.shape_str() + ", pctr " + q.shape_str() + ", " +
                       std::to_string(bids.size()) + " bids");
    require_positive_bids(bids);
    Var value = ad::mul(pctr, t.constant(Matrix::col_vector(bids)));
    Var bias = ad::mul_scalar(value, ad::exp(t.param(store, bias_weight_name())));
    GeneratorOutput g;
    g.slot_scores = scores;
    g.logits = ad::add_col(scores, bias);
    Var lt = ad::transpose(g.logits);
    g.log_z = ad::transpose(ad::row_log_softmax(lt));
    g.z = ad::transpose(ad::row_softmax(lt));
    return g;
  }

  GeneratorOutput forward(Tape& t, ParamStore& store, Var h_ad, Var pctr,
                          std::span<const double> bids, bool training) const {
    return allocate(t, store, slot_scores(t, store, h_ad, training), pctr, bids);
  }

  std::string slots_name() const { return prefix_ + "/slots"; }
  std::string bias_weight_name() const { return prefix_ + "/w_z"; }
  const std::string& prefix() const noexcept { return prefix_; }

 private:
  std::string prefix_;
  AucFormerConfig cfg_;
  std::vector<ClusterAttentionLayer> refine_;
};

// Column-softmax with the bid bias on a plain matrix of slot scores. Used by
// mechanisms that re-run allocation under changed bids with T held fixed.
inline Matrix allocation_probabilities(const Matrix& scores, std::span<const double> pctr,
                                       std::span<const double> bids, double bias_weight) {
  require_positive_bids(bids);
  if (scores.rows() != bids.size() || pctr.size() != bids.size())
    throw ShapeError("allocation_probabilities: size mismatch");
  const double s = std::exp(bias_weight);
  Matrix z(scores.rows(), scores.cols());
  for (std::size_t k = 0; k < scores.cols(); ++k) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < scores.rows(); ++j) {
      z(j, k) = scores(j, k) + s * pctr[j] * bids[j];
      mx = std::max(mx, z(j, k));
    }
    double tot = 0.0;
    for (std::size_t j = 0; j < scores.rows(); ++j) tot += (z(j, k) = std::exp(z(j, k) - mx));
    for (std::size_t j = 0; j < scores.rows(); ++j) z(j, k) /= tot;
  }
  return z;
}

// Slot k takes the highest-probability candidate not already placed and not in
// `excluded`; ties go to the lowest index. Returns fewer than K entries only when
// exclusions exhaust the pool.
inline std::vector<std::size_t> greedy_select(const Matrix& z,
                                              std::span<const std::size_t> excluded = {}) {
  const std::size_t n = z.rows(), k = z.cols();
  if (k > n)
    throw std::invalid_argument("greedy_select: " + std::to_string(k) + " slots but only " +
                                std::to_string(n) + " candidates");
  std::vector<char> taken(n, 0);
  for (std::size_t e : excluded)
    if (e < n) taken[e] = 1;
  std::vector<std::size_t> y;
  y.reserve(k);
  for (std::size_t s = 0; s < k; ++s) {
    std::size_t best = n;
    for (std::size_t j = 0; j < n; ++j)
      if (!taken[j] && (best == n || z(j, s) > z(best, s))) best = j;
    if (best == n) break;
    taken[best] = 1;
    y.push_back(best);
  }
  return y;
}

class SlateEvaluator {
 public:
  SlateEvaluator() = default;
  SlateEvaluator(std::string prefix, AucFormerConfig cfg) : prefix_(std::move(prefix)), cfg_(cfg) {
    cfg_.validate();
    input_ = Linear(prefix_ + "/in", 3 * cfg_.dim, cfg_.dim);
    const ClusterAttentionShape shape{cfg_.dim, std::min(cfg_.clusters, cfg_.slots), cfg_.heads};
    for (std::size_t l = 0; l < cfg_.depth; ++l)
      layers_.emplace_back(prefix_ + "/l" + std::to_string(l), shape);
    head_ = Mlp(prefix_ + "/head", {cfg_.dim, cfg_.hidden1, cfg_.hidden2, 1});
  }

  void init(ParamStore& store, Rng& rng) const {
    store.add(slots_name(), uniform_init(cfg_.slots, cfg_.dim, cfg_.dim, rng));
    input_.init(store, rng);
    for (const auto& l : layers_) l.init(store, rng);
    head_.init(store, rng);
  }

  // Click probability per slot for the slate whose ad states are `h_sel`, in slot
  // order. Slates shorter than K use the leading slot embeddings.
  Var forward(Tape& t, ParamStore& store, Var h_sel, Var e_u, bool training) const {
    const std::size_t k = t.value(h_sel).rows();
    if (k == 0 || k > cfg_.slots)
      throw ShapeError("evaluator: slate of " + std::to_string(k) + " ads for " +
                       std::to_string(cfg_.slots) + " slots");
    Var slots = t.param(store, slots_name());
    if (k < cfg_.slots) slots = ad::slice_rows(slots, 0, k);
    Var x = input_.forward(t, store, ad::concat_cols({h_sel, slots, ad::broadcast_rows(e_u, k)}));
    for (const auto& l : layers_) x = l.forward(t, store, x, training);
    return head_.forward(t, store, x, training);
  }

  std::string slots_name() const { return prefix_ + "/slots"; }
  const Mlp& head() const noexcept { return head_; }

 private:
  std::string prefix_;
  AucFormerConfig cfg_;
  Linear input_;
  std::vector<ClusterAttentionLayer> layers_;
  Mlp head_;
};

// Bids of the other winners, in slot order, zero-padded to K-1 entries.
inline Matrix rival_bids(std::span<const double> slate_bids, std::size_t slots) {
  const std::size_t k = slate_bids.size();
  Matrix out(k, slots > 0 ? slots - 1 : 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < k && c < out.cols(); ++j)
      if (j != i) out(i, c++) = slate_bids[j];
  }
  return out;
}

struct PaymentVars {
  Var rate;     // k x 1 in (0,1)
  Var payment;  // rate * bid
};

class PaymentNet {
 public:
  PaymentNet() = default;
  PaymentNet(std::string prefix, AucFormerConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    mlp_ = Mlp(prefix, {cfg_.dim + 1 + (cfg_.slots - 1), cfg_.hidden1, cfg_.hidden2, 1});
  }

  void init(ParamStore& store, Rng& rng) const { mlp_.init(store, rng); }

  PaymentVars forward(Tape& t, ParamStore& store, Var h_sel, Var q, std::span<const double> slate_bids,
                      bool training) const {
    const std::size_t k = t.value(h_sel).rows();
    if (t.value(q).rows() != k || slate_bids.size() != k)
      throw ShapeError("payment: slate size mismatch");
    require_positive_bids(slate_bids);
    Var x = ad::concat_cols({h_sel, q, t.constant(rival_bids(slate_bids, cfg_.slots))});
    Var rate = mlp_.forward(t, store, x, training);
    return {rate, ad::mul(rate, t.constant(Matrix::col_vector(slate_bids)))};
  }

  const Mlp& mlp() const noexcept { return mlp_; }

 private:
  AucFormerConfig cfg_;
  Mlp mlp_;
};

class AucFormer {
 public:
  static constexpr const char* kPrefix = "aucformer/";

  AucFormer() = default;
  explicit AucFormer(AucFormerConfig cfg)
      : cfg_(cfg),
        generator_(std::string(kPrefix) + "generator", cfg),
        evaluator_(std::string(kPrefix) + "evaluator", cfg),
        payment_(std::string(kPrefix) + "payment", cfg) {}

  void init(ParamStore& store, Rng& rng) const {
    generator_.init(store, rng);
    evaluator_.init(store, rng);
    payment_.init(store, rng);
  }

  const AucFormerConfig& config() const noexcept { return cfg_; }
  const SlotGenerator& generator() const noexcept { return generator_; }
  const SlateEvaluator& evaluator() const noexcept { return evaluator_; }
  const PaymentNet& payment() const noexcept { return payment_; }

  static std::string generator_prefix() { return std::string(kPrefix) + "generator"; }
  static std::string evaluator_prefix() { return std::string(kPrefix) + "evaluator"; }
  static std::string payment_prefix() { return std::string(kPrefix) + "payment"; }

 private:
  AucFormerConfig cfg_;
  SlotGenerator generator_;
  SlateEvaluator evaluator_;
  PaymentNet payment_;
};

// Result of one auction: winners in slot order with their payments and the click
// probability the slate assigns to each slot.
struct AuctionOutcome {
  std::vector<std::size_t> winners;
  std::vector<double> payments;
  std::vector<double> ctr;
};

struct GspResult {
  std::vector<std::size_t> winners;
  std::vector<double> payments;
};

// Rank by pctr*bid; slot i pays the next score over its own pctr, capped at its bid.
inline GspResult gsp_allocate(std::span<const double> pctr, std::span<const double> bids,
                              std::size_t slots) {
  if (pctr.size() != bids.size()) throw ShapeError("gsp_allocate: pctr/bid length mismatch");
  require_positive_bids(bids);
  std::vector<std::size_t> order(bids.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return pctr[a] * bids[a] > pctr[b] * bids[b];
  });
  GspResult r;
  const std::size_t k = std::min(slots, order.size());
  for (std::size_t s = 0; s < k; ++s) {
    const std::size_t i = order[s];
    double pay = 0.0;
    if (s + 1 < order.size() && pctr[i] > 0.0) {
      const std::size_t j = order[s + 1];
      pay = std::min(pctr[j] * bids[j] / pctr[i], bids[i]);
    }
    r.winners.push_back(i);
    r.payments.push_back(pay);
  }
  return r;
}

}  // namespace ega
