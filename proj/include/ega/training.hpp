#pragma once

// Four training phases over one shared parameter store:
//   pretrain  - set-aware pCTR on exposed + sampled unexposed ads
//   reward    - slate evaluator on exposed ads, embeddings frozen
//   rlaf      - generator policy gradient with marginal-revenue rewards
//   payment   - payment net against revenue with an augmented Lagrangian on regret

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ega/aucformer.hpp"
#include "ega/evaluation.hpp"
#include "ega/feature_store.hpp"
#include "ega/numerics/nn.hpp"
#include "ega/recformer.hpp"

namespace ega {

struct RequestSample {
  std::uint64_t request_id = 0;
  UserId user = 0;
  std::vector<AdId> pool;       // candidate set
  std::vector<AdId> exposed;    // slot order
  std::vector<int> exposed_clicks;
  std::vector<AdId> unexposed;  // popularity-sampled negatives
  std::vector<int> unexposed_clicks;

  void validate(std::size_t slots, std::size_t negatives) const {
    if (exposed.size() != slots || exposed_clicks.size() != slots)
      throw std::invalid_argument("request " + std::to_string(request_id) + ": expected " +
                                  std::to_string(slots) + " exposed ads");
    if (unexposed.size() != negatives || unexposed_clicks.size() != negatives)
      throw std::invalid_argument("request " + std::to_string(request_id) + ": expected " +
                                  std::to_string(negatives) + " unexposed ads");
  }
};

// ---- popularity sampling ------------------------------------------------

inline constexpr double kPopularityExponent = 0.75;

inline std::vector<double> popularity_weights(std::span<const double> counts) {
  std::vector<double> w(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] < 0) throw std::invalid_argument("popularity: negative count");
    w[i] = std::pow(counts[i], kPopularityExponent);
  }
  return w;
}

// Weighted sampling without replacement (exponential-key method): each item gets
// key -log(u)/w and the n smallest keys are taken, so draws follow the sequential
// proportional-to-weight scheme. Zero-weight items are never drawn.
inline std::vector<std::size_t> sample_negatives(std::span<const double> counts, std::size_t n,
                                                 Rng& rng) {
  if (counts.empty()) throw std::invalid_argument("sample_negatives: empty corpus");
  if (n > counts.size())
    throw std::invalid_argument("sample_negatives: requested " + std::to_string(n) +
                                " from a corpus of " + std::to_string(counts.size()));
  const auto w = popularity_weights(counts);
  const auto positive = std::count_if(w.begin(), w.end(), [](double x) { return x > 0; });
  if (static_cast<std::size_t>(positive) < n)
    throw std::invalid_argument("sample_negatives: only " + std::to_string(positive) +
                                " items have positive mass");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::pair<double, std::size_t>> keys;
  keys.reserve(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double r = u(rng);  // drawn for every item so the stream does not depend on w
    if (w[i] > 0) keys.emplace_back(-std::log1p(-r) / w[i], i);
  }
  std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(n), keys.end());
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = keys[i].second;
  return out;
}

// ---- model bundle ---------------------------------------------------------------

class EgaModel {
 public:
  EgaModel(HybridFeatureService features, RecFormerConfig rec, AucFormerConfig auc)
      : features_(std::move(features)), rec_(rec), auc_(auc) {
    if (rec.dim != features_.schema().dim || auc.dim != rec.dim)
      throw std::invalid_argument("model: feature, recformer and aucformer widths differ");
  }

  void init(Rng& rng) {
    features_.init(store_, rng);
    rec_.init(store_, rng);
    auc_.init(store_, rng);
  }

  ParamStore& store() noexcept { return store_; }
  const ParamStore& store() const noexcept { return store_; }
  const HybridFeatureService& features() const noexcept { return features_; }
  const RecFormer& recformer() const noexcept { return rec_; }
  const AucFormer& aucformer() const noexcept { return auc_; }

  // Only tensors under `prefixes` stay trainable.
  void train_only(std::initializer_list<std::string_view> prefixes) {
    store_.freeze_all();
    for (auto p : prefixes) store_.set_frozen(p, false);
  }

 private:
  HybridFeatureService features_;
  RecFormer rec_;
  AucFormer auc_;
  ParamStore store_;
};

struct RequestEncoding {
  Var h_ad;
  Var pctr;
  Var e_u;
};

inline RequestEncoding encode_request(Tape& t, EgaModel& m, UserId user, std::span<const AdId> ads,
                                      bool training) {
  ParamStore& s = m.store();
  auto u = m.features().fetch_user(t, s, user);
  Var e_ad = m.features().embed_ads(t, s, ads);
  auto out = m.recformer().forward(t, s, e_ad, u.e_bhvr, u.e_u, training);
  return {out.h_ad, out.pctr, u.e_u};
}

inline std::vector<AdId> labeled_ads(const RequestSample& r) {
  std::vector<AdId> ads = r.exposed;
  ads.insert(ads.end(), r.unexposed.begin(), r.unexposed.end());
  return ads;
}

inline Matrix labeled_clicks(const RequestSample& r) {
  Matrix y(r.exposed.size() + r.unexposed.size(), 1);
  for (std::size_t i = 0; i < r.exposed.size(); ++i) y(i, 0) = r.exposed_clicks[i];
  for (std::size_t i = 0; i < r.unexposed.size(); ++i) y(r.exposed.size() + i, 0) = r.unexposed_clicks[i];
  return y;
}

// ---- pretraining ----------------------------------------------------------------

// Mean over the batch of the per-sample summed BCE on the K + N_s labeled ads.
// Gradients are accumulated per sample and applied once.
inline double pretrain_step(EgaModel& m, std::span<const RequestSample> batch, Adam& opt) {
  if (batch.empty()) return 0.0;
  ParamStore& s = m.store();
  s.zero_grad();
  const double inv = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& r : batch) {
    Tape t;
    const auto ads = labeled_ads(r);
    auto enc = encode_request(t, m, r.user, ads, true);
    Var loss = ad::bce(enc.pctr, labeled_clicks(r));
    total += t.scalar(loss);
    t.backward(loss, inv);
  }
  opt.step(s, Adam::trainable(s));
  return total * inv;
}

// Loss without updating anything (same formula as pretrain_step).
inline double pretrain_loss(EgaModel& m, std::span<const RequestSample> batch) {
  double total = 0.0;
  for (const auto& r : batch) {
    Tape t;
    auto enc = encode_request(t, m, r.user, labeled_ads(r), false);
    total += t.scalar(ad::bce(enc.pctr, labeled_clicks(r)));
  }
  return batch.empty() ? 0.0 : total / static_cast<double>(batch.size());
}

// ---- reward model ---------------------------------------------------------------

inline Var exposed_slate_ctr(Tape& t, EgaModel& m, const RequestSample& r, bool training) {
  auto enc = encode_request(t, m, r.user, labeled_ads(r), training);
  Var sel = ad::slice_rows(enc.h_ad, 0, r.exposed.size());
  return m.aucformer().evaluator().forward(t, m.store(), sel, enc.e_u, training);
}

inline Matrix exposed_clicks(const RequestSample& r) {
  Matrix y(r.exposed.size(), 1);
  for (std::size_t i = 0; i < r.exposed.size(); ++i) y(i, 0) = r.exposed_clicks[i];
  return y;
}

// BCE of the evaluator on the exposed slate in exposed order. The caller freezes
// the embedding tables; whatever is trainable in the store is updated.
inline double reward_model_step(EgaModel& m, std::span<const RequestSample> batch, Adam& opt) {
  if (batch.empty()) return 0.0;
  ParamStore& s = m.store();
  s.zero_grad();
  const double inv = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& r : batch) {
    Tape t;
    Var loss = ad::bce(exposed_slate_ctr(t, m, r, true), exposed_clicks(r));
    total += t.scalar(loss);
    t.backward(loss, inv);
  }
  opt.step(s, Adam::trainable(s));
  return total * inv;
}

inline double reward_model_loss(EgaModel& m, std::span<const RequestSample> batch) {
  double total = 0.0;
  for (const auto& r : batch) {
    Tape t;
    total += t.scalar(ad::bce(exposed_slate_ctr(t, m, r, false), exposed_clicks(r)));
  }
  return batch.empty() ? 0.0 : total / static_cast<double>(batch.size());
}

// ---- frozen request cache -------------------------------------------------------

// Everything downstream phases need from the frozen encoder for one request.
struct CachedRequest {
  std::uint64_t request_id = 0;
  std::vector<AdId> ads;
  Matrix h_ad;  // N x d
  Matrix e_u;   // 1 x d
  std::vector<double> pctr;
  std::vector<double> bids;
  std::vector<double> values;
};

inline CachedRequest cache_request(EgaModel& m, const RequestSample& r) {
  Tape t;
  auto enc = encode_request(t, m, r.user, r.pool, false);
  CachedRequest c;
  c.request_id = r.request_id;
  c.ads = r.pool;
  c.h_ad = t.value(enc.h_ad);
  c.e_u = t.value(enc.e_u);
  c.pctr = t.value(enc.pctr).data();
  for (AdId a : r.pool) {
    const auto& rec = m.features().ad(a);
    c.bids.push_back(rec.bid);
    c.values.push_back(rec.private_value);
  }
  return c;
}

inline Matrix gather(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(m.row(rows[i]).begin(), m.row(rows[i]).end(), out.row(i).begin());
  return out;
}

// Plain-value inference helpers over a cached request.
class FrozenAuction {
 public:
  FrozenAuction(EgaModel& m, const CachedRequest& c) : m_(m), c_(c) {
    Tape t;
    scores_ = t.value(m.aucformer().generator().slot_scores(t, m.store(), t.constant(c.h_ad), false));
    bias_weight_ = m.store().value(m.aucformer().generator().bias_weight_name())(0, 0);
  }

  Matrix allocation(std::span<const double> bids) const {
    return allocation_probabilities(scores_, c_.pctr, bids, bias_weight_);
  }

  std::vector<double> slate_ctr(std::span<const std::size_t> slate) const {
    if (slate.empty()) return {};
    Tape t;
    return t.value(m_.aucformer().evaluator().forward(t, m_.store(), t.constant(gather(c_.h_ad, slate)),
                                                      t.constant(c_.e_u), false))
        .data();
  }

  std::vector<double> payment_rates(std::span<const std::size_t> slate, std::span<const double> q,
                                    std::span<const double> slate_bids) const {
    if (slate.empty()) return {};
    Tape t;
    auto p = m_.aucformer().payment().forward(t, m_.store(), t.constant(gather(c_.h_ad, slate)),
                                              t.constant(Matrix::col_vector(q)), slate_bids, false);
    return t.value(p.rate).data();
  }

  // Generator + greedy decoding + evaluator + payment under the given bids.
  AuctionOutcome run(std::span<const double> bids) const {
    AuctionOutcome o;
    o.winners = greedy_select(allocation(bids));
    o.ctr = slate_ctr(o.winners);
    std::vector<double> sb;
    for (auto i : o.winners) sb.push_back(bids[i]);
    const auto rate = payment_rates(o.winners, o.ctr, sb);
    for (std::size_t s = 0; s < rate.size(); ++s) o.payments.push_back(rate[s] * sb[s]);
    return o;
  }

  // GSP on the set-aware pCTRs, slate replayed through the evaluator.
  AuctionOutcome run_gsp(std::span<const double> bids) const {
    const auto g = gsp_allocate(c_.pctr, bids, m_.aucformer().config().slots);
    return {g.winners, g.payments, slate_ctr(g.winners)};
  }

  Mechanism mechanism() const {
    return [this](std::span<const double> b) { return run(b); };
  }
  Mechanism gsp_mechanism() const {
    return [this](std::span<const double> b) { return run_gsp(b); };
  }

  const Matrix& slot_scores() const noexcept { return scores_; }
  const CachedRequest& request() const noexcept { return c_; }

 private:
  EgaModel& m_;
  const CachedRequest& c_;
  Matrix scores_;
  double bias_weight_ = 0.0;
};

// ---- RLAF -----------------------------------------------------------------------

using SlateCtr = std::function<std::vector<double>(std::span<const std::size_t>)>;

struct RlafRewards {
  std::vector<std::size_t> slate;
  std::vector<double> rewards;  // per slot
  double revenue = 0.0;         // sum of bid * ctr over the slate
};

inline double slate_value(std::span<const std::size_t> slate, std::span<const double> bids,
                          const SlateCtr& ctr) {
  if (slate.empty()) return 0.0;
  const auto q = ctr(slate);
  double v = 0.0;
  for (std::size_t s = 0; s < slate.size(); ++s) v += bids[slate[s]] * q[s];
  return v;
}

// r_i = value(Y) - value(Y without ad y_i, re-decoded greedily and re-scored).
inline RlafRewards compute_rlaf_rewards(const Matrix& z, std::span<const double> bids,
                                        const SlateCtr& ctr) {
  RlafRewards r;
  r.slate = greedy_select(z);
  r.revenue = slate_value(r.slate, bids, ctr);
  for (std::size_t i = 0; i < r.slate.size(); ++i) {
    const std::size_t ex[1] = {r.slate[i]};
    const auto alt = greedy_select(z, ex);
    r.rewards.push_back(r.revenue - slate_value(alt, bids, ctr));
  }
  return r;
}

struct RlafStats {
  double loss = 0.0;
  double mean_reward = 0.0;
  double mean_revenue = 0.0;
};

// -sum_i r_i log z_{y_i, i} for one request.
inline Var rlaf_objective(Var log_z, std::span<const std::size_t> slate, std::span<const double> rewards) {
  Tape& t = *log_z.tape;
  const Matrix& lz = t.value(log_z);
  Matrix weight(lz.rows(), lz.cols());
  for (std::size_t i = 0; i < slate.size(); ++i) weight(slate[i], i) = rewards[i];
  return ad::scale(ad::sum(ad::mul(log_z, t.constant(std::move(weight)))), -1.0);
}

// -mean over requests of sum_i r_i log z_{y_i, i}; only trainable generator
// tensors move.
inline RlafStats rlaf_step(EgaModel& m, std::span<const CachedRequest> batch, Adam& opt) {
  RlafStats st;
  if (batch.empty()) return st;
  ParamStore& s = m.store();
  s.zero_grad();
  const double inv = 1.0 / static_cast<double>(batch.size());
  std::size_t nr = 0;
  for (const auto& c : batch) {
    FrozenAuction fa(m, c);
    Tape t;
    auto g = m.aucformer().generator().forward(t, s, t.constant(c.h_ad),
                                               t.constant(Matrix::col_vector(c.pctr)), c.bids, true);
    SlateCtr ctr = [&](std::span<const std::size_t> y) { return fa.slate_ctr(y); };
    const auto rw = compute_rlaf_rewards(t.value(g.z), c.bids, ctr);
    for (double r : rw.rewards) st.mean_reward += r;
    nr += rw.rewards.size();
    Var loss = rlaf_objective(g.log_z, rw.slate, rw.rewards);
    st.loss += t.scalar(loss) * inv;
    st.mean_revenue += rw.revenue * inv;
    t.backward(loss, inv);
  }
  if (nr > 0) st.mean_reward /= static_cast<double>(nr);
  opt.step(s, Adam::trainable(s));
  return st;
}

// ---- payment --------------------------------------------------------------------

// Per-ad multipliers for the regret constraint, updated by projected ascent.
struct LagrangianState {
  double rho = 1.0;
  std::size_t period = 1;
  std::map<AdId, double> lambda;
  std::map<AdId, std::pair<double, std::size_t>> pending;
  std::size_t steps = 0;

  double multiplier(AdId a) const {
    auto it = lambda.find(a);
    return it == lambda.end() ? 0.0 : it->second;
  }
  void observe(AdId a, double regret) {
    auto& p = pending[a];
    p.first += regret;
    p.second += 1;
  }
  // Call once per training step; applies lambda <- max(0, lambda + rho*regret)
  // with the mean regret observed since the last update, every `period` steps.
  void end_step() {
    if (++steps % std::max<std::size_t>(period, 1) != 0) return;
    for (const auto& [a, p] : pending) dual_update(a, p.first / static_cast<double>(p.second));
    pending.clear();
  }
  void dual_update(AdId a, double regret) {
    if (regret < 0) throw std::invalid_argument("dual_update: negative regret");
    double& l = lambda[a];
    l = std::max(0.0, l + rho * regret);
  }
};

struct PaymentStats {
  double loss = 0.0;
  double revenue = 0.0;      // mean over requests of sum p*q
  double mean_regret = 0.0;  // mean over winning ads
  double mean_rate = 0.0;
};

// Best misreport of the ad in `slot` of `base`: returns the gain, the gamma and
// the alternative outcome (winners empty when no gain).
struct Misreport {
  double gain = 0.0;
  double gamma = 1.0;
  AuctionOutcome outcome;
  std::vector<double> bids;
};

inline Misreport best_misreport(const FrozenAuction& fa, const AuctionOutcome& base,
                                std::size_t slot, std::span<const double> grid) {
  const auto& c = fa.request();
  const std::size_t ad_idx = base.winners[slot];
  const double v = c.values[ad_idx];
  const double u = utility(base, ad_idx, v);
  Misreport best;
  std::vector<double> b = c.bids;
  for (double g : grid) {
    b[ad_idx] = g * c.bids[ad_idx];
    AuctionOutcome alt = fa.run(b);
    const double gain = utility(alt, ad_idx, v) - u;
    if (gain > best.gain) {
      best.gain = gain;
      best.gamma = g;
      best.outcome = std::move(alt);
      best.bids = b;
    }
  }
  return best;
}

// loss = -mean_requests( sum p q - sum lambda*tgt - rho/2 sum tgt^2 ), with tgt the
// regret of each winner at its best grid misreport, differentiated through both
// the truthful and the misreported payment.
inline PaymentStats payment_step(EgaModel& m, std::span<const CachedRequest> batch, Adam& opt,
                                 LagrangianState& lag, std::span<const double> grid) {
  PaymentStats st;
  if (batch.empty()) return st;
  ParamStore& s = m.store();
  s.zero_grad();
  const PaymentNet& pay = m.aucformer().payment();
  const double inv = 1.0 / static_cast<double>(batch.size());
  std::size_t winners = 0;
  for (const auto& c : batch) {
    FrozenAuction fa(m, c);
    const AuctionOutcome base = fa.run(c.bids);
    if (base.winners.empty()) continue;
    Tape t;
    std::vector<double> sb;
    for (auto i : base.winners) sb.push_back(c.bids[i]);
    const Matrix q = Matrix::col_vector(base.ctr);
    auto pv = pay.forward(t, s, t.constant(gather(c.h_ad, base.winners)), t.constant(q), sb, true);
    Var revenue = ad::sum(ad::mul(pv.payment, t.constant(q)));
    st.revenue += t.scalar(revenue) * inv;
    Var penalty = t.constant(Matrix(1, 1));
    for (std::size_t k = 0; k < base.winners.size(); ++k) {
      const std::size_t i = base.winners[k];
      const AdId id = c.ads[i];
      st.mean_rate += t.value(pv.rate)(k, 0);
      const Misreport mr = best_misreport(fa, base, k, grid);
      lag.observe(id, mr.gain);
      st.mean_regret += mr.gain;
      ++winners;
      if (mr.gain <= 0.0) continue;
      const double v = c.values[i];
      // truthful utility (v - rate*b) q on the tape
      Var u0 = ad::scale(ad::add_scalar(ad::scale(ad::slice_rows(pv.rate, k, 1), -c.bids[i]), v),
                         base.ctr[k]);
      Var u1 = t.constant(Matrix(1, 1));
      const auto& w = mr.outcome.winners;
      if (auto it = std::find(w.begin(), w.end(), i); it != w.end()) {
        const std::size_t pos = static_cast<std::size_t>(it - w.begin());
        std::vector<double> ab;
        for (auto j : w) ab.push_back(mr.bids[j]);
        auto alt = pay.forward(t, s, t.constant(gather(c.h_ad, w)),
                               t.constant(Matrix::col_vector(mr.outcome.ctr)), ab, false);
        u1 = ad::scale(ad::add_scalar(ad::scale(ad::slice_rows(alt.rate, pos, 1), -mr.bids[i]), v),
                       mr.outcome.ctr[pos]);
      }
      Var tgt = ad::sub(u1, u0);
      penalty = ad::add(penalty, ad::add(ad::scale(tgt, lag.multiplier(id)),
                                         ad::scale(ad::mul(tgt, tgt), 0.5 * lag.rho)));
    }
    Var loss = ad::scale(ad::sub(revenue, penalty), -1.0);
    st.loss += t.scalar(loss) * inv;
    t.backward(loss, inv);
  }
  if (winners > 0) {
    st.mean_regret /= static_cast<double>(winners);
    st.mean_rate /= static_cast<double>(winners);
  }
  opt.step(s, Adam::trainable(s));
  lag.end_step();
  return st;
}

}  // namespace ega
