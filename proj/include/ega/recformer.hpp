#pragma once

// Cluster attention: N query tokens attend to N_c cluster-level keys/values built
// by content-adaptive soft clustering of the source tokens. Stacked per sequence
// (ad set, behavior sequence) with interval cross-attention between the two, and a
// pCTR head over the fused ad states.

#include <cmath>
#include <cstddef>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ega/numerics/autodiff.hpp"
#include "ega/numerics/nn.hpp"

namespace ega {

struct ClusterAttentionShape {
  std::size_t dim = 32;
  std::size_t clusters = 16;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;

  void validate() const {
    if (dim == 0) throw std::invalid_argument("cluster attention: dim must be positive");
    if (clusters == 0) throw std::invalid_argument("cluster attention: need at least one cluster");
    if (heads == 0 || dim % heads != 0)
      throw std::invalid_argument("cluster attention: dim " + std::to_string(dim) +
                                  " not divisible by head count " + std::to_string(heads));
  }
};

// Cluster-level keys and values plus the intermediates tests want to inspect.
struct ClusterSummary {
  Var agg_q, agg_k, agg_v;  // N_c x d
  Var gate_k, gate_v;       // N_c x 1
  Var keys, values;         // N_c x d
};

class ClusterAttentionLayer {
 public:
  ClusterAttentionLayer() = default;
  ClusterAttentionLayer(std::string prefix, ClusterAttentionShape shape)
      : prefix_(std::move(prefix)), shape_(shape) {
    shape_.validate();
    const std::size_t d = shape_.dim;
    qkv_ = Linear(prefix_ + ".qkv", d, 3 * d);
    qkv_act_ = DiceUnit(prefix_ + ".qkv_act", 3 * d);
    gate_k_ = Linear(prefix_ + ".gate_k", shape_.clusters, 1);
    gate_v_ = Linear(prefix_ + ".gate_v", shape_.clusters, 1);
    key_tf_ = Linear(prefix_ + ".key_tf", d, d);
    value_tf_ = Linear(prefix_ + ".value_tf", d, d);
    out_ = Linear(prefix_ + ".out", d, d);
    out_act_ = DiceUnit(prefix_ + ".out_act", d);
    ln1_ = LayerNorm(prefix_ + ".ln1", d);
    ffn1_ = Linear(prefix_ + ".ffn1", d, shape_.ffn_mult * d);
    ffn_act_ = DiceUnit(prefix_ + ".ffn_act", shape_.ffn_mult * d);
    ffn2_ = Linear(prefix_ + ".ffn2", shape_.ffn_mult * d, d);
    ln2_ = LayerNorm(prefix_ + ".ln2", d);
  }

  void init(ParamStore& store, Rng& rng) const {
    qkv_.init(store, rng);
    qkv_act_.init(store);
    store.add(cluster_weight(), uniform_init(shape_.dim, shape_.clusters, shape_.dim, rng));
    gate_k_.init(store, rng);
    gate_v_.init(store, rng);
    key_tf_.init(store, rng);
    value_tf_.init(store, rng);
    out_.init(store, rng);
    out_act_.init(store);
    ln1_.init(store);
    ffn1_.init(store, rng);
    ffn_act_.init(store);
    ffn2_.init(store, rng);
    ln2_.init(store);
  }

  // S = row_softmax(h . W_c): soft assignment of each token to N_c clusters.
  Var cluster_matrix(Tape& t, ParamStore& store, Var h) const {
    return ad::row_softmax(ad::matmul(h, t.param(store, cluster_weight())));
  }

  // Q, K, V are the projected tokens; s_q / s_kv their cluster assignments.
  ClusterSummary aggregate(Tape& t, ParamStore& store, Var q, Var k, Var v, Var s_q,
                           Var s_kv) const {
    ClusterSummary c;
    Var wq = ad::normalize_cols(s_q);
    Var wkv = s_q.id == s_kv.id ? wq : ad::normalize_cols(s_kv);
    Var wq_t = ad::transpose(wq);
    Var wkv_t = wq.id == wkv.id ? wq_t : ad::transpose(wkv);
    c.agg_q = ad::matmul(wq_t, q);
    c.agg_k = ad::matmul(wkv_t, k);
    c.agg_v = ad::matmul(wkv_t, v);
    // Cross-wired as written: the key gate reads query/value affinity and vice versa.
    c.gate_k = ad::sigmoid(gate_k_.forward(t, store, ad::matmul(c.agg_q, ad::transpose(c.agg_v))));
    c.gate_v = ad::sigmoid(gate_v_.forward(t, store, ad::matmul(c.agg_q, ad::transpose(c.agg_k))));
    c.keys = mix(key_tf_.forward(t, store, c.agg_q), key_tf_.forward(t, store, c.agg_k), c.gate_k);
    c.values =
        mix(value_tf_.forward(t, store, c.agg_q), value_tf_.forward(t, store, c.agg_v), c.gate_v);
    return c;
  }

  // Multi-head attention of N queries over N_c cluster keys/values, heads
  // concatenated, then the output projection with Dice.
  Var attend(Tape& t, ParamStore& store, Var q, Var keys, Var values, bool training) const {
    const std::size_t dh = shape_.dim / shape_.heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> heads;
    heads.reserve(shape_.heads);
    for (std::size_t h = 0; h < shape_.heads; ++h) {
      Var qh = shape_.heads == 1 ? q : ad::slice_cols(q, h * dh, dh);
      Var kh = shape_.heads == 1 ? keys : ad::slice_cols(keys, h * dh, dh);
      Var vh = shape_.heads == 1 ? values : ad::slice_cols(values, h * dh, dh);
      Var w = ad::row_softmax(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv));
      heads.push_back(ad::matmul(w, vh));
    }
    Var cat = shape_.heads == 1 ? heads.front() : ad::concat_cols(heads);
    return out_act_.forward(t, store, out_.forward(t, store, cat), training);
  }

  // Self mode: queries, keys and values all come from `h`.
  Var forward(Tape& t, ParamStore& store, Var h, bool training) const {
    const Matrix& hv = t.value(h);
    check_width(hv);
    if (hv.rows() == 0) return h;
    Var qkv = qkv_act_.forward(t, store, qkv_.forward(t, store, h), training);
    const std::size_t d = shape_.dim;
    Var q = ad::slice_cols(qkv, 0, d);
    Var k = ad::slice_cols(qkv, d, d);
    Var v = ad::slice_cols(qkv, 2 * d, d);
    Var s = cluster_matrix(t, store, h);
    ClusterSummary c = aggregate(t, store, q, k, v, s, s);
    return finish(t, store, h, attend(t, store, q, c.keys, c.values, training), training);
  }

  // Cross mode: queries from `h`, keys/values from `source`. An empty source
  // leaves `h` untouched.
  Var forward_cross(Tape& t, ParamStore& store, Var h, Var source, bool training) const {
    const Matrix& hv = t.value(h);
    const Matrix& sv = t.value(source);
    check_width(hv);
    check_width(sv);
    if (hv.rows() == 0 || sv.rows() == 0) return h;
    const std::size_t d = shape_.dim;
    Var w = t.param(store, qkv_.w());
    Var b = t.param(store, qkv_.b());
    Var q = qkv_act_.forward_range(
        t, store, ad::linear(h, ad::slice_cols(w, 0, d), ad::slice_cols(b, 0, d)), 0, training);
    Var kv = qkv_act_.forward_range(
        t, store, ad::linear(source, ad::slice_cols(w, d, 2 * d), ad::slice_cols(b, d, 2 * d)), d,
        training);
    Var k = ad::slice_cols(kv, 0, d);
    Var v = ad::slice_cols(kv, d, d);
    ClusterSummary c = aggregate(t, store, q, k, v, cluster_matrix(t, store, h),
                                 cluster_matrix(t, store, source));
    return finish(t, store, h, attend(t, store, q, c.keys, c.values, training), training);
  }

  const std::string& prefix() const noexcept { return prefix_; }
  const ClusterAttentionShape& shape() const noexcept { return shape_; }
  std::string cluster_weight() const { return prefix_ + ".cluster.w"; }
  const Linear& qkv() const noexcept { return qkv_; }
  const Linear& gate_k() const noexcept { return gate_k_; }
  const Linear& gate_v() const noexcept { return gate_v_; }
  const Linear& key_transform() const noexcept { return key_tf_; }
  const Linear& value_transform() const noexcept { return value_tf_; }
  const Linear& out() const noexcept { return out_; }
  const Linear& ffn1() const noexcept { return ffn1_; }
  const Linear& ffn2() const noexcept { return ffn2_; }

 private:
  static Var mix(Var from_q, Var from_other, Var gate) {
    return ad::add(ad::mul_col(from_q, gate), ad::mul_col(from_other, ad::one_minus(gate)));
  }

  void check_width(const Matrix& m) const {
    if (m.cols() != shape_.dim)
      throw ShapeError(prefix_ + ": expected width " + std::to_string(shape_.dim) + ", got " +
                       m.shape_str());
  }

  // Residual + norm around attention, then around the feed-forward block.
  Var finish(Tape& t, ParamStore& store, Var h, Var attn, bool training) const {
    Var x = ln1_.forward(t, store, ad::add(h, attn));
    Var f = ffn2_.forward(
        t, store, ffn_act_.forward(t, store, ffn1_.forward(t, store, x), training));
    return ln2_.forward(t, store, ad::add(x, f));
  }

  std::string prefix_;
  ClusterAttentionShape shape_;
  Linear qkv_;
  DiceUnit qkv_act_;
  Linear gate_k_, gate_v_;
  Linear key_tf_, value_tf_;
  Linear out_;
  DiceUnit out_act_;
  LayerNorm ln1_;
  Linear ffn1_;
  DiceUnit ffn_act_;
  Linear ffn2_;
  LayerNorm ln2_;
};

// Standard transformer block with full N x N self-attention. Only used as the
// quadratic-cost reference when measuring complexity.
class FullAttentionBlock {
 public:
  FullAttentionBlock(std::string prefix, std::size_t dim, std::size_t heads)
      : dim_(dim), heads_(heads) {
    if (heads == 0 || dim % heads != 0)
      throw std::invalid_argument("full attention: dim not divisible by heads");
    qkv_ = Linear(prefix + ".qkv", dim, 3 * dim);
    out_ = Linear(prefix + ".out", dim, dim);
    ffn1_ = Linear(prefix + ".ffn1", dim, 4 * dim);
    ffn2_ = Linear(prefix + ".ffn2", 4 * dim, dim);
    ln1_ = LayerNorm(prefix + ".ln1", dim);
    ln2_ = LayerNorm(prefix + ".ln2", dim);
  }

  void init(ParamStore& store, Rng& rng) const {
    qkv_.init(store, rng);
    out_.init(store, rng);
    ffn1_.init(store, rng);
    ffn2_.init(store, rng);
    ln1_.init(store);
    ln2_.init(store);
  }

  Var forward(Tape& t, ParamStore& store, Var h) const {
    Var qkv = qkv_.forward(t, store, h);
    const std::size_t dh = dim_ / heads_;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> heads;
    for (std::size_t i = 0; i < heads_; ++i) {
      Var q = ad::slice_cols(qkv, i * dh, dh);
      Var k = ad::slice_cols(qkv, dim_ + i * dh, dh);
      Var v = ad::slice_cols(qkv, 2 * dim_ + i * dh, dh);
      heads.push_back(
          ad::matmul(ad::row_softmax(ad::scale(ad::matmul(q, ad::transpose(k)), inv)), v));
    }
    Var x = ln1_.forward(t, store, ad::add(h, out_.forward(t, store, ad::concat_cols(heads))));
    Var f = ffn2_.forward(t, store, ad::sigmoid(ffn1_.forward(t, store, x)));
    return ln2_.forward(t, store, ad::add(x, f));
  }

 private:
  std::size_t dim_, heads_;
  Linear qkv_, out_, ffn1_, ffn2_;
  LayerNorm ln1_, ln2_;
};

struct RecFormerConfig {
  std::size_t depth = 2;           // GCF layers per stack
  std::size_t fusion_interval = 1;  // a fusion step every this many layers
  std::size_t dim = 32;
  std::size_t clusters = 16;
  std::size_t heads = 4;
  bool fusion = true;  // false disables the interval cross-attention

  void validate() const {
    ClusterAttentionShape{dim, clusters, heads}.validate();
    if (fusion_interval == 0) throw std::invalid_argument("recformer: fusion interval must be >= 1");
  }

  // 1-based layer indices after which fusion runs: every interval-th layer, and
  // always the last one.
  std::vector<std::size_t> fusion_layers() const {
    std::set<std::size_t> s;
    if (depth == 0) return {};
    for (std::size_t l = fusion_interval; l <= depth; l += fusion_interval) s.insert(l);
    s.insert(depth);
    return {s.begin(), s.end()};
  }
  std::size_t fused_layer_count() const {
    return depth == 0 ? 0 : (depth + fusion_interval - 1) / fusion_interval;
  }
};

struct RecFormerOutput {
  Var h_ad;   // N x d
  Var h_usr;  // L x d
  Var pctr;   // N x 1
};

class RecFormer {
 public:
  static constexpr const char* kPrefix = "recformer/";
  static constexpr std::size_t kHidden1 = 128;
  static constexpr std::size_t kHidden2 = 32;

  RecFormer() = default;
  explicit RecFormer(RecFormerConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const ClusterAttentionShape shape{cfg_.dim, cfg_.clusters, cfg_.heads};
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      ad_layers_.emplace_back(std::string(kPrefix) + "ad.l" + std::to_string(l), shape);
      usr_layers_.emplace_back(std::string(kPrefix) + "usr.l" + std::to_string(l), shape);
    }
    std::size_t j = 0;
    for (std::size_t l : cfg_.fusion_layers()) {
      (void)l;
      context_.emplace_back(std::string(kPrefix) + "ctx.f" + std::to_string(j), shape);
      target_.emplace_back(std::string(kPrefix) + "tgt.f" + std::to_string(j), shape);
      ++j;
    }
    ctr_ = Mlp(std::string(kPrefix) + "ctr", {2 * cfg_.dim, kHidden1, kHidden2, 1});
  }

  void init(ParamStore& store, Rng& rng) const {
    for (const auto& l : ad_layers_) l.init(store, rng);
    for (const auto& l : usr_layers_) l.init(store, rng);
    for (const auto& l : context_) l.init(store, rng);
    for (const auto& l : target_) l.init(store, rng);
    ctr_.init(store, rng);
  }

  // Independent self-attention stacks, with context attention (behaviors query
  // ads) then target attention (ads query behaviors) after each fusion layer.
  std::pair<Var, Var> encode(Tape& t, ParamStore& store, Var e_ad, Var e_bhvr,
                             bool training) const {
    Var h_ad = e_ad, h_usr = e_bhvr;
    const auto fuse_at = cfg_.fusion_layers();
    std::size_t next = 0;
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      h_ad = ad_layers_[l].forward(t, store, h_ad, training);
      h_usr = usr_layers_[l].forward(t, store, h_usr, training);
      if (next < fuse_at.size() && fuse_at[next] == l + 1) {
        if (cfg_.fusion) {
          h_usr = context_[next].forward_cross(t, store, h_usr, h_ad, training);
          h_ad = target_[next].forward_cross(t, store, h_ad, h_usr, training);
        }
        ++next;
      }
    }
    return {h_ad, h_usr};
  }

  Var ctr_head(Tape& t, ParamStore& store, Var h_ad, Var e_u, bool training) const {
    const std::size_t n = t.value(h_ad).rows();
    return ctr_.forward(t, store, ad::concat_cols({h_ad, ad::broadcast_rows(e_u, n)}), training);
  }

  RecFormerOutput forward(Tape& t, ParamStore& store, Var e_ad, Var e_bhvr, Var e_u,
                          bool training) const {
    auto [h_ad, h_usr] = encode(t, store, e_ad, e_bhvr, training);
    return {h_ad, h_usr, ctr_head(t, store, h_ad, e_u, training)};
  }

  const RecFormerConfig& config() const noexcept { return cfg_; }
  const std::vector<ClusterAttentionLayer>& ad_layers() const noexcept { return ad_layers_; }
  const Mlp& ctr() const noexcept { return ctr_; }

 private:
  RecFormerConfig cfg_;
  std::vector<ClusterAttentionLayer> ad_layers_, usr_layers_, context_, target_;
  Mlp ctr_;
};

}  // namespace ega
