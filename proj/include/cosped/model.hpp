#pragma once

// The victim: a small decoder-only transformer with learned absolute
// positional embeddings, pre-norm residual blocks, GELU feed-forward, and an
// embedding-level injection point for soft prompts (prompt rows occupy
// positions 0..K-1; real tokens start at position K).
//
// Two forward implementations exist on purpose:
//
//   * The tape path (forward / forward_stacked / forward_with_soft_prompt)
//     builds an autodiff graph. Training and anything needing gradients goes
//     through here. Batched calls stack sequences row-wise so the expensive
//     projections run as a handful of large matrix products.
//
//   * InferenceSession is a plain-double KV-cache path for token-by-token
//     generation, roughly two orders of magnitude lighter per step than
//     re-running the tape forward. The two paths are cross-checked against
//     each other in the test suite and must stay numerically interchangeable.
//
// Multi-head attention stores per-head projection matrices (d×dh per head)
// rather than fused d×d weights. This removes any need for column slicing in
// the autodiff engine: every head is an ordinary matmul, and head outputs
// recombine by summing per-head output projections.

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cosped/common.hpp"
#include "cosped/corpus.hpp"
#include "cosped/optim.hpp"
#include "cosped/tensor.hpp"

namespace cosped {

struct ModelConfig {
  int vocab_size = 256;
  int model_dim = 64;
  int layers = 2;
  int heads = 2;
  int ff_dim = 256;
  int max_context = 256;
  std::uint64_t seed = 42;

  int head_dim() const { return model_dim / heads; }

  void validate() const {
    if (vocab_size < 2) throw std::invalid_argument("ModelConfig: vocab_size must be >= 2");
    if (model_dim < 2 || layers < 1 || heads < 1 || ff_dim < 1 || max_context < 2)
      throw std::invalid_argument("ModelConfig: dimensions must be positive");
    if (model_dim % heads != 0)
      throw std::invalid_argument("ModelConfig: model_dim must be divisible by heads");
  }
};

// Trainable soft prompt: K rows of model_dim, prepended at the embedding
// level while the victim's own weights stay untouched.
struct SoftPrompt {
  Tensor z;  // K×d leaf, requires_grad
  int rows() const { return z.valid() ? z.shape()[0] : 0; }
  int dim() const { return z.valid() ? z.shape()[1] : 0; }
};

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  std::vector<Tensor> wq, wk, wv;  // per head: d×dh
  std::vector<Tensor> bq, bk, bv;  // per head: dh
  std::vector<Tensor> wo;          // per head: dh×d
  Tensor bo;                       // d
  Tensor ln2_gain, ln2_bias;
  Tensor w_ff1, b_ff1;  // d×ff, ff
  Tensor w_ff2, b_ff2;  // ff×d, d
};

// Substitute one layer's feed-forward output matrix during a forward pass.
// This is how the rank-one editing defense differentiates through
// W + u vᵀ without touching the stored (frozen) weights.
struct ForwardOverride {
  int layer = -1;  // -1: no override
  Tensor w_ff2;
};

// Gold-token log-probabilities over a suffix, plus the model's argmax
// prediction at each of those positions (feeds mispredict bookkeeping).
struct SuffixEvaluation {
  Tensor gold_log_probs;       // k_S, values in [log(1e-12), 0]
  std::vector<int> predicted;  // argmax token per suffix position
};

class VictimModel {
 public:
  VictimModel() = default;

  static VictimModel init(const ModelConfig& cfg) {
    cfg.validate();
    VictimModel m;
    m.cfg_ = cfg;
    Rng rng(derive_seed(cfg.seed, "model-init"));
    const int d = cfg.model_dim, dh = cfg.head_dim(), V = cfg.vocab_size;
    const double s = 0.02;
    // Residual-branch output projections get the 1/sqrt(2L) shrink so the
    // residual stream's variance stays flat across depth at init.
    const double s_res = s / std::sqrt(2.0 * cfg.layers);

    auto normal_leaf = [&](std::vector<int> shape, double stddev) {
      std::size_t n = 1;
      for (int dim : shape) n *= static_cast<std::size_t>(dim);
      std::vector<double> vals(n);
      for (auto& v : vals) v = rng.normal(0.0, stddev);
      return Tensor::leaf(std::move(shape), std::move(vals), /*requires_grad=*/true);
    };
    auto const_leaf = [&](std::vector<int> shape, double fill) {
      return Tensor::full(std::move(shape), fill, /*requires_grad=*/true);
    };

    m.tok_emb_ = normal_leaf({V, d}, s);
    m.pos_emb_ = normal_leaf({cfg.max_context, d}, s);
    m.layers_.resize(static_cast<std::size_t>(cfg.layers));
    for (auto& lw : m.layers_) {
      lw.ln1_gain = const_leaf({d}, 1.0);
      lw.ln1_bias = const_leaf({d}, 0.0);
      for (int h = 0; h < cfg.heads; ++h) {
        lw.wq.push_back(normal_leaf({d, dh}, s));
        lw.bq.push_back(const_leaf({dh}, 0.0));
        lw.wk.push_back(normal_leaf({d, dh}, s));
        lw.bk.push_back(const_leaf({dh}, 0.0));
        lw.wv.push_back(normal_leaf({d, dh}, s));
        lw.bv.push_back(const_leaf({dh}, 0.0));
        lw.wo.push_back(normal_leaf({dh, d}, s_res));
      }
      lw.bo = const_leaf({d}, 0.0);
      lw.ln2_gain = const_leaf({d}, 1.0);
      lw.ln2_bias = const_leaf({d}, 0.0);
      lw.w_ff1 = normal_leaf({d, cfg.ff_dim}, s);
      lw.b_ff1 = const_leaf({cfg.ff_dim}, 0.0);
      lw.w_ff2 = normal_leaf({cfg.ff_dim, d}, s_res);
      lw.b_ff2 = const_leaf({d}, 0.0);
    }
    m.lnf_gain_ = const_leaf({d}, 1.0);
    m.lnf_bias_ = const_leaf({d}, 0.0);
    m.w_out_ = normal_leaf({d, V}, s);
    m.b_out_ = const_leaf({V}, 0.0);
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  bool frozen() const { return frozen_; }
  const Tensor& token_embedding() const { return tok_emb_; }
  const Tensor& position_embedding() const { return pos_emb_; }
  const LayerWeights& layer(int i) const { return layers_.at(static_cast<std::size_t>(i)); }
  const Tensor& final_norm_gain() const { return lnf_gain_; }
  const Tensor& final_norm_bias() const { return lnf_bias_; }
  const Tensor& output_weight() const { return w_out_; }
  const Tensor& output_bias() const { return b_out_; }

  // All weights in a fixed registration order; drives the optimizer, the
  // digest, and checkpoint layout, which must all agree.
  std::vector<Tensor> parameters() {
    std::vector<Tensor> out{tok_emb_, pos_emb_};
    for (auto& lw : layers_) {
      out.push_back(lw.ln1_gain);
      out.push_back(lw.ln1_bias);
      for (int h = 0; h < cfg_.heads; ++h) {
        out.push_back(lw.wq[static_cast<std::size_t>(h)]);
        out.push_back(lw.bq[static_cast<std::size_t>(h)]);
        out.push_back(lw.wk[static_cast<std::size_t>(h)]);
        out.push_back(lw.bk[static_cast<std::size_t>(h)]);
        out.push_back(lw.wv[static_cast<std::size_t>(h)]);
        out.push_back(lw.bv[static_cast<std::size_t>(h)]);
        out.push_back(lw.wo[static_cast<std::size_t>(h)]);
      }
      out.push_back(lw.bo);
      out.push_back(lw.ln2_gain);
      out.push_back(lw.ln2_bias);
      out.push_back(lw.w_ff1);
      out.push_back(lw.b_ff1);
      out.push_back(lw.w_ff2);
      out.push_back(lw.b_ff2);
    }
    out.push_back(lnf_gain_);
    out.push_back(lnf_bias_);
    out.push_back(w_out_);
    out.push_back(b_out_);
    return out;
  }

  std::vector<Tensor> parameters() const {
    return const_cast<VictimModel*>(this)->parameters();
  }

  // Content digest over every weight value in registration order.
  std::uint64_t weight_digest() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : parameters()) h = fnv1a64_doubles(p.values(), h);
    return h;
  }

  // Freeze: weights stop requiring gradients (backward prunes their whole
  // subgraph) and the digest of the frozen state is pinned for later
  // integrity checks.
  void freeze() {
    for (auto& p : parameters()) p.set_requires_grad(false);
    frozen_ = true;
    frozen_digest_ = weight_digest();
  }

  std::uint64_t frozen_digest() const {
    if (!frozen_) throw std::logic_error("VictimModel: model is not frozen");
    return frozen_digest_;
  }

  // Deep copy with independent storage (used by the editing defense, which
  // must leave the original untouched).
  VictimModel clone() const {
    VictimModel m;
    m.cfg_ = cfg_;
    auto copy = [](const Tensor& t) {
      return Tensor::leaf(t.shape(), {t.values().begin(), t.values().end()},
                          t.requires_grad());
    };
    m.tok_emb_ = copy(tok_emb_);
    m.pos_emb_ = copy(pos_emb_);
    for (const auto& lw : layers_) {
      LayerWeights c;
      c.ln1_gain = copy(lw.ln1_gain);
      c.ln1_bias = copy(lw.ln1_bias);
      for (std::size_t h = 0; h < lw.wq.size(); ++h) {
        c.wq.push_back(copy(lw.wq[h]));
        c.bq.push_back(copy(lw.bq[h]));
        c.wk.push_back(copy(lw.wk[h]));
        c.bk.push_back(copy(lw.bk[h]));
        c.wv.push_back(copy(lw.wv[h]));
        c.bv.push_back(copy(lw.bv[h]));
        c.wo.push_back(copy(lw.wo[h]));
      }
      c.bo = copy(lw.bo);
      c.ln2_gain = copy(lw.ln2_gain);
      c.ln2_bias = copy(lw.ln2_bias);
      c.w_ff1 = copy(lw.w_ff1);
      c.b_ff1 = copy(lw.b_ff1);
      c.w_ff2 = copy(lw.w_ff2);
      c.b_ff2 = copy(lw.b_ff2);
      m.layers_.push_back(std::move(c));
    }
    m.lnf_gain_ = copy(lnf_gain_);
    m.lnf_bias_ = copy(lnf_bias_);
    m.w_out_ = copy(w_out_);
    m.b_out_ = copy(b_out_);
    m.frozen_ = frozen_;
    m.frozen_digest_ = frozen_digest_;
    return m;
  }

  // In-place mutate one layer's feed-forward output matrix (checkpoint
  // loading and edit materialization). Refuses on frozen models unless the
  // caller explicitly unfreezes first.
  void add_to_ff_out(int layer, std::span<const double> delta) {
    if (frozen_) throw std::logic_error("VictimModel: cannot mutate a frozen model");
    auto vals = layers_.at(static_cast<std::size_t>(layer)).w_ff2.mutable_values();
    if (delta.size() != vals.size())
      throw std::invalid_argument("add_to_ff_out: delta size mismatch");
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] += delta[i];
  }

  void unfreeze() {
    frozen_ = false;
    for (auto& p : parameters()) p.set_requires_grad(true);
  }

  // -- embedding ------------------------------------------------------------

  // Rows of the token table, in order. No positions added.
  Tensor embed(std::span<const int> tokens) const {
    for (int t : tokens)
      if (t < 0 || t >= cfg_.vocab_size)
        throw std::invalid_argument("embed: token id out of range");
    return gather_rows(tok_emb_, {tokens.begin(), tokens.end()});
  }

  // Token rows plus positional rows [offset, offset+len).
  Tensor embed_with_positions(std::span<const int> tokens, int offset = 0) const {
    const int len = static_cast<int>(tokens.size());
    if (offset < 0 || offset + len > cfg_.max_context)
      throw std::invalid_argument("embed_with_positions: window exceeds max_context");
    std::vector<int> pos(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) pos[static_cast<std::size_t>(i)] = offset + i;
    return add(embed(tokens), gather_rows(pos_emb_, pos));
  }

  // -- tape forward ---------------------------------------------------------

  // Single sequence, logits at every position.
  Tensor forward(const Tensor& embeddings, const ForwardOverride& ov = {}) const {
    if (embeddings.ndim() != 2 || embeddings.cols() != cfg_.model_dim)
      throw std::invalid_argument("forward: embeddings must be len×model_dim");
    const int len = embeddings.rows();
    if (len < 1) throw std::invalid_argument("forward: empty input");
    if (len > cfg_.max_context) throw std::invalid_argument("forward: context overflow");
    return forward_stacked(embeddings, 1, len, 0, len, ov);
  }

  // Batched workhorse. `x` holds `batch` sequences of length `len` stacked
  // row-wise. Per sequence, logits are produced only for positions
  // [logits_begin, logits_begin+logits_count): callers that train on
  // suffixes skip the output projection everywhere else, which is the
  // single biggest graph saving at desk scale.
  Tensor forward_stacked(const Tensor& x_in, int batch, int len, int logits_begin,
                         int logits_count, const ForwardOverride& ov = {}) const {
    if (batch < 1 || len < 1) throw std::invalid_argument("forward_stacked: empty batch");
    if (len > cfg_.max_context) throw std::invalid_argument("forward_stacked: context overflow");
    if (x_in.rows() != batch * len)
      throw std::invalid_argument("forward_stacked: row count != batch*len");
    if (logits_begin < 0 || logits_count < 1 || logits_begin + logits_count > len)
      throw std::invalid_argument("forward_stacked: logits window out of range");

    const int dh = cfg_.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    const Tensor mask = causal_mask(len);

    Tensor x = x_in;
    for (int li = 0; li < cfg_.layers; ++li) {
      const auto& lw = layers_[static_cast<std::size_t>(li)];

      // Attention block (pre-norm).
      Tensor h = add(mul(layer_norm(x), lw.ln1_gain), lw.ln1_bias);
      Tensor attn_sum;
      for (int hd = 0; hd < cfg_.heads; ++hd) {
        const auto hu = static_cast<std::size_t>(hd);
        Tensor q = add(matmul(h, lw.wq[hu]), lw.bq[hu]);  // (B·len)×dh
        Tensor k = add(matmul(h, lw.wk[hu]), lw.bk[hu]);
        Tensor v = add(matmul(h, lw.wv[hu]), lw.bv[hu]);
        std::vector<Tensor> ctx_parts;
        ctx_parts.reserve(static_cast<std::size_t>(batch));
        for (int b = 0; b < batch; ++b) {
          Tensor qb = slice_rows(q, b * len, len);
          Tensor kb = slice_rows(k, b * len, len);
          Tensor vb = slice_rows(v, b * len, len);
          Tensor scores = add(affine(matmul(qb, transpose(kb)), inv_sqrt_dh, 0.0), mask);
          ctx_parts.push_back(matmul(softmax(scores), vb));
        }
        Tensor ctx = batch == 1 ? ctx_parts[0] : concat_rows(ctx_parts);
        Tensor head_out = matmul(ctx, lw.wo[hu]);
        attn_sum = hd == 0 ? head_out : add(attn_sum, head_out);
      }
      x = add(x, add(attn_sum, lw.bo));

      // Feed-forward block (pre-norm). The override swaps in a substitute
      // output matrix for exactly one layer.
      Tensor h2 = add(mul(layer_norm(x), lw.ln2_gain), lw.ln2_bias);
      Tensor inner = gelu(add(matmul(h2, lw.w_ff1), lw.b_ff1));
      const Tensor& w2 = (ov.layer == li) ? ov.w_ff2 : lw.w_ff2;
      if (ov.layer == li && (w2.rows() != cfg_.ff_dim || w2.cols() != cfg_.model_dim))
        throw std::invalid_argument("forward_stacked: override matrix has wrong shape");
      x = add(x, add(matmul(inner, w2), lw.b_ff2));
    }

    Tensor xf = add(mul(layer_norm(x), lnf_gain_), lnf_bias_);

    // Output projection, restricted to the requested window per sequence.
    Tensor pre_logits;
    if (batch == 1) {
      pre_logits = (logits_begin == 0 && logits_count == len)
                       ? xf
                       : slice_rows(xf, logits_begin, logits_count);
    } else if (logits_begin == 0 && logits_count == len) {
      pre_logits = xf;
    } else {
      std::vector<Tensor> parts;
      parts.reserve(static_cast<std::size_t>(batch));
      for (int b = 0; b < batch; ++b)
        parts.push_back(slice_rows(xf, b * len + logits_begin, logits_count));
      pre_logits = concat_rows(parts);
    }
    return add(matmul(pre_logits, w_out_), b_out_);
  }

  // Teacher-forced evaluation of one (prefix, suffix) pair under a soft
  // prompt. Input rows are [Z ‖ embed(P) ‖ embed(S)]; prompt rows sit at
  // positions 0..K-1 and token rows at positions token_offset.. (default:
  // immediately after the prompt). Returns, for each suffix position i,
  // log P(s_i | Z, P, s_<i), clamped into [log(1e-12), 0], plus the argmax
  // prediction at that position. Pass a null prompt for the promptless
  // baseline — then token_offset controls where the tokens sit, so a
  // baseline can be scored at the exact positions the victim was trained on.
  SuffixEvaluation forward_with_soft_prompt(const SoftPrompt* z,
                                            std::span<const int> prefix,
                                            std::span<const int> suffix,
                                            const ForwardOverride& ov = {},
                                            int token_offset = -1) const {
    std::vector<std::span<const int>> one_p{prefix}, one_s{suffix};
    auto batch = forward_with_soft_prompt_batch(z, one_p, one_s, ov, token_offset);
    return std::move(batch[0]);
  }

  // Batched variant: all pairs must share prefix/suffix lengths. One tape
  // serves the whole batch; per-pair evaluations share it and a single
  // backward covers every pair's loss contribution.
  std::vector<SuffixEvaluation> forward_with_soft_prompt_batch(
      const SoftPrompt* z, std::span<const std::span<const int>> prefixes,
      std::span<const std::span<const int>> suffixes,
      const ForwardOverride& ov = {}, int token_offset = -1) const {
    const int B = static_cast<int>(prefixes.size());
    if (B < 1 || suffixes.size() != prefixes.size())
      throw std::invalid_argument("forward_with_soft_prompt_batch: bad batch");
    const int K = z ? z->rows() : 0;
    if (token_offset < 0) token_offset = K;
    if (token_offset < K)
      throw std::invalid_argument("forward_with_soft_prompt_batch: tokens would overlap prompt");
    const int kp = static_cast<int>(prefixes[0].size());
    const int ks = static_cast<int>(suffixes[0].size());
    if (kp < 1 || ks < 1)
      throw std::invalid_argument("forward_with_soft_prompt_batch: empty prefix or suffix");
    if (z && z->dim() != cfg_.model_dim)
      throw std::invalid_argument("forward_with_soft_prompt_batch: prompt dim mismatch");
    const int T = K + kp + ks;
    if (token_offset + kp + ks > cfg_.max_context)
      throw std::invalid_argument("forward_with_soft_prompt_batch: context overflow");

    std::vector<int> pos_tok(static_cast<std::size_t>(kp + ks));
    for (int i = 0; i < kp + ks; ++i) pos_tok[static_cast<std::size_t>(i)] = token_offset + i;
    std::vector<int> pos_prompt(static_cast<std::size_t>(K));
    for (int i = 0; i < K; ++i) pos_prompt[static_cast<std::size_t>(i)] = i;

    std::vector<Tensor> parts;
    parts.reserve(static_cast<std::size_t>(B) * 2);
    for (int b = 0; b < B; ++b) {
      const auto bu = static_cast<std::size_t>(b);
      if (static_cast<int>(prefixes[bu].size()) != kp ||
          static_cast<int>(suffixes[bu].size()) != ks)
        throw std::invalid_argument("forward_with_soft_prompt_batch: ragged batch");
      std::vector<int> tokens(prefixes[bu].begin(), prefixes[bu].end());
      tokens.insert(tokens.end(), suffixes[bu].begin(), suffixes[bu].end());
      Tensor tok_rows = add(embed(tokens), gather_rows(pos_emb_, pos_tok));
      if (K > 0) {
        parts.push_back(add(z->z, gather_rows(pos_emb_, pos_prompt)));
        parts.push_back(tok_rows);
      } else {
        parts.push_back(tok_rows);
      }
    }
    Tensor x = parts.size() == 1 ? parts[0] : concat_rows(parts);

    // Positions K+kp-1 .. T-2 predict the ks suffix tokens.
    Tensor logits = forward_stacked(x, B, T, K + kp - 1, ks, ov);  // (B·ks)×V
    Tensor logp = log_softmax(logits);

    std::vector<SuffixEvaluation> out;
    out.reserve(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
      const auto bu = static_cast<std::size_t>(b);
      Tensor rows = B == 1 ? logp : slice_rows(logp, b * ks, ks);
      std::vector<int> gold(suffixes[bu].begin(), suffixes[bu].end());
      SuffixEvaluation ev;
      ev.gold_log_probs = clamp_min(pick(rows, gold), min_log_prob());
      ev.predicted.resize(static_cast<std::size_t>(ks));
      const auto lv = logits.values();
      const int V = cfg_.vocab_size;
      for (int i = 0; i < ks; ++i) {
        const double* row = lv.data() + (static_cast<std::size_t>(b) * ks + i) * V;
        ev.predicted[static_cast<std::size_t>(i)] = argmax_index({row, static_cast<std::size_t>(V)});
      }
      out.push_back(std::move(ev));
    }
    return out;
  }

 private:
  Tensor causal_mask(int len) const {
    std::vector<double> m(static_cast<std::size_t>(len) * len, 0.0);
    for (int i = 0; i < len; ++i)
      for (int j = i + 1; j < len; ++j)
        m[static_cast<std::size_t>(i) * len + j] = -1e30;
    return Tensor::leaf({len, len}, std::move(m));
  }

  ModelConfig cfg_;
  Tensor tok_emb_, pos_emb_;
  std::vector<LayerWeights> layers_;
  Tensor lnf_gain_, lnf_bias_;
  Tensor w_out_, b_out_;
  bool frozen_ = false;
  std::uint64_t frozen_digest_ = 0;
};

// ---------------------------------------------------------------------------
// InferenceSession: KV-cache generation path (no gradients)
// ---------------------------------------------------------------------------

class InferenceSession {
 public:
  explicit InferenceSession(const VictimModel& m) : model_(&m) {
    const auto& cfg = m.config();
    kcache_.resize(static_cast<std::size_t>(cfg.layers * cfg.heads));
    vcache_.resize(static_cast<std::size_t>(cfg.layers * cfg.heads));
    logits_.resize(static_cast<std::size_t>(cfg.vocab_size));
  }

  // Rows fed so far (not the absolute position when start_at was used).
  int length() const { return fed_; }
  int position() const { return pos_; }

  void reset() {
    pos_ = 0;
    fed_ = 0;
    for (auto& c : kcache_) c.clear();
    for (auto& c : vcache_) c.clear();
  }

  // Begin the sequence at a later position (promptless generation scored at
  // the positions the victim was trained on). Only valid before any feed.
  void start_at(int pos) {
    if (fed_ != 0)
      throw std::logic_error("InferenceSession::start_at: session already started");
    const auto& cfg = model_->config();
    if (pos < 0 || pos >= cfg.max_context)
      throw std::invalid_argument("InferenceSession::start_at: position out of range");
    pos_ = pos;
  }

  // Feed one embedding row (token embedding + positional row already summed,
  // or a soft-prompt row plus its positional row). Advances the position.
  void feed_row(std::span<const double> row) {
    const auto& cfg = model_->config();
    if (static_cast<int>(row.size()) != cfg.model_dim)
      throw std::invalid_argument("InferenceSession::feed_row: wrong dimension");
    if (pos_ >= cfg.max_context)
      throw std::invalid_argument("InferenceSession::feed_row: context overflow");
    step(row.data());
    ++pos_;
    ++fed_;
  }

  // Feed a token id at the current position.
  void feed_token(int t) {
    const auto& cfg = model_->config();
    if (t < 0 || t >= cfg.vocab_size)
      throw std::invalid_argument("InferenceSession::feed_token: token id out of range");
    const int d = cfg.model_dim;
    const double* e = model_->token_embedding().values().data() +
                      static_cast<std::size_t>(t) * d;
    const double* p = model_->position_embedding().values().data() +
                      static_cast<std::size_t>(pos_) * d;
    scratch_row_.resize(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) scratch_row_[static_cast<std::size_t>(i)] = e[i] + p[i];
    feed_row(scratch_row_);
  }

  void feed_tokens(std::span<const int> ts) {
    for (int t : ts) feed_token(t);
  }

  // Feed every row of a soft prompt (positions advance as usual).
  void feed_soft_prompt(const SoftPrompt& z) {
    const auto& cfg = model_->config();
    if (z.dim() != cfg.model_dim)
      throw std::invalid_argument("InferenceSession::feed_soft_prompt: dim mismatch");
    const int d = cfg.model_dim;
    const auto zv = z.z.values();
    for (int r = 0; r < z.rows(); ++r) {
      const double* p = model_->position_embedding().values().data() +
                        static_cast<std::size_t>(pos_) * d;
      scratch_row_.resize(static_cast<std::size_t>(d));
      for (int i = 0; i < d; ++i)
        scratch_row_[static_cast<std::size_t>(i)] = zv[static_cast<std::size_t>(r) * d + i] + p[i];
      feed_row(scratch_row_);
    }
  }

  // Logits over the vocabulary at the most recently fed position.
  const std::vector<double>& last_logits() const {
    if (fed_ == 0) throw std::logic_error("InferenceSession::last_logits: nothing fed yet");
    return logits_;
  }

 private:
  using EVec = Eigen::VectorXd;
  using CMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                              Eigen::RowMajor>>;
  using CVec = Eigen::Map<const EVec>;

  static void layer_norm_row(const EVec& x, const double* gain, const double* bias,
                             EVec& out) {
    const auto n = x.size();
    const double m = x.mean();
    double var = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) var += (x[i] - m) * (x[i] - m);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + 1e-5);
    out.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) out[i] = (x[i] - m) * is * gain[i] + bias[i];
  }

  void step(const double* row_in) {
    const auto& cfg = model_->config();
    const int d = cfg.model_dim, dh = cfg.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    EVec x = CVec(row_in, d);
    EVec h(d), q(dh), ctx(dh);

    for (int li = 0; li < cfg.layers; ++li) {
      const auto& lw = model_->layer(li);
      layer_norm_row(x, lw.ln1_gain.values().data(), lw.ln1_bias.values().data(), h);

      EVec attn_out = EVec::Zero(d);
      for (int hd = 0; hd < cfg.heads; ++hd) {
        const auto hu = static_cast<std::size_t>(hd);
        CMap Wq(lw.wq[hu].values().data(), d, dh);
        CMap Wk(lw.wk[hu].values().data(), d, dh);
        CMap Wv(lw.wv[hu].values().data(), d, dh);
        CVec bq(lw.bq[hu].values().data(), dh);
        CVec bk(lw.bk[hu].values().data(), dh);
        CVec bv(lw.bv[hu].values().data(), dh);

        q.noalias() = Wq.transpose() * h;
        q += bq;
        EVec k = Wk.transpose() * h + bk;
        EVec v = Wv.transpose() * h + bv;

        auto& kc = kcache_[static_cast<std::size_t>(li * cfg.heads + hd)];
        auto& vc = vcache_[static_cast<std::size_t>(li * cfg.heads + hd)];
        kc.insert(kc.end(), k.data(), k.data() + dh);
        vc.insert(vc.end(), v.data(), v.data() + dh);
        const int n = fed_ + 1;  // rows now cached

        // Attention over cached keys (softmax with max-subtraction, matching
        // the tape path's stabilized computation).
        CMap K(kc.data(), n, dh);
        EVec scores = K * q * inv_sqrt_dh;
        const double mx = scores.maxCoeff();
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        scores /= z;
        CMap Vm(vc.data(), n, dh);
        ctx.noalias() = Vm.transpose() * scores;

        CMap Wo(lw.wo[hu].values().data(), dh, d);
        attn_out.noalias() += Wo.transpose() * ctx;
      }
      attn_out += CVec(lw.bo.values().data(), d);
      x += attn_out;

      layer_norm_row(x, lw.ln2_gain.values().data(), lw.ln2_bias.values().data(), h);
      CMap W1(lw.w_ff1.values().data(), d, cfg.ff_dim);
      CMap W2(lw.w_ff2.values().data(), cfg.ff_dim, d);
      EVec inner = W1.transpose() * h + CVec(lw.b_ff1.values().data(), cfg.ff_dim);
      // GELU, tanh form — identical constants to the tape op.
      for (Eigen::Index i = 0; i < inner.size(); ++i) {
        const double u = inner[i];
        inner[i] = 0.5 * u * (1.0 + std::tanh(0.7978845608028654 * (u + 0.044715 * u * u * u)));
      }
      x.noalias() += W2.transpose() * inner;
      x += CVec(lw.b_ff2.values().data(), d);
    }

    layer_norm_row(x, model_->final_norm_gain().values().data(),
                   model_->final_norm_bias().values().data(), h);
    CMap Wout(model_->output_weight().values().data(), d, cfg.vocab_size);
    Eigen::Map<EVec> out(logits_.data(), cfg.vocab_size);
    out.noalias() = Wout.transpose() * h;
    out += CVec(model_->output_bias().values().data(), cfg.vocab_size);
  }

  const VictimModel* model_;
  int pos_ = 0;   // absolute position of the next row
  int fed_ = 0;   // rows fed so far
  std::vector<std::vector<double>> kcache_, vcache_;  // [layer*heads] -> n×dh rows
  std::vector<double> logits_;
  std::vector<double> scratch_row_;
};

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct PretrainConfig {
  int epochs = 130;
  double lr = 2e-3;
  int batch_size = 12;
  int warmup_steps = 50;
  double clip_norm = 1.0;
  double weight_decay = 0.0;
  std::uint64_t seed = 42;
  // Token sequences are trained at positions [fixed_offset, fixed_offset+len).
  // Positions 0..fixed_offset-1 are reserved slots where a soft prompt will
  // later sit; baseline (promptless) evaluation uses the same offset, so
  // prompted and unprompted conditions score tokens at identical positions.
  // offset_jitter > 0 additionally randomizes each sequence's offset by
  // uniform[0, jitter] per epoch (augmentation; disabled by default because
  // it slows exact memorization considerably).
  int fixed_offset = 16;
  int offset_jitter = 0;
  // Memorization probe: greedy exact-suffix rate over a fixed sample,
  // measured teacher-forced (argmax at every suffix position == gold is
  // exactly greedy reproduction). Training stops at the first probe inside
  // [band_lo, band_hi] — a partially memorized victim leaves the attack
  // headroom to demonstrate gains. Set band_lo = 2.0 to disable stopping.
  double band_lo = 0.45;
  double band_hi = 0.90;
  int probe_every = 1;
  int probe_sample = 64;
};

struct PretrainEpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
  double probe_exact_rate = -1.0;  // -1: not probed this epoch
};

struct PretrainTrace {
  double initial_loss = 0.0;  // random-init cross-entropy, ≈ ln V
  std::vector<PretrainEpochRecord> epochs;
  bool stopped_in_band = false;
  double final_probe_rate = -1.0;
};

namespace detail {

// Teacher-forced exact-suffix-match rate over a sample of pairs: the
// fraction whose argmax prediction equals gold at every suffix position
// (equivalently: greedy decoding would reproduce the suffix verbatim).
inline double probe_exact_rate(const VictimModel& m, const Dataset& d, int sample,
                               int token_offset = 0) {
  if (d.pairs.empty()) return 0.0;
  const std::size_t n = d.pairs.size();
  const std::size_t stride = std::max<std::size_t>(1, n / static_cast<std::size_t>(sample));
  int probed = 0, exact = 0;
  for (std::size_t i = 0; i < n; i += stride) {
    const auto& p = d.pairs[i];
    auto ev = m.forward_with_soft_prompt(nullptr, p.prefix, p.suffix, {}, token_offset);
    ++probed;
    bool all = true;
    for (std::size_t j = 0; j < p.suffix.size(); ++j)
      if (ev.predicted[j] != p.suffix[j]) {
        all = false;
        break;
      }
    exact += all ? 1 : 0;
  }
  return probed == 0 ? 0.0 : static_cast<double>(exact) / probed;
}

}  // namespace detail

// Next-token training over prefix‖suffix sequences until the memorization
// band is reached (or epochs run out). Returns the trained model, frozen.
inline VictimModel pretrain_victim(const Dataset& corpus, const PretrainConfig& pc,
                                   const ModelConfig& mc, PretrainTrace* trace_out = nullptr) {
  if (corpus.pairs.empty()) throw std::invalid_argument("pretrain_victim: empty corpus");
  mc.validate();
  const int T = corpus.k_prefix + corpus.k_suffix;
  if (pc.fixed_offset < 0 || pc.offset_jitter < 0 ||
      pc.fixed_offset + pc.offset_jitter + T > mc.max_context)
    throw std::invalid_argument("pretrain_victim: offset + sequence length exceeds context");

  VictimModel model = VictimModel::init(mc);
  AdamW opt(AdamWConfig{pc.lr, 0.9, 0.999, 1e-8, pc.weight_decay});
  auto params = model.parameters();
  for (auto& p : params) opt.register_param(p);

  const int n = static_cast<int>(corpus.pairs.size());
  const int steps_per_epoch = (n + pc.batch_size - 1) / pc.batch_size;
  const int total_steps = steps_per_epoch * pc.epochs;

  Rng order_rng(derive_seed(pc.seed, "pretrain-order"));
  Rng offset_rng(derive_seed(pc.seed, "pretrain-offset"));

  PretrainTrace trace;
  int step_counter = 0;

  // One batched training step; returns mean next-token cross-entropy.
  // Each sequence gets its own positional offset, so embeddings are built
  // per-sequence and stacked.
  auto run_batch = [&](std::span<const int> batch_ids, bool update) {
    const int B = static_cast<int>(batch_ids.size());
    std::vector<Tensor> parts;
    parts.reserve(static_cast<std::size_t>(B));
    std::vector<int> targets;
    targets.reserve(static_cast<std::size_t>(B * (T - 1)));
    for (int id : batch_ids) {
      const auto& p = corpus.pairs[static_cast<std::size_t>(id)];
      std::vector<int> tokens(p.prefix);
      tokens.insert(tokens.end(), p.suffix.begin(), p.suffix.end());
      const int off = pc.fixed_offset +
                      (update && pc.offset_jitter > 0 ? offset_rng.uniform_int(pc.offset_jitter + 1) : 0);
      parts.push_back(model.embed_with_positions(tokens, off));
      targets.insert(targets.end(), tokens.begin() + 1, tokens.end());
    }
    Tensor x = B == 1 ? parts[0] : concat_rows(parts);
    // Positions 0..T-2 predict tokens 1..T-1.
    Tensor logits = model.forward_stacked(x, B, T, 0, T - 1);
    Tensor logp = log_softmax(logits);
    Tensor gold = clamp_min(pick(logp, targets), min_log_prob());
    Tensor loss = neg(mean(gold));
    const double loss_val = loss.item();
    if (!std::isfinite(loss_val))
      throw std::runtime_error("pretrain_victim: loss diverged (non-finite)");
    if (!update) return loss_val;

    auto grads = backward(loss);
    std::vector<std::vector<double>> gstore;
    gstore.reserve(params.size());
    for (auto& p : params) gstore.push_back(grads.at(p));
    std::vector<std::vector<double>*> gptrs;
    for (auto& g : gstore) gptrs.push_back(&g);
    clip_global_norm(gptrs, pc.clip_norm);
    std::vector<const std::vector<double>*> cptrs(gstore.size());
    for (std::size_t i = 0; i < gstore.size(); ++i) cptrs[i] = &gstore[i];
    opt.step(cptrs, lr_at_step(step_counter, total_steps, pc.warmup_steps, pc.lr));
    ++step_counter;
    return loss_val;
  };

  // Random-init loss on a fixed probe batch: should sit near ln(V).
  {
    std::vector<int> ids;
    for (int i = 0; i < std::min(n, pc.batch_size); ++i) ids.push_back(i);
    trace.initial_loss = run_batch(ids, /*update=*/false);
  }

  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < pc.epochs; ++epoch) {
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    int batches = 0;
    for (int s = 0; s < n; s += pc.batch_size) {
      const int bsz = std::min(pc.batch_size, n - s);
      loss_sum += run_batch({order.data() + s, static_cast<std::size_t>(bsz)}, true);
      ++batches;
    }
    PretrainEpochRecord rec;
    rec.epoch = epoch;
    rec.mean_loss = loss_sum / std::max(1, batches);
    rec.lr = lr_at_step(step_counter - 1, total_steps, pc.warmup_steps, pc.lr);
    const bool probe_now = (epoch + 1) % std::max(1, pc.probe_every) == 0;
    if (probe_now) {
      rec.probe_exact_rate =
          detail::probe_exact_rate(model, corpus, pc.probe_sample, pc.fixed_offset);
      trace.final_probe_rate = rec.probe_exact_rate;
    }
    trace.epochs.push_back(rec);
    if (probe_now && rec.probe_exact_rate >= pc.band_lo) {
      trace.stopped_in_band = rec.probe_exact_rate <= pc.band_hi;
      break;
    }
  }

  model.freeze();
  if (trace_out) *trace_out = trace;
  return model;
}

}  // namespace cosped
