// Suppression defense: fit a rank-one delta u·vᵀ to one feed-forward output
// matrix so that targeted prefixes no longer greedily continue into their
// memorized suffixes, stopping as soon as training perplexity degrades past
// a configured multiple of baseline.
//
// The suppression term is a first-token margin: for each target, the gold
// continuation's log-probability minus the runner-up token's, hinged at
// -margin_slack. Descending the margin promotes the counterfactual token
// until the greedy argmax flips, then the hinge releases that target. A
// naive descent on log P(gold) alone stalls here — a memorizing victim is
// softmax-saturated (P ≈ 0.99+), so that gradient is (1-P)-scale noise and
// following it degrades the model everywhere EXCEPT the target. The margin's
// logit gradient is e_gold − e_runner_up: constant magnitude, concentrated
// exactly on the decision that matters.
//
// Unflipped targets share a softmax focus weight over their margins (lowest
// margin wins), so a single rank-one direction flips targets one at a time
// instead of averaging a compromise direction across all of them — the
// averaged pull lowers every margin a little but crosses zero for none,
// while the focused pull finishes each flip and the hinge then holds it.
//
// Only the two factor vectors train; the victim stays frozen and the delta
// rides along each forward pass as a matrix override. Utility is protected
// twice. First, each step's suppression gradient is projected onto the null
// space of the held-out NLL gradient, so to first order a step cannot move
// held-out behavior at all — a plain penalty instead reaches an equilibrium
// where the restoring force exactly cancels the suppression pull, freezing
// every margin just short of its flip. Second, the curvature drift that
// projection cannot see is pulled back by a squared-deviation penalty on
// held-out NLL: its gradient vanishes at zero deviation, so an overwhelming
// regularizer pins the model to its original behavior instead of quietly
// optimizing the held-out split.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cosped/common.hpp"
#include "cosped/corpus.hpp"
#include "cosped/metrics.hpp"
#include "cosped/model.hpp"
#include "cosped/optim.hpp"
#include "cosped/tensor.hpp"

namespace cosped {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct EditConfig {
  int layer = -1;              // -1: middle layer (L / 2)
  double lr = 5e-2;
  int max_epochs = 400;
  double ppl_stop_low = 1.1;   // conservative stop, multiple of baseline
  double ppl_stop_high = 1.8;  // aggressive stop, multiple of baseline
  bool aggressive = false;     // stop at ppl_stop_high instead of ppl_stop_low
  double lambda = 0.1;         // weight of the held-out deviation penalty
  double margin_slack = 1.0;   // hinge floor: stop pushing a flipped target
  double focus_temp = 1.0;     // softmax temperature over unflipped margins
  double clip_norm = 1.0;
  double init_scale = 1e-2;    // stddev of the factor-vector initialization
  int heldout_sample = 8;      // held-out pairs entering the penalty graph
  int probe_sample = 32;       // training pairs probed for the stopping PPL
  int token_offset = 16;       // position tokens were trained at
  std::uint64_t seed = 42;

  void validate(int n_layers) const {
    if (layer >= n_layers)
      throw std::invalid_argument("EditConfig: layer index out of range");
    if (!(lr > 0.0)) throw std::invalid_argument("EditConfig: lr must be > 0");
    if (max_epochs < 1) throw std::invalid_argument("EditConfig: max_epochs must be >= 1");
    if (!(ppl_stop_low >= 1.0))
      throw std::invalid_argument("EditConfig: ppl_stop_low must be >= 1");
    if (!(ppl_stop_low < ppl_stop_high))
      throw std::invalid_argument("EditConfig: ppl_stop_low must be < ppl_stop_high");
    if (lambda < 0.0) throw std::invalid_argument("EditConfig: lambda must be >= 0");
    if (!(margin_slack > 0.0))
      throw std::invalid_argument("EditConfig: margin_slack must be > 0");
    if (!(focus_temp > 0.0))
      throw std::invalid_argument("EditConfig: focus_temp must be > 0");
    if (!(clip_norm > 0.0)) throw std::invalid_argument("EditConfig: clip_norm must be > 0");
    if (heldout_sample < 1 || probe_sample < 1)
      throw std::invalid_argument("EditConfig: sample sizes must be >= 1");
    if (token_offset < 0)
      throw std::invalid_argument("EditConfig: token_offset must be >= 0");
  }

  int resolved_layer(int n_layers) const { return layer < 0 ? n_layers / 2 : layer; }

  // Content digest over every field, taken from the exact parameter bytes.
  std::string fingerprint() const {
    const double nums[] = {static_cast<double>(layer),
                           lr,
                           static_cast<double>(max_epochs),
                           ppl_stop_low,
                           ppl_stop_high,
                           aggressive ? 1.0 : 0.0,
                           lambda,
                           margin_slack,
                           focus_temp,
                           clip_norm,
                           init_scale,
                           static_cast<double>(heldout_sample),
                           static_cast<double>(probe_sample),
                           static_cast<double>(token_offset),
                           static_cast<double>(seed)};
    return hex64(fnv1a64_doubles(nums));
  }
};

// ---------------------------------------------------------------------------
// The edit artifact
// ---------------------------------------------------------------------------

struct RankOneEdit {
  std::vector<double> u;  // output-dimension factor (model_dim)
  std::vector<double> v;  // input-dimension factor (ff_dim)
  int layer = 0;
  int stop_epoch = -1;
  std::string stop_reason;
  std::string fingerprint;

  // Flattened ff_dim×model_dim delta in the weight's storage layout:
  // row i (input), column j (output) holds v[i]·u[j].
  std::vector<double> delta_flat() const {
    std::vector<double> out;
    out.reserve(u.size() * v.size());
    for (double vi : v)
      for (double uj : u) out.push_back(vi * uj);
    return out;
  }

  RankOneEdit negated() const {
    RankOneEdit e = *this;
    for (double& x : e.u) x = -x;
    return e;
  }

  nlohmann::json to_json() const {
    return {{"layer", layer},       {"u", u},
            {"v", v},               {"stop_epoch", stop_epoch},
            {"stop_reason", stop_reason}, {"fingerprint", fingerprint}};
  }

  static RankOneEdit from_json(const nlohmann::json& j) {
    RankOneEdit e;
    e.layer = j.at("layer").get<int>();
    e.u = j.at("u").get<std::vector<double>>();
    e.v = j.at("v").get<std::vector<double>>();
    e.stop_epoch = j.at("stop_epoch").get<int>();
    e.stop_reason = j.at("stop_reason").get<std::string>();
    e.fingerprint = j.at("fingerprint").get<std::string>();
    return e;
  }
};

struct EditEpochRecord {
  int epoch = 0;
  double objective = 0.0;        // suppression sum + weighted penalty
  double suppress_sum = 0.0;     // Σ_targets hinged first-token margins
  double heldout_nll = 0.0;      // unweighted held-out mean NLL under the edit
  double tr_ppl = 0.0;           // training-probe perplexity under the edit
  double target_hit_rate = 0.0;  // greedy first-token accuracy on the targets
  std::vector<double> margins;   // per-target gold-minus-runner-up log-prob gap

  nlohmann::json to_json() const {
    return {{"epoch", epoch},
            {"objective", objective},
            {"suppress_sum", suppress_sum},
            {"heldout_nll", heldout_nll},
            {"tr_ppl", tr_ppl},
            {"target_hit_rate", target_hit_rate},
            {"margins", margins}};
  }
};

struct EditTrace {
  double baseline_tr_ppl = 0.0;
  double baseline_heldout_nll = 0.0;
  std::vector<EditEpochRecord> epochs;

  void write_jsonl(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("EditTrace: cannot open " + path.string());
    for (const auto& e : epochs) os << e.to_json().dump() << "\n";
  }
};

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

namespace detail {

// First-`n` pairs of a dataset as a shallow probe split (deterministic).
inline Dataset head_subset(const Dataset& d, int n) {
  Dataset out;
  out.vocab_size = d.vocab_size;
  out.k_prefix = d.k_prefix;
  out.k_suffix = d.k_suffix;
  const std::size_t take = std::min<std::size_t>(d.pairs.size(), static_cast<std::size_t>(n));
  out.pairs.assign(d.pairs.begin(), d.pairs.begin() + static_cast<std::ptrdiff_t>(take));
  return out;
}

inline ForwardOverride numeric_override(const VictimModel& m, int layer,
                                        std::span<const double> u,
                                        std::span<const double> v) {
  const auto& w = m.layer(layer).w_ff2;
  const auto base = w.values();
  std::vector<double> vals(base.begin(), base.end());
  const std::size_t d = u.size();
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) vals[i * d + j] += v[i] * u[j];
  return ForwardOverride{layer, Tensor::leaf(w.shape(), std::move(vals), false)};
}

}  // namespace detail

// Gradient-fit the factor vectors on
//
//   Σ_targets w_t · max(log P(gold t1 | prefix) − log P(runner-up | prefix),
//                       −margin_slack)  +  λ·(held-out mean NLL − baseline)²
//
// where w_t is a softmax over −margin/focus_temp restricted to targets still
// above the hinge floor. Descending the first term suppresses each target's
// memorized first token by promoting the unedited model's second choice past
// it — lowest margin first; the second term pins held-out behavior to the
// unedited model. Stops at the FIRST epoch whose training-probe perplexity
// reaches the configured multiple of baseline, or at max_epochs.
inline RankOneEdit fit_rank_one_edit(const VictimModel& m, const Dataset& targets,
                                     const Dataset& heldout, const Dataset& train_probe,
                                     const EditConfig& cfg, EditTrace* trace_out = nullptr) {
  const auto& mc = m.config();
  cfg.validate(mc.layers);
  if (!m.frozen())
    throw std::invalid_argument("fit_rank_one_edit: victim must be frozen");
  if (targets.pairs.empty())
    throw std::invalid_argument("fit_rank_one_edit: no targeted pairs");
  if (heldout.pairs.empty() || train_probe.pairs.empty())
    throw std::invalid_argument("fit_rank_one_edit: held-out and probe splits required");
  const int layer = cfg.resolved_layer(mc.layers);

  const Dataset held_sub = detail::head_subset(heldout, cfg.heldout_sample);
  const Dataset probe_sub = detail::head_subset(train_probe, cfg.probe_sample);

  EditTrace trace;
  trace.baseline_tr_ppl = perplexity(m, probe_sub, nullptr, cfg.token_offset);
  trace.baseline_heldout_nll =
      std::log(perplexity(m, held_sub, nullptr, cfg.token_offset));
  const double stop_ppl =
      trace.baseline_tr_ppl * (cfg.aggressive ? cfg.ppl_stop_high : cfg.ppl_stop_low);

  // Tiny random factors: exactly zero is a saddle of the outer product.
  const int d = mc.model_dim, ff = mc.ff_dim;
  Rng rng(derive_seed(cfg.seed, "edit-init"));
  std::vector<double> u0(static_cast<std::size_t>(d)), v0(static_cast<std::size_t>(ff));
  for (auto& x : u0) x = rng.normal(0.0, cfg.init_scale);
  for (auto& x : v0) x = rng.normal(0.0, cfg.init_scale);
  Tensor u = Tensor::leaf({d}, std::move(u0), true);
  Tensor v = Tensor::leaf({ff}, std::move(v0), true);

  RankOneEdit edit;
  edit.layer = layer;
  edit.stop_reason = "max-epochs";
  edit.stop_epoch = cfg.max_epochs - 1;

  // Adaptive steps matter here: the cheap descent direction (suppress every
  // pair's continuation a little) is walled off by the projection, and the
  // surgical direction that separates targeted pairs from their look-alikes
  // starts with a tiny gradient that plain SGD follows too slowly.
  AdamW opt;
  opt.register_param(u);
  opt.register_param(v);

  const double held_positions =
      static_cast<double>(held_sub.pairs.size() * static_cast<std::size_t>(held_sub.k_suffix));

  // Counterfactual tokens, fixed up front: each target's runner-up under
  // the UNEDITED model (highest logit excluding the gold first token; ties
  // to the lowest id). The unedited margins double as per-target ceilings —
  // a shared rank-one direction likes to pay for one pair's suppression by
  // strengthening another pair's memorization, and the ceiling term below
  // charges for that immediately instead of letting the debt compound.
  std::vector<int> runner_up;
  std::vector<double> margin_ceiling;
  runner_up.reserve(targets.pairs.size());
  margin_ceiling.reserve(targets.pairs.size());
  for (const auto& pair : targets.pairs) {
    InferenceSession s(m);
    if (cfg.token_offset > 0) s.start_at(cfg.token_offset);
    s.feed_tokens(pair.prefix);
    const auto& logits = s.last_logits();
    const int gold = pair.suffix.at(0);
    int best = -1;
    for (int j = 0; j < static_cast<int>(logits.size()); ++j) {
      if (j == gold) continue;
      if (best < 0 || logits[static_cast<std::size_t>(j)] >
                          logits[static_cast<std::size_t>(best)])
        best = j;
    }
    runner_up.push_back(best);
    margin_ceiling.push_back(logits[static_cast<std::size_t>(gold)] -
                             logits[static_cast<std::size_t>(best)]);
  }

  // Model selection across the run: every epoch evaluates the pre-step
  // factors, and the state returned is the best one OBSERVED — lowest
  // greedy hit rate, ties broken toward the smallest held-out deviation —
  // not whatever state the final step happened to leave behind. Late-run
  // churn (drift correction fighting the last flips) would otherwise hand
  // back a worse edit than one already measured mid-run.
  struct BestState {
    double hit = std::numeric_limits<double>::infinity();
    double dev = std::numeric_limits<double>::infinity();
    int epoch = -1;
    std::vector<double> u, v;
  } best;

  int zero_hit_streak = 0;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const std::vector<double> u_snap(u.values().begin(), u.values().end());
    const std::vector<double> v_snap(v.values().begin(), v.values().end());
    EditEpochRecord rec;
    rec.epoch = epoch;

    try {
      // Suppression and held-out terms get their own override graphs: the
      // tape is consumed per backward pass, and each pass must reach the
      // shared factor leaves through an intact graph of its own.
      ForwardOverride ov_s{layer, add(m.layer(layer).w_ff2, outer(v, u))};
      ForwardOverride ov_h{layer, add(m.layer(layer).w_ff2, outer(v, u))};

      // Suppression: hinged margin between the gold first token and its
      // fixed counterfactual, per target. Both log-probs are read at the
      // same position under identical conditioning, so the margin equals
      // the logit difference. Greedy hit-rate bookkeeping rides on the
      // gold forwards.
      std::vector<Tensor> margins;
      std::vector<double> margin_vals;
      margins.reserve(targets.pairs.size());
      margin_vals.reserve(targets.pairs.size());
      int hits = 0;
      double plain_sum = 0.0;
      for (std::size_t t = 0; t < targets.pairs.size(); ++t) {
        const auto& pair = targets.pairs[t];
        const std::vector<int> gold_first{pair.suffix.at(0)};
        const std::vector<int> alt_first{runner_up[t]};
        auto ev_gold = m.forward_with_soft_prompt(nullptr, pair.prefix, gold_first, ov_s,
                                                  cfg.token_offset);
        auto ev_alt = m.forward_with_soft_prompt(nullptr, pair.prefix, alt_first, ov_s,
                                                 cfg.token_offset);
        Tensor margin = sub(sum(ev_gold.gold_log_probs), sum(ev_alt.gold_log_probs));
        margins.push_back(margin);
        margin_vals.push_back(margin.item());
        plain_sum += std::max(margin_vals.back(), -cfg.margin_slack);
        hits += ev_gold.predicted.at(0) == pair.suffix.at(0) ? 1 : 0;
      }
      rec.target_hit_rate = static_cast<double>(hits) /
                            static_cast<double>(targets.pairs.size());
      rec.suppress_sum = plain_sum;
      rec.margins = margin_vals;

      // Focus weights: softmax of −margin/T over targets still above the
      // hinge floor (weights are plain numbers, not part of the graph).
      // Flipped targets contribute no gradient; they reenter the softmax
      // only if a later step drags them back above the floor.
      double wmax = -std::numeric_limits<double>::infinity();
      for (double mv : margin_vals)
        if (mv > -cfg.margin_slack) wmax = std::max(wmax, -mv / cfg.focus_temp);
      bool any_active = std::isfinite(wmax);
      Tensor suppress = Tensor::scalar(0.0);
      if (any_active) {
        double wsum = 0.0;
        for (double mv : margin_vals)
          if (mv > -cfg.margin_slack) wsum += std::exp(-mv / cfg.focus_temp - wmax);
        for (std::size_t t = 0; t < margins.size(); ++t) {
          if (margin_vals[t] <= -cfg.margin_slack) continue;
          const double w = std::exp(-margin_vals[t] / cfg.focus_temp - wmax) / wsum;
          suppress =
              add(suppress, affine(clamp_min(margins[t], -cfg.margin_slack), w, 0.0));
        }
      }
      // Ceiling term: full-strength push on any margin above its unedited
      // value, so no target's memorization strengthens while others flip.
      for (std::size_t t = 0; t < margins.size(); ++t) {
        if (margin_vals[t] <= margin_ceiling[t]) continue;
        suppress = add(suppress, clamp_min(margins[t], margin_ceiling[t]));
        any_active = true;
      }

      // Held-out anchor: mean NLL over the anchor split.
      Tensor nll_acc = Tensor::scalar(0.0);
      for (const auto& pair : held_sub.pairs) {
        auto ev = m.forward_with_soft_prompt(nullptr, pair.prefix, pair.suffix, ov_h,
                                             cfg.token_offset);
        nll_acc = add(nll_acc, sum(neg(ev.gold_log_probs)));
      }
      Tensor held_nll = affine(nll_acc, 1.0 / held_positions, 0.0);
      rec.heldout_nll = held_nll.item();
      const double dev = rec.heldout_nll - trace.baseline_heldout_nll;

      rec.objective = suppress.item() + cfg.lambda * dev * dev;
      if (!std::isfinite(rec.objective))
        throw std::domain_error("objective non-finite");

      // The metrics above describe the PRE-step state (the snapshot); every
      // snapshot already passed the stopping gate, or the loop would have
      // ended before this epoch began.
      if (rec.target_hit_rate < best.hit ||
          (rec.target_hit_rate == best.hit && std::abs(dev) < best.dev)) {
        best.hit = rec.target_hit_rate;
        best.dev = std::abs(dev);
        best.epoch = epoch;
        best.u = u_snap;
        best.v = v_snap;
      }

      const auto n_u = static_cast<std::size_t>(d);
      const auto n_v = static_cast<std::size_t>(ff);
      std::vector<double> gsu(n_u, 0.0), gsv(n_v, 0.0);
      if (any_active) {
        auto gs = backward(suppress);
        gsu = gs.at(u);
        gsv = gs.at(v);
      }
      auto gh = backward(held_nll);
      std::vector<double> ghu = gh.at(u);
      std::vector<double> ghv = gh.at(v);

      // Step = suppression gradient minus its component along the held-out
      // gradient (first-order damage removed), plus the penalty gradient
      // 2λ·dev·∇NLL correcting whatever curvature drift has accumulated.
      double dot = 0.0, gh2 = 0.0;
      for (std::size_t i = 0; i < n_u; ++i) {
        dot += gsu[i] * ghu[i];
        gh2 += ghu[i] * ghu[i];
      }
      for (std::size_t i = 0; i < n_v; ++i) {
        dot += gsv[i] * ghv[i];
        gh2 += ghv[i] * ghv[i];
      }
      const double coef = gh2 > 0.0 ? dot / gh2 : 0.0;
      const double drift = 2.0 * cfg.lambda * dev;
      std::vector<double> gu(n_u), gvec(n_v);
      for (std::size_t i = 0; i < n_u; ++i) gu[i] = gsu[i] + (drift - coef) * ghu[i];
      for (std::size_t i = 0; i < n_v; ++i) gvec[i] = gsv[i] + (drift - coef) * ghv[i];
      clip_global_norm({&gu, &gvec}, cfg.clip_norm);
      opt.step({&gu, &gvec}, cfg.lr);

      // Post-step probes under a gradient-free copy of the edited matrix.
      auto probe_ov = detail::numeric_override(m, layer, u.values(), v.values());
      rec.tr_ppl = perplexity(m, probe_sub, nullptr, cfg.token_offset, probe_ov);
    } catch (const std::domain_error& e) {
      // The tensor ops surface numeric blow-ups as domain errors; this is
      // the divergence case of the contract.
      throw std::runtime_error(std::string("fit_rank_one_edit: diverged (") + e.what() +
                               ")");
    } catch (const std::invalid_argument& e) {
      // A non-finite factor poisons the probe override's leaf construction.
      throw std::runtime_error(std::string("fit_rank_one_edit: diverged (") + e.what() +
                               ")");
    }
    trace.epochs.push_back(rec);

    if (rec.tr_ppl >= stop_ppl) {
      edit.stop_epoch = epoch;
      edit.stop_reason = cfg.aggressive ? "tr-ppl-high" : "tr-ppl-low";
      break;
    }
    // Done: the greedy first token has been off-gold for a sustained run of
    // epochs AND the drift polish has stopped finding better states. Exiting
    // on the zero streak alone would forfeit the post-flip epochs in which
    // the penalty walks held-out deviation back down.
    zero_hit_streak = rec.target_hit_rate == 0.0 ? zero_hit_streak + 1 : 0;
    if (zero_hit_streak >= 10 && epoch - best.epoch >= 25) {
      edit.stop_epoch = epoch;
      edit.stop_reason = "targets-suppressed";
      break;
    }
  }

  // Hand back the best observed state; stop_epoch names the epoch whose
  // evaluation selected it, stop_reason why the search ended.
  if (best.epoch >= 0) {
    edit.stop_epoch = best.epoch;
    edit.u = std::move(best.u);
    edit.v = std::move(best.v);
  } else {
    edit.u.assign(u.values().begin(), u.values().end());
    edit.v.assign(v.values().begin(), v.values().end());
  }
  for (double x : edit.u)
    if (!std::isfinite(x)) throw std::runtime_error("fit_rank_one_edit: non-finite factor");
  for (double x : edit.v)
    if (!std::isfinite(x)) throw std::runtime_error("fit_rank_one_edit: non-finite factor");
  if (trace_out) *trace_out = std::move(trace);
  return edit;
}

// ---------------------------------------------------------------------------
// Materialization
// ---------------------------------------------------------------------------

// W ← W + u·vᵀ on a deep copy; the original instance is untouched. The
// result is frozen with a fresh digest.
inline VictimModel apply_edit(const VictimModel& m, const RankOneEdit& edit) {
  const auto& mc = m.config();
  if (edit.layer < 0 || edit.layer >= mc.layers)
    throw std::invalid_argument("apply_edit: layer index out of range");
  if (static_cast<int>(edit.u.size()) != mc.model_dim ||
      static_cast<int>(edit.v.size()) != mc.ff_dim)
    throw std::invalid_argument("apply_edit: factor shapes do not match the model");
  auto edited = m.clone();
  edited.unfreeze();
  edited.add_to_ff_out(edit.layer, edit.delta_flat());
  edited.freeze();
  return edited;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct DefenseReport {
  ExtractionReport pre;   // attack pipeline against the original model
  ExtractionReport post;  // identical pipeline against the edited model
  double delta_acc = 0.0;
  double ppl_pre = 0.0;   // held-out perplexity, original
  double ppl_post = 0.0;  // held-out perplexity, edited
  double ppl_ratio = 0.0;
  int stop_epoch = -1;
  std::string stop_reason;
  std::map<int, double> post_pre_ratio;  // k -> post/pre ER, where pre > 0
  bool ratio_non_increasing = true;

  nlohmann::json to_json() const {
    nlohmann::json ratios = nlohmann::json::object();
    for (const auto& [k, r] : post_pre_ratio) ratios[std::to_string(k)] = r;
    return {{"pre", pre.to_json()},
            {"post", post.to_json()},
            {"delta_acc", delta_acc},
            {"ppl_pre", ppl_pre},
            {"ppl_post", ppl_post},
            {"ppl_ratio", ppl_ratio},
            {"stop_epoch", stop_epoch},
            {"stop_reason", stop_reason},
            {"post_pre_ratio", ratios},
            {"ratio_non_increasing", ratio_non_increasing}};
  }

  std::string csv() const {
    return extraction_csv({{"pre-edit", pre}, {"post-edit", post}});
  }
};

// Generate a suffix-length continuation of `prefix` from `model`; the same
// callable runs against both models so the attack is configured identically.
using GenerateFn =
    std::function<std::vector<int>(const VictimModel&, std::span<const int>)>;

inline DefenseReport evaluate_defense(const VictimModel& original,
                                      const VictimModel& edited, const Dataset& targets,
                                      const Dataset& heldout, const RankOneEdit& edit,
                                      const GenerateFn& gen, int token_offset) {
  if (targets.pairs.empty())
    throw std::invalid_argument("evaluate_defense: no targeted pairs");

  auto run = [&](const VictimModel& model, const char* tag) {
    std::vector<ExtractionPair> pairs;
    pairs.reserve(targets.pairs.size());
    for (const auto& p : targets.pairs)
      pairs.push_back({gen(model, p.prefix), p.suffix, 0});
    return build_extraction_report(std::move(pairs), tag);
  };

  DefenseReport r;
  r.pre = run(original, "pre-edit");
  r.post = run(edited, "post-edit");
  r.delta_acc = delta_accuracy(original, edited, probes_from_dataset(targets),
                               token_offset);
  r.ppl_pre = perplexity(original, heldout, nullptr, token_offset);
  r.ppl_post = perplexity(edited, heldout, nullptr, token_offset);
  r.ppl_ratio = r.ppl_post / r.ppl_pre;
  r.stop_epoch = edit.stop_epoch;
  r.stop_reason = edit.stop_reason;

  double prev = std::numeric_limits<double>::infinity();
  for (int k : extraction_ks()) {
    const double pre_er = r.pre.er.at(k);
    if (pre_er <= 0.0) continue;
    const double ratio = r.post.er.at(k) / pre_er;
    r.post_pre_ratio[k] = ratio;
    if (ratio > prev + 1e-12) r.ratio_non_increasing = false;
    prev = ratio;
  }
  return r;
}

}  // namespace cosped
