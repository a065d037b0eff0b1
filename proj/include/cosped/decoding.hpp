#pragma once

// Suffix generation strategies over a (possibly soft-prompted) frozen model:
// greedy, top-k, top-p (nucleus), beam, diverse beam, and a consistency-based
// selection scheme that samples several candidates and keeps the one whose
// unique-token ratio sits closest to a target.
//
// Conventions shared by every strategy:
//   - generation runs on the incremental KV-cache session, never the tape;
//   - the prefix is fed at an explicit `token_offset` so promptless decoding
//     scores the same positions the victim was trained at (the soft prompt,
//     when present, occupies positions 0..K-1 and then K must equal the
//     offset);
//   - a candidate's cumulative log-probability is always measured under the
//     model's plain full-vocabulary log-softmax (temperature 1), no matter
//     how the tokens were chosen, so scores are comparable across strategies;
//   - sampling ties (equal probabilities) order by lower token id; score ties
//     in beam pruning order by parent hypothesis, then lower token id.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cosped/common.hpp"
#include "cosped/model.hpp"

namespace cosped {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class DecodeStrategy { kGreedy, kTopK, kTopP, kBeam, kDiverseBeam, kSelfConsistency };

inline std::string to_string(DecodeStrategy s) {
  switch (s) {
    case DecodeStrategy::kGreedy: return "greedy";
    case DecodeStrategy::kTopK: return "top_k";
    case DecodeStrategy::kTopP: return "top_p";
    case DecodeStrategy::kBeam: return "beam";
    case DecodeStrategy::kDiverseBeam: return "diverse_beam";
    case DecodeStrategy::kSelfConsistency: return "self_consistency";
  }
  throw std::logic_error("to_string(DecodeStrategy): unreachable");
}

inline DecodeStrategy decode_strategy_from_string(const std::string& s) {
  if (s == "greedy") return DecodeStrategy::kGreedy;
  if (s == "top_k") return DecodeStrategy::kTopK;
  if (s == "top_p") return DecodeStrategy::kTopP;
  if (s == "beam") return DecodeStrategy::kBeam;
  if (s == "diverse_beam") return DecodeStrategy::kDiverseBeam;
  if (s == "self_consistency") return DecodeStrategy::kSelfConsistency;
  throw std::invalid_argument("unknown decoding strategy '" + s + "'");
}

struct DecodeConfig {
  DecodeStrategy strategy = DecodeStrategy::kGreedy;
  int top_k = 10;                  // top_k: support size
  double top_p = 0.7;              // top_p / candidate sampling: nucleus mass
  double temperature = 0.8;        // sampling temperature
  int beam_size = 10;              // beam / diverse_beam: hypothesis count
  int groups = 3;                  // diverse_beam: group count (divides beam_size)
  double diversity_strength = 0.5; // diverse_beam: inter-group repeat penalty
  int n_scd = 3;                   // self_consistency: candidates per batch
  double d_optimal = 0.7;          // self_consistency: target unique-token ratio
  int max_new_tokens = 50;
  int eos_id = -1;                 // < 0 disables early stopping
  std::uint64_t seed = 42;

  void validate() const {
    if (max_new_tokens < 1)
      throw std::invalid_argument("DecodeConfig: max_new_tokens must be >= 1");
    if (!(temperature > 0.0)) throw std::invalid_argument("DecodeConfig: temperature must be > 0");
    if (!(top_p > 0.0 && top_p <= 1.0))
      throw std::invalid_argument("DecodeConfig: top_p must be in (0, 1]");
    if (top_k < 1) throw std::invalid_argument("DecodeConfig: top_k must be >= 1");
    if (beam_size < 1) throw std::invalid_argument("DecodeConfig: beam_size must be >= 1");
    if (groups < 1) throw std::invalid_argument("DecodeConfig: groups must be >= 1");
    if (strategy == DecodeStrategy::kDiverseBeam && beam_size % groups != 0)
      throw std::invalid_argument("DecodeConfig: groups must divide beam_size");
    if (!(diversity_strength >= 0.0))
      throw std::invalid_argument("DecodeConfig: diversity_strength must be >= 0");
    if (n_scd < 1) throw std::invalid_argument("DecodeConfig: n_scd must be >= 1");
    if (!(d_optimal >= 0.0 && d_optimal <= 1.0))
      throw std::invalid_argument("DecodeConfig: d_optimal must be in [0, 1]");
  }

  nlohmann::json to_json() const {
    validate();
    nlohmann::json j;
    j["strategy"] = to_string(strategy);
    j["top_k"] = top_k;
    j["top_p"] = top_p;
    j["temperature"] = temperature;
    j["beam_size"] = beam_size;
    j["groups"] = groups;
    j["diversity_strength"] = diversity_strength;
    j["n_scd"] = n_scd;
    j["d_optimal"] = d_optimal;
    j["max_new_tokens"] = max_new_tokens;
    j["seed"] = seed;
    if (eos_id >= 0) j["eos_id"] = eos_id;
    return j;
  }

  static DecodeConfig from_json(const nlohmann::json& j) {
    DecodeConfig c;
    if (j.contains("strategy"))
      c.strategy = decode_strategy_from_string(j.at("strategy").get<std::string>());
    if (j.contains("top_k")) c.top_k = j.at("top_k").get<int>();
    if (j.contains("top_p")) c.top_p = j.at("top_p").get<double>();
    if (j.contains("temperature")) c.temperature = j.at("temperature").get<double>();
    if (j.contains("beam_size")) c.beam_size = j.at("beam_size").get<int>();
    if (j.contains("groups")) c.groups = j.at("groups").get<int>();
    if (j.contains("diversity_strength"))
      c.diversity_strength = j.at("diversity_strength").get<double>();
    if (j.contains("n_scd")) c.n_scd = j.at("n_scd").get<int>();
    if (j.contains("d_optimal")) c.d_optimal = j.at("d_optimal").get<double>();
    if (j.contains("max_new_tokens")) c.max_new_tokens = j.at("max_new_tokens").get<int>();
    if (j.contains("eos_id")) c.eos_id = j.at("eos_id").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
  }
};

// One generated suffix: the tokens, their summed plain log-probability, and
// the unique-token ratio used by the consistency selection.
struct Candidate {
  std::vector<int> tokens;
  double cum_log_prob = 0.0;
  double diversity = 0.0;  // unique non-EOS tokens / non-EOS tokens, in [0, 1]
};

// ---------------------------------------------------------------------------
// Diversity scoring
// ---------------------------------------------------------------------------

// Unique-token ratio of a sequence, ignoring EOS tokens entirely (the
// sequence is also truncated at the first EOS before scoring). A sequence
// with nothing left scores 0.
inline double diversity_ratio(const std::vector<int>& tokens, int eos_id) {
  std::set<int> uniq;
  int count = 0;
  for (int t : tokens) {
    if (eos_id >= 0 && t == eos_id) break;
    uniq.insert(t);
    ++count;
  }
  if (count == 0) return 0.0;
  return static_cast<double>(uniq.size()) / static_cast<double>(count);
}

// Absolute deviation of the unique-token ratio from the target.
inline double diversity_deviation(const std::vector<int>& tokens, int eos_id,
                                  double d_optimal) {
  return std::fabs(diversity_ratio(tokens, eos_id) - d_optimal);
}

// Index of the most consistent candidate: minimum deviation, ties broken by
// higher cumulative log-probability, then by lower index.
inline int select_most_consistent(const std::vector<Candidate>& cands, int eos_id,
                                  double d_optimal) {
  if (cands.empty()) throw std::invalid_argument("select_most_consistent: no candidates");
  int best = 0;
  double best_dev = diversity_deviation(cands[0].tokens, eos_id, d_optimal);
  for (int i = 1; i < static_cast<int>(cands.size()); ++i) {
    const double dev = diversity_deviation(cands[static_cast<std::size_t>(i)].tokens,
                                           eos_id, d_optimal);
    if (dev < best_dev ||
        (dev == best_dev && cands[static_cast<std::size_t>(i)].cum_log_prob >
                                cands[static_cast<std::size_t>(best)].cum_log_prob)) {
      best = i;
      best_dev = dev;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Generation internals
// ---------------------------------------------------------------------------

namespace detail {

// Plain log-softmax of a logits row (max-stabilized), used for candidate
// scoring independent of the selection rule.
inline std::vector<double> plain_log_softmax(const std::vector<double>& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lz = std::log(z) + mx;
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
  return out;
}

// Temperature softmax over the full vocabulary; ids sorted by descending
// probability with ties toward the lower id — the shared front half of the
// top-k and top-p restrictions.
struct RankedDistribution {
  std::vector<int> order;       // token ids, most probable first
  std::vector<double> probs;    // probabilities in the same order
};

inline RankedDistribution ranked_distribution(const std::vector<double>& logits,
                                              double temperature) {
  const int v = static_cast<int>(logits.size());
  std::vector<double> scaled(logits);
  for (double& x : scaled) x /= temperature;
  const auto lp = plain_log_softmax(scaled);
  RankedDistribution rd;
  rd.order.resize(static_cast<std::size_t>(v));
  std::iota(rd.order.begin(), rd.order.end(), 0);
  std::stable_sort(rd.order.begin(), rd.order.end(), [&](int a, int b) {
    if (lp[static_cast<std::size_t>(a)] != lp[static_cast<std::size_t>(b)])
      return lp[static_cast<std::size_t>(a)] > lp[static_cast<std::size_t>(b)];
    return a < b;
  });
  rd.probs.resize(static_cast<std::size_t>(v));
  for (int i = 0; i < v; ++i)
    rd.probs[static_cast<std::size_t>(i)] =
        std::exp(lp[static_cast<std::size_t>(rd.order[static_cast<std::size_t>(i)])]);
  return rd;
}

// Draw one token from the first `support` entries of a ranked distribution,
// renormalizing over that support.
inline int sample_restricted(const RankedDistribution& rd, int support, Rng& rng) {
  std::vector<double> w(rd.probs.begin(), rd.probs.begin() + support);
  const int pick = rng.categorical(w);
  return rd.order[static_cast<std::size_t>(pick)];
}

// Nucleus size: the smallest head of the ranking whose mass reaches p.
inline int nucleus_size(const RankedDistribution& rd, double p) {
  double mass = 0.0;
  for (std::size_t i = 0; i < rd.probs.size(); ++i) {
    mass += rd.probs[i];
    if (mass >= p) return static_cast<int>(i) + 1;
  }
  return static_cast<int>(rd.probs.size());  // fp shortfall: keep everything
}

// Open a session with the prompt (positions 0..K-1) or, promptless, starting
// at token_offset; then feed the prefix. Validates the context budget so the
// caller gets one clear error instead of a mid-generation overflow.
inline InferenceSession open_session(const VictimModel& m, const SoftPrompt* z,
                                     const std::vector<int>& prefix, int token_offset,
                                     int max_new_tokens) {
  if (token_offset < 0) throw std::invalid_argument("decode: token_offset must be >= 0");
  if (z != nullptr && z->rows() != token_offset)
    throw std::invalid_argument(
        "decode: with a soft prompt the token offset must equal the prompt length");
  const int total = token_offset + static_cast<int>(prefix.size()) + max_new_tokens;
  if (total > m.config().max_context)
    throw std::invalid_argument("decode: prefix plus generation exceeds the context window");
  InferenceSession s(m);
  if (z != nullptr)
    s.feed_soft_prompt(*z);
  else if (token_offset > 0)
    s.start_at(token_offset);
  s.feed_tokens(prefix);
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

// Greedy / top-k / top-p share one autoregressive loop; they differ only in
// how the next token is chosen from the current logits.
inline Candidate decode_sampling(const VictimModel& m, const SoftPrompt* z,
                                 const std::vector<int>& prefix, const DecodeConfig& cfg,
                                 int token_offset) {
  cfg.validate();
  if (prefix.empty()) throw std::invalid_argument("decode: empty prefix");
  auto session = detail::open_session(m, z, prefix, token_offset, cfg.max_new_tokens);
  Rng rng(derive_seed(cfg.seed, "decode-sampling"));
  Candidate cand;
  for (int step = 0; step < cfg.max_new_tokens; ++step) {
    const auto& logits = session.last_logits();
    int chosen = 0;
    switch (cfg.strategy) {
      case DecodeStrategy::kGreedy:
        chosen = static_cast<int>(argmax_index(logits));
        break;
      case DecodeStrategy::kTopK: {
        auto rd = detail::ranked_distribution(logits, cfg.temperature);
        const int support = std::min(cfg.top_k, static_cast<int>(logits.size()));
        chosen = detail::sample_restricted(rd, support, rng);
        break;
      }
      case DecodeStrategy::kTopP: {
        auto rd = detail::ranked_distribution(logits, cfg.temperature);
        chosen = detail::sample_restricted(rd, detail::nucleus_size(rd, cfg.top_p), rng);
        break;
      }
      default:
        throw std::invalid_argument("decode_sampling: strategy is not a sampling strategy");
    }
    cand.cum_log_prob += detail::plain_log_softmax(logits)[static_cast<std::size_t>(chosen)];
    cand.tokens.push_back(chosen);
    if (cfg.eos_id >= 0 && chosen == cfg.eos_id) break;
    if (step + 1 < cfg.max_new_tokens) session.feed_token(chosen);
  }
  cand.diversity = diversity_ratio(cand.tokens, cfg.eos_id);
  return cand;
}

namespace detail {

struct BeamHypothesis {
  std::vector<int> tokens;
  double cum_log_prob = 0.0;
  InferenceSession session;
  bool finished = false;
};

// Length-normalized score used for the final ranking; pruning during the
// search compares raw cumulative log-probabilities (all live hypotheses have
// equal length, so the two orders agree there).
inline double normalized_score(const BeamHypothesis& h) {
  return h.cum_log_prob / static_cast<double>(std::max<std::size_t>(h.tokens.size(), 1));
}

// One beam-search step over `live` hypotheses. `penalty` maps token id ->
// additive score penalty (diverse groups penalize tokens earlier groups chose
// at this step); empty means no penalty. Returns the pruned next generation.
inline std::vector<BeamHypothesis> beam_step(const std::vector<BeamHypothesis>& live,
                                             int width, const std::vector<double>& penalty) {
  struct Expansion {
    int hyp;
    int token;
    double cum;       // true cumulative log-probability
    double rank_key;  // cumulative including any diversity penalty
  };
  std::vector<Expansion> exps;
  for (int hi = 0; hi < static_cast<int>(live.size()); ++hi) {
    const auto lp = plain_log_softmax(live[static_cast<std::size_t>(hi)].session.last_logits());
    for (int t = 0; t < static_cast<int>(lp.size()); ++t) {
      const double cum = live[static_cast<std::size_t>(hi)].cum_log_prob +
                         lp[static_cast<std::size_t>(t)];
      const double pen = penalty.empty() ? 0.0 : penalty[static_cast<std::size_t>(t)];
      exps.push_back({hi, t, cum, cum - pen});
    }
  }
  std::stable_sort(exps.begin(), exps.end(), [](const Expansion& a, const Expansion& b) {
    if (a.rank_key != b.rank_key) return a.rank_key > b.rank_key;
    if (a.hyp != b.hyp) return a.hyp < b.hyp;
    return a.token < b.token;
  });
  const int keep = std::min(width, static_cast<int>(exps.size()));
  std::vector<BeamHypothesis> next;
  next.reserve(static_cast<std::size_t>(keep));
  for (int i = 0; i < keep; ++i) {
    const auto& e = exps[static_cast<std::size_t>(i)];
    BeamHypothesis h = live[static_cast<std::size_t>(e.hyp)];  // copies the KV session
    h.tokens.push_back(e.token);
    h.cum_log_prob = e.cum;
    next.push_back(std::move(h));
  }
  return next;
}

// Feed each unfinished hypothesis's newest token (deferred so finished or
// final-step hypotheses never overflow the context).
inline void advance_sessions(std::vector<BeamHypothesis>& hyps, int eos_id) {
  for (auto& h : hyps) {
    if (eos_id >= 0 && !h.tokens.empty() && h.tokens.back() == eos_id) h.finished = true;
    if (!h.finished) h.session.feed_token(h.tokens.back());
  }
}

}  // namespace detail

inline Candidate decode_beam(const VictimModel& m, const SoftPrompt* z,
                             const std::vector<int>& prefix, const DecodeConfig& cfg,
                             int token_offset) {
  cfg.validate();
  if (prefix.empty()) throw std::invalid_argument("decode: empty prefix");
  const bool diverse = cfg.strategy == DecodeStrategy::kDiverseBeam;
  const int group_count = diverse ? cfg.groups : 1;
  const int group_width = cfg.beam_size / group_count;
  if (diverse && cfg.beam_size % cfg.groups != 0)
    throw std::invalid_argument("decode: groups must divide beam_size");

  // Every group starts from the same fed-prefix state.
  auto root = detail::open_session(m, z, prefix, token_offset, cfg.max_new_tokens);
  std::vector<std::vector<detail::BeamHypothesis>> groups(
      static_cast<std::size_t>(group_count));
  for (auto& g : groups)
    g.push_back(detail::BeamHypothesis{{}, 0.0, root, false});  // copies the session

  const int vocab = m.config().vocab_size;
  std::vector<detail::BeamHypothesis> finished;
  for (int step = 0; step < cfg.max_new_tokens; ++step) {
    // Tokens chosen at THIS step by earlier groups, for the diversity penalty.
    std::vector<double> step_counts(static_cast<std::size_t>(vocab), 0.0);
    for (int gi = 0; gi < group_count; ++gi) {
      auto& g = groups[static_cast<std::size_t>(gi)];
      if (g.empty()) continue;
      std::vector<double> penalty;
      if (diverse && gi > 0 && cfg.diversity_strength > 0.0) {
        penalty.resize(static_cast<std::size_t>(vocab));
        for (int t = 0; t < vocab; ++t)
          penalty[static_cast<std::size_t>(t)] =
              cfg.diversity_strength * step_counts[static_cast<std::size_t>(t)];
      }
      g = detail::beam_step(g, group_width, penalty);
      for (const auto& h : g) ++step_counts[static_cast<std::size_t>(h.tokens.back())];
      // Retire finished hypotheses; feed the rest (skip the feed after the
      // final step — their logits are never read).
      if (step + 1 < cfg.max_new_tokens) {
        detail::advance_sessions(g, cfg.eos_id);
        std::vector<detail::BeamHypothesis> still_live;
        for (auto& h : g) {
          if (h.finished)
            finished.push_back(std::move(h));
          else
            still_live.push_back(std::move(h));
        }
        g = std::move(still_live);
      }
    }
  }
  for (auto& g : groups)
    for (auto& h : g) finished.push_back(std::move(h));
  if (finished.empty()) throw std::logic_error("decode_beam: no hypotheses survived");

  const auto* best = &finished.front();
  for (const auto& h : finished)
    if (detail::normalized_score(h) > detail::normalized_score(*best)) best = &h;
  Candidate cand;
  cand.tokens = best->tokens;
  cand.cum_log_prob = best->cum_log_prob;
  cand.diversity = diversity_ratio(cand.tokens, cfg.eos_id);
  return cand;
}

// Sample n_scd nucleus candidates (independent derived seeds) and keep the
// one whose unique-token ratio deviates least from the target.
inline Candidate decode_self_consistency(const VictimModel& m, const SoftPrompt* z,
                                         const std::vector<int>& prefix,
                                         const DecodeConfig& cfg, int token_offset) {
  cfg.validate();
  std::vector<Candidate> cands;
  cands.reserve(static_cast<std::size_t>(cfg.n_scd));
  for (int i = 0; i < cfg.n_scd; ++i) {
    DecodeConfig sub = cfg;
    sub.strategy = DecodeStrategy::kTopP;
    sub.seed = derive_seed(cfg.seed, "scd-candidate", static_cast<std::uint64_t>(i));
    cands.push_back(decode_sampling(m, z, prefix, sub, token_offset));
  }
  return cands[static_cast<std::size_t>(
      select_most_consistent(cands, cfg.eos_id, cfg.d_optimal))];
}

// Strategy dispatch.
inline Candidate decode(const VictimModel& m, const SoftPrompt* z,
                        const std::vector<int>& prefix, const DecodeConfig& cfg,
                        int token_offset) {
  cfg.validate();
  switch (cfg.strategy) {
    case DecodeStrategy::kGreedy:
    case DecodeStrategy::kTopK:
    case DecodeStrategy::kTopP:
      return decode_sampling(m, z, prefix, cfg, token_offset);
    case DecodeStrategy::kBeam:
    case DecodeStrategy::kDiverseBeam:
      return decode_beam(m, z, prefix, cfg, token_offset);
    case DecodeStrategy::kSelfConsistency:
      return decode_self_consistency(m, z, prefix, cfg, token_offset);
  }
  throw std::logic_error("decode: unreachable");
}

}  // namespace cosped
