#pragma once

// Training objectives for soft-prompt tuning: two base losses (mle, focal)
// plus four optional components (smooth, dynamic, additive, common), combined
// as  base + Σ weight_c · component_c.
//
// Every loss exists in two forms that share the same selection logic:
//   *_value  — plain double on a TokenLossVector (oracle/metric path).
//   *_term   — graph node built from the gold-log-prob tensor of a forward
//              pass, so gradients flow back to the soft prompt. Position
//              selection (top-k, set membership) is piecewise-constant in the
//              probabilities, so it is computed from the numeric values and
//              only the chosen entries enter the graph.
//
// Conventions:
//   - token loss ℓ_i = −log p_i with p_i clamped to ≥ 1e-12 (kMinTokenProb),
//     the same clamp the model's suffix evaluation applies;
//   - "top-k" always means the k positions with HIGHEST token loss, i.e.
//     lowest gold probability — the tokens the model is worst at;
//   - additive/common terms are normalized by the SIZE of the token set
//     (mispredict-prone set / high-frequency set), not by the number of
//     matching positions, and are 0 when the set is empty or nothing matches.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cosped/common.hpp"
#include "cosped/corpus.hpp"
#include "cosped/tensor.hpp"

namespace cosped {

// ---------------------------------------------------------------------------
// Token loss vector
// ---------------------------------------------------------------------------

// Per-suffix-position view of one teacher-forced forward pass: the token loss
// ℓ_i = −log p(gold_i), the gold ids, and the model's argmax prediction at
// each position (the mispredict signal the additive loss tracks).
struct TokenLossVector {
  std::vector<double> loss;    // ℓ_i ≥ 0, one per suffix position
  std::vector<int> gold;       // gold suffix token ids
  std::vector<int> predicted;  // argmax token ids at the same positions

  int size() const { return static_cast<int>(loss.size()); }

  void validate() const {
    if (loss.empty()) throw std::invalid_argument("TokenLossVector: empty");
    if (gold.size() != loss.size() || predicted.size() != loss.size())
      throw std::invalid_argument("TokenLossVector: field lengths disagree");
    for (double l : loss)
      if (!std::isfinite(l) || l < 0.0)
        throw std::invalid_argument("TokenLossVector: token loss must be finite and >= 0");
  }

  // Gold probability at position i, inverting ℓ_i = −log p_i.
  double prob(int i) const { return std::exp(-loss[static_cast<std::size_t>(i)]); }
};

// Positions sorted by descending token loss (ties -> lower position first),
// truncated to k. Shared by smooth/dynamic in both value and graph form.
inline std::vector<int> hardest_positions(const std::vector<double>& loss, int k) {
  if (k < 1 || k > static_cast<int>(loss.size()))
    throw std::invalid_argument("hardest_positions: k out of range");
  std::vector<int> order(loss.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return loss[static_cast<std::size_t>(a)] >
                                              loss[static_cast<std::size_t>(b)]; });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

// ---------------------------------------------------------------------------
// Token bookkeeping sets
// ---------------------------------------------------------------------------

// Mispredict counter with a threshold: a token becomes "active" once it has
// been mispredicted at least `threshold` times within the current counting
// window. The tuner resets the window each epoch and the set built from the
// previous window drives the additive term during the next one.
class ErrorProneSet {
 public:
  explicit ErrorProneSet(int threshold = 5) : threshold_(threshold) {
    if (threshold < 1) throw std::invalid_argument("ErrorProneSet: threshold must be >= 1");
  }

  int threshold() const { return threshold_; }
  const std::map<int, long long>& counts() const { return counts_; }
  const std::set<int>& active() const { return active_; }
  bool is_active(int token) const { return active_.count(token) != 0; }

  // Record one pass: every position where the argmax missed the gold token
  // increments that gold token's count. The active set is refreshed at once.
  void update(const TokenLossVector& tlv) {
    tlv.validate();
    for (std::size_t i = 0; i < tlv.gold.size(); ++i)
      if (tlv.predicted[i] != tlv.gold[i]) {
        long long& c = counts_[tlv.gold[i]];
        ++c;
        if (c >= threshold_) active_.insert(tlv.gold[i]);
      }
  }

  // Start a new counting window; the active set is rebuilt from scratch.
  void reset_window() {
    counts_.clear();
    active_.clear();
  }

 private:
  int threshold_;
  std::map<int, long long> counts_;
  std::set<int> active_;
};

// The highest-frequency decile of the vocabulary, measured over a token
// corpus (prefixes + suffixes of the attacker split). |set| = floor(V/10);
// ties on frequency break toward the lower token id. Tokens the corpus never
// uses have frequency 0 and can still enter the set when V/10 exceeds the
// number of used tokens.
class CommonSet {
 public:
  CommonSet() = default;

  static CommonSet from_dataset(const Dataset& d) {
    std::vector<long long> freq(static_cast<std::size_t>(d.vocab_size), 0);
    for (const auto& p : d.pairs) {
      for (int t : p.prefix) ++freq[static_cast<std::size_t>(t)];
      for (int t : p.suffix) ++freq[static_cast<std::size_t>(t)];
    }
    return from_frequencies(freq);
  }

  static CommonSet from_frequencies(const std::vector<long long>& freq) {
    CommonSet cs;
    cs.vocab_size_ = static_cast<int>(freq.size());
    const int take = cs.vocab_size_ / 10;  // floor(0.1·V)
    std::vector<int> order(freq.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      if (freq[static_cast<std::size_t>(a)] != freq[static_cast<std::size_t>(b)])
        return freq[static_cast<std::size_t>(a)] > freq[static_cast<std::size_t>(b)];
      return a < b;
    });
    for (int i = 0; i < take; ++i) cs.members_.insert(order[static_cast<std::size_t>(i)]);
    return cs;
  }

  int vocab_size() const { return vocab_size_; }
  const std::set<int>& members() const { return members_; }
  bool contains(int token) const { return members_.count(token) != 0; }

 private:
  int vocab_size_ = 0;
  std::set<int> members_;
};

// ---------------------------------------------------------------------------
// Loss stack configuration
// ---------------------------------------------------------------------------

enum class BaseLoss { kMle, kFocal };

inline std::string to_string(BaseLoss b) { return b == BaseLoss::kMle ? "mle" : "focal"; }

inline BaseLoss base_loss_from_string(const std::string& s) {
  if (s == "mle") return BaseLoss::kMle;
  if (s == "focal") return BaseLoss::kFocal;
  throw std::invalid_argument("base loss must be 'mle' or 'focal', got '" + s + "'");
}

// One training objective: a base loss plus weighted optional components.
// A component is enabled iff its name appears in `weights`; the smooth and
// dynamic components are mutually exclusive (they are two sizings of the same
// hardest-position average).
struct LossStack {
  BaseLoss base = BaseLoss::kMle;
  std::map<std::string, double> weights;  // subset of {smooth,dynamic,additive,common}

  double focal_alpha = 0.6;    // base=focal: per-token weight α_t
  double focal_gamma = 2.0;    // base=focal: focusing exponent γ
  int smooth_n = 5;            // smooth: fixed hardest-position count N
  int dynamic_n = 5;           // dynamic: baseline count N
  double dynamic_t = 0.1;      // dynamic: tolerance T_D on the mle loss
  double dynamic_alpha = 5.0;  // dynamic: widening rate α
  double additive_alpha = 0.7; // additive: per-position weight α
  double common_beta = 0.2;    // common: per-position weight β

  bool has(const std::string& name) const { return weights.count(name) != 0; }
  double weight(const std::string& name) const { return weights.at(name); }

  void validate() const {
    static const std::set<std::string> known = {"smooth", "dynamic", "additive", "common"};
    for (const auto& [name, w] : weights) {
      if (!known.count(name))
        throw std::invalid_argument("LossStack: unknown component '" + name + "'");
      if (!(w >= 0.0) || !std::isfinite(w))
        throw std::invalid_argument("LossStack: weight for '" + name + "' must be >= 0");
    }
    if (has("smooth") && has("dynamic"))
      throw std::invalid_argument("LossStack: smooth and dynamic are mutually exclusive");
    if (!(focal_gamma >= 0.0)) throw std::invalid_argument("LossStack: focal_gamma must be >= 0");
    if (!(focal_alpha > 0.0 && focal_alpha <= 1.0))
      throw std::invalid_argument("LossStack: focal_alpha must be in (0, 1]");
    if (smooth_n < 1) throw std::invalid_argument("LossStack: smooth_n must be >= 1");
    if (dynamic_n < 1) throw std::invalid_argument("LossStack: dynamic_n must be >= 1");
    if (!(dynamic_t > 0.0)) throw std::invalid_argument("LossStack: dynamic_t must be > 0");
    if (!(dynamic_alpha >= 0.0))
      throw std::invalid_argument("LossStack: dynamic_alpha must be >= 0");
    if (!(additive_alpha >= 0.0))
      throw std::invalid_argument("LossStack: additive_alpha must be >= 0");
    if (!(common_beta >= 0.0)) throw std::invalid_argument("LossStack: common_beta must be >= 0");
  }

  // Short human/filename-friendly identifier, e.g. "focal+dynamic+common".
  std::string name() const {
    std::string s = to_string(base);
    for (const char* c : {"smooth", "dynamic", "additive", "common"})
      if (has(c)) s += std::string("+") + c;
    return s;
  }

  nlohmann::json to_json() const {
    validate();
    nlohmann::json j;
    j["base"] = to_string(base);
    j["weights"] = nlohmann::json::object();
    for (const auto& [name, w] : weights) j["weights"][name] = w;
    j["focal_alpha"] = focal_alpha;
    j["focal_gamma"] = focal_gamma;
    j["smooth_n"] = smooth_n;
    j["dynamic_n"] = dynamic_n;
    j["dynamic_t"] = dynamic_t;
    j["dynamic_alpha"] = dynamic_alpha;
    j["additive_alpha"] = additive_alpha;
    j["common_beta"] = common_beta;
    return j;
  }

  static LossStack from_json(const nlohmann::json& j) {
    LossStack s;
    if (j.contains("base")) s.base = base_loss_from_string(j.at("base").get<std::string>());
    if (j.contains("weights")) {
      if (!j.at("weights").is_object())
        throw std::invalid_argument("LossStack: 'weights' must be an object");
      for (const auto& [name, w] : j.at("weights").items())
        s.weights[name] = w.get<double>();
    }
    if (j.contains("focal_alpha")) s.focal_alpha = j.at("focal_alpha").get<double>();
    if (j.contains("focal_gamma")) s.focal_gamma = j.at("focal_gamma").get<double>();
    if (j.contains("smooth_n")) s.smooth_n = j.at("smooth_n").get<int>();
    if (j.contains("dynamic_n")) s.dynamic_n = j.at("dynamic_n").get<int>();
    if (j.contains("dynamic_t")) s.dynamic_t = j.at("dynamic_t").get<double>();
    if (j.contains("dynamic_alpha")) s.dynamic_alpha = j.at("dynamic_alpha").get<double>();
    if (j.contains("additive_alpha")) s.additive_alpha = j.at("additive_alpha").get<double>();
    if (j.contains("common_beta")) s.common_beta = j.at("common_beta").get<double>();
    s.validate();
    return s;
  }
};

// The canonical 17-stack experiment grid, unit weights, default
// hyperparameters. Plain mle is the baseline row; every other row pairs a
// base with a hardest-position component (smooth or dynamic, never both) and
// optionally adds the set-based components: additive and common ride only on
// top of a hardest-position row, and focal is never run bare.
inline std::vector<LossStack> canonical_loss_stacks() {
  auto make = [](BaseLoss base, std::initializer_list<const char*> comps) {
    LossStack s;
    s.base = base;
    for (const char* c : comps) s.weights[c] = 1.0;
    return s;
  };
  std::vector<LossStack> out;
  out.push_back(make(BaseLoss::kMle, {}));
  for (BaseLoss base : {BaseLoss::kMle, BaseLoss::kFocal})
    for (const char* hardest : {"smooth", "dynamic"}) {
      out.push_back(make(base, {hardest}));
      out.push_back(make(base, {hardest, "additive"}));
      out.push_back(make(base, {hardest, "common"}));
      out.push_back(make(base, {hardest, "additive", "common"}));
    }
  if (out.size() != 17) throw std::logic_error("canonical_loss_stacks: grid size");
  return out;
}

// ---------------------------------------------------------------------------
// Scalar losses (oracle path)
// ---------------------------------------------------------------------------

inline double mle_value(const TokenLossVector& tlv) {
  tlv.validate();
  double s = 0.0;
  for (double l : tlv.loss) s += l;
  return s / static_cast<double>(tlv.size());
}

inline double focal_value(const TokenLossVector& tlv, double alpha_t, double gamma) {
  tlv.validate();
  if (!(gamma >= 0.0)) throw std::invalid_argument("focal_value: gamma must be >= 0");
  if (!(alpha_t > 0.0 && alpha_t <= 1.0))
    throw std::invalid_argument("focal_value: alpha_t must be in (0, 1]");
  double s = 0.0;
  for (int i = 0; i < tlv.size(); ++i) {
    const double p = tlv.prob(i);
    s += alpha_t * std::pow(1.0 - p, gamma) * tlv.loss[static_cast<std::size_t>(i)];
  }
  return s / static_cast<double>(tlv.size());
}

inline double smooth_value(const TokenLossVector& tlv, int n) {
  tlv.validate();
  const auto idx = hardest_positions(tlv.loss, n);
  double s = 0.0;
  for (int i : idx) s += tlv.loss[static_cast<std::size_t>(i)];
  return s / static_cast<double>(n);
}

// Hardest-position count as a function of the current mle loss: stays at n
// while the loss is within tolerance, widens linearly beyond it; fractional
// values floor, and the result is clamped to [1, suffix_len].
inline int dynamic_k(double mle, int n, double t_d, double alpha, int suffix_len) {
  if (n < 1) throw std::invalid_argument("dynamic_k: n must be >= 1");
  if (!(t_d > 0.0)) throw std::invalid_argument("dynamic_k: t_d must be > 0");
  if (!(alpha >= 0.0)) throw std::invalid_argument("dynamic_k: alpha must be >= 0");
  if (suffix_len < 1) throw std::invalid_argument("dynamic_k: suffix_len must be >= 1");
  double k = (mle <= t_d) ? static_cast<double>(n)
                          : static_cast<double>(n) + alpha * (mle - t_d);
  int ki = static_cast<int>(std::floor(k));
  return std::clamp(ki, 1, suffix_len);
}

inline double dynamic_value(const TokenLossVector& tlv, int n, double t_d, double alpha) {
  tlv.validate();
  const int k = dynamic_k(mle_value(tlv), n, t_d, alpha, tlv.size());
  return smooth_value(tlv, k);
}

inline double additive_value(const TokenLossVector& tlv, const ErrorProneSet& eps,
                             double alpha) {
  tlv.validate();
  if (!(alpha >= 0.0)) throw std::invalid_argument("additive_value: alpha must be >= 0");
  const std::size_t set_size = eps.active().size();
  if (set_size == 0) return 0.0;
  double s = 0.0;
  for (int i = 0; i < tlv.size(); ++i)
    if (eps.is_active(tlv.gold[static_cast<std::size_t>(i)]))
      s += alpha * tlv.loss[static_cast<std::size_t>(i)];
  return s / static_cast<double>(set_size);
}

inline double common_value(const TokenLossVector& tlv, const CommonSet& cs, double beta) {
  tlv.validate();
  if (!(beta >= 0.0)) throw std::invalid_argument("common_value: beta must be >= 0");
  const std::size_t set_size = cs.members().size();
  if (set_size == 0) return 0.0;
  double s = 0.0;
  for (int i = 0; i < tlv.size(); ++i)
    if (cs.contains(tlv.gold[static_cast<std::size_t>(i)]))
      s += beta * tlv.loss[static_cast<std::size_t>(i)];
  return s / static_cast<double>(set_size);
}

inline double combine_value(const LossStack& stack, const TokenLossVector& tlv,
                            const ErrorProneSet& eps, const CommonSet& cs) {
  stack.validate();
  double total = stack.base == BaseLoss::kMle
                     ? mle_value(tlv)
                     : focal_value(tlv, stack.focal_alpha, stack.focal_gamma);
  if (stack.has("smooth"))
    total += stack.weight("smooth") * smooth_value(tlv, std::min(stack.smooth_n, tlv.size()));
  if (stack.has("dynamic"))
    total += stack.weight("dynamic") *
             dynamic_value(tlv, stack.dynamic_n, stack.dynamic_t, stack.dynamic_alpha);
  if (stack.has("additive"))
    total += stack.weight("additive") * additive_value(tlv, eps, stack.additive_alpha);
  if (stack.has("common"))
    total += stack.weight("common") * common_value(tlv, cs, stack.common_beta);
  return total;
}

// ---------------------------------------------------------------------------
// Graph losses (gradient path)
// ---------------------------------------------------------------------------
//
// Input is the gold-log-prob vector of a SuffixEvaluation (length k_S, values
// already clamped at log 1e-12) plus the numeric TokenLossVector mirror of
// the same pass for position selection.

namespace detail {

// ℓ = −log p as a graph vector.
inline Tensor token_loss_vec(const Tensor& gold_log_probs) {
  if (gold_log_probs.ndim() != 1 || gold_log_probs.cols() < 1)
    throw std::invalid_argument("token_loss_vec: need a nonempty vector");
  return neg(gold_log_probs);
}

}  // namespace detail

inline Tensor mle_term(const Tensor& gold_log_probs) {
  return mean(detail::token_loss_vec(gold_log_probs));
}

inline Tensor focal_term(const Tensor& gold_log_probs, double alpha_t, double gamma) {
  if (!(gamma >= 0.0)) throw std::invalid_argument("focal_term: gamma must be >= 0");
  if (!(alpha_t > 0.0 && alpha_t <= 1.0))
    throw std::invalid_argument("focal_term: alpha_t must be in (0, 1]");
  Tensor lv = detail::token_loss_vec(gold_log_probs);
  // (1 − p)^γ with p = exp(log p); the weight is part of the graph, so the
  // gradient includes the d(1−p)^γ term, matching finite differences.
  Tensor one_minus_p = affine(exp(gold_log_probs), -1.0, 1.0);
  Tensor weighted = mul(pow_const(one_minus_p, gamma), lv);
  return mean(affine(weighted, alpha_t, 0.0));
}

inline Tensor hardest_mean_term(const Tensor& gold_log_probs,
                                const std::vector<double>& numeric_loss, int k) {
  Tensor lv = detail::token_loss_vec(gold_log_probs);
  return mean(take(lv, hardest_positions(numeric_loss, k)));
}

// Membership-filtered weighted sum normalized by the token-set size. Returns
// a constant-0 node when nothing qualifies so callers can add it uniformly.
inline Tensor set_term(const Tensor& gold_log_probs, const std::vector<int>& gold,
                       const std::set<int>& token_set, double per_position_weight) {
  if (static_cast<int>(gold.size()) != gold_log_probs.cols())
    throw std::invalid_argument("set_term: gold length mismatch");
  std::vector<int> idx;
  for (std::size_t i = 0; i < gold.size(); ++i)
    if (token_set.count(gold[i])) idx.push_back(static_cast<int>(i));
  if (token_set.empty() || idx.empty()) return Tensor::scalar(0.0);
  Tensor lv = detail::token_loss_vec(gold_log_probs);
  Tensor picked = take(lv, idx);
  const double scale = per_position_weight / static_cast<double>(token_set.size());
  return affine(sum(picked), scale, 0.0);
}

// Combined objective for one sequence, as a graph scalar. `tlv` must be the
// numeric mirror of `gold_log_probs` (same pass): it drives position
// selection and the dynamic sizing, which are treated as constants w.r.t. Z.
inline Tensor combine_term(const LossStack& stack, const Tensor& gold_log_probs,
                           const TokenLossVector& tlv, const ErrorProneSet& eps,
                           const CommonSet& cs) {
  stack.validate();
  tlv.validate();
  if (tlv.size() != gold_log_probs.cols())
    throw std::invalid_argument("combine_term: tlv does not match gold_log_probs");
  Tensor total = stack.base == BaseLoss::kMle
                     ? mle_term(gold_log_probs)
                     : focal_term(gold_log_probs, stack.focal_alpha, stack.focal_gamma);
  if (stack.has("smooth")) {
    const int n = std::min(stack.smooth_n, tlv.size());
    Tensor t = hardest_mean_term(gold_log_probs, tlv.loss, n);
    total = add(total, affine(t, stack.weight("smooth"), 0.0));
  }
  if (stack.has("dynamic")) {
    const int k = dynamic_k(mle_value(tlv), stack.dynamic_n, stack.dynamic_t,
                            stack.dynamic_alpha, tlv.size());
    Tensor t = hardest_mean_term(gold_log_probs, tlv.loss, k);
    total = add(total, affine(t, stack.weight("dynamic"), 0.0));
  }
  if (stack.has("additive")) {
    Tensor t = set_term(gold_log_probs, tlv.gold, eps.active(), stack.additive_alpha);
    total = add(total, affine(t, stack.weight("additive"), 0.0));
  }
  if (stack.has("common")) {
    Tensor t = set_term(gold_log_probs, tlv.gold, cs.members(), stack.common_beta);
    total = add(total, affine(t, stack.weight("common"), 0.0));
  }
  return total;
}

// Numeric mirror of a suffix evaluation: token losses from the (already
// clamped) gold log-probs plus the ids needed for set membership.
inline TokenLossVector token_losses_from_evaluation(const Tensor& gold_log_probs,
                                                    const std::vector<int>& gold,
                                                    const std::vector<int>& predicted) {
  TokenLossVector tlv;
  const auto v = gold_log_probs.values();
  tlv.loss.assign(v.begin(), v.end());
  for (double& l : tlv.loss) l = -l;
  tlv.gold = gold;
  tlv.predicted = predicted;
  tlv.validate();
  return tlv;
}

}  // namespace cosped
