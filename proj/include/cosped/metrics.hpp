// Evaluation surface: exact extraction rate over the fixed k grid,
// perplexity under teacher forcing, and the first-token accuracy shift
// between two models (the editing defense's utility probe).
//
// Everything here is a pure function over immutable inputs; reports carry
// their own invariants (percentages in range, ER non-increasing in k) and
// refuse to serialize when violated.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cosped/losses.hpp"
#include "cosped/model.hpp"

namespace cosped {

// The match lengths every extraction report is scored at, ascending.
inline const std::vector<int>& extraction_ks() {
  static const std::vector<int> ks{5, 10, 25, 30, 40, 50};
  return ks;
}

// ---------------------------------------------------------------------------
// Exact extraction rate
// ---------------------------------------------------------------------------

struct ExtractionPair {
  std::vector<int> generated;
  std::vector<int> gold;
  int match_length = 0;  // longest common prefix of generated and gold
};

inline int common_prefix_length(std::span<const int> a, std::span<const int> b) {
  const std::size_t n = std::min(a.size(), b.size());
  std::size_t i = 0;
  while (i < n && a[i] == b[i]) ++i;
  return static_cast<int>(i);
}

// Percentage of pairs whose first k generated tokens equal the gold suffix
// exactly. A sequence shorter than k (generated or gold) cannot match:
// partial reproductions count as misses, which is what makes the rate
// non-increasing in k.
inline double exact_extraction_rate(const std::vector<ExtractionPair>& pairs, int k) {
  if (pairs.empty())
    throw std::invalid_argument("exact_extraction_rate: empty pair list");
  if (k < 1) throw std::invalid_argument("exact_extraction_rate: k must be >= 1");
  int hits = 0;
  for (const auto& p : pairs) {
    if (static_cast<int>(p.generated.size()) < k) continue;
    if (static_cast<int>(p.gold.size()) < k) continue;
    if (std::equal(p.generated.begin(), p.generated.begin() + k, p.gold.begin()))
      ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(pairs.size());
}

struct ExtractionReport {
  std::vector<ExtractionPair> pairs;
  std::map<int, double> er;  // k -> percentage over the fixed grid
  std::string fingerprint;   // provenance string chosen by the caller

  void validate() const {
    double prev = 101.0;
    for (int k : extraction_ks()) {
      auto it = er.find(k);
      if (it == er.end())
        throw std::logic_error("ExtractionReport: missing ER_" + std::to_string(k));
      if (it->second < 0.0 || it->second > 100.0)
        throw std::logic_error("ExtractionReport: ER out of [0, 100]");
      if (it->second > prev)
        throw std::logic_error("ExtractionReport: ER must be non-increasing in k");
      prev = it->second;
    }
  }

  nlohmann::json to_json() const {
    validate();
    nlohmann::json j;
    j["fingerprint"] = fingerprint;
    nlohmann::json jer = nlohmann::json::object();
    for (const auto& [k, v] : er) jer[std::to_string(k)] = v;
    j["er"] = jer;
    nlohmann::json jp = nlohmann::json::array();
    for (const auto& p : pairs)
      jp.push_back({{"generated", p.generated},
                    {"gold", p.gold},
                    {"match_length", p.match_length}});
    j["pairs"] = jp;
    return j;
  }

  static ExtractionReport from_json(const nlohmann::json& j) {
    ExtractionReport r;
    r.fingerprint = j.at("fingerprint").get<std::string>();
    for (const auto& [key, v] : j.at("er").items())
      r.er[std::stoi(key)] = v.get<double>();
    for (const auto& jp : j.at("pairs")) {
      ExtractionPair p;
      p.generated = jp.at("generated").get<std::vector<int>>();
      p.gold = jp.at("gold").get<std::vector<int>>();
      p.match_length = jp.at("match_length").get<int>();
      r.pairs.push_back(std::move(p));
    }
    r.validate();
    return r;
  }
};

inline ExtractionReport build_extraction_report(std::vector<ExtractionPair> pairs,
                                                std::string fingerprint) {
  if (pairs.empty())
    throw std::invalid_argument("build_extraction_report: empty pair list");
  ExtractionReport r;
  for (auto& p : pairs) p.match_length = common_prefix_length(p.generated, p.gold);
  r.pairs = std::move(pairs);
  r.fingerprint = std::move(fingerprint);
  for (int k : extraction_ks()) r.er[k] = exact_extraction_rate(r.pairs, k);
  r.validate();
  return r;
}

// CSV table, one method per row, one column per k in the grid.
inline std::string extraction_csv(
    const std::vector<std::pair<std::string, ExtractionReport>>& rows) {
  std::ostringstream os;
  os << "method";
  for (int k : extraction_ks()) os << ",ER_" << k;
  os << "\n";
  for (const auto& [name, report] : rows) {
    report.validate();
    os << name;
    for (int k : extraction_ks()) {
      std::ostringstream cell;
      cell.setf(std::ios::fixed);
      cell.precision(2);
      cell << report.er.at(k);
      os << "," << cell.str();
    }
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Perplexity
// ---------------------------------------------------------------------------

// exp(mean next-token negative log-likelihood), pooled over every suffix
// position of every pair, teacher-forced. With a prompt supplied this runs
// the identical conditioning path as tuning; token_offset keeps promptless
// evaluation at the positions the victim was trained at (default: prompt
// length, or 0 without one — pass the training offset explicitly for
// baseline runs). Log-probs arrive pre-clamped at log(1e-12), so the mean
// cannot overflow.
inline double perplexity(const VictimModel& m, const Dataset& d,
                         const SoftPrompt* z = nullptr, int token_offset = -1,
                         const ForwardOverride& ov = {}) {
  if (d.pairs.empty()) throw std::invalid_argument("perplexity: empty dataset");
  double nll_sum = 0.0;
  std::size_t positions = 0;
  for (const auto& pair : d.pairs) {
    auto ev = m.forward_with_soft_prompt(z, pair.prefix, pair.suffix, ov, token_offset);
    for (double glp : ev.gold_log_probs.values()) nll_sum -= glp;
    positions += ev.gold_log_probs.values().size();
  }
  return std::exp(nll_sum / static_cast<double>(positions));
}

// ---------------------------------------------------------------------------
// First-token accuracy shift
// ---------------------------------------------------------------------------

// One probe: does greedy continuation of this prefix start with `target`?
struct Probe {
  std::vector<int> prefix;
  int target = 0;
};

inline std::vector<Probe> probes_from_dataset(const Dataset& d) {
  std::vector<Probe> out;
  out.reserve(d.pairs.size());
  for (const auto& p : d.pairs) out.push_back({p.prefix, p.suffix.at(0)});
  return out;
}

inline double first_token_hit_rate(const VictimModel& m, const std::vector<Probe>& probes,
                                   int token_offset = 0) {
  if (probes.empty()) throw std::invalid_argument("first_token_hit_rate: no probes");
  int hits = 0;
  for (const auto& probe : probes) {
    // Teacher-forced evaluation of a one-token suffix: predicted[0] is the
    // argmax right after the prefix, i.e. the greedy first token.
    const std::vector<int> one{probe.target};
    auto ev = m.forward_with_soft_prompt(nullptr, probe.prefix, one, {}, token_offset);
    if (ev.predicted.at(0) == probe.target) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(probes.size());
}

// Hit rate after minus hit rate before, in [-1, 1]. Negative values mean the
// second model generates the targets less often — the desired direction for
// a suppression edit evaluated on its targeted prefixes.
inline double delta_accuracy(const VictimModel& before, const VictimModel& after,
                             const std::vector<Probe>& probes, int token_offset = 0) {
  return first_token_hit_rate(after, probes, token_offset) -
         first_token_hit_rate(before, probes, token_offset);
}

}  // namespace cosped
