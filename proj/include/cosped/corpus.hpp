#pragma once

// Synthetic memorization corpus: fixed-length (prefix, suffix) token pairs
// over a small vocabulary, plus the attacker/evaluation split.
//
// Two generation modes:
//   uniform   — every token i.i.d. uniform over the vocabulary (control).
//   templated — sequences are stitched from a bank of repeated motifs whose
//               tokens are drawn Zipf-style from a sub-pool, interleaved with
//               uniform filler. This gives the corpus the skewed unigram
//               statistics that frequency-sensitive losses need, and gives a
//               small model something compressible to memorize.
//
// Disk format: JSON Lines, one pair per line:
//   {"id": int, "prefix": [ints], "suffix": [ints]}

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "cosped/common.hpp"

namespace cosped {

using TokenSeq = std::vector<int>;

struct SequencePair {
  int id = 0;
  TokenSeq prefix;
  TokenSeq suffix;
};

struct Dataset {
  int vocab_size = 0;
  int k_prefix = 0;
  int k_suffix = 0;
  std::vector<SequencePair> pairs;

  bool empty() const { return pairs.empty(); }
  std::size_t size() const { return pairs.size(); }

  const SequencePair* find(int id) const {
    for (const auto& p : pairs)
      if (p.id == id) return &p;
    return nullptr;
  }
};

struct DatasetSplits {
  Dataset attacker;    // tuning split
  Dataset evaluation;  // held-out extraction-measurement split
};

enum class CorpusStructure { kUniform, kTemplated };

inline CorpusStructure corpus_structure_from_string(const std::string& s) {
  if (s == "uniform") return CorpusStructure::kUniform;
  if (s == "templated") return CorpusStructure::kTemplated;
  throw std::invalid_argument("unknown corpus structure: " + s);
}

inline std::string to_string(CorpusStructure s) {
  return s == CorpusStructure::kUniform ? "uniform" : "templated";
}

namespace detail {

// One templated sequence: motif splices with uniform filler between them.
inline TokenSeq templated_sequence(int len, int vocab_size,
                                   const std::vector<TokenSeq>& motifs,
                                   double motif_prob, Rng& rng) {
  TokenSeq out;
  out.reserve(static_cast<std::size_t>(len) + 8);
  std::vector<double> motif_weights(motifs.size());
  for (std::size_t i = 0; i < motifs.size(); ++i)
    motif_weights[i] = 1.0 / static_cast<double>(i + 1);
  while (static_cast<int>(out.size()) < len) {
    if (rng.uniform() < motif_prob) {
      const auto& m = motifs[static_cast<std::size_t>(rng.categorical(motif_weights))];
      out.insert(out.end(), m.begin(), m.end());
    } else {
      out.push_back(rng.uniform_int(vocab_size));
    }
  }
  out.resize(static_cast<std::size_t>(len));
  return out;
}

// Fraction of corpus token mass covered by the most frequent 10% of ids.
inline double top_decile_mass(const std::vector<SequencePair>& pairs, int vocab_size) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(vocab_size), 0);
  std::int64_t total = 0;
  for (const auto& p : pairs) {
    for (int t : p.prefix) ++counts[static_cast<std::size_t>(t)], ++total;
    for (int t : p.suffix) ++counts[static_cast<std::size_t>(t)], ++total;
  }
  std::sort(counts.begin(), counts.end(), std::greater<>());
  const int top = std::max(1, vocab_size / 10);
  std::int64_t covered = 0;
  for (int i = 0; i < top; ++i) covered += counts[static_cast<std::size_t>(i)];
  return static_cast<double>(covered) / static_cast<double>(total);
}

inline bool prefixes_unique(const std::vector<SequencePair>& pairs) {
  std::set<TokenSeq> seen;
  for (const auto& p : pairs)
    if (!seen.insert(p.prefix).second) return false;
  return true;
}

}  // namespace detail

// Deterministic corpus generation. The templated mode re-rolls (with a salted
// seed and a raised motif rate) until the skew gate — top-10% of token ids
// covering at least 40% of corpus mass — passes and all prefixes are unique,
// so downstream frequency machinery never sees a degenerate corpus.
inline Dataset generate_corpus(std::uint64_t seed, int n_pairs, int k_prefix,
                               int k_suffix, int vocab_size,
                               CorpusStructure structure) {
  if (n_pairs < 2) throw std::invalid_argument("generate_corpus: n_pairs must be >= 2");
  if (k_prefix < 1 || k_suffix < 1)
    throw std::invalid_argument("generate_corpus: prefix/suffix lengths must be positive");
  if (vocab_size <= k_suffix)
    throw std::invalid_argument("generate_corpus: vocab_size must exceed k_suffix");

  constexpr int kMaxAttempts = 16;
  double motif_prob = 0.75;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    Rng rng(derive_seed(seed, "corpus", static_cast<std::uint64_t>(attempt)));
    Dataset d;
    d.vocab_size = vocab_size;
    d.k_prefix = k_prefix;
    d.k_suffix = k_suffix;
    d.pairs.reserve(static_cast<std::size_t>(n_pairs));

    if (structure == CorpusStructure::kUniform) {
      for (int i = 0; i < n_pairs; ++i) {
        SequencePair p;
        p.id = i;
        p.prefix.resize(static_cast<std::size_t>(k_prefix));
        p.suffix.resize(static_cast<std::size_t>(k_suffix));
        for (auto& t : p.prefix) t = rng.uniform_int(vocab_size);
        for (auto& t : p.suffix) t = rng.uniform_int(vocab_size);
        d.pairs.push_back(std::move(p));
      }
      if (!detail::prefixes_unique(d.pairs)) continue;  // vanishingly rare
      return d;
    }

    // Templated: motif tokens come from a quarter-vocabulary pool, sampled
    // with 1/(rank+1) weights so a small set of ids dominates.
    const int pool_size = std::max(4, vocab_size / 4);
    std::vector<int> all_ids(static_cast<std::size_t>(vocab_size));
    for (int i = 0; i < vocab_size; ++i) all_ids[static_cast<std::size_t>(i)] = i;
    rng.shuffle(all_ids);
    std::vector<int> pool(all_ids.begin(), all_ids.begin() + pool_size);
    std::vector<double> pool_weights(static_cast<std::size_t>(pool_size));
    for (int i = 0; i < pool_size; ++i)
      pool_weights[static_cast<std::size_t>(i)] = 1.0 / static_cast<double>(i + 1);

    const int n_motifs = 12;
    std::vector<TokenSeq> motifs(n_motifs);
    for (auto& m : motifs) {
      const int len = 4 + rng.uniform_int(5);  // 4..8
      m.resize(static_cast<std::size_t>(len));
      for (auto& t : m) t = pool[static_cast<std::size_t>(rng.categorical(pool_weights))];
    }

    // Each prefix opens with two id-derived header tokens. Motif-stitched
    // sequences collide easily (there are only a dozen motifs), and a pair
    // whose prefix is not unique has no well-defined suffix to extract; the
    // header plays the role of a document identifier.
    for (int i = 0; i < n_pairs; ++i) {
      TokenSeq seq = detail::templated_sequence(k_prefix + k_suffix, vocab_size,
                                                motifs, motif_prob, rng);
      if (k_prefix >= 2) {
        seq[0] = i % vocab_size;
        seq[1] = (i / vocab_size) % vocab_size;
      }
      SequencePair p;
      p.id = i;
      p.prefix.assign(seq.begin(), seq.begin() + k_prefix);
      p.suffix.assign(seq.begin() + k_prefix, seq.end());
      d.pairs.push_back(std::move(p));
    }

    if (detail::top_decile_mass(d.pairs, vocab_size) >= 0.40 &&
        detail::prefixes_unique(d.pairs))
      return d;
    motif_prob = std::min(0.95, motif_prob + 0.05);
  }
  throw std::runtime_error("generate_corpus: could not satisfy corpus constraints");
}

// Seeded disjoint split. Membership comes from a shuffle of pair indices;
// each split is then ordered by pair id so iteration order is reproducible
// regardless of how the shuffle happened to land.
inline DatasetSplits split_corpus(const Dataset& d, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0))
    throw std::invalid_argument("split_corpus: ratio must lie strictly between 0 and 1");
  const int n = static_cast<int>(d.pairs.size());
  const int n_attacker = static_cast<int>(std::floor(ratio * n));
  if (n_attacker < 1 || n_attacker >= n)
    throw std::invalid_argument("split_corpus: a split would be empty");

  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(idx);

  DatasetSplits s;
  for (Dataset* part : {&s.attacker, &s.evaluation}) {
    part->vocab_size = d.vocab_size;
    part->k_prefix = d.k_prefix;
    part->k_suffix = d.k_suffix;
  }
  for (int i = 0; i < n; ++i) {
    const auto& p = d.pairs[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
    (i < n_attacker ? s.attacker : s.evaluation).pairs.push_back(p);
  }
  auto by_id = [](const SequencePair& a, const SequencePair& b) { return a.id < b.id; };
  std::sort(s.attacker.pairs.begin(), s.attacker.pairs.end(), by_id);
  std::sort(s.evaluation.pairs.begin(), s.evaluation.pairs.end(), by_id);
  return s;
}

// ---------------------------------------------------------------------------
// JSONL serialization
// ---------------------------------------------------------------------------

inline void write_corpus_jsonl(const std::string& path, const Dataset& d) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_corpus_jsonl: cannot open " + path);
  for (const auto& p : d.pairs) {
    nlohmann::json j;
    j["id"] = p.id;
    j["prefix"] = p.prefix;
    j["suffix"] = p.suffix;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write_corpus_jsonl: write failed for " + path);
}

inline Dataset read_corpus_jsonl(const std::string& path, int vocab_size) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_corpus_jsonl: cannot open " + path);
  Dataset d;
  d.vocab_size = vocab_size;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    SequencePair p;
    p.id = j.at("id").get<int>();
    p.prefix = j.at("prefix").get<TokenSeq>();
    p.suffix = j.at("suffix").get<TokenSeq>();
    for (int t : p.prefix)
      if (t < 0 || t >= vocab_size)
        throw std::runtime_error("read_corpus_jsonl: token id out of range");
    for (int t : p.suffix)
      if (t < 0 || t >= vocab_size)
        throw std::runtime_error("read_corpus_jsonl: token id out of range");
    if (d.pairs.empty()) {
      d.k_prefix = static_cast<int>(p.prefix.size());
      d.k_suffix = static_cast<int>(p.suffix.size());
    } else if (static_cast<int>(p.prefix.size()) != d.k_prefix ||
               static_cast<int>(p.suffix.size()) != d.k_suffix) {
      throw std::runtime_error("read_corpus_jsonl: inconsistent pair lengths");
    }
    d.pairs.push_back(std::move(p));
  }
  if (d.pairs.empty()) throw std::runtime_error("read_corpus_jsonl: no pairs in " + path);
  return d;
}

// Split membership as id lists (stored alongside the corpus so downstream
// stages reconstruct identical splits without re-shuffling).
inline nlohmann::json splits_to_json(const DatasetSplits& s) {
  nlohmann::json j;
  auto ids = [](const Dataset& d) {
    std::vector<int> v;
    v.reserve(d.pairs.size());
    for (const auto& p : d.pairs) v.push_back(p.id);
    return v;
  };
  j["attacker"] = ids(s.attacker);
  j["evaluation"] = ids(s.evaluation);
  return j;
}

inline DatasetSplits splits_from_json(const nlohmann::json& j, const Dataset& d) {
  DatasetSplits s;
  for (Dataset* part : {&s.attacker, &s.evaluation}) {
    part->vocab_size = d.vocab_size;
    part->k_prefix = d.k_prefix;
    part->k_suffix = d.k_suffix;
  }
  auto fill = [&](const char* key, Dataset& out) {
    for (int id : j.at(key).get<std::vector<int>>()) {
      const SequencePair* p = d.find(id);
      if (!p) throw std::runtime_error("splits_from_json: unknown pair id");
      out.pairs.push_back(*p);
    }
  };
  fill("attacker", s.attacker);
  fill("evaluation", s.evaluation);
  return s;
}

}  // namespace cosped
