// Objective-function suite: the six losses, their combination rule, the
// bookkeeping sets, and the graph forms. Every formula is pinned against a
// hand value or an independently coded brute-force oracle, and every graph
// term is checked against the scalar path and against finite differences.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "cosped/losses.hpp"
#include "test_util.hpp"

using namespace cosped;

namespace {

// Random token-loss vector with well-separated losses so that h=1e-5
// perturbations cannot reorder the hardest-position ranking during finite
// differences. Gold/predicted ids are uniform over the vocabulary.
TokenLossVector random_tlv(Rng& rng, int len, int vocab) {
  TokenLossVector tlv;
  std::vector<double> base(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i) base[static_cast<std::size_t>(i)] = 0.05 + 0.11 * (i + 1);
  rng.shuffle(base);
  tlv.loss = base;
  tlv.gold.resize(static_cast<std::size_t>(len));
  tlv.predicted.resize(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i) {
    tlv.gold[static_cast<std::size_t>(i)] = rng.uniform_int(vocab);
    tlv.predicted[static_cast<std::size_t>(i)] = rng.uniform_int(vocab);
  }
  return tlv;
}

// Brute-force mean over the k largest entries, coded independently of
// hardest_positions (max-scan with removal instead of a sort).
double brute_topk_mean(std::vector<double> v, int k) {
  double s = 0.0;
  for (int round = 0; round < k; ++round) {
    auto it = std::max_element(v.begin(), v.end());
    s += *it;
    v.erase(it);
  }
  return s / static_cast<double>(k);
}

}  // namespace

TEST_CASE("mle loss: hand values and focal degeneracy") {
  TokenLossVector perfect;
  perfect.loss = {0.0, 0.0, 0.0};
  perfect.gold = {1, 2, 3};
  perfect.predicted = {1, 2, 3};
  CHECK(mle_value(perfect) == 0.0);

  TokenLossVector halves;
  halves.loss = {std::log(2.0), std::log(2.0)};
  halves.gold = {0, 1};
  halves.predicted = {0, 1};
  CHECK_THAT(mle_value(halves), Catch::Matchers::WithinAbs(std::log(2.0), 1e-15));

  // focal with gamma = 0 and alpha_t = 1 collapses to the plain mean.
  Rng rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    auto tlv = random_tlv(rng, 12, 50);
    CHECK_THAT(focal_value(tlv, 1.0, 0.0),
               Catch::Matchers::WithinAbs(mle_value(tlv), 1e-12));
  }

  TokenLossVector empty;
  CHECK_THROWS_AS(mle_value(empty), std::invalid_argument);
}

TEST_CASE("focal loss: direct substitution and domain checks") {
  TokenLossVector one;
  one.loss = {std::log(2.0)};  // p = 0.5
  one.gold = {3};
  one.predicted = {3};
  // 0.6 * (1 - 0.5)^2 * ln 2
  CHECK_THAT(focal_value(one, 0.6, 2.0),
             Catch::Matchers::WithinAbs(0.6 * 0.25 * std::log(2.0), 1e-15));

  TokenLossVector perfect;
  perfect.loss = {0.0, 0.0};
  perfect.gold = {0, 1};
  perfect.predicted = {0, 1};
  CHECK(focal_value(perfect, 0.6, 2.0) == 0.0);

  CHECK_THROWS_AS(focal_value(one, 0.6, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(focal_value(one, 0.0, 2.0), std::invalid_argument);
  CHECK_THROWS_AS(focal_value(one, 1.5, 2.0), std::invalid_argument);
}

TEST_CASE("smooth loss: hand value, mle identity, brute-force oracle") {
  TokenLossVector tlv;
  tlv.loss = {1, 2, 3, 4, 5, 6};
  tlv.gold = {0, 1, 2, 3, 4, 5};
  tlv.predicted = tlv.gold;
  CHECK_THAT(smooth_value(tlv, 2), Catch::Matchers::WithinAbs(5.5, 1e-15));

  // n = |S| averages everything.
  CHECK_THAT(smooth_value(tlv, 6), Catch::Matchers::WithinAbs(mle_value(tlv), 1e-15));

  // Uniform losses: any n gives the common value.
  TokenLossVector flat;
  flat.loss = {0.7, 0.7, 0.7, 0.7};
  flat.gold = {0, 0, 0, 0};
  flat.predicted = flat.gold;
  for (int n = 1; n <= 4; ++n)
    CHECK_THAT(smooth_value(flat, n), Catch::Matchers::WithinAbs(0.7, 1e-15));

  CHECK_THROWS_AS(smooth_value(tlv, 0), std::invalid_argument);
  CHECK_THROWS_AS(smooth_value(tlv, 7), std::invalid_argument);

  Rng rng(202);
  for (int trial = 0; trial < 50; ++trial) {
    auto t = random_tlv(rng, 20, 64);
    const int n = 1 + rng.uniform_int(20);
    CHECK_THAT(smooth_value(t, n),
               Catch::Matchers::WithinAbs(brute_topk_mean(t.loss, n), 1e-12));
  }
}

TEST_CASE("hardest positions: descending loss, ties break to lower index") {
  std::vector<double> loss = {0.5, 2.0, 0.5, 3.0, 2.0};
  auto idx = hardest_positions(loss, 5);
  CHECK(idx == std::vector<int>{3, 1, 4, 0, 2});
  auto top2 = hardest_positions(loss, 2);
  CHECK(top2 == std::vector<int>{3, 1});
}

TEST_CASE("dynamic sizing: exact piecewise schedule on a 50-point grid") {
  const int n = 5;
  const double t_d = 0.1, alpha = 5.0;
  const int suffix_len = 50;

  // Pinned points.
  CHECK(dynamic_k(0.05, n, t_d, alpha, suffix_len) == 5);   // below tolerance
  CHECK(dynamic_k(0.10, n, t_d, alpha, suffix_len) == 5);   // boundary inclusive
  CHECK(dynamic_k(0.30, n, t_d, alpha, suffix_len) == 6);   // 5 + 5*0.2 = 6
  CHECK(dynamic_k(9.50, n, t_d, alpha, suffix_len) == 50);  // clamped to |S|

  // 50-point grid against an independently written piecewise evaluation.
  for (int g = 0; g < 50; ++g) {
    const double mle = 0.004 * static_cast<double>(g) * (g + 1);  // 0 .. 9.8
    double expected = (mle <= t_d) ? static_cast<double>(n)
                                   : static_cast<double>(n) + alpha * (mle - t_d);
    int ek = static_cast<int>(std::floor(expected));
    ek = std::max(1, std::min(ek, suffix_len));
    CHECK(dynamic_k(mle, n, t_d, alpha, suffix_len) == ek);
  }

  // Flooring: 5 + 5*(0.19 - 0.1) = 5.45 -> 5.
  CHECK(dynamic_k(0.19, n, t_d, alpha, suffix_len) == 5);
  CHECK_THROWS_AS(dynamic_k(0.1, 0, t_d, alpha, suffix_len), std::invalid_argument);
  CHECK_THROWS_AS(dynamic_k(0.1, n, 0.0, alpha, suffix_len), std::invalid_argument);
}

TEST_CASE("dynamic loss: equals smooth at low mle, widens above tolerance") {
  Rng rng(303);
  // Scale losses so the mean sits below the tolerance: dynamic == smooth(n).
  for (int trial = 0; trial < 20; ++trial) {
    auto tlv = random_tlv(rng, 10, 32);
    double m = mle_value(tlv);
    for (double& l : tlv.loss) l *= 0.05 / m;  // mean now 0.05 <= 0.1
    CHECK_THAT(dynamic_value(tlv, 3, 0.1, 5.0),
               Catch::Matchers::WithinAbs(smooth_value(tlv, 3), 1e-12));
  }
  // Above tolerance the window widens to dynamic_k's value.
  auto tlv = random_tlv(rng, 10, 32);
  double m = mle_value(tlv);
  for (double& l : tlv.loss) l *= 0.5 / m;  // mean 0.5
  const int k = dynamic_k(0.5, 3, 0.1, 5.0, 10);
  CHECK(k == 5);
  CHECK_THAT(dynamic_value(tlv, 3, 0.1, 5.0),
             Catch::Matchers::WithinAbs(smooth_value(tlv, k), 1e-12));
}

TEST_CASE("error-prone set: counting window and activation threshold") {
  ErrorProneSet eps(3);
  CHECK(eps.active().empty());

  TokenLossVector tlv;
  tlv.loss = {0.5, 0.5, 0.5};
  tlv.gold = {7, 8, 9};
  tlv.predicted = {7, 8, 9};
  eps.update(tlv);  // perfect predictions change nothing
  CHECK(eps.counts().empty());

  tlv.predicted = {1, 8, 9};  // token 7 mispredicted
  eps.update(tlv);
  CHECK(eps.counts().at(7) == 1);
  CHECK_FALSE(eps.is_active(7));
  eps.update(tlv);
  CHECK_FALSE(eps.is_active(7));
  eps.update(tlv);  // third miss crosses the threshold
  CHECK(eps.is_active(7));
  CHECK(eps.active() == std::set<int>{7});

  eps.reset_window();
  CHECK(eps.counts().empty());
  CHECK(eps.active().empty());

  CHECK_THROWS_AS(ErrorProneSet(0), std::invalid_argument);
}

TEST_CASE("additive loss: hand value, empty set, brute-force filter oracle") {
  ErrorProneSet empty_set(2);
  TokenLossVector tlv;
  tlv.loss = {std::log(2.0), 1.0};
  tlv.gold = {4, 5};
  tlv.predicted = {4, 5};
  CHECK(additive_value(tlv, empty_set, 0.7) == 0.0);

  // One active token matching one position with p = 0.5: 0.7 * ln 2 / 1.
  ErrorProneSet one(1);
  TokenLossVector miss;
  miss.loss = {0.1};
  miss.gold = {4};
  miss.predicted = {9};
  one.update(miss);  // token 4 active
  CHECK(one.active() == std::set<int>{4});
  CHECK_THAT(additive_value(tlv, one, 0.7),
             Catch::Matchers::WithinAbs(0.7 * std::log(2.0), 1e-15));

  // Active set present but no suffix position uses those tokens -> 0.
  TokenLossVector other;
  other.loss = {0.3, 0.4};
  other.gold = {11, 12};
  other.predicted = {11, 12};
  CHECK(additive_value(other, one, 0.7) == 0.0);

  // Random cases against an independent filter-and-sum.
  Rng rng(404);
  for (int trial = 0; trial < 50; ++trial) {
    auto t = random_tlv(rng, 16, 24);
    ErrorProneSet eps(1);
    TokenLossVector seed_misses;
    for (int j = 0; j < 5; ++j) {
      seed_misses.loss.push_back(0.2);
      seed_misses.gold.push_back(rng.uniform_int(24));
      seed_misses.predicted.push_back(24 - 1);  // usually a miss
    }
    eps.update(seed_misses);
    const double alpha = 0.7;
    double want = 0.0;
    for (int i = 0; i < t.size(); ++i)
      if (eps.active().count(t.gold[static_cast<std::size_t>(i)]))
        want += alpha * t.loss[static_cast<std::size_t>(i)];
    if (!eps.active().empty()) want /= static_cast<double>(eps.active().size());
    CHECK_THAT(additive_value(t, eps, alpha), Catch::Matchers::WithinAbs(want, 1e-12));
  }
}

TEST_CASE("common set: decile size, tie-breaking, dataset counting") {
  // V = 60 -> exactly 6 members.
  std::vector<long long> freq(60, 0);
  for (int i = 0; i < 60; ++i) freq[static_cast<std::size_t>(i)] = 60 - i;
  auto cs = CommonSet::from_frequencies(freq);
  CHECK(cs.members() == std::set<int>{0, 1, 2, 3, 4, 5});

  // Frequency ties break toward the lower token id: ids 10 and 11 tie at the
  // cut, so the lower one wins the last slot.
  std::vector<long long> tied(20, 0);
  tied[5] = 100;
  tied[11] = 7;
  tied[10] = 7;
  auto cs2 = CommonSet::from_frequencies(tied);  // takes floor(20/10) = 2
  CHECK(cs2.members() == std::set<int>{5, 10});

  // V < 10 -> empty set.
  auto tiny = CommonSet::from_frequencies(std::vector<long long>(8, 3));
  CHECK(tiny.members().empty());

  // Dataset counting covers prefixes and suffixes of every pair.
  Dataset d;
  d.vocab_size = 20;
  d.k_prefix = 2;
  d.k_suffix = 2;
  d.pairs.push_back({0, {3, 3}, {3, 7}});
  d.pairs.push_back({1, {7, 3}, {1, 2}});
  auto cs3 = CommonSet::from_dataset(d);  // token 3 x4, token 7 x2 -> top-2
  CHECK(cs3.members() == std::set<int>{3, 7});
}

TEST_CASE("common loss: empty set, hand value, brute-force oracle") {
  TokenLossVector tlv;
  tlv.loss = {std::log(2.0), 0.9, 0.4};
  tlv.gold = {2, 5, 2};
  tlv.predicted = tlv.gold;

  CHECK(common_value(tlv, CommonSet(), 0.2) == 0.0);

  std::vector<long long> freq(20, 0);
  freq[2] = 50;
  freq[9] = 40;
  auto cs = CommonSet::from_frequencies(freq);  // members {2, 9}
  // Positions 0 and 2 qualify: 0.2 * (ln 2 + 0.4) / 2.
  CHECK_THAT(common_value(tlv, cs, 0.2),
             Catch::Matchers::WithinAbs(0.2 * (std::log(2.0) + 0.4) / 2.0, 1e-15));

  Rng rng(505);
  for (int trial = 0; trial < 50; ++trial) {
    auto t = random_tlv(rng, 16, 40);
    std::vector<long long> f(40, 0);
    for (int i = 0; i < 40; ++i) f[static_cast<std::size_t>(i)] = rng.uniform_int(100);
    auto c = CommonSet::from_frequencies(f);
    double want = 0.0;
    for (int i = 0; i < t.size(); ++i)
      if (c.contains(t.gold[static_cast<std::size_t>(i)]))
        want += 0.2 * t.loss[static_cast<std::size_t>(i)];
    want /= static_cast<double>(c.members().size());
    CHECK_THAT(common_value(t, c, 0.2), Catch::Matchers::WithinAbs(want, 1e-12));
  }
}

TEST_CASE("combination: base passthrough, term additivity, exclusivity") {
  Rng rng(606);
  auto tlv = random_tlv(rng, 20, 40);
  ErrorProneSet eps(1);
  TokenLossVector misses;
  misses.loss = {0.1, 0.1};
  misses.gold = {tlv.gold[0], tlv.gold[5]};
  misses.predicted = {39, 39};
  eps.update(misses);
  std::vector<long long> freq(40, 1);
  freq[tlv.gold[2]] = 9;
  freq[tlv.gold[7]] = 8;
  freq[tlv.gold[11]] = 7;
  freq[tlv.gold[13]] = 6;
  auto cs = CommonSet::from_frequencies(freq);

  // No components -> base loss exactly.
  LossStack bare;
  CHECK(combine_value(bare, tlv, eps, cs) == mle_value(tlv));

  // Weights of zero -> base loss exactly.
  LossStack zeroed;
  zeroed.weights = {{"smooth", 0.0}, {"additive", 0.0}, {"common", 0.0}};
  CHECK(combine_value(zeroed, tlv, eps, cs) == mle_value(tlv));

  // Unit weights -> sum of the individually computed terms.
  LossStack full;
  full.weights = {{"smooth", 1.0}, {"additive", 1.0}, {"common", 1.0}};
  const double want = mle_value(tlv) + smooth_value(tlv, 5) +
                      additive_value(tlv, eps, 0.7) + common_value(tlv, cs, 0.2);
  CHECK_THAT(combine_value(full, tlv, eps, cs), Catch::Matchers::WithinAbs(want, 1e-12));

  // Non-unit weights scale the components.
  LossStack weighted;
  weighted.base = BaseLoss::kFocal;
  weighted.weights = {{"dynamic", 0.5}, {"common", 2.0}};
  const double want2 = focal_value(tlv, 0.6, 2.0) +
                       0.5 * dynamic_value(tlv, 5, 0.1, 5.0) +
                       2.0 * common_value(tlv, cs, 0.2);
  CHECK_THAT(combine_value(weighted, tlv, eps, cs),
             Catch::Matchers::WithinAbs(want2, 1e-12));

  // smooth + dynamic together is refused.
  LossStack both;
  both.weights = {{"smooth", 1.0}, {"dynamic", 1.0}};
  CHECK_THROWS_AS(combine_value(both, tlv, eps, cs), std::invalid_argument);

  LossStack unknown;
  unknown.weights = {{"bogus", 1.0}};
  CHECK_THROWS_AS(unknown.validate(), std::invalid_argument);
}

TEST_CASE("position symmetry: permuting the suffix leaves mle/focal unchanged") {
  Rng rng(707);
  auto tlv = random_tlv(rng, 15, 30);
  auto shuffled = tlv;
  std::vector<int> perm(15);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  for (int i = 0; i < 15; ++i) {
    shuffled.loss[static_cast<std::size_t>(i)] = tlv.loss[static_cast<std::size_t>(perm[i])];
    shuffled.gold[static_cast<std::size_t>(i)] = tlv.gold[static_cast<std::size_t>(perm[i])];
    shuffled.predicted[static_cast<std::size_t>(i)] =
        tlv.predicted[static_cast<std::size_t>(perm[i])];
  }
  CHECK_THAT(mle_value(shuffled), Catch::Matchers::WithinAbs(mle_value(tlv), 1e-12));
  CHECK_THAT(focal_value(shuffled, 0.6, 2.0),
             Catch::Matchers::WithinAbs(focal_value(tlv, 0.6, 2.0), 1e-12));
  CHECK_THAT(smooth_value(shuffled, 4),
             Catch::Matchers::WithinAbs(smooth_value(tlv, 4), 1e-12));
}

TEST_CASE("canonical grid: 17 distinct stacks with the expected shape") {
  auto grid = canonical_loss_stacks();
  REQUIRE(grid.size() == 17);
  std::set<std::string> names;
  int mle_rows = 0, focal_rows = 0;
  for (const auto& s : grid) {
    s.validate();
    names.insert(s.name());
    if (s.base == BaseLoss::kMle) ++mle_rows; else ++focal_rows;
    // additive/common only ever ride on a smooth or dynamic row.
    if (s.has("additive") || s.has("common"))
      CHECK((s.has("smooth") || s.has("dynamic")));
    if (s.base == BaseLoss::kFocal) CHECK(!s.weights.empty());
  }
  CHECK(names.size() == 17);  // all distinct
  CHECK(mle_rows == 9);
  CHECK(focal_rows == 8);
  CHECK(grid[0].name() == "mle");
}

TEST_CASE("stack serialization: field names, defaults, round trip, refusals") {
  LossStack s;
  s.base = BaseLoss::kFocal;
  s.weights = {{"dynamic", 0.5}, {"additive", 1.5}};
  s.focal_alpha = 0.55;
  s.focal_gamma = 1.5;
  s.dynamic_n = 7;
  s.dynamic_t = 0.2;
  s.dynamic_alpha = 3.0;
  s.additive_alpha = 0.9;

  auto j = s.to_json();
  CHECK(j.at("base") == "focal");
  CHECK(j.at("weights").at("dynamic") == 0.5);
  CHECK(j.at("weights").at("additive") == 1.5);
  CHECK(j.at("focal_alpha") == 0.55);
  CHECK(j.at("focal_gamma") == 1.5);
  CHECK(j.at("smooth_n") == 5);
  CHECK(j.at("dynamic_n") == 7);
  CHECK(j.at("dynamic_t") == 0.2);
  CHECK(j.at("dynamic_alpha") == 3.0);
  CHECK(j.at("additive_alpha") == 0.9);
  CHECK(j.at("common_beta") == 0.2);

  auto back = LossStack::from_json(j);
  CHECK(back.base == s.base);
  CHECK(back.weights == s.weights);
  CHECK(back.dynamic_n == 7);
  CHECK(back.name() == "focal+dynamic+additive");

  // Defaults when fields are omitted.
  auto sparse = LossStack::from_json(nlohmann::json{{"base", "mle"}});
  CHECK(sparse.name() == "mle");
  CHECK(sparse.smooth_n == 5);
  CHECK(sparse.focal_alpha == 0.6);

  CHECK_THROWS_AS(LossStack::from_json(nlohmann::json{{"base", "mse"}}),
                  std::invalid_argument);
  nlohmann::json bad;
  bad["weights"] = {{"smooth", 1.0}, {"dynamic", 1.0}};
  CHECK_THROWS_AS(LossStack::from_json(bad), std::invalid_argument);
}

TEST_CASE("graph terms agree with scalar values on every canonical stack") {
  Rng rng(808);
  const int len = 20, vocab = 40;
  for (const auto& stack : canonical_loss_stacks()) {
    auto tlv = random_tlv(rng, len, vocab);
    ErrorProneSet eps(1);
    TokenLossVector misses;
    misses.loss = {0.2, 0.2, 0.2};
    misses.gold = {tlv.gold[1], tlv.gold[6], tlv.gold[9]};
    misses.predicted = {vocab - 1, vocab - 1, vocab - 1};
    eps.update(misses);
    std::vector<long long> freq(vocab, 1);
    freq[tlv.gold[3]] = 50;
    freq[tlv.gold[8]] = 40;
    freq[tlv.gold[12]] = 30;
    freq[tlv.gold[15]] = 20;
    auto cs = CommonSet::from_frequencies(freq);

    std::vector<double> glp(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) glp[static_cast<std::size_t>(i)] = -tlv.loss[i];
    Tensor g = Tensor::leaf({len}, glp);
    Tensor total = combine_term(stack, g, tlv, eps, cs);
    CHECK_THAT(total.item(),
               Catch::Matchers::WithinAbs(combine_value(stack, tlv, eps, cs), 1e-12));
  }
}

TEST_CASE("graph gradients match finite differences on every canonical stack") {
  Rng rng(909);
  const int len = 14, vocab = 30;
  for (const auto& stack : canonical_loss_stacks()) {
    auto tlv = random_tlv(rng, len, vocab);
    ErrorProneSet eps(1);
    TokenLossVector misses;
    misses.loss = {0.2, 0.2};
    misses.gold = {tlv.gold[2], tlv.gold[7]};
    misses.predicted = {vocab - 1, vocab - 1};
    eps.update(misses);
    std::vector<long long> freq(vocab, 1);
    freq[tlv.gold[4]] = 50;
    freq[tlv.gold[10]] = 40;
    freq[tlv.gold[12]] = 30;
    auto cs = CommonSet::from_frequencies(freq);

    // Parameter vector: the gold log-probs themselves. The numeric mirror is
    // refreshed from x on every call so the scalar path stays consistent,
    // while position selection stays fixed (losses are well separated).
    std::vector<double> x(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) x[static_cast<std::size_t>(i)] = -tlv.loss[i];

    auto rebuild_tlv = [&]() {
      TokenLossVector t = tlv;
      for (int i = 0; i < len; ++i) t.loss[static_cast<std::size_t>(i)] = -x[i];
      return t;
    };

    Tensor g = Tensor::leaf({len}, x);
    g.set_requires_grad(true);
    Tensor total = combine_term(stack, g, rebuild_tlv(), eps, cs);
    auto grads = backward(total);
    REQUIRE(grads.contains(g));

    auto f = [&]() {
      Tensor gg = Tensor::leaf({len}, x);
      return combine_term(stack, gg, rebuild_tlv(), eps, cs).item();
    };
    auto rep = testutil::check_gradient(x, f, grads.at(g));
    INFO("stack " << stack.name() << " worst coord " << rep.worst_index);
    CHECK(rep.max_rel_err < 1e-6);
  }
}

TEST_CASE("evaluation bridge: token losses mirror the gold log-probs") {
  std::vector<double> glp = {-0.5, -1.25, -0.01};
  Tensor g = Tensor::leaf({3}, glp);
  auto tlv = token_losses_from_evaluation(g, {4, 5, 6}, {4, 9, 6});
  CHECK(tlv.loss == std::vector<double>{0.5, 1.25, 0.01});
  CHECK(tlv.gold == std::vector<int>{4, 5, 6});
  CHECK(tlv.predicted == std::vector<int>{4, 9, 6});
  CHECK_THAT(tlv.prob(0), Catch::Matchers::WithinAbs(std::exp(-0.5), 1e-15));
}
