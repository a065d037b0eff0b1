#pragma once

// The attack loop: initialize a K×d soft prompt from the victim's embedding
// statistics, then optimize it — and nothing else — against a loss stack over
// the attacker split, with the victim frozen throughout.
//
// Loop shape per epoch: shuffle the attacker pairs, batch them, run the
// batched prompted forward, build one combined-loss node per sequence, and
// average them into the batch objective. The adaptive optimizer with
// decoupled weight decay updates Z under a linear-warmup cosine-to-zero
// schedule with global-norm gradient clipping. Mispredict bookkeeping
// accumulates during the epoch and becomes the additive loss's active set for
// the NEXT epoch. A non-finite batch loss aborts the run and restores the
// last end-of-epoch prompt rather than returning garbage.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cosped/common.hpp"
#include "cosped/corpus.hpp"
#include "cosped/losses.hpp"
#include "cosped/model.hpp"
#include "cosped/optim.hpp"

namespace cosped {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TuneConfig {
  int prompt_len = 16;  // K; tokens sit at positions K.. so K is also the offset
  int batch_size = 12;
  double lr = 1e-3;
  int warmup_steps = 50;
  int epochs = 30;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  int error_prone_threshold = 5;  // mispredict count that activates a token
  std::uint64_t seed = 42;
  LossStack stack;

  void validate() const {
    if (prompt_len < 1) throw std::invalid_argument("TuneConfig: prompt_len must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("TuneConfig: batch_size must be >= 1");
    if (!(lr >= 0.0)) throw std::invalid_argument("TuneConfig: lr must be >= 0");
    if (warmup_steps < 0) throw std::invalid_argument("TuneConfig: warmup_steps must be >= 0");
    if (epochs < 1) throw std::invalid_argument("TuneConfig: epochs must be >= 1");
    if (!(clip_norm > 0.0)) throw std::invalid_argument("TuneConfig: clip_norm must be > 0");
    if (error_prone_threshold < 1)
      throw std::invalid_argument("TuneConfig: error_prone_threshold must be >= 1");
    stack.validate();
  }
};

// One epoch of the attack loop, as recorded in the trace.
struct TuneEpochRecord {
  int epoch = 0;
  double combined_loss = 0.0;      // mean over sequences of the stacked objective
  double mle_loss = 0.0;           // mean over sequences of the plain token-loss mean
  std::vector<int> k_dy;           // dynamic window sizes, one per sequence (if enabled)
  int error_prone_size = 0;        // active mispredict set entering the next epoch
  double lr_last = 0.0;            // learning rate of the epoch's final step
  double grad_norm_mean = 0.0;     // mean pre-clip gradient norm

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["epoch"] = epoch;
    j["combined_loss"] = combined_loss;
    j["mle_loss"] = mle_loss;
    j["k_dy"] = k_dy;
    j["error_prone_size"] = error_prone_size;
    j["lr_last"] = lr_last;
    j["grad_norm_mean"] = grad_norm_mean;
    return j;
  }
};

struct TrainingTrace {
  std::vector<TuneEpochRecord> epochs;
  bool aborted = false;
  int abort_epoch = -1;
  std::string abort_reason;

  // JSON Lines: one record per epoch, plus a final abort record if the run
  // was cut short.
  void write_jsonl(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("TrainingTrace: cannot open " + path.string());
    for (const auto& e : epochs) os << e.to_json().dump() << '\n';
    if (aborted) {
      nlohmann::json j;
      j["aborted"] = true;
      j["epoch"] = abort_epoch;
      j["reason"] = abort_reason;
      os << j.dump() << '\n';
    }
  }
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

// Soft prompt drawn i.i.d. from a Gaussian matched to the victim's token
// embedding table (empirical mean and standard deviation), so the prompt
// starts in the same region of activation space as real tokens.
inline SoftPrompt init_soft_prompt(const VictimModel& m, int k, std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("init_soft_prompt: k must be >= 1");
  const auto& emb = m.token_embedding().values();
  if (emb.empty()) throw std::invalid_argument("init_soft_prompt: empty embedding table");
  double mean = 0.0;
  for (double v : emb) mean += v;
  mean /= static_cast<double>(emb.size());
  double var = 0.0;
  for (double v : emb) var += (v - mean) * (v - mean);
  var /= static_cast<double>(emb.size());
  const double sd = std::sqrt(var);

  const int d = m.config().model_dim;
  Rng rng(derive_seed(seed, "soft-prompt-init"));
  std::vector<double> z(static_cast<std::size_t>(k) * static_cast<std::size_t>(d));
  for (auto& v : z) v = mean + sd * rng.normal();
  SoftPrompt sp;
  sp.z = Tensor::leaf({k, d}, std::move(z));
  sp.z.set_requires_grad(true);
  return sp;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

inline TrainingTrace train_soft_prompt(const VictimModel& m, SoftPrompt& z,
                                       const Dataset& attacker, const TuneConfig& cfg) {
  cfg.validate();
  if (attacker.pairs.empty())
    throw std::invalid_argument("train_soft_prompt: attacker split is empty");
  if (!m.frozen()) throw std::invalid_argument("train_soft_prompt: victim must be frozen");
  if (z.rows() != cfg.prompt_len)
    throw std::invalid_argument("train_soft_prompt: prompt length does not match config");
  if (z.dim() != m.config().model_dim)
    throw std::invalid_argument("train_soft_prompt: prompt dim does not match model");
  if (cfg.prompt_len + attacker.k_prefix + attacker.k_suffix > m.config().max_context)
    throw std::invalid_argument("train_soft_prompt: prompt+pair exceeds the context window");
  if (!z.z.requires_grad())
    throw std::invalid_argument("train_soft_prompt: prompt must require gradients");

  const int n = static_cast<int>(attacker.pairs.size());
  const int batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int total_steps = cfg.epochs * batches_per_epoch;

  AdamWConfig oc;
  oc.beta1 = cfg.beta1;
  oc.beta2 = cfg.beta2;
  oc.eps = cfg.adam_eps;
  oc.weight_decay = cfg.weight_decay;
  AdamW opt(oc);
  opt.register_param(z.z);

  CommonSet common = CommonSet::from_dataset(attacker);
  ErrorProneSet active_set(cfg.error_prone_threshold);   // drives the additive term
  ErrorProneSet window(cfg.error_prone_threshold);       // accumulates this epoch

  TrainingTrace trace;
  std::vector<double> last_good(z.z.values().begin(), z.z.values().end());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs && !trace.aborted; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, "tune-order", static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    TuneEpochRecord rec;
    rec.epoch = epoch;
    int seq_count = 0;

    for (int b = 0; b < batches_per_epoch && !trace.aborted; ++b) {
      const int lo = b * cfg.batch_size;
      const int hi = std::min(n, lo + cfg.batch_size);
      std::vector<std::span<const int>> prefixes, suffixes;
      prefixes.reserve(static_cast<std::size_t>(hi - lo));
      suffixes.reserve(static_cast<std::size_t>(hi - lo));
      for (int i = lo; i < hi; ++i) {
        const auto& pair = attacker.pairs[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        prefixes.emplace_back(pair.prefix);
        suffixes.emplace_back(pair.suffix);
      }

      // The tensor ops guard every normalizing computation and throw
      // domain_error the moment anything goes non-finite; treat that the
      // same as a non-finite loss value — abort and roll back.
      try {
      auto evals = m.forward_with_soft_prompt_batch(&z, prefixes, suffixes);

      // Per-sequence combined losses, averaged into the batch objective.
      Tensor batch_sum = Tensor::scalar(0.0);
      for (std::size_t s = 0; s < evals.size(); ++s) {
        auto tlv = token_losses_from_evaluation(
            evals[s].gold_log_probs,
            {suffixes[s].begin(), suffixes[s].end()}, evals[s].predicted);
        window.update(tlv);
        rec.combined_loss += combine_value(cfg.stack, tlv, active_set, common);
        rec.mle_loss += mle_value(tlv);
        if (cfg.stack.has("dynamic"))
          rec.k_dy.push_back(dynamic_k(mle_value(tlv), cfg.stack.dynamic_n,
                                       cfg.stack.dynamic_t, cfg.stack.dynamic_alpha,
                                       tlv.size()));
        ++seq_count;
        batch_sum = add(batch_sum,
                        combine_term(cfg.stack, evals[s].gold_log_probs, tlv, active_set,
                                     common));
      }
      Tensor batch_loss = affine(batch_sum, 1.0 / static_cast<double>(evals.size()), 0.0);

      if (!std::isfinite(batch_loss.item())) {
        trace.aborted = true;
        trace.abort_epoch = epoch;
        trace.abort_reason = "non-finite batch loss";
        break;
      }

      auto grads = backward(batch_loss);
      std::vector<double> gz = grads.at(z.z);
      double norm_sq = 0.0;
      for (double g : gz) norm_sq += g * g;
      if (!std::isfinite(norm_sq)) {
        trace.aborted = true;
        trace.abort_epoch = epoch;
        trace.abort_reason = "non-finite gradient";
        break;
      }
      rec.grad_norm_mean += clip_global_norm({&gz}, cfg.clip_norm);

      rec.lr_last = lr_at_step(step, total_steps, cfg.warmup_steps, cfg.lr,
                               /*floor_frac=*/0.0);
      opt.step({&gz}, rec.lr_last);
      ++step;
      } catch (const std::domain_error& e) {
        trace.aborted = true;
        trace.abort_epoch = epoch;
        trace.abort_reason = e.what();
        break;
      }
    }

    if (trace.aborted) break;

    // Epoch boundary: this epoch's mispredicts become next epoch's active set.
    active_set = window;
    window.reset_window();

    rec.combined_loss /= static_cast<double>(std::max(1, seq_count));
    rec.mle_loss /= static_cast<double>(std::max(1, seq_count));
    rec.error_prone_size = static_cast<int>(active_set.active().size());
    rec.grad_norm_mean /= static_cast<double>(batches_per_epoch);
    trace.epochs.push_back(std::move(rec));

    last_good.assign(z.z.values().begin(), z.z.values().end());
  }

  if (trace.aborted) {
    // Roll back to the last completed epoch's prompt.
    auto zv = z.z.mutable_values();
    std::copy(last_good.begin(), last_good.end(), zv.begin());
  }
  return trace;
}

}  // namespace cosped
