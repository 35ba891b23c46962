#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file certainty.hpp
 * @brief Self-certainty scoring: mean KL divergence from uniform to the
 *        model's next-token distributions.
 *
 * Token level,
 *
 *   C_i = KL(U || p) = -(1/V) * sum_j log(V * p_j)
 *
 * over the full vocabulary of size V; step level is the arithmetic mean of
 * token values, so scores are comparable across steps of different length.
 * Higher values mean more peaked (more committed) predictions; the uniform
 * distribution scores exactly 0. All values are in nats.
 *
 * Backends rarely expose the full distribution. A top-k report is completed
 * by spreading the residual mass uniformly over the V-k unseen tokens
 * (TailMode::uniform_tail); TailMode::exact is for backends that do report
 * every entry. Sums run in log space over the reported logprobs, with a
 * single closed-form term for the tail, so a full-V probability vector is
 * never materialized.
 *
 * Batch entry points parallelize over independent distributions/steps with
 * OpenMP. Everything here is a pure function over immutable inputs and is
 * safe to call from any number of threads.
 */

#include <cstdint>
#include <span>
#include <vector>

#include "selfcert/errors.hpp"

namespace selfcert::certainty {

enum class TailMode {
  exact,        ///< report covers the whole vocabulary
  uniform_tail, ///< residual mass spread uniformly over unseen tokens
};

struct LogprobEntry {
  int token_id = 0;
  double logprob = 0.0;  // natural log, finite, <= 0
};

/// One position's predictive distribution as reported by a backend:
/// the top-k entries (descending by logprob) plus the vocabulary size.
struct TokenDistribution {
  std::vector<LogprobEntry> entries;
  int vocab_size = 0;  // V >= 2

  int reported_k() const { return static_cast<int>(entries.size()); }
};

/// Self-certainty of one reasoning step.
struct StepScore {
  std::vector<double> per_token_certainty;  // nats, one per generated token
  double mean_certainty = 0.0;              // arithmetic mean of the above
  int token_count = 0;
};

/// Counters for degenerate inputs tolerated by the scoring path.
struct CertaintyStats {
  long long tail_clamps = 0;  ///< near-one-hot reports whose tail was clamped
};

/// Per-unseen-token tail probabilities below this are clamped (and counted)
/// instead of driving the KL term to infinity.
inline constexpr double kTailClampFloor = 1e-12;

/// Validates the documented invariants of a report (finite logprobs <= 0,
/// descending order, distinct token ids, mass <= 1 + 1e-6, 1 <= k <= V,
/// V >= 2). Throws Error on violation. Backends call this on what they emit;
/// the scoring functions themselves only check what affects the math.
void validate(const TokenDistribution& dist);

/**
 * Token-level self-certainty in nats.
 *
 * exact mode requires reported_k == V. uniform_tail completes a partial
 * report; it throws Errc::tail_underflow when the reported mass already
 * reaches 1 (an inconsistent report), and clamps (counting into `stats`)
 * when the tail probability would underflow kTailClampFloor.
 * Throws Errc::non_finite when a completed probability is zero.
 */
double token_self_certainty(const TokenDistribution& dist, TailMode tail_mode,
                            CertaintyStats* stats = nullptr);

/// Mean token certainty over one step. Throws Errc::empty_step on no tokens.
StepScore step_self_certainty(std::span<const TokenDistribution> dists, TailMode tail_mode,
                              CertaintyStats* stats = nullptr);

/// Index of the highest mean certainty; ties break to the smallest index.
/// Throws Errc::empty_candidate_set.
std::size_t select_best(std::span<const StepScore> scored);

/// Total certainty improvement of the selection over the alternatives:
/// sum_i (C* - C_i) over all candidates, C* the selected mean. Zero term for
/// the selected candidate included; >= 0, and 0 iff all means are equal.
double certainty_gain(std::span<const StepScore> scored, std::size_t selected_index);

// ---------------------------------------------------------------------------
// Batch kernels (OpenMP over independent inputs)
// ---------------------------------------------------------------------------

/// Token certainty for each distribution in `dists`.
std::vector<double> token_self_certainty_batch(std::span<const TokenDistribution> dists,
                                               TailMode tail_mode,
                                               CertaintyStats* stats = nullptr);

/// Step score for each candidate step, where a step is a contiguous span of
/// token distributions.
std::vector<StepScore> score_steps(std::span<const std::span<const TokenDistribution>> steps,
                                   TailMode tail_mode, CertaintyStats* stats = nullptr);

}  // namespace selfcert::certainty
