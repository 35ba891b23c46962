#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file controller.hpp
 * @brief The three inference strategies as one parameterized control loop.
 *
 * greedy           one argmax completion, segmented into steps after the fact.
 * self_consistency k independent sampled completions, majority vote over
 *                  extracted answers.
 * certainty_max    step loop: sample k candidate steps, score each by mean
 *                  self-certainty, keep the best, append, repeat until a
 *                  boxed answer appears or the step cap is hit. Sampling can
 *                  be limited to the first m kept steps (single-sample
 *                  continuation afterwards).
 *
 * All randomness flows from an explicit seed through the scheme in
 * seeds.hpp, so runs are reproducible under any worker scheduling.
 */

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "selfcert/backend.hpp"
#include "selfcert/certainty.hpp"
#include "selfcert/segmenter.hpp"

namespace selfcert::control {

enum class Strategy { greedy, self_consistency, certainty_max };

const char* strategy_name(Strategy s);
Strategy parse_strategy(std::string_view name);

struct StrategyConfig {
  Strategy strategy = Strategy::certainty_max;
  int k = 1;                          // candidates per step / parallel chains
  int max_steps = 40;
  std::optional<int> sample_first_m;  // kept steps that sample k; nullopt = all
  int greedy_max_tokens = 1500;
  lm::GenerationLimits limits;        // per-step sampling parameters
  seg::Language language = seg::Language::english;
  std::optional<std::string> prompt_template;  // overrides the built-in template

  void validate() const;

  /// Step delimiters in force: limits.stop_sequences, or the default list.
  std::vector<std::string> delimiters() const;
};

enum class Termination { answered, step_cap, token_cap, backend_error };

const char* termination_name(Termination t);

struct CandidateSummary {
  double mean_certainty = 0.0;
  long long kept_tokens = 0;
  long long sampled_tokens = 0;
};

/// One kept step with the full scoring context of its boundary.
struct StepRecord {
  lm::Thought thought;  // the selected candidate, score filled
  std::vector<CandidateSummary> candidates;  // issuing order; empty for greedy
  int selected_index = 0;
  double gain = 0.0;
};

struct Diagnostics {
  long long tail_clamps = 0;
  long long unbalanced_boxed = 0;
  long long continuation_requests = 0;

  Diagnostics& operator+=(const Diagnostics& o) {
    tail_clamps += o.tail_clamps;
    unbalanced_boxed += o.unbalanced_boxed;
    continuation_requests += o.continuation_requests;
    return *this;
  }
};

struct Trajectory {
  std::string prompt;
  std::vector<StepRecord> steps;
  Termination termination = Termination::token_cap;
  std::optional<seg::AnswerForm> answer;
  lm::TokenUsage usage;
  std::vector<double> per_step_certainty;
  std::vector<double> per_step_gain;  // empty for post-hoc (greedy-style) records
  Diagnostics diagnostics;
  std::string error;  // backend_error detail

  /// Concatenated kept step texts (the generation without the prompt).
  std::string generated() const;
};

/// Scored candidate set at one step boundary.
struct CandidateSet {
  std::vector<lm::Thought> thoughts;   // scores filled
  std::size_t selected_index = 0;
  double gain = 0.0;
};

/// Scores candidates (in parallel), selects the first maximum, computes the
/// gain.
CandidateSet score_and_select(std::vector<lm::Thought> thoughts, certainty::TailMode tail_mode,
                              certainty::CertaintyStats* stats = nullptr);

Trajectory run_greedy(lm::LmBackend& backend, const std::string& question,
                      const StrategyConfig& config);

Trajectory run_certainty_max(lm::LmBackend& backend, const std::string& question,
                             const StrategyConfig& config, std::uint64_t chain_seed);

struct VoteOutcome {
  std::optional<seg::AnswerForm> winner;  // empty iff every ballot abstained
  int winner_votes = 0;
  bool all_abstained = false;
};

/// Modal answer over canonical forms; abstentions (empty ballots) do not
/// vote. Ties break to the answer whose first supporting ballot has the
/// lowest index.
VoteOutcome majority_vote(const std::vector<std::optional<seg::AnswerForm>>& ballots);

struct SelfConsistencyResult {
  VoteOutcome vote;
  std::vector<Trajectory> trajectories;
};

SelfConsistencyResult run_self_consistency(lm::LmBackend& backend, const std::string& question,
                                           const StrategyConfig& config,
                                           std::uint64_t problem_seed);

/// Ledger totals: every sampled token (rejected candidates and all chains
/// included) plus prompt tokens once per request.
lm::TokenUsage token_budget(const Trajectory& trajectory);
lm::TokenUsage token_budget(std::span<const Trajectory> trajectories);

}  // namespace selfcert::control
