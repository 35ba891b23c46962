#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file backend.hpp
 * @brief Uniform step-proposal interface over language-model backends.
 *
 * A backend turns (context, sampling limits) into candidate continuations
 * carrying per-token top-k logprob reports, so the scoring side never cares
 * whether tokens came from an HTTP inference server or the in-process
 * synthetic model.
 */

#include <cstdint>
#include <string>
#include <vector>

#include "selfcert/certainty.hpp"
#include "selfcert/errors.hpp"

namespace selfcert::lm {

/// Per-step sampling parameters. Candidate seeds derive from `seed` by
/// candidate index (see seeds.hpp), so a batch is reproducible regardless of
/// how requests are scheduled.
struct GenerationLimits {
  int min_tokens = 5;
  int max_tokens = 300;
  std::vector<std::string> stop_sequences;
  double temperature = 0.8;
  double top_p = 0.95;
  std::uint64_t seed = 0;

  void validate() const {
    if (min_tokens < 1 || min_tokens > max_tokens) {
      throw Error(Errc::bad_config, "need 1 <= min_tokens <= max_tokens");
    }
    if (temperature < 0.0) throw Error(Errc::bad_config, "temperature must be >= 0");
    if (top_p <= 0.0 || top_p > 1.0) throw Error(Errc::bad_config, "top_p must be in (0, 1]");
  }
};

struct Terminator {
  enum class Kind { delimiter, token_cap, end_of_generation };
  Kind kind = Kind::end_of_generation;
  std::string delimiter;  // set when kind == delimiter

  static Terminator at_delimiter(std::string d) {
    return {Kind::delimiter, std::move(d)};
  }
  static Terminator token_cap() { return {Kind::token_cap, {}}; }
  static Terminator end_of_generation() { return {Kind::end_of_generation, {}}; }
};

/// One candidate reasoning step: surface text (terminating delimiter
/// included when one was hit), the generated tokens, and one distribution
/// report per token. `score` is filled by the controller after scoring.
struct Thought {
  std::string text;
  std::vector<int> token_ids;
  std::vector<std::string> token_texts;  // surface form per token
  std::vector<certainty::TokenDistribution> distributions;
  Terminator terminator;
  certainty::StepScore score;
};

/// Token ledger. `completion_tokens` counts everything sampled, including
/// rejected candidates and text discarded by client-side truncation;
/// `kept_completion_tokens` counts only tokens kept in selected steps.
struct TokenUsage {
  long long prompt_tokens = 0;
  long long completion_tokens = 0;
  long long kept_completion_tokens = 0;
  long long requests = 0;

  TokenUsage& operator+=(const TokenUsage& o) {
    prompt_tokens += o.prompt_tokens;
    completion_tokens += o.completion_tokens;
    kept_completion_tokens += o.kept_completion_tokens;
    requests += o.requests;
    return *this;
  }
};

/// k candidates for one step boundary, in issuing order.
struct ProposalBatch {
  std::vector<Thought> candidates;
  std::vector<long long> sampled_tokens;  // per candidate, >= kept token count
  TokenUsage usage;                       // kept_completion_tokens left 0 here
  std::string backend_id;
  long long continuation_requests = 0;  // re-requests issued to honor min_tokens
};

struct GreedyCompletion {
  Thought thought;
  TokenUsage usage;
};

class LmBackend {
 public:
  virtual ~LmBackend() = default;

  /// Exactly k independent candidates for the next step, stopping each at the
  /// first stop-sequence match at/after min_tokens, or at max_tokens.
  /// Candidate order equals issuing order.
  virtual ProposalBatch propose_steps(const std::string& context, int k,
                                      const GenerationLimits& limits) = 0;

  /// Greedy (argmax / temperature-0) completion up to max_tokens or
  /// end of sequence, with per-token logprob reports attached.
  virtual GreedyCompletion complete_greedy(const std::string& context, int max_tokens) = 0;

  virtual int vocab_size() const = 0;
  virtual std::string id() const = 0;

  /// Tail completion the scores of this backend's reports require.
  virtual certainty::TailMode tail_mode() const = 0;
};

}  // namespace selfcert::lm
