#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file http_backend.hpp
 * @brief OpenAI-compatible completions client with per-token logprob reports.
 *
 * Talks to POST {base_url}/v1/completions with the standard fields (prompt,
 * max_tokens, temperature, top_p, n, seed, stop, logprobs) and parses the
 * per-token logprob arrays and top-alternative maps into TokenDistribution
 * reports. The bearer credential is read from the SELFCERT_API_KEY
 * environment variable (configurable name).
 *
 * Step proposals honor the delimiter semantics client-side:
 *
 *  - Servers cap the stop list (commonly at 4), so only a suffix-cover of
 *    the configured delimiters is sent ("\n\n" covers every *-\n\n entry);
 *    the full list is re-applied client-side by truncating at the earliest
 *    delimiter match and discarding logprobs past the cut. If even the cover
 *    exceeds the cap, StopLimitExceeded is raised.
 *  - Servers strip the matched stop string; the client re-appends it before
 *    truncation so a step's text ends with its delimiter.
 *  - Stop matches before min_tokens are ignored by re-requesting a
 *    continuation; the number of such re-requests is reported per batch.
 *
 * The k candidates of a batch are issued either as one request with n=k
 * (batched mode) or as k independent requests with per-candidate derived
 * seeds, fanned out over a bounded number of threads. Results merge by
 * candidate index, so ordering never depends on completion order.
 *
 * Token ids: completion logprobs identify tokens by string. Strings are
 * interned to small dense ids per backend instance; ids are stable within a
 * run and distinct within every report, which is all the scoring needs.
 * vocab_size cannot be discovered over the wire and must be configured.
 */

#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "selfcert/backend.hpp"

namespace selfcert::lm {

struct HttpBackendConfig {
  std::string base_url;  // e.g. "http://127.0.0.1:8000"
  std::string model;
  int vocab_size = 0;  // required; model-dependent (e.g. 151936 for Qwen2.5)
  int top_logprobs = 20;
  int max_server_stops = 4;
  int max_retries = 3;
  double retry_backoff_s = 0.5;
  double timeout_s = 120.0;
  int parallelism = 4;
  bool batched_n = false;  // one request with n=k instead of per-candidate fanout
  std::string api_key_env = "SELFCERT_API_KEY";

  void validate() const;
};

/// Minimal suffix-cover of a delimiter list: drops every delimiter that has
/// another list entry as a proper suffix (the shorter entry fires on the same
/// occurrence). Throws StopLimitExceeded when the cover still exceeds `cap`.
std::vector<std::string> reduce_stops(const std::vector<std::string>& delimiters,
                                      std::size_t cap);

class HttpBackend final : public LmBackend {
 public:
  explicit HttpBackend(HttpBackendConfig config);
  ~HttpBackend() override;

  ProposalBatch propose_steps(const std::string& context, int k,
                              const GenerationLimits& limits) override;
  GreedyCompletion complete_greedy(const std::string& context, int max_tokens) override;
  int vocab_size() const override { return config_.vocab_size; }
  std::string id() const override;
  certainty::TailMode tail_mode() const override { return certainty::TailMode::uniform_tail; }

  const HttpBackendConfig& config() const { return config_; }

  struct Completion;  // accumulated server output for one candidate (internal)

 private:
  /// One candidate via (possibly several) requests: the continuation loop
  /// that enforces min_tokens lives here.
  Completion sample_candidate(const std::string& context, const GenerationLimits& limits,
                              std::uint64_t seed,
                              const std::vector<std::string>& server_stops) const;
  std::vector<Completion> batched_first_round(const std::string& context, int k,
                                              const GenerationLimits& limits,
                                              const std::vector<std::string>& server_stops) const;
  Thought finalize_candidate(Completion&& completion, const GenerationLimits& limits,
                             long long& sampled_tokens) const;

  int intern(const std::string& token_text) const;

  HttpBackendConfig config_;
  std::string api_key_;
  mutable std::mutex intern_mutex_;
  mutable std::unordered_map<std::string, int> intern_ids_;
};

}  // namespace selfcert::lm
