#pragma once

// SPDX-License-Identifier: Apache-2.0

#include <stdexcept>
#include <string>

namespace selfcert {

/// Error categories surfaced by the library. Each maps to one failure mode
/// of the scoring/segmentation/backend/harness pipeline.
enum class Errc {
  // certainty
  tail_underflow,         ///< residual top-k mass <= 0 while entries < vocab
  non_finite,             ///< a completed probability is zero / logprob not finite
  incomplete_distribution,///< exact mode used with a partial (top-k) report
  empty_step,             ///< step score requested for zero tokens
  empty_candidate_set,    ///< selection over an empty candidate list
  // segmenter / answers
  unknown_language,
  empty_question,
  // backends
  backend_unavailable,
  logprobs_unsupported,
  stop_limit_exceeded,
  // harness
  file_unreadable,
  empty_dataset,
  empty_input,
  bad_config,
};

const char* errc_name(Errc c);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const { return code_; }

 private:
  Errc code_;
};

}  // namespace selfcert
