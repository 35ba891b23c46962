// SPDX-License-Identifier: Apache-2.0

#include "selfcert/errors.hpp"

namespace selfcert {

const char* errc_name(Errc c) {
  switch (c) {
    case Errc::tail_underflow: return "TailUnderflow";
    case Errc::non_finite: return "NonFinite";
    case Errc::incomplete_distribution: return "IncompleteDistribution";
    case Errc::empty_step: return "EmptyStep";
    case Errc::empty_candidate_set: return "EmptyCandidateSet";
    case Errc::unknown_language: return "UnknownLanguage";
    case Errc::empty_question: return "EmptyQuestion";
    case Errc::backend_unavailable: return "BackendUnavailable";
    case Errc::logprobs_unsupported: return "LogprobsUnsupported";
    case Errc::stop_limit_exceeded: return "StopLimitExceeded";
    case Errc::file_unreadable: return "FileUnreadable";
    case Errc::empty_dataset: return "EmptyDataset";
    case Errc::empty_input: return "EmptyInput";
    case Errc::bad_config: return "BadConfig";
  }
  return "UnknownError";
}

}  // namespace selfcert
