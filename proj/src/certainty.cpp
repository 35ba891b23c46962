// SPDX-License-Identifier: Apache-2.0

#include "selfcert/certainty.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <unordered_set>

namespace selfcert::certainty {

void validate(const TokenDistribution& dist) {
  if (dist.vocab_size < 2) {
    throw Error(Errc::bad_config, "vocab_size must be >= 2");
  }
  const int k = dist.reported_k();
  if (k < 1 || k > dist.vocab_size) {
    throw Error(Errc::bad_config, "reported_k out of [1, vocab_size]");
  }
  double mass = 0.0;
  double prev = 0.0;
  std::unordered_set<int> seen;
  seen.reserve(dist.entries.size());
  for (std::size_t i = 0; i < dist.entries.size(); ++i) {
    const auto& e = dist.entries[i];
    if (!std::isfinite(e.logprob) || e.logprob > 0.0) {
      throw Error(Errc::non_finite, "logprob not finite or > 0");
    }
    if (i > 0 && e.logprob > prev) {
      throw Error(Errc::bad_config, "entries not sorted by descending logprob");
    }
    prev = e.logprob;
    if (!seen.insert(e.token_id).second) {
      throw Error(Errc::bad_config, "duplicate token id in report");
    }
    mass += std::exp(e.logprob);
  }
  if (mass > 1.0 + 1e-6) {
    throw Error(Errc::bad_config, "reported mass exceeds 1 + 1e-6");
  }
}

double token_self_certainty(const TokenDistribution& dist, TailMode tail_mode,
                            CertaintyStats* stats) {
  const int v = dist.vocab_size;
  const int k = dist.reported_k();
  if (v < 2 || k < 1) {
    throw Error(Errc::bad_config, "distribution needs vocab_size >= 2 and >= 1 entry");
  }
  if (tail_mode == TailMode::exact && k != v) {
    throw Error(Errc::incomplete_distribution, "exact mode requires reported_k == vocab_size");
  }

  // Accumulates sum_j log(V p_j) with log V folded into every term: the
  // per-term values stay near zero for flat distributions, which avoids the
  // cancellation of summing raw logprobs and subtracting V log V at the end.
  // Kahan compensation keeps the summation error flat in k.
  const double log_v = std::log(static_cast<double>(v));
  double sum = 0.0;
  double comp = 0.0;
  auto add = [&](double x) {
    const double y = x - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  };

  double mass = 0.0;
  for (const auto& e : dist.entries) {
    if (!std::isfinite(e.logprob)) {
      throw Error(Errc::non_finite, "non-finite logprob in report");
    }
    add(e.logprob + log_v);
    mass += std::exp(e.logprob);
  }

  if (k < v) {
    // Tail: (V - k) unseen tokens at residual/(V - k) each, one closed-form
    // addend instead of a materialized tail.
    const double residual = 1.0 - mass;
    if (residual <= 0.0) {
      throw Error(Errc::tail_underflow,
                  "reported mass >= 1 with reported_k < vocab_size");
    }
    double tail_p = residual / static_cast<double>(v - k);
    if (tail_p < kTailClampFloor) {
      tail_p = kTailClampFloor;
      if (stats != nullptr) {
#pragma omp atomic
        stats->tail_clamps += 1;
      }
    }
    add(static_cast<double>(v - k) * (std::log(tail_p) + log_v));
  }

  return std::max(0.0, -sum / static_cast<double>(v));
}

StepScore step_self_certainty(std::span<const TokenDistribution> dists, TailMode tail_mode,
                              CertaintyStats* stats) {
  if (dists.empty()) {
    throw Error(Errc::empty_step, "step has no token distributions");
  }
  StepScore score;
  score.per_token_certainty.reserve(dists.size());
  double sum = 0.0;
  for (const auto& d : dists) {
    const double c = token_self_certainty(d, tail_mode, stats);
    score.per_token_certainty.push_back(c);
    sum += c;
  }
  score.token_count = static_cast<int>(dists.size());
  score.mean_certainty = sum / static_cast<double>(score.token_count);
  return score;
}

std::size_t select_best(std::span<const StepScore> scored) {
  if (scored.empty()) {
    throw Error(Errc::empty_candidate_set, "no candidates to select from");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < scored.size(); ++i) {
    if (scored[i].mean_certainty > scored[best].mean_certainty) {
      best = i;
    }
  }
  return best;
}

double certainty_gain(std::span<const StepScore> scored, std::size_t selected_index) {
  if (selected_index >= scored.size()) {
    throw Error(Errc::empty_candidate_set, "selected index out of range");
  }
  const double best = scored[selected_index].mean_certainty;
  double gain = 0.0;
  for (const auto& s : scored) {
    gain += best - s.mean_certainty;
  }
  return std::max(0.0, gain);
}

namespace {

// Exceptions must not escape an OpenMP region; the first one is stashed and
// rethrown once the loop has drained.
class DeferredError {
 public:
  void capture() {
    if (!failed_.exchange(true, std::memory_order_relaxed)) {
      error_ = std::current_exception();
    }
  }
  bool failed() const { return failed_.load(std::memory_order_relaxed); }
  void rethrow_if_failed() const {
    if (error_) std::rethrow_exception(error_);
  }

 private:
  std::atomic<bool> failed_{false};
  std::exception_ptr error_;
};

}  // namespace

std::vector<double> token_self_certainty_batch(std::span<const TokenDistribution> dists,
                                               TailMode tail_mode, CertaintyStats* stats) {
  std::vector<double> out(dists.size());
  const auto n = static_cast<std::int64_t>(dists.size());
  DeferredError err;
#pragma omp parallel for schedule(static) if (n >= 256)
  for (std::int64_t i = 0; i < n; ++i) {
    if (err.failed()) continue;
    try {
      out[static_cast<std::size_t>(i)] =
          token_self_certainty(dists[static_cast<std::size_t>(i)], tail_mode, stats);
    } catch (...) {
      err.capture();
    }
  }
  err.rethrow_if_failed();
  return out;
}

std::vector<StepScore> score_steps(std::span<const std::span<const TokenDistribution>> steps,
                                   TailMode tail_mode, CertaintyStats* stats) {
  std::vector<StepScore> out(steps.size());
  const auto n = static_cast<std::int64_t>(steps.size());
  DeferredError err;
#pragma omp parallel for schedule(dynamic) if (n >= 2)
  for (std::int64_t i = 0; i < n; ++i) {
    if (err.failed()) continue;
    try {
      out[static_cast<std::size_t>(i)] =
          step_self_certainty(steps[static_cast<std::size_t>(i)], tail_mode, stats);
    } catch (...) {
      err.capture();
    }
  }
  err.rethrow_if_failed();
  return out;
}

}  // namespace selfcert::certainty
