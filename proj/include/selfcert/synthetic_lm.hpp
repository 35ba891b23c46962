#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file synthetic_lm.hpp
 * @brief Deterministic in-process language model for oracle-grade tests.
 *
 * The model is a small weighted state machine over a tiny vocabulary: each
 * state holds a full categorical distribution over next tokens (every
 * probability strictly positive) and a per-token successor map. Sampling is
 * driven by an explicit 64-bit seed, so identical (fixture, context, limits,
 * seed) produce byte-identical output on any platform.
 *
 * Distributions are reported in full (reported_k == V), which makes
 * exact-mode certainty available and lets tests check scoring against a
 * direct-summation reference.
 *
 * Continuation works by replay: generation always opens with the fixture's
 * begin token, whose surface must not occur in prompts. To continue a
 * context, the engine finds the last begin-token occurrence, re-tokenizes
 * the generated suffix (greedy longest match over token surfaces), and folds
 * the successor map to recover the current state.
 *
 * Sampling parameters: temperature reshapes the distribution (0 = argmax of
 * the base weights) and the reshaped distribution is what gets reported;
 * top_p truncates the sampled support only, so reported probabilities stay
 * strictly positive.
 *
 * Fixture files are JSON:
 *
 *   {
 *     "vocab_size": 16, "eos_token": 0, "begin_token": 2,
 *     "start_state": 0, "seed": 1, "branch_sharpness": 0.85,
 *     "tokens": ["", ".\n\n", ...],                  // surface per token id
 *     "planted": [{"state": 1, "token": 4}],         // decision states
 *     "states": [{"name": "...", "weights": [...],   // V doubles, sum 1
 *                 "next": [...]}]                    // V successor indices
 *   }
 */

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "selfcert/backend.hpp"

namespace selfcert::lm {

struct SyntheticState {
  std::string name;
  std::vector<double> weights;  // size V, all > 0, sum 1 within 1e-12
  std::vector<int> next;        // size V, sampled token -> successor state
};

struct SyntheticSpec {
  int vocab_size = 0;
  int eos_token = 0;
  int begin_token = 0;
  int start_state = 0;
  std::uint64_t seed = 0;
  double branch_sharpness = 0.0;          // builder parameter, kept for provenance
  std::vector<std::string> token_text;    // size V; eos surface is ""
  std::map<int, int> planted;             // decision state -> correct token
  std::vector<SyntheticState> states;

  void validate() const;
};

SyntheticSpec load_synthetic_spec(const std::string& path);
void save_synthetic_spec(const SyntheticSpec& spec, const std::string& path);
std::string synthetic_spec_to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(std::string_view json_text);

/// Replay result: machine state after folding a context's generated suffix.
struct ReplayPoint {
  int state = 0;
  bool generation_started = false;  // begin token seen in context
  bool ended = false;               // eos already emitted
};

class SyntheticLm final : public LmBackend {
 public:
  explicit SyntheticLm(SyntheticSpec spec);

  ProposalBatch propose_steps(const std::string& context, int k,
                              const GenerationLimits& limits) override;
  GreedyCompletion complete_greedy(const std::string& context, int max_tokens) override;
  int vocab_size() const override { return spec_.vocab_size; }
  std::string id() const override { return "synthetic"; }
  certainty::TailMode tail_mode() const override { return certainty::TailMode::exact; }

  const SyntheticSpec& spec() const { return spec_; }

  /// Full-vocabulary report for a state (after temperature reshaping;
  /// temperature <= 0 reports the base weights).
  certainty::TokenDistribution state_distribution(int state, double temperature = 1.0) const;

  ReplayPoint replay(std::string_view context) const;

 private:
  struct Sampled {
    Thought thought;
    long long tokens = 0;
  };

  Sampled generate(int start_state, const GenerationLimits& limits, std::uint64_t seed,
                   bool greedy, int max_tokens) const;

  SyntheticSpec spec_;
};

// ---------------------------------------------------------------------------
// Fixture builders
// ---------------------------------------------------------------------------

/// Mixture used for branch-body states: mass `lambda` on the main token, the
/// rest spread over the safe word tokens, with a 1e-12 floor on every other
/// token so the full distribution stays strictly positive.
///
/// Planted-branch fixture: the first step opens with a decision token drawn
/// with probability `correct_draw_prob` for the planted (correct) branch,
/// while the argmax goes to a wrong branch. Correct-branch body states are
/// sharper (`sharp_lambda`) than wrong-branch ones (`flat_lambda`), so a
/// correct candidate always outscores a wrong one; the two branches end in
/// different boxed answers. Selection accuracy over k sampled candidates is
/// therefore 1 - (1 - correct_draw_prob)^k by construction.
struct PlantedParams {
  int vocab_size = 16;
  double correct_draw_prob = 0.3;
  double wrong_argmax_prob = 0.42;
  double sharp_lambda = 0.85;
  double flat_lambda = 0.35;
  int body_tokens = 6;         // step 1 branch body length
  int middle_tokens = 6;       // step 2 body length
  int answer_body_tokens = 4;  // step 3 body length before the boxed answer
  std::string correct_answer = "4";
  std::string wrong_answer = "7";
  std::uint64_t seed = 1;
};

SyntheticSpec make_planted_spec(const PlantedParams& params = {});

/// Linear scripted fixture: the argmax path emits two short reasoning steps
/// and then "\boxed{4}". Sampling wobbles over the safe words but keeps the
/// script's structure.
SyntheticSpec make_script_spec(std::uint64_t seed = 1);

}  // namespace selfcert::lm
