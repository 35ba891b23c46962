// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <random>

#include "doctest.h"
#include "selfcert/controller.hpp"
#include "selfcert/seeds.hpp"
#include "selfcert/synthetic_lm.hpp"

using namespace selfcert;
using namespace selfcert::control;
using namespace selfcert::lm;

namespace {

StrategyConfig base_config(Strategy strategy, int k) {
  StrategyConfig cfg;
  cfg.strategy = strategy;
  cfg.k = k;
  cfg.limits.min_tokens = 5;
  cfg.limits.max_tokens = 300;
  cfg.limits.temperature = 1.0;
  cfg.limits.top_p = 1.0;
  return cfg;
}

/// Near-deterministic linear machine emitting `emissions` then eos; for
/// shapes the shipped builders do not cover.
SyntheticSpec linear_spec(std::vector<std::string> tokens, std::vector<int> emissions) {
  SyntheticSpec spec;
  spec.vocab_size = static_cast<int>(tokens.size());
  spec.eos_token = 0;
  spec.begin_token = emissions.front();
  spec.start_state = 0;
  spec.token_text = std::move(tokens);
  emissions.push_back(0);  // close with eos
  const int v = spec.vocab_size;
  for (std::size_t i = 0; i < emissions.size(); ++i) {
    SyntheticState st;
    st.name = "s" + std::to_string(i);
    st.weights.assign(static_cast<std::size_t>(v), 1e-12);
    st.weights[static_cast<std::size_t>(emissions[i])] = 1.0 - (v - 1) * 1e-12;
    const int next = std::min(static_cast<int>(i) + 1, static_cast<int>(emissions.size()) - 1);
    st.next.assign(static_cast<std::size_t>(v), next);
    spec.states.push_back(std::move(st));
  }
  return spec;
}

/// Throws BackendUnavailable after a fixed number of proposal calls.
class FlakyBackend final : public LmBackend {
 public:
  FlakyBackend(SyntheticSpec spec, int fail_after) : inner_(std::move(spec)), fail_after_(fail_after) {}

  ProposalBatch propose_steps(const std::string& context, int k,
                              const GenerationLimits& limits) override {
    if (calls_++ >= fail_after_) {
      throw Error(Errc::backend_unavailable, "injected outage");
    }
    return inner_.propose_steps(context, k, limits);
  }
  GreedyCompletion complete_greedy(const std::string& context, int max_tokens) override {
    throw Error(Errc::backend_unavailable, "injected outage");
    (void)context;
    (void)max_tokens;
  }
  int vocab_size() const override { return inner_.vocab_size(); }
  std::string id() const override { return "flaky"; }
  certainty::TailMode tail_mode() const override { return inner_.tail_mode(); }

 private:
  SyntheticLm inner_;
  int calls_ = 0;
  int fail_after_ = 0;
};

}  // namespace

TEST_CASE("greedy run answers on the scripted fixture") {
  SyntheticLm lm(make_script_spec());
  const auto cfg = base_config(Strategy::greedy, 1);
  const Trajectory a = run_greedy(lm, "What is 2+2?", cfg);
  const Trajectory b = run_greedy(lm, "What is 2+2?", cfg);

  CHECK(a.termination == Termination::answered);
  REQUIRE(a.answer.has_value());
  CHECK(a.answer->canonical == "4");
  CHECK(a.steps.size() == 3);
  CHECK(a.per_step_certainty.size() == a.steps.size());
  CHECK(a.per_step_gain.empty());
  CHECK(a.prompt.starts_with("Solve the following math problem"));
  CHECK(a.generated() == b.generated());
  CHECK(a.usage.completion_tokens == a.usage.kept_completion_tokens);

  // steps reproduce the completion byte for byte
  CHECK(a.steps[0].thought.text.ends_with(".\n\n"));
  CHECK(a.steps[2].thought.text.find("\\boxed{4}") != std::string::npos);
}

TEST_CASE("greedy run hits the token cap when the answer cannot fit") {
  SyntheticLm lm(make_script_spec());
  auto cfg = base_config(Strategy::greedy, 1);
  cfg.greedy_max_tokens = 4;
  const Trajectory traj = run_greedy(lm, "What is 2+2?", cfg);
  CHECK(traj.termination == Termination::token_cap);
  CHECK_FALSE(traj.answer.has_value());
  CHECK(traj.usage.completion_tokens == 4);
}

TEST_CASE("certainty_max walks the planted fixture to an answer") {
  SyntheticLm lm(make_planted_spec({}));
  const auto cfg = base_config(Strategy::certainty_max, 8);
  const Trajectory traj = run_certainty_max(lm, "What is 2+2?", cfg, /*chain_seed=*/42);

  CHECK(traj.termination == Termination::answered);
  REQUIRE(traj.answer.has_value());
  CHECK(traj.steps.size() == 3);
  CHECK(traj.per_step_certainty.size() == 3);
  CHECK(traj.per_step_gain.size() == 3);

  for (const auto& step : traj.steps) {
    REQUIRE(step.candidates.size() == 8);
    // selection dominance with first-max tie-break
    const auto& kept = step.candidates[static_cast<std::size_t>(step.selected_index)];
    for (std::size_t i = 0; i < step.candidates.size(); ++i) {
      CHECK(kept.mean_certainty >= step.candidates[i].mean_certainty);
      if (static_cast<int>(i) < step.selected_index) {
        CHECK(step.candidates[i].mean_certainty < kept.mean_certainty);
      }
    }
    CHECK(step.gain >= 0.0);
  }

  // ledger: sampled across all candidates, kept only the selected texts
  long long sampled = 0;
  long long kept = 0;
  for (const auto& step : traj.steps) {
    for (const auto& c : step.candidates) sampled += c.sampled_tokens;
    kept += static_cast<long long>(step.thought.token_ids.size());
  }
  CHECK(traj.usage.completion_tokens == sampled);
  CHECK(traj.usage.kept_completion_tokens == kept);
  CHECK(kept < sampled);
  CHECK(traj.usage.requests == 3);
}

TEST_CASE("sampling only the first m steps degrades to single-sample continuation") {
  SyntheticLm lm(make_planted_spec({}));
  auto cfg = base_config(Strategy::certainty_max, 16);
  cfg.sample_first_m = 1;
  const Trajectory traj = run_certainty_max(lm, "q", cfg, 7);
  REQUIRE(traj.steps.size() == 3);
  CHECK(traj.steps[0].candidates.size() == 16);
  CHECK(traj.steps[1].candidates.size() == 1);
  CHECK(traj.steps[2].candidates.size() == 1);
  CHECK(traj.steps[1].gain == 0.0);
}

TEST_CASE("zero sampling budget equals the k=1 loop byte for byte") {
  SyntheticLm lm(make_planted_spec({}));
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL}) {
    auto zero_budget = base_config(Strategy::certainty_max, 8);
    zero_budget.sample_first_m = 0;
    auto single = base_config(Strategy::certainty_max, 1);

    const Trajectory a = run_certainty_max(lm, "q", zero_budget, seed);
    const Trajectory b = run_certainty_max(lm, "q", single, seed);
    CHECK(a.generated() == b.generated());
    REQUIRE(a.steps.size() == b.steps.size());
    for (std::size_t i = 0; i < a.steps.size(); ++i) {
      CHECK(a.steps[i].thought.text == b.steps[i].thought.text);
      CHECK(a.steps[i].thought.token_ids == b.steps[i].thought.token_ids);
    }
    CHECK(a.answer.has_value() == b.answer.has_value());
    CHECK(a.usage.completion_tokens == b.usage.completion_tokens);
    CHECK(a.usage.kept_completion_tokens == a.usage.completion_tokens);
  }
}

TEST_CASE("argmax-equivalent sampling reproduces the greedy path") {
  SyntheticLm lm(make_script_spec());
  auto cfg = base_config(Strategy::certainty_max, 4);
  cfg.limits.temperature = 0.0;
  const Trajectory stepped = run_certainty_max(lm, "q", cfg, 11);
  const Trajectory greedy = run_greedy(lm, "q", base_config(Strategy::greedy, 1));

  CHECK(stepped.generated() == greedy.generated());
  REQUIRE(stepped.steps.size() == greedy.steps.size());
  for (std::size_t i = 0; i < stepped.steps.size(); ++i) {
    CHECK(stepped.steps[i].thought.text == greedy.steps[i].thought.text);
    CHECK(stepped.per_step_certainty[i] ==
          doctest::Approx(greedy.per_step_certainty[i]).epsilon(1e-12));
  }
  CHECK(stepped.answer->canonical == greedy.answer->canonical);
}

TEST_CASE("step cap stops an unanswered trajectory") {
  SyntheticLm lm(make_planted_spec({}));
  auto cfg = base_config(Strategy::certainty_max, 2);
  cfg.max_steps = 2;  // the planted answer lands on step 3
  const Trajectory traj = run_certainty_max(lm, "q", cfg, 9);
  CHECK(traj.termination == Termination::step_cap);
  CHECK(traj.steps.size() == 2);
  CHECK_FALSE(traj.answer.has_value());
}

TEST_CASE("end of generation without an answer closes the trajectory") {
  auto spec = linear_spec({"", "### Go\n", " mm", ".\n\n"},
                          {1, 2, 2, 2, 2, 2, 3, 2, 2, 2, 2, 2});
  SyntheticLm lm(spec);
  const auto cfg = base_config(Strategy::certainty_max, 2);
  const Trajectory traj = run_certainty_max(lm, "q", cfg, 3);
  CHECK(traj.termination == Termination::token_cap);
  CHECK(traj.steps.size() == 2);
  CHECK(traj.steps[1].thought.terminator.kind == Terminator::Kind::end_of_generation);
  CHECK_FALSE(traj.answer.has_value());
}

TEST_CASE("danish answers normalize with the decimal comma") {
  auto spec = linear_spec({"", "### Ok\n", " mm", "Derfor er det endelige svar: \\boxed{3,5}"},
                          {1, 2, 2, 2, 2, 2, 3});
  SyntheticLm lm(spec);
  auto cfg = base_config(Strategy::certainty_max, 1);
  cfg.language = seg::Language::danish;
  const Trajectory traj = run_certainty_max(lm, "Hvad er 3,5?", cfg, 1);
  CHECK(traj.prompt.starts_with("Løs følgende"));
  REQUIRE(traj.answer.has_value());
  CHECK(traj.answer->canonical == "7/2");
  CHECK(traj.answer->kind == seg::AnswerKind::rational);
}

TEST_CASE("backend failure mid-trajectory preserves partial state") {
  FlakyBackend flaky(make_planted_spec({}), /*fail_after=*/2);
  const auto cfg = base_config(Strategy::certainty_max, 2);
  const Trajectory traj = run_certainty_max(flaky, "q", cfg, 5);
  CHECK(traj.termination == Termination::backend_error);
  CHECK(traj.steps.size() == 2);
  CHECK(traj.error.find("injected outage") != std::string::npos);
  CHECK_FALSE(traj.answer.has_value());

  const Trajectory g = run_greedy(flaky, "q", base_config(Strategy::greedy, 1));
  CHECK(g.termination == Termination::backend_error);
  CHECK(g.steps.empty());
}

TEST_CASE("majority vote follows counts, then earliest support") {
  auto ans = [](std::string_view s) {
    return std::optional<seg::AnswerForm>(seg::normalize_answer(s));
  };
  {
    const VoteOutcome v = majority_vote({ans("4"), ans("4"), ans("7")});
    CHECK(v.winner->canonical == "4");
    CHECK(v.winner_votes == 2);
  }
  {
    const VoteOutcome v = majority_vote({ans("3"), ans("3"), ans("5"), ans("5")});
    CHECK(v.winner->canonical == "3");
  }
  {
    const VoteOutcome v = majority_vote({std::nullopt, ans("9")});
    CHECK(v.winner->canonical == "9");
    CHECK(v.winner_votes == 1);
  }
  {
    const VoteOutcome v = majority_vote({std::nullopt, std::nullopt});
    CHECK(v.all_abstained);
    CHECK_FALSE(v.winner.has_value());
  }
  {
    // different surface forms of the same canonical answer vote together
    const VoteOutcome v = majority_vote({ans("0.5"), ans("\\frac{1}{2}"), ans("9")});
    CHECK(v.winner->canonical == "1/2");
    CHECK(v.winner_votes == 2);
  }
}

TEST_CASE("self-consistency samples chains and votes") {
  SyntheticLm lm(make_planted_spec({}));
  auto cfg = base_config(Strategy::self_consistency, 5);
  const SelfConsistencyResult res = run_self_consistency(lm, "q", cfg, 31);

  REQUIRE(res.trajectories.size() == 5);
  REQUIRE(res.vote.winner.has_value());

  // the recorded ballots re-count to the same winner
  std::map<std::string, int> counts;
  for (const auto& t : res.trajectories) {
    if (t.answer.has_value()) counts[t.answer->canonical] += 1;
  }
  int best = 0;
  for (const auto& [k, c] : counts) best = std::max(best, c);
  CHECK(counts[res.vote.winner->canonical] == best);
  CHECK(res.vote.winner_votes == best);

  // chains are full generations with their own step structure
  for (const auto& t : res.trajectories) {
    CHECK(t.steps.size() >= 3);
    CHECK(t.usage.completion_tokens == t.usage.kept_completion_tokens);
  }

  // distinct seeds produce distinct chains somewhere
  bool any_differ = false;
  for (std::size_t i = 1; i < res.trajectories.size(); ++i) {
    if (res.trajectories[i].generated() != res.trajectories[0].generated()) any_differ = true;
  }
  CHECK(any_differ);

  CHECK_THROWS_AS(run_self_consistency(lm, "q", base_config(Strategy::self_consistency, 1), 1),
                  Error);
}

TEST_CASE("token budget aggregates trajectories") {
  SyntheticLm lm(make_planted_spec({}));
  const Trajectory a = run_certainty_max(lm, "q", base_config(Strategy::certainty_max, 4), 1);
  const Trajectory b = run_certainty_max(lm, "q", base_config(Strategy::certainty_max, 4), 2);
  const lm::TokenUsage total = token_budget(std::vector<Trajectory>{a, b});
  CHECK(total.completion_tokens == a.usage.completion_tokens + b.usage.completion_tokens);
  CHECK(total.kept_completion_tokens <= total.completion_tokens);
}

TEST_CASE("strategy config validation") {
  auto cfg = base_config(Strategy::certainty_max, 0);
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = base_config(Strategy::certainty_max, 2);
  cfg.sample_first_m = 99;
  cfg.max_steps = 40;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = base_config(Strategy::certainty_max, 2);
  cfg.limits.top_p = 0.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  CHECK(parse_strategy("greedy") == Strategy::greedy);
  CHECK_THROWS_AS(parse_strategy("beam"), Error);
}
