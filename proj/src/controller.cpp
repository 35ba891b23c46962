// SPDX-License-Identifier: Apache-2.0

#include "selfcert/controller.hpp"

#include <algorithm>
#include <map>

#include "selfcert/seeds.hpp"

namespace selfcert::control {

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::greedy: return "greedy";
    case Strategy::self_consistency: return "self_consistency";
    case Strategy::certainty_max: return "certainty_max";
  }
  return "unknown";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "greedy") return Strategy::greedy;
  if (name == "self_consistency") return Strategy::self_consistency;
  if (name == "certainty_max") return Strategy::certainty_max;
  throw Error(Errc::bad_config, "unknown strategy: " + std::string(name));
}

const char* termination_name(Termination t) {
  switch (t) {
    case Termination::answered: return "answered";
    case Termination::step_cap: return "step_cap";
    case Termination::token_cap: return "token_cap";
    case Termination::backend_error: return "backend_error";
  }
  return "unknown";
}

void StrategyConfig::validate() const {
  if (k < 1) throw Error(Errc::bad_config, "k must be >= 1");
  if (strategy == Strategy::self_consistency && k < 2) {
    throw Error(Errc::bad_config, "self_consistency needs k >= 2");
  }
  if (max_steps < 1) throw Error(Errc::bad_config, "max_steps must be >= 1");
  if (sample_first_m.has_value() &&
      (*sample_first_m < 0 || *sample_first_m > max_steps)) {
    throw Error(Errc::bad_config, "sample_first_m must be in [0, max_steps]");
  }
  if (greedy_max_tokens < 1) throw Error(Errc::bad_config, "greedy_max_tokens must be >= 1");
  limits.validate();
}

std::vector<std::string> StrategyConfig::delimiters() const {
  if (!limits.stop_sequences.empty()) return limits.stop_sequences;
  return seg::default_delimiters();
}

std::string Trajectory::generated() const {
  std::string out;
  for (const auto& s : steps) out += s.thought.text;
  return out;
}

CandidateSet score_and_select(std::vector<lm::Thought> thoughts, certainty::TailMode tail_mode,
                              certainty::CertaintyStats* stats) {
  if (thoughts.empty()) {
    throw Error(Errc::empty_candidate_set, "no candidates at step boundary");
  }
  std::vector<std::span<const certainty::TokenDistribution>> views;
  views.reserve(thoughts.size());
  for (const auto& t : thoughts) views.emplace_back(t.distributions);

  std::vector<certainty::StepScore> scores =
      certainty::score_steps(views, tail_mode, stats);
  CandidateSet set;
  set.selected_index = certainty::select_best(scores);
  set.gain = certainty::certainty_gain(scores, set.selected_index);
  for (std::size_t i = 0; i < thoughts.size(); ++i) {
    thoughts[i].score = std::move(scores[i]);
  }
  set.thoughts = std::move(thoughts);
  return set;
}

namespace {

std::string render(const std::string& question, const StrategyConfig& config) {
  if (config.prompt_template.has_value()) {
    return seg::render_prompt(question, *config.prompt_template);
  }
  return seg::render_prompt(question, config.language);
}

std::vector<CandidateSummary> summarize(const CandidateSet& set,
                                        std::span<const long long> sampled_tokens) {
  std::vector<CandidateSummary> out;
  out.reserve(set.thoughts.size());
  for (std::size_t i = 0; i < set.thoughts.size(); ++i) {
    CandidateSummary cs;
    cs.mean_certainty = set.thoughts[i].score.mean_certainty;
    cs.kept_tokens = static_cast<long long>(set.thoughts[i].token_ids.size());
    cs.sampled_tokens = i < sampled_tokens.size() ? sampled_tokens[i] : cs.kept_tokens;
    out.push_back(cs);
  }
  return out;
}

/// Splits a finished completion into steps at the configured delimiters and
/// scores each step from its aligned token distributions. Shared by greedy
/// and by self-consistency chains.
Trajectory trajectory_from_completion(lm::Thought&& thought, lm::TokenUsage usage,
                                      std::string prompt, const StrategyConfig& config,
                                      certainty::TailMode tail_mode) {
  Trajectory traj;
  traj.prompt = std::move(prompt);
  traj.usage = usage;
  traj.usage.kept_completion_tokens = static_cast<long long>(thought.token_ids.size());

  const auto delims = config.delimiters();
  const auto segments = seg::segment(thought.text, delims);

  // Token -> segment assignment by first byte. A token straddling a segment
  // boundary counts toward the segment it starts in.
  std::vector<std::size_t> seg_end(segments.size());
  {
    std::size_t acc = 0;
    for (std::size_t i = 0; i < segments.size(); ++i) {
      acc += segments[i].text.size();
      seg_end[i] = acc;
    }
  }
  std::vector<std::vector<std::size_t>> members(segments.size());
  {
    std::size_t off = 0;
    std::size_t seg_idx = 0;
    for (std::size_t i = 0; i < thought.token_texts.size(); ++i) {
      while (seg_idx + 1 < segments.size() && off >= seg_end[seg_idx]) ++seg_idx;
      if (seg_idx < members.size()) members[seg_idx].push_back(i);
      off += thought.token_texts[i].size();
    }
  }

  certainty::CertaintyStats stats;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    StepRecord rec;
    rec.thought.text = segments[s].text;
    if (segments[s].delimiter.has_value()) {
      rec.thought.terminator = lm::Terminator::at_delimiter(*segments[s].delimiter);
    } else {
      rec.thought.terminator = thought.terminator;
    }
    for (std::size_t idx : members[s]) {
      rec.thought.token_ids.push_back(thought.token_ids[idx]);
      rec.thought.token_texts.push_back(thought.token_texts[idx]);
      rec.thought.distributions.push_back(thought.distributions[idx]);
    }
    if (!rec.thought.distributions.empty()) {
      rec.thought.score =
          certainty::step_self_certainty(rec.thought.distributions, tail_mode, &stats);
    }
    traj.per_step_certainty.push_back(rec.thought.score.mean_certainty);
    traj.steps.push_back(std::move(rec));
  }
  traj.diagnostics.tail_clamps = stats.tail_clamps;

  const auto scan = seg::scan_boxed(thought.text);
  traj.diagnostics.unbalanced_boxed = scan.dangling_opens;
  if (scan.content.has_value()) {
    traj.answer = seg::normalize_answer(*scan.content, seg::locale_for(config.language));
    traj.termination = Termination::answered;
  } else {
    traj.termination = Termination::token_cap;
  }
  return traj;
}

}  // namespace

Trajectory run_greedy(lm::LmBackend& backend, const std::string& question,
                      const StrategyConfig& config) {
  config.validate();
  const std::string prompt = render(question, config);

  lm::GreedyCompletion completion;
  try {
    completion = backend.complete_greedy(prompt, config.greedy_max_tokens);
  } catch (const Error& e) {
    Trajectory traj;
    traj.prompt = prompt;
    traj.termination = Termination::backend_error;
    traj.error = e.what();
    return traj;
  }
  return trajectory_from_completion(std::move(completion.thought), completion.usage, prompt,
                                    config, backend.tail_mode());
}

Trajectory run_certainty_max(lm::LmBackend& backend, const std::string& question,
                             const StrategyConfig& config, std::uint64_t chain_seed) {
  config.validate();
  Trajectory traj;
  traj.prompt = render(question, config);

  std::string context = traj.prompt;
  std::string generated;
  certainty::CertaintyStats stats;

  for (int step_index = 0; step_index < config.max_steps; ++step_index) {
    const bool full_sampling =
        !config.sample_first_m.has_value() || step_index < *config.sample_first_m;
    const int k = full_sampling ? config.k : 1;

    lm::GenerationLimits limits = config.limits;
    limits.stop_sequences = config.delimiters();
    limits.seed = seeds::derive(chain_seed, static_cast<std::uint64_t>(step_index));

    lm::ProposalBatch batch;
    try {
      batch = backend.propose_steps(context, k, limits);
    } catch (const Error& e) {
      traj.termination = Termination::backend_error;
      traj.error = e.what();
      break;
    }
    const std::vector<long long> sampled_tokens = batch.sampled_tokens;
    traj.usage += batch.usage;
    traj.diagnostics.continuation_requests += batch.continuation_requests;

    CandidateSet set = score_and_select(std::move(batch.candidates), backend.tail_mode(), &stats);

    StepRecord rec;
    rec.candidates = summarize(set, sampled_tokens);
    rec.selected_index = static_cast<int>(set.selected_index);
    rec.gain = set.gain;
    rec.thought = std::move(set.thoughts[set.selected_index]);

    traj.usage.kept_completion_tokens += static_cast<long long>(rec.thought.token_ids.size());
    traj.per_step_certainty.push_back(rec.thought.score.mean_certainty);
    traj.per_step_gain.push_back(rec.gain);

    generated += rec.thought.text;
    context += rec.thought.text;
    const bool ended = rec.thought.terminator.kind == lm::Terminator::Kind::end_of_generation;
    traj.steps.push_back(std::move(rec));

    const auto scan = seg::scan_boxed(generated);
    traj.diagnostics.unbalanced_boxed = scan.dangling_opens;
    if (scan.content.has_value()) {
      traj.answer = seg::normalize_answer(*scan.content, seg::locale_for(config.language));
      traj.termination = Termination::answered;
      break;
    }
    if (ended) {
      // The model closed the generation without a boxed answer; there is
      // nothing left to sample.
      traj.termination = Termination::token_cap;
      break;
    }
    if (step_index + 1 == config.max_steps) {
      traj.termination = Termination::step_cap;
    }
  }
  traj.diagnostics.tail_clamps = stats.tail_clamps;
  return traj;
}

VoteOutcome majority_vote(const std::vector<std::optional<seg::AnswerForm>>& ballots) {
  VoteOutcome out;
  std::map<std::string, int> votes;
  std::map<std::string, std::size_t> first_index;
  for (std::size_t i = 0; i < ballots.size(); ++i) {
    if (!ballots[i].has_value()) continue;
    const std::string& key = ballots[i]->canonical;
    votes[key] += 1;
    first_index.emplace(key, i);
  }
  if (votes.empty()) {
    out.all_abstained = true;
    return out;
  }
  std::string best;
  int best_votes = -1;
  for (const auto& [key, count] : votes) {
    if (count > best_votes ||
        (count == best_votes && first_index[key] < first_index[best])) {
      best = key;
      best_votes = count;
    }
  }
  out.winner = *ballots[first_index[best]];
  out.winner_votes = best_votes;
  return out;
}

SelfConsistencyResult run_self_consistency(lm::LmBackend& backend, const std::string& question,
                                           const StrategyConfig& config,
                                           std::uint64_t problem_seed) {
  config.validate();
  const std::string prompt = render(question, config);

  SelfConsistencyResult result;
  std::vector<std::optional<seg::AnswerForm>> ballots;
  for (int chain = 0; chain < config.k; ++chain) {
    lm::GenerationLimits limits = config.limits;
    limits.min_tokens = 1;
    limits.max_tokens = config.greedy_max_tokens;
    limits.stop_sequences.clear();  // full generations, segmented post hoc
    limits.seed = seeds::derive(problem_seed, static_cast<std::uint64_t>(chain));

    Trajectory traj;
    try {
      lm::ProposalBatch batch = backend.propose_steps(prompt, 1, limits);
      lm::TokenUsage usage = batch.usage;
      traj = trajectory_from_completion(std::move(batch.candidates[0]), usage, prompt, config,
                                        backend.tail_mode());
      traj.diagnostics.continuation_requests += batch.continuation_requests;
    } catch (const Error& e) {
      traj.prompt = prompt;
      traj.termination = Termination::backend_error;
      traj.error = e.what();
    }
    ballots.push_back(traj.answer);
    result.trajectories.push_back(std::move(traj));
  }
  result.vote = majority_vote(ballots);
  return result;
}

lm::TokenUsage token_budget(const Trajectory& trajectory) { return trajectory.usage; }

lm::TokenUsage token_budget(std::span<const Trajectory> trajectories) {
  lm::TokenUsage total;
  for (const auto& t : trajectories) total += t.usage;
  return total;
}

}  // namespace selfcert::control
