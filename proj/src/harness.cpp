// SPDX-License-Identifier: Apache-2.0

#include "selfcert/harness.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "selfcert/seeds.hpp"

namespace selfcert::eval {

using nlohmann::json;
using nlohmann::ordered_json;

const char* source_name(Source s) {
  switch (s) {
    case Source::math500: return "math500";
    case Source::gsm8k: return "gsm8k";
    case Source::gsm8k_danish: return "gsm8k_danish";
    case Source::custom: return "custom";
  }
  return "unknown";
}

Source parse_source(std::string_view name) {
  if (name == "math500") return Source::math500;
  if (name == "gsm8k") return Source::gsm8k;
  if (name == "gsm8k_danish") return Source::gsm8k_danish;
  if (name == "custom") return Source::custom;
  throw Error(Errc::bad_config, "unknown source: " + std::string(name));
}

std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::file_unreadable, path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
    if (!in) break;
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

Dataset load_dataset(const std::string& path, Source source,
                     std::optional<seg::Language> language_override) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::file_unreadable, path);

  const seg::Language source_language =
      source == Source::gsm8k_danish ? seg::Language::danish : seg::Language::english;

  Dataset ds;
  ds.path = path;
  std::set<std::string> seen_ids;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      ds.rejects.push_back({line_no, std::string("JSON parse: ") + e.what()});
      continue;
    }
    if (!j.is_object() || !j.contains("id") || !j.contains("question") || !j.contains("answer")) {
      ds.rejects.push_back({line_no, "missing id/question/answer field"});
      continue;
    }
    Problem p;
    try {
      p.id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
      p.question = j["question"].get<std::string>();
      p.gold_answer = j["answer"].is_string() ? j["answer"].get<std::string>() : j["answer"].dump();
    } catch (const json::exception& e) {
      ds.rejects.push_back({line_no, std::string("field type: ") + e.what()});
      continue;
    }
    if (p.id.empty() || p.question.empty()) {
      ds.rejects.push_back({line_no, "empty id or question"});
      continue;
    }
    if (!seen_ids.insert(p.id).second) {
      ds.rejects.push_back({line_no, "duplicate id: " + p.id});
      continue;
    }
    p.source = source;
    p.language = source_language;
    if (j.contains("language")) {
      try {
        p.language = seg::parse_language(j["language"].get<std::string>());
      } catch (const Error&) {
        ds.rejects.push_back({line_no, "unknown language value"});
        continue;
      }
    }
    if (language_override.has_value()) p.language = *language_override;
    ds.problems.push_back(std::move(p));
  }
  if (ds.problems.empty()) {
    throw Error(Errc::empty_dataset, path + " yielded no valid problems");
  }
  ds.content_hash = file_hash(path);
  return ds;
}

// ---------------------------------------------------------------------------
// JSON serialization
// ---------------------------------------------------------------------------

namespace {

const char* terminator_kind_name(lm::Terminator::Kind k) {
  switch (k) {
    case lm::Terminator::Kind::delimiter: return "delimiter";
    case lm::Terminator::Kind::token_cap: return "token_cap";
    case lm::Terminator::Kind::end_of_generation: return "end_of_generation";
  }
  return "unknown";
}

lm::Terminator terminator_from(const json& j) {
  const auto kind = j.value("kind", std::string("end_of_generation"));
  if (kind == "delimiter") return lm::Terminator::at_delimiter(j.value("delimiter", ""));
  if (kind == "token_cap") return lm::Terminator::token_cap();
  return lm::Terminator::end_of_generation();
}

control::Termination termination_from(const std::string& name) {
  if (name == "answered") return control::Termination::answered;
  if (name == "step_cap") return control::Termination::step_cap;
  if (name == "token_cap") return control::Termination::token_cap;
  return control::Termination::backend_error;
}

const char* answer_kind_name(seg::AnswerKind k) {
  switch (k) {
    case seg::AnswerKind::integer: return "integer";
    case seg::AnswerKind::rational: return "rational";
    case seg::AnswerKind::decimal: return "decimal";
    case seg::AnswerKind::expression: return "expression";
  }
  return "expression";
}

seg::AnswerKind answer_kind_from(const std::string& name) {
  if (name == "integer") return seg::AnswerKind::integer;
  if (name == "rational") return seg::AnswerKind::rational;
  if (name == "decimal") return seg::AnswerKind::decimal;
  return seg::AnswerKind::expression;
}

ordered_json answer_to_json(const seg::AnswerForm& a) {
  return {{"raw", a.raw}, {"canonical", a.canonical}, {"kind", answer_kind_name(a.kind)}};
}

seg::AnswerForm answer_from_json(const json& j) {
  seg::AnswerForm a;
  a.raw = j.value("raw", "");
  a.canonical = j.value("canonical", "");
  a.kind = answer_kind_from(j.value("kind", "expression"));
  return a;
}

ordered_json usage_to_json(const lm::TokenUsage& u) {
  return {{"prompt_tokens", u.prompt_tokens},
          {"completion_tokens", u.completion_tokens},
          {"kept_completion_tokens", u.kept_completion_tokens},
          {"requests", u.requests}};
}

lm::TokenUsage usage_from_json(const json& j) {
  lm::TokenUsage u;
  u.prompt_tokens = j.value("prompt_tokens", 0LL);
  u.completion_tokens = j.value("completion_tokens", 0LL);
  u.kept_completion_tokens = j.value("kept_completion_tokens", 0LL);
  u.requests = j.value("requests", 0LL);
  return u;
}

ordered_json config_to_json(const control::StrategyConfig& c) {
  ordered_json j;
  j["strategy"] = control::strategy_name(c.strategy);
  j["k"] = c.k;
  j["max_steps"] = c.max_steps;
  if (c.sample_first_m.has_value()) {
    j["sample_first_m"] = *c.sample_first_m;
  } else {
    j["sample_first_m"] = nullptr;
  }
  j["greedy_max_tokens"] = c.greedy_max_tokens;
  j["min_tokens"] = c.limits.min_tokens;
  j["max_step_tokens"] = c.limits.max_tokens;
  j["temperature"] = c.limits.temperature;
  j["top_p"] = c.limits.top_p;
  j["language"] = seg::language_name(c.language);
  j["delimiters"] = c.delimiters();
  if (c.prompt_template.has_value()) j["prompt_template"] = *c.prompt_template;
  return j;
}

control::StrategyConfig config_from_json(const json& j) {
  control::StrategyConfig c;
  c.strategy = control::parse_strategy(j.value("strategy", "greedy"));
  c.k = j.value("k", 1);
  c.max_steps = j.value("max_steps", 40);
  if (j.contains("sample_first_m") && !j["sample_first_m"].is_null()) {
    c.sample_first_m = j["sample_first_m"].get<int>();
  }
  c.greedy_max_tokens = j.value("greedy_max_tokens", 1500);
  c.limits.min_tokens = j.value("min_tokens", 5);
  c.limits.max_tokens = j.value("max_step_tokens", 300);
  c.limits.temperature = j.value("temperature", 0.8);
  c.limits.top_p = j.value("top_p", 0.95);
  c.language = seg::parse_language(j.value("language", "english"));
  if (j.contains("delimiters")) {
    c.limits.stop_sequences = j["delimiters"].get<std::vector<std::string>>();
  }
  if (j.contains("prompt_template") && j["prompt_template"].is_string()) {
    c.prompt_template = j["prompt_template"].get<std::string>();
  }
  return c;
}

ordered_json step_to_json(const StepInfo& s) {
  ordered_json j;
  j["text"] = s.text;
  j["terminator"] = {{"kind", terminator_kind_name(s.terminator.kind)}};
  if (s.terminator.kind == lm::Terminator::Kind::delimiter) {
    j["terminator"]["delimiter"] = s.terminator.delimiter;
  }
  j["kept_tokens"] = s.kept_tokens;
  j["certainty"] = s.certainty;
  if (s.has_candidates) {
    j["selected_index"] = s.selected_index;
    j["gain"] = s.gain;
    auto arr = ordered_json::array();
    for (const auto& c : s.candidates) {
      arr.push_back({{"mean_certainty", c.mean_certainty},
                     {"kept_tokens", c.kept_tokens},
                     {"sampled_tokens", c.sampled_tokens}});
    }
    j["candidates"] = arr;
  }
  return j;
}

StepInfo step_from_json(const json& j) {
  StepInfo s;
  s.text = j.value("text", "");
  if (j.contains("terminator")) s.terminator = terminator_from(j["terminator"]);
  s.kept_tokens = j.value("kept_tokens", 0LL);
  s.certainty = j.value("certainty", 0.0);
  if (j.contains("candidates")) {
    s.has_candidates = true;
    s.selected_index = j.value("selected_index", 0);
    s.gain = j.value("gain", 0.0);
    for (const auto& c : j["candidates"]) {
      control::CandidateSummary cs;
      cs.mean_certainty = c.value("mean_certainty", 0.0);
      cs.kept_tokens = c.value("kept_tokens", 0LL);
      cs.sampled_tokens = c.value("sampled_tokens", 0LL);
      s.candidates.push_back(cs);
    }
  }
  return s;
}

ordered_json trajectory_to_json(const TrajectoryInfo& t) {
  ordered_json j;
  j["termination"] = control::termination_name(t.termination);
  j["answer"] = t.answer.has_value() ? answer_to_json(*t.answer) : ordered_json(nullptr);
  j["usage"] = usage_to_json(t.usage);
  if (!t.error.empty()) j["error"] = t.error;
  auto steps = ordered_json::array();
  for (const auto& s : t.steps) steps.push_back(step_to_json(s));
  j["steps"] = steps;
  return j;
}

TrajectoryInfo trajectory_from_json(const json& j) {
  TrajectoryInfo t;
  t.termination = termination_from(j.value("termination", "token_cap"));
  if (j.contains("answer") && !j["answer"].is_null()) t.answer = answer_from_json(j["answer"]);
  if (j.contains("usage")) t.usage = usage_from_json(j["usage"]);
  t.error = j.value("error", "");
  if (j.contains("steps")) {
    for (const auto& s : j["steps"]) t.steps.push_back(step_from_json(s));
  }
  return t;
}

}  // namespace

std::string TrajectoryInfo::generated() const {
  std::string out;
  for (const auto& s : steps) out += s.text;
  return out;
}

TrajectoryInfo summarize_trajectory(const control::Trajectory& trajectory) {
  TrajectoryInfo info;
  info.termination = trajectory.termination;
  info.answer = trajectory.answer;
  info.usage = trajectory.usage;
  info.error = trajectory.error;
  for (std::size_t i = 0; i < trajectory.steps.size(); ++i) {
    const auto& step = trajectory.steps[i];
    StepInfo s;
    s.text = step.thought.text;
    s.terminator = step.thought.terminator;
    s.kept_tokens = static_cast<long long>(step.thought.token_ids.size());
    s.certainty = step.thought.score.mean_certainty;
    if (!step.candidates.empty()) {
      s.has_candidates = true;
      s.selected_index = step.selected_index;
      s.gain = step.gain;
      s.candidates = step.candidates;
    }
    info.steps.push_back(std::move(s));
  }
  return info;
}

std::string record_to_json_line(const RunRecord& r) {
  ordered_json j;
  j["record_version"] = 1;
  j["problem_id"] = r.problem_id;
  j["repeat"] = r.repeat;
  j["config"] = config_to_json(r.config);
  j["run_seed"] = r.run_seed;
  j["unit_seed"] = r.unit_seed;
  j["gold_answer"] = r.gold_answer;
  j["verdict"] = r.verdict;
  j["abstained"] = r.abstained;
  j["answer"] = r.answer.has_value() ? answer_to_json(*r.answer) : ordered_json(nullptr);
  j["winner_votes"] = r.winner_votes;
  j["termination"] = control::termination_name(r.termination);
  j["usage"] = usage_to_json(r.usage);
  j["diagnostics"] = {{"tail_clamps", r.diagnostics.tail_clamps},
                      {"unbalanced_boxed", r.diagnostics.unbalanced_boxed},
                      {"continuation_requests", r.diagnostics.continuation_requests}};
  j["wall_time_ms"] = r.wall_time_ms;
  j["backend"] = {{"id", r.backend_id},
                  {"vocab_size", r.backend_vocab},
                  {"tail_mode", r.backend_tail_mode},
                  {"certainty_units", "nats"}};
  j["dataset_hash"] = r.dataset_hash;
  j["version"] = r.software_version;
  auto trajs = ordered_json::array();
  for (const auto& t : r.trajectories) trajs.push_back(trajectory_to_json(t));
  j["trajectories"] = trajs;
  return j.dump();
}

RunRecord record_from_json_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw Error(Errc::bad_config, std::string("record parse: ") + e.what());
  }
  RunRecord r;
  r.problem_id = j.value("problem_id", "");
  r.repeat = j.value("repeat", 0);
  if (j.contains("config")) r.config = config_from_json(j["config"]);
  r.run_seed = j.value("run_seed", 0ULL);
  r.unit_seed = j.value("unit_seed", 0ULL);
  r.gold_answer = j.value("gold_answer", "");
  r.verdict = j.value("verdict", false);
  r.abstained = j.value("abstained", false);
  if (j.contains("answer") && !j["answer"].is_null()) r.answer = answer_from_json(j["answer"]);
  r.winner_votes = j.value("winner_votes", 0);
  r.termination = termination_from(j.value("termination", "token_cap"));
  if (j.contains("usage")) r.usage = usage_from_json(j["usage"]);
  if (j.contains("diagnostics")) {
    const auto& d = j["diagnostics"];
    r.diagnostics.tail_clamps = d.value("tail_clamps", 0LL);
    r.diagnostics.unbalanced_boxed = d.value("unbalanced_boxed", 0LL);
    r.diagnostics.continuation_requests = d.value("continuation_requests", 0LL);
  }
  r.wall_time_ms = j.value("wall_time_ms", 0.0);
  if (j.contains("backend")) {
    r.backend_id = j["backend"].value("id", "");
    r.backend_vocab = j["backend"].value("vocab_size", 0);
    r.backend_tail_mode = j["backend"].value("tail_mode", "");
  }
  r.dataset_hash = j.value("dataset_hash", "");
  r.software_version = j.value("version", "");
  if (j.contains("trajectories")) {
    for (const auto& t : j["trajectories"]) r.trajectories.push_back(trajectory_from_json(t));
  }
  return r;
}

std::vector<RunRecord> load_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::file_unreadable, path);
  std::vector<RunRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    records.push_back(record_from_json_line(line));
  }
  return records;
}

// ---------------------------------------------------------------------------
// Batch runner
// ---------------------------------------------------------------------------

namespace {

RunRecord run_unit(lm::LmBackend& backend, const Problem& problem,
                   const control::StrategyConfig& config, const BatchOptions& options,
                   int repeat) {
  RunRecord rec;
  rec.problem_id = problem.id;
  rec.repeat = repeat;
  rec.config = config;
  rec.config.language = problem.language;
  rec.run_seed = options.run_seed;
  rec.unit_seed = seeds::problem_seed(options.run_seed, problem.id, repeat);
  rec.gold_answer = problem.gold_answer;
  rec.backend_id = backend.id();
  rec.backend_vocab = backend.vocab_size();
  rec.backend_tail_mode =
      backend.tail_mode() == certainty::TailMode::exact ? "exact" : "uniform_tail";
  rec.dataset_hash = options.dataset_hash;
  rec.software_version = kSoftwareVersion;

  const auto gold =
      seg::normalize_answer(problem.gold_answer, seg::locale_for(problem.language));
  const auto started = std::chrono::steady_clock::now();

  switch (config.strategy) {
    case control::Strategy::greedy: {
      control::Trajectory traj = control::run_greedy(backend, problem.question, rec.config);
      rec.termination = traj.termination;
      rec.usage = traj.usage;
      rec.diagnostics = traj.diagnostics;
      rec.answer = traj.answer;
      rec.trajectories.push_back(summarize_trajectory(traj));
      break;
    }
    case control::Strategy::certainty_max: {
      const std::uint64_t chain_seed = seeds::derive(rec.unit_seed, 0);
      control::Trajectory traj =
          control::run_certainty_max(backend, problem.question, rec.config, chain_seed);
      rec.termination = traj.termination;
      rec.usage = traj.usage;
      rec.diagnostics = traj.diagnostics;
      rec.answer = traj.answer;
      rec.trajectories.push_back(summarize_trajectory(traj));
      break;
    }
    case control::Strategy::self_consistency: {
      control::SelfConsistencyResult res =
          control::run_self_consistency(backend, problem.question, rec.config, rec.unit_seed);
      rec.answer = res.vote.winner;
      rec.winner_votes = res.vote.winner_votes;
      rec.termination = control::Termination::answered;
      for (const auto& traj : res.trajectories) {
        rec.usage += traj.usage;
        rec.diagnostics += traj.diagnostics;
        rec.trajectories.push_back(summarize_trajectory(traj));
        if (traj.termination == control::Termination::backend_error) {
          rec.termination = control::Termination::backend_error;
        }
      }
      if (res.vote.all_abstained && rec.termination != control::Termination::backend_error) {
        rec.termination = control::Termination::token_cap;
      }
      break;
    }
  }

  rec.abstained = !rec.answer.has_value();
  rec.verdict = rec.answer.has_value() && seg::answers_equal(*rec.answer, gold);
  rec.wall_time_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - started)
                         .count();
  return rec;
}

void check_resume_compatibility(const RunRecord& existing,
                                const control::StrategyConfig& config,
                                const BatchOptions& options) {
  const bool same = existing.config.strategy == config.strategy &&
                    existing.config.k == config.k &&
                    existing.config.max_steps == config.max_steps &&
                    existing.config.sample_first_m == config.sample_first_m &&
                    existing.run_seed == options.run_seed;
  if (!same) {
    throw Error(Errc::bad_config,
                "records file was produced by a different configuration; "
                "use a fresh --out-dir");
  }
}

}  // namespace

BatchResult run_batch(lm::LmBackend& backend, std::span<const Problem> problems,
                      const control::StrategyConfig& config, const BatchOptions& options) {
  config.validate();
  if (options.repeats < 1) throw Error(Errc::bad_config, "repeats must be >= 1");
  if (problems.empty()) throw Error(Errc::empty_dataset, "no problems to run");

  std::set<std::pair<std::string, int>> done;
  std::ofstream sink;
  BatchResult result;

  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    const std::string records_path =
        (std::filesystem::path(options.out_dir) / kRecordsFileName).string();
    if (std::filesystem::exists(records_path)) {
      const auto existing = load_records(records_path);
      if (!existing.empty()) check_resume_compatibility(existing.front(), config, options);
      for (const auto& r : existing) done.emplace(r.problem_id, r.repeat);
    }
    sink.open(records_path, std::ios::binary | std::ios::app);
    if (!sink) throw Error(Errc::file_unreadable, records_path);
  }

  struct Unit {
    const Problem* problem;
    int repeat;
  };
  std::vector<Unit> units;
  for (const auto& p : problems) {
    for (int r = 0; r < options.repeats; ++r) {
      if (done.count({p.id, r}) != 0) {
        result.skipped += 1;
        continue;
      }
      units.push_back({&p, r});
    }
  }
  if (options.limit > 0 && static_cast<long long>(units.size()) > options.limit) {
    units.resize(static_cast<std::size_t>(options.limit));
  }

  if (options.workers > 0) omp_set_num_threads(options.workers);

  std::mutex sink_mutex;
  std::vector<RunRecord> produced(units.size());
  std::vector<char> ok(units.size(), 0);
  const auto n = static_cast<std::int64_t>(units.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < n; ++i) {
    const Unit& u = units[static_cast<std::size_t>(i)];
    try {
      RunRecord rec = run_unit(backend, *u.problem, config, options, u.repeat);
      {
        std::lock_guard<std::mutex> lock(sink_mutex);
        if (sink.is_open()) {
          sink << record_to_json_line(rec) << "\n";
          sink.flush();
        }
      }
      produced[static_cast<std::size_t>(i)] = std::move(rec);
      ok[static_cast<std::size_t>(i)] = 1;
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(sink_mutex);
      std::fprintf(stderr, "run failed: %s repeat %d: %s\n", u.problem->id.c_str(), u.repeat,
                   e.what());
    }
  }

  for (std::size_t i = 0; i < produced.size(); ++i) {
    if (ok[i] != 0) {
      result.records.push_back(std::move(produced[i]));
    } else {
      result.failed += 1;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

std::vector<AccuracyRow> accuracy_report(std::span<const RunRecord> records) {
  if (records.empty()) throw Error(Errc::empty_input, "no records");

  struct Agg {
    long long n = 0, correct = 0, abstained = 0;
  };
  std::map<std::string, Agg> overall;
  std::map<std::string, std::map<int, Agg>> per_repeat;
  for (const auto& r : records) {
    const std::string strategy = control::strategy_name(r.config.strategy);
    auto bump = [&](Agg& a) {
      a.n += 1;
      a.correct += r.verdict ? 1 : 0;
      a.abstained += r.abstained ? 1 : 0;
    };
    bump(overall[strategy]);
    bump(per_repeat[strategy][r.repeat]);
  }

  std::vector<AccuracyRow> rows;
  for (const auto& [strategy, agg] : overall) {
    rows.push_back({strategy, "overall", agg.n, agg.correct, agg.abstained,
                    static_cast<double>(agg.correct) / static_cast<double>(agg.n)});
    const auto& repeats = per_repeat[strategy];
    if (repeats.size() > 1) {
      double lo = 1.0, hi = 0.0;
      for (const auto& [repeat, a] : repeats) {
        const double acc = static_cast<double>(a.correct) / static_cast<double>(a.n);
        rows.push_back({strategy, "repeat:" + std::to_string(repeat), a.n, a.correct,
                        a.abstained, acc});
        lo = std::min(lo, acc);
        hi = std::max(hi, acc);
      }
      rows.push_back({strategy, "min", 0, 0, 0, lo});
      rows.push_back({strategy, "max", 0, 0, 0, hi});
    }
  }
  return rows;
}

std::vector<DynamicsRow> dynamics_report(std::span<const RunRecord> records) {
  if (records.empty()) throw Error(Errc::empty_input, "no records");

  struct Agg {
    long long count = 0;
    double certainty_sum = 0.0;
    long long gain_count = 0;
    double gain_sum = 0.0;
  };
  std::map<std::pair<int, bool>, Agg> table;  // (step, correct)

  for (const auto& r : records) {
    const auto locale = seg::locale_for(r.config.language);
    const auto gold = seg::normalize_answer(r.gold_answer, locale);
    for (const auto& traj : r.trajectories) {
      const bool correct = traj.answer.has_value() && seg::answers_equal(*traj.answer, gold);
      for (std::size_t s = 0; s < traj.steps.size(); ++s) {
        Agg& a = table[{static_cast<int>(s) + 1, correct}];
        a.count += 1;
        a.certainty_sum += traj.steps[s].certainty;
        if (traj.steps[s].has_candidates) {
          a.gain_count += 1;
          a.gain_sum += traj.steps[s].gain;
        }
      }
    }
  }

  std::vector<DynamicsRow> rows;
  for (const auto& [key, a] : table) {
    DynamicsRow row;
    row.step = key.first;
    row.correct_group = key.second;
    row.count = a.count;
    row.mean_certainty = a.certainty_sum / static_cast<double>(a.count);
    if (a.gain_count > 0) {
      row.has_gain = true;
      row.mean_gain = a.gain_sum / static_cast<double>(a.gain_count);
    }
    rows.push_back(row);
  }
  std::sort(rows.begin(), rows.end(), [](const DynamicsRow& a, const DynamicsRow& b) {
    if (a.step != b.step) return a.step < b.step;
    return a.correct_group > b.correct_group;  // correct rows first
  });
  return rows;
}

std::vector<BudgetRow> budget_report(std::span<const RunRecord> records) {
  if (records.empty()) throw Error(Errc::empty_input, "no records");

  struct Agg {
    long long runs = 0;
    std::set<std::string> problems;
    lm::TokenUsage totals;
  };
  std::map<std::string, Agg> by_strategy;
  for (const auto& r : records) {
    Agg& a = by_strategy[control::strategy_name(r.config.strategy)];
    a.runs += 1;
    a.problems.insert(r.problem_id);
    a.totals += r.usage;
  }

  std::vector<BudgetRow> rows;
  for (const auto& [strategy, a] : by_strategy) {
    BudgetRow row;
    row.strategy = strategy;
    row.runs = a.runs;
    row.problems = static_cast<long long>(a.problems.size());
    row.totals = a.totals;
    row.mean_completion_per_run =
        static_cast<double>(a.totals.completion_tokens) / static_cast<double>(a.runs);
    row.mean_completion_per_problem =
        static_cast<double>(a.totals.completion_tokens) / static_cast<double>(row.problems);
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace {

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

void write_accuracy_csv(std::span<const AccuracyRow> rows, std::ostream& out) {
  out << "strategy,scope,records,correct,abstained,accuracy\n";
  for (const auto& r : rows) {
    out << csv_escape(r.strategy) << ',' << csv_escape(r.scope) << ',' << r.records << ','
        << r.correct << ',' << r.abstained << ',' << fmt_double(r.accuracy) << '\n';
  }
}

void write_dynamics_csv(std::span<const DynamicsRow> rows, std::ostream& out) {
  out << "step,group,count,mean_certainty,mean_gain\n";
  for (const auto& r : rows) {
    out << r.step << ',' << (r.correct_group ? "correct" : "incorrect") << ',' << r.count << ','
        << fmt_double(r.mean_certainty) << ',';
    if (r.has_gain) out << fmt_double(r.mean_gain);
    out << '\n';
  }
}

void write_budget_csv(std::span<const BudgetRow> rows, std::ostream& out) {
  out << "strategy,runs,problems,prompt_tokens,completion_tokens,kept_completion_tokens,"
         "requests,mean_completion_per_run,mean_completion_per_problem\n";
  for (const auto& r : rows) {
    out << csv_escape(r.strategy) << ',' << r.runs << ',' << r.problems << ','
        << r.totals.prompt_tokens << ',' << r.totals.completion_tokens << ','
        << r.totals.kept_completion_tokens << ',' << r.totals.requests << ','
        << fmt_double(r.mean_completion_per_run) << ','
        << fmt_double(r.mean_completion_per_problem) << '\n';
  }
}

}  // namespace selfcert::eval
