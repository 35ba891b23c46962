// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "selfcert/harness.hpp"
#include "selfcert/synthetic_lm.hpp"

using namespace selfcert;
using namespace selfcert::eval;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("selfcert_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

std::string write_file(const fs::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary);
  out << content;
  return p.string();
}

std::vector<Problem> toy_problems(int n, const std::string& answer = "4") {
  std::vector<Problem> ps;
  for (int i = 0; i < n; ++i) {
    Problem p;
    p.id = "p" + std::to_string(i);
    p.question = "What is 2+2?";
    p.gold_answer = answer;
    ps.push_back(p);
  }
  return ps;
}

control::StrategyConfig config_for(control::Strategy strategy, int k) {
  control::StrategyConfig cfg;
  cfg.strategy = strategy;
  cfg.k = k;
  cfg.limits.temperature = 1.0;
  cfg.limits.top_p = 1.0;
  return cfg;
}

/// Records serialized canonically for comparisons: wall time stripped,
/// sorted by (problem, repeat).
std::vector<std::string> canonical_lines(std::vector<RunRecord> records) {
  std::sort(records.begin(), records.end(), [](const RunRecord& a, const RunRecord& b) {
    if (a.problem_id != b.problem_id) return a.problem_id < b.problem_id;
    return a.repeat < b.repeat;
  });
  std::vector<std::string> out;
  for (const auto& r : records) {
    json j = json::parse(record_to_json_line(r));
    j.erase("wall_time_ms");
    out.push_back(j.dump());
  }
  return out;
}

}  // namespace

TEST_CASE("dataset loading parses records and collects rejects") {
  TempDir dir("dataset");
  const std::string path = write_file(
      dir.path / "data.jsonl",
      R"({"id": "a", "question": "What is 1+1?", "answer": "2"})"
      "\n"
      R"({"id": "b", "question": "What is 2*3?", "answer": "6", "language": "danish"})"
      "\n"
      "this is not json\n"
      R"({"id": "c", "question": "missing answer"})"
      "\n"
      R"({"id": "a", "question": "duplicate id", "answer": "0"})"
      "\n");

  const Dataset ds = load_dataset(path, Source::gsm8k);
  CHECK(ds.problems.size() == 2);
  CHECK(ds.rejects.size() == 3);
  CHECK(ds.problems[0].language == seg::Language::english);
  CHECK(ds.problems[1].language == seg::Language::danish);
  CHECK_FALSE(ds.content_hash.empty());

  const Dataset forced = load_dataset(path, Source::gsm8k, seg::Language::danish);
  CHECK(forced.problems[0].language == seg::Language::danish);

  const Dataset danish = load_dataset(
      write_file(dir.path / "da.jsonl", R"({"id": "x", "question": "Hvad?", "answer": "3,5"})"),
      Source::gsm8k_danish);
  CHECK(danish.problems[0].language == seg::Language::danish);

  CHECK_THROWS_AS(load_dataset((dir.path / "missing.jsonl").string(), Source::custom), Error);
  const std::string empty = write_file(dir.path / "empty.jsonl", "not json\n");
  try {
    load_dataset(empty, Source::custom);
    FAIL("expected EmptyDataset");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::empty_dataset);
  }
}

TEST_CASE("records survive a JSON round trip") {
  lm::SyntheticLm backend(lm::make_planted_spec({}));
  BatchOptions opts;
  opts.repeats = 2;
  opts.run_seed = 99;
  const auto problems = toy_problems(2);
  const BatchResult res =
      run_batch(backend, problems, config_for(control::Strategy::certainty_max, 4), opts);
  REQUIRE(res.records.size() == 4);

  for (const auto& rec : res.records) {
    const std::string line = record_to_json_line(rec);
    const RunRecord back = record_from_json_line(line);
    CHECK(back.problem_id == rec.problem_id);
    CHECK(back.repeat == rec.repeat);
    CHECK(back.verdict == rec.verdict);
    CHECK(back.unit_seed == rec.unit_seed);
    CHECK(back.usage.completion_tokens == rec.usage.completion_tokens);
    CHECK(back.config.k == rec.config.k);
    CHECK(back.config.strategy == rec.config.strategy);
    REQUIRE(back.trajectories.size() == rec.trajectories.size());
    CHECK(back.trajectories[0].generated() == rec.trajectories[0].generated());
    CHECK(record_to_json_line(back) == line);
  }
}

TEST_CASE("verdicts are recomputable from persisted text and gold answers") {
  lm::SyntheticLm backend(lm::make_planted_spec({}));
  BatchOptions opts;
  opts.repeats = 3;
  opts.run_seed = 123;
  const auto problems = toy_problems(5);
  const BatchResult res =
      run_batch(backend, problems, config_for(control::Strategy::certainty_max, 2), opts);
  REQUIRE(res.records.size() == 15);

  int correct = 0;
  for (const auto& rec : res.records) {
    const auto locale = seg::locale_for(rec.config.language);
    const auto extracted = seg::extract_boxed_answer(rec.trajectories[0].generated());
    const bool re_verdict =
        extracted.has_value() &&
        seg::answers_equal(seg::normalize_answer(*extracted, locale),
                           seg::normalize_answer(rec.gold_answer, locale));
    CHECK(re_verdict == rec.verdict);
    correct += rec.verdict ? 1 : 0;
  }
  CHECK(correct > 0);
  CHECK(correct < 15);
}

TEST_CASE("batch runs persist incrementally and resume without rework") {
  lm::SyntheticLm backend(lm::make_planted_spec({}));
  const auto problems = toy_problems(10);
  const auto cfg = config_for(control::Strategy::certainty_max, 2);

  TempDir full_dir("full");
  BatchOptions full_opts;
  full_opts.repeats = 2;
  full_opts.run_seed = 7;
  full_opts.out_dir = full_dir.str();
  const BatchResult full = run_batch(backend, problems, cfg, full_opts);
  REQUIRE(full.records.size() == 20);
  CHECK(full.skipped == 0);

  TempDir part_dir("partial");
  BatchOptions part_opts = full_opts;
  part_opts.out_dir = part_dir.str();
  part_opts.limit = 10;  // simulate dying halfway
  const BatchResult half = run_batch(backend, problems, cfg, part_opts);
  CHECK(half.records.size() == 10);

  part_opts.limit = 0;
  const BatchResult rest = run_batch(backend, problems, cfg, part_opts);
  CHECK(rest.skipped == 10);
  CHECK(rest.records.size() == 10);

  const auto resumed = load_records((part_dir.path / kRecordsFileName).string());
  const auto uninterrupted = load_records((full_dir.path / kRecordsFileName).string());
  CHECK(canonical_lines(resumed) == canonical_lines(uninterrupted));
}

TEST_CASE("resume refuses a different configuration") {
  lm::SyntheticLm backend(lm::make_planted_spec({}));
  const auto problems = toy_problems(2);
  TempDir dir("mismatch");
  BatchOptions opts;
  opts.run_seed = 1;
  opts.out_dir = dir.str();
  run_batch(backend, problems, config_for(control::Strategy::certainty_max, 2), opts);
  CHECK_THROWS_AS(run_batch(backend, problems, config_for(control::Strategy::certainty_max, 4), opts),
                  Error);
  opts.run_seed = 2;
  CHECK_THROWS_AS(run_batch(backend, problems, config_for(control::Strategy::certainty_max, 2), opts),
                  Error);
}

TEST_CASE("self-consistency records carry all chains and the vote") {
  lm::SyntheticLm backend(lm::make_planted_spec({}));
  BatchOptions opts;
  opts.run_seed = 5;
  const BatchResult res =
      run_batch(backend, toy_problems(4), config_for(control::Strategy::self_consistency, 3), opts);
  REQUIRE(res.records.size() == 4);
  for (const auto& rec : res.records) {
    CHECK(rec.trajectories.size() == 3);
    REQUIRE(rec.answer.has_value());
    CHECK(rec.winner_votes >= 1);
    // vote winner matches a brute-force recount of the persisted ballots
    std::map<std::string, int> counts;
    for (const auto& t : rec.trajectories) {
      if (t.answer.has_value()) counts[t.answer->canonical] += 1;
    }
    int best = 0;
    for (const auto& [key, c] : counts) best = std::max(best, c);
    CHECK(counts[rec.answer->canonical] == best);
    lm::TokenUsage summed;
    for (const auto& t : rec.trajectories) summed += t.usage;
    CHECK(rec.usage.completion_tokens == summed.completion_tokens);
  }
}

TEST_CASE("accuracy report yields per-strategy ratios and dispersion") {
  lm::SyntheticLm backend(lm::make_planted_spec({}));
  BatchOptions opts;
  opts.repeats = 4;
  opts.run_seed = 11;
  const auto problems = toy_problems(6);

  auto greedy_records =
      run_batch(backend, problems, config_for(control::Strategy::greedy, 1), opts).records;
  auto cmax_records =
      run_batch(backend, problems, config_for(control::Strategy::certainty_max, 8), opts).records;

  std::vector<RunRecord> all = greedy_records;
  all.insert(all.end(), cmax_records.begin(), cmax_records.end());
  const auto rows = accuracy_report(all);

  double greedy_acc = -1.0;
  double cmax_acc = -1.0;
  int repeat_rows = 0;
  for (const auto& r : rows) {
    if (r.strategy == "greedy" && r.scope == "overall") greedy_acc = r.accuracy;
    if (r.strategy == "certainty_max" && r.scope == "overall") cmax_acc = r.accuracy;
    if (r.scope.starts_with("repeat:")) ++repeat_rows;
  }
  CHECK(greedy_acc == 0.0);  // argmax follows the wrong branch
  CHECK(cmax_acc > 0.7);
  CHECK(repeat_rows == 8);  // 4 repeats for each of the two strategies

  CHECK_THROWS_AS(accuracy_report(std::vector<RunRecord>{}), Error);
}

TEST_CASE("abstentions count as incorrect and are tallied") {
  lm::SyntheticLm backend(lm::make_planted_spec({}));
  BatchOptions opts;
  opts.run_seed = 3;
  auto cfg = config_for(control::Strategy::certainty_max, 2);
  cfg.max_steps = 2;  // answers land on step 3, so every run abstains
  const auto records = run_batch(backend, toy_problems(3), cfg, opts).records;
  const auto rows = accuracy_report(records);
  REQUIRE_FALSE(rows.empty());
  CHECK(rows[0].accuracy == 0.0);
  CHECK(rows[0].abstained == 3);
}

TEST_CASE("dynamics report groups by correctness with declining counts") {
  lm::SyntheticLm backend(lm::make_planted_spec({}));
  BatchOptions opts;
  opts.repeats = 2;
  opts.run_seed = 17;
  const auto records =
      run_batch(backend, toy_problems(40), config_for(control::Strategy::certainty_max, 2), opts)
          .records;
  const auto rows = dynamics_report(records);
  REQUIRE_FALSE(rows.empty());

  long long correct_at_1 = 0;
  long long incorrect_at_1 = 0;
  std::map<int, std::map<bool, double>> mean_by_step;
  std::map<int, long long> count_by_step;
  for (const auto& r : rows) {
    if (r.step == 1 && r.correct_group) correct_at_1 = r.count;
    if (r.step == 1 && !r.correct_group) incorrect_at_1 = r.count;
    mean_by_step[r.step][r.correct_group] = r.mean_certainty;
    count_by_step[r.step] += r.count;
    CHECK(r.has_gain);
    CHECK(r.mean_gain >= 0.0);
  }
  CHECK(correct_at_1 + incorrect_at_1 == 80);  // every trajectory contributes to step 1
  // counts never grow with depth
  for (auto it = std::next(count_by_step.begin()); it != count_by_step.end(); ++it) {
    CHECK(it->second <= std::prev(it)->second);
  }
  // the sharp branch keeps its lead at every populated step
  for (const auto& [step, groups] : mean_by_step) {
    if (groups.count(true) != 0 && groups.count(false) != 0) {
      CHECK(groups.at(true) > groups.at(false));
    }
  }
}

TEST_CASE("accuracy is permutation-invariant over records") {
  lm::SyntheticLm backend(lm::make_planted_spec({}));
  BatchOptions opts;
  opts.repeats = 2;
  opts.run_seed = 77;
  auto records =
      run_batch(backend, toy_problems(6), config_for(control::Strategy::certainty_max, 2), opts)
          .records;
  const auto before = accuracy_report(records);
  std::mt19937_64 rng(1);
  std::shuffle(records.begin(), records.end(), rng);
  const auto after = accuracy_report(records);
  REQUIRE(before.size() == after.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(before[i].scope == after[i].scope);
    CHECK(before[i].accuracy == after[i].accuracy);
    CHECK(before[i].records == after[i].records);
  }
}

TEST_CASE("greedy records feed dynamics without gain columns") {
  lm::SyntheticLm backend(lm::make_script_spec());
  BatchOptions opts;
  opts.run_seed = 55;
  const auto records =
      run_batch(backend, toy_problems(3), config_for(control::Strategy::greedy, 1), opts).records;
  const auto rows = dynamics_report(records);
  REQUIRE_FALSE(rows.empty());
  for (const auto& r : rows) {
    CHECK_FALSE(r.has_gain);
    CHECK(r.count == 3);
  }
}

TEST_CASE("batch preconditions") {
  lm::SyntheticLm backend(lm::make_script_spec());
  BatchOptions opts;
  opts.repeats = 0;
  CHECK_THROWS_AS(
      run_batch(backend, toy_problems(1), config_for(control::Strategy::greedy, 1), opts), Error);
  opts.repeats = 1;
  CHECK_THROWS_AS(
      run_batch(backend, std::vector<Problem>{}, config_for(control::Strategy::greedy, 1), opts),
      Error);
}

TEST_CASE("budget report aggregates per strategy") {
  lm::SyntheticLm backend(lm::make_planted_spec({}));
  BatchOptions opts;
  opts.run_seed = 29;
  const auto records =
      run_batch(backend, toy_problems(5), config_for(control::Strategy::certainty_max, 4), opts)
          .records;
  const auto rows = budget_report(records);
  REQUIRE(rows.size() == 1);
  long long completion = 0;
  for (const auto& r : records) completion += r.usage.completion_tokens;
  CHECK(rows[0].totals.completion_tokens == completion);
  CHECK(rows[0].runs == 5);
  CHECK(rows[0].problems == 5);
  CHECK(rows[0].totals.kept_completion_tokens < rows[0].totals.completion_tokens);

  CHECK_THROWS_AS(budget_report(std::vector<RunRecord>{}), Error);
}

TEST_CASE("csv writers emit header plus one line per row") {
  AccuracyRow row{"greedy", "overall", 10, 5, 1, 0.5};
  std::ostringstream acc;
  write_accuracy_csv(std::vector<AccuracyRow>{row}, acc);
  CHECK(acc.str() == "strategy,scope,records,correct,abstained,accuracy\n"
                     "greedy,overall,10,5,1,0.5\n");

  DynamicsRow d{1, true, 12, 3.25, true, 0.5};
  DynamicsRow d2{2, false, 7, 1.5, false, 0.0};
  std::ostringstream dyn;
  write_dynamics_csv(std::vector<DynamicsRow>{d, d2}, dyn);
  CHECK(dyn.str() == "step,group,count,mean_certainty,mean_gain\n"
                     "1,correct,12,3.25,0.5\n"
                     "2,incorrect,7,1.5,\n");
}
