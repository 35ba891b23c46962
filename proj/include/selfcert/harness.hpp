#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file harness.hpp
 * @brief Dataset ingestion, batch orchestration, scoring, analytics and
 *        persistence.
 *
 * Datasets are one JSON record per line with fields "id", "question",
 * "answer" and optional "language"; malformed lines are collected into a
 * rejects report, never silently dropped.
 *
 * Batches fan (problem x repeat) units over an OpenMP worker pool. Every
 * unit's seed derives from the run seed (seeds.hpp), so results do not
 * depend on scheduling. Records append to <out_dir>/records.jsonl one JSON
 * line at a time, which keeps partial batches parseable and makes runs
 * crash-resumable: completed (problem, repeat) pairs are skipped on restart.
 *
 * Reports are offline single-pass computations over persisted records and
 * emit CSV with a header row.
 */

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "selfcert/controller.hpp"

namespace selfcert::eval {

inline constexpr const char* kSoftwareVersion = "0.1.0";
inline constexpr const char* kRecordsFileName = "records.jsonl";

enum class Source { math500, gsm8k, gsm8k_danish, custom };

const char* source_name(Source s);
Source parse_source(std::string_view name);

struct Problem {
  std::string id;
  std::string question;
  std::string gold_answer;
  seg::Language language = seg::Language::english;
  Source source = Source::custom;
};

struct DatasetReject {
  int line_no = 0;  // 1-based
  std::string reason;
};

struct Dataset {
  std::vector<Problem> problems;
  std::vector<DatasetReject> rejects;
  std::string content_hash;  // FNV-1a over the file bytes, hex
  std::string path;
};

/// Throws FileUnreadable when the file cannot be opened and EmptyDataset when
/// no line yields a valid problem. `language_override` wins over per-record
/// and source-implied languages.
Dataset load_dataset(const std::string& path, Source source,
                     std::optional<seg::Language> language_override = std::nullopt);

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

/// Persisted view of one step: enough to re-score the verdict (text), rebuild
/// dynamics (certainty/gain) and re-check selection dominance (candidates).
struct StepInfo {
  std::string text;
  lm::Terminator terminator;
  long long kept_tokens = 0;
  double certainty = 0.0;
  bool has_candidates = false;
  int selected_index = 0;
  double gain = 0.0;
  std::vector<control::CandidateSummary> candidates;
};

struct TrajectoryInfo {
  control::Termination termination = control::Termination::token_cap;
  std::optional<seg::AnswerForm> answer;
  lm::TokenUsage usage;
  std::vector<StepInfo> steps;
  std::string error;

  std::string generated() const;  // concatenated step texts
};

TrajectoryInfo summarize_trajectory(const control::Trajectory& trajectory);

/// One problem x one strategy execution.
struct RunRecord {
  std::string problem_id;
  int repeat = 0;
  control::StrategyConfig config;
  std::uint64_t run_seed = 0;
  std::uint64_t unit_seed = 0;
  std::string gold_answer;
  bool verdict = false;
  bool abstained = false;
  std::optional<seg::AnswerForm> answer;  // vote winner for self-consistency
  int winner_votes = 0;
  control::Termination termination = control::Termination::token_cap;
  lm::TokenUsage usage;
  control::Diagnostics diagnostics;
  double wall_time_ms = 0.0;
  std::string backend_id;
  int backend_vocab = 0;
  std::string backend_tail_mode;  // "exact" | "uniform_tail"; certainty is in nats
  std::string dataset_hash;
  std::string software_version;
  std::vector<TrajectoryInfo> trajectories;
};

std::string record_to_json_line(const RunRecord& record);
RunRecord record_from_json_line(const std::string& line);

/// Loads a records file (one JSON object per line). Missing file throws
/// FileUnreadable; malformed lines throw BadConfig.
std::vector<RunRecord> load_records(const std::string& path);

// ---------------------------------------------------------------------------
// Batch runner
// ---------------------------------------------------------------------------

struct BatchOptions {
  int repeats = 1;
  std::uint64_t run_seed = 0;
  std::string out_dir;  // empty disables persistence (and resume)
  int workers = 0;      // 0: OpenMP default
  long long limit = 0;  // stop after this many new records (0 = no limit)
  std::string dataset_hash;
};

struct BatchResult {
  std::vector<RunRecord> records;  // produced by this invocation
  long long skipped = 0;           // completed units found in the records file
  long long failed = 0;            // units that raised unexpectedly
};

/// Runs repeats x problems units, skipping (problem, repeat) pairs already
/// present in <out_dir>/records.jsonl. Throws BadConfig when the existing
/// records disagree with the requested configuration. Per-unit failures are
/// recorded and the batch continues.
BatchResult run_batch(lm::LmBackend& backend, std::span<const Problem> problems,
                      const control::StrategyConfig& config, const BatchOptions& options);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct AccuracyRow {
  std::string strategy;
  std::string scope;  // "overall", "repeat:N", "min", "max"
  long long records = 0;
  long long correct = 0;
  long long abstained = 0;
  double accuracy = 0.0;
};

/// Per-strategy accuracy with per-repeat dispersion. Throws EmptyInput.
std::vector<AccuracyRow> accuracy_report(std::span<const RunRecord> records);

struct DynamicsRow {
  int step = 0;  // 1-based
  bool correct_group = false;
  long long count = 0;  // trajectories alive at this step
  double mean_certainty = 0.0;
  bool has_gain = false;
  double mean_gain = 0.0;
};

/// Per-step means grouped by per-trajectory correctness. Throws EmptyInput.
std::vector<DynamicsRow> dynamics_report(std::span<const RunRecord> records);

struct BudgetRow {
  std::string strategy;
  long long runs = 0;
  long long problems = 0;
  lm::TokenUsage totals;
  double mean_completion_per_run = 0.0;
  double mean_completion_per_problem = 0.0;
};

/// Per-strategy token totals and means. Throws EmptyInput.
std::vector<BudgetRow> budget_report(std::span<const RunRecord> records);

void write_accuracy_csv(std::span<const AccuracyRow> rows, std::ostream& out);
void write_dynamics_csv(std::span<const DynamicsRow> rows, std::ostream& out);
void write_budget_csv(std::span<const BudgetRow> rows, std::ostream& out);

/// FNV-1a (hex) over a file's bytes; FileUnreadable when it cannot be read.
std::string file_hash(const std::string& path);

}  // namespace selfcert::eval
