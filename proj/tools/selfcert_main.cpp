// SPDX-License-Identifier: Apache-2.0

// selfcert: step-level decoding controller and evaluation harness.
//
//   selfcert run               execute a strategy over a dataset
//   selfcert report accuracy   per-strategy accuracy with repeat dispersion
//   selfcert report dynamics   per-step certainty/gain by final correctness
//   selfcert report budget     token totals per strategy
//   selfcert validate-dataset  parse a dataset and report rejects
//
// Exit codes: 0 success, 1 partial failures present, 2 configuration error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "selfcert/harness.hpp"
#include "selfcert/http_backend.hpp"
#include "selfcert/synthetic_lm.hpp"

using namespace selfcert;
namespace fs = std::filesystem;

namespace {

struct RunFlags {
  std::string dataset;
  std::string source = "custom";
  std::string language;
  std::string strategy = "certainty_max";
  int k = 8;
  int max_steps = 40;
  int sample_first_m = -1;  // <0: unbounded
  int repeats = 1;
  std::uint64_t seed = 0;
  std::string out_dir;
  // backend
  std::string backend_url;
  std::string model;
  int vocab_size = 0;
  std::string synthetic_fixture;
  std::string request_mode = "fanout";
  int top_logprobs = 20;
  int stops_cap = 4;
  int parallelism = 4;
  double timeout_s = 120.0;
  // sampling
  double temperature = 0.8;
  double top_p = 0.95;
  int min_tokens = 5;
  int max_step_tokens = 300;
  int greedy_max_tokens = 1500;
  // orchestration
  int workers = 0;
  long long limit = 0;
  std::string prompt_template_file;
  std::vector<std::string> delimiters;
};

std::unique_ptr<lm::LmBackend> make_backend(const RunFlags& flags) {
  if (!flags.synthetic_fixture.empty() && !flags.backend_url.empty()) {
    throw Error(Errc::bad_config, "choose either --synthetic-fixture or --backend-url");
  }
  if (!flags.synthetic_fixture.empty()) {
    return std::make_unique<lm::SyntheticLm>(lm::load_synthetic_spec(flags.synthetic_fixture));
  }
  if (!flags.backend_url.empty()) {
    lm::HttpBackendConfig cfg;
    cfg.base_url = flags.backend_url;
    cfg.model = flags.model;
    cfg.vocab_size = flags.vocab_size;
    cfg.top_logprobs = flags.top_logprobs;
    cfg.max_server_stops = flags.stops_cap;
    cfg.parallelism = flags.parallelism;
    cfg.timeout_s = flags.timeout_s;
    cfg.batched_n = flags.request_mode == "batched";
    return std::make_unique<lm::HttpBackend>(cfg);
  }
  throw Error(Errc::bad_config, "a backend is required: --synthetic-fixture or --backend-url");
}

control::StrategyConfig make_config(const RunFlags& flags) {
  control::StrategyConfig cfg;
  cfg.strategy = control::parse_strategy(flags.strategy);
  cfg.k = flags.k;
  cfg.max_steps = flags.max_steps;
  if (flags.sample_first_m >= 0) cfg.sample_first_m = flags.sample_first_m;
  cfg.greedy_max_tokens = flags.greedy_max_tokens;
  cfg.limits.min_tokens = flags.min_tokens;
  cfg.limits.max_tokens = flags.max_step_tokens;
  cfg.limits.temperature = flags.temperature;
  cfg.limits.top_p = flags.top_p;
  cfg.limits.stop_sequences = flags.delimiters;  // empty: built-in default list
  if (!flags.prompt_template_file.empty()) {
    std::ifstream in(flags.prompt_template_file, std::ios::binary);
    if (!in) throw Error(Errc::file_unreadable, flags.prompt_template_file);
    std::ostringstream ss;
    ss << in.rdbuf();
    cfg.prompt_template = ss.str();
  }
  cfg.validate();
  return cfg;
}

void write_rejects(const eval::Dataset& ds, const std::string& out_dir) {
  if (ds.rejects.empty()) return;
  std::fprintf(stderr, "%zu dataset line(s) rejected:\n", ds.rejects.size());
  for (const auto& r : ds.rejects) {
    std::fprintf(stderr, "  line %d: %s\n", r.line_no, r.reason.c_str());
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream out(fs::path(out_dir) / "rejects.txt", std::ios::binary);
    for (const auto& r : ds.rejects) {
      out << "line " << r.line_no << ": " << r.reason << "\n";
    }
  }
}

int cmd_run(const RunFlags& flags) {
  std::optional<seg::Language> language;
  if (!flags.language.empty()) language = seg::parse_language(flags.language);

  const eval::Dataset ds =
      eval::load_dataset(flags.dataset, eval::parse_source(flags.source), language);
  write_rejects(ds, flags.out_dir);

  const control::StrategyConfig cfg = make_config(flags);
  auto backend = make_backend(flags);

  eval::BatchOptions opts;
  opts.repeats = flags.repeats;
  opts.run_seed = flags.seed;
  opts.out_dir = flags.out_dir;
  opts.workers = flags.workers;
  opts.limit = flags.limit;
  opts.dataset_hash = ds.content_hash;

  const eval::BatchResult res = eval::run_batch(*backend, ds.problems, cfg, opts);

  long long correct = 0;
  for (const auto& r : res.records) correct += r.verdict ? 1 : 0;
  std::printf("dataset: %zu problems (hash %s), %zu rejects\n", ds.problems.size(),
              ds.content_hash.c_str(), ds.rejects.size());
  std::printf("strategy %s k=%d: %zu new records, %lld skipped (resume), %lld failed\n",
              control::strategy_name(cfg.strategy), cfg.k, res.records.size(), res.skipped,
              res.failed);
  if (!res.records.empty()) {
    std::printf("accuracy over new records: %.4f (%lld/%zu)\n",
                static_cast<double>(correct) / static_cast<double>(res.records.size()), correct,
                res.records.size());
  }
  if (!flags.out_dir.empty()) {
    std::printf("records: %s\n",
                (fs::path(flags.out_dir) / eval::kRecordsFileName).string().c_str());
  }
  return (res.failed > 0 || !ds.rejects.empty()) ? 1 : 0;
}

int cmd_report(const std::string& kind, const std::string& runs_path, const std::string& out_path) {
  const auto records = eval::load_records(runs_path);

  std::ostringstream buffer;
  if (kind == "accuracy") {
    const auto rows = eval::accuracy_report(records);
    eval::write_accuracy_csv(rows, buffer);
  } else if (kind == "dynamics") {
    const auto rows = eval::dynamics_report(records);
    eval::write_dynamics_csv(rows, buffer);
  } else {
    const auto rows = eval::budget_report(records);
    eval::write_budget_csv(rows, buffer);
  }

  if (out_path.empty() || out_path == "-") {
    std::cout << buffer.str();
  } else {
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw Error(Errc::file_unreadable, out_path);
    out << buffer.str();
  }
  return 0;
}

int cmd_validate(const std::string& dataset, const std::string& source,
                 const std::string& language) {
  std::optional<seg::Language> lang;
  if (!language.empty()) lang = seg::parse_language(language);
  const eval::Dataset ds = eval::load_dataset(dataset, eval::parse_source(source), lang);
  std::printf("%zu problems, %zu rejects, hash %s\n", ds.problems.size(), ds.rejects.size(),
              ds.content_hash.c_str());
  for (const auto& r : ds.rejects) {
    std::printf("  reject line %d: %s\n", r.line_no, r.reason.c_str());
  }
  return ds.rejects.empty() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Step-level self-certainty decoding controller and evaluation harness"};
  app.require_subcommand(1);

  RunFlags flags;
  CLI::App* run = app.add_subcommand("run", "Run a strategy over a dataset");
  run->add_option("--dataset", flags.dataset, "Problem file, one JSON record per line")
      ->required();
  run->add_option("--source", flags.source, "math500|gsm8k|gsm8k_danish|custom");
  run->add_option("--language", flags.language, "english|danish (overrides per-record language)");
  run->add_option("--strategy", flags.strategy, "greedy|self_consistency|certainty_max");
  run->add_option("--k", flags.k, "Candidates per step, or chains for self_consistency");
  run->add_option("--max-steps", flags.max_steps, "Step cap per trajectory");
  run->add_option("--sample-first-m", flags.sample_first_m,
                  "Sample k candidates only for the first m kept steps (-1: all steps)");
  run->add_option("--repeats", flags.repeats, "Independent runs per problem");
  run->add_option("--seed", flags.seed, "Run seed; every unit derives from it");
  run->add_option("--out-dir", flags.out_dir, "Directory for records.jsonl (enables resume)");
  run->add_option("--backend-url", flags.backend_url,
                  "OpenAI-compatible server base URL (e.g. http://127.0.0.1:8000)");
  run->add_option("--model", flags.model, "Model name for HTTP requests");
  run->add_option("--vocab-size", flags.vocab_size,
                  "Model vocabulary size (required with --backend-url)");
  run->add_option("--synthetic-fixture", flags.synthetic_fixture,
                  "Synthetic backend fixture JSON");
  run->add_option("--request-mode", flags.request_mode,
                  "fanout (k requests, per-candidate seeds) or batched (one request, n=k)");
  run->add_option("--top-logprobs", flags.top_logprobs, "Logprob entries requested per token");
  run->add_option("--stops-cap", flags.stops_cap, "Stop sequences the server accepts");
  run->add_option("--parallelism", flags.parallelism, "Concurrent candidate requests");
  run->add_option("--timeout-s", flags.timeout_s, "HTTP timeout in seconds");
  run->add_option("--temperature", flags.temperature, "Sampling temperature for candidates");
  run->add_option("--top-p", flags.top_p, "Nucleus sampling mass");
  run->add_option("--min-tokens", flags.min_tokens, "Minimum tokens per step");
  run->add_option("--max-step-tokens", flags.max_step_tokens, "Maximum tokens per step");
  run->add_option("--greedy-max-tokens", flags.greedy_max_tokens,
                  "Token cap for greedy and self-consistency chains");
  run->add_option("--workers", flags.workers, "Worker threads (0: all cores)");
  run->add_option("--limit", flags.limit, "Stop after this many new records (0: no limit)");
  run->add_option("--prompt-template", flags.prompt_template_file,
                  "File replacing the built-in system prompt");
  run->add_option("--delimiter", flags.delimiters,
                  "Step delimiter (repeatable, literal bytes); defaults to the built-in list");

  std::string report_runs;
  std::string report_out;
  CLI::App* report = app.add_subcommand("report", "Reports over persisted run records");
  report->require_subcommand(1);
  for (const char* kind : {"accuracy", "dynamics", "budget"}) {
    CLI::App* sub = report->add_subcommand(kind);
    sub->add_option("--runs", report_runs, "records.jsonl produced by `run`")->required();
    sub->add_option("--out", report_out, "Output CSV path (default: stdout)");
  }

  std::string val_dataset;
  std::string val_source = "custom";
  std::string val_language;
  CLI::App* validate = app.add_subcommand("validate-dataset", "Parse a dataset, report rejects");
  validate->add_option("--dataset", val_dataset)->required();
  validate->add_option("--source", val_source);
  validate->add_option("--language", val_language);

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(flags);
    if (report->parsed()) {
      for (const char* kind : {"accuracy", "dynamics", "budget"}) {
        if (report->get_subcommand(kind)->parsed()) {
          return cmd_report(kind, report_runs, report_out);
        }
      }
    }
    if (validate->parsed()) return cmd_validate(val_dataset, val_source, val_language);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 2;
  }
  return 2;
}
