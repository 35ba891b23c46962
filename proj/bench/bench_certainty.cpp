// SPDX-License-Identifier: Apache-2.0

// Throughput benchmark for the certainty kernels: the serial direct-summation
// reference versus the log-space kernel at 1 thread and at all cores, over
// full reports (desk-scale vocab) and over top-k reports with a uniform tail
// (the production shape coming off an HTTP backend). Also prints the largest
// deviation from the reference, so kernel and reference cannot drift apart
// unnoticed.

#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "selfcert/certainty.hpp"
#include "support/reference.hpp"

using namespace selfcert;
namespace ref = selfcert::testref;

namespace {

double now_s() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

struct Timing {
  double seconds = 0.0;
  double per_second = 0.0;
};

template <typename F>
Timing time_reps(int reps, std::size_t items, F&& f) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const double t0 = now_s();
    f();
    best = std::min(best, now_s() - t0);
  }
  return {best, static_cast<double>(items) / best};
}

std::vector<certainty::TokenDistribution> full_reports(int n, int vocab, std::mt19937_64& rng) {
  std::vector<certainty::TokenDistribution> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    out.push_back(ref::report_from_probs(ref::random_full_distribution(rng, vocab)));
  }
  return out;
}

std::vector<certainty::TokenDistribution> topk_reports(int n, int vocab, int k,
                                                       std::mt19937_64& rng) {
  std::vector<certainty::TokenDistribution> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    // a peaked head plus leftover mass across the unseen tail
    std::vector<double> head(static_cast<std::size_t>(k));
    double z = 0.0;
    for (auto& h : head) {
      h = std::exp(4.0 * ref::uniform01(rng));
      z += h;
    }
    const double head_mass = 0.6 + 0.35 * ref::uniform01(rng);
    certainty::TokenDistribution d;
    d.vocab_size = vocab;
    for (int j = 0; j < k; ++j) {
      d.entries.push_back({j, std::log(head[static_cast<std::size_t>(j)] / z * head_mass)});
    }
    std::sort(d.entries.begin(), d.entries.end(),
              [](const auto& a, const auto& b) { return a.logprob > b.logprob; });
    out.push_back(std::move(d));
  }
  return out;
}

void run_section(const char* title, const std::vector<certainty::TokenDistribution>& dists,
                 certainty::TailMode mode, int reps, int max_threads) {
  std::printf("== %s: %zu reports ==\n", title, dists.size());

  std::vector<double> reference;
  const Timing t_ref = time_reps(reps, dists.size(), [&] {
    reference = ref::token_certainty_serial(dists);
  });

  std::vector<double> serial;
  omp_set_num_threads(1);
  const Timing t_serial = time_reps(reps, dists.size(), [&] {
    serial = certainty::token_self_certainty_batch(dists, mode);
  });

  std::vector<double> parallel;
  omp_set_num_threads(max_threads);
  const Timing t_parallel = time_reps(reps, dists.size(), [&] {
    parallel = certainty::token_self_certainty_batch(dists, mode);
  });

  double max_dev = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    max_dev = std::max(max_dev, std::abs(parallel[i] - reference[i]));
    if (parallel[i] != serial[i]) {
      std::printf("!! thread count changed a result at %zu\n", i);
    }
  }

  std::printf("  reference (direct sum, serial): %8.3f ms  %10.0f reports/s\n",
              t_ref.seconds * 1e3, t_ref.per_second);
  std::printf("  log-space kernel, 1 thread:     %8.3f ms  %10.0f reports/s\n",
              t_serial.seconds * 1e3, t_serial.per_second);
  std::printf("  log-space kernel, %d threads:    %8.3f ms  %10.0f reports/s  (x%.2f)\n",
              max_threads, t_parallel.seconds * 1e3, t_parallel.per_second,
              t_parallel.per_second / t_serial.per_second);
  std::printf("  max |kernel - reference| = %.3g\n\n", max_dev);
}

}  // namespace

int main(int argc, char** argv) {
  int n_full = 100000;
  int vocab_full = 64;
  int n_topk = 30000;  // the reference materializes 32k-entry tails; keep the default short
  int vocab_topk = 32768;
  int k = 20;
  int reps = 3;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    auto next = [&](int def) { return i + 1 < argc ? std::atoi(argv[++i]) : def; };
    if (arg == "--n-full") n_full = next(n_full);
    else if (arg == "--vocab-full") vocab_full = next(vocab_full);
    else if (arg == "--n-topk") n_topk = next(n_topk);
    else if (arg == "--vocab-topk") vocab_topk = next(vocab_topk);
    else if (arg == "--k") k = next(k);
    else if (arg == "--reps") reps = next(reps);
  }

  const int max_threads = omp_get_max_threads();
  std::printf("threads available: %d\n\n", max_threads);

  std::mt19937_64 rng(12345);
  run_section("full reports (exact tail)", full_reports(n_full, vocab_full, rng),
              certainty::TailMode::exact, reps, max_threads);
  run_section("top-k reports (uniform tail)", topk_reports(n_topk, vocab_topk, k, rng),
              certainty::TailMode::uniform_tail, reps, max_threads);
  return 0;
}
