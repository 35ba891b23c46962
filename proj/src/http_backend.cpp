// SPDX-License-Identifier: Apache-2.0

#include "selfcert/http_backend.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "selfcert/seeds.hpp"

namespace selfcert::lm {

using nlohmann::json;

void HttpBackendConfig::validate() const {
  if (base_url.empty()) throw Error(Errc::bad_config, "base_url required");
  if (model.empty()) throw Error(Errc::bad_config, "model required");
  if (vocab_size < 2) {
    throw Error(Errc::bad_config,
                "vocab_size must be configured for an HTTP backend (servers do not report it)");
  }
  if (top_logprobs < 1) throw Error(Errc::bad_config, "top_logprobs must be >= 1");
  if (max_server_stops < 1) throw Error(Errc::bad_config, "max_server_stops must be >= 1");
  if (parallelism < 1) throw Error(Errc::bad_config, "parallelism must be >= 1");
}

std::vector<std::string> reduce_stops(const std::vector<std::string>& delimiters,
                                      std::size_t cap) {
  std::vector<std::string> unique;
  for (const auto& d : delimiters) {
    if (d.empty()) continue;
    if (std::find(unique.begin(), unique.end(), d) == unique.end()) unique.push_back(d);
  }
  std::vector<std::string> cover;
  for (const auto& d : unique) {
    bool covered = false;
    for (const auto& e : unique) {
      if (e.size() < d.size() && d.ends_with(e)) {
        covered = true;
        break;
      }
    }
    if (!covered) cover.push_back(d);
  }
  if (cover.size() > cap) {
    throw Error(Errc::stop_limit_exceeded,
                "delimiter list needs " + std::to_string(cover.size()) +
                    " server stop slots but only " + std::to_string(cap) + " are available");
  }
  return cover;
}

// ---------------------------------------------------------------------------

struct HttpBackend::Completion {
  std::string text;  // matched stop strings re-appended
  std::vector<std::string> token_texts;
  std::vector<double> token_logprobs;
  std::vector<std::vector<std::pair<std::string, double>>> alternatives;  // per token
  std::string finish_reason;
  bool ended_by_eos = false;
  long long prompt_tokens = 0;
  long long completion_tokens = 0;
  long long requests = 0;
  long long continuations = 0;
};

namespace {

struct RawChoice {
  int index = 0;
  std::string text;
  std::string finish_reason;
  std::vector<std::string> token_texts;
  std::vector<double> token_logprobs;
  std::vector<std::vector<std::pair<std::string, double>>> alternatives;
  // The stop string the server consumed, when it tells us (vLLM stop_reason,
  // llama.cpp stopping_word). Empty means unknown.
  std::string matched_stop;
  bool explicit_eos = false;
};

RawChoice parse_choice(const json& choice) {
  RawChoice out;
  out.index = choice.value("index", 0);
  out.text = choice.value("text", "");
  if (choice.contains("finish_reason") && choice["finish_reason"].is_string()) {
    out.finish_reason = choice["finish_reason"].get<std::string>();
  }

  if (!choice.contains("logprobs") || choice["logprobs"].is_null()) {
    throw Error(Errc::logprobs_unsupported, "server response carries no logprobs");
  }
  const json& lp = choice["logprobs"];
  if (!lp.contains("tokens") || !lp["tokens"].is_array() || !lp.contains("token_logprobs")) {
    throw Error(Errc::logprobs_unsupported, "logprobs block lacks tokens / token_logprobs");
  }
  for (const auto& t : lp["tokens"]) out.token_texts.push_back(t.get<std::string>());
  for (const auto& v : lp["token_logprobs"]) {
    if (v.is_null()) {
      throw Error(Errc::logprobs_unsupported, "null token_logprob entry");
    }
    out.token_logprobs.push_back(v.get<double>());
  }
  if (out.token_logprobs.size() != out.token_texts.size()) {
    throw Error(Errc::logprobs_unsupported, "token/logprob arrays disagree in length");
  }
  out.alternatives.resize(out.token_texts.size());
  if (lp.contains("top_logprobs") && lp["top_logprobs"].is_array()) {
    const auto& tops = lp["top_logprobs"];
    for (std::size_t i = 0; i < out.alternatives.size() && i < tops.size(); ++i) {
      if (!tops[i].is_object()) continue;
      for (const auto& [tok, v] : tops[i].items()) {
        if (v.is_number()) out.alternatives[i].emplace_back(tok, v.get<double>());
      }
    }
  }

  if (choice.contains("stop_reason")) {
    const auto& sr = choice["stop_reason"];
    if (sr.is_string()) {
      out.matched_stop = sr.get<std::string>();
    } else if (sr.is_null() && out.finish_reason == "stop") {
      out.explicit_eos = true;
    }
  }
  if (choice.contains("stopping_word") && choice["stopping_word"].is_string()) {
    const auto w = choice["stopping_word"].get<std::string>();
    if (!w.empty()) out.matched_stop = w;
  }
  if (choice.value("stopped_eos", false)) out.explicit_eos = true;
  return out;
}

}  // namespace

HttpBackend::HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {
  config_.validate();
  if (const char* key = std::getenv(config_.api_key_env.c_str()); key != nullptr && *key != '\0') {
    api_key_ = key;
  }
}

HttpBackend::~HttpBackend() = default;

std::string HttpBackend::id() const {
  return "http:" + config_.model + (config_.batched_n ? "+n" : "+fanout");
}

int HttpBackend::intern(const std::string& token_text) const {
  std::lock_guard<std::mutex> lock(intern_mutex_);
  const auto [it, inserted] = intern_ids_.emplace(token_text, static_cast<int>(intern_ids_.size()));
  return it->second;
}

namespace {

json post_completions(const HttpBackendConfig& config, const std::string& api_key,
                      const json& body) {
  const std::string payload = body.dump();
  std::string last_error = "no attempt made";
  for (int attempt = 0; attempt < std::max(1, config.max_retries); ++attempt) {
    if (attempt > 0) {
      const double delay = config.retry_backoff_s * std::pow(2.0, attempt - 1);
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    }
    httplib::Client cli(config.base_url);
    cli.set_connection_timeout(std::chrono::duration<double>(config.timeout_s));
    cli.set_read_timeout(std::chrono::duration<double>(config.timeout_s));
    cli.set_write_timeout(std::chrono::duration<double>(config.timeout_s));
    httplib::Headers headers;
    if (!api_key.empty()) headers.emplace("Authorization", "Bearer " + api_key);
    auto res = cli.Post("/v1/completions", headers, payload, "application/json");
    if (!res) {
      last_error = "transport: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 200) {
      try {
        return json::parse(res->body);
      } catch (const json::exception& e) {
        throw Error(Errc::backend_unavailable, std::string("malformed response body: ") + e.what());
      }
    }
    if (res->status >= 400 && res->status < 500) {
      // not retryable
      throw Error(Errc::backend_unavailable,
                  "HTTP " + std::to_string(res->status) + ": " + res->body);
    }
    last_error = "HTTP " + std::to_string(res->status);
  }
  throw Error(Errc::backend_unavailable, last_error + " after " +
                                             std::to_string(std::max(1, config.max_retries)) +
                                             " attempts");
}

json completion_body(const HttpBackendConfig& config, const std::string& prompt, int n,
                     int max_tokens, double temperature, double top_p, std::uint64_t seed,
                     const std::vector<std::string>& stops) {
  json body = {
      {"model", config.model},   {"prompt", prompt},
      {"max_tokens", max_tokens}, {"temperature", temperature},
      {"top_p", top_p},           {"n", n},
      {"logprobs", config.top_logprobs}, {"stream", false},
  };
  // folded to 31 bits; some servers parse seeds as signed 32-bit ints
  body["seed"] = static_cast<long long>(seed % 2147483647ULL);
  if (!stops.empty()) body["stop"] = stops;
  return body;
}

// The stop string the server consumed, reconstructed when it is not reported:
// prefer one that turns the text tail into a configured delimiter.
std::string guess_matched_stop(const std::string& text,
                               const std::vector<std::string>& server_stops,
                               const std::vector<std::string>& delimiters) {
  for (const auto& s : server_stops) {
    const std::string extended = text + s;
    for (const auto& d : delimiters) {
      if (extended.size() >= d.size() && extended.ends_with(d)) return s;
    }
  }
  return server_stops.empty() ? std::string() : server_stops.front();
}

void append_raw(HttpBackend::Completion& acc, RawChoice&& raw) {
  acc.text += raw.text;
  acc.finish_reason = raw.finish_reason;
  std::move(raw.token_texts.begin(), raw.token_texts.end(), std::back_inserter(acc.token_texts));
  std::move(raw.token_logprobs.begin(), raw.token_logprobs.end(),
            std::back_inserter(acc.token_logprobs));
  std::move(raw.alternatives.begin(), raw.alternatives.end(),
            std::back_inserter(acc.alternatives));
}

}  // namespace

HttpBackend::Completion HttpBackend::sample_candidate(
    const std::string& context, const GenerationLimits& limits, std::uint64_t seed,
    const std::vector<std::string>& server_stops) const {
  Completion acc;
  std::uint64_t request_seed = seed;
  int remaining = limits.max_tokens;

  while (true) {
    const json body = completion_body(config_, context + acc.text, 1, remaining,
                                      limits.temperature, limits.top_p, request_seed,
                                      server_stops);
    const json resp = post_completions(config_, api_key_, body);
    acc.requests += 1;
    if (!resp.contains("choices") || !resp["choices"].is_array() || resp["choices"].empty()) {
      throw Error(Errc::backend_unavailable, "response without choices");
    }
    RawChoice raw = parse_choice(resp["choices"][0]);
    const auto used = static_cast<int>(raw.token_texts.size());
    if (resp.contains("usage") && resp["usage"].is_object()) {
      acc.prompt_tokens += resp["usage"].value("prompt_tokens", 0LL);
      acc.completion_tokens += resp["usage"].value("completion_tokens", static_cast<long long>(used));
    } else {
      acc.completion_tokens += used;
    }
    const bool eos = raw.explicit_eos;
    std::string matched = raw.matched_stop;
    const std::string finish = raw.finish_reason;
    append_raw(acc, std::move(raw));
    remaining -= used;

    if (finish == "length" || remaining <= 0) {
      acc.finish_reason = "length";
      return acc;
    }
    if (eos || server_stops.empty()) {
      acc.ended_by_eos = true;
      return acc;
    }
    // Server consumed a stop string: put it back so delimiters survive in the
    // surface text.
    if (matched.empty() ||
        std::find(server_stops.begin(), server_stops.end(), matched) == server_stops.end()) {
      matched = guess_matched_stop(acc.text, server_stops, limits.stop_sequences);
    }
    acc.text += matched;
    if (static_cast<int>(acc.token_texts.size()) >= limits.min_tokens) {
      return acc;
    }
    // Stop fired before the minimum step length: ignore it and continue.
    acc.continuations += 1;
    request_seed = seeds::derive(seed, 0xC0411ULL + static_cast<std::uint64_t>(acc.continuations));
  }
}

std::vector<HttpBackend::Completion> HttpBackend::batched_first_round(
    const std::string& context, int k, const GenerationLimits& limits,
    const std::vector<std::string>& server_stops) const {
  const json body = completion_body(config_, context, k, limits.max_tokens, limits.temperature,
                                    limits.top_p, limits.seed, server_stops);
  const json resp = post_completions(config_, api_key_, body);
  if (!resp.contains("choices") || !resp["choices"].is_array() ||
      static_cast<int>(resp["choices"].size()) != k) {
    throw Error(Errc::backend_unavailable, "batched request did not return n choices");
  }
  std::vector<Completion> out(static_cast<std::size_t>(k));
  long long prompt_tokens = 0;
  long long completion_tokens = -1;
  if (resp.contains("usage") && resp["usage"].is_object()) {
    prompt_tokens = resp["usage"].value("prompt_tokens", 0LL);
    completion_tokens = resp["usage"].value("completion_tokens", -1LL);
  }
  long long token_sum = 0;
  for (const auto& choice : resp["choices"]) {
    RawChoice raw = parse_choice(choice);
    const int idx = raw.index;
    if (idx < 0 || idx >= k) {
      throw Error(Errc::backend_unavailable, "choice index out of range");
    }
    Completion& acc = out[static_cast<std::size_t>(idx)];
    const bool eos = raw.explicit_eos;
    std::string matched = raw.matched_stop;
    const std::string finish = raw.finish_reason;
    token_sum += static_cast<long long>(raw.token_texts.size());
    append_raw(acc, std::move(raw));
    if (finish == "length") {
      acc.finish_reason = "length";
    } else if (eos || server_stops.empty()) {
      acc.ended_by_eos = true;
    } else {
      if (matched.empty() ||
          std::find(server_stops.begin(), server_stops.end(), matched) == server_stops.end()) {
        matched = guess_matched_stop(acc.text, server_stops, limits.stop_sequences);
      }
      acc.text += matched;
    }
  }
  // usage is request-scoped; attribute it to candidate 0's ledger slots
  out[0].requests = 1;
  out[0].prompt_tokens = prompt_tokens;
  out[0].completion_tokens = completion_tokens >= 0 ? completion_tokens : token_sum;
  return out;
}

Thought HttpBackend::finalize_candidate(Completion&& completion, const GenerationLimits& limits,
                                        long long& sampled_tokens) const {
  sampled_tokens = static_cast<long long>(completion.token_texts.size());

  Thought th;
  th.text = std::move(completion.text);
  th.token_texts = std::move(completion.token_texts);
  th.token_ids.reserve(th.token_texts.size());
  th.distributions.reserve(th.token_texts.size());
  for (std::size_t i = 0; i < th.token_texts.size(); ++i) {
    th.token_ids.push_back(intern(th.token_texts[i]));

    certainty::TokenDistribution dist;
    dist.vocab_size = config_.vocab_size;
    bool sampled_present = false;
    for (const auto& [tok, lp] : completion.alternatives[i]) {
      const int tid = intern(tok);
      dist.entries.push_back({tid, std::min(0.0, lp)});
      if (tid == th.token_ids.back()) sampled_present = true;
    }
    if (!sampled_present) {
      dist.entries.push_back({th.token_ids.back(), std::min(0.0, completion.token_logprobs[i])});
    }
    std::sort(dist.entries.begin(), dist.entries.end(), [](const auto& a, const auto& b) {
      if (a.logprob != b.logprob) return a.logprob > b.logprob;
      return a.token_id < b.token_id;
    });
    th.distributions.push_back(std::move(dist));
  }

  // Client-side truncation: earliest full-list delimiter match past the
  // min-token text boundary. Logprobs past the cut are dropped.
  std::size_t len_before_min = 0;
  {
    std::size_t len = 0;
    for (std::size_t i = 0; i + 1 < static_cast<std::size_t>(limits.min_tokens) &&
                            i < th.token_texts.size();
         ++i) {
      len += th.token_texts[i].size();
    }
    len_before_min = len;
  }
  std::size_t best_end = std::string::npos;
  std::size_t best_start = std::string::npos;
  const std::string* best_delim = nullptr;
  for (const auto& d : limits.stop_sequences) {
    if (d.empty()) continue;
    std::size_t from = 0;
    while (true) {
      const std::size_t at = th.text.find(d, from);
      if (at == std::string::npos) break;
      const std::size_t end = at + d.size();
      if (end > len_before_min) {
        if (end < best_end || (end == best_end && at < best_start)) {
          best_end = end;
          best_start = at;
          best_delim = &d;
        }
        break;
      }
      from = at + 1;
    }
  }
  if (best_delim != nullptr) {
    th.text.resize(best_end);
    std::size_t kept = 0;
    std::size_t len = 0;
    while (kept < th.token_texts.size() && len < best_end) {
      len += th.token_texts[kept].size();
      ++kept;
    }
    th.token_ids.resize(kept);
    th.token_texts.resize(kept);
    th.distributions.resize(kept);
    th.terminator = Terminator::at_delimiter(*best_delim);
  } else if (completion.finish_reason == "length") {
    th.terminator = Terminator::token_cap();
  } else {
    th.terminator = Terminator::end_of_generation();
  }
  return th;
}

ProposalBatch HttpBackend::propose_steps(const std::string& context, int k,
                                         const GenerationLimits& limits) {
  if (k < 1) throw Error(Errc::bad_config, "propose_steps needs k >= 1");
  if (context.empty()) throw Error(Errc::bad_config, "propose_steps needs a non-empty context");
  limits.validate();

  const std::vector<std::string> server_stops =
      reduce_stops(limits.stop_sequences, static_cast<std::size_t>(config_.max_server_stops));

  std::vector<Completion> completions(static_cast<std::size_t>(k));
  if (config_.batched_n) {
    completions = batched_first_round(context, k, limits, server_stops);
    // Candidates cut short of min_tokens continue individually.
    for (int i = 0; i < k; ++i) {
      Completion& c = completions[static_cast<std::size_t>(i)];
      while (static_cast<int>(c.token_texts.size()) < limits.min_tokens &&
             c.finish_reason != "length" && !c.ended_by_eos &&
             static_cast<int>(c.token_texts.size()) < limits.max_tokens) {
        c.continuations += 1;
        GenerationLimits rest = limits;
        rest.max_tokens = limits.max_tokens - static_cast<int>(c.token_texts.size());
        Completion more = sample_candidate(
            context + c.text, rest,
            seeds::derive(limits.seed, 0xB47C4ULL + static_cast<std::uint64_t>(i)), server_stops);
        c.text += more.text;
        std::move(more.token_texts.begin(), more.token_texts.end(),
                  std::back_inserter(c.token_texts));
        std::move(more.token_logprobs.begin(), more.token_logprobs.end(),
                  std::back_inserter(c.token_logprobs));
        std::move(more.alternatives.begin(), more.alternatives.end(),
                  std::back_inserter(c.alternatives));
        c.prompt_tokens += more.prompt_tokens;
        c.completion_tokens += more.completion_tokens;
        c.requests += more.requests;
        c.finish_reason = more.finish_reason;
        c.ended_by_eos = more.ended_by_eos;
      }
    }
  } else {
    // Fanout: one request per candidate, bounded thread pool, results merged
    // by candidate index.
    const int workers = std::min(config_.parallelism, k);
    std::atomic<int> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto work = [&]() {
      while (true) {
        const int i = next.fetch_add(1);
        if (i >= k || failed.load()) return;
        try {
          completions[static_cast<std::size_t>(i)] =
              sample_candidate(context, limits, seeds::derive(limits.seed, static_cast<std::uint64_t>(i)),
                               server_stops);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!failed.exchange(true)) error = std::current_exception();
        }
      }
    };
    if (workers <= 1) {
      work();
    } else {
      std::vector<std::thread> pool;
      pool.reserve(static_cast<std::size_t>(workers));
      for (int w = 0; w < workers; ++w) pool.emplace_back(work);
      for (auto& t : pool) t.join();
    }
    if (error) std::rethrow_exception(error);
  }

  ProposalBatch batch;
  batch.backend_id = id();
  for (auto& c : completions) {
    batch.usage.prompt_tokens += c.prompt_tokens;
    batch.usage.completion_tokens += c.completion_tokens;
    batch.usage.requests += c.requests;
    batch.continuation_requests += c.continuations;
    long long sampled = 0;
    batch.candidates.push_back(finalize_candidate(std::move(c), limits, sampled));
    batch.sampled_tokens.push_back(sampled);
  }
  return batch;
}

GreedyCompletion HttpBackend::complete_greedy(const std::string& context, int max_tokens) {
  if (max_tokens < 1) throw Error(Errc::bad_config, "complete_greedy needs max_tokens >= 1");
  if (context.empty()) throw Error(Errc::bad_config, "complete_greedy needs a non-empty context");

  GenerationLimits limits;
  limits.min_tokens = 1;
  limits.max_tokens = max_tokens;
  limits.temperature = 0.0;
  limits.top_p = 1.0;
  limits.seed = 0;

  Completion c = sample_candidate(context, limits, 0, /*server_stops=*/{});
  GreedyCompletion out;
  out.usage.prompt_tokens = c.prompt_tokens;
  out.usage.completion_tokens = c.completion_tokens;
  out.usage.requests = c.requests;
  long long sampled = 0;
  out.thought = finalize_candidate(std::move(c), limits, sampled);
  return out;
}

}  // namespace selfcert::lm
