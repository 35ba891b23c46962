// SPDX-License-Identifier: Apache-2.0

#include "selfcert/synthetic_lm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "selfcert/seeds.hpp"

namespace selfcert::lm {

namespace {

constexpr double kNoiseFloor = 1e-12;  // smallest probability a builder assigns

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (vocab_size < 2 || vocab_size > 64) {
    throw Error(Errc::bad_config, "synthetic vocab_size must be in [2, 64]");
  }
  const auto v = static_cast<std::size_t>(vocab_size);
  if (token_text.size() != v) {
    throw Error(Errc::bad_config, "token_text size must equal vocab_size");
  }
  auto check_token = [&](int t, const char* what) {
    if (t < 0 || t >= vocab_size) {
      throw Error(Errc::bad_config, std::string(what) + " out of range");
    }
  };
  check_token(eos_token, "eos_token");
  check_token(begin_token, "begin_token");
  if (token_text[static_cast<std::size_t>(begin_token)].empty()) {
    throw Error(Errc::bad_config, "begin_token needs a non-empty surface");
  }
  if (states.empty()) throw Error(Errc::bad_config, "no states");
  if (start_state < 0 || start_state >= static_cast<int>(states.size())) {
    throw Error(Errc::bad_config, "start_state out of range");
  }
  for (const auto& st : states) {
    if (st.weights.size() != v || st.next.size() != v) {
      throw Error(Errc::bad_config, "state " + st.name + " arrays must have vocab_size entries");
    }
    double sum = 0.0;
    for (double w : st.weights) {
      if (!(w > 0.0)) {
        throw Error(Errc::bad_config, "state " + st.name + " has a non-positive weight");
      }
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-12) {
      throw Error(Errc::bad_config, "state " + st.name + " weights do not sum to 1");
    }
    for (int nx : st.next) {
      if (nx < 0 || nx >= static_cast<int>(states.size())) {
        throw Error(Errc::bad_config, "state " + st.name + " has a successor out of range");
      }
    }
  }
  for (const auto& [state, token] : planted) {
    if (state < 0 || state >= static_cast<int>(states.size())) {
      throw Error(Errc::bad_config, "planted state out of range");
    }
    check_token(token, "planted token");
  }
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

std::string synthetic_spec_to_json(const SyntheticSpec& spec) {
  nlohmann::ordered_json j;
  j["vocab_size"] = spec.vocab_size;
  j["eos_token"] = spec.eos_token;
  j["begin_token"] = spec.begin_token;
  j["start_state"] = spec.start_state;
  j["seed"] = spec.seed;
  j["branch_sharpness"] = spec.branch_sharpness;
  j["tokens"] = spec.token_text;
  auto planted = nlohmann::ordered_json::array();
  for (const auto& [state, token] : spec.planted) {
    planted.push_back({{"state", state}, {"token", token}});
  }
  j["planted"] = planted;
  auto states = nlohmann::ordered_json::array();
  for (const auto& st : spec.states) {
    states.push_back({{"name", st.name}, {"weights", st.weights}, {"next", st.next}});
  }
  j["states"] = states;
  return j.dump(2);
}

SyntheticSpec synthetic_spec_from_json(std::string_view json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::bad_config, std::string("fixture JSON parse failure: ") + e.what());
  }
  SyntheticSpec spec;
  try {
    spec.vocab_size = j.at("vocab_size").get<int>();
    spec.eos_token = j.at("eos_token").get<int>();
    spec.begin_token = j.at("begin_token").get<int>();
    spec.start_state = j.at("start_state").get<int>();
    spec.seed = j.at("seed").get<std::uint64_t>();
    spec.branch_sharpness = j.value("branch_sharpness", 0.0);
    spec.token_text = j.at("tokens").get<std::vector<std::string>>();
    for (const auto& p : j.value("planted", nlohmann::json::array())) {
      spec.planted[p.at("state").get<int>()] = p.at("token").get<int>();
    }
    for (const auto& s : j.at("states")) {
      SyntheticState st;
      st.name = s.value("name", "");
      st.weights = s.at("weights").get<std::vector<double>>();
      st.next = s.at("next").get<std::vector<int>>();
      spec.states.push_back(std::move(st));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::bad_config, std::string("fixture JSON shape failure: ") + e.what());
  }
  spec.validate();
  return spec;
}

SyntheticSpec load_synthetic_spec(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::file_unreadable, path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return synthetic_spec_from_json(ss.str());
}

void save_synthetic_spec(const SyntheticSpec& spec, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::file_unreadable, path);
  out << synthetic_spec_to_json(spec) << "\n";
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

SyntheticLm::SyntheticLm(SyntheticSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
}

certainty::TokenDistribution SyntheticLm::state_distribution(int state,
                                                             double temperature) const {
  if (state < 0 || state >= static_cast<int>(spec_.states.size())) {
    throw Error(Errc::bad_config, "state index out of range");
  }
  const auto& w = spec_.states[static_cast<std::size_t>(state)].weights;
  const int v = spec_.vocab_size;

  std::vector<double> logp(w.size());
  if (temperature > 0.0 && temperature != 1.0) {
    double lse = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < w.size(); ++i) {
      logp[i] = std::log(w[i]) / temperature;
      lse = lse > logp[i] ? lse + std::log1p(std::exp(logp[i] - lse))
                          : logp[i] + std::log1p(std::exp(lse - logp[i]));
    }
    for (auto& lp : logp) lp -= lse;
  } else {
    // temperature 1 reports the base weights; temperature 0 (argmax sampling)
    // also reports the base weights.
    for (std::size_t i = 0; i < w.size(); ++i) logp[i] = std::log(w[i]);
  }

  std::vector<int> order(w.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const auto la = logp[static_cast<std::size_t>(a)];
    const auto lb = logp[static_cast<std::size_t>(b)];
    if (la != lb) return la > lb;
    return a < b;
  });

  certainty::TokenDistribution dist;
  dist.vocab_size = v;
  dist.entries.reserve(w.size());
  for (int id : order) {
    dist.entries.push_back({id, std::min(0.0, logp[static_cast<std::size_t>(id)])});
  }
  return dist;
}

ReplayPoint SyntheticLm::replay(std::string_view context) const {
  ReplayPoint rp;
  rp.state = spec_.start_state;

  const std::string& marker = spec_.token_text[static_cast<std::size_t>(spec_.begin_token)];
  const std::size_t at = context.rfind(marker);
  if (at == std::string_view::npos) return rp;

  rp.generation_started = true;
  int state = spec_.start_state;
  std::size_t i = at;
  while (i < context.size()) {
    int best = -1;
    std::size_t best_len = 0;
    for (int tok = 0; tok < spec_.vocab_size; ++tok) {
      const std::string& s = spec_.token_text[static_cast<std::size_t>(tok)];
      if (s.empty() || s.size() <= best_len) continue;
      if (context.compare(i, s.size(), s) == 0) {
        best = tok;
        best_len = s.size();
      }
    }
    if (best < 0) {
      throw Error(Errc::bad_config, "context suffix does not replay onto token boundaries");
    }
    state = spec_.states[static_cast<std::size_t>(state)].next[static_cast<std::size_t>(best)];
    i += best_len;
  }
  rp.state = state;
  return rp;
}

SyntheticLm::Sampled SyntheticLm::generate(int start_state, const GenerationLimits& limits,
                                           std::uint64_t seed, bool greedy,
                                           int max_tokens) const {
  std::mt19937_64 rng(seed);
  Sampled out;
  Thought& th = out.thought;
  th.terminator = Terminator::token_cap();

  int state = start_state;
  std::size_t len_before_min = 0;  // text length after token (min_tokens - 1)
  const int min_tokens = greedy ? 1 : limits.min_tokens;

  for (int t = 1; t <= max_tokens; ++t) {
    const auto& st = spec_.states[static_cast<std::size_t>(state)];
    const double temperature = greedy ? 0.0 : limits.temperature;

    int token = 0;
    if (temperature <= 0.0) {
      // argmax of the base weights; ties resolve to the lowest token id
      token = static_cast<int>(std::distance(
          st.weights.begin(), std::max_element(st.weights.begin(), st.weights.end())));
    } else {
      // reshape by temperature, truncate the sampled support by top_p
      std::vector<double> p(st.weights.size());
      if (temperature == 1.0) {
        p = st.weights;
      } else {
        double maxlp = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < p.size(); ++i) {
          p[i] = std::log(st.weights[i]) / temperature;
          maxlp = std::max(maxlp, p[i]);
        }
        double z = 0.0;
        for (auto& x : p) {
          x = std::exp(x - maxlp);
          z += x;
        }
        for (auto& x : p) x /= z;
      }
      std::vector<int> order(p.size());
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double pa = p[static_cast<std::size_t>(a)];
        const double pb = p[static_cast<std::size_t>(b)];
        if (pa != pb) return pa > pb;
        return a < b;
      });
      std::size_t keep = order.size();
      if (limits.top_p < 1.0) {
        double cum = 0.0;
        for (std::size_t i = 0; i < order.size(); ++i) {
          cum += p[static_cast<std::size_t>(order[i])];
          if (cum >= limits.top_p - 1e-12) {
            keep = i + 1;
            break;
          }
        }
      }
      double z = 0.0;
      for (std::size_t i = 0; i < keep; ++i) z += p[static_cast<std::size_t>(order[i])];
      const double u = uniform01(rng) * z;
      double cum = 0.0;
      token = order[keep - 1];
      for (std::size_t i = 0; i < keep; ++i) {
        cum += p[static_cast<std::size_t>(order[i])];
        if (u < cum) {
          token = order[i];
          break;
        }
      }
    }

    th.token_ids.push_back(token);
    th.token_texts.push_back(spec_.token_text[static_cast<std::size_t>(token)]);
    th.distributions.push_back(state_distribution(state, greedy ? 0.0 : limits.temperature));
    th.text += spec_.token_text[static_cast<std::size_t>(token)];
    out.tokens += 1;

    if (t == min_tokens - 1) len_before_min = th.text.size();

    if (token == spec_.eos_token) {
      th.terminator = Terminator::end_of_generation();
      return out;
    }
    state = st.next[static_cast<std::size_t>(token)];

    if (!limits.stop_sequences.empty() && t >= min_tokens) {
      // Earliest-ending stop match past the min-token boundary; among equal
      // ends the earliest start (= longest delimiter) wins.
      std::size_t best_end = std::string::npos;
      std::size_t best_start = std::string::npos;
      const std::string* best_stop = nullptr;
      for (const auto& stop : limits.stop_sequences) {
        if (stop.empty()) continue;
        std::size_t from = 0;
        while (true) {
          const std::size_t at = th.text.find(stop, from);
          if (at == std::string::npos) break;
          const std::size_t end = at + stop.size();
          if (end > len_before_min) {
            if (end < best_end || (end == best_end && at < best_start)) {
              best_end = end;
              best_start = at;
              best_stop = &stop;
            }
            break;
          }
          from = at + 1;
        }
      }
      if (best_stop != nullptr) {
        th.text.resize(best_end);
        th.terminator = Terminator::at_delimiter(*best_stop);
        return out;
      }
    }
  }
  return out;  // token cap
}

ProposalBatch SyntheticLm::propose_steps(const std::string& context, int k,
                                         const GenerationLimits& limits) {
  if (k < 1) throw Error(Errc::bad_config, "propose_steps needs k >= 1");
  if (context.empty()) throw Error(Errc::bad_config, "propose_steps needs a non-empty context");
  limits.validate();

  const ReplayPoint rp = replay(context);
  const std::uint64_t batch_seed = seeds::derive(spec_.seed, limits.seed);

  ProposalBatch batch;
  batch.backend_id = id();
  batch.usage.prompt_tokens = static_cast<long long>((context.size() + 3) / 4);
  batch.usage.requests = 1;
  for (int i = 0; i < k; ++i) {
    Sampled s = generate(rp.state, limits, seeds::derive(batch_seed, static_cast<std::uint64_t>(i)),
                         /*greedy=*/false, limits.max_tokens);
    batch.usage.completion_tokens += s.tokens;
    batch.sampled_tokens.push_back(s.tokens);
    batch.candidates.push_back(std::move(s.thought));
  }
  return batch;
}

GreedyCompletion SyntheticLm::complete_greedy(const std::string& context, int max_tokens) {
  if (max_tokens < 1) throw Error(Errc::bad_config, "complete_greedy needs max_tokens >= 1");
  if (context.empty()) throw Error(Errc::bad_config, "complete_greedy needs a non-empty context");

  const ReplayPoint rp = replay(context);
  GenerationLimits greedy_limits;
  greedy_limits.min_tokens = 1;
  greedy_limits.max_tokens = max_tokens;
  greedy_limits.temperature = 0.0;
  greedy_limits.top_p = 1.0;

  GreedyCompletion out;
  Sampled s = generate(rp.state, greedy_limits, 0, /*greedy=*/true, max_tokens);
  out.usage.prompt_tokens = static_cast<long long>((context.size() + 3) / 4);
  out.usage.completion_tokens = s.tokens;
  out.usage.requests = 1;
  out.thought = std::move(s.thought);
  return out;
}

// ---------------------------------------------------------------------------
// Fixture builders
// ---------------------------------------------------------------------------

namespace {

constexpr int kEos = 0;
constexpr int kDelim = 1;
constexpr int kBegin = 2;
constexpr int kOpener = 3;
constexpr int kCorrectFirst = 4;
constexpr int kWrongFirstA = 5;
constexpr int kWrongFirstB = 6;
constexpr int kSafe[] = {7, 8, 9, 10, 11};
constexpr int kSay = 12;
constexpr int kBoxA = 13;
constexpr int kBoxB = 14;
constexpr int kHope = 15;
constexpr int kVocab = 16;

std::vector<std::string> builder_tokens(const std::string& answer_a, const std::string& answer_b) {
  return {
      "",
      ".\n\n",
      "### Solution\n",
      "We evaluate the expression",
      " using the direct method",
      " using a shortcut estimate",
      " by trial and error",
      " and simplify the terms",
      " then collect the factors",
      " which reduces cleanly",
      " as expected",
      " after checking each case",
      "Therefore, the final answer is: ",
      "\\boxed{" + answer_a + "}",
      "\\boxed{" + answer_b + "}",
      ". I hope it is correct.",
  };
}

void normalize(std::vector<double>& w) {
  const double sum = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& x : w) x /= sum;
}

std::vector<double> emit_weights(int token) {
  std::vector<double> w(kVocab, kNoiseFloor);
  w[static_cast<std::size_t>(token)] = 1.0 - (kVocab - 1) * kNoiseFloor;
  normalize(w);
  return w;
}

// `lambda` of the non-noise mass on `main`, the rest spread over the safe
// word tokens.
std::vector<double> mix_weights(int main_token, double lambda) {
  std::vector<double> w(kVocab, kNoiseFloor);
  constexpr int n_safe = static_cast<int>(std::size(kSafe));
  const double mass = 1.0 - (kVocab - n_safe) * kNoiseFloor;
  for (int s : kSafe) {
    w[static_cast<std::size_t>(s)] = mass * (1.0 - lambda) / n_safe;
  }
  w[static_cast<std::size_t>(main_token)] += mass * lambda;
  normalize(w);
  return w;
}

struct SpecBuilder {
  SyntheticSpec spec;

  int add(std::string name, std::vector<double> weights, int next_all) {
    SyntheticState st;
    st.name = std::move(name);
    st.weights = std::move(weights);
    st.next.assign(kVocab, next_all);
    spec.states.push_back(std::move(st));
    return static_cast<int>(spec.states.size()) - 1;
  }
};

// Chain of `n` mixture states named <prefix>0..; every state falls through to
// the next, the last one to `after` (patched by the caller once known).
int add_chain(SpecBuilder& b, const std::string& prefix, int n, double lambda) {
  int first = -1;
  for (int i = 0; i < n; ++i) {
    const int idx = b.add(prefix + std::to_string(i),
                          mix_weights(kSafe[i % std::size(kSafe)], lambda), 0);
    if (first < 0) first = idx;
    if (i > 0) {
      b.spec.states[static_cast<std::size_t>(idx - 1)].next.assign(kVocab, idx);
    }
  }
  return first;
}

void point_to(SpecBuilder& b, int state, int successor) {
  b.spec.states[static_cast<std::size_t>(state)].next.assign(kVocab, successor);
}

}  // namespace

SyntheticSpec make_planted_spec(const PlantedParams& params) {
  if (params.vocab_size != kVocab) {
    throw Error(Errc::bad_config, "planted fixture is defined over a 16-token vocabulary");
  }
  if (!(params.correct_draw_prob > 0.0) || !(params.wrong_argmax_prob > params.correct_draw_prob) ||
      params.correct_draw_prob + params.wrong_argmax_prob >= 1.0) {
    throw Error(Errc::bad_config,
                "need 0 < correct_draw_prob < wrong_argmax_prob and their sum < 1");
  }
  if (!(params.sharp_lambda > params.flat_lambda) || params.sharp_lambda >= 1.0 ||
      params.flat_lambda < 0.0) {
    throw Error(Errc::bad_config, "need 0 <= flat_lambda < sharp_lambda < 1");
  }
  if (params.body_tokens < 4 || params.middle_tokens < 4 || params.answer_body_tokens < 1) {
    throw Error(Errc::bad_config, "branch bodies too short for the default min-token floor");
  }

  SpecBuilder b;
  b.spec.vocab_size = kVocab;
  b.spec.eos_token = kEos;
  b.spec.begin_token = kBegin;
  b.spec.seed = params.seed;
  b.spec.branch_sharpness = params.sharp_lambda;
  b.spec.token_text = builder_tokens(params.correct_answer, params.wrong_answer);

  const int begin = b.add("begin", emit_weights(kBegin), 0);
  const int opener = b.add("opener", emit_weights(kOpener), 0);

  // Decision distribution: planted token drawn with correct_draw_prob, but
  // the argmax sits on a wrong branch so greedy decoding misses.
  std::vector<double> decide_w(kVocab, kNoiseFloor);
  decide_w[kCorrectFirst] = params.correct_draw_prob;
  decide_w[kWrongFirstA] = params.wrong_argmax_prob;
  decide_w[kWrongFirstB] =
      1.0 - params.correct_draw_prob - params.wrong_argmax_prob - (kVocab - 3) * kNoiseFloor;
  normalize(decide_w);
  const int decide = b.add("decide", std::move(decide_w), 0);

  const int c_body = add_chain(b, "c_body", params.body_tokens, params.sharp_lambda);
  const int c_body_last = static_cast<int>(b.spec.states.size()) - 1;
  const int w_body = add_chain(b, "w_body", params.body_tokens, params.flat_lambda);
  const int w_body_last = static_cast<int>(b.spec.states.size()) - 1;
  const int c_delim = b.add("c_delim", emit_weights(kDelim), 0);
  const int w_delim = b.add("w_delim", emit_weights(kDelim), 0);

  const int c_mid = add_chain(b, "c_mid", params.middle_tokens, params.sharp_lambda);
  const int c_mid_last = static_cast<int>(b.spec.states.size()) - 1;
  const int w_mid = add_chain(b, "w_mid", params.middle_tokens, params.flat_lambda);
  const int w_mid_last = static_cast<int>(b.spec.states.size()) - 1;
  const int c_mid_delim = b.add("c_mid_delim", emit_weights(kDelim), 0);
  const int w_mid_delim = b.add("w_mid_delim", emit_weights(kDelim), 0);

  const int c_ans = add_chain(b, "c_ans", params.answer_body_tokens, params.sharp_lambda);
  const int c_ans_last = static_cast<int>(b.spec.states.size()) - 1;
  const int w_ans = add_chain(b, "w_ans", params.answer_body_tokens, params.flat_lambda);
  const int w_ans_last = static_cast<int>(b.spec.states.size()) - 1;

  const int c_say = b.add("c_say", emit_weights(kSay), 0);
  const int c_box = b.add("c_box", emit_weights(kBoxA), 0);
  const int c_hope = b.add("c_hope", emit_weights(kHope), 0);
  const int w_say = b.add("w_say", emit_weights(kSay), 0);
  const int w_box = b.add("w_box", emit_weights(kBoxB), 0);
  const int w_hope = b.add("w_hope", emit_weights(kHope), 0);
  const int terminal = b.add("terminal", emit_weights(kEos), 0);

  point_to(b, begin, opener);
  point_to(b, opener, decide);
  point_to(b, decide, w_body);
  b.spec.states[static_cast<std::size_t>(decide)].next[kCorrectFirst] = c_body;
  point_to(b, c_body_last, c_delim);
  point_to(b, w_body_last, w_delim);
  point_to(b, c_delim, c_mid);
  point_to(b, w_delim, w_mid);
  point_to(b, c_mid_last, c_mid_delim);
  point_to(b, w_mid_last, w_mid_delim);
  point_to(b, c_mid_delim, c_ans);
  point_to(b, w_mid_delim, w_ans);
  point_to(b, c_ans_last, c_say);
  point_to(b, w_ans_last, w_say);
  point_to(b, c_say, c_box);
  point_to(b, c_box, c_hope);
  point_to(b, c_hope, terminal);
  point_to(b, w_say, w_box);
  point_to(b, w_box, w_hope);
  point_to(b, w_hope, terminal);
  point_to(b, terminal, terminal);

  b.spec.start_state = begin;
  b.spec.planted[decide] = kCorrectFirst;
  b.spec.validate();
  return b.spec;
}

SyntheticSpec make_script_spec(std::uint64_t seed) {
  SpecBuilder b;
  b.spec.vocab_size = kVocab;
  b.spec.eos_token = kEos;
  b.spec.begin_token = kBegin;
  b.spec.seed = seed;
  b.spec.branch_sharpness = 0.6;
  b.spec.token_text = builder_tokens("4", "7");

  const int begin = b.add("begin", emit_weights(kBegin), 0);
  const int opener = b.add("opener", emit_weights(kOpener), 0);
  const int body = add_chain(b, "body", 4, 0.6);
  const int body_last = static_cast<int>(b.spec.states.size()) - 1;
  const int delim = b.add("delim", emit_weights(kDelim), 0);
  const int mid = add_chain(b, "mid", 5, 0.6);
  const int mid_last = static_cast<int>(b.spec.states.size()) - 1;
  const int mid_delim = b.add("mid_delim", emit_weights(kDelim), 0);
  const int say = b.add("say", emit_weights(kSay), 0);
  const int box = b.add("box", emit_weights(kBoxA), 0);
  const int hope = b.add("hope", emit_weights(kHope), 0);
  const int terminal = b.add("terminal", emit_weights(kEos), 0);

  point_to(b, begin, opener);
  point_to(b, opener, body);
  point_to(b, body_last, delim);
  point_to(b, delim, mid);
  point_to(b, mid_last, mid_delim);
  point_to(b, mid_delim, say);
  point_to(b, say, box);
  point_to(b, box, hope);
  point_to(b, hope, terminal);
  point_to(b, terminal, terminal);

  b.spec.start_state = begin;
  b.spec.validate();
  return b.spec;
}

}  // namespace selfcert::lm
