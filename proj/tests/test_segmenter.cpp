// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "selfcert/segmenter.hpp"
#include "support/reference.hpp"

using namespace selfcert;
using namespace selfcert::seg;

namespace {

std::string concat(const std::vector<TextSegment>& segs) {
  std::string out;
  for (const auto& s : segs) out += s.text;
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("default delimiter list is deduplicated and ordered") {
  const auto& d = default_delimiters();
  CHECK(d.size() == 9);
  CHECK(d[0] == "<think>");
  CHECK(d[1] == "</think>");
  CHECK(d[2] == ".\n\n");
  CHECK(d[3] == "\n\n");
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = i + 1; j < d.size(); ++j) CHECK(d[i] != d[j]);
  }
}

TEST_CASE("segmenting splits at delimiters and keeps them") {
  const std::string text = "## Step 1: compute.\n\n## Step 2: done.";
  const auto segs = segment(text, default_delimiters());
  REQUIRE(segs.size() == 2);
  CHECK(segs[0].text == "## Step 1: compute.\n\n");
  CHECK(segs[0].delimiter == ".\n\n");
  CHECK(segs[1].text == "## Step 2: done.");
  CHECK_FALSE(segs[1].delimiter.has_value());
  CHECK(concat(segs) == text);
}

TEST_CASE("degenerate segmentation inputs") {
  CHECK(segment("", default_delimiters()).empty());
  const auto segs = segment("abc", default_delimiters());
  REQUIRE(segs.size() == 1);
  CHECK(segs[0].text == "abc");
  CHECK_FALSE(segs[0].delimiter.has_value());
}

TEST_CASE("longest delimiter wins at a shared boundary") {
  // ".\n\n" and "\n\n" complete at the same byte; the longer one is the
  // recorded terminator.
  const auto segs = segment("a.\n\nb", default_delimiters());
  REQUIRE(segs.size() == 2);
  CHECK(segs[0].text == "a.\n\n");
  CHECK(segs[0].delimiter == ".\n\n");

  const auto colon = segment("x):\n\ny", default_delimiters());
  REQUIRE(colon.size() == 2);
  CHECK(colon[0].delimiter == "):\n\n");

  // bare double newline still matches on its own
  const auto bare = segment("a\n\nb", default_delimiters());
  REQUIRE(bare.size() == 2);
  CHECK(bare[0].delimiter == "\n\n");
}

TEST_CASE("think tags segment") {
  const auto segs = segment("<think>plan</think>go", default_delimiters());
  REQUIRE(segs.size() == 3);
  CHECK(segs[0].text == "<think>");
  CHECK(segs[1].text == "plan</think>");
  CHECK(segs[2].text == "go");
}

TEST_CASE("round-trip over fuzzed delimiter soup") {
  std::mt19937_64 rng(555);
  const auto& delims = default_delimiters();
  const std::string alphabet = "ab.)]:\n<>/ік";
  for (int trial = 0; trial < 2000; ++trial) {
    std::string text;
    const int pieces = static_cast<int>(rng() % 12);
    for (int i = 0; i < pieces; ++i) {
      if (rng() % 2 == 0) {
        text += delims[rng() % delims.size()];
      } else {
        const int len = static_cast<int>(rng() % 6);
        for (int c = 0; c < len; ++c) text += alphabet[rng() % alphabet.size()];
      }
    }
    const auto segs = segment(text, delims);
    CHECK(concat(segs) == text);
    for (std::size_t i = 0; i + 1 < segs.size(); ++i) {
      REQUIRE(segs[i].delimiter.has_value());
      CHECK(segs[i].text.ends_with(*segs[i].delimiter));
    }
  }
}

TEST_CASE("boxed answers extract with balanced braces, last wins") {
  CHECK(extract_boxed_answer(
            "Therefore, the final answer is: \\boxed{42}. I hope it is correct.") == "42");
  CHECK(extract_boxed_answer("\\boxed{\\frac{1}{2}}") == "\\frac{1}{2}");
  CHECK(extract_boxed_answer("first \\boxed{3}, revised \\boxed{5}") == "5");
  CHECK_FALSE(extract_boxed_answer("no answer here").has_value());
  CHECK(extract_boxed_answer("\\boxed{}") == "");
}

TEST_CASE("dangling boxed groups yield no answer and are counted") {
  const auto scan = scan_boxed("start \\boxed{unclosed");
  CHECK_FALSE(scan.content.has_value());
  CHECK(scan.dangling_opens == 1);

  // a later dangling group does not erase an earlier complete one
  const auto mixed = scan_boxed("\\boxed{7} then \\boxed{oops");
  CHECK(mixed.content == "7");
  CHECK(mixed.dangling_opens == 1);
}

TEST_CASE("extraction is total over arbitrary bytes") {
  std::mt19937_64 rng(808);
  for (int trial = 0; trial < 2000; ++trial) {
    std::string junk;
    const int len = static_cast<int>(rng() % 40);
    for (int i = 0; i < len; ++i) junk.push_back(static_cast<char>(rng() % 256));
    if (rng() % 3 == 0) junk.insert(junk.size() / 2, "\\boxed{");
    if (rng() % 3 == 0) junk += "}";
    CHECK_NOTHROW(scan_boxed(junk));
  }
}

TEST_CASE("normalization produces canonical numeric forms") {
  auto n = [](std::string_view s) { return normalize_answer(s); };

  CHECK(n("1,000").canonical == "1000");
  CHECK(n("1,000").kind == AnswerKind::integer);
  CHECK(n("\\frac{1}{2}").canonical == "1/2");
  CHECK(n("\\frac{1}{2}").kind == AnswerKind::rational);
  CHECK(n(" 0.50 ").canonical == "1/2");
  CHECK(n(" 0.50 ").kind == AnswerKind::rational);
  CHECK(n("$42.$").canonical == "42");
  CHECK(n("007").canonical == "7");
  CHECK(n("-0").canonical == "0");
  CHECK(n("2/4").canonical == "1/2");
  CHECK(n("-6/4").canonical == "-3/2");
  CHECK(n("\\frac{-3}{-6}").canonical == "1/2");
  CHECK(n("8/4").canonical == "2");
  CHECK(n("8/4").kind == AnswerKind::integer);
  CHECK(n("x+1").kind == AnswerKind::expression);
  CHECK(n("  x   +  1 ").canonical == "x + 1");
}

TEST_CASE("danish locale reads decimal commas and dot grouping") {
  auto da = [](std::string_view s) { return normalize_answer(s, NumberLocale::danish); };
  CHECK(da("3,5").canonical == "7/2");
  CHECK(da("3,5").kind == AnswerKind::rational);
  CHECK(da("1.000").canonical == "1000");
  CHECK(da("1.000").kind == AnswerKind::integer);
  CHECK(da("2,50").canonical == "5/2");

  // english reads the same bytes differently
  CHECK(normalize_answer("1.000").canonical == "1");
}

TEST_CASE("normalization agrees with the independent fraction oracle") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 500; ++trial) {
    const long long num = static_cast<long long>(rng() % 2000) - 1000;
    const long long den = 1 + static_cast<long long>(rng() % 999);
    const std::string raw = std::to_string(num) + "/" + std::to_string(den);
    CHECK(normalize_answer(raw).canonical == testref::reduced_fraction(num, den));
  }
}

TEST_CASE("normalization is idempotent") {
  std::mt19937_64 rng(1312);
  const std::string alphabet = "0123456789./-+,$x \\{}()";
  auto check_idempotent = [](const std::string& s) {
    const AnswerForm once = normalize_answer(s);
    const AnswerForm twice = normalize_answer(once.canonical);
    CHECK(twice.canonical == once.canonical);
    CHECK(twice.kind == once.kind);
  };
  for (int trial = 0; trial < 3000; ++trial) {
    std::string s;
    const int len = static_cast<int>(rng() % 14);
    for (int i = 0; i < len; ++i) s.push_back(alphabet[rng() % alphabet.size()]);
    check_idempotent(s);
  }
  // oversized decimals keep a normalized decimal form
  const AnswerForm big = normalize_answer("0.1234567890123456789012345");
  CHECK(big.kind == AnswerKind::decimal);
  check_idempotent(big.raw);
}

TEST_CASE("answer equality is canonical and exact") {
  auto eq = [](std::string_view a, std::string_view b) {
    return answers_equal(normalize_answer(a), normalize_answer(b));
  };
  CHECK(eq("0.5", "\\frac{1}{2}"));
  CHECK(eq("7", "7"));
  CHECK(eq("7.", " $7$ "));
  CHECK_FALSE(eq("x+1", "1+x"));
  CHECK_FALSE(eq("0.5", "0.51"));
  CHECK(eq("\\frac{2}{4}", "0.50"));
}

TEST_CASE("prompts render verbatim templates") {
  const std::string en = render_prompt("2+2?", Language::english);
  CHECK(en.starts_with("Solve the following math problem"));
  CHECK(en.ends_with("2+2?"));
  CHECK(en.find("\\boxed{answer}") != std::string::npos);

  const std::string da = render_prompt("2+2?", Language::danish);
  CHECK(da.starts_with("Løs følgende matematiske problem"));
  CHECK(da.find("\\boxed{answer}") != std::string::npos);

  try {
    render_prompt("", Language::english);
    FAIL("expected EmptyQuestion");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::empty_question);
  }
  CHECK_THROWS_AS(parse_language("klingon"), Error);
}

TEST_CASE("embedded templates match the shipped data files byte for byte") {
  const std::string dir = std::string(SELFCERT_DATA_DIR) + "/prompts/";
  CHECK(std::string(prompt_template(Language::english)) == read_file(dir + "english.txt"));
  CHECK(std::string(prompt_template(Language::danish)) == read_file(dir + "danish.txt"));
}
