// SPDX-License-Identifier: Apache-2.0

#include "selfcert/segmenter.hpp"

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <numeric>

namespace selfcert::seg {

namespace {

constexpr std::string_view kEnglishTemplate =
    R"(Solve the following math problem efficiently and clearly:

- For simple problems (2 steps or fewer):
Provide a concise solution with minimal explanation.

- For complex problems (3 steps or more):
Use this step-by-step format:

## Step 1: [Concise description]
[Brief explanation and calculations]

## Step 2: [Concise description]
[Brief explanation and calculations]

...

Regardless of the approach, always conclude with:

Therefore, the final answer is: \boxed{answer}. I hope it is correct.

Where [answer] is just the final number or expression that solves the problem.
)";

constexpr std::string_view kDanishTemplate =
    R"(Løs følgende matematiske problem effektivt og tydeligt:

- For nemme problemer (2 trin eller færre):
Giv en præcis løsning med minimal forklaring.

- For komplekse problemer (3 trin eller mere):
Brug dette trinvise format:

## Trin 1: [Koncis beskrivelse]
[Kort forklaring og beregninger]

## Trin 2: [Koncis beskrivelse]
[Kort forklaring og beregninger]

...

Uanset fremgangsmåde, afslut altid med:

Derfor er det endelige svar: \boxed{answer}. Jeg håber, det er korrekt.

Hvor [answer] er blot det endelige tal eller udtryk, der løser problemet.
)";

std::vector<std::string> dedup(std::span<const std::string> delimiters) {
  std::vector<std::string> out;
  out.reserve(delimiters.size());
  for (const auto& d : delimiters) {
    if (d.empty()) continue;
    if (std::find(out.begin(), out.end(), d) == out.end()) {
      out.push_back(d);
    }
  }
  return out;
}

}  // namespace

const std::vector<std::string>& default_delimiters() {
  static const std::vector<std::string> kDelims = {
      "<think>", "</think>", ".\n\n", "\n\n", ":\n\n",
      "]\n\n",   ")\n\n",    ").\n\n", "):\n\n",
  };
  return kDelims;
}

std::vector<TextSegment> segment(std::string_view text,
                                 std::span<const std::string> delimiters) {
  std::vector<TextSegment> out;
  if (text.empty()) return out;

  const std::vector<std::string> delims = dedup(delimiters);
  std::size_t seg_start = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    // Longest delimiter starting at i, if any.
    const std::string* hit = nullptr;
    for (const auto& d : delims) {
      if (text.compare(i, d.size(), d) == 0) {
        if (hit == nullptr || d.size() > hit->size()) hit = &d;
      }
    }
    if (hit != nullptr) {
      const std::size_t end = i + hit->size();
      out.push_back({std::string(text.substr(seg_start, end - seg_start)), *hit});
      seg_start = end;
      i = end;
    } else {
      ++i;
    }
  }
  if (seg_start < text.size()) {
    out.push_back({std::string(text.substr(seg_start)), std::nullopt});
  }
  return out;
}

std::vector<std::string> segment_texts(std::string_view text,
                                       std::span<const std::string> delimiters) {
  std::vector<std::string> out;
  for (auto& s : segment(text, delimiters)) {
    out.push_back(std::move(s.text));
  }
  return out;
}

BoxedScan scan_boxed(std::string_view text) {
  static constexpr std::string_view kOpen = "\\boxed{";
  BoxedScan scan;
  std::size_t pos = 0;
  while (true) {
    const std::size_t at = text.find(kOpen, pos);
    if (at == std::string_view::npos) break;
    std::size_t i = at + kOpen.size();
    int depth = 1;
    while (i < text.size() && depth > 0) {
      if (text[i] == '{') {
        ++depth;
      } else if (text[i] == '}') {
        --depth;
      }
      ++i;
    }
    if (depth == 0) {
      scan.content = std::string(text.substr(at + kOpen.size(), i - 1 - (at + kOpen.size())));
    } else {
      ++scan.dangling_opens;
    }
    pos = at + kOpen.size();
  }
  return scan;
}

std::optional<std::string> extract_boxed_answer(std::string_view text) {
  return scan_boxed(text).content;
}

// ---------------------------------------------------------------------------
// Answer normalization
// ---------------------------------------------------------------------------

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
bool is_digit(char c) { return c >= '0' && c <= '9'; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

std::string collapse_whitespace(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool in_space = false;
  for (char c : s) {
    if (is_space(c)) {
      in_space = true;
      continue;
    }
    if (in_space && !out.empty()) out.push_back(' ');
    in_space = false;
    out.push_back(c);
  }
  return out;
}

// Digits of an integer literal, accepting an optional strict grouping with
// `sep` ("1,234,567"). Returns digits only (no sign, no separators), or empty
// when the text is not an integer literal.
std::string integer_digits(std::string_view s, char sep) {
  if (s.empty()) return {};
  if (s.find(sep) == std::string_view::npos) {
    for (char c : s) {
      if (!is_digit(c)) return {};
    }
    return std::string(s);
  }
  // Grouped form: 1-3 digits, then (sep + exactly 3 digits) repeated.
  std::string digits;
  std::size_t i = 0;
  while (i < s.size() && i < 3 && is_digit(s[i])) {
    digits.push_back(s[i]);
    ++i;
  }
  if (digits.empty()) return {};
  while (i < s.size()) {
    if (s[i] != sep || i + 4 > s.size()) return {};
    for (std::size_t j = i + 1; j <= i + 3; ++j) {
      if (!is_digit(s[j])) return {};
    }
    digits.append(s.substr(i + 1, 3));
    i += 4;
  }
  return digits;
}

std::string strip_leading_zeros(std::string_view digits) {
  std::size_t i = 0;
  while (i + 1 < digits.size() && digits[i] == '0') ++i;
  return std::string(digits.substr(i));
}

struct ParsedSign {
  bool negative = false;
  std::string_view rest;
};

ParsedSign take_sign(std::string_view s) {
  ParsedSign p{false, s};
  if (!s.empty() && (s.front() == '-' || s.front() == '+')) {
    p.negative = s.front() == '-';
    p.rest = s.substr(1);
  }
  return p;
}

constexpr int kMaxExactDigits = 18;  // fits in int64

bool to_int64(std::string_view digits, std::int64_t& out) {
  if (digits.empty() || digits.size() > kMaxExactDigits) return false;
  std::int64_t v = 0;
  for (char c : digits) {
    v = v * 10 + (c - '0');
  }
  out = v;
  return true;
}

std::string rational_canonical(bool negative, std::int64_t num, std::int64_t den) {
  // den > 0 on entry; reduce and fold the sign into the numerator.
  const std::int64_t g = std::gcd(num, den);
  if (g > 1) {
    num /= g;
    den /= g;
  }
  std::string out;
  if (negative && num != 0) out.push_back('-');
  out += std::to_string(num);
  if (den != 1) {
    out.push_back('/');
    out += std::to_string(den);
  }
  return out;
}

struct NumericResult {
  bool ok = false;
  std::string canonical;
  AnswerKind kind = AnswerKind::expression;
};

NumericResult parse_integer(std::string_view s, char group_sep) {
  NumericResult r;
  const auto sign = take_sign(s);
  const std::string digits = integer_digits(sign.rest, group_sep);
  if (digits.empty()) return r;
  const std::string canon = strip_leading_zeros(digits);
  r.ok = true;
  r.kind = AnswerKind::integer;
  r.canonical = (sign.negative && canon != "0") ? "-" + canon : canon;
  return r;
}

NumericResult parse_decimal(std::string_view s, char point, char group_sep) {
  NumericResult r;
  const auto sign = take_sign(s);
  const std::size_t dot = sign.rest.find(point);
  if (dot == std::string_view::npos) return r;
  const std::string_view int_part = sign.rest.substr(0, dot);
  const std::string_view frac_part = sign.rest.substr(dot + 1);
  if (frac_part.empty()) return r;
  for (char c : frac_part) {
    if (!is_digit(c)) return r;
  }
  std::string int_digits_str = int_part.empty() ? std::string("0") : integer_digits(int_part, group_sep);
  if (int_digits_str.empty()) return r;

  // Exact conversion: int_digits.frac -> (int_digits*10^f + frac) / 10^f.
  const std::string all = strip_leading_zeros(int_digits_str + std::string(frac_part));
  std::int64_t num = 0;
  if (all.size() <= kMaxExactDigits && frac_part.size() <= kMaxExactDigits &&
      to_int64(all, num)) {
    std::int64_t den = 1;
    for (std::size_t i = 0; i < frac_part.size(); ++i) den *= 10;
    r.ok = true;
    r.canonical = rational_canonical(sign.negative, num, den);
    r.kind = r.canonical.find('/') == std::string::npos ? AnswerKind::integer
                                                        : AnswerKind::rational;
    return r;
  }

  // Too long for exact reduction: keep a normalized decimal string.
  std::string frac(frac_part);
  while (!frac.empty() && frac.back() == '0') frac.pop_back();
  std::string canon = strip_leading_zeros(int_digits_str);
  if (!frac.empty()) {
    canon.push_back('.');
    canon += frac;
  }
  r.ok = true;
  r.kind = frac.empty() ? AnswerKind::integer : AnswerKind::decimal;
  r.canonical = (sign.negative && canon != "0") ? "-" + canon : canon;
  return r;
}

NumericResult parse_fraction_parts(std::string_view a, std::string_view b) {
  NumericResult r;
  const auto sa = take_sign(trim(a));
  const auto sb = take_sign(trim(b));
  if (sa.rest.empty() || sb.rest.empty()) return r;
  for (char c : sa.rest) {
    if (!is_digit(c)) return r;
  }
  for (char c : sb.rest) {
    if (!is_digit(c)) return r;
  }
  std::int64_t num = 0;
  std::int64_t den = 0;
  if (!to_int64(strip_leading_zeros(sa.rest), num) ||
      !to_int64(strip_leading_zeros(sb.rest), den) || den == 0) {
    return r;
  }
  r.ok = true;
  r.canonical = rational_canonical(sa.negative != sb.negative, num, den);
  r.kind = r.canonical.find('/') == std::string::npos ? AnswerKind::integer
                                                      : AnswerKind::rational;
  return r;
}

NumericResult parse_slash_fraction(std::string_view s) {
  const std::size_t slash = s.find('/');
  if (slash == std::string_view::npos || s.find('/', slash + 1) != std::string_view::npos) {
    return {};
  }
  return parse_fraction_parts(s.substr(0, slash), s.substr(slash + 1));
}

// \frac{a}{b}, \dfrac{a}{b}, \tfrac{a}{b}
NumericResult parse_latex_fraction(std::string_view s) {
  for (std::string_view head : {"\\frac", "\\dfrac", "\\tfrac"}) {
    if (s.substr(0, head.size()) != head) continue;
    std::string_view rest = trim(s.substr(head.size()));
    if (rest.empty() || rest.front() != '{') continue;
    const std::size_t close_a = rest.find('}');
    if (close_a == std::string_view::npos) continue;
    std::string_view a = rest.substr(1, close_a - 1);
    std::string_view tail = trim(rest.substr(close_a + 1));
    if (tail.empty() || tail.front() != '{' || tail.back() != '}') continue;
    if (tail.find('}') != tail.size() - 1) continue;
    std::string_view b = tail.substr(1, tail.size() - 2);
    return parse_fraction_parts(a, b);
  }
  return {};
}

}  // namespace

AnswerForm normalize_answer(std::string_view raw, NumberLocale locale) {
  AnswerForm form;
  form.raw = std::string(raw);

  // Affix stripping runs to a fixpoint so the canonical form re-normalizes to
  // itself ("$7.$." needs several rounds).
  std::string_view s = trim(raw);
  while (true) {
    const std::string_view before = s;
    while (!s.empty() && s.front() == '$') s.remove_prefix(1);
    while (!s.empty() && s.back() == '$') s.remove_suffix(1);
    while (!s.empty() && s.back() == '.') s.remove_suffix(1);
    s = trim(s);
    if (s == before) break;
  }

  const char group_sep = locale == NumberLocale::danish ? '.' : ',';
  const char point = locale == NumberLocale::danish ? ',' : '.';

  for (const NumericResult& r :
       {parse_latex_fraction(s), parse_slash_fraction(s), parse_integer(s, group_sep),
        parse_decimal(s, point, group_sep)}) {
    if (r.ok) {
      form.canonical = r.canonical;
      form.kind = r.kind;
      return form;
    }
  }

  form.canonical = collapse_whitespace(s);
  form.kind = AnswerKind::expression;
  return form;
}

bool answers_equal(const AnswerForm& a, const AnswerForm& b) {
  return a.canonical == b.canonical;
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

const char* language_name(Language lang) {
  return lang == Language::danish ? "danish" : "english";
}

Language parse_language(std::string_view name) {
  if (name == "english") return Language::english;
  if (name == "danish") return Language::danish;
  throw Error(Errc::unknown_language, std::string(name));
}

NumberLocale locale_for(Language lang) {
  return lang == Language::danish ? NumberLocale::danish : NumberLocale::english;
}

std::string_view prompt_template(Language lang) {
  switch (lang) {
    case Language::english: return kEnglishTemplate;
    case Language::danish: return kDanishTemplate;
  }
  throw Error(Errc::unknown_language, "unmapped language value");
}

std::string render_prompt(std::string_view question, Language lang) {
  return render_prompt(question, prompt_template(lang));
}

std::string render_prompt(std::string_view question, std::string_view template_text) {
  if (trim(question).empty()) {
    throw Error(Errc::empty_question, "question must be non-empty");
  }
  std::string out;
  out.reserve(template_text.size() + question.size() + 2);
  out += template_text;
  out += "\n";
  out += question;
  return out;
}

}  // namespace selfcert::seg
