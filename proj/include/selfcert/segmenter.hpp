#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file segmenter.hpp
 * @brief Text-side plumbing of the step loop: splitting generations into
 *        reasoning steps at delimiter strings, extracting the final
 *        \boxed{...} answer, and normalizing answers for voting/scoring.
 *
 * Segmentation works on surface text, not token ids, so it is independent of
 * how any particular backend tokenizes a delimiter. Matching is leftmost;
 * when several delimiters start at the same position the longest wins.
 * Concatenating the returned segments always reproduces the input
 * byte-for-byte.
 */

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "selfcert/errors.hpp"

namespace selfcert::seg {

/// One segment of a generation. `delimiter` is set when the segment ends at a
/// configured delimiter (included in `text`); the trailing segment of an
/// input may have none.
struct TextSegment {
  std::string text;
  std::optional<std::string> delimiter;
};

/// The default step-delimiter list. Duplicate entries in a user-provided list
/// are dropped (first occurrence kept).
const std::vector<std::string>& default_delimiters();

std::vector<TextSegment> segment(std::string_view text,
                                 std::span<const std::string> delimiters);

/// Convenience: segment texts only.
std::vector<std::string> segment_texts(std::string_view text,
                                       std::span<const std::string> delimiters);

/// Result of scanning a text for \boxed{...} groups. `content` is the body of
/// the last brace-balanced group (nested braces allowed); `dangling_opens`
/// counts \boxed{ occurrences that never close (they yield no answer and are
/// tallied into run diagnostics).
struct BoxedScan {
  std::optional<std::string> content;
  int dangling_opens = 0;
};

BoxedScan scan_boxed(std::string_view text);

/// Content of the last balanced \boxed{...}, or nullopt.
std::optional<std::string> extract_boxed_answer(std::string_view text);

// ---------------------------------------------------------------------------
// Answer normalization
// ---------------------------------------------------------------------------

enum class AnswerKind { integer, rational, decimal, expression };

/// Decimal-comma handling: Danish answers write 3,5 for 3.5 and 1.000 for
/// one thousand.
enum class NumberLocale { english, danish };

/// A final answer in raw and canonical form. canonical is deterministic and
/// idempotent: normalizing it again returns it unchanged.
struct AnswerForm {
  std::string raw;
  std::string canonical;
  AnswerKind kind = AnswerKind::expression;
};

/**
 * Canonicalizes an answer string. Strips surrounding whitespace/'$'/trailing
 * periods and thousands separators; exact numeric forms (integers, a/b,
 * \frac{a}{b}, finite decimals) reduce to a canonical rational "p/q" (or a
 * bare integer). Decimals too long for exact 64-bit conversion keep a
 * normalized decimal string (kind decimal); everything else collapses to
 * whitespace-normalized text (kind expression).
 */
AnswerForm normalize_answer(std::string_view raw, NumberLocale locale = NumberLocale::english);

/// Equality of canonical forms. Exact; no floating tolerance and no symbolic
/// algebra ("x+1" != "1+x").
bool answers_equal(const AnswerForm& a, const AnswerForm& b);

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

enum class Language { english, danish };

const char* language_name(Language lang);

/// Parses "english"/"danish"; throws Errc::unknown_language otherwise.
Language parse_language(std::string_view name);

NumberLocale locale_for(Language lang);

/// The built-in system prompt template for a language. data/prompts/ ships
/// the same text as files; the two are byte-identical.
std::string_view prompt_template(Language lang);

/// Template followed by a blank line and the question.
/// Throws Errc::empty_question on an empty question.
std::string render_prompt(std::string_view question, Language lang);

/// Same, with a caller-supplied template (e.g. loaded from a prompts dir).
std::string render_prompt(std::string_view question, std::string_view template_text);

}  // namespace selfcert::seg
