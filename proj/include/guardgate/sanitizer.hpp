#pragma once

#include <cstddef>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include "guardgate/errors.hpp"

namespace guardgate {

struct RawPrompt {
    std::string text;
    std::string source_id;
};

struct CompiledPattern {
    std::string name;  // the raw pattern line, used as the rule name
    std::regex re;
};

// Rules file format: UTF-8 text, one pattern per line, '#' lines are
// comments. Patterns are case-insensitive literals; '*' is a lazy
// any-characters wildcard.
struct RuleSet {
    std::vector<CompiledPattern> patterns;
    bool strip_urls = true;
    std::size_t max_input_chars = 8192;
    int max_rescan_depth = 3;
    std::size_t payload_min_len = 8;   // hex and unicode-escape candidates
    std::size_t base64_min_len = 16;   // stricter floor bounds false positives
    double printable_ratio = 0.75;

    static RuleSet defaults();
    static RuleSet load(const std::string& path);
    static CompiledPattern compile_pattern(const std::string& raw);  // throws PatternCompileError
};

// One removed range. start/end index the text as it stood at the beginning
// of `round`; round-1 spans index the normalized input directly. Replaying
// rounds from last to first reinserts every original_text exactly.
struct RemovedSpan {
    std::size_t start = 0;
    std::size_t end = 0;
    std::string rule;
    std::string original;
    int round = 1;
};

struct DecodedPayload {
    std::string encoding;  // "base64" | "hex" | "unicode-escape"
    std::string decoded;
    std::string action;    // "removed" for text spans, "logged-nested" inside payloads
};

struct SanitizationReport {
    std::vector<RemovedSpan> removed_spans;
    std::vector<DecodedPayload> decoded_payloads;
    int rounds = 0;
};

struct SanitizedPrompt {
    std::string text;
    SanitizationReport report;
};

struct PayloadFinding {
    std::string encoding;
    std::size_t start = 0;
    std::size_t end = 0;
    std::string decoded;
};

struct PatternHit {
    std::string rule;
    std::string removed;
    std::size_t position = 0;
};

struct StripResult {
    std::string text;
    std::vector<PatternHit> hits;
};

// Detects decodable payloads: hex runs, Base64 runs, and whitespace-delimited
// tokens carrying \uXXXX escapes. Spans shorter than min_len are never
// returned; Base64 candidates additionally need >= 16 chars and length % 4 == 0.
// min_len must be >= 8.
std::vector<PayloadFinding> detect_encoded_payloads(std::string_view text, std::size_t min_len);

// Removes every pattern match, re-scanning up to max_rounds times so that
// removals which expose new matches are caught too.
StripResult strip_jailbreak_patterns(std::string_view text,
                                     const std::vector<CompiledPattern>& patterns,
                                     int max_rounds = 3);

// Normalization applied before any rule runs: validates UTF-8, deletes
// non-printable codepoints (Cc/Cf except \n and \t), collapses all whitespace
// to single spaces, trims. This is the text the round-1 spans index.
std::string normalize_prompt_text(std::string_view text);

SanitizedPrompt sanitize(const RawPrompt& raw, const RuleSet& rules);

// Inverts sanitize: final text + removed spans -> normalized input.
std::string reassemble(std::string_view sanitized_text, const std::vector<RemovedSpan>& spans);

bool contains_url(std::string_view text);

std::string sanitized_to_json(const SanitizedPrompt& sp);

}  // namespace guardgate
