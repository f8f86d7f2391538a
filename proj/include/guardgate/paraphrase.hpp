#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace guardgate {

// Lexicon file format: UTF-8, lines of `word: syn1, syn2, ...`, '#' comments.
// Keys are lowercased single tokens.
struct Lexicon {
    std::map<std::string, std::vector<std::string>> entries;

    static Lexicon load(const std::string& path);
    static Lexicon parse(std::string_view text);
    bool empty() const { return entries.empty(); }
};

struct ParaphraseConfig {
    std::uint64_t seed = 0;
    double substitution_rate = 0.3;
    std::optional<std::string> pivot_language;
};

// Seeded synonym substitution. Tokens split on whitespace; a token's word
// core (leading/trailing punctuation stripped) is looked up lowercase in the
// lexicon and replaced with probability substitution_rate. Token count and
// punctuation are preserved; the first letter keeps its original casing.
std::string paraphrase(std::string_view text, const Lexicon& lexicon,
                       const ParaphraseConfig& config);

class TranslatorAdapter {
public:
    virtual ~TranslatorAdapter() = default;
    // Throws on failure (timeout, unreachable).
    virtual std::string translate(const std::string& text, const std::string& from,
                                  const std::string& to) = 0;
};

struct BackTranslateResult {
    std::string text;
    bool degraded = false;  // adapter failed and the input was passed through
};

// source -> pivot -> source. Fail-open by default: adapter failures return
// the input unchanged with degraded=true. With fail_closed the adapter error
// propagates.
BackTranslateResult back_translate(const std::string& text, TranslatorAdapter& translator,
                                   const std::string& pivot, bool fail_closed = false,
                                   const std::string& source_language = "en");

}  // namespace guardgate
