#include "guardgate/paraphrase.hpp"

#include <cctype>
#include <sstream>

#include "guardgate/errors.hpp"
#include "guardgate/util.hpp"

namespace guardgate {

namespace {

bool is_core_char(char c) {
    unsigned char u = static_cast<unsigned char>(c);
    return std::isalnum(u) || c == '\'' || c == '-' || u >= 0x80;
}

std::string trim(std::string_view s) {
    std::size_t a = s.find_first_not_of(" \t");
    if (a == std::string_view::npos) return "";
    std::size_t b = s.find_last_not_of(" \t");
    return std::string(s.substr(a, b - a + 1));
}

}  // namespace

Lexicon Lexicon::parse(std::string_view text) {
    Lexicon lex;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        std::size_t colon = stripped.find(':');
        if (colon == std::string::npos) {
            throw ValidationError("lexicon line " + std::to_string(lineno) + ": missing ':'");
        }
        std::string word = util::to_lower_ascii(trim(stripped.substr(0, colon)));
        if (word.empty() || word.find(' ') != std::string::npos) {
            throw ValidationError("lexicon line " + std::to_string(lineno) +
                                  ": key must be a single token");
        }
        std::vector<std::string> syns;
        std::istringstream rest(stripped.substr(colon + 1));
        std::string syn;
        while (std::getline(rest, syn, ',')) {
            std::string s = trim(syn);
            if (!s.empty()) syns.push_back(s);
        }
        if (syns.empty()) {
            throw ValidationError("lexicon line " + std::to_string(lineno) + ": no synonyms");
        }
        if (syns.size() == 1 && util::to_lower_ascii(syns[0]) == word) {
            throw ValidationError("lexicon line " + std::to_string(lineno) +
                                  ": sole synonym equals the word");
        }
        lex.entries[word] = std::move(syns);
    }
    return lex;
}

Lexicon Lexicon::load(const std::string& path) {
    return parse(util::read_file(path));
}

std::string paraphrase(std::string_view text, const Lexicon& lexicon,
                       const ParaphraseConfig& config) {
    util::Rng rng(config.seed);
    std::string out;
    out.reserve(text.size());

    std::size_t i = 0;
    while (i < text.size()) {
        if (std::isspace(static_cast<unsigned char>(text[i]))) {
            out.push_back(text[i]);
            ++i;
            continue;
        }
        std::size_t tok_start = i;
        while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::string_view token = text.substr(tok_start, i - tok_start);

        std::size_t core_start = 0;
        while (core_start < token.size() && !is_core_char(token[core_start])) ++core_start;
        std::size_t core_end = token.size();
        while (core_end > core_start && !is_core_char(token[core_end - 1])) --core_end;
        std::string_view core = token.substr(core_start, core_end - core_start);

        if (core.empty()) {
            out.append(token);
            continue;
        }
        auto it = lexicon.entries.find(util::to_lower_ascii(core));
        if (it == lexicon.entries.end()) {
            out.append(token);
            continue;
        }
        // One draw per eligible token keeps output independent of whether the
        // substitution fires.
        double roll = rng.next_double();
        std::size_t pick = rng.next_index(it->second.size());
        if (roll >= config.substitution_rate) {
            out.append(token);
            continue;
        }
        std::string replacement = it->second[pick];
        if (!replacement.empty()) {
            unsigned char first = static_cast<unsigned char>(core[0]);
            if (std::isupper(first)) {
                replacement[0] =
                    static_cast<char>(std::toupper(static_cast<unsigned char>(replacement[0])));
            } else if (std::islower(first)) {
                replacement[0] =
                    static_cast<char>(std::tolower(static_cast<unsigned char>(replacement[0])));
            }
        }
        out.append(token.substr(0, core_start));
        out.append(replacement);
        out.append(token.substr(core_end));
    }
    return out;
}

BackTranslateResult back_translate(const std::string& text, TranslatorAdapter& translator,
                                   const std::string& pivot, bool fail_closed,
                                   const std::string& source_language) {
    try {
        std::string forward = translator.translate(text, source_language, pivot);
        std::string back = translator.translate(forward, pivot, source_language);
        return {back, false};
    } catch (const std::exception&) {
        if (fail_closed) throw;
        return {text, true};
    }
}

}  // namespace guardgate
