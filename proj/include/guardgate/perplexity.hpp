#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace guardgate {

// Character-level add-alpha n-gram model over Unicode codepoints. Symbols
// unseen in training score as a shared <unk>; vocab_size counts it, so the
// distribution from any context sums to 1.
class NgramModel {
public:
    static constexpr char32_t kUnk = 0xfffd;

    // corpus total length >= 1000 chars, order in [2,5], alpha > 0.
    static NgramModel train(const std::vector<std::string>& corpus, int order, double alpha);

    double probability(const std::u32string& context, char32_t symbol) const;

    // exp(-(1/N) sum log p(symbol|context)); text must have >= order chars.
    double perplexity(const std::string& text) const;

    // Max perplexity over the training corpus; the operating threshold should
    // come from here rather than a fixed constant.
    double calibrate() const;

    int order() const { return order_; }
    double alpha() const { return alpha_; }
    std::size_t vocab_size() const { return vocab_.size(); }

    std::string to_json() const;
    static NgramModel from_json(const std::string& json_text);
    static NgramModel load(const std::string& path);
    void save(const std::string& path) const;

private:
    int order_ = 3;
    double alpha_ = 0.01;
    std::vector<char32_t> vocab_;  // sorted, includes kUnk
    std::map<std::u32string, std::map<char32_t, std::uint64_t>> counts_;
    std::map<std::u32string, std::uint64_t> context_totals_;
    std::vector<std::string> training_corpus_;  // kept for calibrate()

    char32_t map_symbol(char32_t cp) const;
};

struct PerplexityVerdict {
    double ppl = 1.0;
    double threshold = 0.0;
    bool flagged = false;  // ppl > threshold, strictly
};

PerplexityVerdict flag(double ppl, double threshold);

}  // namespace guardgate
