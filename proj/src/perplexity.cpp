#include "guardgate/perplexity.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "guardgate/errors.hpp"
#include "guardgate/util.hpp"

namespace guardgate {

namespace {

std::u32string decode_utf32(const std::string& text) {
    std::u32string out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto cp = util::utf8_next(text, pos);
        if (!cp) throw InvalidEncoding("text is not valid UTF-8");
        out.push_back(*cp);
    }
    return out;
}

std::string encode_utf8(const std::u32string& text) {
    std::string out;
    for (char32_t cp : text) util::utf8_append(out, cp);
    return out;
}

}  // namespace

char32_t NgramModel::map_symbol(char32_t cp) const {
    return std::binary_search(vocab_.begin(), vocab_.end(), cp) ? cp : kUnk;
}

NgramModel NgramModel::train(const std::vector<std::string>& corpus, int order, double alpha) {
    if (order < 2 || order > 5) throw ValidationError("ngram order must be in [2,5]");
    if (alpha <= 0.0) throw ValidationError("smoothing alpha must be > 0");

    std::vector<std::u32string> texts;
    std::size_t total = 0;
    for (const auto& s : corpus) {
        texts.push_back(decode_utf32(s));
        total += texts.back().size();
    }
    if (total < 1000) {
        throw CorpusTooSmall("training corpus has " + std::to_string(total) +
                             " chars, need >= 1000");
    }

    NgramModel m;
    m.order_ = order;
    m.alpha_ = alpha;
    m.training_corpus_ = corpus;

    std::set<char32_t> symbols;
    for (const auto& t : texts) symbols.insert(t.begin(), t.end());
    symbols.insert(kUnk);
    m.vocab_.assign(symbols.begin(), symbols.end());

    std::size_t ctx_len = static_cast<std::size_t>(order - 1);
    for (const auto& t : texts) {
        if (t.size() < static_cast<std::size_t>(order)) continue;
        for (std::size_t i = ctx_len; i < t.size(); ++i) {
            std::u32string ctx = t.substr(i - ctx_len, ctx_len);
            ++m.counts_[ctx][t[i]];
            ++m.context_totals_[ctx];
        }
    }
    return m;
}

double NgramModel::probability(const std::u32string& context, char32_t symbol) const {
    std::u32string ctx;
    ctx.reserve(context.size());
    for (char32_t cp : context) ctx.push_back(map_symbol(cp));
    char32_t sym = map_symbol(symbol);

    std::uint64_t ctx_total = 0;
    std::uint64_t sym_count = 0;
    if (auto it = context_totals_.find(ctx); it != context_totals_.end()) {
        ctx_total = it->second;
        const auto& row = counts_.at(ctx);
        if (auto jt = row.find(sym); jt != row.end()) sym_count = jt->second;
    }
    double v = static_cast<double>(vocab_.size());
    return (static_cast<double>(sym_count) + alpha_) /
           (static_cast<double>(ctx_total) + alpha_ * v);
}

double NgramModel::perplexity(const std::string& text) const {
    std::u32string t = decode_utf32(text);
    std::size_t ctx_len = static_cast<std::size_t>(order_ - 1);
    if (t.size() < static_cast<std::size_t>(order_)) {
        throw TextTooShort("text shorter than ngram order");
    }
    double log_sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = ctx_len; i < t.size(); ++i) {
        log_sum += std::log(probability(t.substr(i - ctx_len, ctx_len), t[i]));
        ++n;
    }
    return std::exp(-log_sum / static_cast<double>(n));
}

double NgramModel::calibrate() const {
    double max_ppl = 1.0;
    for (const auto& s : training_corpus_) {
        std::u32string t = decode_utf32(s);
        if (t.size() < static_cast<std::size_t>(order_)) continue;
        max_ppl = std::max(max_ppl, perplexity(s));
    }
    return max_ppl;
}

std::string NgramModel::to_json() const {
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [ctx, row] : counts_) {
        nlohmann::json jrow = nlohmann::json::object();
        for (const auto& [sym, count] : row) {
            jrow[encode_utf8(std::u32string(1, sym))] = count;
        }
        counts[encode_utf8(ctx)] = std::move(jrow);
    }
    nlohmann::json j = {{"order", order_},
                        {"alpha", alpha_},
                        {"vocab", nlohmann::json::array()},
                        {"counts", std::move(counts)},
                        {"training_corpus", training_corpus_}};
    for (char32_t cp : vocab_) j["vocab"].push_back(static_cast<std::uint32_t>(cp));
    return j.dump();
}

NgramModel NgramModel::from_json(const std::string& json_text) {
    NgramModel m;
    try {
        auto j = nlohmann::json::parse(json_text);
        m.order_ = j.at("order").get<int>();
        m.alpha_ = j.at("alpha").get<double>();
        for (const auto& cp : j.at("vocab")) {
            m.vocab_.push_back(static_cast<char32_t>(cp.get<std::uint32_t>()));
        }
        std::sort(m.vocab_.begin(), m.vocab_.end());
        for (const auto& [ctx_utf8, row] : j.at("counts").items()) {
            std::u32string ctx = decode_utf32(ctx_utf8);
            for (const auto& [sym_utf8, count] : row.items()) {
                std::u32string sym = decode_utf32(sym_utf8);
                if (sym.size() != 1) throw ValidationError("bad symbol key in model json");
                m.counts_[ctx][sym[0]] = count.get<std::uint64_t>();
                m.context_totals_[ctx] += count.get<std::uint64_t>();
            }
        }
        if (j.contains("training_corpus")) {
            m.training_corpus_ = j.at("training_corpus").get<std::vector<std::string>>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("bad ngram model json: ") + e.what());
    }
    if (m.order_ < 2 || m.order_ > 5 || m.alpha_ <= 0.0 || m.vocab_.empty()) {
        throw ValidationError("ngram model json fails invariants");
    }
    return m;
}

NgramModel NgramModel::load(const std::string& path) {
    return from_json(util::read_file(path));
}

void NgramModel::save(const std::string& path) const {
    util::write_file(path, to_json());
}

PerplexityVerdict flag(double ppl, double threshold) {
    if (ppl < 1.0) throw ValidationError("perplexity below 1 is impossible");
    return {ppl, threshold, ppl > threshold};
}

}  // namespace guardgate
