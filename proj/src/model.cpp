#include "guardgate/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "nlohmann/json.hpp"

#include "guardgate/util.hpp"

namespace guardgate {

namespace {

constexpr int kEosId = 0;
constexpr int kUnkId = 1;

int count_ws_tokens(const std::string& text) {
    return static_cast<int>(util::split_ws(text).size());
}

}  // namespace

void ChatRequest::validate() const {
    if (messages.empty()) {
        throw ValidationError("chat request has no messages");
    }
    for (const auto& m : messages) {
        if (m.role != "system" && m.role != "user" && m.role != "assistant") {
            throw ValidationError("invalid message role: " + m.role);
        }
    }
    if (decoding.temperature < 0.0) {
        throw ValidationError("temperature must be >= 0");
    }
    if (decoding.top_p <= 0.0 || decoding.top_p > 1.0) {
        throw ValidationError("top_p must be in (0, 1]");
    }
    if (decoding.max_input_tokens <= 0 || decoding.max_new_tokens <= 0) {
        throw ValidationError("token limits must be positive");
    }
}

int ChatRequest::approx_input_tokens() const {
    int total = count_ws_tokens(system_prompt);
    for (const auto& m : messages) {
        total += count_ws_tokens(m.content);
    }
    return total;
}

ScriptedAdapter::ScriptedAdapter(std::map<std::string, std::string> responses,
                                 std::string default_response)
    : responses_(std::move(responses)), default_response_(std::move(default_response)) {}

void ScriptedAdapter::set_response_fn(std::function<std::string(const ChatRequest&)> fn) {
    response_fn_ = std::move(fn);
}

std::vector<ChatRequest> ScriptedAdapter::recorded() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return recorded_;
}

ChatResponse ScriptedAdapter::generate(const ChatRequest& request) {
    request.validate();
    {
        std::lock_guard<std::mutex> lock(mutex_);
        recorded_.push_back(request);
    }
    if (fail_mode_ == FailMode::timeout) {
        throw UpstreamTimeout("scripted adapter: injected timeout");
    }
    if (fail_mode_ == FailMode::rate_limited) {
        throw UpstreamRateLimited("scripted adapter: injected 429");
    }
    if (request.approx_input_tokens() > request.decoding.max_input_tokens) {
        throw InputTooLong("input exceeds max_input_tokens");
    }

    std::string key;
    for (auto it = request.messages.rbegin(); it != request.messages.rend(); ++it) {
        if (it->role == "user") {
            key = it->content;
            break;
        }
    }
    ChatResponse resp;
    if (response_fn_) {
        resp.text = response_fn_(request);
    } else if (auto it = responses_.find(key); it != responses_.end()) {
        resp.text = it->second;
    } else {
        resp.text = default_response_;
    }
    resp.finish_reason = "stop";
    resp.usage.prompt_tokens = request.approx_input_tokens();
    resp.usage.completion_tokens = count_ws_tokens(resp.text);
    return resp;
}

RemoteAdapter::RemoteAdapter(Config config) : config_(std::move(config)) {
    if (config_.base_url.empty()) {
        throw ValidationError("remote adapter requires a base_url");
    }
    if (config_.max_retries < 0) {
        throw ValidationError("max_retries must be >= 0");
    }
}

ChatResponse RemoteAdapter::generate(const ChatRequest& request) {
    request.validate();
    if (request.approx_input_tokens() > request.decoding.max_input_tokens) {
        throw InputTooLong("input exceeds max_input_tokens");
    }

    nlohmann::json body;
    body["system"] = request.system_prompt;
    body["messages"] = nlohmann::json::array();
    for (const auto& m : request.messages) {
        body["messages"].push_back({{"role", m.role}, {"content", m.content}});
    }
    body["temperature"] = request.decoding.temperature;
    body["top_p"] = request.decoding.top_p;
    body["max_tokens"] = request.decoding.max_new_tokens;
    if (!config_.model.empty()) {
        body["model"] = config_.model;
    }
    const std::string payload = body.dump();

    httplib::Client client(config_.base_url);
    client.set_connection_timeout(config_.timeout_sec, 0);
    client.set_read_timeout(config_.timeout_sec, 0);
    httplib::Headers headers;
    if (!config_.api_key.empty()) {
        headers.emplace("Authorization", "Bearer " + config_.api_key);
    }

    int backoff_ms = config_.backoff_ms;
    std::string last_error = "upstream request failed";
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(std::chrono::milliseconds(backoff_ms));
            backoff_ms *= 2;
        }
        auto res = client.Post(config_.path, headers, payload, "application/json");
        if (!res) {
            last_error = "upstream unreachable: " + httplib::to_string(res.error());
            continue;  // treated as timeout, retry
        }
        if (res->status == 429) {
            last_error = "upstream rate limited (429)";
            continue;
        }
        if (res->status != 200) {
            throw UpstreamFailure("upstream returned status " + std::to_string(res->status));
        }
        nlohmann::json parsed;
        try {
            parsed = nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::parse_error&) {
            throw UpstreamFailure("upstream returned invalid JSON");
        }
        if (!parsed.is_object() || !parsed.contains("text") || !parsed["text"].is_string()) {
            throw UpstreamFailure("upstream response missing text field");
        }
        ChatResponse resp;
        resp.text = parsed["text"].get<std::string>();
        resp.finish_reason = parsed.value("finish_reason", std::string("stop"));
        resp.usage.prompt_tokens = request.approx_input_tokens();
        resp.usage.completion_tokens = count_ws_tokens(resp.text);
        return resp;
    }
    if (last_error.find("429") != std::string::npos) {
        throw UpstreamRateLimited(last_error);
    }
    throw UpstreamTimeout(last_error);
}

namespace {

std::vector<std::string> filler_words() {
    return {
        "the",   "a",     "an",    "of",    "to",    "and",   "in",    "is",
        "you",   "that",  "it",    "he",    "was",   "for",   "on",    "are",
        "as",    "with",  "his",   "they",  "at",    "be",    "this",  "have",
        "from",  "or",    "one",   "had",   "by",    "word",  "but",   "what",
        "some",  "we",    "can",   "out",   "other", "were",  "all",   "there",
        "when",  "up",    "use",   "your",  "how",   "said",  "each",  "she",
        "do",    "their", "time",  "if",    "will",  "way",   "about", "many",
        "then",  "them",  "write", "would", "like",  "so",    "these", "her",
        "long",  "make",  "thing", "see",   "him",   "two",   "has",   "look",
        "more",  "day",   "could", "go",    "come",  "did",   "number", "sound",
        "no",    "most",  "people", "my",   "over",  "know",  "water", "than",
        "call",  "first", "who",   "may",   "down",  "side",  "been",  "now",
    };
}

}  // namespace

ToyTransformer::ToyTransformer(std::uint64_t seed) {
    refusal_words_ = {"sorry", "cannot", "unable", "not", "I"};
    danger_words_ = {"weapon", "attack", "harm", "kill", "bomb"};

    vocab_.reserve(kVocabSize);
    vocab_.push_back("<eos>");
    vocab_.push_back("<unk>");
    for (const auto& w : refusal_words_) vocab_.push_back(w);
    for (const auto& w : danger_words_) vocab_.push_back(w);
    for (const auto& w : filler_words()) vocab_.push_back(w);
    int pad = 0;
    while (static_cast<int>(vocab_.size()) < kVocabSize) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "tok%03d", 108 + pad);
        vocab_.push_back(buf);
        ++pad;
    }
    if (static_cast<int>(vocab_.size()) != kVocabSize) {
        throw RuntimeFailure("toy vocab size mismatch");
    }
    for (int i = 0; i < kVocabSize; ++i) {
        token_ids_[vocab_[i]] = i;
    }

    // Fixed draw order so a seed pins every weight: embedding rows first,
    // then per-layer W and b.
    util::Rng rng(seed);
    const double scale_e = 0.5;
    const double scale_w = 0.09;
    const double scale_b = 0.02;

    lm_head_.assign(kVocabSize, std::vector<double>(kHiddenDim, 0.0));
    for (auto& row : lm_head_) {
        for (auto& x : row) x = scale_e * rng.next_signed_unit();
    }
    weights_.assign(kLayers, std::vector<std::vector<double>>(
                                 kHiddenDim, std::vector<double>(kHiddenDim, 0.0)));
    biases_.assign(kLayers, std::vector<double>(kHiddenDim, 0.0));
    for (int l = 0; l < kLayers; ++l) {
        for (auto& row : weights_[l]) {
            for (auto& x : row) x = scale_w * rng.next_signed_unit();
        }
        for (auto& x : biases_[l]) x = scale_b * rng.next_signed_unit();
    }
}

std::optional<int> ToyTransformer::token_id(const std::string& token) const {
    auto it = token_ids_.find(token);
    if (it == token_ids_.end()) return std::nullopt;
    return it->second;
}

std::vector<int> ToyTransformer::tokenize(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& tok : util::split_ws(text)) {
        auto it = token_ids_.find(tok);
        if (it == token_ids_.end()) {
            it = token_ids_.find(util::to_lower_ascii(tok));
        }
        ids.push_back(it == token_ids_.end() ? kUnkId : it->second);
    }
    return ids;
}

IntrospectionTrace ToyTransformer::introspect_forward(const std::vector<int>& token_ids) const {
    if (token_ids.empty()) {
        throw ValidationError("toy forward needs at least one token");
    }
    for (int id : token_ids) {
        if (id < 0 || id >= kVocabSize) {
            throw ValidationError("token id out of range: " + std::to_string(id));
        }
    }

    // Last-token embedding plus a mean pool over the whole input; keeps
    // the hidden state sensitive to every token without attention.
    std::vector<double> h(kHiddenDim, 0.0);
    for (int id : token_ids) {
        for (int i = 0; i < kHiddenDim; ++i) h[i] += lm_head_[id][i];
    }
    const double inv = 0.5 / static_cast<double>(token_ids.size());
    for (int i = 0; i < kHiddenDim; ++i) {
        h[i] = lm_head_[token_ids.back()][i] + h[i] * inv;
    }

    IntrospectionTrace trace;
    trace.hidden_states.reserve(kLayers);
    trace.logit_lens.reserve(kLayers);
    for (int l = 0; l < kLayers; ++l) {
        h = apply_layer(h, l);
        trace.hidden_states.push_back(h);
        trace.logit_lens.push_back(project_logits(h));
    }
    trace.logits = trace.logit_lens.back();
    return trace;
}

std::vector<double> ToyTransformer::apply_layer(const std::vector<double>& h, int layer) const {
    if (static_cast<int>(h.size()) != kHiddenDim) {
        throw DimensionMismatch("hidden state has wrong dimension");
    }
    if (layer < 0 || layer >= kLayers) {
        throw ValidationError("layer index out of range");
    }
    std::vector<double> next(kHiddenDim, 0.0);
    for (int i = 0; i < kHiddenDim; ++i) {
        double acc = biases_[layer][i];
        for (int j = 0; j < kHiddenDim; ++j) acc += weights_[layer][i][j] * h[j];
        next[i] = h[i] + std::tanh(acc);
    }
    return next;
}

std::vector<double> ToyTransformer::project_logits(const std::vector<double>& h) const {
    if (static_cast<int>(h.size()) != kHiddenDim) {
        throw DimensionMismatch("hidden state has wrong dimension");
    }
    std::vector<double> logits(kVocabSize, 0.0);
    for (int v = 0; v < kVocabSize; ++v) {
        double acc = 0.0;
        for (int i = 0; i < kHiddenDim; ++i) acc += lm_head_[v][i] * h[i];
        logits[v] = acc;
    }
    return logits;
}

std::string ToyTransformer::greedy_decode(const std::string& prompt, int max_new_tokens) const {
    std::vector<int> ids = tokenize(prompt);
    if (ids.empty()) ids.push_back(kUnkId);
    const int limit = std::min(max_new_tokens, kMaxNewTokens);

    std::vector<std::string> out_words;
    for (int step = 0; step < limit; ++step) {
        IntrospectionTrace trace = introspect_forward(ids);
        int best = 0;
        for (int v = 1; v < kVocabSize; ++v) {
            if (trace.logits[v] > trace.logits[best]) best = v;
        }
        if (best == kEosId) break;
        ids.push_back(best);
        out_words.push_back(vocab_[best]);
    }
    std::string out;
    for (std::size_t i = 0; i < out_words.size(); ++i) {
        if (i > 0) out += ' ';
        out += out_words[i];
    }
    return out;
}

ToyAdapter::ToyAdapter(std::shared_ptr<const ToyTransformer> model) : model_(std::move(model)) {
    if (!model_) {
        throw ValidationError("toy adapter requires a model");
    }
}

ChatResponse ToyAdapter::generate(const ChatRequest& request) {
    request.validate();
    if (request.approx_input_tokens() > request.decoding.max_input_tokens) {
        throw InputTooLong("input exceeds max_input_tokens");
    }
    std::string prompt = request.system_prompt;
    for (const auto& m : request.messages) {
        if (!prompt.empty()) prompt += '\n';
        prompt += m.content;
    }
    ChatResponse resp;
    resp.text = model_->greedy_decode(prompt, request.decoding.max_new_tokens);
    const int produced = static_cast<int>(util::split_ws(resp.text).size());
    resp.finish_reason =
        produced >= std::min(request.decoding.max_new_tokens, ToyTransformer::kMaxNewTokens)
            ? "length"
            : "stop";
    resp.usage.prompt_tokens = request.approx_input_tokens();
    resp.usage.completion_tokens = produced;
    return resp;
}

}  // namespace guardgate
