#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "guardgate/errors.hpp"

namespace guardgate {

struct DecodingParams {
    double temperature = 0.0;
    double top_p = 1.0;
    int max_input_tokens = 2048;
    int max_new_tokens = 768;
};

struct ChatMessage {
    std::string role;  // system | user | assistant
    std::string content;
};

struct ChatRequest {
    std::string system_prompt;
    std::vector<ChatMessage> messages;
    DecodingParams decoding;

    void validate() const;  // throws ValidationError
    int approx_input_tokens() const;
};

struct ChatUsage {
    int prompt_tokens = 0;
    int completion_tokens = 0;
};

struct ChatResponse {
    std::string text;
    std::string finish_reason;  // "stop" | "length" | "error"
    ChatUsage usage;
};

class TextGenerator {
public:
    virtual ~TextGenerator() = default;
    virtual ChatResponse generate(const ChatRequest& request) = 0;
    virtual std::string name() const = 0;
};

// Test/offline adapter: replies from a fixed prompt->response map. Records
// every request it sees so tests can assert on what reached the model.
class ScriptedAdapter : public TextGenerator {
public:
    enum class FailMode { none, timeout, rate_limited };

    explicit ScriptedAdapter(std::map<std::string, std::string> responses = {},
                             std::string default_response = "OK.");

    ChatResponse generate(const ChatRequest& request) override;
    std::string name() const override { return "scripted"; }

    void set_fail_mode(FailMode mode) { fail_mode_ = mode; }
    void set_response_fn(std::function<std::string(const ChatRequest&)> fn);
    std::vector<ChatRequest> recorded() const;

private:
    std::map<std::string, std::string> responses_;
    std::string default_response_;
    FailMode fail_mode_ = FailMode::none;
    std::function<std::string(const ChatRequest&)> response_fn_;
    mutable std::mutex mutex_;
    std::vector<ChatRequest> recorded_;
};

// Chat-completion client. Wire: POST {system, messages, temperature, top_p,
// max_tokens} -> {text, finish_reason}. Retries timeouts and 429s up to
// max_retries with doubling backoff.
class RemoteAdapter : public TextGenerator {
public:
    struct Config {
        std::string base_url;
        std::string path = "/v1/generate";
        std::string api_key;      // sent as Authorization: Bearer when non-empty
        std::string model;        // passed through when non-empty
        int timeout_sec = 30;
        int max_retries = 3;
        int backoff_ms = 100;
    };

    explicit RemoteAdapter(Config config);
    ChatResponse generate(const ChatRequest& request) override;
    std::string name() const override { return "remote"; }

private:
    Config config_;
};

struct IntrospectionTrace {
    std::vector<std::vector<double>> hidden_states;  // L x d, last position
    std::vector<double> logits;                      // V
    std::vector<std::vector<double>> logit_lens;     // L x V, row l = h_l . E^T
};

// What the steering engine needs from a model: per-layer hidden states,
// the tied LM head, and the ability to re-run individual layers.
class IntrospectableModel {
public:
    virtual ~IntrospectableModel() = default;
    virtual int layers() const = 0;
    virtual int hidden_dim() const = 0;
    virtual int vocab_size() const = 0;
    virtual const std::vector<std::string>& vocab() const = 0;
    virtual const std::vector<std::vector<double>>& lm_head() const = 0;
    virtual std::optional<int> token_id(const std::string& token) const = 0;
    virtual std::vector<int> tokenize(const std::string& text) const = 0;
    virtual IntrospectionTrace introspect_forward(const std::vector<int>& token_ids) const = 0;
    // Runs layer `layer` on hidden state h (output of layer-1), returns next state.
    virtual std::vector<double> apply_layer(const std::vector<double>& h, int layer) const = 0;
    virtual std::vector<double> project_logits(const std::vector<double>& h) const = 0;
};

// Minimal deterministic model for verifying steering algebra: residual
// stack of affine+tanh layers over a tied embedding / LM-head matrix.
// No attention; hidden state tracks the last token plus a mean pool of
// the whole input.
class ToyTransformer : public IntrospectableModel {
public:
    static constexpr int kLayers = 6;
    static constexpr int kHiddenDim = 32;
    static constexpr int kVocabSize = 128;
    static constexpr std::uint64_t kDefaultSeed = 0x6775617264ULL;
    static constexpr int kMaxNewTokens = 32;

    explicit ToyTransformer(std::uint64_t seed = kDefaultSeed);

    int layers() const override { return kLayers; }
    int hidden_dim() const override { return kHiddenDim; }
    int vocab_size() const override { return kVocabSize; }

    const std::vector<std::string>& vocab() const override { return vocab_; }
    const std::vector<std::vector<double>>& lm_head() const override { return lm_head_; }
    const std::vector<std::string>& refusal_words() const { return refusal_words_; }
    const std::vector<std::string>& danger_words() const { return danger_words_; }

    std::optional<int> token_id(const std::string& token) const override;
    std::vector<int> tokenize(const std::string& text) const override;  // unknown -> <unk>

    IntrospectionTrace introspect_forward(const std::vector<int>& token_ids) const override;
    std::vector<double> apply_layer(const std::vector<double>& h, int layer) const override;
    std::vector<double> project_logits(const std::vector<double>& h) const override;

    std::string greedy_decode(const std::string& prompt, int max_new_tokens) const;

private:
    std::vector<std::string> vocab_;
    std::vector<std::string> refusal_words_;
    std::vector<std::string> danger_words_;
    std::vector<std::vector<double>> lm_head_;                // V x d
    std::vector<std::vector<std::vector<double>>> weights_;   // L x d x d
    std::vector<std::vector<double>> biases_;                 // L x d
    std::map<std::string, int> token_ids_;
};

class ToyAdapter : public TextGenerator {
public:
    explicit ToyAdapter(std::shared_ptr<const ToyTransformer> model);
    ChatResponse generate(const ChatRequest& request) override;
    std::string name() const override { return "toy"; }
    const ToyTransformer& model() const { return *model_; }

private:
    std::shared_ptr<const ToyTransformer> model_;
};

}  // namespace guardgate
