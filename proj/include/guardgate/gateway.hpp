#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "nlohmann/json.hpp"

#include "guardgate/agents.hpp"
#include "guardgate/model.hpp"
#include "guardgate/paraphrase.hpp"
#include "guardgate/perplexity.hpp"
#include "guardgate/risk.hpp"
#include "guardgate/sanitizer.hpp"

namespace guardgate {

struct GatewayOptions {
    std::string host = "127.0.0.1";
    int port = 0;  // 0 picks an ephemeral port

    std::shared_ptr<TextGenerator> upstream;

    bool sanitize_enabled = true;
    RuleSet rules = RuleSet::defaults();

    bool perplexity_enabled = false;
    std::shared_ptr<const NgramModel> ppl_model;
    double ppl_threshold = 90.0;

    bool paraphrase_enabled = true;
    Lexicon lexicon;  // empty entries -> pass-through
    double substitution_rate = 0.3;

    bool risk_enabled = false;
    std::shared_ptr<EmbeddingProvider> embedder;  // null -> hashing embedder
    std::optional<UnsafeCentroid> centroid;
    RiskPolicy policy = RiskPolicy::defaults();

    bool agent_enabled = false;
    PipelineAdapters agents;
    PipelineConfig pipeline;

    bool fail_closed = true;
    std::string refusal_text = "I'm sorry, but I can't help with that.";
    std::string bearer_token;  // empty -> no auth check
    std::string log_path;      // empty -> logging off
    std::uint64_t seed = 0;
    DecodingParams decoding;
};

// HTTP middleware: POST /v1/chat runs sanitize -> perplexity -> paraphrase ->
// risk -> system-prompt conditioning -> agent pipeline or direct upstream.
// All defense state is immutable after construction; requests are fully
// concurrent.
class Gateway {
public:
    explicit Gateway(GatewayOptions options);  // throws ValidationError
    ~Gateway();

    Gateway(const Gateway&) = delete;
    Gateway& operator=(const Gateway&) = delete;

    struct HttpResult {
        int status = 200;
        nlohmann::json body;
    };

    // Core handler, callable without sockets for tests.
    HttpResult handle_chat(const std::string& body, const std::string& authorization);

    nlohmann::json config_view() const;  // redacted, no secrets

    void start();  // binds and serves on a background thread; throws RuntimeFailure
    void stop();
    int port() const;

private:
    struct Impl;
    GatewayOptions options_;
    std::atomic<std::uint64_t> request_counter_{0};
    std::unique_ptr<Impl> impl_;
    std::mutex log_mutex_;

    void log_line(const nlohmann::json& entry);
};

}  // namespace guardgate
