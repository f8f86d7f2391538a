#include "guardgate/gateway.hpp"

#include <chrono>
#include <fstream>
#include <thread>

#include "httplib.h"

#include "guardgate/util.hpp"

namespace guardgate {

struct Gateway::Impl {
    httplib::Server server;
    std::thread thread;
    int port = 0;
};

namespace {

double ms_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
        .count();
}

Gateway::HttpResult error_result(int status, const std::string& message) {
    return {status, nlohmann::json{{"error", message}}};
}

}  // namespace

Gateway::Gateway(GatewayOptions options) : options_(std::move(options)) {
    if (!options_.upstream && !options_.agent_enabled) {
        throw ValidationError("gateway needs an upstream adapter or the agent pipeline");
    }
    if (options_.agent_enabled &&
        (!options_.agents.rewriter || !options_.agents.core || !options_.agents.judge)) {
        throw ValidationError("agent defense needs rewriter, core, and judge adapters");
    }
    if (options_.risk_enabled && !options_.centroid) {
        throw ValidationError("risk defense needs a centroid");
    }
    if (options_.risk_enabled && !options_.embedder) {
        options_.embedder = std::make_shared<HashingEmbedder>();
    }
    if (options_.perplexity_enabled && !options_.ppl_model) {
        throw ValidationError("perplexity defense needs a trained model");
    }
    options_.policy.validate();
    impl_ = std::make_unique<Impl>();
}

Gateway::~Gateway() { stop(); }

Gateway::HttpResult Gateway::handle_chat(const std::string& body,
                                         const std::string& authorization) {
    const std::uint64_t request_id = request_counter_.fetch_add(1) + 1;
    if (!options_.bearer_token.empty() &&
        authorization != "Bearer " + options_.bearer_token) {
        return error_result(401, "unauthorized");
    }

    nlohmann::json req = nlohmann::json::parse(body, nullptr, false);
    if (req.is_discarded() || !req.is_object()) {
        return error_result(400, "malformed JSON body");
    }
    if (!req.contains("messages") || !req["messages"].is_array() || req["messages"].empty()) {
        return error_result(400, "body needs a non-empty messages array");
    }
    for (const auto& m : req["messages"]) {
        if (!m.is_object() || !m.contains("role") || !m["role"].is_string() ||
            !m.contains("content") || !m["content"].is_string()) {
            return error_result(400, "each message needs string role and content");
        }
    }
    if (req["messages"].back()["role"].get<std::string>() != "user") {
        return error_result(400, "last message must have role user");
    }
    DecodingParams decoding = options_.decoding;
    if (req.contains("overrides")) {
        const auto& ov = req["overrides"];
        if (!ov.is_object()) {
            return error_result(400, "overrides must be an object");
        }
        if (ov.contains("temperature")) {
            if (!ov["temperature"].is_number()) return error_result(400, "bad temperature");
            decoding.temperature = ov["temperature"].get<double>();
        }
        if (ov.contains("top_p")) {
            if (!ov["top_p"].is_number()) return error_result(400, "bad top_p");
            decoding.top_p = ov["top_p"].get<double>();
        }
        if (ov.contains("max_new_tokens")) {
            if (!ov["max_new_tokens"].is_number_integer() ||
                ov["max_new_tokens"].get<int>() <= 0) {
                return error_result(400, "bad max_new_tokens");
            }
            decoding.max_new_tokens = ov["max_new_tokens"].get<int>();
        }
    }

    const std::string user_text = req["messages"].back()["content"].get<std::string>();
    nlohmann::json meta;
    nlohmann::json latency;
    meta["short_circuit"] = false;

    // sanitize
    std::string sanitized_text = user_text;
    if (options_.sanitize_enabled) {
        const auto t0 = std::chrono::steady_clock::now();
        SanitizedPrompt sp;
        try {
            sp = sanitize({user_text, "req-" + std::to_string(request_id)}, options_.rules);
        } catch (const InputTooLong&) {
            return error_result(413, "input too long");
        } catch (const ValidationError& e) {
            return error_result(400, e.what());
        }
        sanitized_text = sp.text;
        meta["sanitization"] = {{"removed_spans", sp.report.removed_spans.size()},
                                {"decoded_payloads", sp.report.decoded_payloads.size()},
                                {"rounds", sp.report.rounds},
                                {"changed", sp.text != user_text}};
        latency["sanitize"] = ms_since(t0);
    }

    // perplexity
    bool ppl_flagged = false;
    if (options_.perplexity_enabled) {
        const auto t0 = std::chrono::steady_clock::now();
        nlohmann::json pj;
        try {
            const double ppl = options_.ppl_model->perplexity(sanitized_text);
            const PerplexityVerdict v = flag(ppl, options_.ppl_threshold);
            ppl_flagged = v.flagged;
            pj = {{"ppl", v.ppl}, {"threshold", v.threshold}, {"flagged", v.flagged}};
        } catch (const TextTooShort&) {
            pj = {{"ppl", nullptr}, {"threshold", options_.ppl_threshold}, {"flagged", false}};
        }
        meta["perplexity"] = pj;
        latency["perplexity"] = ms_since(t0);
    }

    // paraphrase
    std::string conditioned_text = sanitized_text;
    if (options_.paraphrase_enabled) {
        const auto t0 = std::chrono::steady_clock::now();
        if (!options_.lexicon.entries.empty()) {
            ParaphraseConfig cfg;
            cfg.seed = util::derive_seed(options_.seed, "req-" + std::to_string(request_id));
            cfg.substitution_rate = options_.substitution_rate;
            conditioned_text = paraphrase(sanitized_text, options_.lexicon, cfg);
        }
        meta["paraphrase_applied"] = conditioned_text != sanitized_text;
        latency["paraphrase"] = ms_since(t0);
    }

    // risk
    std::string system_prompt;
    std::string tier = "low";
    if (options_.risk_enabled) {
        const auto t0 = std::chrono::steady_clock::now();
        RiskAssessment a = assess(sanitized_text, conditioned_text, *options_.centroid,
                                  *options_.embedder, options_.policy);
        if (ppl_flagged) {
            a.tier = bump_tier(a.tier);  // detector raises the tier, never blocks alone
        }
        tier = tier_name(a.tier);
        meta["risk"] = {{"cos_original", a.cos_original},
                        {"cos_paraphrased", a.cos_paraphrased},
                        {"score", a.risk_score},
                        {"tier", tier},
                        {"degraded", a.degraded}};
        latency["risk"] = ms_since(t0);
        if (a.tier == RiskTier::high && options_.fail_closed) {
            meta["short_circuit"] = true;
            meta["latency_ms"] = latency;
            meta["tier"] = tier;
            log_line({{"request_id", request_id},
                      {"status", 200},
                      {"tier", tier},
                      {"short_circuit", true}});
            return {200, nlohmann::json{{"text", options_.refusal_text}, {"defense", meta}}};
        }
        system_prompt = select_system_prompt(a, options_.policy);
    }

    // generate
    std::string response_text;
    {
        const auto t0 = std::chrono::steady_clock::now();
        if (options_.agent_enabled) {
            PipelineConfig cfg = options_.pipeline;
            cfg.core_system_prompt = system_prompt;
            cfg.decoding = decoding;
            cfg.refusal_text = options_.refusal_text;
            const PipelineTranscript t = run_pipeline(conditioned_text, options_.agents, cfg);
            response_text = t.final_response;
            nlohmann::json stages = nlohmann::json::array();
            for (const auto& s : t.timings) {
                stages.push_back({{"stage", s.stage}, {"ms", s.ms}, {"ok", s.ok}});
            }
            meta["pipeline"] = {{"verdict",
                                 {{"safe", t.verdict.safe},
                                  {"reasons", t.verdict.reasons},
                                  {"recovered", t.verdict.recovered}}},
                                {"stages", stages}};
        } else {
            ChatRequest creq;
            creq.system_prompt = system_prompt;
            creq.decoding = decoding;
            creq.messages.push_back({"user", conditioned_text});
            try {
                response_text = options_.upstream->generate(creq).text;
            } catch (const InputTooLong&) {
                return error_result(413, "input too long");
            } catch (const Error& e) {
                if (!options_.fail_closed) {
                    return error_result(502, std::string("upstream failure: ") + e.what());
                }
                response_text = options_.refusal_text;
                meta["upstream_error"] = e.what();
            }
        }
        latency["generate"] = ms_since(t0);
    }

    meta["tier"] = tier;
    meta["latency_ms"] = latency;
    log_line({{"request_id", request_id},
              {"status", 200},
              {"tier", tier},
              {"short_circuit", false},
              {"latency_ms", latency}});
    return {200, nlohmann::json{{"text", response_text}, {"defense", meta}}};
}

nlohmann::json Gateway::config_view() const {
    nlohmann::json j;
    j["listen"] = {{"host", options_.host}, {"port", port()}};
    j["fail_mode"] = options_.fail_closed ? "closed" : "open";
    j["upstream"] = options_.upstream ? options_.upstream->name() : "none";
    j["auth"] = options_.bearer_token.empty() ? "disabled" : "bearer";
    j["defenses"] = {
        {"sanitize",
         {{"enabled", options_.sanitize_enabled},
          {"patterns", options_.rules.patterns.size()},
          {"strip_urls", options_.rules.strip_urls},
          {"max_input_chars", options_.rules.max_input_chars}}},
        {"perplexity",
         {{"enabled", options_.perplexity_enabled}, {"threshold", options_.ppl_threshold}}},
        {"paraphrase",
         {{"enabled", options_.paraphrase_enabled},
          {"lexicon_entries", options_.lexicon.entries.size()},
          {"substitution_rate", options_.substitution_rate}}},
        {"risk",
         {{"enabled", options_.risk_enabled},
          {"has_centroid", options_.centroid.has_value()},
          {"medium_threshold", options_.policy.medium_threshold},
          {"high_threshold", options_.policy.high_threshold}}},
        {"agent",
         {{"enabled", options_.agent_enabled},
          {"judge_on_original", options_.pipeline.judge_on_original}}},
    };
    return j;
}

void Gateway::start() {
    auto& server = impl_->server;
    server.Post("/v1/chat", [this](const httplib::Request& req, httplib::Response& res) {
        const HttpResult r = handle_chat(req.body, req.get_header_value("Authorization"));
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    });
    server.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
        res.set_content("ok", "text/plain");
    });
    server.Get("/v1/config", [this](const httplib::Request&, httplib::Response& res) {
        res.set_content(config_view().dump(2), "application/json");
    });

    if (options_.port == 0) {
        impl_->port = impl_->server.bind_to_any_port(options_.host);
        if (impl_->port <= 0) {
            throw RuntimeFailure("failed to bind " + options_.host);
        }
    } else {
        if (!server.bind_to_port(options_.host, options_.port)) {
            throw RuntimeFailure("failed to bind " + options_.host + ":" +
                                 std::to_string(options_.port));
        }
        impl_->port = options_.port;
    }
    impl_->thread = std::thread([this]() { impl_->server.listen_after_bind(); });
    while (!impl_->server.is_running()) {
        std::this_thread::sleep_for(std::chrono::milliseconds(1));
    }
}

void Gateway::stop() {
    if (impl_ && impl_->thread.joinable()) {
        impl_->server.stop();
        impl_->thread.join();
    }
}

int Gateway::port() const { return impl_ ? impl_->port : 0; }

void Gateway::log_line(const nlohmann::json& entry) {
    if (options_.log_path.empty()) return;
    std::lock_guard<std::mutex> lock(log_mutex_);
    std::ofstream out(options_.log_path, std::ios::app);
    if (out) {
        nlohmann::json e = entry;
        e["ts_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
        out << e.dump() << "\n";
    }
}

}  // namespace guardgate
