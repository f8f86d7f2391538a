#pragma once

#include <memory>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"

#include "guardgate/errors.hpp"
#include "guardgate/model.hpp"

namespace guardgate {

struct AgentPromptTemplates {
    std::string rewriter_system;
    std::string rewriter_instructions;
    std::string judge_system;
    std::string judge_instructions;

    static AgentPromptTemplates defaults();
};

struct Verdict {
    bool safe = false;
    std::vector<std::string> reasons;
    std::string raw;
    bool recovered = false;
};

struct StageTiming {
    std::string stage;  // rewrite | generate | judge
    double ms = 0.0;
    bool ok = false;
    std::string error;
};

struct PipelineTranscript {
    std::string original_prompt;
    std::string rewritten_prompt;
    std::string core_response;
    Verdict verdict;
    std::string final_response;
    std::vector<StageTiming> timings;

    nlohmann::json to_json() const;
};

struct PipelineConfig {
    AgentPromptTemplates templates = AgentPromptTemplates::defaults();
    std::string refusal_text = "I'm sorry, but I can't help with that.";
    std::string core_system_prompt;
    bool judge_on_original = false;
    DecodingParams decoding;
};

struct PipelineAdapters {
    std::shared_ptr<TextGenerator> rewriter;
    std::shared_ptr<TextGenerator> core;
    std::shared_ptr<TextGenerator> judge;
};

std::string rewrite(const std::string& prompt, TextGenerator& adapter,
                    const AgentPromptTemplates& templates,
                    const DecodingParams& decoding = {});

Verdict parse_verdict(const std::string& text);

Verdict judge(const std::string& user, const std::string& assistant, TextGenerator& adapter,
              const AgentPromptTemplates& templates, const DecodingParams& decoding = {});

PipelineTranscript run_pipeline(const std::string& prompt, const PipelineAdapters& adapters,
                                const PipelineConfig& config);

}  // namespace guardgate
