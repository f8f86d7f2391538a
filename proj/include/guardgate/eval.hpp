#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"

#include "guardgate/agents.hpp"
#include "guardgate/model.hpp"
#include "guardgate/paraphrase.hpp"
#include "guardgate/risk.hpp"
#include "guardgate/sanitizer.hpp"
#include "guardgate/steering.hpp"

namespace guardgate {

struct DatasetRecord {
    std::string prompt;
    std::string label;  // "safe" | "unsafe"
    std::string source;
    std::string norm_hash;
};

std::string normalized_prompt_hash(const std::string& prompt);

// Dedup by norm_hash (first kept), down-sample the majority label with a
// seeded generator, shuffle. Canonical-sorts before the seeded steps so the
// result is a pure function of (record set, seed): feeding the output back
// in reproduces it exactly.
std::vector<DatasetRecord> merge_records(std::vector<DatasetRecord> records, std::uint64_t seed);

// JSONL files with {"prompt", "label", "source"?} per line.
std::vector<DatasetRecord> load_and_merge(const std::vector<std::string>& paths,
                                          std::uint64_t seed);

std::vector<std::string> default_refusal_phrases();

// True iff any phrase occurs case-insensitively within the first 200
// characters of the response.
bool heuristic_refusal(const std::string& response, const std::vector<std::string>& phrases);

struct EvalOutcome {
    DatasetRecord record;
    std::string response;
    bool refused_heuristic = false;
    bool content_flagged = false;
    std::optional<Verdict> judge_verdict;
    bool attack_success = false;  // meaningful only for unsafe records
    bool completed = true;
    std::string error;
};

struct ASRReport {
    std::string condition;
    std::size_t n_unsafe = 0;
    std::size_t n_safe = 0;
    double asr = 0.0;
    double over_refusal_rate = 0.0;
    std::vector<EvalOutcome> outcomes;
    bool aborted = false;
    int failures = 0;

    nlohmann::json to_json() const;
    std::string to_csv() const;  // header + one (condition, asr) row
};

ASRReport compute_asr(const std::vector<EvalOutcome>& outcomes, const std::string& condition);

struct EvalDefense {
    std::string name = "none";  // none | prompt_level | agent_pipeline | steering

    // prompt_level
    RuleSet rules = RuleSet::defaults();
    Lexicon lexicon;  // empty entries -> paraphrase pass-through
    double substitution_rate = 0.3;
    std::shared_ptr<EmbeddingProvider> embedder;
    std::optional<UnsafeCentroid> centroid;  // absent -> no risk conditioning
    RiskPolicy policy = RiskPolicy::defaults();
    std::string refusal_text = "I'm sorry, but I can't help with that.";

    // agent_pipeline
    PipelineAdapters agents;
    PipelineConfig pipeline;

    // steering (toy model only)
    std::shared_ptr<const ToyTransformer> toy;
    std::optional<SteeringPlan> plan;
    int steered_tokens = 16;
};

struct EvalSettings {
    std::uint64_t seed = 0;
    int parallelism = 4;  // records in flight
    int max_failures = 5;
    std::vector<std::string> refusal_phrases;     // empty -> defaults
    std::vector<CompiledPattern> content_filter;  // empty -> filter disabled
    std::shared_ptr<TextGenerator> judge;         // absent -> heuristics only
    DecodingParams decoding;
};

ASRReport run_eval(const std::vector<DatasetRecord>& records, const EvalDefense& defense,
                   const std::shared_ptr<TextGenerator>& model, const EvalSettings& settings);

}  // namespace guardgate
