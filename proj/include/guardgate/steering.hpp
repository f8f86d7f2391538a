#pragma once

#include <string>
#include <utility>
#include <vector>

#include "nlohmann/json.hpp"

#include "guardgate/errors.hpp"
#include "guardgate/model.hpp"

namespace guardgate {

struct RefusalTokenSet {
    std::vector<std::string> tokens;
    std::vector<int> ids;
};

struct Priors {
    std::vector<double> refusal_prior;       // dim d, unit norm
    std::vector<double> danger_prior;        // dim d, unit norm
    std::vector<double> danger_logit_prior;  // dim V, uniform mass over danger ids
};

struct LayerDiagnostics {
    int layer = 0;
    double safety_dissimilarity = 0.0;  // 1 - cos(mean safe lens, mean unsafe lens)
    double danger_similarity = 0.0;     // cos(mean unsafe lens, danger_logit_prior)
    double score = 0.0;                 // dissimilarity * max(danger_similarity, 0)
};

struct GateParams {
    double alpha_max = 4.0;
    double k = 12.0;
    double r0 = 0.55;
};

struct SteeringConfig {
    int target_layer_count = 2;  // m
    int top_k = 8;               // K, doubled on degenerate clusters
    GateParams gate;
    double logit_bonus = 2.0;  // beta
    double w1 = 0.5;           // weight on unsafe-layer similarity
    double w2 = 0.5;           // weight on danger-token mass
    std::vector<std::string> refusal_tokens;  // empty -> defaults
    std::vector<std::string> danger_tokens;
};

std::vector<std::string> default_refusal_tokens();
std::vector<std::string> default_danger_tokens();

struct SteeringPlan {
    std::vector<int> target_layers;  // ascending
    std::vector<int> refusal_ids;    // R, ascending
    std::vector<int> danger_ids;     // B, ascending
    std::vector<std::string> refusal_tokens;
    std::vector<std::string> danger_tokens;
    std::vector<double> v;  // unit steering direction, dim d
    GateParams gate;
    double logit_bonus = 2.0;
    double w1 = 0.5;
    double w2 = 0.5;
    std::vector<double> unsafe_direction;  // unit, dim d
    int effective_top_k = 8;
    int model_layers = 0;
    int model_hidden_dim = 0;
    int model_vocab_size = 0;

    void validate() const;  // throws ValidationError
    nlohmann::json to_json() const;
    static SteeringPlan from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
    static SteeringPlan load(const std::string& path);
};

struct RefusalProfile {
    std::vector<double> F;  // one cosine per layer
};

struct SteeredTrace {
    std::vector<std::vector<double>> hidden_states;
    std::vector<double> logits;  // after the +/- alpha*beta adjustment
    double alpha = 0.0;
};

RefusalTokenSet resolve_tokens(const IntrospectableModel& model,
                               const std::vector<std::string>& tokens);

Priors make_priors(const std::vector<std::vector<double>>& lm_head,
                   const std::vector<int>& refusal_ids, const std::vector<int>& danger_ids);

RefusalProfile refusal_profile(const IntrospectionTrace& trace, const RefusalTokenSet& rts,
                               const std::vector<std::vector<double>>& lm_head);

std::vector<LayerDiagnostics> layer_diagnostics(const std::vector<IntrospectionTrace>& safe_traces,
                                                const std::vector<IntrospectionTrace>& unsafe_traces,
                                                const Priors& priors);
std::vector<LayerDiagnostics> layer_diagnostics(const IntrospectableModel& model,
                                                const std::vector<std::string>& safe_prompts,
                                                const std::vector<std::string>& unsafe_prompts,
                                                const Priors& priors);

std::vector<int> select_layers(const std::vector<LayerDiagnostics>& diag, int m);

// mean_unsafe_lens: one mean logit-lens row (length V) per selected layer.
std::pair<std::vector<int>, std::vector<int>> select_tokens(
    const std::vector<std::vector<double>>& mean_unsafe_lens, int top_k, const Priors& priors,
    const std::vector<std::vector<double>>& lm_head);

std::vector<double> build_steering_vector(const std::vector<std::vector<double>>& lm_head,
                                          const std::vector<int>& refusal_set,
                                          const std::vector<int>& danger_set);

double risk_score(const IntrospectionTrace& trace, const SteeringPlan& plan);

double gate(double r, const GateParams& params);

std::vector<double> softmax(const std::vector<double>& logits);

// Pure algebra: rescales target-layer states along v and nudges final
// logits by +/- alpha*beta; does not re-run deeper layers.
SteeredTrace apply_steering(const IntrospectionTrace& trace, const SteeringPlan& plan,
                            double alpha);

// Same intervention, but layers above each steered one are recomputed so
// the edit propagates; logits come from the recomputed last layer.
SteeredTrace apply_steering(const IntrospectableModel& model, const IntrospectionTrace& trace,
                            const SteeringPlan& plan, double alpha);

SteeringPlan calibrate(const IntrospectableModel& model,
                       const std::vector<std::string>& safe_prompts,
                       const std::vector<std::string>& unsafe_prompts,
                       const SteeringConfig& config);

struct SteeredStep {
    double risk = 0.0;
    double alpha = 0.0;
};

std::string steered_decode(const IntrospectableModel& model, const std::string& prompt,
                           const SteeringPlan& plan, int max_new_tokens,
                           std::vector<SteeredStep>* steps = nullptr);

}  // namespace guardgate
