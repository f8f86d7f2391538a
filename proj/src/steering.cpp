#include "guardgate/steering.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "guardgate/risk.hpp"
#include "guardgate/util.hpp"

namespace guardgate {

namespace {

double l2_norm(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}

// Cosine that treats a near-zero side as "no signal" instead of throwing;
// diagnostics run on means that can legitimately degenerate.
double safe_cos(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw DimensionMismatch("cosine arguments differ in dimension");
    }
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na < 1e-300 || nb < 1e-300) return 0.0;
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return std::clamp(dot / (na * nb), -1.0, 1.0);
}

std::vector<double> mean_rows(const std::vector<std::vector<double>>& lm_head,
                              const std::vector<int>& ids) {
    std::vector<double> m(lm_head.empty() ? 0 : lm_head[0].size(), 0.0);
    for (int id : ids) {
        const auto& row = lm_head.at(static_cast<std::size_t>(id));
        for (std::size_t i = 0; i < m.size(); ++i) m[i] += row[i];
    }
    for (auto& x : m) x /= static_cast<double>(ids.size());
    return m;
}

void steer_in_place(std::vector<double>& h, const std::vector<double>& v, double alpha) {
    if (h.size() != v.size()) {
        throw DimensionMismatch("steering vector does not match hidden dimension");
    }
    const double before = l2_norm(h);
    std::vector<double> shifted(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) shifted[i] = h[i] + alpha * v[i];
    const double after = l2_norm(shifted);
    if (after < 1e-300) return;  // degenerate cancellation, leave the state alone
    const double scale = before / after;
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = shifted[i] * scale;
}

void adjust_logits(std::vector<double>& logits, const SteeringPlan& plan, double alpha) {
    const double bump = alpha * plan.logit_bonus;
    for (int id : plan.refusal_ids) {
        logits.at(static_cast<std::size_t>(id)) += bump;
    }
    for (int id : plan.danger_ids) {
        logits.at(static_cast<std::size_t>(id)) -= bump;
    }
}

}  // namespace

std::vector<std::string> default_refusal_tokens() {
    return {"sorry", "cannot", "unable", "not", "I"};
}

std::vector<std::string> default_danger_tokens() {
    return {"weapon", "attack", "harm", "kill", "bomb"};
}

RefusalTokenSet resolve_tokens(const IntrospectableModel& model,
                               const std::vector<std::string>& tokens) {
    if (tokens.empty()) {
        throw ValidationError("token set is empty");
    }
    RefusalTokenSet out;
    out.tokens = tokens;
    for (const auto& t : tokens) {
        auto id = model.token_id(t);
        if (!id) {
            throw UnknownToken("token not in model vocab: " + t);
        }
        out.ids.push_back(*id);
    }
    return out;
}

Priors make_priors(const std::vector<std::vector<double>>& lm_head,
                   const std::vector<int>& refusal_ids, const std::vector<int>& danger_ids) {
    if (refusal_ids.empty() || danger_ids.empty()) {
        throw ValidationError("priors need non-empty refusal and danger id sets");
    }
    const int vocab = static_cast<int>(lm_head.size());
    for (int id : refusal_ids) {
        if (id < 0 || id >= vocab) throw ValidationError("refusal id out of vocab range");
    }
    for (int id : danger_ids) {
        if (id < 0 || id >= vocab) throw ValidationError("danger id out of vocab range");
    }
    Priors p;
    p.refusal_prior = normalized(mean_rows(lm_head, refusal_ids));
    p.danger_prior = normalized(mean_rows(lm_head, danger_ids));
    p.danger_logit_prior.assign(vocab, 0.0);
    const double mass = 1.0 / static_cast<double>(danger_ids.size());
    for (int id : danger_ids) p.danger_logit_prior[static_cast<std::size_t>(id)] += mass;
    return p;
}

RefusalProfile refusal_profile(const IntrospectionTrace& trace, const RefusalTokenSet& rts,
                               const std::vector<std::vector<double>>& lm_head) {
    if (lm_head.empty()) {
        throw DimensionMismatch("empty LM head");
    }
    if (rts.ids.empty()) {
        throw ValidationError("refusal token set is empty");
    }
    const std::size_t dim = lm_head[0].size();
    const std::vector<double> prior = mean_rows(lm_head, rts.ids);
    RefusalProfile profile;
    profile.F.reserve(trace.hidden_states.size());
    for (const auto& h : trace.hidden_states) {
        if (h.size() != dim) {
            throw DimensionMismatch("trace hidden dim does not match LM head");
        }
        profile.F.push_back(safe_cos(h, prior));
    }
    return profile;
}

std::vector<LayerDiagnostics> layer_diagnostics(const std::vector<IntrospectionTrace>& safe_traces,
                                                const std::vector<IntrospectionTrace>& unsafe_traces,
                                                const Priors& priors) {
    if (safe_traces.empty() || unsafe_traces.empty()) {
        throw EmptyPromptSet("layer diagnostics need both safe and unsafe prompts");
    }
    const std::size_t layers = safe_traces[0].logit_lens.size();
    const std::size_t vocab = priors.danger_logit_prior.size();
    auto check = [&](const IntrospectionTrace& t) {
        if (t.logit_lens.size() != layers) {
            throw DimensionMismatch("traces disagree on layer count");
        }
        for (const auto& row : t.logit_lens) {
            if (row.size() != vocab) {
                throw DimensionMismatch("logit lens width does not match vocab");
            }
        }
    };
    for (const auto& t : safe_traces) check(t);
    for (const auto& t : unsafe_traces) check(t);

    std::vector<LayerDiagnostics> out;
    out.reserve(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        std::vector<double> m_safe(vocab, 0.0);
        std::vector<double> m_unsafe(vocab, 0.0);
        for (const auto& t : safe_traces) {
            for (std::size_t i = 0; i < vocab; ++i) m_safe[i] += t.logit_lens[l][i];
        }
        for (const auto& t : unsafe_traces) {
            for (std::size_t i = 0; i < vocab; ++i) m_unsafe[i] += t.logit_lens[l][i];
        }
        for (auto& x : m_safe) x /= static_cast<double>(safe_traces.size());
        for (auto& x : m_unsafe) x /= static_cast<double>(unsafe_traces.size());

        LayerDiagnostics d;
        d.layer = static_cast<int>(l);
        d.safety_dissimilarity = 1.0 - safe_cos(m_safe, m_unsafe);
        d.danger_similarity = safe_cos(m_unsafe, priors.danger_logit_prior);
        d.score = d.safety_dissimilarity * std::max(d.danger_similarity, 0.0);
        out.push_back(d);
    }
    return out;
}

std::vector<LayerDiagnostics> layer_diagnostics(const IntrospectableModel& model,
                                                const std::vector<std::string>& safe_prompts,
                                                const std::vector<std::string>& unsafe_prompts,
                                                const Priors& priors) {
    if (safe_prompts.empty() || unsafe_prompts.empty()) {
        throw EmptyPromptSet("layer diagnostics need both safe and unsafe prompts");
    }
    auto forward_all = [&](const std::vector<std::string>& prompts) {
        std::vector<IntrospectionTrace> traces;
        traces.reserve(prompts.size());
        for (const auto& p : prompts) {
            auto ids = model.tokenize(p);
            if (ids.empty()) {
                throw ValidationError("prompt produced no tokens: " + p);
            }
            traces.push_back(model.introspect_forward(ids));
        }
        return traces;
    };
    return layer_diagnostics(forward_all(safe_prompts), forward_all(unsafe_prompts), priors);
}

std::vector<int> select_layers(const std::vector<LayerDiagnostics>& diag, int m) {
    if (m < 1 || m > static_cast<int>(diag.size())) {
        throw ValidationError("layer count m out of range");
    }
    std::vector<int> order(diag.size());
    for (std::size_t i = 0; i < diag.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (diag[a].score != diag[b].score) return diag[a].score > diag[b].score;
        return diag[a].layer < diag[b].layer;
    });
    std::vector<int> picked;
    for (int i = 0; i < m; ++i) picked.push_back(diag[order[static_cast<std::size_t>(i)]].layer);
    std::sort(picked.begin(), picked.end());
    return picked;
}

std::pair<std::vector<int>, std::vector<int>> select_tokens(
    const std::vector<std::vector<double>>& mean_unsafe_lens, int top_k, const Priors& priors,
    const std::vector<std::vector<double>>& lm_head) {
    if (top_k < 2) {
        throw ValidationError("top_k must be at least 2");
    }
    if (mean_unsafe_lens.empty()) {
        throw ValidationError("no layer rows given for token selection");
    }
    const int vocab = static_cast<int>(lm_head.size());
    std::set<int> pool;
    for (const auto& row : mean_unsafe_lens) {
        if (static_cast<int>(row.size()) != vocab) {
            throw DimensionMismatch("logit row width does not match vocab");
        }
        std::vector<int> order(row.size());
        for (std::size_t i = 0; i < row.size(); ++i) order[i] = static_cast<int>(i);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (row[static_cast<std::size_t>(a)] != row[static_cast<std::size_t>(b)]) {
                return row[static_cast<std::size_t>(a)] > row[static_cast<std::size_t>(b)];
            }
            return a < b;
        });
        const int take = std::min(top_k, vocab);
        for (int i = 0; i < take; ++i) pool.insert(order[static_cast<std::size_t>(i)]);
    }

    std::vector<int> refusal_set;
    std::vector<int> danger_set;
    for (int t : pool) {
        const auto& e = lm_head[static_cast<std::size_t>(t)];
        const double rc = safe_cos(e, priors.refusal_prior);
        const double dc = safe_cos(e, priors.danger_prior);
        if (rc >= dc) {
            refusal_set.push_back(t);
        } else {
            danger_set.push_back(t);
        }
    }
    if (refusal_set.empty() || danger_set.empty()) {
        throw DegenerateClusters("token pool fell entirely on one side; widen K or adjust priors");
    }
    return {refusal_set, danger_set};
}

std::vector<double> build_steering_vector(const std::vector<std::vector<double>>& lm_head,
                                          const std::vector<int>& refusal_set,
                                          const std::vector<int>& danger_set) {
    if (refusal_set.empty() || danger_set.empty()) {
        throw ValidationError("refusal and danger sets must be non-empty");
    }
    std::set<int> r(refusal_set.begin(), refusal_set.end());
    for (int id : danger_set) {
        if (r.count(id)) {
            throw ValidationError("refusal and danger sets overlap at token " +
                                  std::to_string(id));
        }
    }
    if (lm_head.empty()) {
        throw DimensionMismatch("empty LM head");
    }
    std::vector<double> dir(lm_head[0].size(), 0.0);
    for (int id : refusal_set) {
        const auto& row = lm_head.at(static_cast<std::size_t>(id));
        for (std::size_t i = 0; i < dir.size(); ++i) dir[i] += row[i];
    }
    for (int id : danger_set) {
        const auto& row = lm_head.at(static_cast<std::size_t>(id));
        for (std::size_t i = 0; i < dir.size(); ++i) dir[i] -= row[i];
    }
    const double norm = l2_norm(dir);
    if (norm < 1e-12) {
        throw ZeroDirection("refusal minus danger direction has near-zero norm");
    }
    for (auto& x : dir) x /= norm;
    return dir;
}

double risk_score(const IntrospectionTrace& trace, const SteeringPlan& plan) {
    if (plan.target_layers.empty()) {
        throw ValidationError("plan has no target layers");
    }
    double sim = 0.0;
    for (int l : plan.target_layers) {
        const auto& h = trace.hidden_states.at(static_cast<std::size_t>(l));
        sim += std::max(0.0, safe_cos(h, plan.unsafe_direction));
    }
    sim /= static_cast<double>(plan.target_layers.size());

    const std::vector<double> probs = softmax(trace.logits);
    double mass = 0.0;
    for (int id : plan.danger_ids) {
        mass += probs.at(static_cast<std::size_t>(id));
    }
    return std::clamp(plan.w1 * sim + plan.w2 * mass, 0.0, 1.0);
}

double gate(double r, const GateParams& params) {
    if (params.alpha_max <= 0.0 || params.k <= 0.0) {
        throw ValidationError("gate needs alpha_max > 0 and k > 0");
    }
    return params.alpha_max / (1.0 + std::exp(-params.k * (r - params.r0)));
}

std::vector<double> softmax(const std::vector<double>& logits) {
    if (logits.empty()) {
        throw ValidationError("softmax of empty vector");
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        total += out[i];
    }
    for (auto& x : out) x /= total;
    return out;
}

SteeredTrace apply_steering(const IntrospectionTrace& trace, const SteeringPlan& plan,
                            double alpha) {
    if (alpha < 0.0) {
        throw ValidationError("alpha must be non-negative");
    }
    SteeredTrace out;
    out.hidden_states = trace.hidden_states;
    out.logits = trace.logits;
    out.alpha = alpha;
    if (alpha == 0.0) return out;

    for (int l : plan.target_layers) {
        steer_in_place(out.hidden_states.at(static_cast<std::size_t>(l)), plan.v, alpha);
    }
    adjust_logits(out.logits, plan, alpha);
    return out;
}

SteeredTrace apply_steering(const IntrospectableModel& model, const IntrospectionTrace& trace,
                            const SteeringPlan& plan, double alpha) {
    if (alpha < 0.0) {
        throw ValidationError("alpha must be non-negative");
    }
    SteeredTrace out;
    out.hidden_states = trace.hidden_states;
    out.logits = trace.logits;
    out.alpha = alpha;
    if (alpha == 0.0) return out;
    if (plan.target_layers.empty()) {
        throw ValidationError("plan has no target layers");
    }

    std::set<int> targets(plan.target_layers.begin(), plan.target_layers.end());
    const int first = *targets.begin();
    const int layers = static_cast<int>(out.hidden_states.size());
    if (first < 0 || *targets.rbegin() >= layers) {
        throw ValidationError("target layer outside model depth");
    }

    std::vector<double> h = out.hidden_states[static_cast<std::size_t>(first)];
    steer_in_place(h, plan.v, alpha);
    out.hidden_states[static_cast<std::size_t>(first)] = h;
    for (int l = first + 1; l < layers; ++l) {
        h = model.apply_layer(h, l);
        if (targets.count(l)) {
            steer_in_place(h, plan.v, alpha);
        }
        out.hidden_states[static_cast<std::size_t>(l)] = h;
    }
    out.logits = model.project_logits(out.hidden_states.back());
    adjust_logits(out.logits, plan, alpha);
    return out;
}

SteeringPlan calibrate(const IntrospectableModel& model,
                       const std::vector<std::string>& safe_prompts,
                       const std::vector<std::string>& unsafe_prompts,
                       const SteeringConfig& config) {
    if (safe_prompts.empty() || unsafe_prompts.empty()) {
        throw EmptyPromptSet("calibration needs both safe and unsafe prompts");
    }
    const auto refusal_tokens =
        config.refusal_tokens.empty() ? default_refusal_tokens() : config.refusal_tokens;
    const auto danger_tokens =
        config.danger_tokens.empty() ? default_danger_tokens() : config.danger_tokens;
    const RefusalTokenSet rts = resolve_tokens(model, refusal_tokens);
    const RefusalTokenSet dts = resolve_tokens(model, danger_tokens);
    const Priors priors = make_priors(model.lm_head(), rts.ids, dts.ids);

    auto forward_all = [&](const std::vector<std::string>& prompts) {
        std::vector<IntrospectionTrace> traces;
        traces.reserve(prompts.size());
        for (const auto& p : prompts) {
            auto ids = model.tokenize(p);
            if (ids.empty()) {
                throw ValidationError("prompt produced no tokens: " + p);
            }
            traces.push_back(model.introspect_forward(ids));
        }
        return traces;
    };
    const auto safe_traces = forward_all(safe_prompts);
    const auto unsafe_traces = forward_all(unsafe_prompts);

    const auto diag = layer_diagnostics(safe_traces, unsafe_traces, priors);
    const auto layers = select_layers(diag, config.target_layer_count);

    const int vocab = model.vocab_size();
    std::vector<std::vector<double>> rows;
    for (int l : layers) {
        std::vector<double> row(static_cast<std::size_t>(vocab), 0.0);
        for (const auto& t : unsafe_traces) {
            const auto& lens = t.logit_lens.at(static_cast<std::size_t>(l));
            for (int i = 0; i < vocab; ++i) row[static_cast<std::size_t>(i)] += lens[i];
        }
        for (auto& x : row) x /= static_cast<double>(unsafe_traces.size());
        rows.push_back(std::move(row));
    }

    int k = config.top_k;
    std::pair<std::vector<int>, std::vector<int>> split;
    for (;;) {
        try {
            split = select_tokens(rows, k, priors, model.lm_head());
            break;
        } catch (const DegenerateClusters&) {
            if (k >= vocab) throw;
            k = std::min(k * 2, vocab);
        }
    }

    SteeringPlan plan;
    plan.target_layers = layers;
    plan.refusal_ids = split.first;
    plan.danger_ids = split.second;
    for (int id : plan.refusal_ids) plan.refusal_tokens.push_back(model.vocab().at(id));
    for (int id : plan.danger_ids) plan.danger_tokens.push_back(model.vocab().at(id));
    plan.v = build_steering_vector(model.lm_head(), plan.refusal_ids, plan.danger_ids);
    plan.gate = config.gate;
    plan.logit_bonus = config.logit_bonus;
    plan.w1 = config.w1;
    plan.w2 = config.w2;
    plan.effective_top_k = k;
    plan.model_layers = model.layers();
    plan.model_hidden_dim = model.hidden_dim();
    plan.model_vocab_size = vocab;

    std::vector<double> dir(static_cast<std::size_t>(model.hidden_dim()), 0.0);
    std::size_t n = 0;
    for (const auto& t : unsafe_traces) {
        for (int l : layers) {
            const auto& h = t.hidden_states.at(static_cast<std::size_t>(l));
            for (std::size_t i = 0; i < dir.size(); ++i) dir[i] += h[i];
            ++n;
        }
    }
    for (auto& x : dir) x /= static_cast<double>(n);
    plan.unsafe_direction = normalized(dir);

    plan.validate();
    return plan;
}

void SteeringPlan::validate() const {
    if (target_layers.empty()) {
        throw ValidationError("plan has no target layers");
    }
    for (std::size_t i = 0; i < target_layers.size(); ++i) {
        if (target_layers[i] < 0) {
            throw ValidationError("negative target layer");
        }
        if (model_layers > 0 && target_layers[i] >= model_layers) {
            throw ValidationError("target layer outside model depth");
        }
        if (i > 0 && target_layers[i] <= target_layers[i - 1]) {
            throw ValidationError("target layers must be strictly ascending");
        }
    }
    if (refusal_ids.empty() || danger_ids.empty()) {
        throw ValidationError("plan token sets must be non-empty");
    }
    std::set<int> r(refusal_ids.begin(), refusal_ids.end());
    for (int id : danger_ids) {
        if (r.count(id)) {
            throw ValidationError("refusal and danger sets overlap");
        }
    }
    if (v.empty() || std::abs(l2_norm(v) - 1.0) > 1e-9) {
        throw ValidationError("steering vector is not unit norm");
    }
    if (unsafe_direction.size() != v.size()) {
        throw ValidationError("unsafe direction dimension mismatch");
    }
    if (gate.alpha_max <= 0.0 || gate.k <= 0.0) {
        throw ValidationError("gate needs alpha_max > 0 and k > 0");
    }
    if (w1 < 0.0 || w2 < 0.0) {
        throw ValidationError("risk weights must be non-negative");
    }
}

nlohmann::json SteeringPlan::to_json() const {
    nlohmann::json j;
    j["target_layers"] = target_layers;
    j["refusal"] = {{"ids", refusal_ids}, {"tokens", refusal_tokens}};
    j["danger"] = {{"ids", danger_ids}, {"tokens", danger_tokens}};
    j["v"] = v;
    j["gate"] = {{"alpha_max", gate.alpha_max}, {"k", gate.k}, {"r0", gate.r0}};
    j["logit_bonus"] = logit_bonus;
    j["weights"] = {{"w1", w1}, {"w2", w2}};
    j["unsafe_direction"] = unsafe_direction;
    j["top_k"] = effective_top_k;
    j["model"] = {{"layers", model_layers},
                  {"hidden_dim", model_hidden_dim},
                  {"vocab_size", model_vocab_size}};
    return j;
}

SteeringPlan SteeringPlan::from_json(const nlohmann::json& j) {
    try {
        SteeringPlan plan;
        plan.target_layers = j.at("target_layers").get<std::vector<int>>();
        plan.refusal_ids = j.at("refusal").at("ids").get<std::vector<int>>();
        plan.refusal_tokens = j.at("refusal").at("tokens").get<std::vector<std::string>>();
        plan.danger_ids = j.at("danger").at("ids").get<std::vector<int>>();
        plan.danger_tokens = j.at("danger").at("tokens").get<std::vector<std::string>>();
        plan.v = j.at("v").get<std::vector<double>>();
        plan.gate.alpha_max = j.at("gate").at("alpha_max").get<double>();
        plan.gate.k = j.at("gate").at("k").get<double>();
        plan.gate.r0 = j.at("gate").at("r0").get<double>();
        plan.logit_bonus = j.at("logit_bonus").get<double>();
        plan.w1 = j.at("weights").at("w1").get<double>();
        plan.w2 = j.at("weights").at("w2").get<double>();
        plan.unsafe_direction = j.at("unsafe_direction").get<std::vector<double>>();
        plan.effective_top_k = j.at("top_k").get<int>();
        plan.model_layers = j.at("model").at("layers").get<int>();
        plan.model_hidden_dim = j.at("model").at("hidden_dim").get<int>();
        plan.model_vocab_size = j.at("model").at("vocab_size").get<int>();
        plan.validate();
        return plan;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("steering plan: ") + e.what());
    }
}

void SteeringPlan::save(const std::string& path) const {
    util::write_file(path, to_json().dump(2) + "\n");
}

SteeringPlan SteeringPlan::load(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(util::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw SchemaError(std::string("steering plan: ") + e.what());
    }
    return from_json(j);
}

std::string steered_decode(const IntrospectableModel& model, const std::string& prompt,
                           const SteeringPlan& plan, int max_new_tokens,
                           std::vector<SteeredStep>* steps) {
    std::vector<int> ids = model.tokenize(prompt);
    if (ids.empty()) {
        throw ValidationError("prompt produced no tokens");
    }
    const auto eos = model.token_id("<eos>");
    const int limit = std::clamp(max_new_tokens, 0, 1024);

    std::string out;
    for (int step = 0; step < limit; ++step) {
        const IntrospectionTrace trace = model.introspect_forward(ids);
        const double r = risk_score(trace, plan);
        const double alpha = gate(r, plan.gate);
        const SteeredTrace steered = apply_steering(model, trace, plan, alpha);
        if (steps) steps->push_back({r, alpha});

        int best = 0;
        for (int v = 1; v < static_cast<int>(steered.logits.size()); ++v) {
            if (steered.logits[static_cast<std::size_t>(v)] >
                steered.logits[static_cast<std::size_t>(best)]) {
                best = v;
            }
        }
        if (eos && best == *eos) break;
        ids.push_back(best);
        if (!out.empty()) out += ' ';
        out += model.vocab().at(static_cast<std::size_t>(best));
    }
    return out;
}

}  // namespace guardgate
