#include "guardgate/cli.hpp"

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "nlohmann/json.hpp"

#include "guardgate/agents.hpp"
#include "guardgate/errors.hpp"
#include "guardgate/eval.hpp"
#include "guardgate/gateway.hpp"
#include "guardgate/model.hpp"
#include "guardgate/paraphrase.hpp"
#include "guardgate/perplexity.hpp"
#include "guardgate/risk.hpp"
#include "guardgate/sanitizer.hpp"
#include "guardgate/steering.hpp"
#include "guardgate/util.hpp"

namespace guardgate {
namespace {

using nlohmann::json;

constexpr const char* kComplyText = "Sure, here is exactly how to do that, step by step.";
constexpr const char* kRefuseText = "I'm sorry, but I can't help with that.";

std::atomic<bool> g_serve_stop{false};

void handle_stop_signal(int) { g_serve_stop.store(true); }

std::string slurp(std::istream& in) {
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string trim_copy(const std::string& s) {
    const char* ws = " \t\r\n";
    auto b = s.find_first_not_of(ws);
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

std::string data_path(const std::string& name) {
    return std::string(GUARDGATE_DATA_DIR) + "/" + name;
}

// File problems around user-supplied artifacts are data errors (exit 3),
// not runtime failures.
template <typename F>
auto load_or_data_error(const std::string& what, F&& f) {
    try {
        return f();
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        throw ValidationError(what + ": " + e.what());
    }
}

// One entry per line, '#' comments and blanks skipped.
std::vector<std::string> read_lines(const std::string& path) {
    std::string text = load_or_data_error("cannot read " + path,
                                          [&] { return util::read_file(path); });
    std::vector<std::string> out;
    std::istringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        std::string t = trim_copy(line);
        if (t.empty() || t[0] == '#') continue;
        out.push_back(t);
    }
    return out;
}

// .jsonl files contribute their unsafe prompts, anything else is a plain
// line-per-entry corpus.
std::vector<std::string> corpus_from_files(const std::vector<std::string>& paths) {
    std::vector<std::string> corpus;
    for (const auto& path : paths) {
        if (path.size() >= 6 && path.substr(path.size() - 6) == ".jsonl") {
            std::string text = load_or_data_error("cannot read " + path,
                                                  [&] { return util::read_file(path); });
            std::istringstream ss(text);
            std::string line;
            int line_no = 0;
            while (std::getline(ss, line)) {
                ++line_no;
                if (trim_copy(line).empty()) continue;
                json j = json::parse(line, nullptr, false);
                if (j.is_discarded() || !j.is_object() || !j.contains("prompt") ||
                    !j["prompt"].is_string()) {
                    throw SchemaError(path + ":" + std::to_string(line_no) +
                                      ": expected {\"prompt\", \"label\"}");
                }
                if (j.value("label", "") == "unsafe") corpus.push_back(j["prompt"]);
            }
        } else {
            auto lines = read_lines(path);
            corpus.insert(corpus.end(), lines.begin(), lines.end());
        }
    }
    return corpus;
}

std::string fmt(double x, int prec = 4) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", prec, x);
    return buf;
}

std::shared_ptr<TextGenerator> adapter_from_json(const json& j) {
    if (!j.is_object() || !j.contains("type") || !j["type"].is_string()) {
        throw SchemaError("adapter config needs a string \"type\"");
    }
    std::string type = j["type"].get<std::string>();
    if (type == "toy") {
        auto seed = j.value("seed", ToyTransformer::kDefaultSeed);
        return std::make_shared<ToyAdapter>(std::make_shared<const ToyTransformer>(seed));
    }
    if (type == "scripted") {
        std::map<std::string, std::string> responses;
        if (j.contains("responses")) {
            if (!j["responses"].is_object()) throw SchemaError("\"responses\" must be an object");
            for (const auto& [k, v] : j["responses"].items()) {
                if (!v.is_string()) throw SchemaError("scripted responses must be strings");
                responses[k] = v.get<std::string>();
            }
        }
        return std::make_shared<ScriptedAdapter>(responses, j.value("default", std::string("OK.")));
    }
    if (type == "comply") {
        return std::make_shared<ScriptedAdapter>(std::map<std::string, std::string>{}, kComplyText);
    }
    if (type == "refuse") {
        return std::make_shared<ScriptedAdapter>(std::map<std::string, std::string>{}, kRefuseText);
    }
    if (type == "remote") {
        if (!j.contains("base_url") || !j["base_url"].is_string()) {
            throw SchemaError("remote adapter needs \"base_url\"");
        }
        RemoteAdapter::Config cfg;
        cfg.base_url = j["base_url"].get<std::string>();
        cfg.path = j.value("path", cfg.path);
        cfg.model = j.value("model", cfg.model);
        cfg.timeout_sec = j.value("timeout_sec", cfg.timeout_sec);
        cfg.max_retries = j.value("max_retries", cfg.max_retries);
        cfg.backoff_ms = j.value("backoff_ms", cfg.backoff_ms);
        if (j.contains("api_key_env")) {
            const char* v = std::getenv(j["api_key_env"].get<std::string>().c_str());
            if (v != nullptr) cfg.api_key = v;
        } else {
            cfg.api_key = j.value("api_key", cfg.api_key);
        }
        return std::make_shared<RemoteAdapter>(cfg);
    }
    throw SchemaError("unknown adapter type: " + type);
}

json parse_config_file(const std::string& path) {
    std::string text = load_or_data_error("cannot read " + path,
                                          [&] { return util::read_file(path); });
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw SchemaError(path + ": not a JSON object");
    return j;
}

void load_agent_config(const json& cfg, PipelineAdapters& agents, PipelineConfig& pc) {
    for (const char* key : {"rewriter", "core", "judge"}) {
        if (!cfg.contains(key)) throw SchemaError(std::string("agent config needs \"") + key + "\"");
    }
    agents.rewriter = adapter_from_json(cfg["rewriter"]);
    agents.core = adapter_from_json(cfg["core"]);
    agents.judge = adapter_from_json(cfg["judge"]);
    pc.refusal_text = cfg.value("refusal_text", pc.refusal_text);
    pc.core_system_prompt = cfg.value("core_system_prompt", pc.core_system_prompt);
    pc.judge_on_original = cfg.value("judge_on_original", pc.judge_on_original);
}

RiskTier tier_from_name(const std::string& name) {
    if (name == "low") return RiskTier::low;
    if (name == "medium") return RiskTier::medium;
    if (name == "high") return RiskTier::high;
    throw SchemaError("unknown risk tier: " + name);
}

// ---- subcommand option bags -------------------------------------------------

struct Common {
    bool json_out = false;
    std::uint64_t seed = 0;
    std::string config_path;
};

struct SanitizeOpts {
    std::string rules_path;
};

struct ParaphraseOpts {
    std::string lexicon_path = data_path("lexicon.txt");
    double rate = 0.3;
};

struct ScoreOpts {
    std::string centroid_path;
    std::size_t dim = 256;
    double medium = 0.75;
    double high = 0.90;
};

struct BuildCentroidOpts {
    std::vector<std::string> data;
    std::string out_path;
    std::size_t dim = 256;
};

struct PerplexityOpts {
    std::string train_path;
    std::string model_path;
    std::string out_path;
    int order = 3;
    double alpha = 0.01;
    double threshold = 0.0;  // 0 -> model calibration max
};

struct SteerDemoOpts {
    std::string safe_path = data_path("calibration/safe.txt");
    std::string unsafe_path = data_path("calibration/unsafe.txt");
    std::string plan_out;
    std::string prompt;
    std::uint64_t model_seed = ToyTransformer::kDefaultSeed;
    SteeringConfig cfg;
};

struct EvalOpts {
    std::vector<std::string> data;
    std::string defense = "none";
    std::string model = "toy";
    std::string upstream_url;
    std::string upstream_path = "/v1/generate";
    std::string judge_url;
    std::string rules_path;
    std::string lexicon_path;
    std::string centroid_path;
    std::size_t dim = 256;
    std::string content_filter_path;
    std::string refusal_phrases_path;
    std::string agents_config_path;
    std::string safe_path = data_path("calibration/safe.txt");
    std::string unsafe_path = data_path("calibration/unsafe.txt");
    int parallelism = 4;
    int max_failures = 5;
    int steered_tokens = 16;
    std::string out_path;
    std::string csv_path;
};

// ---- subcommands ------------------------------------------------------------

int cmd_sanitize(const Common& common, const SanitizeOpts& opts, std::istream& in,
                 std::ostream& out) {
    RuleSet rules = opts.rules_path.empty()
                        ? RuleSet::defaults()
                        : load_or_data_error("cannot load rules " + opts.rules_path,
                                             [&] { return RuleSet::load(opts.rules_path); });
    SanitizedPrompt sp = sanitize(RawPrompt{slurp(in), "stdin"}, rules);
    if (common.json_out) {
        out << sanitized_to_json(sp) << "\n";
    } else {
        out << sp.text << "\n";
    }
    return 0;
}

int cmd_paraphrase(const Common& common, const ParaphraseOpts& opts, std::istream& in,
                   std::ostream& out) {
    Lexicon lexicon = load_or_data_error("cannot load lexicon " + opts.lexicon_path,
                                         [&] { return Lexicon::load(opts.lexicon_path); });
    std::string input = slurp(in);
    std::string text = paraphrase(input, lexicon, {common.seed, opts.rate, std::nullopt});
    if (common.json_out) {
        out << json{{"text", text}, {"changed", text != input}}.dump() << "\n";
    } else {
        out << text << "\n";
    }
    return 0;
}

int cmd_score(const Common& common, const ScoreOpts& opts, std::istream& in, std::ostream& out) {
    UnsafeCentroid centroid =
        load_or_data_error("cannot load centroid " + opts.centroid_path,
                           [&] { return UnsafeCentroid::load(opts.centroid_path); });
    HashingEmbedder embedder(opts.dim);
    RiskPolicy policy = RiskPolicy::defaults();
    policy.medium_threshold = opts.medium;
    policy.high_threshold = opts.high;
    policy.validate();
    std::string prompt = trim_copy(slurp(in));
    RiskAssessment a = assess(prompt, prompt, centroid, embedder, policy);
    if (common.json_out) {
        out << json{{"risk_score", a.risk_score},
                    {"tier", tier_name(a.tier)},
                    {"cos_original", a.cos_original},
                    {"cos_paraphrased", a.cos_paraphrased},
                    {"degraded", a.degraded},
                    {"system_prompt", select_system_prompt(a, policy)}}
                   .dump()
            << "\n";
    } else {
        out << "score=" << fmt(a.risk_score) << " tier=" << tier_name(a.tier)
            << " cos_original=" << fmt(a.cos_original)
            << " cos_paraphrased=" << fmt(a.cos_paraphrased) << "\n";
    }
    return 0;
}

int cmd_build_centroid(const Common& common, const BuildCentroidOpts& opts, std::ostream& out) {
    std::vector<std::string> corpus = corpus_from_files(opts.data);
    HashingEmbedder embedder(opts.dim);
    UnsafeCentroid centroid = build_centroid(corpus, embedder);
    load_or_data_error("cannot write " + opts.out_path, [&] {
        centroid.save(opts.out_path);
        return 0;
    });
    if (common.json_out) {
        out << json{{"out", opts.out_path},
                    {"dim", centroid.vector.size()},
                    {"corpus_size", centroid.corpus_size},
                    {"corpus_hash", centroid.corpus_hash}}
                   .dump()
            << "\n";
    } else {
        out << "centroid dim=" << centroid.vector.size() << " corpus=" << centroid.corpus_size
            << " -> " << opts.out_path << "\n";
    }
    return 0;
}

int cmd_perplexity(const Common& common, const PerplexityOpts& opts, std::istream& in,
                   std::ostream& out) {
    if (!opts.train_path.empty()) {
        auto corpus = read_lines(opts.train_path);
        NgramModel model = NgramModel::train(corpus, opts.order, opts.alpha);
        load_or_data_error("cannot write " + opts.out_path, [&] {
            model.save(opts.out_path);
            return 0;
        });
        double max_ppl = model.calibrate();
        if (common.json_out) {
            out << json{{"out", opts.out_path},
                        {"order", model.order()},
                        {"vocab_size", model.vocab_size()},
                        {"calibration_max_ppl", max_ppl}}
                       .dump()
                << "\n";
        } else {
            out << "trained order=" << model.order() << " vocab=" << model.vocab_size()
                << " calibration_max_ppl=" << fmt(max_ppl, 2) << " -> " << opts.out_path << "\n";
        }
        return 0;
    }
    NgramModel model = load_or_data_error("cannot load model " + opts.model_path,
                                          [&] { return NgramModel::load(opts.model_path); });
    double threshold = opts.threshold > 0.0 ? opts.threshold : model.calibrate();
    double ppl = model.perplexity(trim_copy(slurp(in)));
    PerplexityVerdict v = flag(ppl, threshold);
    if (common.json_out) {
        out << json{{"ppl", v.ppl}, {"threshold", v.threshold}, {"flagged", v.flagged}}.dump()
            << "\n";
    } else {
        out << "ppl=" << fmt(v.ppl, 2) << " threshold=" << fmt(v.threshold, 2)
            << " flagged=" << (v.flagged ? "yes" : "no") << "\n";
    }
    return 0;
}

int cmd_steer_demo(const Common& common, const SteerDemoOpts& opts, std::ostream& out) {
    auto safe_prompts = read_lines(opts.safe_path);
    auto unsafe_prompts = read_lines(opts.unsafe_path);
    ToyTransformer toy(opts.model_seed);

    SteeringPlan plan = calibrate(toy, safe_prompts, unsafe_prompts, opts.cfg);
    if (!opts.plan_out.empty()) {
        load_or_data_error("cannot write " + opts.plan_out, [&] {
            plan.save(opts.plan_out);
            return 0;
        });
    }

    RefusalTokenSet refusal = resolve_tokens(
        toy, opts.cfg.refusal_tokens.empty() ? default_refusal_tokens() : opts.cfg.refusal_tokens);
    RefusalTokenSet danger = resolve_tokens(
        toy, opts.cfg.danger_tokens.empty() ? default_danger_tokens() : opts.cfg.danger_tokens);
    Priors priors = make_priors(toy.lm_head(), refusal.ids, danger.ids);
    auto diag = layer_diagnostics(toy, safe_prompts, unsafe_prompts, priors);

    std::string prompt = opts.prompt.empty() ? unsafe_prompts.front() : opts.prompt;
    IntrospectionTrace trace = toy.introspect_forward(toy.tokenize(prompt));
    double r = risk_score(trace, plan);
    double alpha = gate(r, plan.gate);
    SteeredTrace steered = apply_steering(toy, trace, plan, alpha);
    std::vector<double> before = softmax(trace.logits);
    std::vector<double> after = softmax(steered.logits);

    auto mass = [](const std::vector<double>& p, const std::vector<int>& ids) {
        double m = 0.0;
        for (int id : ids) m += p[static_cast<std::size_t>(id)];
        return m;
    };
    auto selected = [&](int layer) {
        for (int l : plan.target_layers)
            if (l == layer) return true;
        return false;
    };

    if (common.json_out) {
        json jd = json::array();
        for (const auto& d : diag) {
            jd.push_back({{"layer", d.layer},
                          {"safety_dissimilarity", d.safety_dissimilarity},
                          {"danger_similarity", d.danger_similarity},
                          {"score", d.score},
                          {"selected", selected(d.layer)}});
        }
        json jt = json::array();
        for (int id : plan.refusal_ids) {
            jt.push_back({{"token", toy.vocab()[static_cast<std::size_t>(id)]},
                          {"id", id},
                          {"cluster", "R"},
                          {"p_before", before[static_cast<std::size_t>(id)]},
                          {"p_after", after[static_cast<std::size_t>(id)]}});
        }
        for (int id : plan.danger_ids) {
            jt.push_back({{"token", toy.vocab()[static_cast<std::size_t>(id)]},
                          {"id", id},
                          {"cluster", "B"},
                          {"p_before", before[static_cast<std::size_t>(id)]},
                          {"p_after", after[static_cast<std::size_t>(id)]}});
        }
        out << json{{"plan", plan.to_json()},
                    {"diagnostics", jd},
                    {"demo",
                     {{"prompt", prompt},
                      {"risk", r},
                      {"alpha", alpha},
                      {"tokens", jt},
                      {"refusal_mass_before", mass(before, plan.refusal_ids)},
                      {"refusal_mass_after", mass(after, plan.refusal_ids)},
                      {"danger_mass_before", mass(before, plan.danger_ids)},
                      {"danger_mass_after", mass(after, plan.danger_ids)}}}}
                   .dump(2)
            << "\n";
        return 0;
    }

    out << "layer  dissimilarity  danger_sim    score  selected\n";
    for (const auto& d : diag) {
        out << std::setw(5) << d.layer << "  " << std::setw(13) << fmt(d.safety_dissimilarity)
            << "  " << std::setw(10) << fmt(d.danger_similarity) << "  " << std::setw(7)
            << fmt(d.score) << "  " << (selected(d.layer) ? "*" : "") << "\n";
    }
    out << "prompt: " << prompt << "\n";
    out << "risk=" << fmt(r) << " alpha=" << fmt(alpha) << "\n";
    out << "token         cluster  p_before   p_after\n";
    auto row = [&](int id, const char* cluster) {
        out << std::setw(12) << std::left << toy.vocab()[static_cast<std::size_t>(id)]
            << std::right << "  " << std::setw(7) << cluster << "  " << std::setw(8)
            << fmt(before[static_cast<std::size_t>(id)], 6) << "  " << std::setw(8)
            << fmt(after[static_cast<std::size_t>(id)], 6) << "\n";
    };
    for (int id : plan.refusal_ids) row(id, "R");
    for (int id : plan.danger_ids) row(id, "B");
    out << "refusal mass: " << fmt(mass(before, plan.refusal_ids), 6) << " -> "
        << fmt(mass(after, plan.refusal_ids), 6) << "\n";
    out << "danger mass:  " << fmt(mass(before, plan.danger_ids), 6) << " -> "
        << fmt(mass(after, plan.danger_ids), 6) << "\n";
    return 0;
}

int cmd_agent_run(const Common& common, std::istream& in, std::ostream& out) {
    if (common.config_path.empty()) {
        throw ValidationError("agent-run needs --config with rewriter/core/judge adapters");
    }
    json cfg = parse_config_file(common.config_path);
    PipelineAdapters agents;
    PipelineConfig pc;
    load_agent_config(cfg, agents, pc);
    std::string prompt = trim_copy(slurp(in));
    if (prompt.empty()) throw ValidationError("empty prompt on stdin");
    PipelineTranscript t = run_pipeline(prompt, agents, pc);
    if (common.json_out) {
        out << t.to_json().dump(2) << "\n";
    } else {
        out << t.final_response << "\n";
    }
    return 0;
}

int cmd_eval(const Common& common, const EvalOpts& opts, std::ostream& out) {
    auto records = load_and_merge(opts.data, common.seed);

    std::shared_ptr<const ToyTransformer> toy;
    auto shared_toy = [&] {
        if (!toy) toy = std::make_shared<const ToyTransformer>();
        return toy;
    };

    std::shared_ptr<TextGenerator> model;
    if (opts.model == "toy") {
        model = std::make_shared<ToyAdapter>(shared_toy());
    } else if (opts.model == "comply") {
        model = std::make_shared<ScriptedAdapter>(std::map<std::string, std::string>{}, kComplyText);
    } else if (opts.model == "refuse") {
        model = std::make_shared<ScriptedAdapter>(std::map<std::string, std::string>{}, kRefuseText);
    } else if (opts.model == "remote") {
        if (opts.upstream_url.empty()) throw ValidationError("--model remote needs --upstream-url");
        RemoteAdapter::Config cfg;
        cfg.base_url = opts.upstream_url;
        cfg.path = opts.upstream_path;
        model = std::make_shared<RemoteAdapter>(cfg);
    } else {
        throw ValidationError("unknown --model: " + opts.model);
    }

    EvalDefense defense;
    defense.name = opts.defense;
    if (opts.defense == "prompt_level") {
        if (!opts.rules_path.empty()) {
            defense.rules = load_or_data_error("cannot load rules " + opts.rules_path,
                                               [&] { return RuleSet::load(opts.rules_path); });
        }
        if (!opts.lexicon_path.empty()) {
            defense.lexicon = load_or_data_error("cannot load lexicon " + opts.lexicon_path,
                                                 [&] { return Lexicon::load(opts.lexicon_path); });
        }
        if (!opts.centroid_path.empty()) {
            defense.centroid =
                load_or_data_error("cannot load centroid " + opts.centroid_path,
                                   [&] { return UnsafeCentroid::load(opts.centroid_path); });
            defense.embedder = std::make_shared<HashingEmbedder>(opts.dim);
        }
    } else if (opts.defense == "agent_pipeline") {
        std::string path = !opts.agents_config_path.empty() ? opts.agents_config_path
                                                            : common.config_path;
        if (path.empty()) {
            throw ValidationError("agent_pipeline defense needs --agents-config");
        }
        load_agent_config(parse_config_file(path), defense.agents, defense.pipeline);
    } else if (opts.defense == "steering") {
        if (opts.model != "toy") throw ValidationError("steering defense runs on the toy model");
        defense.toy = shared_toy();
        defense.plan = calibrate(*defense.toy, read_lines(opts.safe_path),
                                 read_lines(opts.unsafe_path), SteeringConfig{});
        defense.steered_tokens = opts.steered_tokens;
    } else if (opts.defense != "none") {
        throw ValidationError("unknown --defense: " + opts.defense);
    }

    EvalSettings settings;
    settings.seed = common.seed;
    settings.parallelism = opts.parallelism;
    settings.max_failures = opts.max_failures;
    if (!opts.refusal_phrases_path.empty()) {
        settings.refusal_phrases = read_lines(opts.refusal_phrases_path);
    }
    if (!opts.content_filter_path.empty()) {
        for (const auto& line : read_lines(opts.content_filter_path)) {
            settings.content_filter.push_back(RuleSet::compile_pattern(line));
        }
    }
    if (!opts.judge_url.empty()) {
        RemoteAdapter::Config cfg;
        cfg.base_url = opts.judge_url;
        settings.judge = std::make_shared<RemoteAdapter>(cfg);
    }

    ASRReport report = run_eval(records, defense, model, settings);

    if (!opts.out_path.empty()) {
        load_or_data_error("cannot write " + opts.out_path, [&] {
            util::write_file(opts.out_path, report.to_json().dump(2) + "\n");
            return 0;
        });
    }
    if (!opts.csv_path.empty()) {
        load_or_data_error("cannot write " + opts.csv_path, [&] {
            util::write_file(opts.csv_path, report.to_csv());
            return 0;
        });
    }
    if (common.json_out) {
        out << report.to_json().dump(2) << "\n";
    } else {
        out << "condition=" << report.condition << " n_unsafe=" << report.n_unsafe
            << " n_safe=" << report.n_safe << " asr=" << fmt(report.asr)
            << " over_refusal=" << fmt(report.over_refusal_rate)
            << (report.aborted ? " aborted" : "") << "\n";
    }
    return report.aborted ? 2 : 0;
}

GatewayOptions gateway_options_from_json(const json& cfg) {
    GatewayOptions opts;
    if (cfg.contains("listen")) {
        opts.host = cfg["listen"].value("host", opts.host);
        opts.port = cfg["listen"].value("port", opts.port);
    }
    if (!cfg.contains("upstream")) throw SchemaError("serve config needs \"upstream\"");
    opts.upstream = adapter_from_json(cfg["upstream"]);
    std::string fail_mode = cfg.value("fail_mode", "closed");
    if (fail_mode != "closed" && fail_mode != "open") {
        throw SchemaError("fail_mode must be \"closed\" or \"open\"");
    }
    opts.fail_closed = fail_mode == "closed";
    opts.refusal_text = cfg.value("refusal_text", opts.refusal_text);
    opts.log_path = cfg.value("log_path", opts.log_path);
    opts.seed = cfg.value("seed", opts.seed);
    if (cfg.contains("bearer_token_env")) {
        const char* v = std::getenv(cfg["bearer_token_env"].get<std::string>().c_str());
        if (v != nullptr) opts.bearer_token = v;
    }
    if (cfg.contains("decoding")) {
        const json& d = cfg["decoding"];
        opts.decoding.max_input_tokens = d.value("max_input_tokens", opts.decoding.max_input_tokens);
        opts.decoding.max_new_tokens = d.value("max_new_tokens", opts.decoding.max_new_tokens);
    }

    if (cfg.contains("sanitize")) {
        const json& s = cfg["sanitize"];
        opts.sanitize_enabled = s.value("enabled", true);
        if (s.contains("rules")) {
            std::string path = s["rules"].get<std::string>();
            opts.rules = load_or_data_error("cannot load rules " + path,
                                            [&] { return RuleSet::load(path); });
        }
    }
    if (cfg.contains("perplexity")) {
        const json& p = cfg["perplexity"];
        opts.perplexity_enabled = p.value("enabled", false);
        if (opts.perplexity_enabled) {
            if (!p.contains("model")) throw SchemaError("perplexity block needs \"model\"");
            std::string path = p["model"].get<std::string>();
            opts.ppl_model = std::make_shared<const NgramModel>(load_or_data_error(
                "cannot load perplexity model " + path, [&] { return NgramModel::load(path); }));
            opts.ppl_threshold = p.value("threshold", opts.ppl_model->calibrate());
        }
    }
    if (cfg.contains("paraphrase")) {
        const json& p = cfg["paraphrase"];
        opts.paraphrase_enabled = p.value("enabled", true);
        opts.substitution_rate = p.value("rate", opts.substitution_rate);
        if (p.contains("lexicon")) {
            std::string path = p["lexicon"].get<std::string>();
            opts.lexicon = load_or_data_error("cannot load lexicon " + path,
                                              [&] { return Lexicon::load(path); });
        }
    }
    if (cfg.contains("risk")) {
        const json& r = cfg["risk"];
        opts.risk_enabled = r.value("enabled", false);
        if (opts.risk_enabled) {
            if (!r.contains("centroid")) throw SchemaError("risk block needs \"centroid\"");
            std::string path = r["centroid"].get<std::string>();
            opts.centroid = load_or_data_error("cannot load centroid " + path,
                                               [&] { return UnsafeCentroid::load(path); });
            opts.embedder = std::make_shared<HashingEmbedder>(r.value("dim", std::size_t{256}));
            opts.policy.medium_threshold = r.value("medium", opts.policy.medium_threshold);
            opts.policy.high_threshold = r.value("high", opts.policy.high_threshold);
            opts.policy.fail_closed = r.value("fail_closed", opts.policy.fail_closed);
            if (r.contains("system_prompts")) {
                for (const auto& [k, v] : r["system_prompts"].items()) {
                    opts.policy.system_prompts[tier_from_name(k)] = v.get<std::string>();
                }
            }
        }
    }
    if (cfg.contains("agent")) {
        const json& a = cfg["agent"];
        opts.agent_enabled = a.value("enabled", false);
        if (opts.agent_enabled) {
            for (const char* key : {"rewriter", "judge"}) {
                if (!a.contains(key)) {
                    throw SchemaError(std::string("agent block needs \"") + key + "\"");
                }
            }
            opts.agents.rewriter = adapter_from_json(a["rewriter"]);
            opts.agents.judge = adapter_from_json(a["judge"]);
            opts.agents.core = opts.upstream;
            opts.pipeline.judge_on_original = a.value("judge_on_original", false);
            opts.pipeline.refusal_text = opts.refusal_text;
        }
    }
    return opts;
}

int cmd_serve(const Common& common, std::ostream& out) {
    if (common.config_path.empty()) throw ValidationError("serve needs --config");
    json cfg = parse_config_file(common.config_path);
    Gateway gateway(gateway_options_from_json(cfg));
    gateway.start();
    if (common.json_out) {
        out << json{{"listening", {{"host", cfg.contains("listen")
                                                ? cfg["listen"].value("host", "127.0.0.1")
                                                : "127.0.0.1"},
                                   {"port", gateway.port()}}}}
                   .dump()
            << "\n";
    } else {
        out << "guardgate listening on port " << gateway.port() << "\n";
    }
    out.flush();
    g_serve_stop.store(false);
    std::signal(SIGINT, handle_stop_signal);
    std::signal(SIGTERM, handle_stop_signal);
    while (!g_serve_stop.load()) {
        std::this_thread::sleep_for(std::chrono::milliseconds(200));
    }
    gateway.stop();
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::istream& in, std::ostream& out,
            std::ostream& err) {
    CLI::App app{"jailbreak-defense gateway and evaluation toolkit"};
    app.name("guardgate");
    app.fallthrough();
    app.require_subcommand(1);

    Common common;
    app.add_option("--config", common.config_path, "JSON config file (serve, agent-run)");
    app.add_flag("--json", common.json_out, "emit a JSON document on stdout");
    app.add_option("--seed", common.seed, "seed for randomized steps");

    int rc = 0;

    SanitizeOpts san;
    auto* sub_san = app.add_subcommand("sanitize", "strip jailbreak patterns from stdin");
    sub_san->add_option("--rules", san.rules_path, "rules file (default: built-in rules)");
    sub_san->callback([&] { rc = cmd_sanitize(common, san, in, out); });

    ParaphraseOpts par;
    auto* sub_par = app.add_subcommand("paraphrase", "seeded synonym substitution on stdin");
    sub_par->add_option("--lexicon", par.lexicon_path, "synonym lexicon file");
    sub_par->add_option("--rate", par.rate, "per-token substitution probability");
    sub_par->callback([&] { rc = cmd_paraphrase(common, par, in, out); });

    ScoreOpts sco;
    auto* sub_sco = app.add_subcommand("score", "risk-score the prompt on stdin");
    sub_sco->add_option("--centroid", sco.centroid_path, "unsafe centroid file")->required();
    sub_sco->add_option("--dim", sco.dim, "embedding dimension");
    sub_sco->add_option("--medium", sco.medium, "medium tier threshold");
    sub_sco->add_option("--high", sco.high, "high tier threshold");
    sub_sco->callback([&] { rc = cmd_score(common, sco, in, out); });

    BuildCentroidOpts cen;
    auto* sub_cen = app.add_subcommand("build-centroid", "embed a corpus and save its centroid");
    sub_cen->add_option("--data", cen.data, "corpus file, repeatable (.jsonl or lines)")
        ->required();
    sub_cen->add_option("--out", cen.out_path, "output centroid file")->required();
    sub_cen->add_option("--dim", cen.dim, "embedding dimension");
    sub_cen->callback([&] { rc = cmd_build_centroid(common, cen, out); });

    PerplexityOpts ppl;
    auto* sub_ppl = app.add_subcommand("perplexity", "train or apply the n-gram flagger");
    auto* ppl_train = sub_ppl->add_option("--train", ppl.train_path, "training corpus file");
    auto* ppl_model = sub_ppl->add_option("--model", ppl.model_path, "trained model file");
    sub_ppl->add_option("--out", ppl.out_path, "output model file (with --train)");
    sub_ppl->add_option("--order", ppl.order, "n-gram order");
    sub_ppl->add_option("--alpha", ppl.alpha, "add-alpha smoothing");
    sub_ppl->add_option("--threshold", ppl.threshold, "flag threshold (default: calibration max)");
    ppl_train->excludes(ppl_model);
    sub_ppl->callback([&] {
        if (ppl.train_path.empty() && ppl.model_path.empty()) {
            throw CLI::RequiredError("--train or --model");
        }
        if (!ppl.train_path.empty() && ppl.out_path.empty()) {
            throw CLI::RequiredError("--out");
        }
        rc = cmd_perplexity(common, ppl, in, out);
    });

    SteerDemoOpts ste;
    auto* sub_ste = app.add_subcommand("steer-demo", "calibrate on the toy model and show the "
                                                     "steered distribution");
    sub_ste->add_option("--safe", ste.safe_path, "safe calibration prompts file");
    sub_ste->add_option("--unsafe", ste.unsafe_path, "unsafe calibration prompts file");
    sub_ste->add_option("--plan", ste.plan_out, "write the steering plan here");
    sub_ste->add_option("--prompt", ste.prompt, "demo prompt (default: first unsafe prompt)");
    sub_ste->add_option("--model-seed", ste.model_seed, "toy model weight seed");
    sub_ste->add_option("--layers", ste.cfg.target_layer_count, "target layer count m");
    sub_ste->add_option("--top-k", ste.cfg.top_k, "token pool size K");
    sub_ste->add_option("--alpha-max", ste.cfg.gate.alpha_max, "gate ceiling");
    sub_ste->add_option("--gate-k", ste.cfg.gate.k, "gate steepness");
    sub_ste->add_option("--r0", ste.cfg.gate.r0, "gate midpoint");
    sub_ste->add_option("--beta", ste.cfg.logit_bonus, "logit bonus");
    sub_ste->callback([&] { rc = cmd_steer_demo(common, ste, out); });

    auto* sub_agent = app.add_subcommand("agent-run", "rewrite/generate/judge the stdin prompt");
    sub_agent->callback([&] { rc = cmd_agent_run(common, in, out); });

    EvalOpts ev;
    auto* sub_eval = app.add_subcommand("eval", "attack-success-rate benchmark");
    sub_eval->add_option("--data", ev.data, "dataset .jsonl, repeatable")->required();
    sub_eval->add_option("--defense", ev.defense,
                         "none | prompt_level | agent_pipeline | steering");
    sub_eval->add_option("--model", ev.model, "toy | comply | refuse | remote");
    sub_eval->add_option("--upstream-url", ev.upstream_url, "remote model base url");
    sub_eval->add_option("--upstream-path", ev.upstream_path, "remote model path");
    sub_eval->add_option("--judge-url", ev.judge_url, "remote judge base url");
    sub_eval->add_option("--rules", ev.rules_path, "sanitizer rules (prompt_level)");
    sub_eval->add_option("--lexicon", ev.lexicon_path, "paraphrase lexicon (prompt_level)");
    sub_eval->add_option("--centroid", ev.centroid_path, "unsafe centroid (prompt_level)");
    sub_eval->add_option("--dim", ev.dim, "embedding dimension");
    sub_eval->add_option("--content-filter", ev.content_filter_path, "content filter rules file");
    sub_eval->add_option("--refusal-phrases", ev.refusal_phrases_path, "refusal phrases file");
    sub_eval->add_option("--agents-config", ev.agents_config_path,
                         "adapter config (agent_pipeline)");
    sub_eval->add_option("--safe", ev.safe_path, "steering calibration safe prompts");
    sub_eval->add_option("--unsafe", ev.unsafe_path, "steering calibration unsafe prompts");
    sub_eval->add_option("--parallelism", ev.parallelism, "records in flight");
    sub_eval->add_option("--max-failures", ev.max_failures, "abort after this many failures");
    sub_eval->add_option("--steered-tokens", ev.steered_tokens, "decode length (steering)");
    sub_eval->add_option("--out", ev.out_path, "write the JSON report here");
    sub_eval->add_option("--csv", ev.csv_path, "write the (condition, asr) CSV here");
    sub_eval->callback([&] { rc = cmd_eval(common, ev, out); });

    auto* sub_serve = app.add_subcommand("serve", "run the gateway");
    sub_serve->callback([&] { rc = cmd_serve(common, out); });

    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("guardgate");
    for (const auto& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? 0 : 1;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return 3;
    } catch (const RuntimeFailure& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const json::exception& e) {
        err << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    return rc;
}

}  // namespace guardgate
