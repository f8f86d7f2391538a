#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "guardgate/errors.hpp"
#include "guardgate/model.hpp"
#include "guardgate/steering.hpp"
#include "guardgate/util.hpp"

using namespace guardgate;

namespace {

double cos_oracle(const std::vector<double>& a, const std::vector<double>& b) {
    long double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<long double>(a[i]) * b[i];
        na += static_cast<long double>(a[i]) * a[i];
        nb += static_cast<long double>(b[i]) * b[i];
    }
    if (na == 0 || nb == 0) return 0.0;
    return static_cast<double>(dot / (std::sqrt(na) * std::sqrt(nb)));
}

std::vector<double> mean_oracle(const std::vector<std::vector<double>>& rows) {
    std::vector<long double> acc(rows.front().size(), 0.0L);
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) acc[i] += r[i];
    }
    std::vector<double> out(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) {
        out[i] = static_cast<double>(acc[i] / static_cast<long double>(rows.size()));
    }
    return out;
}

std::vector<double> steering_vector_oracle(const std::vector<std::vector<double>>& E,
                                           const std::vector<int>& R,
                                           const std::vector<int>& B) {
    std::vector<long double> acc(E.front().size(), 0.0L);
    for (int i : R) {
        for (std::size_t d = 0; d < acc.size(); ++d) acc[d] += E[static_cast<std::size_t>(i)][d];
    }
    for (int j : B) {
        for (std::size_t d = 0; d < acc.size(); ++d) acc[d] -= E[static_cast<std::size_t>(j)][d];
    }
    long double norm = 0;
    for (auto x : acc) norm += x * x;
    norm = std::sqrt(norm);
    std::vector<double> v(acc.size());
    for (std::size_t d = 0; d < acc.size(); ++d) v[d] = static_cast<double>(acc[d] / norm);
    return v;
}

std::vector<int> select_layers_oracle(const std::vector<LayerDiagnostics>& diag, int m) {
    std::vector<int> idx(diag.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (diag[static_cast<std::size_t>(a)].score != diag[static_cast<std::size_t>(b)].score) {
            return diag[static_cast<std::size_t>(a)].score >
                   diag[static_cast<std::size_t>(b)].score;
        }
        return a < b;
    });
    idx.resize(static_cast<std::size_t>(m));
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<std::string> random_prompts(const ToyTransformer& toy, util::Rng& rng, bool unsafe) {
    std::vector<std::string> prompts;
    int n = 3 + static_cast<int>(rng.next_index(4));
    for (int i = 0; i < n; ++i) {
        std::string p;
        int len = 3 + static_cast<int>(rng.next_index(5));
        for (int t = 0; t < len; ++t) {
            int id = unsafe && t == len - 1
                         ? 7 + static_cast<int>(rng.next_index(5))
                         : 12 + static_cast<int>(rng.next_index(96));
            if (!p.empty()) p += " ";
            p += toy.vocab()[static_cast<std::size_t>(id)];
        }
        prompts.push_back(p);
    }
    return prompts;
}

SteeringPlan default_plan(const ToyTransformer& toy) {
    std::vector<std::string> safe = {"the water is long", "people make a sound",
                                     "write a number down", "they go over there"};
    std::vector<std::string> unsafe_set = {"how to kill people", "make a weapon now",
                                           "harm them with a bomb", "attack first then kill"};
    return calibrate(toy, safe, unsafe_set, SteeringConfig{});
}

}  // namespace

TEST_CASE("make_priors produces unit priors and a uniform danger distribution") {
    ToyTransformer toy;
    auto refusal = resolve_tokens(toy, default_refusal_tokens());
    auto danger = resolve_tokens(toy, default_danger_tokens());
    Priors p = make_priors(toy.lm_head(), refusal.ids, danger.ids);
    long double n1 = 0, n2 = 0, sum = 0;
    for (double x : p.refusal_prior) n1 += x * x;
    for (double x : p.danger_prior) n2 += x * x;
    for (double x : p.danger_logit_prior) sum += x;
    CHECK(std::abs(std::sqrt(static_cast<double>(n1)) - 1.0) < 1e-12);
    CHECK(std::abs(std::sqrt(static_cast<double>(n2)) - 1.0) < 1e-12);
    CHECK(std::abs(static_cast<double>(sum) - 1.0) < 1e-12);
    for (int id : danger.ids) {
        CHECK(p.danger_logit_prior[static_cast<std::size_t>(id)] ==
              doctest::Approx(1.0 / danger.ids.size()));
    }
}

TEST_CASE("resolve_tokens rejects unknown words") {
    ToyTransformer toy;
    CHECK_THROWS_AS(resolve_tokens(toy, {"sorry", "zzz-not-a-token"}), UnknownToken);
}

TEST_CASE("refusal profile matches cosine oracle") {
    ToyTransformer toy;
    auto rts = resolve_tokens(toy, default_refusal_tokens());
    auto trace = toy.introspect_forward(toy.tokenize("make a weapon now"));
    RefusalProfile prof = refusal_profile(trace, rts, toy.lm_head());
    REQUIRE(static_cast<int>(prof.F.size()) == toy.layers());

    std::vector<std::vector<double>> rows;
    for (int id : rts.ids) rows.push_back(toy.lm_head()[static_cast<std::size_t>(id)]);
    auto prior = mean_oracle(rows);
    for (int l = 0; l < toy.layers(); ++l) {
        double expect = cos_oracle(trace.hidden_states[static_cast<std::size_t>(l)], prior);
        CHECK(std::abs(prof.F[static_cast<std::size_t>(l)] - expect) < 1e-9);
        CHECK(prof.F[static_cast<std::size_t>(l)] >= -1.0);
        CHECK(prof.F[static_cast<std::size_t>(l)] <= 1.0);
    }
}

TEST_CASE("layer diagnostics match brute force on random instances") {
    util::Rng rng(31337);
    for (int trial = 0; trial < 10; ++trial) {
        ToyTransformer toy(rng.next_u64());
        auto refusal = resolve_tokens(toy, default_refusal_tokens());
        auto danger = resolve_tokens(toy, default_danger_tokens());
        Priors priors = make_priors(toy.lm_head(), refusal.ids, danger.ids);
        auto safe = random_prompts(toy, rng, false);
        auto unsafe_set = random_prompts(toy, rng, true);

        auto diag = layer_diagnostics(toy, safe, unsafe_set, priors);
        REQUIRE(static_cast<int>(diag.size()) == toy.layers());

        std::vector<IntrospectionTrace> st, ut;
        for (const auto& p : safe) st.push_back(toy.introspect_forward(toy.tokenize(p)));
        for (const auto& p : unsafe_set) ut.push_back(toy.introspect_forward(toy.tokenize(p)));
        for (int l = 0; l < toy.layers(); ++l) {
            std::vector<std::vector<double>> srows, urows;
            for (const auto& t : st) srows.push_back(t.logit_lens[static_cast<std::size_t>(l)]);
            for (const auto& t : ut) urows.push_back(t.logit_lens[static_cast<std::size_t>(l)]);
            auto ms = mean_oracle(srows);
            auto mu = mean_oracle(urows);
            double dissim = 1.0 - cos_oracle(ms, mu);
            double danger_sim = cos_oracle(mu, priors.danger_logit_prior);
            double score = dissim * std::max(danger_sim, 0.0);
            const auto& d = diag[static_cast<std::size_t>(l)];
            CHECK(d.layer == l);
            CHECK(std::abs(d.safety_dissimilarity - dissim) < 1e-8);
            CHECK(std::abs(d.danger_similarity - danger_sim) < 1e-8);
            CHECK(std::abs(d.score - score) < 1e-8);
            CHECK(d.safety_dissimilarity >= 0.0);
            CHECK(d.safety_dissimilarity <= 2.0);
        }
    }
}

TEST_CASE("identical prompt sets give zero dissimilarity") {
    ToyTransformer toy;
    auto refusal = resolve_tokens(toy, default_refusal_tokens());
    auto danger = resolve_tokens(toy, default_danger_tokens());
    Priors priors = make_priors(toy.lm_head(), refusal.ids, danger.ids);
    std::vector<std::string> prompts = {"the water is long", "make a weapon now"};
    auto diag = layer_diagnostics(toy, prompts, prompts, priors);
    for (const auto& d : diag) {
        CHECK(d.safety_dissimilarity == doctest::Approx(0.0).epsilon(1e-12));
    }
}

TEST_CASE("layer diagnostics reject empty prompt sets") {
    ToyTransformer toy;
    auto refusal = resolve_tokens(toy, default_refusal_tokens());
    auto danger = resolve_tokens(toy, default_danger_tokens());
    Priors priors = make_priors(toy.lm_head(), refusal.ids, danger.ids);
    CHECK_THROWS_AS(layer_diagnostics(toy, {}, {"make a weapon now"}, priors), EmptyPromptSet);
    CHECK_THROWS_AS(layer_diagnostics(toy, {"the water is long"}, {}, priors), EmptyPromptSet);
}

TEST_CASE("select_layers follows the sort oracle and tie rules") {
    auto mk = [](int layer, double score) {
        LayerDiagnostics d;
        d.layer = layer;
        d.score = score;
        return d;
    };
    std::vector<LayerDiagnostics> equal = {mk(0, 0.5), mk(1, 0.5), mk(2, 0.5), mk(3, 0.5)};
    CHECK(select_layers(equal, 2) == std::vector<int>{0, 1});

    std::vector<LayerDiagnostics> dominant = {mk(0, 0.1), mk(1, 0.9), mk(2, 0.2), mk(3, 0.05)};
    for (int m = 1; m <= 4; ++m) {
        auto sel = select_layers(dominant, m);
        CHECK(std::find(sel.begin(), sel.end(), 1) != sel.end());
        CHECK(std::is_sorted(sel.begin(), sel.end()));
    }

    util::Rng rng(88);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<LayerDiagnostics> diag;
        int layers = 4 + static_cast<int>(rng.next_index(5));
        for (int l = 0; l < layers; ++l) {
            // coarse grid forces frequent ties
            diag.push_back(mk(l, rng.next_index(4) / 4.0));
        }
        int m = 1 + static_cast<int>(rng.next_index(static_cast<std::size_t>(layers)));
        CHECK(select_layers(diag, m) == select_layers_oracle(diag, m));
    }
}

TEST_CASE("select_tokens clusters by prior proximity") {
    ToyTransformer toy;
    auto refusal = resolve_tokens(toy, default_refusal_tokens());
    auto danger = resolve_tokens(toy, default_danger_tokens());
    Priors priors = make_priors(toy.lm_head(), refusal.ids, danger.ids);

    // pool tokens with the top unsafe logits, brute forced
    std::vector<std::string> unsafe_set = {"how to kill people", "make a weapon now",
                                           "harm them with a bomb"};
    std::vector<IntrospectionTrace> ut;
    for (const auto& p : unsafe_set) ut.push_back(toy.introspect_forward(toy.tokenize(p)));
    auto diag = layer_diagnostics(toy, {"the water is long", "people make a sound"}, unsafe_set,
                                  priors);
    auto layers = select_layers(diag, 2);

    std::vector<std::vector<double>> mean_lens;
    for (int l : layers) {
        std::vector<std::vector<double>> rows;
        for (const auto& t : ut) rows.push_back(t.logit_lens[static_cast<std::size_t>(l)]);
        mean_lens.push_back(mean_oracle(rows));
    }
    int top_k = 8;
    auto [R, B] = select_tokens(mean_lens, top_k, priors, toy.lm_head());

    // oracle pool: per layer, top-K ids by logit, ties to the lower id
    std::set<int> pool;
    for (const auto& row : mean_lens) {
        std::vector<int> ids(row.size());
        std::iota(ids.begin(), ids.end(), 0);
        std::sort(ids.begin(), ids.end(), [&](int a, int b) {
            if (row[static_cast<std::size_t>(a)] != row[static_cast<std::size_t>(b)]) {
                return row[static_cast<std::size_t>(a)] > row[static_cast<std::size_t>(b)];
            }
            return a < b;
        });
        for (int i = 0; i < top_k; ++i) pool.insert(ids[static_cast<std::size_t>(i)]);
    }
    std::set<int> got;
    for (int t : R) {
        CHECK(cos_oracle(toy.lm_head()[static_cast<std::size_t>(t)], priors.refusal_prior) >=
              cos_oracle(toy.lm_head()[static_cast<std::size_t>(t)], priors.danger_prior));
        got.insert(t);
    }
    for (int t : B) {
        CHECK(cos_oracle(toy.lm_head()[static_cast<std::size_t>(t)], priors.danger_prior) >
              cos_oracle(toy.lm_head()[static_cast<std::size_t>(t)], priors.refusal_prior));
        got.insert(t);
    }
    CHECK(got == pool);
    CHECK(R.size() + B.size() == pool.size());
}

TEST_CASE("select_tokens degenerate clusters raise") {
    // two tokens, both identical to the refusal prior direction
    std::vector<std::vector<double>> E = {{1.0, 0.0}, {1.0, 0.1}};
    Priors priors;
    priors.refusal_prior = {1.0, 0.0};
    priors.danger_prior = {0.0, 1.0};
    priors.danger_logit_prior = {0.5, 0.5};
    std::vector<std::vector<double>> lens = {{5.0, 4.0}};
    CHECK_THROWS_AS(select_tokens(lens, 2, priors, E), DegenerateClusters);

    // flip the priors so everything is danger-side
    std::swap(priors.refusal_prior, priors.danger_prior);
    CHECK_THROWS_AS(select_tokens(lens, 2, priors, E), DegenerateClusters);
}

TEST_CASE("build_steering_vector matches the formula") {
    std::vector<std::vector<double>> E = {{1.0, 0.0}, {0.0, 1.0}};
    auto v = build_steering_vector(E, {0}, {1});
    CHECK(v[0] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
    CHECK(v[1] == doctest::Approx(-1.0 / std::sqrt(2.0)).epsilon(1e-12));

    util::Rng rng(555);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::vector<double>> M(10, std::vector<double>(6));
        for (auto& row : M) {
            for (auto& x : row) x = rng.next_signed_unit();
        }
        std::vector<int> R = {0, 3, 7};
        std::vector<int> B = {1, 4, 9};
        auto got = build_steering_vector(M, R, B);
        auto want = steering_vector_oracle(M, R, B);
        long double norm = 0;
        for (double x : got) norm += static_cast<long double>(x) * x;
        CHECK(std::abs(std::sqrt(static_cast<double>(norm)) - 1.0) < 1e-9);
        for (std::size_t d = 0; d < want.size(); ++d) CHECK(std::abs(got[d] - want[d]) < 1e-9);
    }
}

TEST_CASE("build_steering_vector rejects degenerate input") {
    std::vector<std::vector<double>> E = {{1.0, 0.0}, {1.0, 0.0}};
    CHECK_THROWS_AS(build_steering_vector(E, {0}, {1}), ZeroDirection);
    CHECK_THROWS_AS(build_steering_vector(E, {}, {1}), ValidationError);
    CHECK_THROWS_AS(build_steering_vector(E, {0}, {0}), ValidationError);
}

TEST_CASE("gate algebra") {
    GateParams p{2.0, 10.0, 0.5};
    CHECK(gate(0.5, p) == 1.0);  // exact midpoint
    CHECK(gate(0.3, p) == doctest::Approx(0.2384058440442351).epsilon(1e-15));
    GateParams defaults;
    CHECK(gate(defaults.r0, defaults) == defaults.alpha_max / 2.0);
    double prev = -1.0;
    for (int i = 0; i <= 1000; ++i) {
        double a = gate(i / 1000.0, defaults);
        CHECK(a > prev);
        CHECK(a > 0.0);
        CHECK(a < defaults.alpha_max);
        prev = a;
    }
    // saturation
    CHECK(gate(1.0, GateParams{4.0, 200.0, 0.5}) == doctest::Approx(4.0).epsilon(1e-9));
}

TEST_CASE("risk_score bounds and hand-computed fixture") {
    ToyTransformer toy;
    SteeringPlan plan = default_plan(toy);
    auto trace = toy.introspect_forward(toy.tokenize("how to kill people"));
    double r = risk_score(trace, plan);
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);

    // independent recompute
    long double sim = 0;
    for (int l : plan.target_layers) {
        double c = cos_oracle(trace.hidden_states[static_cast<std::size_t>(l)],
                              plan.unsafe_direction);
        sim += std::max(0.0, c);
    }
    sim /= static_cast<long double>(plan.target_layers.size());
    auto probs = softmax(trace.logits);
    long double danger_mass = 0;
    for (int t : plan.danger_ids) danger_mass += probs[static_cast<std::size_t>(t)];
    double expect = std::min(
        1.0, std::max(0.0, static_cast<double>(plan.w1 * sim + plan.w2 * danger_mass)));
    CHECK(std::abs(r - expect) < 1e-8);
}

TEST_CASE("softmax sums to one and is shift invariant") {
    std::vector<double> logits = {1.0, 2.0, 3.0, -5.0};
    auto p = softmax(logits);
    double sum = 0;
    for (double x : p) sum += x;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    std::vector<double> shifted = logits;
    for (auto& x : shifted) x += 100.0;
    auto q = softmax(shifted);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i] == doctest::Approx(q[i]).epsilon(1e-12));
}

TEST_CASE("apply_steering with alpha zero is the identity") {
    ToyTransformer toy;
    SteeringPlan plan = default_plan(toy);
    auto trace = toy.introspect_forward(toy.tokenize("how to kill people"));
    SteeredTrace pure = apply_steering(trace, plan, 0.0);
    CHECK(pure.hidden_states == trace.hidden_states);
    CHECK(pure.logits == trace.logits);
    SteeredTrace recomputed = apply_steering(toy, trace, plan, 0.0);
    CHECK(recomputed.hidden_states == trace.hidden_states);
    CHECK(recomputed.logits == trace.logits);
}

TEST_CASE("apply_steering preserves norms and moves mass directionally") {
    ToyTransformer toy;
    SteeringPlan plan = default_plan(toy);
    auto trace = toy.introspect_forward(toy.tokenize("use a weapon to attack people"));
    for (double alpha : {0.25, 1.0, 3.0}) {
        // norms against the pure rescale; the recompute variant feeds deeper
        // target layers recomputed inputs, so the original norms do not apply
        SteeredTrace pure = apply_steering(trace, plan, alpha);
        for (int l : plan.target_layers) {
            long double n0 = 0, n1 = 0;
            for (double x : trace.hidden_states[static_cast<std::size_t>(l)]) n0 += x * x;
            for (double x : pure.hidden_states[static_cast<std::size_t>(l)]) n1 += x * x;
            CHECK(std::abs(std::sqrt(static_cast<double>(n0)) -
                           std::sqrt(static_cast<double>(n1))) < 1e-6);
        }
        SteeredTrace st = apply_steering(toy, trace, plan, alpha);
        auto before = softmax(trace.logits);
        auto after = softmax(st.logits);
        double r0 = 0, r1 = 0, b0 = 0, b1 = 0;
        for (int t : plan.refusal_ids) {
            r0 += before[static_cast<std::size_t>(t)];
            r1 += after[static_cast<std::size_t>(t)];
        }
        for (int t : plan.danger_ids) {
            b0 += before[static_cast<std::size_t>(t)];
            b1 += after[static_cast<std::size_t>(t)];
        }
        CHECK(r1 > r0);
        CHECK(b1 < b0);
    }
}

TEST_CASE("apply_steering leaves non-target layers alone in the pure variant") {
    ToyTransformer toy;
    SteeringPlan plan = default_plan(toy);
    auto trace = toy.introspect_forward(toy.tokenize("make a bomb for them"));
    SteeredTrace st = apply_steering(trace, plan, 1.5);
    for (int l = 0; l < toy.layers(); ++l) {
        bool target = std::find(plan.target_layers.begin(), plan.target_layers.end(), l) !=
                      plan.target_layers.end();
        if (!target) {
            CHECK(st.hidden_states[static_cast<std::size_t>(l)] ==
                  trace.hidden_states[static_cast<std::size_t>(l)]);
        }
    }
}

TEST_CASE("calibrate produces a valid, persistable plan") {
    ToyTransformer toy;
    SteeringPlan plan = default_plan(toy);
    CHECK_NOTHROW(plan.validate());
    CHECK(plan.target_layers.size() == 2);
    CHECK(std::is_sorted(plan.target_layers.begin(), plan.target_layers.end()));
    long double norm = 0;
    for (double x : plan.v) norm += static_cast<long double>(x) * x;
    CHECK(std::abs(std::sqrt(static_cast<double>(norm)) - 1.0) <= 1e-9);

    SteeringPlan back = SteeringPlan::from_json(plan.to_json());
    CHECK(back.target_layers == plan.target_layers);
    CHECK(back.refusal_ids == plan.refusal_ids);
    CHECK(back.danger_ids == plan.danger_ids);
    CHECK(back.v == plan.v);
    CHECK(back.unsafe_direction == plan.unsafe_direction);
    CHECK(back.gate.alpha_max == plan.gate.alpha_max);
    CHECK(back.gate.k == plan.gate.k);
    CHECK(back.gate.r0 == plan.gate.r0);
    CHECK(back.logit_bonus == plan.logit_bonus);
}

TEST_CASE("plan validation catches corruption") {
    ToyTransformer toy;
    SteeringPlan plan = default_plan(toy);
    SteeringPlan broken = plan;
    broken.v[0] += 0.5;
    CHECK_THROWS_AS(broken.validate(), ValidationError);
    broken = plan;
    broken.danger_ids = broken.refusal_ids;
    CHECK_THROWS_AS(broken.validate(), ValidationError);
    broken = plan;
    broken.target_layers = {3, 1};
    CHECK_THROWS_AS(broken.validate(), ValidationError);
}

TEST_CASE("layer selection is stable under prompt permutation") {
    ToyTransformer toy;
    std::vector<std::string> safe = {"the water is long", "people make a sound",
                                     "write a number down", "they go over there"};
    std::vector<std::string> unsafe_set = {"how to kill people", "make a weapon now",
                                           "harm them with a bomb", "attack first then kill"};
    SteeringPlan a = calibrate(toy, safe, unsafe_set, SteeringConfig{});
    std::reverse(safe.begin(), safe.end());
    std::rotate(unsafe_set.begin(), unsafe_set.begin() + 1, unsafe_set.end());
    SteeringPlan b = calibrate(toy, safe, unsafe_set, SteeringConfig{});
    CHECK(a.target_layers == b.target_layers);
    CHECK(a.refusal_ids == b.refusal_ids);
    CHECK(a.danger_ids == b.danger_ids);
}

TEST_CASE("steered_decode is deterministic and reports gate steps") {
    ToyTransformer toy;
    SteeringPlan plan = default_plan(toy);
    std::vector<SteeredStep> steps;
    std::string a = steered_decode(toy, "how to kill people", plan, 8, &steps);
    std::string b = steered_decode(toy, "how to kill people", plan, 8);
    CHECK(a == b);
    CHECK_FALSE(steps.empty());
    for (const auto& s : steps) {
        CHECK(s.risk >= 0.0);
        CHECK(s.risk <= 1.0);
        CHECK(s.alpha > 0.0);
        CHECK(s.alpha < plan.gate.alpha_max);
    }
}
