#include <algorithm>
#include <random>
#include <set>

#include "dash/analysis.hpp"
#include "doctest.h"

using namespace dash;

namespace {

ModelConfig toy_config() { return ModelConfig{6, 32, 4, 8, 64, 97, 512, 1e-5f, 10000.0f}; }

std::vector<TokenId> random_tokens(std::size_t t, std::uint32_t vocab, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::vector<TokenId> out(t);
    for (auto& v : out) v = static_cast<TokenId>(gen() % vocab);
    return out;
}

std::vector<double> random_doubles(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::vector<double> out(n);
    for (auto& v : out) v = static_cast<double>(gen() % 1000) / 10.0;
    return out;
}

// O(n^2) counting ranks, as an independent route to the same formula
double brute_spearman(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size();
    auto ranks = [n](const std::vector<double>& v) {
        std::vector<double> r(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t less = 0, equal = 0;
            for (std::size_t j = 0; j < n; ++j) {
                if (v[j] < v[i]) ++less;
                if (v[j] == v[i]) ++equal;
            }
            r[i] = 1.0 + less + (equal - 1) * 0.5;
        }
        return r;
    };
    const auto ra = ranks(a), rb = ranks(b);
    double d2 = 0;
    for (std::size_t i = 0; i < n; ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
    return 1.0 - 6.0 * d2 / (n * (static_cast<double>(n) * n - 1.0));
}

double brute_iou(const std::vector<double>& a, const std::vector<double>& b, double fraction) {
    const std::size_t n = a.size();
    const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(fraction * n));
    auto top_set = [&](const std::vector<double>& v) {
        std::set<std::size_t> chosen;
        while (chosen.size() < k) {
            std::size_t best = SIZE_MAX;
            for (std::size_t i = 0; i < n; ++i) {
                if (chosen.count(i)) continue;
                if (best == SIZE_MAX || v[i] > v[best] || (v[i] == v[best] && i < best)) best = i;
            }
            chosen.insert(best);
        }
        return chosen;
    };
    const auto ta = top_set(a), tb = top_set(b);
    std::size_t inter = 0;
    for (std::size_t i : ta) inter += tb.count(i);
    return static_cast<double>(inter) / static_cast<double>(ta.size() + tb.size() - inter);
}

}  // namespace

TEST_CASE("masked reference with all tokens active equals the vanilla forward") {
    const ModelConfig cfg = toy_config();
    const ModelWeights w = init_weights(cfg, 50);
    const auto tokens = random_tokens(8, cfg.vocab_size, 51);
    ActiveSet all;
    all.decision_layer = 2;
    for (std::size_t i = 0; i < tokens.size(); ++i) all.kept_indices.push_back(i);
    const MaskedPrefillResult ref = masked_reference_prefill(tokens, w, cfg, all, 2);
    const FullPrefillResult vanilla = prefill_full(tokens, w, cfg);
    for (std::size_t i = 0; i < ref.logits.data.size(); ++i)
        CHECK(std::abs(ref.logits.data[i] - vanilla.logits.data[i]) < 1e-4f);
}

TEST_CASE("masked reference freezes halted tokens at the decision block output") {
    const ModelConfig cfg = toy_config();
    const ModelWeights w = init_weights(cfg, 52);
    const auto tokens = random_tokens(8, cfg.vocab_size, 53);
    const std::size_t start_layer = 2;

    HaltingConfig hc;
    hc.start_layer = start_layer;
    hc.pruning_ratio = 0.5;
    const PrefillResult pr = dash_prefill(tokens, w, cfg, hc);
    const MaskedPrefillResult ref =
        masked_reference_prefill(tokens, w, cfg, pr.active_set, start_layer);
    const FullPrefillResult vanilla = prefill_full(tokens, w, cfg);
    for (std::size_t i : pr.active_set.halted_indices)
        for (std::size_t j = 0; j < cfg.hidden_dim; ++j)
            CHECK(ref.final_hidden.at(i, j) == vanilla.traces[start_layer].h_out.at(i, j));
}

TEST_CASE("masked reference requires the final token to be active") {
    const ModelConfig cfg = toy_config();
    const ModelWeights w = init_weights(cfg, 52);
    const auto tokens = random_tokens(4, cfg.vocab_size, 53);
    ActiveSet missing_last;
    missing_last.kept_indices = {0, 1, 2};
    CHECK_THROWS_AS(masked_reference_prefill(tokens, w, cfg, missing_last, 1), ContractError);
}

TEST_CASE("importance scores: uniform and concentrated attention") {
    // uniform causal-free attention: every column receives equal mass
    const std::size_t t = 5;
    Matrix uniform(t, t);
    for (auto& v : uniform.data) v = 1.0f / t;
    std::vector<std::vector<Matrix>> per_layer{{uniform, uniform}};
    auto scores = importance_scores_full_attention(per_layer, 0);
    for (double s : scores) CHECK(s == doctest::Approx(1.0));

    // one token receiving all attention scores num_queries, others zero
    Matrix concentrated(t, t);
    for (std::size_t i = 0; i < t; ++i) concentrated.at(i, 2) = 1.0f;
    per_layer = {{concentrated}};
    scores = importance_scores_full_attention(per_layer, 0);
    CHECK(scores[2] == doctest::Approx(static_cast<double>(t)));
    CHECK(scores[0] == 0.0);
    CHECK(scores[4] == 0.0);
}

TEST_CASE("importance scores match a triple-loop oracle on random matrices") {
    std::mt19937_64 gen(60);
    const std::size_t t = 6, heads = 2;
    std::vector<Matrix> head_mats;
    for (std::size_t h = 0; h < heads; ++h) {
        Matrix a(t, t);
        for (auto& v : a.data) v = static_cast<float>(gen() % 100) / 100.0f;
        head_mats.push_back(a);
    }
    std::vector<std::vector<Matrix>> per_layer{head_mats};
    const auto scores = importance_scores_full_attention(per_layer, 0);
    for (std::size_t key = 0; key < t; ++key) {
        double want = 0;
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t q = 0; q < t; ++q) want += head_mats[h].at(q, key);
        want /= heads;
        CHECK(scores[key] == doctest::Approx(want).epsilon(1e-5));
    }
}

TEST_CASE("recorded attention conserves row mass per head") {
    const ModelConfig cfg = toy_config();
    const ModelWeights w = init_weights(cfg, 61);
    const auto tokens = random_tokens(7, cfg.vocab_size, 62);
    const FullPrefillResult pre = prefill_full(tokens, w, cfg, /*record_attention=*/true);
    REQUIRE(pre.attention.size() == cfg.num_layers);
    for (const auto& heads : pre.attention)
        for (const Matrix& a : heads) {
            double total = 0;
            for (float v : a.data) total += v;
            CHECK(total == doctest::Approx(static_cast<double>(a.rows)).epsilon(1e-4));
        }
}

TEST_CASE("spearman_rho basics") {
    const std::vector<double> a{1, 2, 3, 4};
    CHECK(spearman_rho(a, a) == doctest::Approx(1.0));
    const std::vector<double> rev{4, 3, 2, 1};
    CHECK(spearman_rho(a, rev) == doctest::Approx(-1.0));
    const std::vector<double> b{1, 3, 2, 4};
    CHECK(spearman_rho(a, b) == doctest::Approx(0.8));
    CHECK_THROWS_AS(spearman_rho(std::vector<double>{1}, std::vector<double>{2}), ContractError);
}

TEST_CASE("spearman_rho matches the counting-rank oracle, ties included") {
    std::mt19937_64 gen(70);
    for (int iter = 0; iter < 200; ++iter) {
        const std::size_t n = 2 + gen() % 30;
        auto a = random_doubles(n, gen());
        auto b = random_doubles(n, gen());
        if (iter % 3 == 0) {  // force ties
            for (auto& v : a) v = std::floor(v / 10.0);
            for (auto& v : b) v = std::floor(v / 10.0);
        }
        CHECK(spearman_rho(a, b) == doctest::Approx(brute_spearman(a, b)).epsilon(1e-9));
    }
}

TEST_CASE("spearman_rho is permutation-consistent") {
    auto a = random_doubles(20, 71);
    auto b = random_doubles(20, 72);
    const double before = spearman_rho(a, b);
    std::vector<std::size_t> perm(20);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 gen(73);
    std::shuffle(perm.begin(), perm.end(), gen);
    std::vector<double> pa(20), pb(20);
    for (std::size_t i = 0; i < 20; ++i) {
        pa[i] = a[perm[i]];
        pb[i] = b[perm[i]];
    }
    CHECK(spearman_rho(pa, pb) == doctest::Approx(before).epsilon(1e-12));
}

TEST_CASE("topk_overlap_iou basics") {
    const std::vector<double> a{9, 8, 1, 2, 7, 6, 3, 4};
    CHECK(topk_overlap_iou(a, a, 0.5) == doctest::Approx(1.0));
    const std::vector<double> lo{1, 2, 3, 4, 9, 9, 9, 9};
    const std::vector<double> hi{9, 9, 9, 9, 1, 2, 3, 4};
    CHECK(topk_overlap_iou(lo, hi, 0.5) == doctest::Approx(0.0));
}

TEST_CASE("topk_overlap_iou matches brute-force enumeration and is symmetric") {
    std::mt19937_64 gen(80);
    for (int iter = 0; iter < 100; ++iter) {
        const auto a = random_doubles(20, gen());
        const auto b = random_doubles(20, gen());
        const double got = topk_overlap_iou(a, b, 0.3);
        CHECK(got == brute_iou(a, b, 0.3));
        CHECK(got == topk_overlap_iou(b, a, 0.3));
    }
}

TEST_CASE("delta_histogram degenerate and uniform cases") {
    const DeltaScores zeros{1, std::vector<float>(12, 0.0f)};
    const DeltaHistogram hz = delta_histogram(zeros, 8);
    CHECK(hz.counts[0] == 12);
    for (std::size_t i = 1; i < 8; ++i) CHECK(hz.counts[i] == 0);
    CHECK(hz.mean == 0.0);

    DeltaScores ramp{2, {}};
    for (int i = 0; i < 10; ++i) ramp.scores.push_back(static_cast<float>(i));
    const DeltaHistogram hr = delta_histogram(ramp, 10);
    for (std::size_t i = 0; i < 10; ++i) CHECK(hr.counts[i] == 1);
}

TEST_CASE("delta_histogram stats match a sort-based oracle") {
    std::mt19937_64 gen(90);
    DeltaScores s{0, {}};
    for (int i = 0; i < 57; ++i) s.scores.push_back(static_cast<float>(gen() % 1000) / 10.0f);
    const DeltaHistogram h = delta_histogram(s, 7);
    std::size_t total = 0;
    for (auto c : h.counts) total += c;
    CHECK(total == s.scores.size());

    auto sorted = s.scores;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t p95_idx = static_cast<std::size_t>(std::ceil(0.95 * 57)) - 1;
    CHECK(h.p95 == doctest::Approx(sorted[p95_idx]));
    double mean = 0;
    for (float v : s.scores) mean += v;
    CHECK(h.mean == doctest::Approx(mean / 57.0));
}

TEST_CASE("direction ablation: identical at rho=0, distinct under pruning") {
    const ModelConfig cfg = toy_config();
    const ModelWeights w = init_weights(cfg, 100);
    const auto tokens = random_tokens(24, cfg.vocab_size, 101);

    HaltingConfig base;
    base.start_layer = 2;
    base.pruning_ratio = 0.0;
    DirectionAblation noop = run_direction_ablation(tokens, w, cfg, base);
    for (const auto& row : noop.rows) {
        CHECK(row.prefill.active_set.kept_indices.size() == tokens.size());
        CHECK(row.logit_l2_delta_vs_vanilla == 0.0);
    }

    base.pruning_ratio = 0.5;
    base.rng_seed = 7;
    DirectionAblation ab = run_direction_ablation(tokens, w, cfg, base);
    REQUIRE(ab.rows.size() == 3);
    const std::size_t budget = ab.rows[0].prefill.active_set.kept_indices.size();
    for (const auto& row : ab.rows)
        CHECK(row.prefill.active_set.kept_indices.size() == budget);

    // keep_high and keep_low agree only on the force-included final token
    const auto& hi = ab.rows[0].prefill.active_set.kept_indices;
    const auto& lo = ab.rows[1].prefill.active_set.kept_indices;
    std::vector<std::size_t> inter;
    std::set_intersection(hi.begin(), hi.end(), lo.begin(), lo.end(), std::back_inserter(inter));
    CHECK(inter.size() <= 1);

    DirectionAblation again = run_direction_ablation(tokens, w, cfg, base);
    CHECK(again.rows[2].prefill.active_set.kept_indices ==
          ab.rows[2].prefill.active_set.kept_indices);
}
