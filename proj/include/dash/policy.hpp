#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "dash/budget.hpp"
#include "dash/errors.hpp"
#include "dash/model.hpp"
#include "dash/rng.hpp"

// Delta-guided token halting. One selection event (or several, under a
// multi-shot schedule) ranks tokens by the magnitude of their latest update
// and freezes the rest: halted tokens keep their hidden state and contribute
// no keys or values above the decision layer.

namespace dash {

// Which per-token update magnitude drives the ranking.
enum class DeltaSignal { delta_attn, delta_block };

// What the ranking keeps. keep_high retains the tokens still moving the most
// (i.e. halts the stabilized, low-delta ones); keep_low is the inverted
// ablation; random ignores the scores.
enum class Direction { keep_high, keep_low, random_uniform };

struct HaltingConfig {
    std::size_t start_layer = 0;   // decision block; it still runs on all tokens
    double pruning_ratio = 0.0;    // rho in pure_topk mode, c in protected_ends mode
    DeltaSignal signal = DeltaSignal::delta_attn;
    Direction direction = Direction::keep_high;
    SelectionMode mode = SelectionMode::pure_topk;
    std::size_t shots = 1;         // 1 = single selection event, k >= 2 = multi-shot
    std::size_t keep_first_n = 0;  // protected_ends only
    std::size_t keep_last_n = 0;   // protected_ends only
    std::uint64_t rng_seed = 0;    // drives Direction::random_uniform
};

struct DeltaScores {
    std::size_t layer = 0;
    std::vector<float> scores;  // one per token of the sequence it was computed on
};

struct ActiveSet {
    std::vector<std::size_t> kept_indices;    // ascending original indices
    std::vector<std::size_t> halted_indices;  // ascending complement
    std::size_t decision_layer = 0;
};

inline DeltaScores delta_attn_scores(const BlockTrace& trace) {
    return DeltaScores{trace.layer, l2_norm_rows(trace.u)};
}

inline DeltaScores delta_block_scores(const BlockTrace& trace) {
    return DeltaScores{trace.layer, l2_norm_rows(sub(trace.h_out, trace.h_in))};
}

namespace detail {

// Indices of the middle region ranked per direction; ties go to the lower
// index. For random direction the draw order is the ranking.
inline std::vector<std::size_t> rank_region(const std::vector<float>& scores, std::size_t lo,
                                            std::size_t hi, Direction dir, RngStream* rng) {
    std::vector<std::size_t> idx(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    switch (dir) {
        case Direction::keep_high:
            std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
                if (scores[a] != scores[b]) return scores[a] > scores[b];
                return a < b;
            });
            break;
        case Direction::keep_low:
            std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
                if (scores[a] != scores[b]) return scores[a] < scores[b];
                return a < b;
            });
            break;
        case Direction::random_uniform:
            for (std::size_t i = idx.size(); i > 1; --i)
                std::swap(idx[i - 1], idx[rng->next_below(i)]);
            break;
    }
    return idx;
}

// Selects target_kept of n tokens (local index space). Protected ends are
// kept unconditionally and excluded from ranking. With force_include_last,
// index n-1 displaces the lowest-ranked middle pick if it would be halted.
inline std::vector<std::size_t> halting_choice(const std::vector<float>& scores, std::size_t n,
                                               std::size_t target_kept, const HaltingConfig& cfg,
                                               RngStream* rng, bool force_include_last) {
    require(scores.size() == n, "halting_choice: scores/length mismatch");
    require(target_kept >= 1 && target_kept <= n, "halting_choice: kept count out of range");

    std::size_t nf = 0, nl = 0;
    if (cfg.mode == SelectionMode::protected_ends) {
        nf = cfg.keep_first_n;
        nl = cfg.keep_last_n;
        require(nf + nl <= n, "halting_choice: protected ends exceed sequence");
        require(target_kept >= nf + nl, "halting_choice: kept count below protected count");
    }
    const std::size_t k_middle = target_kept - nf - nl;
    std::vector<std::size_t> ranked = rank_region(scores, nf, n - nl, cfg.direction, rng);
    ranked.resize(k_middle);

    if (force_include_last && nl == 0 && n >= 1) {
        const std::size_t last = n - 1;
        if (!ranked.empty() && std::find(ranked.begin(), ranked.end(), last) == ranked.end())
            ranked.back() = last;
    }

    std::vector<std::size_t> kept;
    kept.reserve(target_kept);
    for (std::size_t i = 0; i < nf; ++i) kept.push_back(i);
    kept.insert(kept.end(), ranked.begin(), ranked.end());
    for (std::size_t i = n - nl; i < n; ++i) kept.push_back(i);
    std::sort(kept.begin(), kept.end());
    return kept;
}

}  // namespace detail

// TopK over the whole sequence (or its unprotected middle), per Direction.
inline ActiveSet select_active_set(const DeltaScores& scores, std::size_t t,
                                   const HaltingConfig& cfg) {
    require(scores.scores.size() == t, "select_active_set: scores length != T");
    const std::size_t kept =
        kept_length(t, cfg.pruning_ratio, cfg.keep_first_n, cfg.keep_last_n, cfg.mode);
    require(kept >= 1, "select_active_set: configuration keeps no tokens");

    RngStream rng(cfg.rng_seed);
    ActiveSet set;
    set.decision_layer = scores.layer;
    set.kept_indices = detail::halting_choice(scores.scores, t, kept, cfg, &rng, false);
    set.halted_indices.reserve(t - set.kept_indices.size());
    std::size_t next = 0;
    for (std::size_t i = 0; i < t; ++i) {
        if (next < set.kept_indices.size() && set.kept_indices[next] == i)
            ++next;
        else
            set.halted_indices.push_back(i);
    }
    return set;
}

struct PrefillResult {
    Matrix logits;  // 1 x vocab, from the last original token
    ActiveSet active_set;
    KvCache kv;
    std::vector<std::size_t> per_layer_lengths;  // active length each block ran on
    DeltaScores scores_at_start;                 // signal at the first decision layer
    Matrix final_hidden;  // T x d; halted rows frozen where halting left them
};

namespace detail {

// Per-shot target lengths: geometric decay from T to the final budget, the
// last shot pinned to the exact kept count.
inline std::vector<std::size_t> shot_targets(std::size_t t, std::size_t final_kept,
                                             std::size_t shots) {
    std::vector<std::size_t> targets(shots);
    const double f = std::pow(static_cast<double>(final_kept) / static_cast<double>(t),
                              1.0 / static_cast<double>(shots));
    std::size_t cur = t;
    for (std::size_t j = 0; j + 1 < shots; ++j) {
        cur = std::max(final_kept,
                       static_cast<std::size_t>(std::floor(f * static_cast<double>(cur))));
        targets[j] = cur;
    }
    targets[shots - 1] = final_kept;
    return targets;
}

inline PrefillResult run_halting_prefill(std::span<const TokenId> tokens,
                                         const ModelWeights& weights, const ModelConfig& cfg,
                                         const HaltingConfig& hcfg) {
    cfg.validate();
    const std::size_t t = tokens.size();
    const std::size_t num_layers = cfg.num_layers;
    require(hcfg.start_layer < num_layers, "halting prefill: start_layer out of range");
    require(hcfg.shots >= 1, "halting prefill: shots must be >= 1");
    if (hcfg.shots > 1)
        require(hcfg.start_layer + hcfg.shots - 1 < num_layers,
                "halting prefill: too many shots for this depth");

    const std::size_t final_kept =
        kept_length(t, hcfg.pruning_ratio, hcfg.keep_first_n, hcfg.keep_last_n, hcfg.mode);
    require(final_kept >= 1, "halting prefill: configuration keeps no tokens");
    if (hcfg.mode == SelectionMode::protected_ends && final_kept < t)
        require(hcfg.keep_last_n >= 1,
                "halting prefill: protected mode needs keep_last_n >= 1 so the final "
                "token stays representable");

    const std::size_t stride =
        hcfg.shots > 1 ? (num_layers - hcfg.start_layer) / hcfg.shots : 0;
    std::vector<std::size_t> selection_layers(hcfg.shots);
    for (std::size_t j = 0; j < hcfg.shots; ++j)
        selection_layers[j] = hcfg.start_layer + j * stride;
    const std::vector<std::size_t> targets = shot_targets(t, final_kept, hcfg.shots);

    Matrix h = embed_tokens(tokens, weights, cfg);
    Matrix full_hidden = h;
    std::vector<std::size_t> active(t);
    std::iota(active.begin(), active.end(), std::size_t{0});

    RngStream rng(hcfg.rng_seed);
    PrefillResult result;
    result.per_layer_lengths.reserve(num_layers);
    bool scores_saved = false;
    std::size_t shot = 0;

    for (std::size_t l = 0; l < num_layers; ++l) {
        result.per_layer_lengths.push_back(active.size());
        BlockOutput out = run_block(h, active, weights.layers[l], cfg);
        result.kv.layers.push_back({std::move(out.k_cache), std::move(out.v_cache), active});

        const bool selecting = shot < hcfg.shots && l == selection_layers[shot];
        std::vector<float> scores;
        if (selecting) {
            scores = hcfg.signal == DeltaSignal::delta_attn ? l2_norm_rows(out.u)
                                                            : l2_norm_rows(sub(out.h_out, h));
            if (!scores_saved) {
                result.scores_at_start = DeltaScores{l, scores};
                scores_saved = true;
            }
        }

        h = std::move(out.h_out);
        for (std::size_t i = 0; i < active.size(); ++i)
            std::copy(h.row(i).begin(), h.row(i).end(), full_hidden.row(active[i]).begin());

        if (selecting) {
            const std::vector<std::size_t> kept_local =
                detail::halting_choice(scores, active.size(), targets[shot], hcfg, &rng,
                                       hcfg.mode == SelectionMode::pure_topk);
            Matrix compact(kept_local.size(), cfg.hidden_dim);
            std::vector<std::size_t> next_active(kept_local.size());
            for (std::size_t i = 0; i < kept_local.size(); ++i) {
                std::copy(h.row(kept_local[i]).begin(), h.row(kept_local[i]).end(),
                          compact.row(i).begin());
                next_active[i] = active[kept_local[i]];
            }
            h = std::move(compact);
            active = std::move(next_active);
            ++shot;
        }
    }

    require(!active.empty() && active.back() == t - 1,
            "halting prefill: final token left the active set");

    result.active_set.decision_layer = hcfg.start_layer;
    result.active_set.kept_indices = active;
    result.active_set.halted_indices.reserve(t - active.size());
    std::size_t next = 0;
    for (std::size_t i = 0; i < t; ++i) {
        if (next < active.size() && active[next] == i)
            ++next;
        else
            result.active_set.halted_indices.push_back(i);
    }
    result.logits = logits_from_hidden(h.row(h.rows - 1), weights, cfg);
    result.final_hidden = std::move(full_hidden);
    return result;
}

}  // namespace detail

// Single-shot halting prefill: the decision block runs on every token, its
// delta signal ranks them, and all deeper blocks see only the survivors.
inline PrefillResult dash_prefill(std::span<const TokenId> tokens, const ModelWeights& weights,
                                  const ModelConfig& cfg, const HaltingConfig& hcfg) {
    HaltingConfig single = hcfg;
    single.shots = 1;
    return detail::run_halting_prefill(tokens, weights, cfg, single);
}

// Multi-shot variant: k evenly spaced selection events shrink the active set
// geometrically toward the same final budget as single-shot.
inline PrefillResult multi_shot_prefill(std::span<const TokenId> tokens,
                                        const ModelWeights& weights, const ModelConfig& cfg,
                                        const HaltingConfig& hcfg) {
    return detail::run_halting_prefill(tokens, weights, cfg, hcfg);
}

}  // namespace dash
