#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "dash/errors.hpp"
#include "dash/matrix.hpp"
#include "dash/model.hpp"
#include "dash/policy.hpp"

// Verification oracles and ranking-fidelity diagnostics. The masked reference
// prefill is the definitional check for the compacted execution path: it runs
// the full-length sequence and only masks halted tokens out of attention.

namespace dash {

struct MaskedPrefillResult {
    Matrix logits;        // 1 x vocab, from the last original token
    Matrix final_hidden;  // T x d after the last block; halted rows frozen
};

// Full-length run; above the decision layer, halted tokens receive no updates
// and are excluded as keys from every attention row. No compaction anywhere.
inline MaskedPrefillResult masked_reference_prefill(std::span<const TokenId> tokens,
                                                    const ModelWeights& weights,
                                                    const ModelConfig& cfg,
                                                    const ActiveSet& active_set,
                                                    std::size_t start_layer) {
    cfg.validate();
    const std::size_t t = tokens.size();
    require(start_layer < cfg.num_layers, "masked_reference_prefill: start_layer out of range");
    std::vector<std::uint8_t> is_active(t, 0);
    for (std::size_t i : active_set.kept_indices) {
        require(i < t, "masked_reference_prefill: active index out of range");
        is_active[i] = 1;
    }
    require(!active_set.kept_indices.empty() && is_active[t - 1],
            "masked_reference_prefill: final token must be active");

    Matrix h = embed_tokens(tokens, weights, cfg);
    std::vector<std::size_t> positions(t);
    std::iota(positions.begin(), positions.end(), std::size_t{0});

    const std::size_t d = cfg.hidden_dim, hd = cfg.head_dim;
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights& lw = weights.layers[l];
        if (l <= start_layer) {
            h = run_block(h, positions, lw, cfg).h_out;
            continue;
        }

        // Hand-rolled masked attention: full-length projections, halted
        // columns excluded from every row, halted rows never written.
        const Matrix attn_in = rms_norm_rows(h, lw.attn_norm_gain, cfg.norm_eps);
        Matrix q = matmul(attn_in, lw.wq);
        Matrix k = matmul(attn_in, lw.wk);
        const Matrix v = matmul(attn_in, lw.wv);
        apply_rope_rows(q, positions, cfg);
        apply_rope_rows(k, positions, cfg);

        for (std::size_t i = 0; i < t; ++i) {
            if (!is_active[i]) continue;
            std::vector<float> ctx(d, 0.0f);
            for (std::uint32_t head = 0; head < cfg.num_heads; ++head) {
                double mx = -std::numeric_limits<double>::infinity();
                std::vector<double> dots;
                std::vector<std::size_t> keys;
                for (std::size_t j = 0; j <= i; ++j) {
                    if (!is_active[j]) continue;
                    double dot = 0.0;
                    for (std::size_t c = 0; c < hd; ++c)
                        dot += static_cast<double>(q.at(i, head * hd + c)) *
                               static_cast<double>(k.at(j, head * hd + c));
                    dot *= scale;
                    mx = std::max(mx, dot);
                    dots.push_back(dot);
                    keys.push_back(j);
                }
                double denom = 0.0;
                for (double& x : dots) {
                    x = std::exp(x - mx);
                    denom += x;
                }
                for (std::size_t jj = 0; jj < keys.size(); ++jj) {
                    const double p = dots[jj] / denom;
                    for (std::size_t c = 0; c < hd; ++c)
                        ctx[head * hd + c] += static_cast<float>(
                            p * static_cast<double>(v.at(keys[jj], head * hd + c)));
                }
            }
            Matrix ctx_row(1, d);
            std::copy(ctx.begin(), ctx.end(), ctx_row.row(0).begin());
            const Matrix u_row = matmul(ctx_row, lw.wo);

            Matrix h_mid(1, d);
            for (std::size_t c = 0; c < d; ++c) h_mid.at(0, c) = h.at(i, c) + u_row.at(0, c);
            const Matrix ffn_in = rms_norm_rows(h_mid, lw.ffn_norm_gain, cfg.norm_eps);
            const Matrix ffn_out = ffn_forward(ffn_in, lw);
            for (std::size_t c = 0; c < d; ++c) h.at(i, c) = h_mid.at(0, c) + ffn_out.at(0, c);
        }
    }

    MaskedPrefillResult result;
    result.logits = logits_from_hidden(h.row(t - 1), weights, cfg);
    result.final_hidden = std::move(h);
    return result;
}

// Incoming attention mass per key: column sums of each head's row-softmaxed
// attention matrix, averaged over heads.
inline std::vector<double> importance_scores_full_attention(
    const std::vector<std::vector<Matrix>>& attention_per_layer, std::size_t layer) {
    require(layer < attention_per_layer.size(), "importance scores: layer out of range");
    const auto& heads = attention_per_layer[layer];
    require(!heads.empty(), "importance scores: no recorded attention heads");
    const std::size_t t = heads.front().cols;
    std::vector<double> scores(t, 0.0);
    for (const Matrix& a : heads) {
        require(a.cols == t, "importance scores: inconsistent head shapes");
        for (std::size_t qrow = 0; qrow < a.rows; ++qrow)
            for (std::size_t key = 0; key < t; ++key)
                scores[key] += static_cast<double>(a.at(qrow, key));
    }
    for (double& s : scores) s /= static_cast<double>(heads.size());
    return scores;
}

namespace detail {

// Fractional (average) ranks, 1-based.
inline std::vector<double> fractional_ranks(std::span<const double> v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

// Indices of the k largest values; ties to the lower index.
inline std::vector<std::size_t> topk_indices(std::span<const double> v, std::size_t k) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (v[a] != v[b]) return v[a] > v[b];
        return a < b;
    });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace detail

// 1 - 6*sum(d^2) / (n(n^2-1)) over fractional ranks.
inline double spearman_rho(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "spearman_rho: length mismatch");
    require(a.size() >= 2, "spearman_rho: need at least two observations");
    const auto ra = detail::fractional_ranks(a);
    const auto rb = detail::fractional_ranks(b);
    double d2 = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        const double diff = ra[i] - rb[i];
        d2 += diff * diff;
    }
    const double n = static_cast<double>(a.size());
    return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

// |TopK(a) intersect TopK(b)| / |TopK(a) union TopK(b)|, k = max(1, floor(fraction*n)).
inline double topk_overlap_iou(std::span<const double> a, std::span<const double> b,
                               double fraction) {
    require(a.size() == b.size(), "topk_overlap_iou: length mismatch");
    require(!a.empty(), "topk_overlap_iou: empty input");
    require(fraction > 0.0 && fraction <= 1.0, "topk_overlap_iou: fraction must be in (0, 1]");
    const std::size_t k = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(a.size()))));
    const auto ta = detail::topk_indices(a, k);
    const auto tb = detail::topk_indices(b, k);
    std::vector<std::size_t> inter, uni;
    std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(inter));
    std::set_union(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(uni));
    return static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

inline double set_iou(std::span<const std::size_t> a, std::span<const std::size_t> b) {
    std::vector<std::size_t> inter, uni;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(uni));
    return uni.empty() ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

struct RankFidelity {
    double spearman_rho = 0.0;
    double topk_iou = 0.0;
    double k_fraction = 0.0;
};

inline RankFidelity rank_fidelity(std::span<const double> a, std::span<const double> b,
                                  double fraction) {
    return RankFidelity{spearman_rho(a, b), topk_overlap_iou(a, b, fraction), fraction};
}

struct DeltaHistogram {
    std::size_t layer = 0;
    std::vector<double> bin_edges;   // num_bins + 1, strictly increasing
    std::vector<std::size_t> counts;  // num_bins
    double mean = 0.0;
    double median = 0.0;
    double p95 = 0.0;
};

// Equal-width bins over [0, max(scores)]; a degenerate all-zero input uses
// [0, 1] so the single occupied bin is well defined.
inline DeltaHistogram delta_histogram(const DeltaScores& scores, std::size_t num_bins) {
    require(num_bins >= 1, "delta_histogram: need at least one bin");
    require(!scores.scores.empty(), "delta_histogram: empty scores");
    DeltaHistogram h;
    h.layer = scores.layer;
    double hi = *std::max_element(scores.scores.begin(), scores.scores.end());
    if (hi <= 0.0) hi = 1.0;
    h.bin_edges.resize(num_bins + 1);
    for (std::size_t i = 0; i <= num_bins; ++i)
        h.bin_edges[i] = hi * static_cast<double>(i) / static_cast<double>(num_bins);
    h.counts.assign(num_bins, 0);

    double sum = 0.0;
    for (float s : scores.scores) {
        sum += s;
        auto bin = static_cast<std::size_t>(static_cast<double>(s) / hi *
                                            static_cast<double>(num_bins));
        h.counts[std::min(bin, num_bins - 1)] += 1;
    }
    const std::size_t n = scores.scores.size();
    h.mean = sum / static_cast<double>(n);

    std::vector<float> sorted(scores.scores);
    std::sort(sorted.begin(), sorted.end());
    h.median = n % 2 == 1 ? sorted[n / 2]
                          : (static_cast<double>(sorted[n / 2 - 1]) + sorted[n / 2]) / 2.0;
    const std::size_t p95_idx =
        std::min(n - 1, static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n))) - 1);
    h.p95 = sorted[p95_idx];
    return h;
}

struct DirectionAblationRow {
    Direction direction;
    PrefillResult prefill;
    double logit_l2_delta_vs_vanilla = 0.0;
};

struct DirectionAblation {
    Matrix vanilla_logits;
    std::vector<DirectionAblationRow> rows;  // keep_high, keep_low, random
};

inline double logit_l2_delta(const Matrix& a, const Matrix& b) {
    require(a.same_shape(b), "logit_l2_delta: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double diff = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        s += diff * diff;
    }
    return std::sqrt(s);
}

// Runs the identical budget under all three directions and reports each run's
// active set plus its final-logit distance from the vanilla forward.
inline DirectionAblation run_direction_ablation(std::span<const TokenId> tokens,
                                                const ModelWeights& weights,
                                                const ModelConfig& cfg,
                                                const HaltingConfig& base) {
    DirectionAblation out;
    out.vanilla_logits = prefill_full(tokens, weights, cfg).logits;
    for (Direction dir :
         {Direction::keep_high, Direction::keep_low, Direction::random_uniform}) {
        HaltingConfig hc = base;
        hc.direction = dir;
        DirectionAblationRow row{dir, dash_prefill(tokens, weights, cfg, hc), 0.0};
        row.logit_l2_delta_vs_vanilla = logit_l2_delta(row.prefill.logits, out.vanilla_logits);
        out.rows.push_back(std::move(row));
    }
    return out;
}

}  // namespace dash
