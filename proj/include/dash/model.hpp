#pragma once

#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "dash/errors.hpp"
#include "dash/matrix.hpp"
#include "dash/rng.hpp"

// A small decoder-only transformer with rotary attention, RMS pre-norms and
// a gated FFN. Every block exposes its pre-residual attention output U, the
// quantity the halting policy ranks tokens by.

namespace dash {

using TokenId = std::uint32_t;

struct ModelConfig {
    std::uint32_t num_layers = 0;
    std::uint32_t hidden_dim = 0;
    std::uint32_t num_heads = 0;
    std::uint32_t head_dim = 0;  // == hidden_dim / num_heads
    std::uint32_t ffn_dim = 0;
    std::uint32_t vocab_size = 0;
    std::uint32_t max_seq_len = 0;
    float norm_eps = 1e-5f;
    float rope_base = 10000.0f;

    void validate() const {
        require(num_layers >= 2, "ModelConfig: num_layers must be >= 2");
        require(hidden_dim >= 1 && num_heads >= 1 && ffn_dim >= 1 && vocab_size >= 1 &&
                    max_seq_len >= 1,
                "ModelConfig: all counts must be >= 1");
        require(head_dim >= 1 && hidden_dim == num_heads * head_dim,
                "ModelConfig: hidden_dim must equal num_heads * head_dim");
        require(norm_eps > 0.0f, "ModelConfig: norm_eps must be positive");
        require(rope_base > 0.0f, "ModelConfig: rope_base must be positive");
    }
};

struct LayerWeights {
    Matrix wq, wk, wv, wo;      // hidden_dim x hidden_dim
    Matrix w_up, w_gate;        // hidden_dim x ffn_dim
    Matrix w_down;              // ffn_dim x hidden_dim
    std::vector<float> attn_norm_gain;  // hidden_dim
    std::vector<float> ffn_norm_gain;   // hidden_dim
};

struct ModelWeights {
    Matrix token_embedding;  // vocab_size x hidden_dim
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm_gain;  // hidden_dim
    Matrix lm_head;  // hidden_dim x vocab_size

    void validate(const ModelConfig& cfg) const {
        const std::size_t d = cfg.hidden_dim, m = cfg.ffn_dim;
        auto shape = [](const Matrix& t, std::size_t r, std::size_t c, const char* name) {
            require(t.rows == r && t.cols == c, std::string("ModelWeights: bad shape for ") + name);
            require(t.all_finite(), std::string("ModelWeights: non-finite entries in ") + name);
        };
        shape(token_embedding, cfg.vocab_size, d, "token_embedding");
        require(layers.size() == cfg.num_layers, "ModelWeights: wrong layer count");
        for (const auto& lw : layers) {
            shape(lw.wq, d, d, "wq");
            shape(lw.wk, d, d, "wk");
            shape(lw.wv, d, d, "wv");
            shape(lw.wo, d, d, "wo");
            shape(lw.w_up, d, m, "w_up");
            shape(lw.w_down, m, d, "w_down");
            shape(lw.w_gate, d, m, "w_gate");
            require(lw.attn_norm_gain.size() == d && lw.ffn_norm_gain.size() == d,
                    "ModelWeights: bad norm gain length");
        }
        require(final_norm_gain.size() == d, "ModelWeights: bad final norm gain length");
        shape(lm_head, d, cfg.vocab_size, "lm_head");
    }
};

// All tensors (including norm gains) are drawn uniform in [-1/sqrt(d), 1/sqrt(d)]
// from a seeded stream, in ModelWeights field order. Same seed, same bits.
inline ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    RngStream rng(seed);
    const float bound = 1.0f / std::sqrt(static_cast<float>(cfg.hidden_dim));
    auto fill_mat = [&](std::size_t r, std::size_t c) {
        Matrix m(r, c);
        for (auto& v : m.data) v = rng.next_uniform(-bound, bound);
        return m;
    };
    auto fill_vec = [&](std::size_t n) {
        std::vector<float> v(n);
        for (auto& x : v) x = rng.next_uniform(-bound, bound);
        return v;
    };

    ModelWeights w;
    const std::size_t d = cfg.hidden_dim, m = cfg.ffn_dim;
    w.token_embedding = fill_mat(cfg.vocab_size, d);
    w.layers.resize(cfg.num_layers);
    for (auto& lw : w.layers) {
        lw.wq = fill_mat(d, d);
        lw.wk = fill_mat(d, d);
        lw.wv = fill_mat(d, d);
        lw.wo = fill_mat(d, d);
        lw.w_up = fill_mat(d, m);
        lw.w_down = fill_mat(m, d);
        lw.w_gate = fill_mat(d, m);
        lw.attn_norm_gain = fill_vec(d);
        lw.ffn_norm_gain = fill_vec(d);
    }
    w.final_norm_gain = fill_vec(d);
    w.lm_head = fill_mat(d, cfg.vocab_size);
    return w;
}

// Rotates consecutive (even, odd) pairs of one head's row by pos-dependent
// angles. An odd trailing dimension passes through unrotated.
inline void apply_rope_row(std::span<float> head_row, std::size_t position, float base) {
    const std::size_t hd = head_row.size();
    for (std::size_t i = 0; i + 1 < hd; i += 2) {
        const double freq =
            std::pow(static_cast<double>(base), -static_cast<double>(i) / static_cast<double>(hd));
        const double ang = static_cast<double>(position) * freq;
        const float cr = static_cast<float>(std::cos(ang));
        const float ci = static_cast<float>(std::sin(ang));
        const float x0 = head_row[i];
        const float x1 = head_row[i + 1];
        head_row[i] = x0 * cr - x1 * ci;
        head_row[i + 1] = x0 * ci + x1 * cr;
    }
}

inline void apply_rope_rows(Matrix& qk, std::span<const std::size_t> positions,
                            const ModelConfig& cfg) {
    for (std::size_t t = 0; t < qk.rows; ++t) {
        auto row = qk.row(t);
        for (std::uint32_t h = 0; h < cfg.num_heads; ++h)
            apply_rope_row(row.subspan(h * cfg.head_dim, cfg.head_dim), positions[t],
                           cfg.rope_base);
    }
}

inline float silu(float x) {
    return static_cast<float>(static_cast<double>(x) / (1.0 + std::exp(-static_cast<double>(x))));
}

// h_mid = h + attention(LN(h)); out = h_mid + ffn(LN(h_mid))
inline Matrix ffn_forward(const Matrix& h_normed, const LayerWeights& lw) {
    Matrix gate = matmul(h_normed, lw.w_gate);
    const Matrix up = matmul(h_normed, lw.w_up);
    for (std::size_t i = 0; i < gate.data.size(); ++i) gate.data[i] = silu(gate.data[i]) * up.data[i];
    return matmul(gate, lw.w_down);
}

struct BlockOutput {
    Matrix u;        // pre-residual attention output, T x d
    Matrix h_out;    // block output, T x d
    Matrix k_cache;  // rope-rotated keys, T x d
    Matrix v_cache;  // values, T x d
    std::vector<Matrix> attention;  // per-head T x T rows-softmaxed scores; filled on request
};

inline BlockOutput run_block(const Matrix& h, std::span<const std::size_t> positions,
                             const LayerWeights& lw, const ModelConfig& cfg,
                             bool record_attention = false) {
    const std::size_t t = h.rows;
    require(positions.size() == t, "run_block: positions/rows mismatch");
    for (std::size_t i = 1; i < t; ++i)
        require(positions[i - 1] < positions[i], "run_block: positions must be strictly increasing");

    const std::size_t d = cfg.hidden_dim, hd = cfg.head_dim;
    const Matrix attn_in = rms_norm_rows(h, lw.attn_norm_gain, cfg.norm_eps);
    Matrix q = matmul(attn_in, lw.wq);
    Matrix k = matmul(attn_in, lw.wk);
    const Matrix v = matmul(attn_in, lw.wv);
    apply_rope_rows(q, positions, cfg);
    apply_rope_rows(k, positions, cfg);

    // With strictly increasing original positions the causal rule
    // positions[j] <= positions[i] is exactly the lower triangle.
    const Mask mask = causal_mask(t);
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

    BlockOutput out;
    Matrix ctx(t, d);
    if (record_attention) out.attention.reserve(cfg.num_heads);
    for (std::uint32_t head = 0; head < cfg.num_heads; ++head) {
        Matrix qh(t, hd), kh(t, hd), vh(t, hd);
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < hd; ++j) {
                qh.at(i, j) = q.at(i, head * hd + j);
                kh.at(i, j) = k.at(i, head * hd + j);
                vh.at(i, j) = v.at(i, head * hd + j);
            }
        Matrix scores = matmul(qh, transpose(kh));
        for (auto& s : scores.data) s *= scale;
        const Matrix probs = softmax_rows(scores, &mask);
        const Matrix head_ctx = matmul(probs, vh);
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < hd; ++j) ctx.at(i, head * hd + j) = head_ctx.at(i, j);
        if (record_attention) out.attention.push_back(probs);
    }

    out.u = matmul(ctx, lw.wo);
    const Matrix h_mid = add(h, out.u);
    const Matrix ffn_in = rms_norm_rows(h_mid, lw.ffn_norm_gain, cfg.norm_eps);
    out.h_out = add(h_mid, ffn_forward(ffn_in, lw));
    out.k_cache = std::move(k);
    out.v_cache = v;
    return out;
}

struct BlockTrace {
    std::size_t layer = 0;
    Matrix u;      // pre-residual attention output
    Matrix h_in;   // states entering the block
    Matrix h_out;  // states leaving the block
};

inline BlockTrace block_forward(const Matrix& h, std::size_t layer,
                                std::span<const std::size_t> positions, const ModelWeights& weights,
                                const ModelConfig& cfg) {
    require(layer < weights.layers.size(), "block_forward: layer out of range");
    BlockOutput out = run_block(h, positions, weights.layers[layer], cfg);
    return BlockTrace{layer, std::move(out.u), h, std::move(out.h_out)};
}

// Per-layer keys/values plus the original position id of every cached entry.
// After halting, layers above the decision layer hold fewer entries than the
// prompt length; decode appends one entry per generated token to every layer.
struct KvCache {
    struct LayerCache {
        Matrix keys;    // len x d, rope-rotated
        Matrix values;  // len x d
        std::vector<std::size_t> original_positions;
    };
    std::vector<LayerCache> layers;

    std::vector<std::size_t> lengths() const {
        std::vector<std::size_t> out;
        out.reserve(layers.size());
        for (const auto& l : layers) out.push_back(l.original_positions.size());
        return out;
    }
};

inline Matrix embed_tokens(std::span<const TokenId> tokens, const ModelWeights& weights,
                           const ModelConfig& cfg) {
    require(!tokens.empty(), "embed_tokens: empty prompt");
    if (tokens.size() > cfg.max_seq_len) throw CapacityError("prompt exceeds max_seq_len");
    Matrix h(tokens.size(), cfg.hidden_dim);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= cfg.vocab_size) throw InputError("token id out of vocabulary range");
        auto src = weights.token_embedding.row(tokens[i]);
        std::copy(src.begin(), src.end(), h.row(i).begin());
    }
    return h;
}

inline Matrix logits_from_hidden(std::span<const float> hidden, const ModelWeights& weights,
                                 const ModelConfig& cfg) {
    Matrix row(1, cfg.hidden_dim);
    const auto normed = rms_norm(hidden, weights.final_norm_gain, cfg.norm_eps);
    std::copy(normed.begin(), normed.end(), row.row(0).begin());
    return matmul(row, weights.lm_head);
}

struct FullPrefillResult {
    Matrix logits;  // 1 x vocab_size, final prompt position
    std::vector<BlockTrace> traces;
    KvCache kv;
    std::vector<std::vector<Matrix>> attention;  // [layer][head], only when recorded
};

inline FullPrefillResult prefill_full(std::span<const TokenId> tokens, const ModelWeights& weights,
                                      const ModelConfig& cfg, bool record_attention = false) {
    cfg.validate();
    Matrix h = embed_tokens(tokens, weights, cfg);
    std::vector<std::size_t> positions(tokens.size());
    std::iota(positions.begin(), positions.end(), std::size_t{0});

    FullPrefillResult result;
    result.traces.reserve(cfg.num_layers);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        BlockOutput out = run_block(h, positions, weights.layers[l], cfg, record_attention);
        result.kv.layers.push_back(
            {std::move(out.k_cache), std::move(out.v_cache), positions});
        if (record_attention) result.attention.push_back(std::move(out.attention));
        result.traces.push_back(BlockTrace{l, std::move(out.u), h, out.h_out});
        h = std::move(out.h_out);
    }
    result.logits = logits_from_hidden(h.row(h.rows - 1), weights, cfg);
    return result;
}

inline TokenId argmax_lowest_id(const Matrix& logits) {
    require(logits.rows == 1 && logits.cols >= 1, "argmax: expected a 1 x vocab row");
    TokenId best = 0;
    float best_v = logits.at(0, 0);
    for (std::size_t j = 1; j < logits.cols; ++j) {
        if (logits.at(0, j) > best_v) {  // strict: ties keep the lowest id
            best_v = logits.at(0, j);
            best = static_cast<TokenId>(j);
        }
    }
    return best;
}

struct DecodeResult {
    std::vector<TokenId> tokens;
    Matrix last_logits;  // logits after the final generated token; resume point
    // context_lengths[s][l]: entries in layer l's cache while step s attended,
    // including the token generated at step s itself
    std::vector<std::vector<std::size_t>> context_lengths;
};

// Greedy decode continuing from prefill logits. Each step embeds the argmax
// token, appends its keys/values to every layer and attends to exactly the
// entries present in that layer's cache.
inline DecodeResult decode_greedy(KvCache& kv, const Matrix& start_logits, std::size_t steps,
                                  const ModelWeights& weights, const ModelConfig& cfg) {
    require(kv.layers.size() == cfg.num_layers, "decode_greedy: cache/model layer mismatch");
    DecodeResult result;
    result.last_logits = start_logits;
    if (steps == 0) return result;

    const std::size_t next_pos = kv.layers.front().original_positions.back() + 1;
    if (next_pos + steps > cfg.max_seq_len)
        throw CapacityError("decode_greedy: generation would exceed max_seq_len");

    const std::size_t d = cfg.hidden_dim, hd = cfg.head_dim;
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

    for (std::size_t s = 0; s < steps; ++s) {
        const TokenId tok = argmax_lowest_id(result.last_logits);
        result.tokens.push_back(tok);
        const std::size_t pos = next_pos + s;

        Matrix h(1, d);
        auto emb = weights.token_embedding.row(tok);
        std::copy(emb.begin(), emb.end(), h.row(0).begin());

        std::vector<std::size_t> step_lengths;
        step_lengths.reserve(cfg.num_layers);
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
            const LayerWeights& lw = weights.layers[l];
            auto& cache = kv.layers[l];

            Matrix attn_in(1, d);
            auto normed = rms_norm(h.row(0), lw.attn_norm_gain, cfg.norm_eps);
            std::copy(normed.begin(), normed.end(), attn_in.row(0).begin());
            Matrix q = matmul(attn_in, lw.wq);
            Matrix k = matmul(attn_in, lw.wk);
            const Matrix v = matmul(attn_in, lw.wv);
            const std::size_t pos_arr[1] = {pos};
            apply_rope_rows(q, pos_arr, cfg);
            apply_rope_rows(k, pos_arr, cfg);

            cache.keys.rows += 1;
            cache.keys.cols = d;
            cache.keys.data.insert(cache.keys.data.end(), k.data.begin(), k.data.end());
            cache.values.rows += 1;
            cache.values.cols = d;
            cache.values.data.insert(cache.values.data.end(), v.data.begin(), v.data.end());
            cache.original_positions.push_back(pos);

            const std::size_t len = cache.original_positions.size();
            step_lengths.push_back(len);

            Matrix ctx(1, d);
            for (std::uint32_t head = 0; head < cfg.num_heads; ++head) {
                Matrix scores(1, len);
                for (std::size_t j = 0; j < len; ++j) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < hd; ++c)
                        dot += static_cast<double>(q.at(0, head * hd + c)) *
                               static_cast<double>(cache.keys.at(j, head * hd + c));
                    scores.at(0, j) = static_cast<float>(dot) * scale;
                }
                const Matrix probs = softmax_rows(scores);
                for (std::size_t c = 0; c < hd; ++c) {
                    float acc = 0.0f;
                    for (std::size_t j = 0; j < len; ++j)
                        acc += probs.at(0, j) * cache.values.at(j, head * hd + c);
                    ctx.at(0, head * hd + c) = acc;
                }
            }
            const Matrix u = matmul(ctx, lw.wo);
            const Matrix h_mid = add(h, u);
            const Matrix ffn_in = rms_norm_rows(h_mid, lw.ffn_norm_gain, cfg.norm_eps);
            h = add(h_mid, ffn_forward(ffn_in, lw));
        }
        result.context_lengths.push_back(std::move(step_lengths));
        result.last_logits = logits_from_hidden(h.row(0), weights, cfg);
    }
    return result;
}

}  // namespace dash
