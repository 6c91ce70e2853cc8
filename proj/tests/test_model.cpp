#include <cstdio>
#include <cstring>
#include <filesystem>
#include <random>
#include <set>

#include "dash/model.hpp"
#include "dash/weights_io.hpp"
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

// Independent single-block oracle: explicit per-head score matrix, double
// accumulation everywhere, optional hard-excluded key set.
Matrix naive_block_attention_u(const Matrix& h, std::span<const std::size_t> positions,
                               const LayerWeights& lw, const ModelConfig& cfg,
                               const std::set<std::size_t>& excluded_keys = {}) {
    const std::size_t t = h.rows, d = cfg.hidden_dim, hd = cfg.head_dim;
    auto naive_rms = [&](std::span<const float> row, std::span<const float> gain) {
        double ms = 0;
        for (float v : row) ms += static_cast<double>(v) * v;
        ms = ms / static_cast<double>(row.size()) + cfg.norm_eps;
        std::vector<double> out(row.size());
        for (std::size_t i = 0; i < row.size(); ++i) out[i] = gain[i] * row[i] / std::sqrt(ms);
        return out;
    };
    auto naive_proj = [&](const std::vector<std::vector<double>>& rows, const Matrix& w) {
        std::vector<std::vector<double>> out(rows.size(), std::vector<double>(w.cols, 0.0));
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t k = 0; k < w.rows; ++k)
                for (std::size_t j = 0; j < w.cols; ++j) out[i][j] += rows[i][k] * w.at(k, j);
        return out;
    };

    std::vector<std::vector<double>> normed(t);
    for (std::size_t i = 0; i < t; ++i) normed[i] = naive_rms(h.row(i), lw.attn_norm_gain);
    auto q = naive_proj(normed, lw.wq);
    auto k = naive_proj(normed, lw.wk);
    auto v = naive_proj(normed, lw.wv);

    auto rotate = [&](std::vector<double>& row, std::size_t pos) {
        for (std::size_t head = 0; head < cfg.num_heads; ++head)
            for (std::size_t i = 0; i + 1 < hd; i += 2) {
                const double freq = std::pow(static_cast<double>(cfg.rope_base),
                                             -static_cast<double>(i) / static_cast<double>(hd));
                const double c = std::cos(pos * freq), s = std::sin(pos * freq);
                const double x0 = row[head * hd + i], x1 = row[head * hd + i + 1];
                row[head * hd + i] = x0 * c - x1 * s;
                row[head * hd + i + 1] = x0 * s + x1 * c;
            }
    };
    for (std::size_t i = 0; i < t; ++i) {
        rotate(q[i], positions[i]);
        rotate(k[i], positions[i]);
    }

    std::vector<std::vector<double>> ctx(t, std::vector<double>(d, 0.0));
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t head = 0; head < cfg.num_heads; ++head)
        for (std::size_t i = 0; i < t; ++i) {
            if (excluded_keys.count(i)) continue;  // halted queries are don't-care
            std::vector<double> w_row;
            std::vector<std::size_t> keys;
            double mx = -1e300;
            for (std::size_t j = 0; j <= i; ++j) {
                if (excluded_keys.count(j)) continue;
                double dot = 0;
                for (std::size_t c = 0; c < hd; ++c) dot += q[i][head * hd + c] * k[j][head * hd + c];
                dot *= scale;
                w_row.push_back(dot);
                keys.push_back(j);
                mx = std::max(mx, dot);
            }
            double denom = 0;
            for (double& x : w_row) {
                x = std::exp(x - mx);
                denom += x;
            }
            for (std::size_t jj = 0; jj < keys.size(); ++jj)
                for (std::size_t c = 0; c < hd; ++c)
                    ctx[i][head * hd + c] += (w_row[jj] / denom) * v[keys[jj]][head * hd + c];
        }

    auto u = naive_proj(ctx, lw.wo);
    Matrix out(t, d);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = static_cast<float>(u[i][j]);
    return out;
}

std::filesystem::path temp_file(const char* name) {
    auto dir = std::filesystem::temp_directory_path() / "dash_model_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("init_weights is seed-deterministic and shape-correct") {
    const ModelConfig cfg = toy_config();
    const ModelWeights a = init_weights(cfg, 7);
    const ModelWeights b = init_weights(cfg, 7);
    const ModelWeights c = init_weights(cfg, 8);
    CHECK(a.token_embedding.data == b.token_embedding.data);
    CHECK(a.layers[3].w_gate.data == b.layers[3].w_gate.data);
    CHECK(a.token_embedding.data != c.token_embedding.data);
    CHECK_NOTHROW(a.validate(cfg));
    CHECK(a.layers.size() == cfg.num_layers);
    CHECK(a.lm_head.rows == cfg.hidden_dim);
    CHECK(a.lm_head.cols == cfg.vocab_size);
}

TEST_CASE("block_forward on a single token reduces to value path") {
    const ModelConfig cfg = toy_config();
    const ModelWeights w = init_weights(cfg, 11);
    Matrix h(1, cfg.hidden_dim);
    std::mt19937_64 gen(5);
    for (auto& v : h.data) v = static_cast<float>((gen() % 1000) / 1000.0 - 0.5);
    const std::size_t pos[1] = {0};
    const BlockTrace trace = block_forward(h, 0, pos, w, cfg);

    const Matrix attn_in = rms_norm_rows(h, w.layers[0].attn_norm_gain, cfg.norm_eps);
    const Matrix expect_u = matmul(matmul(attn_in, w.layers[0].wv), w.layers[0].wo);
    CHECK(trace.u.data == expect_u.data);  // softmax over one key is exactly 1
}

TEST_CASE("block_forward propagates exact zeros") {
    ModelConfig cfg = toy_config();
    ModelWeights w = init_weights(cfg, 3);
    for (auto& lw : w.layers) {
        std::fill(lw.attn_norm_gain.begin(), lw.attn_norm_gain.end(), 0.0f);
        std::fill(lw.ffn_norm_gain.begin(), lw.ffn_norm_gain.end(), 0.0f);
    }
    const Matrix h(3, cfg.hidden_dim);
    const std::size_t pos[3] = {0, 1, 2};
    const BlockTrace trace = block_forward(h, 0, pos, w, cfg);
    for (float v : trace.u.data) CHECK(v == 0.0f);
    for (float v : trace.h_out.data) CHECK(v == 0.0f);
}

TEST_CASE("block_forward matches the naive per-head oracle") {
    const ModelConfig cfg = toy_config();
    const ModelWeights w = init_weights(cfg, 21);
    Matrix h(4, cfg.hidden_dim);
    std::mt19937_64 gen(9);
    for (auto& v : h.data) v = static_cast<float>((gen() % 2000) / 1000.0 - 1.0);
    const std::size_t pos[4] = {0, 1, 2, 3};
    const BlockTrace trace = block_forward(h, 2, pos, w, cfg);
    const Matrix want = naive_block_attention_u(h, pos, w.layers[2], cfg);
    for (std::size_t i = 0; i < want.data.size(); ++i)
        CHECK(std::abs(trace.u.data[i] - want.data[i]) < 1e-4f);
}

TEST_CASE("block_forward rejects non-monotone positions") {
    const ModelConfig cfg = toy_config();
    const ModelWeights w = init_weights(cfg, 1);
    const Matrix h(2, cfg.hidden_dim);
    const std::size_t bad[2] = {3, 3};
    CHECK_THROWS_AS(block_forward(h, 0, bad, w, cfg), ContractError);
}

TEST_CASE("position-id fidelity: compaction equals hard-masked attention") {
    const ModelConfig cfg = toy_config();
    const ModelWeights w = init_weights(cfg, 31);
    Matrix h5(5, cfg.hidden_dim);
    std::mt19937_64 gen(13);
    for (auto& v : h5.data) v = static_cast<float>((gen() % 2000) / 1000.0 - 1.0);

    // compacted run: token 2 removed, original position ids preserved
    Matrix h4(4, cfg.hidden_dim);
    const std::size_t keep[4] = {0, 1, 3, 4};
    for (std::size_t i = 0; i < 4; ++i)
        std::copy(h5.row(keep[i]).begin(), h5.row(keep[i]).end(), h4.row(i).begin());
    const std::size_t pos4[4] = {0, 1, 3, 4};
    const BlockTrace compacted = block_forward(h4, 0, pos4, w, cfg);

    // full-length oracle with token 2 excluded from every attention row
    const std::size_t pos5[5] = {0, 1, 2, 3, 4};
    const Matrix masked_u = naive_block_attention_u(h5, pos5, w.layers[0], cfg, {2});
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < cfg.hidden_dim; ++j)
            CHECK(std::abs(compacted.u.at(i, j) - masked_u.at(keep[i], j)) < 1e-4f);
}

TEST_CASE("prefill_full shapes, determinism and trace recomputation") {
    const ModelConfig cfg = toy_config();
    const ModelWeights w = init_weights(cfg, 2);
    const auto tokens = random_tokens(6, cfg.vocab_size, 77);

    const FullPrefillResult a = prefill_full(tokens, w, cfg);
    const FullPrefillResult b = prefill_full(tokens, w, cfg);
    CHECK(a.logits.rows == 1);
    CHECK(a.logits.cols == cfg.vocab_size);
    CHECK(a.logits.data == b.logits.data);
    CHECK(a.traces.size() == cfg.num_layers);

    for (const BlockTrace& trace : a.traces) {
        const Matrix h_mid = add(trace.h_in, trace.u);
        const Matrix ffn_in =
            rms_norm_rows(h_mid, w.layers[trace.layer].ffn_norm_gain, cfg.norm_eps);
        const Matrix recomputed = add(h_mid, ffn_forward(ffn_in, w.layers[trace.layer]));
        for (std::size_t i = 0; i < recomputed.data.size(); ++i)
            CHECK(std::abs(recomputed.data[i] - trace.h_out.data[i]) < 1e-4f);
    }

    const FullPrefillResult single = prefill_full(std::vector<TokenId>{5}, w, cfg);
    CHECK(single.logits.rows == 1);
    CHECK(single.logits.cols == cfg.vocab_size);
}

TEST_CASE("prefill_full rejects out-of-range token ids") {
    const ModelConfig cfg = toy_config();
    const ModelWeights w = init_weights(cfg, 2);
    CHECK_THROWS_AS(prefill_full(std::vector<TokenId>{cfg.vocab_size}, w, cfg), InputError);
}

TEST_CASE("causality: perturbing a token never changes earlier positions") {
    const ModelConfig cfg = toy_config();
    ModelWeights w = init_weights(cfg, 42);
    const std::vector<TokenId> tokens{10, 11, 12, 13, 14};
    const FullPrefillResult before = prefill_full(tokens, w, cfg);

    const std::size_t perturbed_pos = 3;  // token id 13 appears only there
    for (auto& v : w.token_embedding.row(13)) v += 0.25f;
    const FullPrefillResult after = prefill_full(tokens, w, cfg);

    for (std::size_t l = 0; l < cfg.num_layers; ++l)
        for (std::size_t i = 0; i < perturbed_pos; ++i)
            CHECK(std::memcmp(before.traces[l].h_out.row(i).data(),
                              after.traces[l].h_out.row(i).data(),
                              cfg.hidden_dim * sizeof(float)) == 0);
    // and the perturbed position itself did change
    CHECK(before.traces.back().h_out.row(perturbed_pos)[0] !=
          after.traces.back().h_out.row(perturbed_pos)[0]);
}

TEST_CASE("decode_greedy basics") {
    const ModelConfig cfg = toy_config();
    const ModelWeights w = init_weights(cfg, 2);
    const auto tokens = random_tokens(8, cfg.vocab_size, 3);

    FullPrefillResult pre = prefill_full(tokens, w, cfg);
    const DecodeResult none = decode_greedy(pre.kv, pre.logits, 0, w, cfg);
    CHECK(none.tokens.empty());

    const DecodeResult four = decode_greedy(pre.kv, pre.logits, 4, w, cfg);
    CHECK(four.tokens.size() == 4);
    for (std::size_t s = 0; s < 4; ++s)
        for (std::size_t l = 0; l < cfg.num_layers; ++l)
            CHECK(four.context_lengths[s][l] == tokens.size() + s + 1);

    // stepwise decode agrees with one multi-step call
    FullPrefillResult pre2 = prefill_full(tokens, w, cfg);
    Matrix logits = pre2.logits;
    std::vector<TokenId> stepped;
    for (int s = 0; s < 4; ++s) {
        DecodeResult r = decode_greedy(pre2.kv, logits, 1, w, cfg);
        stepped.push_back(r.tokens[0]);
        logits = r.last_logits;
    }
    CHECK(stepped == four.tokens);
}

TEST_CASE("decode_greedy enforces max_seq_len") {
    ModelConfig cfg = toy_config();
    cfg.max_seq_len = 10;
    const ModelWeights w = init_weights(cfg, 2);
    const auto tokens = random_tokens(8, cfg.vocab_size, 3);
    FullPrefillResult pre = prefill_full(tokens, w, cfg);
    CHECK_THROWS_AS(decode_greedy(pre.kv, pre.logits, 3, w, cfg), CapacityError);
}

TEST_CASE("weight file round trip is bit-exact") {
    const ModelConfig cfg = toy_config();
    const ModelWeights w = init_weights(cfg, 99);
    const auto path = temp_file("roundtrip.dashw");
    save_weights(path.string(), cfg, w);

    const LoadedModel lm = load_weights(path.string());
    CHECK(lm.config.num_layers == cfg.num_layers);
    CHECK(lm.config.hidden_dim == cfg.hidden_dim);
    CHECK(lm.config.norm_eps == cfg.norm_eps);
    CHECK(lm.weights.token_embedding.data == w.token_embedding.data);
    CHECK(lm.weights.lm_head.data == w.lm_head.data);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        CHECK(lm.weights.layers[l].wq.data == w.layers[l].wq.data);
        CHECK(lm.weights.layers[l].w_down.data == w.layers[l].w_down.data);
        CHECK(lm.weights.layers[l].ffn_norm_gain == w.layers[l].ffn_norm_gain);
    }
    CHECK_NOTHROW(lm.weights.validate(lm.config));
    std::filesystem::remove(path);
}

TEST_CASE("weight loader rejects bad magic and truncation") {
    const auto path = temp_file("corrupt.dashw");
    {
        std::ofstream os(path, std::ios::binary);
        os.write("NOTDASHW", 8);
    }
    CHECK_THROWS_AS(load_weights(path.string()), IoError);

    const ModelConfig cfg = toy_config();
    const ModelWeights w = init_weights(cfg, 1);
    save_weights(path.string(), cfg, w);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
    CHECK_THROWS_AS(load_weights(path.string()), IoError);
    std::filesystem::remove(path);
}
