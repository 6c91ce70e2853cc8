#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "dash/errors.hpp"
#include "dash/model.hpp"

// DASHW1 weight file: 8-byte magic "DASHW1\0\0", the seven ModelConfig counts
// as little-endian u32 in declaration order, norm_eps and rope_base as f32,
// then every tensor as raw row-major f32 in ModelWeights field order.

namespace dash {

inline constexpr char kWeightMagic[8] = {'D', 'A', 'S', 'H', 'W', '1', '\0', '\0'};

static_assert(std::endian::native == std::endian::little,
              "weight files are little-endian; big-endian hosts are unsupported");

inline std::uint64_t fnv1a64(const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

namespace detail {

inline void write_raw(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void write_u32(std::ostream& os, std::uint32_t v) { write_raw(os, &v, sizeof v); }
inline void write_f32(std::ostream& os, float v) { write_raw(os, &v, sizeof v); }

inline void write_tensor(std::ostream& os, const Matrix& m) {
    write_raw(os, m.data.data(), m.data.size() * sizeof(float));
}

inline void write_tensor(std::ostream& os, const std::vector<float>& v) {
    write_raw(os, v.data(), v.size() * sizeof(float));
}

inline void read_raw(std::istream& is, void* p, std::size_t n, const std::string& path) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!is) throw IoError("truncated weight file: " + path);
}

inline std::uint32_t read_u32(std::istream& is, const std::string& path) {
    std::uint32_t v = 0;
    read_raw(is, &v, sizeof v, path);
    return v;
}

inline float read_f32(std::istream& is, const std::string& path) {
    float v = 0;
    read_raw(is, &v, sizeof v, path);
    return v;
}

inline void read_tensor(std::istream& is, Matrix& m, std::size_t r, std::size_t c,
                        const std::string& path) {
    m.rows = r;
    m.cols = c;
    m.data.resize(r * c);
    read_raw(is, m.data.data(), m.data.size() * sizeof(float), path);
}

inline void read_tensor(std::istream& is, std::vector<float>& v, std::size_t n,
                        const std::string& path) {
    v.resize(n);
    read_raw(is, v.data(), v.size() * sizeof(float), path);
}

}  // namespace detail

inline void save_weights(const std::string& path, const ModelConfig& cfg,
                         const ModelWeights& weights) {
    cfg.validate();
    weights.validate(cfg);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open weight file for writing: " + path);
    using namespace detail;
    write_raw(os, kWeightMagic, sizeof kWeightMagic);
    write_u32(os, cfg.num_layers);
    write_u32(os, cfg.hidden_dim);
    write_u32(os, cfg.num_heads);
    write_u32(os, cfg.head_dim);
    write_u32(os, cfg.ffn_dim);
    write_u32(os, cfg.vocab_size);
    write_u32(os, cfg.max_seq_len);
    write_f32(os, cfg.norm_eps);
    write_f32(os, cfg.rope_base);
    write_tensor(os, weights.token_embedding);
    for (const auto& lw : weights.layers) {
        write_tensor(os, lw.wq);
        write_tensor(os, lw.wk);
        write_tensor(os, lw.wv);
        write_tensor(os, lw.wo);
        write_tensor(os, lw.w_up);
        write_tensor(os, lw.w_down);
        write_tensor(os, lw.w_gate);
        write_tensor(os, lw.attn_norm_gain);
        write_tensor(os, lw.ffn_norm_gain);
    }
    write_tensor(os, weights.final_norm_gain);
    write_tensor(os, weights.lm_head);
    if (!os) throw IoError("write failed: " + path);
}

struct LoadedModel {
    ModelConfig config;
    ModelWeights weights;
};

inline LoadedModel load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open weight file: " + path);
    using namespace detail;
    char magic[8] = {};
    read_raw(is, magic, sizeof magic, path);
    if (std::memcmp(magic, kWeightMagic, sizeof magic) != 0)
        throw IoError("not a DASHW1 weight file: " + path);

    LoadedModel lm;
    ModelConfig& cfg = lm.config;
    cfg.num_layers = read_u32(is, path);
    cfg.hidden_dim = read_u32(is, path);
    cfg.num_heads = read_u32(is, path);
    cfg.head_dim = read_u32(is, path);
    cfg.ffn_dim = read_u32(is, path);
    cfg.vocab_size = read_u32(is, path);
    cfg.max_seq_len = read_u32(is, path);
    cfg.norm_eps = read_f32(is, path);
    cfg.rope_base = read_f32(is, path);
    cfg.validate();

    ModelWeights& w = lm.weights;
    const std::size_t d = cfg.hidden_dim, m = cfg.ffn_dim;
    read_tensor(is, w.token_embedding, cfg.vocab_size, d, path);
    w.layers.resize(cfg.num_layers);
    for (auto& lw : w.layers) {
        read_tensor(is, lw.wq, d, d, path);
        read_tensor(is, lw.wk, d, d, path);
        read_tensor(is, lw.wv, d, d, path);
        read_tensor(is, lw.wo, d, d, path);
        read_tensor(is, lw.w_up, d, m, path);
        read_tensor(is, lw.w_down, m, d, path);
        read_tensor(is, lw.w_gate, d, m, path);
        read_tensor(is, lw.attn_norm_gain, d, path);
        read_tensor(is, lw.ffn_norm_gain, d, path);
    }
    read_tensor(is, w.final_norm_gain, d, path);
    read_tensor(is, w.lm_head, d, cfg.vocab_size, path);

    is.peek();
    if (!is.eof()) throw IoError("trailing bytes after tensors: " + path);
    w.validate(cfg);
    return lm;
}

}  // namespace dash
