#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "dash/budget.hpp"
#include "dash/errors.hpp"

// Analytical prefill cost model. Everything is exact 128-bit integer
// arithmetic; floating point appears only in the derived ratio/speedup and
// at presentation time.

namespace dash {

using uint128 = unsigned __int128;

inline uint128 checked_mul(uint128 a, uint128 b) {
    if (a != 0 && b > static_cast<uint128>(-1) / a)
        throw CapacityError("flops arithmetic exceeds 128-bit range");
    return a * b;
}

inline uint128 checked_add(uint128 a, uint128 b) {
    if (b > static_cast<uint128>(-1) - a)
        throw CapacityError("flops arithmetic exceeds 128-bit range");
    return a + b;
}

inline std::string u128_str(uint128 v) {
    if (v == 0) return "0";
    std::string s;
    while (v != 0) {
        s.insert(s.begin(), static_cast<char>('0' + static_cast<unsigned>(v % 10)));
        v /= 10;
    }
    return s;
}

// Per-layer cost of one transformer block on n tokens: 4nd^2 + 2n^2d + 2ndm.
inline uint128 per_layer_flops(std::uint64_t n, std::uint64_t d, std::uint64_t m) {
    require(n >= 1 && d >= 1 && m >= 1, "per_layer_flops: n, d, m must be >= 1");
    const uint128 nd = checked_mul(n, d);
    const uint128 proj = checked_mul(4, checked_mul(nd, d));
    const uint128 attn = checked_mul(2, checked_mul(nd, n));
    const uint128 ffn = checked_mul(2, checked_mul(nd, m));
    return checked_add(proj, checked_add(attn, ffn));
}

struct FlopsReport {
    std::uint64_t n = 0;
    std::uint64_t n_kept = 0;
    uint128 a_n = 0;     // per-layer cost at full length
    uint128 a_kept = 0;  // per-layer cost at kept length
    uint128 c_full = 0;  // L * A(n)
    uint128 c_ours = 0;  // l_s * A(n) + (L - l_s) * A(n_kept)
    double r_flops = 0.0;  // 1 - c_ours / c_full
    double s_flops = 1.0;  // c_full / c_ours
};

struct FlopsModelParams {
    std::uint64_t num_layers = 28;
    std::uint64_t hidden_dim = 3584;
    std::uint64_t ffn_dim = 18944;
    std::uint64_t full_layers = 11;  // layers that still see the whole prompt
    double compression_ratio = 0.667;
    std::uint64_t keep_first_n = 64;
    std::uint64_t keep_last_n = 32;
};

inline FlopsReport speedup_report(std::uint64_t n, const FlopsModelParams& p) {
    require(p.full_layers < p.num_layers, "speedup_report: full_layers must be < num_layers");
    FlopsReport rep;
    rep.n = n;
    rep.n_kept = kept_length(n, p.compression_ratio, p.keep_first_n, p.keep_last_n,
                             SelectionMode::protected_ends);
    require(rep.n_kept >= 1, "speedup_report: configuration keeps no tokens");
    rep.a_n = per_layer_flops(n, p.hidden_dim, p.ffn_dim);
    rep.a_kept = per_layer_flops(rep.n_kept, p.hidden_dim, p.ffn_dim);
    rep.c_full = checked_mul(p.num_layers, rep.a_n);
    rep.c_ours = checked_add(checked_mul(p.full_layers, rep.a_n),
                             checked_mul(p.num_layers - p.full_layers, rep.a_kept));
    const long double ratio =
        static_cast<long double>(rep.c_ours) / static_cast<long double>(rep.c_full);
    rep.r_flops = static_cast<double>(1.0L - ratio);
    rep.s_flops = static_cast<double>(1.0L / ratio);
    return rep;
}

// The published length sweep: five prefill lengths under the 28-layer model.
inline std::vector<std::uint64_t> table7_lengths() {
    return {8192, 16384, 32768, 65536, 131072};
}

inline std::vector<FlopsReport> emit_table7() {
    std::vector<FlopsReport> rows;
    for (std::uint64_t n : table7_lengths()) rows.push_back(speedup_report(n, FlopsModelParams{}));
    return rows;
}

inline std::string format_2dec(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string flops_table_csv(const std::vector<FlopsReport>& rows) {
    std::string out = "n,n_kept,r_flops_pct,s_flops\n";
    for (const auto& r : rows) {
        out += std::to_string(r.n) + "," + std::to_string(r.n_kept) + "," +
               format_2dec(r.r_flops * 100.0) + "," + format_2dec(r.s_flops) + "\n";
    }
    return out;
}

inline std::string flops_table_text(const std::vector<FlopsReport>& rows) {
    char buf[160];
    std::string out = "       n    n_kept   r_flops    s_flops\n";
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%8llu  %8llu   %6.2f%%   %5.2fx\n",
                      static_cast<unsigned long long>(r.n),
                      static_cast<unsigned long long>(r.n_kept), r.r_flops * 100.0, r.s_flops);
        out += buf;
    }
    return out;
}

}  // namespace dash
