#pragma once

#include <cmath>
#include <cstddef>

#include "dash/errors.hpp"

namespace dash {

// How the kept-token budget is derived from the halting knobs.
//   pure_topk:      K = floor((1 - rho) * T) over all tokens.
//   protected_ends: the first keep_first_n and last keep_last_n tokens are
//                   exempt; a fraction c of the middle region is dropped,
//                   drop_target = floor(round(c * (T - n_fix))), kept = T - drop_target.
enum class SelectionMode { pure_topk, protected_ends };

inline std::size_t kept_length(std::size_t t, double ratio, std::size_t keep_first_n,
                               std::size_t keep_last_n, SelectionMode mode) {
    require(ratio >= 0.0 && ratio < 1.0, "kept_length: ratio must be in [0, 1)");
    if (mode == SelectionMode::pure_topk) {
        return static_cast<std::size_t>(std::floor((1.0 - ratio) * static_cast<double>(t)));
    }
    require(keep_first_n + keep_last_n <= t,
            "kept_length: protected prefix+suffix exceeds sequence length");
    const std::size_t n_fix = keep_first_n + keep_last_n;
    const double middle = static_cast<double>(t - n_fix);
    // round half away from zero, then floor; the floor is a no-op on the
    // integral llround result but mirrors the published drop_target rule
    const auto drop_target = static_cast<std::size_t>(std::llround(ratio * middle));
    return t - drop_target;
}

}  // namespace dash
