#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace memdist {

// Usage / contract violations (bad shapes, bad arguments, bad formats).
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values or failed numeric preconditions at runtime.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File format / persistence failures.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    out += "]";
    return out;
}

inline std::int64_t shape_numel(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

}  // namespace memdist
