// common.hpp: error types, unit conversions and small numeric helpers

#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace dicke {

// Invalid parameters or malformed input. The CLI maps this to exit code 2.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A fit did not converge or a required spectral feature was not found (exit code 3).
struct FitError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File could not be read or written (exit code 4).
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr double two_pi = 2.0 * std::numbers::pi;

// Frequencies are angular (rad/s) everywhere inside the library; files and the
// CLI talk in ordinary kHz.
inline constexpr double khz_to_rad(double f_khz) { return two_pi * 1e3 * f_khz; }
inline constexpr double rad_to_khz(double omega) { return omega / (two_pi * 1e3); }

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ValidationError(what);
}

} // namespace dicke
