#pragma once

#include <cstdint>
#include <string>

namespace slicemend {

using Wide = __int128;

// A threshold given as a decimal literal, kept as num / 10^k so that
// comparisons against count ratios are exact. `value` is the double the user
// typed; the pair is recovered from its shortest round-trip representation.
struct DecimalRatio {
  double value = 0.0;
  std::int64_t num = 0;
  std::int64_t den = 1;

  static DecimalRatio from_double(double v);
};

// a/b < c/d for non-negative counts with positive denominators.
inline bool ratio_less(Wide a, Wide b, Wide c, Wide d) { return a * d < c * b; }

// Returns ceil(count * r) using exact integer arithmetic.
std::uint64_t ceil_scaled(std::uint64_t count, const DecimalRatio& r);

std::string format_shortest(double v);

}  // namespace slicemend
