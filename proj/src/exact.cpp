#include "exact.hpp"

#include <array>
#include <charconv>
#include <cmath>

#include "errors.hpp"

namespace slicemend {

std::string format_shortest(double v) {
  std::array<char, 64> buf{};
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

DecimalRatio DecimalRatio::from_double(double v) {
  if (!std::isfinite(v) || v < 0.0) {
    fail(ErrorKind::kConfig, "threshold must be a finite non-negative number, got " +
                                 format_shortest(v));
  }
  // Fixed notation so that exponents never appear.
  std::array<char, 128> buf{};
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v,
                           std::chars_format::fixed);
  std::string text(buf.data(), res.ptr);

  std::int64_t num = 0;
  std::int64_t den = 1;
  bool after_point = false;
  int frac_digits = 0;
  for (char c : text) {
    if (c == '.') {
      after_point = true;
      continue;
    }
    if (after_point) ++frac_digits;
    if (frac_digits > 15 || num > (INT64_MAX - 9) / 10) {
      fail(ErrorKind::kConfig, "threshold " + text +
                                   " has more precision than exact comparison supports");
    }
    num = num * 10 + (c - '0');
    if (after_point) den *= 10;
  }
  DecimalRatio r;
  r.value = v;
  r.num = num;
  r.den = den;
  return r;
}

std::uint64_t ceil_scaled(std::uint64_t count, const DecimalRatio& r) {
  Wide product = static_cast<Wide>(count) * r.num;
  Wide q = product / r.den;
  if (q * r.den < product) ++q;
  return static_cast<std::uint64_t>(q);
}

}  // namespace slicemend
