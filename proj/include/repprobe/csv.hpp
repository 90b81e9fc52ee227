#pragma once

#include <algorithm>
#include <cstdio>
#include <string>
#include <string_view>

namespace repprobe {

/// Six significant digits, '.' decimal separator regardless of locale.
inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  std::string s(buf);
  std::ranges::replace(s, ',', '.');
  if (s == "-0") s = "0";
  return s;
}

/// Quotes a CSV field only when it contains a separator, quote or newline.
inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace repprobe
