#pragma once

#include <cstdint>
#include <cstdio>
#include <string>

#include "hierdoc/errors.hpp"

namespace hierdoc {

// Calendar date backed by a civil day number (days since 1970-01-01).
struct Date {
  int32_t days = 0;

  Date() = default;
  explicit Date(int32_t d) : days(d) {}

  static Date from_ymd(int y, int m, int d) {
    // Howard Hinnant's days-from-civil
    y -= m <= 2;
    const int era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy =
        (153u * static_cast<unsigned>(m + (m > 2 ? -3 : 9)) + 2u) / 5u +
        static_cast<unsigned>(d) - 1u;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return Date(era * 146097 + static_cast<int>(doe) - 719468);
  }

  static Date parse(const std::string& s) {
    int y = 0, m = 0, d = 0;
    if (std::sscanf(s.c_str(), "%4d-%2d-%2d", &y, &m, &d) != 3 ||
        s.size() != 10 || s[4] != '-' || s[7] != '-' || m < 1 || m > 12 ||
        d < 1 || d > 31)
      throw DataError("bad date '" + s + "', expected YYYY-MM-DD");
    return from_ymd(y, m, d);
  }

  void to_ymd(int& y, unsigned& m, unsigned& d) const {
    int32_t z = days + 719468;
    const int era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const int yy = static_cast<int>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp + (mp < 10 ? 3 : -9);
    y = yy + (m <= 2);
  }

  std::string str() const {
    int y;
    unsigned m, d;
    to_ymd(y, m, d);
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", y, m, d);
    return buf;
  }

  // 0 = Monday ... 6 = Sunday
  int weekday() const { return ((days % 7) + 7 + 3) % 7; }
  bool is_weekend() const { return weekday() >= 5; }

  Date plus_days(int n) const { return Date(days + n); }

  // Next Monday-Friday day at or after this one.
  Date next_weekday_or_self() const {
    Date d = *this;
    while (d.is_weekend()) d = d.plus_days(1);
    return d;
  }

  auto operator<=>(const Date&) const = default;
};

}  // namespace hierdoc
