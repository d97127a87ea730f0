#pragma once

#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cellsearch {

// Exact rational; channel-group boundaries must never pick up float error.
struct Fraction {
  long long num = 0;
  long long den = 1;

  Fraction() = default;
  Fraction(long long n, long long d) : num(n), den(d) {
    if (den == 0) throw std::runtime_error("fraction: zero denominator");
    if (den < 0) {
      num = -num;
      den = -den;
    }
    const long long g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) {
      num /= g;
      den /= g;
    }
  }

  Fraction operator+(const Fraction& o) const { return Fraction(num * o.den + o.num * den, den * o.den); }
  bool operator==(const Fraction& o) const { return num == o.num && den == o.den; }

  static Fraction parse(const std::string& text) {
    const auto slash = text.find('/');
    try {
      if (slash == std::string::npos) return Fraction(std::stoll(text), 1);
      return Fraction(std::stoll(text.substr(0, slash)), std::stoll(text.substr(slash + 1)));
    } catch (const std::exception&) {
      throw std::runtime_error("fraction: cannot parse '" + text + "'");
    }
  }

  std::string str() const {
    if (den == 1) return std::to_string(num);
    return std::to_string(num) + "/" + std::to_string(den);
  }
};

// Ordered channel fractions defining contiguous group boundaries.
struct ChannelGrouping {
  std::vector<Fraction> fractions;

  static ChannelGrouping single() { return ChannelGrouping{{Fraction(1, 1)}}; }

  static ChannelGrouping parse(const std::string& csv) {
    ChannelGrouping g;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto a = item.find_first_not_of(" \t");
      const auto b = item.find_last_not_of(" \t");
      if (a == std::string::npos) continue;
      g.fractions.push_back(Fraction::parse(item.substr(a, b - a + 1)));
    }
    if (g.fractions.empty()) throw std::runtime_error("grouping: empty fraction list");
    return g;
  }

  int groups() const { return static_cast<int>(fractions.size()); }

  bool sums_to_one() const {
    Fraction acc(0, 1);
    for (const Fraction& f : fractions) acc = acc + f;
    return acc == Fraction(1, 1);
  }

  bool integral_for(int channels) const {
    for (const Fraction& f : fractions) {
      const long long scaled = f.num * channels;
      if (f.num <= 0 || scaled % f.den != 0 || scaled / f.den == 0) return false;
    }
    return true;
  }

  std::vector<int> channel_counts(int channels) const {
    if (!sums_to_one()) throw std::runtime_error("grouping: fractions " + str() + " do not sum to 1");
    if (!integral_for(channels))
      throw std::runtime_error("grouping: fractions " + str() + " do not divide " +
                               std::to_string(channels) + " channels into whole groups");
    std::vector<int> counts;
    counts.reserve(fractions.size());
    for (const Fraction& f : fractions)
      counts.push_back(static_cast<int>(f.num * channels / f.den));
    return counts;
  }

  std::string str() const {
    std::string out;
    for (std::size_t i = 0; i < fractions.size(); ++i) {
      if (i) out += ",";
      out += fractions[i].str();
    }
    return out;
  }
};

}  // namespace cellsearch
