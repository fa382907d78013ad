#pragma once

#include <cstddef>

#include <json.hpp>

namespace edt::data {

/// Equal-width bins over [return_min, return_max] in scaled return units.
class ReturnTokenizer {
 public:
  /// Throws ConfigError unless n_bins >= 2 and return_min < return_max.
  explicit ReturnTokenizer(std::size_t n_bins = 60, double return_min = 0.0, double return_max = 1.0);

  std::size_t n_bins() const { return n_bins_; }
  double return_min() const { return min_; }
  double return_max() const { return max_; }
  double width() const { return (max_ - min_) / static_cast<double>(n_bins_); }

  /// Clamps into range, then picks the bin; the upper bound lands in the last bin.
  std::size_t tokenize(double r) const;
  /// Bin center.
  double detokenize(std::size_t bin) const;

  nlohmann::json to_json() const;
  static ReturnTokenizer from_json(const nlohmann::json& j);

  friend bool operator==(const ReturnTokenizer&, const ReturnTokenizer&) = default;

 private:
  std::size_t n_bins_;
  double min_;
  double max_;
};

}  // namespace edt::data
