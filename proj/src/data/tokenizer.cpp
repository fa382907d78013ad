#include "edt/data/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "edt/errors.hpp"

namespace edt::data {

ReturnTokenizer::ReturnTokenizer(std::size_t n_bins, double return_min, double return_max)
    : n_bins_(n_bins), min_(return_min), max_(return_max) {
  if (n_bins < 2) throw ConfigError("n_return_bins must be >= 2, got " + std::to_string(n_bins));
  if (!(return_min < return_max) || !std::isfinite(return_min) || !std::isfinite(return_max)) {
    throw ConfigError("return tokenizer bounds must satisfy min < max");
  }
}

std::size_t ReturnTokenizer::tokenize(double r) const {
  if (std::isnan(r)) throw NumericFault("tokenize_return");
  const double clamped = std::clamp(r, min_, max_);
  const double pos = std::floor((clamped - min_) / width());
  return std::min(static_cast<std::size_t>(std::max(pos, 0.0)), n_bins_ - 1);
}

double ReturnTokenizer::detokenize(std::size_t bin) const {
  if (bin >= n_bins_) {
    throw ContractViolation("bin " + std::to_string(bin) + " out of range for " + std::to_string(n_bins_) + " bins");
  }
  return min_ + (static_cast<double>(bin) + 0.5) * width();
}

nlohmann::json ReturnTokenizer::to_json() const {
  return {{"n_bins", n_bins_}, {"return_min", min_}, {"return_max", max_}};
}

ReturnTokenizer ReturnTokenizer::from_json(const nlohmann::json& j) {
  return ReturnTokenizer(j.at("n_bins").get<std::size_t>(), j.at("return_min").get<double>(),
                         j.at("return_max").get<double>());
}

}  // namespace edt::data
