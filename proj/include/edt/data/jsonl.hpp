#pragma once

#include <filesystem>
#include <iosfwd>

#include "edt/data/dataset.hpp"

namespace edt::data {

/// Header line {"meta": {...}} followed by one {"obs", "act", "rew"} object per
/// episode. Floats are written in shortest round-trip form for 32-bit values.
void write_jsonl(std::ostream& out, const Dataset& ds);
void write_jsonl(const std::filesystem::path& path, const Dataset& ds);

/// Parses a dataset and fits its normalization and return bounds.
/// Throws IoError for unreadable or malformed input.
Dataset read_jsonl(std::istream& in);
Dataset read_jsonl(const std::filesystem::path& path);

}  // namespace edt::data
