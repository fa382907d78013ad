#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "edt/data/dataset.hpp"
#include "edt/data/tokenizer.hpp"
#include "edt/model/model.hpp"
#include "edt/numerics/param_store.hpp"
#include "edt/training/loss.hpp"

namespace edt::training {

/// Everything needed to resume training or run inference.
struct Checkpoint {
  model::ModelConfig model;
  TrainConfig train;
  data::DataStats stats;
  data::ReturnTokenizer tokenizer;
  /// Serialized std::mt19937_64 state of the batch sampler.
  std::string rng_state;
  /// Parameters with their optimizer moments and step counter.
  ParamStore<float> params;
  /// Free-form provenance (env spec, dataset meta).
  nlohmann::json extra = nlohmann::json::object();
};

/// "EDT1", little-endian u32 header length, JSON header, then little-endian
/// float32 arrays in header order (values, then first moments, then second moments).
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Throws IoError on unwritable paths.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
/// Throws IoError on unreadable, truncated or foreign files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// 64-bit FNV-1a over a byte string.
std::uint64_t fnv1a(const std::vector<std::uint8_t>& bytes);
std::uint64_t fnv1a(const std::string& bytes);
std::string hex64(std::uint64_t v);

}  // namespace edt::training
