#include "edt/training/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "edt/errors.hpp"

namespace edt::training {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'E', 'D', 'T', '1'};
constexpr int kFormatVersion = 1;

const char* kMomentPrefix[3] = {"", "opt.m.", "opt.v."};

const Tensor<float>& slot(const ParamStore<float>::Entry& e, int which) {
  return which == 0 ? e.value : which == 1 ? e.first_moment : e.second_moment;
}

Tensor<float>& slot(ParamStore<float>::Entry& e, int which) {
  return which == 0 ? e.value : which == 1 ? e.first_moment : e.second_moment;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json tensors = nlohmann::json::array();
  for (int which = 0; which < 3; ++which) {
    for (const auto& e : ck.params.entries()) {
      tensors.push_back({{"name", kMomentPrefix[which] + e.name}, {"shape", slot(e, which).shape()}});
    }
  }
  const nlohmann::json header{{"format_version", kFormatVersion},
                              {"model", ck.model.to_json()},
                              {"train", ck.train.to_json()},
                              {"stats", ck.stats.to_json()},
                              {"tokenizer", ck.tokenizer.to_json()},
                              {"rng_state", ck.rng_state},
                              {"step", ck.params.step()},
                              {"extra", ck.extra},
                              {"tensors", tensors}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  const auto len = static_cast<std::uint32_t>(text.size());
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(len >> (8 * b)));
  out.insert(out.end(), text.begin(), text.end());
  for (int which = 0; which < 3; ++which) {
    for (const auto& e : ck.params.entries()) {
      const auto& t = slot(e, which);
      const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
      out.insert(out.end(), p, p + t.size() * sizeof(float));
    }
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw IoError("not a checkpoint: bad magic bytes");
  }
  std::uint32_t len = 0;
  for (int b = 0; b < 4; ++b) len |= static_cast<std::uint32_t>(bytes[4 + b]) << (8 * b);
  if (bytes.size() < 8 + static_cast<std::size_t>(len)) throw IoError("truncated checkpoint header");
  Checkpoint ck;
  std::size_t cursor = 8 + len;
  try {
    const auto header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + len);
    if (header.at("format_version").get<int>() != kFormatVersion) {
      throw IoError("unsupported checkpoint version " + header.at("format_version").dump());
    }
    ck.model = model::ModelConfig::from_json(header.at("model"));
    ck.train = TrainConfig::from_json(header.at("train"));
    ck.stats = data::DataStats::from_json(header.at("stats"));
    ck.tokenizer = data::ReturnTokenizer::from_json(header.at("tokenizer"));
    ck.rng_state = header.at("rng_state").get<std::string>();
    ck.extra = header.at("extra");
    const auto& tensors = header.at("tensors");
    if (tensors.size() % 3 != 0) throw IoError("checkpoint tensor list is not value/m/v triples");
    const std::size_t n = tensors.size() / 3;
    auto& entries = ck.params.entries();
    entries.resize(n);
    for (int which = 0; which < 3; ++which) {
      for (std::size_t i = 0; i < n; ++i) {
        const auto& desc = tensors[which * n + i];
        std::string name = desc.at("name").get<std::string>();
        const std::string prefix = kMomentPrefix[which];
        if (name.compare(0, prefix.size(), prefix) != 0) throw IoError("unexpected tensor '" + name + "'");
        name = name.substr(prefix.size());
        if (which == 0) {
          entries[i].name = name;
        } else if (entries[i].name != name) {
          throw IoError("optimizer state for '" + name + "' out of order");
        }
        const Shape shape = desc.at("shape").get<Shape>();
        const std::size_t count = shape_size(shape);
        if (bytes.size() < cursor + count * sizeof(float)) throw IoError("truncated checkpoint tensor data");
        std::vector<float> values(count);
        std::memcpy(values.data(), bytes.data() + cursor, count * sizeof(float));
        cursor += count * sizeof(float);
        slot(entries[i], which) = Tensor<float>(shape, std::move(values));
      }
    }
    ck.params.rebuild_index();
    ck.params.set_step(header.at("step").get<std::int64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw IoError(std::string("invalid checkpoint config: ") + e.what());
  } catch (const ContractViolation& e) {
    throw IoError(std::string("inconsistent checkpoint: ") + e.what());
  }
  if (cursor != bytes.size()) throw IoError("trailing bytes after checkpoint tensors");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

std::uint64_t fnv1a(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a(const std::string& bytes) {
  return fnv1a(std::vector<std::uint8_t>(bytes.begin(), bytes.end()));
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

}  // namespace edt::training
