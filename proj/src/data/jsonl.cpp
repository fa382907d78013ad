#include "edt/data/jsonl.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "edt/errors.hpp"

namespace edt::data {

namespace {

// Stores numbers as float so serialization emits the shortest string that
// parses back to the same 32-bit value.
using FloatJson = nlohmann::basic_json<std::map, std::vector, std::string, bool, std::int64_t, std::uint64_t, float>;

FloatJson encode_episode(const Trajectory& t, ActionKind kind) {
  FloatJson ep = FloatJson::object();
  ep["obs"] = t.observations;
  if (kind == ActionKind::kDiscrete) {
    FloatJson acts = FloatJson::array();
    for (const auto& a : t.actions) acts.push_back(static_cast<std::int64_t>(a.at(0)));
    ep["act"] = std::move(acts);
  } else {
    ep["act"] = t.actions;
  }
  ep["rew"] = t.rewards;
  return ep;
}

std::vector<float> to_floats(const FloatJson& arr, const char* field) {
  if (!arr.is_array()) throw IoError(std::string("field '") + field + "' must be an array");
  std::vector<float> v;
  v.reserve(arr.size());
  for (const auto& x : arr) {
    if (!x.is_number()) throw IoError(std::string("field '") + field + "' must hold numbers");
    v.push_back(x.get<float>());
  }
  return v;
}

Trajectory decode_episode(const FloatJson& ep, ActionKind kind) {
  for (const char* key : {"obs", "act", "rew"}) {
    if (!ep.contains(key)) throw IoError(std::string("episode line missing '") + key + "'");
  }
  std::vector<std::vector<float>> obs, acts;
  for (const auto& o : ep.at("obs")) obs.push_back(to_floats(o, "obs"));
  for (const auto& a : ep.at("act")) {
    if (kind == ActionKind::kDiscrete) {
      if (!a.is_number_integer()) throw IoError("discrete actions must be integers");
      acts.push_back({static_cast<float>(a.get<std::int64_t>())});
    } else {
      acts.push_back(to_floats(a, "act"));
    }
  }
  try {
    return make_trajectory(std::move(obs), std::move(acts), to_floats(ep.at("rew"), "rew"));
  } catch (const ContractViolation& e) {
    throw IoError(e.what());
  }
}

}  // namespace

void write_jsonl(std::ostream& out, const Dataset& ds) {
  nlohmann::json meta = ds.meta;
  meta["action_kind"] = to_string(ds.action.kind);
  meta["action_dim"] = ds.action.dim;
  out << nlohmann::json{{"meta", meta}}.dump() << '\n';
  for (const auto& t : ds.trajectories) out << encode_episode(t, ds.action.kind).dump() << '\n';
}

void write_jsonl(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  write_jsonl(out, ds);
  out.flush();
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Dataset read_jsonl(std::istream& in) {
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      if (!have_header) {
        const auto header = nlohmann::json::parse(line);
        if (!header.contains("meta")) throw IoError("first line must be a {\"meta\": ...} header");
        ds.meta = header.at("meta");
        ds.action.kind = action_kind_from_string(ds.meta.at("action_kind").get<std::string>());
        ds.action.dim = ds.meta.value("action_dim", std::size_t{1});
        have_header = true;
        continue;
      }
      ds.trajectories.push_back(decode_episode(FloatJson::parse(line), ds.action.kind));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed dataset line " + std::to_string(lineno) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw IoError("malformed dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!have_header) throw IoError("dataset has no header line");
  if (ds.trajectories.empty()) throw IoError("dataset has no episodes");
  fit_statistics(ds);
  return ds;
}

Dataset read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return read_jsonl(in);
}

}  // namespace edt::data
