#include "unicombine/config.hpp"

#include <fstream>
#include <sstream>

#include "unicombine/io.hpp"

namespace unicombine {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::int64_t to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const auto out = std::stoll(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected an integer, got '" + v + "'");
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const auto out = std::stoull(v, &used);
    if (used == v.size() && v.find('-') == std::string::npos) return out;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
}

double to_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const auto out = std::stod(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected a number, got '" + v + "'");
}

std::string real_str(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::string join_conditions(const std::vector<ConditionType>& types) {
  std::string out;
  for (auto t : types) out += (out.empty() ? "" : ",") + to_string(t);
  return out;
}

std::vector<ConditionType> parse_conditions(const std::string& text) {
  std::vector<ConditionType> out;
  std::istringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_condition_type(item));
  }
  return out;
}

std::string RunConfig::manifest_path() const {
  return data.manifest.empty() ? (fs::path(data.dir) / "manifest.jsonl").string() : data.manifest;
}

void RunConfig::set(const std::string& section, const std::string& key, const std::string& value) {
  const auto full = section + "." + key;
  if (section == "model") {
    auto pairs = model.to_pairs();
    bool found = false;
    for (auto& [k, v] : pairs)
      if (k == key) {
        v = value;
        found = true;
      }
    if (!found) throw ConfigError("unknown config key '" + full + "'");
    model = ModelConfig::from_pairs(pairs);
  } else if (section == "train") {
    if (key == "steps") train.steps = to_int(full, value);
    else if (key == "batch_size") train.batch_size = to_int(full, value);
    else if (key == "learning_rate") train.learning_rate = to_real(full, value);
    else if (key == "weight_decay") train.weight_decay = to_real(full, value);
    else if (key == "seed") train.seed = to_uint(full, value);
    else if (key == "log_every") train.log_every = to_int(full, value);
    else if (key == "conditions") train.conditions = parse_conditions(value);
    else throw ConfigError("unknown config key '" + full + "'");
  } else if (section == "data") {
    if (key == "dir") data.dir = value;
    else if (key == "manifest") data.manifest = value;
    else if (key == "limit") data.limit = to_int(full, value);
    else throw ConfigError("unknown config key '" + full + "'");
  } else if (section == "sampling") {
    if (key == "steps") sampling.steps = to_int(full, value);
    else if (key == "seed") sampling.seed = to_uint(full, value);
    else if (key == "mode") sampling.mode = parse_sample_mode(value);
    else throw ConfigError("unknown config key '" + full + "'");
  } else if (section == "output") {
    if (key == "dir") output.dir = value;
    else throw ConfigError("unknown config key '" + full + "'");
  } else {
    throw ConfigError("unknown config section '" + section + "'");
  }
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw ConfigError("expected section.key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)),
      trim(assignment.substr(eq + 1)));
}

std::string RunConfig::to_ini() const {
  std::ostringstream out;
  out << "[model]\n";
  for (const auto& [k, v] : model.to_pairs()) out << k << " = " << v << "\n";
  out << "\n[train]\n"
      << "steps = " << train.steps << "\n"
      << "batch_size = " << train.batch_size << "\n"
      << "learning_rate = " << real_str(train.learning_rate) << "\n"
      << "weight_decay = " << real_str(train.weight_decay) << "\n"
      << "seed = " << train.seed << "\n"
      << "log_every = " << train.log_every << "\n"
      << "conditions = " << join_conditions(train.conditions) << "\n"
      << "\n[data]\n"
      << "dir = " << data.dir << "\n"
      << "manifest = " << data.manifest << "\n"
      << "limit = " << data.limit << "\n"
      << "\n[sampling]\n"
      << "steps = " << sampling.steps << "\n"
      << "seed = " << sampling.seed << "\n"
      << "mode = " << to_string(sampling.mode) << "\n"
      << "\n[output]\n"
      << "dir = " << output.dir << "\n";
  return out.str();
}

void RunConfig::validate() const {
  model.validate();
  if (sampling.steps < 1) throw ConfigError("sampling.steps must be >= 1");
  TrainPlan probe;
  probe.steps = train.steps;
  probe.batch_size = train.batch_size;
  probe.learning_rate = train.learning_rate;
  probe.weight_decay = train.weight_decay;
  probe.log_every = train.log_every;
  probe.validate();
}

RunConfig parse_ini(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string section;
  std::int64_t lineno = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    const auto line = trim(raw.substr(0, raw.find_first_of("#;")));
    if (line.empty()) continue;
    const auto where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside any section");
    try {
      cfg.set(section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig load_config(const std::string& path) { return parse_ini(read_text(path), path); }

}  // namespace unicombine
