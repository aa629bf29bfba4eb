// Run configuration: an INI-style file with [model] [train] [data] [sampling]
// [output] sections, overridable by "section.key=value" assignments.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "unicombine/flow.hpp"
#include "unicombine/model.hpp"

namespace unicombine {

struct TrainSettings {
  std::int64_t steps = 200;
  std::int64_t batch_size = 8;
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  std::int64_t log_every = 10;
  // Conditions supplied together in the denoising-lora stage.
  std::vector<ConditionType> conditions{ConditionType::CANNY, ConditionType::DEPTH};
};

struct DataSettings {
  std::string dir = "data";
  std::string manifest;  // defaults to <dir>/manifest.jsonl
  std::int64_t limit = -1;
};

struct SamplingSettings {
  std::int64_t steps = 16;
  std::uint64_t seed = 0;
  SampleMode mode = SampleMode::TRAINING_FREE;
};

struct OutputSettings {
  std::string dir = "out";
};

struct RunConfig {
  ModelConfig model = desk_config();
  TrainSettings train;
  DataSettings data;
  SamplingSettings sampling;
  OutputSettings output;

  std::string manifest_path() const;
  // Applies one "section.key=value" assignment; unknown keys are rejected.
  void set(const std::string& section, const std::string& key, const std::string& value);
  void set(const std::string& assignment);
  // All keys in file order, suitable for writing back out.
  std::string to_ini() const;
  void validate() const;
};

RunConfig parse_ini(const std::string& text, const std::string& origin = "<config>");
RunConfig load_config(const std::string& path);

std::string join_conditions(const std::vector<ConditionType>& types);
std::vector<ConditionType> parse_conditions(const std::string& text);

}  // namespace unicombine
