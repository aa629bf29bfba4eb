// The command-line subcommands as library calls.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "unicombine/attention.hpp"
#include "unicombine/config.hpp"
#include "unicombine/evalkit.hpp"
#include "unicombine/io.hpp"

namespace unicombine {

void cmd_gen_data(std::int64_t count, std::uint64_t seed, const std::string& out_dir);

struct StageSpec {
  Stage stage = Stage::BASE;
  std::vector<ConditionType> conditions;  // condition-lora: the one type
};
// "base", "condition-lora:<TYPE>" or "denoising-lora".
StageSpec parse_stage(const std::string& text);
std::string stage_slug(const StageSpec& spec);

struct TrainArgs {
  RunConfig config;
  std::string stage = "base";
  std::vector<std::string> init;  // checkpoints providing base weights / adapters
  std::string resume;             // checkpoint of an interrupted run of the same stage
  std::string out;                // defaults to <output.dir>/<stage>.uckp
};

struct TrainOutcome {
  std::string checkpoint;
  std::string loss_csv;
  std::int64_t trainable_parameters = 0;
  std::int64_t first_step = 0;
  std::vector<LossRecord> losses;
};

TrainOutcome cmd_train(const TrainArgs& args);

struct SampleArgs {
  RunConfig config;
  std::vector<std::string> checkpoints;
  std::vector<std::string> prompts;                           // captions, one per image
  std::vector<std::pair<ConditionType, std::string>> conds;  // type, PNG path
};

// Returns the written image paths.
std::vector<std::string> cmd_sample(const SampleArgs& args);

struct EvalArgs {
  RunConfig config;
  std::vector<std::string> checkpoints;
  Split split = Split::TEST;
  std::vector<ConditionType> conditions{ConditionType::CANNY, ConditionType::DEPTH};
  std::string label;  // defaults to the sampling mode
};

MetricReport cmd_eval(const EvalArgs& args);

// Exact count followed by the rounded rendering, e.g. "732168192 (732.17M)".
std::string cmd_count_ops(std::int64_t t, std::int64_t x, const std::vector<std::int64_t>& c,
                          std::int64_t blocks, AttnMode mode);
std::vector<std::int64_t> parse_lengths(const std::string& text);

struct AttnMapArgs {
  RunConfig config;
  std::vector<std::string> checkpoints;
  std::int64_t index = 0;  // record in the test split
  ConditionType target = ConditionType::SUBJECT;
  std::vector<ConditionType> conditions{ConditionType::SUBJECT, ConditionType::MASK_FILL};
  bool region_hole = true;  // restrict X rows to the insertion area
  double t = 0.5;
};

struct AttnMapOutcome {
  std::string image;
  double concentration = 0;  // heat mass on the subject mask (SUBJECT target)
};

AttnMapOutcome cmd_attn_map(const AttnMapArgs& args);

}  // namespace unicombine
