// unicombine: data generation, training, sampling, evaluation and diagnostics.
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "unicombine/commands.hpp"

using namespace unicombine;

namespace {

void configure_logging() {
  const char* env = std::getenv("UNICOMBINE_LOG");
  const std::string level = env ? env : "info";
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::from_str(level));
}

// Shared --config/--set/--seed handling.
struct ConfigOptions {
  std::string path;
  std::vector<std::string> overrides;
  std::string seed;
  std::string out;

  void attach(CLI::App* app) {
    app->add_option("--config", path, "INI run configuration");
    app->add_option("--set", overrides, "override, e.g. train.steps=500")->take_all();
    app->add_option("--seed", seed, "seed for training and sampling");
    app->add_option("--out", out, "output directory (output.dir)");
  }

  RunConfig build() const {
    RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
    for (const auto& o : overrides) cfg.set(o);
    if (!seed.empty()) {
      cfg.set("train.seed=" + seed);
      cfg.set("sampling.seed=" + seed);
    }
    if (!out.empty()) cfg.output.dir = out;
    cfg.validate();
    return cfg;
  }
};

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"UniCombine toy framework"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the toy dataset and its manifest");
  std::int64_t gen_count = 100;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  gen->add_option("--count", gen_count, "number of samples")->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--out", gen_out, "output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "train one stage and write a checkpoint");
  ConfigOptions train_cfg;
  train_cfg.attach(train);
  TrainArgs train_args;
  train->add_option("--stage", train_args.stage,
                    "base | condition-lora:<TYPE> | denoising-lora")->required();
  train->add_option("--init", train_args.init, "checkpoints to start from");
  train->add_option("--resume", train_args.resume, "continue an interrupted run");
  train->add_option("--ckpt-out", train_args.out, "checkpoint path");

  // sample
  auto* sample = app.add_subcommand("sample", "generate images for prompts");
  ConfigOptions sample_cfg;
  sample_cfg.attach(sample);
  SampleArgs sample_args;
  std::string prompt_file;
  std::vector<std::string> prompts, cond_specs;
  std::string sample_mode;
  sample->add_option("--ckpt", sample_args.checkpoints, "checkpoints (base + adapters)")->required();
  sample->add_option("--prompt", prompts, "caption text");
  sample->add_option("--prompts", prompt_file, "file with one caption per line");
  sample->add_option("--cond", cond_specs, "TYPE=image.png");
  sample->add_option("--mode", sample_mode, "training-free | training-based");

  // eval
  auto* eval = app.add_subcommand("eval", "sample a split and score it");
  ConfigOptions eval_cfg;
  eval_cfg.attach(eval);
  EvalArgs eval_args;
  std::string eval_split = "test", eval_conds = "CANNY,DEPTH", eval_mode;
  eval->add_option("--ckpt", eval_args.checkpoints, "checkpoints (base + adapters)")->required();
  eval->add_option("--split", eval_split, "train | test");
  eval->add_option("--conditions", eval_conds, "comma-separated condition types (may be empty)");
  eval->add_option("--mode", eval_mode, "training-free | training-based");
  eval->add_option("--label", eval_args.label, "report name");

  // count-ops
  auto* count = app.add_subcommand("count-ops", "count attention score computations");
  std::int64_t len_t = 512, len_x = 1024, blocks = 57;
  std::string len_c = "1024,1024", count_mode = "cmmdit";
  count->add_option("--t", len_t, "text tokens");
  count->add_option("--x", len_x, "denoising tokens");
  count->add_option("--c", len_c, "comma-separated condition lengths");
  count->add_option("--blocks", blocks, "transformer blocks");
  count->add_option("--mode", count_mode, "mmdit | cmmdit");

  // attn-map
  auto* attn = app.add_subcommand("attn-map", "X -> condition cross-attention heat map");
  ConfigOptions attn_cfg;
  attn_cfg.attach(attn);
  AttnMapArgs attn_args;
  std::string attn_target = "SUBJECT", attn_conds = "SUBJECT,MASK_FILL", attn_mode;
  bool whole_image = false;
  attn->add_option("--ckpt", attn_args.checkpoints, "checkpoints (base + adapters)")->required();
  attn->add_option("--index", attn_args.index, "test record");
  attn->add_option("--target", attn_target, "condition branch to inspect");
  attn->add_option("--conditions", attn_conds, "conditions supplied");
  attn->add_option("--t", attn_args.t, "time of the noised input");
  attn->add_option("--mode", attn_mode, "training-free | training-based");
  attn->add_flag("--whole-image", whole_image, "average over all X rows, not the insertion area");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) {
      cmd_gen_data(gen_count, gen_seed, gen_out);
      std::cout << gen_out << "/manifest.jsonl\n";
    } else if (train->parsed()) {
      train_args.config = train_cfg.build();
      const auto r = cmd_train(train_args);
      std::cout << "trainable parameters: " << r.trainable_parameters << "\n"
                << "checkpoint: " << r.checkpoint << "\n"
                << "loss curve: " << r.loss_csv << "\n";
      if (!r.losses.empty()) std::cout << "final loss: " << r.losses.back().loss << "\n";
    } else if (sample->parsed()) {
      sample_args.config = sample_cfg.build();
      if (!sample_mode.empty()) sample_args.config.set("sampling.mode=" + sample_mode);
      sample_args.prompts = prompts;
      if (!prompt_file.empty()) {
        std::istringstream lines(read_text(prompt_file));
        for (std::string line; std::getline(lines, line);)
          if (line.find_first_not_of(" \t\r") != std::string::npos) sample_args.prompts.push_back(line);
      }
      if (sample_args.prompts.empty()) throw ConfigError("no prompts given");
      for (const auto& spec : cond_specs) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos) throw ConfigError("--cond expects TYPE=path, got '" + spec + "'");
        sample_args.conds.emplace_back(parse_condition_type(spec.substr(0, eq)), spec.substr(eq + 1));
      }
      for (const auto& p : cmd_sample(sample_args)) std::cout << p << "\n";
    } else if (eval->parsed()) {
      eval_args.config = eval_cfg.build();
      if (!eval_mode.empty()) eval_args.config.set("sampling.mode=" + eval_mode);
      if (eval_split == "train") eval_args.split = Split::TRAIN;
      else if (eval_split == "test") eval_args.split = Split::TEST;
      else throw ConfigError("unknown split '" + eval_split + "'");
      eval_args.conditions = parse_conditions(eval_conds);
      cmd_eval(eval_args).write_summary(std::cout);
    } else if (count->parsed()) {
      std::cout << cmd_count_ops(len_t, len_x, parse_lengths(len_c), blocks,
                                 parse_attn_mode(count_mode))
                << "\n";
    } else if (attn->parsed()) {
      attn_args.config = attn_cfg.build();
      if (!attn_mode.empty()) attn_args.config.set("sampling.mode=" + attn_mode);
      attn_args.target = parse_condition_type(attn_target);
      attn_args.conditions = parse_conditions(attn_conds);
      attn_args.region_hole = !whole_image;
      const auto r = cmd_attn_map(attn_args);
      std::cout << "heat map: " << r.image << "\n";
      if (attn_args.target == ConditionType::SUBJECT)
        std::cout << "concentration: " << r.concentration << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
