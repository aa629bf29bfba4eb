#include "unicombine/commands.hpp"

#include <zlib.h>

#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>

#include <spdlog/spdlog.h>

namespace unicombine {

void cmd_gen_data(std::int64_t count, std::uint64_t seed, const std::string& out_dir) {
  write_dataset(out_dir, seed, count);
  spdlog::info("wrote {} samples to {}", count, out_dir);
}

// ---- train --------------------------------------------------------------------------

StageSpec parse_stage(const std::string& text) {
  if (text == "base") return {Stage::BASE, {}};
  if (text == "denoising-lora") return {Stage::DENOISING_LORA, {}};
  const std::string prefix = "condition-lora:";
  if (text.rfind(prefix, 0) == 0)
    return {Stage::CONDITION_LORA, {parse_condition_type(text.substr(prefix.size()))}};
  throw ConfigError("unknown stage '" + text +
                    "' (expected base, condition-lora:<TYPE> or denoising-lora)");
}

std::string stage_slug(const StageSpec& spec) {
  if (spec.stage == Stage::CONDITION_LORA)
    return "condition-lora-" + to_string(spec.conditions.at(0));
  return to_string(spec.stage);
}

namespace {

std::vector<Checkpoint> load_all(const std::vector<std::string>& paths) {
  std::vector<Checkpoint> out;
  for (const auto& p : paths) out.push_back(load_checkpoint(p));
  return out;
}

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

}  // namespace

TrainOutcome cmd_train(const TrainArgs& args) {
  const auto& cfg = args.config;
  cfg.validate();
  const auto spec = parse_stage(args.stage);
  TrainPlan plan;
  plan.stage = spec.stage;
  plan.conditions = spec.stage == Stage::DENOISING_LORA ? cfg.train.conditions : spec.conditions;
  plan.steps = cfg.train.steps;
  plan.batch_size = cfg.train.batch_size;
  plan.learning_rate = cfg.train.learning_rate;
  plan.weight_decay = cfg.train.weight_decay;
  plan.seed = cfg.train.seed;
  plan.log_every = cfg.train.log_every;
  plan.validate();

  const auto slug = stage_slug(spec);
  TrainOutcome outcome;
  outcome.checkpoint = !args.out.empty() ? args.out
                       : !args.resume.empty()
                           ? args.resume
                           : (fs::path(cfg.output.dir) / (slug + ".uckp")).string();
  outcome.loss_csv = (fs::path(outcome.checkpoint).replace_extension(".loss.csv")).string();

  std::unique_ptr<Model<float>> model;
  LoraRegistry<float> registry;
  std::optional<Checkpoint> resume_ckpt;
  if (!args.resume.empty()) {
    resume_ckpt = load_checkpoint(args.resume);
    if (resume_ckpt->get("stage") != args.stage)
      throw ConfigError(args.resume + " was written by stage '" + resume_ckpt->get("stage") +
                        "', not '" + args.stage + "'");
    auto loaded = restore({*resume_ckpt});
    model = std::move(loaded.model);
    registry = std::move(loaded.registry);
  } else if (spec.stage == Stage::BASE && args.init.empty()) {
    model = std::make_unique<Model<float>>(cfg.model, cfg.train.seed);
  } else {
    if (args.init.empty())
      throw ConfigError("stage " + args.stage + " needs --init with a base checkpoint");
    auto loaded = restore(load_all(args.init));
    model = std::move(loaded.model);
    // A Condition-LoRA run starts from the bare backbone.
    if (spec.stage != Stage::CONDITION_LORA) registry = std::move(loaded.registry);
  }
  const auto data = load_split(cfg.manifest_path(), Split::TRAIN, cfg.data.limit);
  if (data.empty())
    throw ConfigError("no training samples in " + cfg.manifest_path());

  Trainer<float> trainer(*model, registry, plan);
  if (resume_ckpt)
    trainer.optimizer().load_state(resume_ckpt->tensor_map(),
                                   std::stoll(resume_ckpt->get("train.step", "0")));
  outcome.first_step = trainer.steps_done();
  for (const auto& [_, t] : trainer.optimizer().params())
    outcome.trainable_parameters += t.numel();
  spdlog::info("stage {}: {} trainable parameters, steps {}..{}", args.stage,
               outcome.trainable_parameters, outcome.first_step, plan.steps);

  outcome.losses = trainer.run(data, [](const LossRecord& r) {
    spdlog::debug("step {} loss {:.6f}", r.step, r.loss);
  });

  fs::create_directories(fs::path(outcome.checkpoint).parent_path().empty()
                             ? fs::path(".")
                             : fs::path(outcome.checkpoint).parent_path());
  auto ckpt = make_checkpoint(*model, registry);
  ckpt.set("stage", args.stage);
  ckpt.set("train.step", std::to_string(trainer.steps_done()));
  ckpt.set("train.seed", std::to_string(plan.seed));
  ckpt.set("train.conditions", join_conditions(plan.conditions));
  for (auto& [name, t] : trainer.optimizer().state()) ckpt.tensors.emplace_back(name, t);
  save_checkpoint(outcome.checkpoint, ckpt);

  // A resumed run appends to the existing curve.
  const bool append = resume_ckpt.has_value() && fs::exists(outcome.loss_csv);
  std::ofstream csv(outcome.loss_csv, append ? std::ios::app : std::ios::trunc);
  if (!csv) throw IoError("cannot write " + outcome.loss_csv);
  csv << loss_csv(outcome.losses, !append);
  return outcome;
}

// ---- sample -------------------------------------------------------------------------

namespace {

std::vector<std::int64_t> tokenize(const std::string& caption) {
  std::istringstream in(caption);
  std::vector<std::int64_t> ids;
  for (std::string w; in >> w;) {
    try {
      ids.push_back(token_id(w));
    } catch (const ContractError&) {
      throw ConfigError("prompt word '" + w + "' is not in the vocabulary");
    }
  }
  return ids;
}

std::string mode_slug(SampleMode mode) { return to_string(mode); }

}  // namespace

std::vector<std::string> cmd_sample(const SampleArgs& args) {
  const auto& cfg = args.config;
  if (args.checkpoints.empty()) throw ConfigError("sample needs at least one --ckpt");
  auto loaded = restore(load_all(args.checkpoints));
  std::vector<Condition<float>> conds;
  for (const auto& [type, path] : args.conds) {
    switch_select(type, loaded.registry);
    conds.push_back({type, image_tensor<float>(read_png(path))});
  }
  fs::create_directories(cfg.output.dir);
  std::vector<std::string> written;
  for (std::size_t i = 0; i < args.prompts.size(); ++i) {
    const auto seed = cfg.sampling.seed + i;
    auto img = sample_euler(*loaded.model, tokenize(args.prompts[i]), conds, &loaded.registry,
                            cfg.sampling.steps, seed, cfg.sampling.mode);
    char name[96];
    std::snprintf(name, sizeof name, "sample_%03zu_seed%llu_%s.png", i,
                  static_cast<unsigned long long>(seed), mode_slug(cfg.sampling.mode).c_str());
    const auto path = (fs::path(cfg.output.dir) / name).string();
    write_png(path, tensor_image(img));
    written.push_back(path);
  }
  return written;
}

// ---- eval ---------------------------------------------------------------------------

MetricReport cmd_eval(const EvalArgs& args) {
  const auto& cfg = args.config;
  if (args.checkpoints.empty()) throw ConfigError("eval needs at least one --ckpt");
  auto ckpts = load_all(args.checkpoints);
  auto loaded = restore(ckpts);
  for (auto type : args.conditions) switch_select(type, loaded.registry);
  const auto samples = load_split(cfg.manifest_path(), args.split, cfg.data.limit);

  MetricReport report;
  report.label = args.label.empty() ? to_string(cfg.sampling.mode) : args.label;
  std::string fingerprint = cfg.to_ini() + join_conditions(args.conditions);
  for (const auto& c : ckpts) fingerprint += c.get("base_hash");
  report.config_hash = hex32(static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(fingerprint.data()),
            static_cast<uInt>(fingerprint.size()))));
  report.samples.resize(samples.size());
  const auto n = static_cast<std::int64_t>(samples.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    std::vector<Condition<float>> conds;
    for (auto type : args.conditions) conds.push_back({type, image_tensor<float>(s.conditions.at(type))});
    auto img = sample_euler(*loaded.model, s.caption_ids, conds, &loaded.registry,
                            cfg.sampling.steps, sample_seed(cfg.sampling.seed, i),
                            cfg.sampling.mode);
    report.samples[static_cast<std::size_t>(i)] = evaluate_sample(tensor_image(img), s);
  }

  fs::create_directories(cfg.output.dir);
  const auto stem = fs::path(cfg.output.dir) / ("eval_" + report.label);
  std::ofstream jsonl(stem.string() + ".jsonl", std::ios::trunc);
  std::ofstream summary(stem.string() + ".txt", std::ios::trunc);
  if (!jsonl || !summary) throw IoError("cannot write reports under " + cfg.output.dir);
  report.write_jsonl(jsonl);
  report.write_summary(summary);
  return report;
}

// ---- count-ops ----------------------------------------------------------------------

std::vector<std::int64_t> parse_lengths(const std::string& text) {
  std::vector<std::int64_t> out;
  std::istringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stoll(item, &used));
      if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("bad condition length '" + item + "'");
    }
  }
  return out;
}

std::string cmd_count_ops(std::int64_t t, std::int64_t x, const std::vector<std::int64_t>& c,
                          std::int64_t blocks, AttnMode mode) {
  BranchLayout layout{t, x, c};
  layout.validate();
  const auto n = count_attn_ops(layout, blocks, mode);
  return std::to_string(n) + " (" + format_millions(n) + ")";
}

// ---- attn-map -----------------------------------------------------------------------

AttnMapOutcome cmd_attn_map(const AttnMapArgs& args) {
  const auto& cfg = args.config;
  if (args.checkpoints.empty()) throw ConfigError("attn-map needs at least one --ckpt");
  auto loaded = restore(load_all(args.checkpoints));
  const auto samples = load_split(cfg.manifest_path(), Split::TEST, args.index + 1);
  if (static_cast<std::int64_t>(samples.size()) <= args.index)
    throw ConfigError("test split has no record " + std::to_string(args.index));
  const auto& s = samples[static_cast<std::size_t>(args.index)];

  std::vector<Condition<float>> conds;
  for (auto type : args.conditions) conds.push_back({type, image_tensor<float>(s.conditions.at(type))});
  AdapterSet<float> adapters{&loaded.registry, cfg.sampling.mode == SampleMode::TRAINING_BASED,
                             false};
  if (adapters.use_denoising && !loaded.registry.denoising())
    throw ConfigError("training-based attention maps need a denoising adapter");
  const auto noise = sample_noise<float>(cfg.model, cfg.sampling.seed);
  const auto x_t = interpolate(noise, image_tensor<float>(s.target), static_cast<float>(args.t));
  TraceOptions opts;
  if (args.region_hole) opts.region_mask = hole_mask(s.scene);
  const auto trace = xattn_map(*loaded.model, x_t, static_cast<float>(args.t), s.caption_ids,
                               conds, adapters, args.target, opts);

  AttnMapOutcome out;
  if (args.target == ConditionType::SUBJECT)
    out.concentration = concentration_score(trace, cfg.model, subject_mask(s.scene));
  fs::create_directories(cfg.output.dir);
  out.image = (fs::path(cfg.output.dir) / ("attn_" + to_string(args.target) + "_" +
                                           to_string(cfg.sampling.mode) + ".png"))
                  .string();
  write_png(out.image, heat_image(trace, cfg.model.image_size));
  return out;
}

}  // namespace unicombine
