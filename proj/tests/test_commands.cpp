#include <doctest.h>

#include <fstream>

#include "unicombine/commands.hpp"

using namespace unicombine;

namespace {

struct Workspace {
  fs::path root;
  Workspace() : root(fs::temp_directory_path() / ("uc_cmd_" + std::to_string(::getpid()))) {
    fs::remove_all(root);
    cmd_gen_data(60, 0, (root / "data").string());
  }
  ~Workspace() { fs::remove_all(root); }

  RunConfig config(const std::string& out = "out") const {
    RunConfig cfg;
    cfg.data.dir = (root / "data").string();
    cfg.output.dir = (root / out).string();
    cfg.train.steps = 3;
    cfg.train.batch_size = 2;
    cfg.train.log_every = 1;
    cfg.train.learning_rate = 1e-3;
    cfg.sampling.steps = 2;
    cfg.data.limit = 3;
    return cfg;
  }
};

Workspace& ws() {
  static Workspace w;
  return w;
}

std::vector<std::string> lines(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

// Base plus CANNY and DEPTH Condition-LoRAs, trained once for the suite.
struct Trained {
  std::string base, canny, depth;
};

const Trained& trained() {
  static const Trained t = [] {
    Trained out;
    TrainArgs base{ws().config(), "base"};
    out.base = cmd_train(base).checkpoint;
    for (const char* type : {"CANNY", "DEPTH"}) {
      TrainArgs c{ws().config(), std::string("condition-lora:") + type, {out.base}};
      (type[0] == 'C' ? out.canny : out.depth) = cmd_train(c).checkpoint;
    }
    return out;
  }();
  return t;
}

}  // namespace

TEST_CASE("gen-data is reproducible") {
  const auto other = ws().root / "data2";
  cmd_gen_data(60, 0, other.string());
  CHECK(read_text(ws().root / "data/manifest.jsonl") == read_text(other / "manifest.jsonl"));
  CHECK(read_manifest(other / "manifest.jsonl").size() == 60);
  CHECK_FALSE(load_split(other / "manifest.jsonl", Split::TRAIN).empty());
  CHECK_FALSE(load_split(other / "manifest.jsonl", Split::TEST).empty());
}

TEST_CASE("stage names") {
  CHECK(parse_stage("base").stage == Stage::BASE);
  const auto c = parse_stage("condition-lora:DEPTH");
  CHECK(c.stage == Stage::CONDITION_LORA);
  CHECK(c.conditions == std::vector<ConditionType>{ConditionType::DEPTH});
  CHECK(stage_slug(c) == "condition-lora-DEPTH");
  CHECK(parse_stage("denoising-lora").stage == Stage::DENOISING_LORA);
  CHECK_THROWS_AS(parse_stage("finetune"), ConfigError);
  CHECK_THROWS_AS(parse_stage("condition-lora:SKETCH"), ConfigError);
}

TEST_CASE("training stages write what they train") {
  const auto& t = trained();
  const auto base = load_checkpoint(t.base);
  CHECK(base.get("stage") == "base");
  CHECK(base.get("train.step") == "3");
  CHECK_FALSE(base.get("base_hash").empty());
  CHECK(lines(fs::path(t.base).replace_extension(".loss.csv").string()).size() == 4);

  const auto canny = load_checkpoint(t.canny);
  CHECK(canny.get("base_hash") == base.get("base_hash"));
  CHECK(canny.has_tensor("cond_lora/CANNY/dual0/q/A"));
  CHECK_FALSE(canny.has_tensor("cond_lora/DEPTH/dual0/q/A"));
  // The backbone is untouched by a Condition-LoRA run.
  const auto bt = base.tensor_map(), ct = canny.tensor_map();
  for (const auto& [name, tensor] : bt)
    if (name.rfind("base/", 0) == 0) CHECK(ct.at(name).values() == tensor.values());

  // Denoising stage: refuses without the Condition-LoRAs, trains with them.
  TrainArgs bad{ws().config(), "denoising-lora", {t.base}};
  CHECK_THROWS_AS(cmd_train(bad), ConfigError);
  TrainArgs good{ws().config(), "denoising-lora", {t.base, t.canny, t.depth}};
  const auto out = cmd_train(good);
  const auto dn = load_checkpoint(out.checkpoint);
  CHECK(dn.has_tensor("denoise_lora/dual0/q/A"));
  const auto lt = dn.tensor_map();
  for (const auto& [name, tensor] : ct)
    if (name.rfind("cond_lora/", 0) == 0) CHECK(lt.at(name).values() == tensor.values());

  TrainArgs orphan{ws().config(), "condition-lora:DEPTH"};
  CHECK_THROWS_AS(cmd_train(orphan), ConfigError);
}

TEST_CASE("resume continues the run and its loss curve") {
  auto cfg = ws().config("resume");
  TrainArgs first{cfg, "base"};
  const auto a = cmd_train(first);
  CHECK(a.first_step == 0);
  cfg.train.steps = 5;
  TrainArgs more{cfg, "base", {}, a.checkpoint};
  const auto b = cmd_train(more);
  CHECK(b.first_step == 3);
  CHECK(b.checkpoint == a.checkpoint);
  const auto csv = lines(b.loss_csv);
  REQUIRE(csv.size() == 6);
  CHECK(csv[0] == "step,loss");
  CHECK(csv[4].rfind("3,", 0) == 0);
  CHECK(csv[5].rfind("4,", 0) == 0);

  // Uninterrupted 5 steps land on the same weights.
  auto straight = ws().config("straight");
  straight.train.steps = 5;
  const auto c = cmd_train(TrainArgs{straight, "base"});
  const auto wb = load_checkpoint(b.checkpoint).tensor_map();
  const auto wc = load_checkpoint(c.checkpoint).tensor_map();
  for (const auto& [name, tensor] : wc)
    if (name.rfind("base/", 0) == 0) CHECK(max_abs_diff(wb.at(name).data(), tensor.data()) < 1e-6);

  TrainArgs wrong{cfg, "denoising-lora", {}, a.checkpoint};
  CHECK_THROWS_AS(cmd_train(wrong), ConfigError);
}

TEST_CASE("sample writes deterministic images") {
  const auto& t = trained();
  const auto s = load_split(ws().root / "data/manifest.jsonl", Split::TEST, 1).at(0);
  const auto cond_dir = ws().root / "conds";
  fs::create_directories(cond_dir);
  write_png(cond_dir / "canny.png", s.conditions.at(ConditionType::CANNY));
  write_png(cond_dir / "depth.png", s.conditions.at(ConditionType::DEPTH));

  SampleArgs args{ws().config("samples_a"), {t.base, t.canny, t.depth},
                  {decode_caption(s.caption_ids), "a red circle"},
                  {{ConditionType::CANNY, (cond_dir / "canny.png").string()},
                   {ConditionType::DEPTH, (cond_dir / "depth.png").string()}}};
  const auto a = cmd_sample(args);
  REQUIRE(a.size() == 2);
  args.config.output.dir = (ws().root / "samples_b").string();
  const auto b = cmd_sample(args);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(fs::path(a[i]).filename() == fs::path(b[i]).filename());
    CHECK(read_text(a[i]) == read_text(b[i]));
    CHECK(read_png(a[i]).channels == 3);
  }
  CHECK(fs::path(a[0]).filename().string().find("training-free") != std::string::npos);

  // Training-based needs the denoising adapter these checkpoints lack.
  args.config.sampling.mode = SampleMode::TRAINING_BASED;
  CHECK_THROWS_AS(cmd_sample(args), ConfigError);
  args.config.sampling.mode = SampleMode::TRAINING_FREE;

  write_png(cond_dir / "small.png", Image::filled(16, 16, 1, 0.0f));
  args.conds = {{ConditionType::CANNY, (cond_dir / "small.png").string()}};
  CHECK_THROWS_AS(cmd_sample(args), DimensionError);
  args.conds = {{ConditionType::SUBJECT, (cond_dir / "canny.png").string()}};
  CHECK_THROWS_AS(cmd_sample(args), ConfigError);
  args.conds.clear();
  args.prompts = {"a dodecahedron"};
  CHECK_THROWS_AS(cmd_sample(args), ConfigError);
}

TEST_CASE("eval reports") {
  const auto& t = trained();
  EvalArgs args{ws().config("eval"), {t.base, t.canny, t.depth}};
  args.config.data.limit = 2;
  const auto r = cmd_eval(args);
  CHECK(r.count() == 2);
  CHECK(r.label == "training-free");
  CHECK(fs::exists(ws().root / "eval/eval_training-free.jsonl"));
  CHECK(lines((ws().root / "eval/eval_training-free.jsonl").string()).size() == 3);
  const auto again = cmd_eval(args);
  CHECK(again.config_hash == r.config_hash);
  CHECK(again.mean_f1() == r.mean_f1());

  args.config.data.limit = 0;
  args.label = "empty";
  const auto e = cmd_eval(args);
  CHECK(e.count() == 0);
  CHECK(lines((ws().root / "eval/eval_empty.jsonl").string()).size() == 1);

  args.conditions = {ConditionType::SUBJECT};
  CHECK_THROWS_AS(cmd_eval(args), ConfigError);
}

TEST_CASE("count-ops") {
  CHECK(cmd_count_ops(512, 1024, {1024, 1024}, 57, AttnMode::MMDIT) == "732168192 (732.17M)");
  CHECK(cmd_count_ops(512, 1024, {1024, 1024}, 57, AttnMode::CMMDIT) == "612630528 (612.63M)");
  // No conditions: both modes are plain attention.
  CHECK(cmd_count_ops(3, 5, {}, 1, AttnMode::MMDIT) == cmd_count_ops(3, 5, {}, 1, AttnMode::CMMDIT));
  CHECK(cmd_count_ops(3, 5, {}, 1, AttnMode::MMDIT).rfind("64 ", 0) == 0);
  CHECK(parse_lengths("") == std::vector<std::int64_t>{});
  CHECK(parse_lengths("4, 7") == std::vector<std::int64_t>{4, 7});
  CHECK_THROWS_AS(parse_lengths("4,x"), ConfigError);
  CHECK_THROWS_AS(parse_lengths("4x"), ConfigError);
  CHECK_THROWS_AS(cmd_count_ops(3, 0, {}, 1, AttnMode::MMDIT), DimensionError);
}

TEST_CASE("attention map command") {
  const auto& t = trained();
  // Maps need SUBJECT and MASK_FILL adapters; fresh ones are enough for shape checks.
  auto loaded = restore({load_checkpoint(t.base)});
  std::mt19937_64 rng(9);
  loaded.registry.add_condition(ConditionType::SUBJECT,
                                loaded.model->make_adapter("cond_lora/SUBJECT", rng));
  loaded.registry.add_condition(ConditionType::MASK_FILL,
                                loaded.model->make_adapter("cond_lora/MASK_FILL", rng));
  const auto path = (ws().root / "subject.uckp").string();
  auto ckpt = make_checkpoint(*loaded.model, loaded.registry);
  save_checkpoint(path, ckpt);

  AttnMapArgs args{ws().config("maps"), {path}};
  const auto out = cmd_attn_map(args);
  CHECK(fs::exists(out.image));
  CHECK(out.concentration >= 0.0);
  CHECK(out.concentration <= 1.0);
  CHECK(read_png(out.image).height == 32);

  args.config.sampling.mode = SampleMode::TRAINING_BASED;
  CHECK_THROWS_AS(cmd_attn_map(args), ConfigError);
  args.config.sampling.mode = SampleMode::TRAINING_FREE;
  args.index = 100000;
  CHECK_THROWS_AS(cmd_attn_map(args), ConfigError);
}

TEST_CASE("config files and overrides") {
  RunConfig cfg;
  cfg.set("train.steps=42");
  cfg.set("sampling.mode = training-based");
  cfg.set("model.patch_size=2");
  cfg.set("train.conditions=DEPTH,CANNY");
  const auto back = parse_ini(cfg.to_ini());
  CHECK(back.to_ini() == cfg.to_ini());
  CHECK(back.train.steps == 42);
  CHECK(back.model.patch_size == 2);
  CHECK(back.sampling.mode == SampleMode::TRAINING_BASED);
  CHECK(back.train.conditions == std::vector<ConditionType>{ConditionType::DEPTH, ConditionType::CANNY});

  CHECK_THROWS_AS(cfg.set("train.epochs=3"), ConfigError);
  CHECK_THROWS_AS(cfg.set("gpu.count=3"), ConfigError);
  CHECK_THROWS_AS(cfg.set("train.steps=many"), ConfigError);
  CHECK_THROWS_AS(cfg.set("nodot=3"), ConfigError);
  CHECK_THROWS_AS(parse_ini("steps = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_ini("[train\nsteps = 3\n"), ConfigError);
  try {
    parse_ini("[train]\n\nsteps = x\n", "run.ini");
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("run.ini:3") != std::string::npos);
  }
  CHECK(parse_ini("# comment\n[data]\ndir = d ; trailing\n").data.dir == "d");
  RunConfig v;
  v.train.batch_size = 0;
  CHECK_THROWS_AS(v.validate(), ConfigError);
  CHECK(v.manifest_path() == (fs::path("data") / "manifest.jsonl").string());
}
