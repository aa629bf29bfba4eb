#include <doctest.h>

#include <random>

#include <json.hpp>

#include "unicombine/io.hpp"

using namespace unicombine;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / ("uc_io_" + name + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<unsigned char> slurp(const fs::path& p) {
  const auto s = read_text(p);
  return {s.begin(), s.end()};
}

}  // namespace

TEST_CASE("PNG round trip at 8-bit levels") {
  TempDir dir("png");
  std::mt19937_64 rng(1);
  for (std::int64_t ch : {1, 3, 4}) {
    auto img = Image::filled(9, 13, ch, 0.0f);
    for (auto& v : img.pixels) v = static_cast<float>(rng() % 256) / 255.0f;
    const auto path = dir.path / ("img" + std::to_string(ch) + ".png");
    write_png(path, img);
    const auto back = read_png(path);
    CHECK(back.height == 9);
    CHECK(back.width == 13);
    CHECK(back.channels == ch);
    CHECK(max_abs_diff(std::span<const float>(back.pixels), std::span<const float>(img.pixels)) <
          1e-6);
    CHECK(slurp(path) == encode_png(img));
  }
  // Out-of-range values clamp.
  auto wild = Image::filled(2, 2, 1, 3.0f);
  wild.pixels[0] = -1.0f;
  write_png(dir.path / "wild.png", wild);
  const auto w = read_png(dir.path / "wild.png");
  CHECK(w.pixels[0] == 0.0f);
  CHECK(w.pixels[1] == 1.0f);
  CHECK_THROWS_AS(write_png(dir.path / "bad.png", Image::filled(2, 2, 2, 0)), DimensionError);
  CHECK_THROWS_AS(read_png(dir.path / "absent.png"), IoError);
  write_text(dir.path / "junk.png", "not a png");
  CHECK_THROWS_AS(read_png(dir.path / "junk.png"), IoError);
}

TEST_CASE("checkpoint bytes round trip exactly") {
  TempDir dir("ckpt");
  Model<float> model(tiny_config(), 3);
  std::mt19937_64 rng(3);
  LoraRegistry<float> reg;
  reg.add_condition(ConditionType::DEPTH, model.make_adapter("cond_lora/DEPTH", rng));
  auto ckpt = make_checkpoint(model, reg);
  ckpt.set("stage", "condition-lora:DEPTH");
  ckpt.tensors.emplace_back("odd", Tensor<float>::from({2}, {std::nanf(""), -0.0f}));

  const auto bytes = serialize(ckpt);
  CHECK(bytes.size() > 12);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "UCKP");
  auto back = deserialize(bytes, "mem");
  CHECK(serialize(back) == bytes);
  CHECK(back.get("stage") == "condition-lora:DEPTH");
  CHECK(back.get("missing", "x") == "x");
  CHECK(back.has_tensor("cond_lora/DEPTH/dual0/q/A"));

  const auto path = dir.path / "m.uckp";
  save_checkpoint(path, ckpt);
  CHECK(slurp(path) == bytes);
  CHECK(serialize(load_checkpoint(path)) == bytes);
  // No temporary left behind.
  std::int64_t files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir.path)) ++files;
  CHECK(files == 1);

  // Any flipped byte is caught by the checksum.
  for (std::size_t pos : {std::size_t{5}, bytes.size() / 2, bytes.size() - 5}) {
    auto bad = bytes;
    bad[pos] ^= 0x10;
    CHECK_THROWS_AS(deserialize(bad, "mem"), IoError);
  }
  auto cut = bytes;
  cut.resize(8);
  CHECK_THROWS_AS(deserialize(cut, "mem"), IoError);
  CHECK_THROWS_AS(load_checkpoint(dir.path / "none.uckp"), IoError);

  Checkpoint sep;
  sep.set("a=b", "c");
  CHECK_THROWS_AS(serialize(sep), ContractError);
}

TEST_CASE("restore rebuilds model and adapters") {
  Model<float> model(tiny_config(), 4);
  std::mt19937_64 rng(4);
  LoraRegistry<float> reg;
  auto canny = model.make_adapter("cond_lora/CANNY", rng);
  for (auto& [_, f] : canny->targets()) {
    auto b = f.b;
    b.values() = Tensor<float>::randn(b.shape(), rng, 0.1).values();
  }
  reg.add_condition(ConditionType::CANNY, canny);
  const auto base_only = make_checkpoint(model, LoraRegistry<float>{});
  const auto with_adapter = make_checkpoint(model, reg);

  auto loaded = restore({base_only, with_adapter});
  CHECK(base_hash(*loaded.model) == base_hash(model));
  REQUIRE(loaded.registry.condition(ConditionType::CANNY) != nullptr);
  CHECK(loaded.registry.condition(ConditionType::DEPTH) == nullptr);
  for (const auto& [name, f] : canny->targets()) {
    const auto& g = loaded.registry.condition(ConditionType::CANNY)->at(name);
    CHECK(g.a.values() == f.a.values());
    CHECK(g.b.values() == f.b.values());
  }

  // Same forward output from the restored pair.
  const auto s = gen_scene(5);
  std::vector<std::int64_t> caption(s.caption_ids.begin(),
                                    s.caption_ids.begin() + std::min<std::size_t>(4, s.caption_ids.size()));
  auto x = Tensor<float>::randn({8, 8, 3}, rng);
  auto cond = Tensor<float>::randn({8, 8, 1}, rng);
  NoGradScope<float> ng;
  const auto a = model.forward(x, 0.3f, caption, {{ConditionType::CANNY, cond}}, {&reg, false, false});
  const auto b = loaded.model->forward(x, 0.3f, caption, {{ConditionType::CANNY, cond}},
                                       {&loaded.registry, false, false});
  CHECK(a.values() == b.values());

  Model<float> other(tiny_config(), 5);
  CHECK_THROWS_AS(restore({base_only, make_checkpoint(other, reg)}), ConfigError);
  CHECK_THROWS_AS(restore({with_adapter, with_adapter}), ConfigError);
  CHECK_THROWS_AS(restore({}), ConfigError);
  auto tampered = base_only;
  tampered.tensors[0].second.values()[0] += 1.0f;
  CHECK_THROWS_AS(restore({tampered}), IoError);
}

TEST_CASE("dataset writing is deterministic") {
  TempDir a("ds_a"), b("ds_b");
  write_dataset(a.path, 9, 12);
  write_dataset(b.path, 9, 12);
  const auto ma = read_text(a.path / "manifest.jsonl");
  CHECK(ma == read_text(b.path / "manifest.jsonl"));
  const auto records = read_manifest(a.path / "manifest.jsonl");
  REQUIRE(records.size() == 12);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    CHECK(r.seed == sample_seed(9, static_cast<std::int64_t>(i)));
    CHECK(r.files.size() == 5);
    for (const auto& [role, file] : r.files) {
      CHECK(fs::exists(a.path / file));
      CHECK(slurp(a.path / file) == slurp(b.path / file));
    }
    const auto sample = gen_scene(r.seed);
    CHECK(r.split == sample.split);
    CHECK(manifest_line(r) == manifest_line(manifest_record(sample)));
    REQUIRE(r.files[0].first == "target");
    const auto png = read_png(a.path / r.files[0].second);
    CHECK(max_abs_diff(std::span<const float>(png.pixels), std::span<const float>(sample.target.pixels)) <=
          0.5 / 255 + 1e-6);
    const auto j = nlohmann::json::parse(manifest_line(r));
    CHECK(j.contains("scores"));
    CHECK(j["files"].contains("mask_fill"));
  }

  std::int64_t train = 0;
  for (const auto& r : records) train += r.split == Split::TRAIN;
  CHECK(static_cast<std::int64_t>(load_split(a.path / "manifest.jsonl", Split::TRAIN).size()) == train);
  CHECK(load_split(a.path / "manifest.jsonl", Split::TRAIN, 0).empty());

  TempDir e("ds_empty");
  write_dataset(e.path, 1, 0);
  CHECK(read_text(e.path / "manifest.jsonl").empty());
  CHECK(read_manifest(e.path / "manifest.jsonl").empty());
  CHECK_THROWS_AS(write_dataset(e.path, 1, -1), ConfigError);

  write_text(e.path / "broken.jsonl", "{\"seed\": 1}\n");
  CHECK_THROWS_AS(read_manifest(e.path / "broken.jsonl"), IoError);
  // A record whose caption disagrees with its seed is rejected.
  auto r = records[0];
  r.caption = "a red circle";
  write_text(e.path / "lie.jsonl", manifest_line(r) + "\n");
  CHECK_THROWS_AS(load_split(e.path / "lie.jsonl", r.split), IoError);
}
