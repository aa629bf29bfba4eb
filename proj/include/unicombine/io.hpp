// Files: PNG rasters, the single-file checkpoint container and the dataset
// manifest.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "unicombine/model.hpp"
#include "unicombine/toydata.hpp"

namespace unicombine {

namespace fs = std::filesystem;

// 8-bit PNG with 1, 3 or 4 channels; values are clamped to [0, 1].
void write_png(const fs::path& path, const Image& image);
Image read_png(const fs::path& path);
// Encoded PNG bytes (what write_png puts on disk).
std::vector<unsigned char> encode_png(const Image& image);

// ---- checkpoint -------------------------------------------------------------------
//
// Layout (little endian):
//   "UCKP"  u32 version
//   u64 n   n bytes of "key=value\n" metadata (model config and run state)
//   u64 count, then per tensor:
//     u32 len, name bytes, u8 dtype (0 = f32, 1 = f64), u32 ndim, i64 dims[ndim], raw scalars
//   u32 crc32 of every preceding byte

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  std::string get(const std::string& key, const std::string& fallback = "") const;
  void set(const std::string& key, const std::string& value);
  bool has_tensor(const std::string& name) const;
  std::map<std::string, Tensor<float>> tensor_map() const;
  bool operator==(const Checkpoint& other) const;
};

std::vector<unsigned char> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::vector<unsigned char>& bytes, const std::string& origin);
// Written to a temporary sibling and renamed into place.
void save_checkpoint(const fs::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const fs::path& path);

// crc32 over the base weights, in hex; identifies the frozen backbone.
std::string base_hash(const Model<float>& model);

// Model config, base weights and every adapter of the registry.
Checkpoint make_checkpoint(const Model<float>& model, const LoraRegistry<float>& registry);

struct LoadedModel {
  std::unique_ptr<Model<float>> model;
  LoraRegistry<float> registry;
};

// Rebuilds a model and its adapters. Later checkpoints contribute adapters;
// all of them must carry the same base weights.
LoadedModel restore(const std::vector<Checkpoint>& ckpts);

// ---- dataset manifest ---------------------------------------------------------------

struct ManifestRecord {
  std::uint64_t seed = 0;
  Split split = Split::DISCARD;
  Scores scores;
  std::string caption;
  std::vector<std::pair<std::string, std::string>> files;  // role -> relative path
};

ManifestRecord manifest_record(const ToySample& sample);
std::string manifest_line(const ManifestRecord& record);
std::vector<ManifestRecord> read_manifest(const fs::path& path);

// Writes every sample's rasters and the manifest into `dir`.
void write_dataset(const fs::path& dir, std::uint64_t seed, std::int64_t count);
// Samples of the manifest in the given split, regenerated from their seeds.
std::vector<ToySample> load_split(const fs::path& manifest, Split split, std::int64_t limit = -1);
// Seed of sample `index` in a dataset generated with `seed`.
std::uint64_t sample_seed(std::uint64_t dataset_seed, std::int64_t index);

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

}  // namespace unicombine
