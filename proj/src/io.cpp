#include "unicombine/io.hpp"

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace unicombine {

// ---- text files ---------------------------------------------------------------------

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

// ---- PNG ----------------------------------------------------------------------------

namespace {

int color_type(std::int64_t channels) {
  switch (channels) {
    case 1: return PNG_COLOR_TYPE_GRAY;
    case 3: return PNG_COLOR_TYPE_RGB;
    case 4: return PNG_COLOR_TYPE_RGB_ALPHA;
  }
  throw DimensionError("PNG images have 1, 3 or 4 channels, not " + std::to_string(channels));
}

std::vector<unsigned char> quantize(const Image& image) {
  std::vector<unsigned char> bytes(image.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(image.pixels[i], 0.0f, 1.0f) * 255.0f));
  return bytes;
}

void png_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void png_flush_noop(png_structp) {}

}  // namespace

std::vector<unsigned char> encode_png(const Image& image) {
  const int ctype = color_type(image.channels);
  auto bytes = quantize(image);
  std::vector<unsigned char> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encoding failed");
  }
  png_set_write_fn(png, &out, png_to_vector, png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width),
               static_cast<png_uint_32>(image.height), 8, ctype, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const auto stride = static_cast<std::size_t>(image.width * image.channels);
  for (std::int64_t y = 0; y < image.height; ++y)
    png_write_row(png, bytes.data() + static_cast<std::size_t>(y) * stride);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

void write_png(const fs::path& path, const Image& image) {
  const auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Image read_png(const fs::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  std::int64_t channels = 3;
  if (img.format & PNG_FORMAT_FLAG_ALPHA) {
    img.format = PNG_FORMAT_RGBA;
    channels = 4;
  } else if (!(img.format & PNG_FORMAT_FLAG_COLOR)) {
    img.format = PNG_FORMAT_GRAY;
    channels = 1;
  } else {
    img.format = PNG_FORMAT_RGB;
  }
  std::vector<unsigned char> bytes(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  Image out{static_cast<std::int64_t>(img.height), static_cast<std::int64_t>(img.width), channels, {}};
  out.pixels.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) out.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
  return out;
}

// ---- checkpoint ---------------------------------------------------------------------

std::string Checkpoint::get(const std::string& key, const std::string& fallback) const {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  return fallback;
}

void Checkpoint::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : meta)
    if (k == key) {
      v = value;
      return;
    }
  meta.emplace_back(key, value);
}

bool Checkpoint::has_tensor(const std::string& name) const {
  return std::any_of(tensors.begin(), tensors.end(),
                     [&](const auto& p) { return p.first == name; });
}

std::map<std::string, Tensor<float>> Checkpoint::tensor_map() const {
  return {tensors.begin(), tensors.end()};
}

bool Checkpoint::operator==(const Checkpoint& other) const {
  if (meta != other.meta || tensors.size() != other.tensors.size()) return false;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& [na, a] = tensors[i];
    const auto& [nb, b] = other.tensors[i];
    if (na != nb || a.shape() != b.shape()) return false;
    if (std::memcmp(a.values().data(), b.values().data(), a.values().size() * sizeof(float)) != 0)
      return false;
  }
  return true;
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little endian");

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<unsigned char> bytes;
};

class Reader {
 public:
  Reader(const std::vector<unsigned char>& bytes, std::size_t end, std::string origin)
      : bytes_(bytes), end_(end), origin_(std::move(origin)) {}
  template <typename T>
  T pod() {
    T v;
    raw(&v, sizeof(T));
    return v;
  }
  void raw(void* out, std::size_t n) {
    if (pos_ + n > end_) throw IoError(origin_ + ": truncated checkpoint");
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string origin_;
};

std::uint32_t crc_of(const unsigned char* data, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), data, static_cast<uInt>(n)));
}

}  // namespace

std::vector<unsigned char> serialize(const Checkpoint& ckpt) {
  Writer w;
  w.raw("UCKP", 4);
  w.pod<std::uint32_t>(kCheckpointVersion);
  std::string blob;
  for (const auto& [k, v] : ckpt.meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw ContractError("checkpoint metadata '" + k + "' contains a separator");
    blob += k + "=" + v + "\n";
  }
  w.pod<std::uint64_t>(blob.size());
  w.raw(blob.data(), blob.size());
  w.pod<std::uint64_t>(ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.raw(name.data(), name.size());
    w.pod<std::uint8_t>(0);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.ndim()));
    for (auto d : t.shape()) w.pod<std::int64_t>(d);
    w.raw(t.values().data(), t.values().size() * sizeof(float));
  }
  w.pod<std::uint32_t>(crc_of(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

Checkpoint deserialize(const std::vector<unsigned char>& bytes, const std::string& origin) {
  if (bytes.size() < 12) throw IoError(origin + ": file too short to be a checkpoint");
  const auto body = bytes.size() - 4;
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (std::memcmp(bytes.data(), "UCKP", 4) != 0) throw IoError(origin + ": not a checkpoint");
  if (stored != crc_of(bytes.data(), body)) throw IoError(origin + ": checksum mismatch");
  Reader r(bytes, body, origin);
  char magic[4];
  r.raw(magic, 4);
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IoError(origin + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  std::string blob(r.pod<std::uint64_t>(), '\0');
  r.raw(blob.data(), blob.size());
  std::istringstream lines(blob);
  for (std::string line; std::getline(lines, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError(origin + ": malformed metadata line");
    ckpt.meta.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  const auto count = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name(r.pod<std::uint32_t>(), '\0');
    r.raw(name.data(), name.size());
    const auto dtype = r.pod<std::uint8_t>();
    Shape shape(r.pod<std::uint32_t>());
    for (auto& d : shape) d = r.pod<std::int64_t>();
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    std::vector<float> values(n);
    if (dtype == 0) {
      r.raw(values.data(), n * sizeof(float));
    } else if (dtype == 1) {
      std::vector<double> wide(n);
      r.raw(wide.data(), n * sizeof(double));
      std::copy(wide.begin(), wide.end(), values.begin());
    } else {
      throw IoError(origin + ": tensor '" + name + "' has unknown dtype " + std::to_string(dtype));
    }
    ckpt.tensors.emplace_back(name, Tensor<float>::from(shape, std::move(values)));
  }
  if (r.pos() != body) throw IoError(origin + ": trailing bytes in checkpoint");
  return ckpt;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& path) {
  const auto text = read_text(path);
  return deserialize(std::vector<unsigned char>(text.begin(), text.end()), path.string());
}

std::string base_hash(const Model<float>& model) {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& [name, t] : model.params().items()) {
    crc = crc32(crc, reinterpret_cast<const Bytef*>(name.data()), static_cast<uInt>(name.size()));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(t.values().data()),
                static_cast<uInt>(t.values().size() * sizeof(float)));
  }
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

Checkpoint make_checkpoint(const Model<float>& model, const LoraRegistry<float>& registry) {
  Checkpoint ckpt;
  for (const auto& [k, v] : model.config().to_pairs()) ckpt.meta.emplace_back("model." + k, v);
  ckpt.meta.emplace_back("base_hash", base_hash(model));
  for (const auto& [name, t] : model.params().items()) ckpt.tensors.emplace_back(name, t.detach());
  for (const auto& [name, t] : registry.named_tensors()) ckpt.tensors.emplace_back(name, t.detach());
  return ckpt;
}

namespace {

ModelConfig config_of(const Checkpoint& ckpt) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& [k, v] : ckpt.meta)
    if (k.rfind("model.", 0) == 0) pairs.emplace_back(k.substr(6), v);
  return ModelConfig::from_pairs(pairs);
}

// "cond_lora/CANNY/dual0/q/A" -> ("cond_lora/CANNY", "dual0/q", 'A')
struct AdapterKey {
  std::string adapter;
  std::string target;
  char factor;
};

AdapterKey split_adapter_key(const std::string& name) {
  const auto last = name.rfind('/');
  if (last == std::string::npos || last + 2 != name.size())
    throw IoError("malformed adapter tensor name '" + name + "'");
  const char factor = name.back();
  const auto rest = name.substr(0, last);
  const auto prefix = rest.rfind("cond_lora/", 0) == 0 ? 2 : 1;
  std::size_t cut = std::string::npos, from = 0;
  for (int i = 0; i < prefix; ++i) {
    cut = rest.find('/', from);
    if (cut == std::string::npos) throw IoError("malformed adapter tensor name '" + name + "'");
    from = cut + 1;
  }
  return {rest.substr(0, cut), rest.substr(cut + 1), factor};
}

}  // namespace

LoadedModel restore(const std::vector<Checkpoint>& ckpts) {
  if (ckpts.empty()) throw ConfigError("no checkpoint given");
  const auto config = config_of(ckpts.front());
  LoadedModel out;
  out.model = std::make_unique<Model<float>>(config, 0);
  auto& params = out.model->params();
  const auto hash = ckpts.front().get("base_hash");
  std::map<std::string, std::map<std::string, LoraFactors<float>>> adapters;
  std::map<std::string, std::size_t> source;  // adapter -> checkpoint that supplied it
  for (std::size_t c = 0; c < ckpts.size(); ++c) {
    const auto& ckpt = ckpts[c];
    if (!(config_of(ckpt) == config))
      throw ConfigError("checkpoints disagree on the model configuration");
    if (ckpt.get("base_hash") != hash)
      throw ConfigError("checkpoints were trained on different base weights");
    for (const auto& [name, t] : ckpt.tensors) {
      if (name.rfind("base/", 0) == 0) {
        if (c > 0) continue;
        if (!params.contains(name)) throw ConfigError("unknown parameter '" + name + "'");
        auto p = params.get(name);
        if (p.shape() != t.shape())
          throw DimensionError("parameter '" + name + "' has shape " + shape_str(t.shape()) +
                               ", expected " + shape_str(p.shape()));
        p.values() = t.values();
      } else if (name.rfind("cond_lora/", 0) == 0 || name.rfind("denoise_lora/", 0) == 0 ||
                 name.rfind("text_lora/", 0) == 0) {
        const auto key = split_adapter_key(name);
        const auto [it, fresh] = source.emplace(key.adapter, c);
        if (!fresh && it->second != c)
          throw ConfigError("two checkpoints provide adapter " + key.adapter);
        auto& f = adapters[key.adapter][key.target];
        (key.factor == 'A' ? f.a : f.b) = t.detach();
      }
      // Anything else (optimizer state) is not part of the model.
    }
  }
  if (base_hash(*out.model) != hash) throw IoError("base weights do not match their recorded hash");
  for (auto& [name, targets] : adapters) {
    const auto rank = targets.begin()->second.a.defined() ? targets.begin()->second.a.rows()
                                                          : config.lora_rank;
    auto adapter = std::make_shared<LoraAdapter<float>>(name, rank,
                                                        static_cast<float>(config.lora_alpha));
    for (auto& [target, f] : targets) {
      if (!f.a.defined() || !f.b.defined())
        throw IoError("adapter " + name + "/" + target + " is missing a factor");
      adapter->set_target(target, std::move(f));
    }
    if (name.rfind("cond_lora/", 0) == 0) {
      const auto type = parse_condition_type(name.substr(10));
      if (out.registry.has_condition(type))
        throw ConfigError("two checkpoints provide a Condition-LoRA for " + to_string(type));
      out.registry.add_condition(type, adapter);
    } else if (name == "denoise_lora") {
      out.registry.set_denoising(adapter);
    } else if (name == "text_lora") {
      out.registry.set_text(adapter);
    }
  }
  return out;
}

// ---- manifest -----------------------------------------------------------------------

namespace {

const std::vector<std::pair<std::string, ConditionType>> kConditionFiles{
    {"canny", ConditionType::CANNY},
    {"depth", ConditionType::DEPTH},
    {"subject", ConditionType::SUBJECT},
    {"mask_fill", ConditionType::MASK_FILL}};

std::string stem(std::uint64_t seed) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%020llu", static_cast<unsigned long long>(seed));
  return buf;
}

}  // namespace

std::uint64_t sample_seed(std::uint64_t dataset_seed, std::int64_t index) {
  return (dataset_seed << 32) ^ static_cast<std::uint64_t>(index);
}

ManifestRecord manifest_record(const ToySample& sample) {
  ManifestRecord r;
  r.seed = sample.seed;
  r.split = sample.split;
  r.scores = sample.scores;
  r.caption = decode_caption(sample.caption_ids);
  const auto s = stem(sample.seed);
  r.files.emplace_back("target", s + "_target.png");
  for (const auto& [role, _] : kConditionFiles) r.files.emplace_back(role, s + "_" + role + ".png");
  return r;
}

std::string manifest_line(const ManifestRecord& record) {
  nlohmann::ordered_json j;
  j["seed"] = record.seed;
  j["split"] = to_string(record.split);
  j["scores"] = {{"cs", record.scores.cs}, {"iq", record.scores.iq}, {"sc", record.scores.sc}};
  j["caption"] = record.caption;
  nlohmann::ordered_json files;
  for (const auto& [role, path] : record.files) files[role] = path;
  j["files"] = files;
  return j.dump();
}

std::vector<ManifestRecord> read_manifest(const fs::path& path) {
  std::istringstream lines(read_text(path));
  std::vector<ManifestRecord> out;
  std::int64_t lineno = 0;
  for (std::string line; std::getline(lines, line);) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::ordered_json::parse(line);
      ManifestRecord r;
      r.seed = j.at("seed").get<std::uint64_t>();
      const auto split = j.at("split").get<std::string>();
      r.split = split == "train" ? Split::TRAIN : split == "test" ? Split::TEST : Split::DISCARD;
      r.scores = {j.at("scores").at("cs").get<int>(), j.at("scores").at("iq").get<int>(),
                  j.at("scores").at("sc").get<int>()};
      r.caption = j.at("caption").get<std::string>();
      for (const auto& [k, v] : j.at("files").items()) r.files.emplace_back(k, v.get<std::string>());
      out.push_back(std::move(r));
    } catch (const nlohmann::ordered_json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_dataset(const fs::path& dir, std::uint64_t seed, std::int64_t count) {
  if (count < 0) throw ConfigError("count must be >= 0");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::string manifest;
  for (std::int64_t i = 0; i < count; ++i) {
    const auto sample = gen_scene(sample_seed(seed, i));
    const auto record = manifest_record(sample);
    for (const auto& [role, file] : record.files) {
      const Image& img = role == "target"
                             ? sample.target
                             : sample.conditions.at(std::find_if(kConditionFiles.begin(),
                                                                 kConditionFiles.end(),
                                                                 [&](const auto& p) {
                                                                   return p.first == role;
                                                                 })->second);
      write_png(dir / file, img);
    }
    manifest += manifest_line(record) + "\n";
  }
  write_text(dir / "manifest.jsonl", manifest);
}

std::vector<ToySample> load_split(const fs::path& manifest, Split split, std::int64_t limit) {
  std::vector<ToySample> out;
  for (const auto& r : read_manifest(manifest)) {
    if (r.split != split) continue;
    if (limit >= 0 && static_cast<std::int64_t>(out.size()) >= limit) break;
    auto sample = gen_scene(r.seed);
    if (sample.split != r.split || decode_caption(sample.caption_ids) != r.caption)
      throw IoError(manifest.string() + ": record for seed " + std::to_string(r.seed) +
                    " does not match its regenerated sample");
    out.push_back(std::move(sample));
  }
  return out;
}

}  // namespace unicombine
