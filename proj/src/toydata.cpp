#include "unicombine/toydata.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace unicombine {

Image Image::filled(std::int64_t h, std::int64_t w, std::int64_t c, float value) {
  return Image{h, w, c, std::vector<float>(static_cast<std::size_t>(h * w * c), value)};
}

const std::vector<Rgb>& shape_palette() {
  static const std::vector<Rgb> p{{0.90f, 0.10f, 0.10f}, {0.10f, 0.80f, 0.20f},
                                  {0.15f, 0.25f, 0.95f}, {0.95f, 0.90f, 0.10f},
                                  {0.85f, 0.20f, 0.85f}, {0.10f, 0.85f, 0.90f},
                                  {1.00f, 0.55f, 0.00f}};
  return p;
}

const std::vector<Rgb>& background_palette() {
  static const std::vector<Rgb> p{{0.0f, 0.0f, 0.0f}, {0.0f, 0.0f, 0.2f}};
  return p;
}

namespace {

const std::vector<std::string> kColorWords{"red",     "green", "blue",  "yellow",
                                           "magenta", "cyan",  "orange"};
const std::vector<std::string> kKindWords{"circle", "rectangle", "triangle"};
const std::vector<std::string> kBackgroundWords{"black", "navy"};

int categorical(std::mt19937_64& rng, const std::vector<double>& weights) {
  std::discrete_distribution<int> d(weights.begin(), weights.end());
  return d(rng);
}

std::int64_t uniform_int(std::mt19937_64& rng, std::int64_t lo, std::int64_t hi) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

// Painter's order: nearest shape last.
std::vector<const SceneShape*> back_to_front(const SceneGraph& scene) {
  std::vector<const SceneShape*> order;
  for (const auto& s : scene.shapes) order.push_back(&s);
  std::stable_sort(order.begin(), order.end(),
                   [](const SceneShape* a, const SceneShape* b) { return a->layer < b->layer; });
  return order;
}

void paint(Image& img, const Rgb& c, std::int64_t y, std::int64_t x) {
  img.at(y, x, 0) = c.r;
  img.at(y, x, 1) = c.g;
  img.at(y, x, 2) = c.b;
}

}  // namespace

bool SceneShape::contains(std::int64_t y, std::int64_t x) const {
  const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
  const double dy = py - static_cast<double>(cy), dx = px - static_cast<double>(cx);
  switch (kind) {
    case ShapeKind::CIRCLE:
      return dy * dy + dx * dx <= static_cast<double>(half_h * half_h);
    case ShapeKind::RECT:
      return std::abs(dy) <= static_cast<double>(half_h) &&
             std::abs(dx) <= static_cast<double>(half_w);
    case ShapeKind::TRIANGLE: {
      // Apex up at cy - s, base at cy + s, base half-width s.
      const double s = static_cast<double>(half_h);
      if (dy < -s || dy > s) return false;
      return std::abs(dx) <= (dy + s) / 2.0;
    }
  }
  return false;
}

bool SceneShape::inside_canvas(std::int64_t size) const {
  return cy - half_h >= 0 && cy + half_h <= size && cx - half_w >= 0 && cx + half_w <= size;
}

std::string to_string(Split split) {
  switch (split) {
    case Split::TRAIN: return "train";
    case Split::TEST: return "test";
    case Split::DISCARD: return "discard";
  }
  return "discard";
}

// ---- captions ---------------------------------------------------------------------

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> v = [] {
    std::vector<std::string> words{"<pad>", "a"};
    words.insert(words.end(), kColorWords.begin(), kColorWords.end());
    words.insert(words.end(), kKindWords.begin(), kKindWords.end());
    for (const char* w : {"in", "the", "top", "bottom", "left", "right", "on"})
      words.emplace_back(w);
    words.insert(words.end(), kBackgroundWords.begin(), kBackgroundWords.end());
    for (const char* w : {"with", "one", "two", "other", "others"}) words.emplace_back(w);
    return words;
  }();
  return v;
}

std::int64_t token_id(const std::string& word) {
  const auto& v = vocabulary();
  auto it = std::find(v.begin(), v.end(), word);
  if (it == v.end()) throw ContractError("word '" + word + "' is not in the vocabulary");
  return it - v.begin();
}

std::string decode_caption(const std::vector<std::int64_t>& ids) {
  const auto& v = vocabulary();
  std::string out;
  for (auto id : ids) {
    if (id < 0 || id >= static_cast<std::int64_t>(v.size()))
      throw ContractError("unknown token id " + std::to_string(id));
    if (!out.empty()) out += ' ';
    out += v[static_cast<std::size_t>(id)];
  }
  return out;
}

std::vector<std::int64_t> caption_for(const SceneGraph& scene) {
  const auto& s = scene.shapes.at(0);
  const auto half = kCanvas / 2;
  std::vector<std::string> words{"a",
                                 kColorWords.at(static_cast<std::size_t>(s.color)),
                                 kKindWords.at(static_cast<std::size_t>(s.kind)),
                                 "in",
                                 "the",
                                 s.cy < half ? "top" : "bottom",
                                 s.cx < half ? "left" : "right",
                                 "on",
                                 kBackgroundWords.at(static_cast<std::size_t>(scene.background))};
  const auto others = scene.shapes.size() - 1;
  if (others == 1) words.insert(words.end(), {"with", "one", "other"});
  if (others == 2) words.insert(words.end(), {"with", "two", "others"});
  std::vector<std::int64_t> ids;
  for (const auto& w : words) ids.push_back(token_id(w));
  return ids;
}

CaptionFacts parse_caption(const std::vector<std::int64_t>& ids) {
  CaptionFacts f;
  const auto& v = vocabulary();
  for (auto id : ids) {
    if (id < 0 || id >= static_cast<std::int64_t>(v.size()))
      throw ContractError("unknown token id " + std::to_string(id));
    const auto& w = v[static_cast<std::size_t>(id)];
    if (auto c = std::find(kColorWords.begin(), kColorWords.end(), w); c != kColorWords.end())
      f.color = static_cast<int>(c - kColorWords.begin());
    else if (auto k = std::find(kKindWords.begin(), kKindWords.end(), w); k != kKindWords.end())
      f.kind = static_cast<ShapeKind>(k - kKindWords.begin());
    else if (auto b = std::find(kBackgroundWords.begin(), kBackgroundWords.end(), w);
             b != kBackgroundWords.end())
      f.background = static_cast<int>(b - kBackgroundWords.begin());
    else if (w == "top") f.top = true;
    else if (w == "left") f.left = true;
    else if (w == "one") f.others = 1;
    else if (w == "two") f.others = 2;
  }
  return f;
}

bool caption_consistent(const std::vector<std::int64_t>& ids, const SceneGraph& scene) {
  if (scene.shapes.empty()) return false;
  const auto f = parse_caption(ids);
  const auto& s = scene.shapes[0];
  const auto half = kCanvas / 2;
  return f.color == s.color && f.kind == s.kind && f.top == (s.cy < half) &&
         f.left == (s.cx < half) && f.background == scene.background &&
         f.others == static_cast<int>(scene.shapes.size()) - 1;
}

// ---- generation -----------------------------------------------------------------

SceneGraph gen_scene_graph(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    0x5ce9e5u};
  std::mt19937_64 rng(seq);
  SceneGraph scene;
  const auto count = static_cast<std::size_t>(uniform_int(rng, 1, 3));
  std::vector<int> layers{1, 2, 3, 4};
  std::shuffle(layers.begin(), layers.end(), rng);
  layers.resize(count);
  // The subject is the nearest shape, so it is never occluded.
  std::sort(layers.begin(), layers.end(), std::greater<>());
  std::vector<int> colors(shape_palette().size());
  for (std::size_t i = 0; i < colors.size(); ++i) colors[i] = static_cast<int>(i);
  std::shuffle(colors.begin(), colors.end(), rng);
  scene.background = static_cast<int>(uniform_int(rng, 0, 1));
  for (std::size_t i = 0; i < count; ++i) {
    SceneShape s;
    s.kind = static_cast<ShapeKind>(uniform_int(rng, 0, 2));
    s.color = colors[i];
    s.layer = layers[i];
    switch (s.kind) {
      case ShapeKind::CIRCLE:
      case ShapeKind::TRIANGLE:
        s.half_h = s.half_w = uniform_int(rng, 4, 8);
        break;
      case ShapeKind::RECT:
        s.half_h = uniform_int(rng, 3, 8);
        s.half_w = uniform_int(rng, 3, 8);
        break;
    }
    s.cy = uniform_int(rng, s.half_h, kCanvas - s.half_h);
    s.cx = uniform_int(rng, s.half_w, kCanvas - s.half_w);
    scene.shapes.push_back(s);
  }
  return scene;
}

Image render(const SceneGraph& scene) {
  auto img = Image::filled(kCanvas, kCanvas, 3, 0.0f);
  const auto& bg = background_palette().at(static_cast<std::size_t>(scene.background));
  for (std::int64_t y = 0; y < kCanvas; ++y)
    for (std::int64_t x = 0; x < kCanvas; ++x) paint(img, bg, y, x);
  for (const auto* s : back_to_front(scene)) {
    const auto& c = shape_palette().at(static_cast<std::size_t>(s->color));
    for (std::int64_t y = 0; y < kCanvas; ++y)
      for (std::int64_t x = 0; x < kCanvas; ++x)
        if (s->contains(y, x)) paint(img, c, y, x);
  }
  return img;
}

float luma(const Image& img, std::int64_t y, std::int64_t x) {
  if (img.channels == 1) return img.at(y, x, 0);
  return 0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) + 0.114f * img.at(y, x, 2);
}

Image edge_map(const Image& img, float tau) {
  auto out = Image::filled(img.height, img.width, 1, 0.0f);
  for (std::int64_t y = 0; y < img.height; ++y)
    for (std::int64_t x = 0; x < img.width; ++x) {
      const float l = luma(img, y, x);
      const float gx = x + 1 < img.width ? luma(img, y, x + 1) - l : 0.0f;
      const float gy = y + 1 < img.height ? luma(img, y + 1, x) - l : 0.0f;
      if (std::sqrt(gx * gx + gy * gy) > tau) out.at(y, x) = 1.0f;
    }
  return out;
}

Image depth_map(const SceneGraph& scene) {
  auto out = Image::filled(kCanvas, kCanvas, 1, 0.0f);
  for (const auto* s : back_to_front(scene))
    for (std::int64_t y = 0; y < kCanvas; ++y)
      for (std::int64_t x = 0; x < kCanvas; ++x)
        if (s->contains(y, x))
          out.at(y, x) = static_cast<float>(s->layer) / static_cast<float>(kMaxLayers);
  return out;
}

Image estimate_depth(const Image& img, const SceneGraph& scene) {
  if (img.channels != 3) throw DimensionError("estimate_depth expects an RGB image");
  struct Candidate {
    Rgb color;
    float depth;
  };
  std::vector<Candidate> cands{
      {background_palette().at(static_cast<std::size_t>(scene.background)), 0.0f}};
  for (const auto& s : scene.shapes)
    cands.push_back({shape_palette().at(static_cast<std::size_t>(s.color)),
                     static_cast<float>(s.layer) / static_cast<float>(kMaxLayers)});
  auto out = Image::filled(img.height, img.width, 1, 0.0f);
  for (std::int64_t y = 0; y < img.height; ++y)
    for (std::int64_t x = 0; x < img.width; ++x) {
      float best = std::numeric_limits<float>::max();
      for (const auto& c : cands) {
        const float dr = img.at(y, x, 0) - c.color.r, dg = img.at(y, x, 1) - c.color.g,
                    db = img.at(y, x, 2) - c.color.b;
        const float d = dr * dr + dg * dg + db * db;
        if (d < best) {
          best = d;
          out.at(y, x) = c.depth;
        }
      }
    }
  return out;
}

namespace {

SceneShape centred_subject(const SceneGraph& scene) {
  auto s = scene.shapes.at(0);
  s.cy = kCanvas / 2;
  s.cx = kCanvas / 2;
  return s;
}

}  // namespace

Image render_subject(const SceneGraph& scene) {
  auto img = Image::filled(kCanvas, kCanvas, 3, 1.0f);
  const auto s = centred_subject(scene);
  const auto& c = shape_palette().at(static_cast<std::size_t>(s.color));
  for (std::int64_t y = 0; y < kCanvas; ++y)
    for (std::int64_t x = 0; x < kCanvas; ++x)
      if (s.contains(y, x)) paint(img, c, y, x);
  return img;
}

Image subject_mask(const SceneGraph& scene) {
  auto out = Image::filled(kCanvas, kCanvas, 1, 0.0f);
  const auto s = centred_subject(scene);
  for (std::int64_t y = 0; y < kCanvas; ++y)
    for (std::int64_t x = 0; x < kCanvas; ++x)
      if (s.contains(y, x)) out.at(y, x) = 1.0f;
  return out;
}

Image hole_mask(const SceneGraph& scene) {
  const auto& s = scene.shapes.at(0);
  auto out = Image::filled(kCanvas, kCanvas, 1, 0.0f);
  const auto y0 = std::max<std::int64_t>(0, s.cy - s.half_h - 1);
  const auto y1 = std::min<std::int64_t>(kCanvas, s.cy + s.half_h + 1);
  const auto x0 = std::max<std::int64_t>(0, s.cx - s.half_w - 1);
  const auto x1 = std::min<std::int64_t>(kCanvas, s.cx + s.half_w + 1);
  for (auto y = y0; y < y1; ++y)
    for (auto x = x0; x < x1; ++x) out.at(y, x) = 1.0f;
  return out;
}

Image masked_background(const Image& target, const Image& hole) {
  auto out = Image::filled(target.height, target.width, 4, 0.0f);
  for (std::int64_t y = 0; y < target.height; ++y)
    for (std::int64_t x = 0; x < target.width; ++x) {
      const bool in_hole = hole.at(y, x) > 0.5f;
      for (std::int64_t c = 0; c < 3; ++c) out.at(y, x, c) = in_hole ? 0.5f : target.at(y, x, c);
      out.at(y, x, 3) = in_hole ? 1.0f : 0.0f;
    }
  return out;
}

ToySample gen_scene(std::uint64_t seed) {
  ToySample s;
  s.seed = seed;
  s.scene = gen_scene_graph(seed);
  s.target = render(s.scene);
  s.conditions[ConditionType::CANNY] = edge_map(s.target);
  s.conditions[ConditionType::DEPTH] = depth_map(s.scene);
  s.conditions[ConditionType::SUBJECT] = render_subject(s.scene);
  s.conditions[ConditionType::MASK_FILL] = masked_background(s.target, hole_mask(s.scene));
  s.subject_mask = subject_mask(s.scene);
  s.caption_ids = caption_for(s.scene);
  // Separate stream so the scene layout does not depend on the score draw.
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    0x5c07e5u};
  std::mt19937_64 rng(seq);
  const std::vector<double> weights{0.05, 0.05, 0.10, 0.20, 0.60};
  s.scores = {categorical(rng, weights) + 1, categorical(rng, weights) + 1,
              categorical(rng, weights) + 1};
  s.split = partition(s.scores);
  return s;
}

Split partition(const Scores& scores) {
  for (int v : {scores.cs, scores.iq, scores.sc})
    if (v < 1 || v > 5) throw ContractError("score " + std::to_string(v) + " outside 1..5");
  if (scores.cs == 5 && scores.iq == 5 && scores.sc == 5) return Split::TRAIN;
  if (scores.cs >= 3 && scores.iq == 5 && scores.sc == 5) return Split::TEST;
  return Split::DISCARD;
}

}  // namespace unicombine
