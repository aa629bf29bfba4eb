// Procedural multi-conditional dataset: random scenes of flat-coloured shapes,
// their captions, edge/depth/subject/masked-background condition maps and
// synthetic quality scores, plus the score-based train/test partition.
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "unicombine/lora.hpp"

namespace unicombine {

// Row-major H×W×C image with values in [0, 1].
struct Image {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::int64_t channels = 0;
  std::vector<float> pixels;

  static Image filled(std::int64_t h, std::int64_t w, std::int64_t c, float value);
  float& at(std::int64_t y, std::int64_t x, std::int64_t c = 0) {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  float at(std::int64_t y, std::int64_t x, std::int64_t c = 0) const {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  bool same_size(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  bool operator==(const Image&) const = default;
};

inline constexpr std::int64_t kCanvas = 32;

enum class ShapeKind { CIRCLE, RECT, TRIANGLE };

struct Rgb {
  float r, g, b;
};

// Shape colours, indexed by SceneShape::color.
const std::vector<Rgb>& shape_palette();
// Background colours, indexed by SceneGraph::background.
const std::vector<Rgb>& background_palette();

struct SceneShape {
  ShapeKind kind = ShapeKind::CIRCLE;
  int color = 0;
  std::int64_t cy = 0, cx = 0;          // centre, in pixels
  std::int64_t half_h = 1, half_w = 1;  // circle: radius; triangle: half side
  int layer = 1;                        // 1..4, larger is nearer the viewer

  // Pixel-centre containment.
  bool contains(std::int64_t y, std::int64_t x) const;
  bool inside_canvas(std::int64_t size) const;
};

// shapes[0] is the subject.
struct SceneGraph {
  std::vector<SceneShape> shapes;
  int background = 0;
};

inline constexpr int kMaxLayers = 4;

struct Scores {
  int cs = 5;  // composition structure
  int iq = 5;  // image quality
  int sc = 5;  // subject consistency
};

enum class Split { TRAIN, TEST, DISCARD };
std::string to_string(Split split);

struct ToySample {
  std::uint64_t seed = 0;
  SceneGraph scene;
  Image target;                              // 32×32×3
  std::map<ConditionType, Image> conditions;  // CANNY 1ch, DEPTH 1ch, SUBJECT 3ch, MASK_FILL 4ch
  Image subject_mask;                        // 32×32×1, subject pixels in the SUBJECT image
  std::vector<std::int64_t> caption_ids;
  Scores scores;
  Split split = Split::DISCARD;
};

// ---- captions ---------------------------------------------------------------------

const std::vector<std::string>& vocabulary();
std::int64_t token_id(const std::string& word);
std::string decode_caption(const std::vector<std::int64_t>& ids);

// What a caption asserts about its scene.
struct CaptionFacts {
  int color = -1;
  ShapeKind kind = ShapeKind::CIRCLE;
  bool top = false;
  bool left = false;
  int background = -1;
  int others = 0;
};

std::vector<std::int64_t> caption_for(const SceneGraph& scene);
CaptionFacts parse_caption(const std::vector<std::int64_t>& ids);
bool caption_consistent(const std::vector<std::int64_t>& ids, const SceneGraph& scene);

// ---- generation -----------------------------------------------------------------

SceneGraph gen_scene_graph(std::uint64_t seed);
ToySample gen_scene(std::uint64_t seed);

Image render(const SceneGraph& scene);
// Forward-difference gradient magnitude of luma, thresholded (> tau).
Image edge_map(const Image& img, float tau = 0.2f);
// Topmost shape's layer / kMaxLayers per pixel; background 0.
Image depth_map(const SceneGraph& scene);
// Depth read off an image by assigning each pixel to the nearest colour among
// the scene's shapes and background.
Image estimate_depth(const Image& img, const SceneGraph& scene);
// Subject shape moved to the canvas centre on white, and its mask.
Image render_subject(const SceneGraph& scene);
Image subject_mask(const SceneGraph& scene);
// Hole covering the subject's bounding box (one pixel margin).
Image hole_mask(const SceneGraph& scene);
// RGB target with the hole painted mid-grey, plus the hole mask as channel 3.
Image masked_background(const Image& target, const Image& hole);

// ---- partition ------------------------------------------------------------------

// All three scores 5 -> TRAIN; else cs >= 3, iq == 5, sc == 5 -> TEST; else DISCARD.
Split partition(const Scores& scores);

float luma(const Image& img, std::int64_t y, std::int64_t x);

}  // namespace unicombine
