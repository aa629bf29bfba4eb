// Desk-scale metrics (edge F1, depth MSE, SSIM), metric reports and the
// X -> condition cross-attention heat map.
#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "unicombine/model.hpp"
#include "unicombine/toydata.hpp"

namespace unicombine {

// Pixels > 0.5 count as edges. Both empty -> 1, exactly one empty -> 0.
double edge_f1(const Image& pred, const Image& gt);
// Mean squared difference of the raw values (callers scale depth to [0, 255]).
double depth_mse(const Image& pred, const Image& gt);
Image scaled(const Image& img, float factor);

inline constexpr std::int64_t kSsimWindow = 8;
inline constexpr std::int64_t kSsimStride = 4;
// Mean SSIM over 8×8 windows at stride 4 and over channels.
double ssim(const Image& a, const Image& b);

struct SampleMetrics {
  std::uint64_t seed = 0;
  double f1 = 0;
  double mse = 0;
  double ssim = 0;
};

// Edge F1 against the target's edges, depth MSE (0..255) of the depth read
// off the generated image, SSIM against the target.
SampleMetrics evaluate_sample(const Image& generated, const ToySample& sample);

struct MetricReport {
  std::string label;
  std::string config_hash;
  std::vector<SampleMetrics> samples;

  std::size_t count() const { return samples.size(); }
  double mean_f1() const;
  double mean_mse() const;
  double mean_ssim() const;

  // One JSON object per sample, then one aggregate record.
  void write_jsonl(std::ostream& out) const;
  void write_summary(std::ostream& out) const;
};

// ---- attention diagnostic -----------------------------------------------------------

struct AttentionSlice {
  int block = 0;
  std::int64_t head = 0;
  // [rows × target_len] softmax mass from the chosen X rows onto the target keys.
  std::vector<double> mass;
  // Per row, mass on every other key of the full scope.
  std::vector<double> rest;
};

struct AttentionTrace {
  std::size_t branch = 0;          // position in the layout (2 + condition index)
  std::int64_t grid = 0;           // target branch tokens form grid × grid
  std::vector<std::int64_t> rows;  // X token indices averaged over
  std::vector<AttentionSlice> slices;
  std::vector<double> heat;        // [grid × grid] mean over slices and rows
};

struct TraceOptions {
  std::optional<Image> region_mask;  // 32×32×1; X rows inside it
  std::set<int> blocks;              // empty: all
  std::set<std::int64_t> heads;      // empty: all
};

// Tokens whose patch is at least half covered by the mask.
std::vector<std::int64_t> mask_tokens(const ModelConfig& config, const Image& mask);

template <typename S>
AttentionTrace xattn_map(const Model<S>& model, const Tensor<S>& x_t, S t,
                         const std::vector<std::int64_t>& caption,
                         const std::vector<Condition<S>>& conds, const AdapterSet<S>& adapters,
                         ConditionType target, const TraceOptions& options = {});

// Share of the heat map's mass on tokens inside `mask`.
double concentration_score(const AttentionTrace& trace, const ModelConfig& config,
                           const Image& mask);

// Grayscale heat map upsampled to size×size, normalized by its maximum.
Image heat_image(const AttentionTrace& trace, std::int64_t size);

}  // namespace unicombine
