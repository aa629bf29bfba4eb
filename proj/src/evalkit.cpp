#include "unicombine/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <json.hpp>

namespace unicombine {

namespace {

void require_same(const Image& a, const Image& b, const char* what) {
  if (!a.same_size(b))
    throw DimensionError(std::string(what) + ": " + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + "x" + std::to_string(a.channels) + " vs " +
                         std::to_string(b.height) + "x" + std::to_string(b.width) + "x" +
                         std::to_string(b.channels));
}

}  // namespace

double edge_f1(const Image& pred, const Image& gt) {
  require_same(pred, gt, "edge_f1");
  std::int64_t tp = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
    const bool p = pred.pixels[i] > 0.5f, g = gt.pixels[i] > 0.5f;
    np += p;
    ng += g;
    tp += p && g;
  }
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0 || tp == 0) return 0.0;
  const double precision = static_cast<double>(tp) / static_cast<double>(np);
  const double recall = static_cast<double>(tp) / static_cast<double>(ng);
  return 2.0 * precision * recall / (precision + recall);
}

double depth_mse(const Image& pred, const Image& gt) {
  require_same(pred, gt, "depth_mse");
  if (pred.pixels.empty()) return 0.0;
  double acc = 0;
  for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
    const double d = static_cast<double>(pred.pixels[i]) - static_cast<double>(gt.pixels[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(pred.pixels.size());
}

Image scaled(const Image& img, float factor) {
  auto out = img;
  for (auto& v : out.pixels) v *= factor;
  return out;
}

double ssim(const Image& a, const Image& b) {
  require_same(a, b, "ssim");
  if (a.height < kSsimWindow || a.width < kSsimWindow)
    throw DimensionError("ssim: image " + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + " is smaller than the " +
                         std::to_string(kSsimWindow) + "x" + std::to_string(kSsimWindow) +
                         " window");
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  constexpr double n = static_cast<double>(kSsimWindow * kSsimWindow);
  double total = 0;
  std::int64_t windows = 0;
  for (std::int64_t c = 0; c < a.channels; ++c)
    for (std::int64_t y0 = 0; y0 + kSsimWindow <= a.height; y0 += kSsimStride)
      for (std::int64_t x0 = 0; x0 + kSsimWindow <= a.width; x0 += kSsimStride) {
        double ma = 0, mb = 0;
        for (std::int64_t y = y0; y < y0 + kSsimWindow; ++y)
          for (std::int64_t x = x0; x < x0 + kSsimWindow; ++x) {
            ma += a.at(y, x, c);
            mb += b.at(y, x, c);
          }
        ma /= n;
        mb /= n;
        double va = 0, vb = 0, cov = 0;
        for (std::int64_t y = y0; y < y0 + kSsimWindow; ++y)
          for (std::int64_t x = x0; x < x0 + kSsimWindow; ++x) {
            const double da = a.at(y, x, c) - ma, db = b.at(y, x, c) - mb;
            va += da * da;
            vb += db * db;
            cov += da * db;
          }
        va /= n;
        vb /= n;
        cov /= n;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                 ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++windows;
      }
  return total / static_cast<double>(windows);
}

SampleMetrics evaluate_sample(const Image& generated, const ToySample& sample) {
  SampleMetrics m;
  m.seed = sample.seed;
  m.f1 = edge_f1(edge_map(generated), edge_map(sample.target));
  m.mse = depth_mse(scaled(estimate_depth(generated, sample.scene), 255.0f),
                    scaled(depth_map(sample.scene), 255.0f));
  m.ssim = ssim(generated, sample.target);
  return m;
}

// ---- reports ------------------------------------------------------------------------

namespace {

template <typename F>
double mean_of(const std::vector<SampleMetrics>& v, F f) {
  if (v.empty()) return 0.0;
  double acc = 0;
  for (const auto& m : v) acc += f(m);
  return acc / static_cast<double>(v.size());
}

}  // namespace

double MetricReport::mean_f1() const {
  return mean_of(samples, [](const SampleMetrics& m) { return m.f1; });
}
double MetricReport::mean_mse() const {
  return mean_of(samples, [](const SampleMetrics& m) { return m.mse; });
}
double MetricReport::mean_ssim() const {
  return mean_of(samples, [](const SampleMetrics& m) { return m.ssim; });
}

void MetricReport::write_jsonl(std::ostream& out) const {
  using json = nlohmann::ordered_json;
  for (const auto& m : samples) {
    json j;
    j["record"] = "sample";
    j["seed"] = m.seed;
    j["f1"] = m.f1;
    j["mse"] = m.mse;
    j["ssim"] = m.ssim;
    out << j.dump() << '\n';
  }
  json agg;
  agg["record"] = "aggregate";
  agg["label"] = label;
  agg["config_hash"] = config_hash;
  agg["count"] = count();
  agg["f1"] = mean_f1();
  agg["mse"] = mean_mse();
  agg["ssim"] = mean_ssim();
  // Filled in by external tooling.
  for (const char* slot : {"fid", "clip_i", "dino", "clip_t"}) agg[slot] = nullptr;
  out << agg.dump() << '\n';
}

void MetricReport::write_summary(std::ostream& out) const {
  char line[160];
  std::snprintf(line, sizeof line, "%-20s %8s %10s %10s %10s\n", "label", "count", "F1",
                "MSE", "SSIM");
  out << line;
  std::snprintf(line, sizeof line, "%-20s %8zu %10.4f %10.2f %10.4f\n", label.c_str(), count(),
                mean_f1(), mean_mse(), mean_ssim());
  out << line;
}

// ---- attention diagnostic -----------------------------------------------------------

std::vector<std::int64_t> mask_tokens(const ModelConfig& config, const Image& mask) {
  if (mask.height != config.image_size || mask.width != config.image_size)
    throw DimensionError("mask must be " + std::to_string(config.image_size) + "x" +
                         std::to_string(config.image_size));
  const auto g = config.grid(), ps = config.patch_size;
  std::vector<std::int64_t> out;
  for (std::int64_t gy = 0; gy < g; ++gy)
    for (std::int64_t gx = 0; gx < g; ++gx) {
      std::int64_t inside = 0;
      for (std::int64_t dy = 0; dy < ps; ++dy)
        for (std::int64_t dx = 0; dx < ps; ++dx)
          inside += mask.at(gy * ps + dy, gx * ps + dx, 0) > 0.5f;
      if (2 * inside >= ps * ps) out.push_back(gy * g + gx);
    }
  return out;
}

template <typename S>
AttentionTrace xattn_map(const Model<S>& model, const Tensor<S>& x_t, S t,
                         const std::vector<std::int64_t>& caption,
                         const std::vector<Condition<S>>& conds, const AdapterSet<S>& adapters,
                         ConditionType target, const TraceOptions& options) {
  std::size_t cond_index = conds.size();
  for (std::size_t i = 0; i < conds.size(); ++i)
    if (conds[i].type == target) {
      cond_index = i;
      break;
    }
  if (cond_index == conds.size())
    throw ContractError("xattn_map: no " + to_string(target) + " branch in the inputs");

  const auto& cfg = model.config();
  AttentionTrace trace;
  trace.branch = 2 + cond_index;
  trace.grid = cfg.grid();
  if (options.region_mask) {
    trace.rows = mask_tokens(cfg, *options.region_mask);
    if (trace.rows.empty()) throw ContractError("xattn_map: region mask covers no token");
  } else {
    for (std::int64_t i = 0; i < cfg.tokens_per_image(); ++i) trace.rows.push_back(i);
  }

  AttentionProbe probe;
  {
    NoGradScope<S> off;
    model.forward(x_t, t, caption, conds, adapters);
  }
  const auto tl = static_cast<std::int64_t>(trace.grid * trace.grid);
  trace.heat.assign(static_cast<std::size_t>(tl), 0.0);
  for (const auto& rec : probe.records) {
    if (!options.blocks.empty() && !options.blocks.count(rec.block)) continue;
    if (!options.heads.empty() && !options.heads.count(rec.head)) continue;
    const auto span = rec.layout.cond_span(cond_index);
    if (span.end - span.begin != tl)
      throw ContractError("xattn_map: target branch is not a full image grid");
    const auto x0 = rec.layout.x_span().begin;
    const auto total = rec.layout.total();
    AttentionSlice slice{rec.block, rec.head, {}, {}};
    for (auto r : trace.rows) {
      const double* row = rec.probs.data() + (x0 + r) * total;
      double in = 0, all = 0;
      for (std::int64_t k = 0; k < total; ++k) all += row[k];
      for (std::int64_t k = span.begin; k < span.end; ++k) {
        slice.mass.push_back(row[k]);
        in += row[k];
      }
      slice.rest.push_back(all - in);
    }
    trace.slices.push_back(std::move(slice));
  }
  if (trace.slices.empty()) throw ContractError("xattn_map: no block/head selected");
  const double norm = static_cast<double>(trace.slices.size() * trace.rows.size());
  for (const auto& s : trace.slices)
    for (std::size_t r = 0; r < trace.rows.size(); ++r)
      for (std::int64_t k = 0; k < tl; ++k)
        trace.heat[static_cast<std::size_t>(k)] += s.mass[r * static_cast<std::size_t>(tl) +
                                                          static_cast<std::size_t>(k)];
  for (auto& h : trace.heat) h /= norm;
  return trace;
}

double concentration_score(const AttentionTrace& trace, const ModelConfig& config,
                           const Image& mask) {
  double in = 0, all = 0;
  for (double h : trace.heat) all += h;
  for (auto tok : mask_tokens(config, mask)) in += trace.heat.at(static_cast<std::size_t>(tok));
  return all > 0 ? in / all : 0.0;
}

Image heat_image(const AttentionTrace& trace, std::int64_t size) {
  auto img = Image::filled(size, size, 1, 0.0f);
  const double peak = trace.heat.empty() ? 0.0 : *std::max_element(trace.heat.begin(), trace.heat.end());
  if (peak <= 0) return img;
  for (std::int64_t y = 0; y < size; ++y)
    for (std::int64_t x = 0; x < size; ++x) {
      const auto gy = y * trace.grid / size, gx = x * trace.grid / size;
      img.at(y, x) = static_cast<float>(trace.heat[static_cast<std::size_t>(gy * trace.grid + gx)] / peak);
    }
  return img;
}

#define UC_EVAL(S)                                                                       \
  template AttentionTrace xattn_map<S>(const Model<S>&, const Tensor<S>&, S,             \
                                       const std::vector<std::int64_t>&,                 \
                                       const std::vector<Condition<S>>&,                 \
                                       const AdapterSet<S>&, ConditionType, const TraceOptions&);

UC_EVAL(float)
UC_EVAL(double)

#undef UC_EVAL

}  // namespace unicombine
