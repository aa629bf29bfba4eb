// Low-rank adapters and the type-keyed switch that picks one per branch.
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "unicombine/tensor.hpp"

namespace unicombine {

enum class ConditionType { CANNY, DEPTH, SUBJECT, MASK_FILL, STYLE };

inline constexpr std::array<ConditionType, 5> kAllConditionTypes{
    ConditionType::CANNY, ConditionType::DEPTH, ConditionType::SUBJECT,
    ConditionType::MASK_FILL, ConditionType::STYLE};

std::string to_string(ConditionType type);
// Accepts the upper-case names ("CANNY", "MASK_FILL", ...), case-insensitive.
ConditionType parse_condition_type(const std::string& text);
// Edge, depth and masked-background maps are in pixel correspondence with
// the output; subject and style references are not.
bool spatially_aligned(ConditionType type);

// One adapted projection: delta W = scale · B·A with A [rank×in], B [out×rank].
template <typename S>
struct LoraFactors {
  Tensor<S> a;
  Tensor<S> b;
};

template <typename S>
class LoraAdapter {
 public:
  LoraAdapter(std::string name, std::int64_t rank, S alpha);

  const std::string& name() const { return name_; }
  std::int64_t rank() const { return rank_; }
  S alpha() const { return alpha_; }
  S scale() const { return alpha_ / static_cast<S>(rank_); }

  // A ~ N(0, init_std²), B = 0, so a fresh target contributes exactly zero.
  void add_target(const std::string& target, std::int64_t in_dim, std::int64_t out_dim,
                  std::mt19937_64& rng, S init_std = S(0.02));
  // Installs existing factors (checkpoint loading).
  void set_target(const std::string& target, LoraFactors<S> factors);
  bool has_target(const std::string& target) const { return targets_.count(target) != 0; }
  const LoraFactors<S>& at(const std::string& target) const;
  const std::map<std::string, LoraFactors<S>>& targets() const { return targets_; }

  bool frozen() const { return frozen_; }
  void set_frozen(bool frozen);

  std::int64_t parameter_count() const;
  // "<name>/<target>/A" and ".../B" in target order.
  std::vector<std::pair<std::string, Tensor<S>>> named_tensors() const;

 private:
  std::string name_;
  std::int64_t rank_;
  S alpha_;
  bool frozen_ = false;
  std::map<std::string, LoraFactors<S>> targets_;
};

// Condition-LoRAs keyed by condition type, plus the optional denoising-branch
// and text-branch adapters.
template <typename S>
class LoraRegistry {
 public:
  using AdapterPtr = std::shared_ptr<LoraAdapter<S>>;

  // Throws ConfigError if the type already has an adapter.
  void add_condition(ConditionType type, AdapterPtr adapter);
  bool has_condition(ConditionType type) const { return conditions_.count(type) != 0; }
  std::vector<ConditionType> condition_types() const;
  AdapterPtr condition(ConditionType type) const;

  void set_denoising(AdapterPtr adapter) { denoising_ = std::move(adapter); }
  void set_text(AdapterPtr adapter) { text_ = std::move(adapter); }
  const AdapterPtr& denoising() const { return denoising_; }
  const AdapterPtr& text() const { return text_; }

  void freeze_conditions(bool frozen = true);
  std::int64_t parameter_count() const;
  std::vector<std::pair<std::string, Tensor<S>>> named_tensors() const;

 private:
  std::map<ConditionType, AdapterPtr> conditions_;
  AdapterPtr denoising_;
  AdapterPtr text_;
};

// The adapter registered for `type`; ConfigError naming the type if absent.
template <typename S>
const LoraAdapter<S>& switch_select(ConditionType type, const LoraRegistry<S>& registry);

// One-hot selection vector over the registry's condition entries (in
// condition_types() order).
template <typename S>
std::vector<int> switch_gate(ConditionType type, const LoraRegistry<S>& registry);

// x·Wᵀ + b + scale·x·Aᵀ·Bᵀ; plain linear when factors is null.
template <typename S>
Tensor<S> linear_with_lora(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                           const LoraFactors<S>* factors, S scale);

// W + scale·B·A
template <typename S>
Tensor<S> merge_weights(const Tensor<S>& weight, const LoraFactors<S>& factors, S scale);

// Instrumented call log: while installed on a thread, the backbone appends one
// entry per projection it evaluates.
struct AdapterCall {
  std::string block;    // "dual0", "single1", ...
  std::string proj;     // "q", "k", "v", "o"
  std::string branch;   // "T", "X", "C0", "C1", ...
  std::string adapter;  // adapter name, empty for base weights only
  const void* weight = nullptr;  // identity of the base weight buffer
};

class AdapterLog {
 public:
  AdapterLog();
  ~AdapterLog();
  AdapterLog(const AdapterLog&) = delete;
  AdapterLog& operator=(const AdapterLog&) = delete;

  static AdapterLog* active();
  std::vector<AdapterCall> calls;

 private:
  AdapterLog* previous_;
};

}  // namespace unicombine
