#include "unicombine/lora.hpp"

#include <algorithm>
#include <cctype>

namespace unicombine {

std::string to_string(ConditionType type) {
  switch (type) {
    case ConditionType::CANNY: return "CANNY";
    case ConditionType::DEPTH: return "DEPTH";
    case ConditionType::SUBJECT: return "SUBJECT";
    case ConditionType::MASK_FILL: return "MASK_FILL";
    case ConditionType::STYLE: return "STYLE";
  }
  return "UNKNOWN";
}

ConditionType parse_condition_type(const std::string& text) {
  std::string upper(text);
  std::transform(upper.begin(), upper.end(), upper.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  for (auto t : kAllConditionTypes)
    if (to_string(t) == upper) return t;
  throw ConfigError("unknown condition type '" + text + "'");
}

bool spatially_aligned(ConditionType type) {
  return type == ConditionType::CANNY || type == ConditionType::DEPTH ||
         type == ConditionType::MASK_FILL;
}

// ---- LoraAdapter ----------------------------------------------------------------

template <typename S>
LoraAdapter<S>::LoraAdapter(std::string name, std::int64_t rank, S alpha)
    : name_(std::move(name)), rank_(rank), alpha_(alpha) {
  if (rank_ < 1) throw ConfigError("lora rank must be >= 1");
}

template <typename S>
void LoraAdapter<S>::add_target(const std::string& target, std::int64_t in_dim,
                                std::int64_t out_dim, std::mt19937_64& rng, S init_std) {
  LoraFactors<S> f{Tensor<S>::randn({rank_, in_dim}, rng, init_std),
                   Tensor<S>::zeros({out_dim, rank_})};
  set_target(target, std::move(f));
}

template <typename S>
void LoraAdapter<S>::set_target(const std::string& target, LoraFactors<S> factors) {
  if (factors.a.ndim() != 2 || factors.b.ndim() != 2 || factors.a.rows() != rank_ ||
      factors.b.cols() != rank_)
    throw DimensionError("lora " + name_ + "/" + target + ": factors " +
                         shape_str(factors.a.shape()) + ", " + shape_str(factors.b.shape()) +
                         " do not have rank " + std::to_string(rank_));
  factors.a.set_requires_grad(!frozen_);
  factors.b.set_requires_grad(!frozen_);
  targets_[target] = std::move(factors);
}

template <typename S>
const LoraFactors<S>& LoraAdapter<S>::at(const std::string& target) const {
  auto it = targets_.find(target);
  if (it == targets_.end())
    throw ConfigError("lora " + name_ + " has no target '" + target + "'");
  return it->second;
}

template <typename S>
void LoraAdapter<S>::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (auto& [_, f] : targets_) {
    f.a.set_requires_grad(!frozen);
    f.b.set_requires_grad(!frozen);
  }
}

template <typename S>
std::int64_t LoraAdapter<S>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [_, f] : targets_) n += f.a.numel() + f.b.numel();
  return n;
}

template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> LoraAdapter<S>::named_tensors() const {
  std::vector<std::pair<std::string, Tensor<S>>> out;
  for (const auto& [target, f] : targets_) {
    out.emplace_back(name_ + "/" + target + "/A", f.a);
    out.emplace_back(name_ + "/" + target + "/B", f.b);
  }
  return out;
}

// ---- LoraRegistry ---------------------------------------------------------------

template <typename S>
void LoraRegistry<S>::add_condition(ConditionType type, AdapterPtr adapter) {
  if (!adapter) throw ConfigError("null adapter for " + to_string(type));
  if (conditions_.count(type))
    throw ConfigError("a Condition-LoRA for " + to_string(type) + " is already registered");
  conditions_.emplace(type, std::move(adapter));
}

template <typename S>
std::vector<ConditionType> LoraRegistry<S>::condition_types() const {
  std::vector<ConditionType> out;
  for (const auto& [t, _] : conditions_) out.push_back(t);
  return out;
}

template <typename S>
typename LoraRegistry<S>::AdapterPtr LoraRegistry<S>::condition(ConditionType type) const {
  auto it = conditions_.find(type);
  return it == conditions_.end() ? nullptr : it->second;
}

template <typename S>
void LoraRegistry<S>::freeze_conditions(bool frozen) {
  for (auto& [_, a] : conditions_) a->set_frozen(frozen);
}

template <typename S>
std::int64_t LoraRegistry<S>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [_, a] : conditions_) n += a->parameter_count();
  if (denoising_) n += denoising_->parameter_count();
  if (text_) n += text_->parameter_count();
  return n;
}

template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> LoraRegistry<S>::named_tensors() const {
  std::vector<std::pair<std::string, Tensor<S>>> out;
  auto append = [&](const AdapterPtr& a) {
    if (!a) return;
    auto part = a->named_tensors();
    out.insert(out.end(), part.begin(), part.end());
  };
  for (const auto& [_, a] : conditions_) append(a);
  append(denoising_);
  append(text_);
  return out;
}

template <typename S>
const LoraAdapter<S>& switch_select(ConditionType type, const LoraRegistry<S>& registry) {
  auto adapter = registry.condition(type);
  if (!adapter)
    throw ConfigError("no Condition-LoRA registered for condition type " + to_string(type));
  return *adapter;
}

template <typename S>
std::vector<int> switch_gate(ConditionType type, const LoraRegistry<S>& registry) {
  switch_select(type, registry);
  std::vector<int> gate;
  for (auto t : registry.condition_types()) gate.push_back(t == type ? 1 : 0);
  return gate;
}

template <typename S>
Tensor<S> linear_with_lora(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                           const LoraFactors<S>* factors, S scale_factor) {
  auto y = linear(x, weight, bias);
  if (!factors) return y;
  if (factors->a.cols() != x.cols() || factors->b.rows() != weight.rows())
    throw DimensionError("linear_with_lora: adapter " + shape_str(factors->a.shape()) + "/" +
                         shape_str(factors->b.shape()) + " does not fit weight " +
                         shape_str(weight.shape()));
  auto delta = linear(linear(x, factors->a), factors->b);
  return add(y, scale(delta, scale_factor));
}

template <typename S>
Tensor<S> merge_weights(const Tensor<S>& weight, const LoraFactors<S>& factors, S scale_factor) {
  if (factors.a.cols() != weight.cols() || factors.b.rows() != weight.rows())
    throw DimensionError("merge_weights: adapter does not fit weight " +
                         shape_str(weight.shape()));
  NoGradScope<S> off;
  auto delta = matmul(factors.b, factors.a);
  auto merged = weight.detach();
  for (std::size_t i = 0; i < merged.values().size(); ++i)
    merged.values()[i] += scale_factor * delta.values()[i];
  return merged;
}

// ---- AdapterLog -------------------------------------------------------------------

namespace {
thread_local AdapterLog* g_adapter_log = nullptr;
}

AdapterLog::AdapterLog() : previous_(g_adapter_log) { g_adapter_log = this; }
AdapterLog::~AdapterLog() { g_adapter_log = previous_; }
AdapterLog* AdapterLog::active() { return g_adapter_log; }

#define UC_LORA(S)                                                                        \
  template class LoraAdapter<S>;                                                          \
  template class LoraRegistry<S>;                                                         \
  template const LoraAdapter<S>& switch_select<S>(ConditionType, const LoraRegistry<S>&); \
  template std::vector<int> switch_gate<S>(ConditionType, const LoraRegistry<S>&);        \
  template Tensor<S> linear_with_lora<S>(const Tensor<S>&, const Tensor<S>&,              \
                                         const Tensor<S>&, const LoraFactors<S>*, S);     \
  template Tensor<S> merge_weights<S>(const Tensor<S>&, const LoraFactors<S>&, S);

UC_LORA(float)
UC_LORA(double)

#undef UC_LORA

}  // namespace unicombine
