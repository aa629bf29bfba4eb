#include "unicombine/flow.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

namespace unicombine {

template <typename S>
Tensor<S> interpolate(const Tensor<S>& x0, const Tensor<S>& x1, S t) {
  if (!(t >= S(0) && t <= S(1)))
    throw ContractError("interpolate: t = " + std::to_string(static_cast<double>(t)) +
                        " outside [0, 1]");
  if (x0.shape() != x1.shape())
    throw DimensionError("interpolate: " + shape_str(x0.shape()) + " vs " +
                         shape_str(x1.shape()));
  return add(scale(x0, S(1) - t), scale(x1, t));
}

template <typename S>
void FlowBatch<S>::validate() const {
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    if (it.x0.shape() != it.x1.shape())
      throw DimensionError("flow batch item " + std::to_string(i) + ": noise " +
                           shape_str(it.x0.shape()) + " vs data " + shape_str(it.x1.shape()));
    if (!(it.t >= S(0) && it.t <= S(1)))
      throw ContractError("flow batch item " + std::to_string(i) + ": t outside [0, 1]");
  }
}

template <typename S>
Tensor<S> rf_item_loss(const VelocityFn<S>& velocity, const FlowBatch<S>& batch,
                       std::size_t index) {
  const auto& it = batch.items.at(index);
  const auto x_t = interpolate(it.x0, it.x1, it.t);
  Tensor<S> target;
  {
    NoGradScope<S> off;
    target = sub(it.x1, it.x0);
  }
  auto v = velocity(x_t, it.t, index);
  if (v.shape() != target.shape())
    throw DimensionError("rf_loss: velocity " + shape_str(v.shape()) + " vs target " +
                         shape_str(target.shape()));
  auto loss = mean_square(sub(target, v));
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw NumericError("rf_loss is not finite");
  return loss;
}

template <typename S>
Tensor<S> rf_loss(const VelocityFn<S>& velocity, const FlowBatch<S>& batch) {
  batch.validate();
  if (batch.items.empty()) throw ContractError("rf_loss: empty batch");
  Tensor<S> total;
  for (std::size_t i = 0; i < batch.items.size(); ++i) {
    auto l = rf_item_loss(velocity, batch, i);
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, S(1) / static_cast<S>(batch.items.size()));
}

template <typename S>
Tensor<S> rf_loss(const Model<S>& model, const FlowBatch<S>& batch,
                  const AdapterSet<S>& adapters) {
  VelocityFn<S> v = [&](const Tensor<S>& x_t, S t, std::size_t i) {
    const auto& it = batch.items[i];
    return model.forward(x_t, t, it.caption, it.conds, adapters);
  };
  return rf_loss(v, batch);
}

// ---- Adam -------------------------------------------------------------------------

template <typename S>
Adam<S>::Adam(std::vector<std::pair<std::string, Tensor<S>>> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& [_, p] : params_) {
    m_.emplace_back(p.values().size(), S(0));
    v_.emplace_back(p.values().size(), S(0));
  }
}

template <typename S>
void Adam<S>::step() {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const S lr = static_cast<S>(config_.learning_rate), wd = static_cast<S>(config_.weight_decay);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].second;
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto& w = p.values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const S gj = g[j] + wd * w[j];
      m[j] = static_cast<S>(b1) * m[j] + static_cast<S>(1.0 - b1) * gj;
      v[j] = static_cast<S>(b2) * v[j] + static_cast<S>(1.0 - b2) * gj * gj;
      const S mh = m[j] / static_cast<S>(c1), vh = v[j] / static_cast<S>(c2);
      w[j] -= lr * mh / (std::sqrt(vh) + static_cast<S>(config_.eps));
    }
  }
}

template <typename S>
void Adam<S>::zero_grad() {
  for (auto& [_, p] : params_) p.zero_grad();
}

template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> Adam<S>::state() const {
  std::vector<std::pair<std::string, Tensor<S>>> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& [name, p] = params_[i];
    out.emplace_back("adam/m/" + name, Tensor<S>::from(p.shape(), m_[i]));
    out.emplace_back("adam/v/" + name, Tensor<S>::from(p.shape(), v_[i]));
  }
  return out;
}

template <typename S>
void Adam<S>::load_state(const std::map<std::string, Tensor<S>>& tensors,
                         std::int64_t steps_taken) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& [name, p] = params_[i];
    auto m = tensors.find("adam/m/" + name), v = tensors.find("adam/v/" + name);
    if (m == tensors.end() || v == tensors.end())
      throw ConfigError("optimizer state for '" + name + "' is missing");
    if (m->second.shape() != p.shape() || v->second.shape() != p.shape())
      throw DimensionError("optimizer state for '" + name + "' has the wrong shape");
    m_[i] = m->second.values();
    v_[i] = v->second.values();
  }
  t_ = steps_taken;
}

// ---- plans ------------------------------------------------------------------------

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::BASE: return "base";
    case Stage::CONDITION_LORA: return "condition-lora";
    case Stage::DENOISING_LORA: return "denoising-lora";
  }
  return "base";
}

void TrainPlan::validate() const {
  if (steps < 0) throw ConfigError("train.steps must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("train.learning_rate must be > 0");
  if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
  if (log_every < 1) throw ConfigError("train.log_every must be >= 1");
  switch (stage) {
    case Stage::BASE:
      if (!conditions.empty()) throw ConfigError("the base stage takes no conditions");
      break;
    case Stage::CONDITION_LORA:
      if (conditions.size() != 1)
        throw ConfigError("a condition-lora stage trains exactly one condition type");
      break;
    case Stage::DENOISING_LORA:
      if (conditions.empty())
        throw ConfigError("the denoising-lora stage needs at least one condition type");
      break;
  }
}

template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> select_trainable(const TrainPlan& plan,
                                                                 Model<S>& model,
                                                                 LoraRegistry<S>& registry) {
  plan.validate();
  model.params().set_trainable(false);
  registry.freeze_conditions(true);
  if (registry.denoising()) registry.denoising()->set_frozen(true);
  if (registry.text()) registry.text()->set_frozen(true);
  switch (plan.stage) {
    case Stage::BASE:
      model.params().set_trainable(true);
      return model.params().items();
    case Stage::CONDITION_LORA: {
      auto a = registry.condition(plan.conditions[0]);
      if (!a) throw ConfigError("no Condition-LoRA for " + to_string(plan.conditions[0]));
      a->set_frozen(false);
      return a->named_tensors();
    }
    case Stage::DENOISING_LORA: {
      if (!registry.denoising()) throw ConfigError("no denoising adapter to train");
      registry.denoising()->set_frozen(false);
      return registry.denoising()->named_tensors();
    }
  }
  return {};
}

template <typename S>
AdapterSet<S> stage_adapters(const TrainPlan& plan, const LoraRegistry<S>& registry) {
  AdapterSet<S> set;
  set.registry = &registry;
  set.use_denoising = plan.stage == Stage::DENOISING_LORA;
  return set;
}

template <typename S>
Tensor<S> image_tensor(const Image& image) {
  std::vector<S> values(image.pixels.begin(), image.pixels.end());
  return Tensor<S>::from({image.height, image.width, image.channels}, std::move(values));
}

template <typename S>
Image tensor_image(const Tensor<S>& tensor) {
  if (tensor.ndim() != 3) throw DimensionError("image tensors are H×W×C");
  Image img{tensor.dim(0), tensor.dim(1), tensor.dim(2), {}};
  img.pixels.assign(tensor.values().begin(), tensor.values().end());
  return img;
}

namespace {

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t index, std::uint32_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    salt};
  return std::mt19937_64(seq);
}

template <typename S>
FlowItem<S> make_item(const ToySample& sample, const std::vector<ConditionType>& conditions,
                      std::mt19937_64& rng) {
  FlowItem<S> item;
  item.x1 = image_tensor<S>(sample.target);
  item.x0 = Tensor<S>::randn(item.x1.shape(), rng);
  item.t = static_cast<S>(std::uniform_real_distribution<double>(0.0, 1.0)(rng));
  item.caption = sample.caption_ids;
  for (auto type : conditions) {
    auto it = sample.conditions.find(type);
    if (it == sample.conditions.end())
      throw ConfigError("sample " + std::to_string(sample.seed) + " has no " + to_string(type) +
                        " condition");
    item.conds.push_back({type, image_tensor<S>(it->second)});
  }
  return item;
}

}  // namespace

template <typename S>
FlowBatch<S> make_batch(const TrainPlan& plan, const std::vector<ToySample>& data,
                        std::int64_t step) {
  if (data.empty()) throw ConfigError("training set is empty");
  auto rng = stream_rng(plan.seed, static_cast<std::uint64_t>(step), 0x7a1bu);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  FlowBatch<S> batch;
  for (std::int64_t i = 0; i < plan.batch_size; ++i) {
    const auto& sample = data[pick(rng)];
    batch.items.push_back(make_item<S>(sample, plan.conditions, rng));
  }
  return batch;
}

template <typename S>
FlowBatch<S> make_eval_batch(const std::vector<ToySample>& data,
                             const std::vector<ConditionType>& conditions, std::uint64_t seed) {
  FlowBatch<S> batch;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto rng = stream_rng(seed, i, 0xe7a1u);
    batch.items.push_back(make_item<S>(data[i], conditions, rng));
  }
  return batch;
}

// ---- Trainer ----------------------------------------------------------------------

namespace {

template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> prepare(Model<S>& model, LoraRegistry<S>& registry,
                                                       const TrainPlan& plan) {
  plan.validate();
  auto rng = stream_rng(plan.seed, 0, 0xada9u);
  if (plan.stage == Stage::CONDITION_LORA && !registry.condition(plan.conditions[0]))
    registry.add_condition(plan.conditions[0],
                           model.make_adapter("cond_lora/" + to_string(plan.conditions[0]), rng));
  if (plan.stage == Stage::DENOISING_LORA) {
    std::string missing;
    for (auto t : plan.conditions)
      if (!registry.condition(t)) missing += (missing.empty() ? "" : ", ") + to_string(t);
    if (!missing.empty())
      throw ConfigError("denoising-lora stage needs pretrained Condition-LoRAs; missing: " +
                        missing);
    if (!registry.denoising()) registry.set_denoising(model.make_adapter("denoise_lora", rng));
  }
  return select_trainable(plan, model, registry);
}

}  // namespace

template <typename S>
Trainer<S>::Trainer(Model<S>& model, LoraRegistry<S>& registry, TrainPlan plan)
    : model_(model),
      registry_(registry),
      plan_(std::move(plan)),
      optimizer_(prepare(model, registry, plan_),
                 AdamConfig{plan_.learning_rate, 0.9, 0.999, 1e-8, plan_.weight_decay}) {}

template <typename S>
double Trainer<S>::step(const std::vector<ToySample>& data) {
  const auto index = optimizer_.steps_taken();
  auto batch = make_batch<S>(plan_, data, index);
  batch.validate();
  const auto adapters = stage_adapters(plan_, registry_);
  optimizer_.zero_grad();
  const S inv = S(1) / static_cast<S>(batch.items.size());
  double total = 0;
  VelocityFn<S> v = [&](const Tensor<S>& x_t, S t, std::size_t i) {
    const auto& it = batch.items[i];
    return model_.forward(x_t, t, it.caption, it.conds, adapters);
  };
  // One graph per item keeps peak memory at a single forward pass.
  for (std::size_t i = 0; i < batch.items.size(); ++i) {
    Graph<S> graph;
    GraphScope<S> scope(graph);
    Tensor<S> loss;
    try {
      loss = rf_item_loss(v, batch, i);
    } catch (const NumericError&) {
      throw NumericError("training diverged at step " + std::to_string(index) +
                         " (loss is not finite)");
    }
    total += static_cast<double>(loss.item());
    graph.backward(scale(loss, inv));
  }
  optimizer_.step();
  return total / static_cast<double>(batch.items.size());
}

template <typename S>
std::vector<LossRecord> Trainer<S>::run(const std::vector<ToySample>& data,
                                        const std::function<void(const LossRecord&)>& on_log) {
  std::vector<LossRecord> records;
  while (steps_done() < plan_.steps) {
    const auto index = steps_done();
    const double loss = step(data);
    if (index % plan_.log_every == 0 || index + 1 == plan_.steps) {
      records.push_back({index, loss});
      if (on_log) on_log(records.back());
    }
  }
  return records;
}

std::string loss_csv(const std::vector<LossRecord>& records, bool header) {
  std::ostringstream out;
  out.precision(9);
  if (header) out << "step,loss\n";
  for (const auto& r : records) out << r.step << ',' << r.loss << '\n';
  return out.str();
}

// ---- sampling ---------------------------------------------------------------------

std::string to_string(SampleMode mode) {
  return mode == SampleMode::TRAINING_FREE ? "training-free" : "training-based";
}

SampleMode parse_sample_mode(const std::string& text) {
  std::string s(text);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) {
    return c == '_' ? '-' : static_cast<char>(std::tolower(c));
  });
  if (s == "training-free") return SampleMode::TRAINING_FREE;
  if (s == "training-based") return SampleMode::TRAINING_BASED;
  throw ConfigError("unknown sampling mode '" + text + "'");
}

template <typename S>
Tensor<S> euler_integrate(const std::function<Tensor<S>(const Tensor<S>&, S)>& velocity,
                          Tensor<S> x0, std::int64_t steps) {
  if (steps < 1) throw ContractError("sampler steps must be >= 1");
  NoGradScope<S> off;
  auto x = x0.detach();
  const S dt = S(1) / static_cast<S>(steps);
  for (std::int64_t k = 0; k < steps; ++k) {
    const S t = static_cast<S>(k) / static_cast<S>(steps);
    auto v = velocity(x, t);
    if (v.shape() != x.shape())
      throw DimensionError("velocity " + shape_str(v.shape()) + " vs state " +
                           shape_str(x.shape()));
    auto& xs = x.values();
    const auto& vs = v.values();
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] += dt * vs[i];
  }
  return x;
}

template <typename S>
Tensor<S> sample_noise(const ModelConfig& config, std::uint64_t seed) {
  auto rng = stream_rng(seed, 0, 0x5a4du);
  return Tensor<S>::randn({config.image_size, config.image_size, config.channels}, rng);
}

template <typename S>
Tensor<S> sample_euler(const Model<S>& model, const std::vector<std::int64_t>& caption,
                       const std::vector<Condition<S>>& conds, const LoraRegistry<S>* registry,
                       std::int64_t steps, std::uint64_t seed, SampleMode mode) {
  if (steps < 1) throw ContractError("sampler steps must be >= 1");
  AdapterSet<S> adapters;
  adapters.registry = registry;
  if (mode == SampleMode::TRAINING_BASED) {
    if (!registry || !registry->denoising())
      throw ConfigError("training-based sampling requires a denoising adapter");
    adapters.use_denoising = true;
  }
  // Fail before integrating if a condition has no adapter.
  if (!conds.empty()) {
    if (!registry) throw ConfigError("conditions supplied without any Condition-LoRA");
    for (const auto& c : conds) switch_select(c.type, *registry);
  }
  auto x = euler_integrate<S>(
      [&](const Tensor<S>& x_t, S t) { return model.forward(x_t, t, caption, conds, adapters); },
      sample_noise<S>(model.config(), seed), steps);
  for (auto& v : x.values()) v = std::clamp(v, S(0), S(1));
  return x;
}

#define UC_FLOW(S)                                                                          \
  template Tensor<S> interpolate<S>(const Tensor<S>&, const Tensor<S>&, S);                 \
  template struct FlowBatch<S>;                                                             \
  template Tensor<S> rf_item_loss<S>(const VelocityFn<S>&, const FlowBatch<S>&, std::size_t); \
  template Tensor<S> rf_loss<S>(const VelocityFn<S>&, const FlowBatch<S>&);                 \
  template Tensor<S> rf_loss<S>(const Model<S>&, const FlowBatch<S>&, const AdapterSet<S>&); \
  template class Adam<S>;                                                                   \
  template std::vector<std::pair<std::string, Tensor<S>>> select_trainable<S>(              \
      const TrainPlan&, Model<S>&, LoraRegistry<S>&);                                       \
  template AdapterSet<S> stage_adapters<S>(const TrainPlan&, const LoraRegistry<S>&);       \
  template Tensor<S> image_tensor<S>(const Image&);                                         \
  template Image tensor_image<S>(const Tensor<S>&);                                         \
  template FlowBatch<S> make_batch<S>(const TrainPlan&, const std::vector<ToySample>&,      \
                                      std::int64_t);                                        \
  template FlowBatch<S> make_eval_batch<S>(const std::vector<ToySample>&,                   \
                                           const std::vector<ConditionType>&, std::uint64_t); \
  template class Trainer<S>;                                                                \
  template Tensor<S> euler_integrate<S>(const std::function<Tensor<S>(const Tensor<S>&, S)>&, \
                                        Tensor<S>, std::int64_t);                           \
  template Tensor<S> sample_noise<S>(const ModelConfig&, std::uint64_t);                    \
  template Tensor<S> sample_euler<S>(const Model<S>&, const std::vector<std::int64_t>&,     \
                                     const std::vector<Condition<S>>&, const LoraRegistry<S>*, \
                                     std::int64_t, std::uint64_t, SampleMode);

UC_FLOW(float)
UC_FLOW(double)

#undef UC_FLOW

}  // namespace unicombine
