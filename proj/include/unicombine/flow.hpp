// Rectified flow: the interpolation path, the velocity-regression loss, Adam
// training for the three stages and the Euler sampler.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "unicombine/model.hpp"
#include "unicombine/toydata.hpp"

namespace unicombine {

// (1 - t)·x0 + t·x1
template <typename S>
Tensor<S> interpolate(const Tensor<S>& x0, const Tensor<S>& x1, S t);

template <typename S>
struct FlowItem {
  Tensor<S> x1;  // data
  Tensor<S> x0;  // noise
  S t = S(0);
  std::vector<std::int64_t> caption;
  std::vector<Condition<S>> conds;
};

template <typename S>
struct FlowBatch {
  std::vector<FlowItem<S>> items;
  void validate() const;
};

// Predicted velocity for item `index` of the batch at (x_t, t).
template <typename S>
using VelocityFn = std::function<Tensor<S>(const Tensor<S>& x_t, S t, std::size_t index)>;

// ‖(x1 − x0) − v‖² averaged over elements, for one item.
template <typename S>
Tensor<S> rf_item_loss(const VelocityFn<S>& velocity, const FlowBatch<S>& batch,
                       std::size_t index);
// Mean of rf_item_loss over the batch.
template <typename S>
Tensor<S> rf_loss(const VelocityFn<S>& velocity, const FlowBatch<S>& batch);
template <typename S>
Tensor<S> rf_loss(const Model<S>& model, const FlowBatch<S>& batch, const AdapterSet<S>& adapters);

// ---- optimizer ------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // added to the gradient (coupled L2)
};

template <typename S>
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor<S>>> params, AdamConfig config);

  void step();
  void zero_grad();
  std::int64_t steps_taken() const { return t_; }
  const std::vector<std::pair<std::string, Tensor<S>>>& params() const { return params_; }

  // First/second moments as named tensors ("adam/m/<name>", "adam/v/<name>").
  std::vector<std::pair<std::string, Tensor<S>>> state() const;
  void load_state(const std::map<std::string, Tensor<S>>& tensors, std::int64_t steps_taken);

 private:
  std::vector<std::pair<std::string, Tensor<S>>> params_;
  AdamConfig config_;
  std::vector<std::vector<S>> m_, v_;
  std::int64_t t_ = 0;
};

// ---- training -------------------------------------------------------------------

// BASE fits the backbone on caption-only generation; the other two stages
// leave it frozen.
enum class Stage { BASE, CONDITION_LORA, DENOISING_LORA };
std::string to_string(Stage stage);

struct TrainPlan {
  Stage stage = Stage::BASE;
  // CONDITION_LORA: exactly one type, the adapter being trained.
  // DENOISING_LORA: the conditions supplied together in every sample.
  std::vector<ConditionType> conditions;
  std::int64_t steps = 200;
  std::int64_t batch_size = 4;
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  std::int64_t log_every = 10;

  void validate() const;
};

// The parameters a stage updates. Freezes everything else in the model and
// registry as a side effect.
template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> select_trainable(const TrainPlan& plan,
                                                                 Model<S>& model,
                                                                 LoraRegistry<S>& registry);

// Which adapters the forward pass uses during a stage.
template <typename S>
AdapterSet<S> stage_adapters(const TrainPlan& plan, const LoraRegistry<S>& registry);

template <typename S>
Tensor<S> image_tensor(const Image& image);
template <typename S>
Image tensor_image(const Tensor<S>& tensor);

// Batch for optimizer step `step`; depends only on (plan.seed, step).
template <typename S>
FlowBatch<S> make_batch(const TrainPlan& plan, const std::vector<ToySample>& data,
                        std::int64_t step);
// Deterministic evaluation batch: one item per sample with noise and t drawn
// from `seed`.
template <typename S>
FlowBatch<S> make_eval_batch(const std::vector<ToySample>& data,
                             const std::vector<ConditionType>& conditions, std::uint64_t seed);

struct LossRecord {
  std::int64_t step;
  double loss;
};

template <typename S>
class Trainer {
 public:
  // Adds the adapter the plan trains if the registry lacks it.
  Trainer(Model<S>& model, LoraRegistry<S>& registry, TrainPlan plan);

  // One optimizer step; returns the batch loss.
  double step(const std::vector<ToySample>& data);
  // Steps until plan.steps, recording the loss every plan.log_every steps and
  // at the last step.
  std::vector<LossRecord> run(const std::vector<ToySample>& data,
                              const std::function<void(const LossRecord&)>& on_log = {});

  std::int64_t steps_done() const { return optimizer_.steps_taken(); }
  Adam<S>& optimizer() { return optimizer_; }
  const TrainPlan& plan() const { return plan_; }

 private:
  Model<S>& model_;
  LoraRegistry<S>& registry_;
  TrainPlan plan_;
  Adam<S> optimizer_;
};

// "step,loss" lines with a header.
std::string loss_csv(const std::vector<LossRecord>& records, bool header = true);

// ---- sampling -------------------------------------------------------------------

enum class SampleMode { TRAINING_FREE, TRAINING_BASED };
std::string to_string(SampleMode mode);
SampleMode parse_sample_mode(const std::string& text);

// Euler integration over the uniform grid t_k = k/steps, no clamping.
template <typename S>
Tensor<S> euler_integrate(const std::function<Tensor<S>(const Tensor<S>&, S)>& velocity,
                          Tensor<S> x0, std::int64_t steps);

template <typename S>
Tensor<S> sample_noise(const ModelConfig& config, std::uint64_t seed);

// Draws X0 from `seed`, integrates and clamps to [0, 1].
template <typename S>
Tensor<S> sample_euler(const Model<S>& model, const std::vector<std::int64_t>& caption,
                       const std::vector<Condition<S>>& conds, const LoraRegistry<S>* registry,
                       std::int64_t steps, std::uint64_t seed, SampleMode mode);

}  // namespace unicombine
