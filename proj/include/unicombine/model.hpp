// Toy multi-modal diffusion transformer that predicts the rectified-flow
// velocity for the denoising branch.
//
// Pipeline: embed T/X/C_i -> dual-stream blocks (text weights for T,
// denoising weights for X and every C_i) -> single-stream blocks (one weight
// set for all branches) -> final norm and linear head on X -> unpatchify.
// Attention in every block is scoped per branch (cmmdit_attention).
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "unicombine/attention.hpp"
#include "unicombine/lora.hpp"
#include "unicombine/tensor.hpp"

namespace unicombine {

struct ModelConfig {
  std::int64_t embed_dim = 64;
  std::int64_t head_dim = 32;
  std::int64_t num_heads = 2;
  std::int64_t num_dual_blocks = 2;
  std::int64_t num_single_blocks = 2;
  std::int64_t patch_size = 2;
  std::int64_t image_size = 32;
  std::int64_t channels = 3;
  std::int64_t vocab_size = 32;
  std::int64_t max_text_len = 16;
  std::int64_t mlp_ratio = 4;
  std::int64_t time_freq_dim = 32;
  double rope_base = 100.0;
  std::int64_t lora_rank = 4;
  double lora_alpha = 4.0;
  // false: adapters only target dual-stream blocks.
  bool lora_single_blocks = true;
  // Subject/style tokens get their columns shifted by the grid width.
  bool offset_reference_positions = true;

  void validate() const;
  std::int64_t grid() const { return image_size / patch_size; }
  std::int64_t tokens_per_image() const { return grid() * grid(); }
  std::int64_t patch_dim() const { return patch_size * patch_size * channels; }
  std::int64_t mlp_dim() const { return embed_dim * mlp_ratio; }

  // Ordered key=value pairs; from_pairs rejects unknown keys.
  std::vector<std::pair<std::string, std::string>> to_pairs() const;
  static ModelConfig from_pairs(const std::vector<std::pair<std::string, std::string>>& pairs);
  bool operator==(const ModelConfig&) const = default;
};

// The single-core desk configuration used for training runs in the test
// suite: 4×4 patches (64 tokens per 32×32 image), 2 dual + 2 single blocks.
ModelConfig desk_config();
// Smallest configuration for finite-difference checks.
ModelConfig tiny_config();

// Per-token 2-D coordinates (row, col) for each branch.
struct PositionAssignment {
  using Coord = std::array<double, 2>;
  std::vector<Coord> text;
  std::vector<Coord> x;
  std::vector<std::vector<Coord>> conds;
};

PositionAssignment assign_positions(const ModelConfig& config, std::int64_t text_len,
                                    const std::vector<ConditionType>& cond_types);

// cos/sin tables [L × head_dim/2]: the first half of each head's pairs turns
// with the row coordinate, the second half with the column coordinate.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> rope_tables(const std::vector<PositionAssignment::Coord>& coords,
                                            std::int64_t head_dim, double base);

// A condition image [H×W×3] and its type.
template <typename S>
struct Condition {
  ConditionType type;
  Tensor<S> image;
};

// Which adapters a forward pass may apply.
template <typename S>
struct AdapterSet {
  const LoraRegistry<S>* registry = nullptr;
  bool use_denoising = false;
  bool use_text = false;
};

// Token streams between blocks, in layout order T, X, C_1..C_N.
template <typename S>
struct Branches {
  Tensor<S> text;
  Tensor<S> x;
  std::vector<Tensor<S>> conds;
  std::vector<ConditionType> types;

  BranchLayout layout() const;
  std::size_t count() const { return 2 + conds.size(); }
  Tensor<S>& at(std::size_t i) { return i == 0 ? text : i == 1 ? x : conds[i - 2]; }
  const Tensor<S>& at(std::size_t i) const { return i == 0 ? text : i == 1 ? x : conds[i - 2]; }
};

template <typename S>
struct BranchRope {
  std::vector<Tensor<S>> cos;
  std::vector<Tensor<S>> sin;
};

// Ordered named parameters.
template <typename S>
class ParamStore {
 public:
  Tensor<S>& add(const std::string& name, Tensor<S> tensor);
  const Tensor<S>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<std::pair<std::string, Tensor<S>>>& items() const { return items_; }
  void set_trainable(bool on);
  std::int64_t parameter_count() const;

 private:
  std::vector<std::pair<std::string, Tensor<S>>> items_;
  std::map<std::string, std::size_t> index_;
};

template <typename S>
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }

  // Velocity for x_t [H×W×3] at time t; same shape as x_t.
  Tensor<S> forward(const Tensor<S>& x_t, S t, const std::vector<std::int64_t>& caption,
                    const std::vector<Condition<S>>& conds, const AdapterSet<S>& adapters) const;

  Branches<S> embed_branches(const Tensor<S>& x_t, const std::vector<std::int64_t>& caption,
                             const std::vector<Condition<S>>& conds) const;
  // [1 × embed_dim]
  Tensor<S> timestep_embed(S t) const;
  BranchRope<S> branch_rope(const Branches<S>& branches) const;
  void dual_stream_block(std::int64_t index, Branches<S>& branches, const Tensor<S>& temb,
                         const AdapterSet<S>& adapters, const BranchRope<S>& rope) const;
  void single_stream_block(std::int64_t index, Branches<S>& branches, const Tensor<S>& temb,
                           const AdapterSet<S>& adapters, const BranchRope<S>& rope) const;

  // [tokens × patch_dim] <-> [H×W×C]
  Tensor<S> patchify(const Tensor<S>& image) const;
  Tensor<S> unpatchify(const Tensor<S>& tokens) const;

  // Fresh adapter targeting q/k/v/o of every dual block (and single block
  // unless config.lora_single_blocks is false).
  std::shared_ptr<LoraAdapter<S>> make_adapter(const std::string& name,
                                               std::mt19937_64& rng) const;
  // Adapter target keys in creation order ("dual0/q", ...).
  std::vector<std::string> adapter_targets() const;

 private:
  struct StreamWeights {
    Tensor<S> mod_w, mod_b, q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b, mlp1_w, mlp1_b, mlp2_w,
        mlp2_b;
  };

  StreamWeights make_stream(const std::string& prefix, std::int64_t mod_chunks,
                            std::mt19937_64& rng);
  const LoraAdapter<S>* branch_adapter(const Branches<S>& branches, std::size_t branch,
                                       const AdapterSet<S>& adapters) const;
  Tensor<S> project(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                    const LoraAdapter<S>* adapter, const std::string& block,
                    const std::string& proj, std::size_t branch) const;

  ModelConfig config_;
  ParamStore<S> params_;
  Tensor<S> time_fc1_w_, time_fc1_b_, time_fc2_w_, time_fc2_b_;
  Tensor<S> text_embed_;
  Tensor<S> x_embed_w_, x_embed_b_;
  std::vector<std::pair<StreamWeights, StreamWeights>> dual_;  // (text, image)
  std::vector<StreamWeights> single_;
  Tensor<S> final_mod_w_, final_mod_b_, out_w_, out_b_;
  std::vector<std::int64_t> patch_index_;
  std::vector<std::int64_t> unpatch_index_;
};

// Converts a [H×W×C] tensor with C in {1, 3} to three channels.
template <typename S>
Tensor<S> to_rgb(const Tensor<S>& image);

std::string branch_label(std::size_t branch);

}  // namespace unicombine
