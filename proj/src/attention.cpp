#include "unicombine/attention.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace unicombine {

void BranchLayout::validate() const {
  if (len_text < 1 || len_x < 1)
    throw DimensionError("branch layout: text and denoising spans need at least one token");
  for (std::size_t i = 0; i < len_cond.size(); ++i)
    if (len_cond[i] < 1)
      throw DimensionError("branch layout: condition " + std::to_string(i) + " is empty");
}

std::int64_t BranchLayout::total() const {
  return std::accumulate(len_cond.begin(), len_cond.end(), joint());
}

Span BranchLayout::cond_span(std::size_t i) const {
  std::int64_t at = joint();
  for (std::size_t j = 0; j < i; ++j) at += len_cond.at(j);
  return {at, at + len_cond.at(i)};
}

std::vector<Span> BranchLayout::spans() const {
  std::vector<Span> out{text_span(), x_span()};
  for (std::size_t i = 0; i < len_cond.size(); ++i) out.push_back(cond_span(i));
  return out;
}

template <typename S>
UnifiedSequence<S> assemble_sequence(const Tensor<S>& text, const Tensor<S>& x,
                                     const std::vector<Tensor<S>>& conds) {
  const auto width = text.cols();
  BranchLayout layout{text.rows(), x.rows(), {}};
  if (x.cols() != width)
    throw DimensionError("assemble_sequence: denoising width " + std::to_string(x.cols()) +
                         " vs text width " + std::to_string(width));
  std::vector<Tensor<S>> parts{text, x};
  for (std::size_t i = 0; i < conds.size(); ++i) {
    if (conds[i].cols() != width)
      throw DimensionError("assemble_sequence: condition " + std::to_string(i) + " width " +
                           std::to_string(conds[i].cols()) + " vs " + std::to_string(width));
    layout.len_cond.push_back(conds[i].rows());
    parts.push_back(conds[i]);
  }
  layout.validate();
  return {concat_rows(parts), std::move(layout)};
}

ScopeMask scope_mask(const BranchLayout& layout) {
  layout.validate();
  const auto n = layout.total();
  ScopeMask mask{n, std::vector<std::uint8_t>(static_cast<std::size_t>(n * n), 0)};
  const auto joint = layout.joint();
  for (std::int64_t q = 0; q < joint; ++q)
    std::fill_n(mask.allowed.begin() + q * n, n, std::uint8_t{1});
  for (std::size_t i = 0; i < layout.num_conditions(); ++i) {
    const auto span = layout.cond_span(i);
    for (auto q = span.begin; q < span.end; ++q) {
      auto row = mask.allowed.begin() + q * n;
      std::fill_n(row, joint, std::uint8_t{1});
      std::fill(row + span.begin, row + span.end, std::uint8_t{1});
    }
  }
  return mask;
}

ScopeMask full_mask(std::int64_t size) {
  return {size, std::vector<std::uint8_t>(static_cast<std::size_t>(size * size), 1)};
}

namespace {

thread_local AttentionProbe* g_probe = nullptr;

template <typename S>
Tensor<S> attend(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, S scale_factor,
                 Tensor<S>* probs_out = nullptr) {
  auto scores = matmul_nt(q, k);
  check_finite(scores, "cmmdit_attention scores");
  auto probs = softmax_scaled(scores, scale_factor);
  if (probs_out) *probs_out = probs;
  return matmul(probs, v);
}

// One head; q, k, v are [total × head_dim].
template <typename S>
Tensor<S> scoped_head(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                      const BranchLayout& layout, std::int64_t head) {
  const S scale_factor = S(1) / std::sqrt(static_cast<S>(q.cols()));
  const auto joint = layout.joint();
  const auto n = layout.num_conditions();

  Tensor<S> joint_probs;
  auto* probe = g_probe;
  std::vector<Tensor<S>> outputs;
  outputs.reserve(n + 1);
  // T and X queries: global scope.
  auto q_joint = n == 0 ? q : slice_rows(q, 0, joint);
  outputs.push_back(attend(q_joint, k, v, scale_factor, probe ? &joint_probs : nullptr));
  if (probe) {
    AttentionRecord rec{probe->block, head, layout, {}};
    rec.probs.assign(joint_probs.values().begin(), joint_probs.values().end());
    probe->records.push_back(std::move(rec));
  }
  if (n == 0) return outputs.front();

  // C_i queries: scope [T; X; C_i].
  auto k_joint = slice_rows(k, 0, joint);
  auto v_joint = slice_rows(v, 0, joint);
  for (std::size_t i = 0; i < n; ++i) {
    const auto span = layout.cond_span(i);
    auto q_c = slice_rows(q, span.begin, span.end);
    auto k_s = concat_rows<S>({k_joint, slice_rows(k, span.begin, span.end)});
    auto v_s = concat_rows<S>({v_joint, slice_rows(v, span.begin, span.end)});
    outputs.push_back(attend(q_c, k_s, v_s, scale_factor));
  }
  return concat_rows(outputs);
}

template <typename S>
void check_inputs(const AttentionInputs<S>& in, std::int64_t total) {
  if (in.q.ndim() != 3 || in.q.shape() != in.k.shape() || in.q.shape() != in.v.shape())
    throw DimensionError("attention inputs: q, k, v must share a [heads x total x head_dim] shape");
  if (in.q.dim(1) != total)
    throw DimensionError("attention inputs: sequence of " + std::to_string(in.q.dim(1)) +
                         " tokens for a layout of " + std::to_string(total));
  if (in.head_dim != in.q.dim(2))
    throw DimensionError("attention inputs: head_dim " + std::to_string(in.head_dim) +
                         " vs tensor " + shape_str(in.q.shape()));
}

template <typename S>
Tensor<S> head_of(const Tensor<S>& x, std::int64_t h) {
  return reshape(slice_rows(x, h, h + 1), {x.dim(1), x.dim(2)});
}

template <typename S>
Tensor<S> stack_heads(const std::vector<Tensor<S>>& heads) {
  std::vector<Tensor<S>> parts;
  parts.reserve(heads.size());
  for (const auto& h : heads) parts.push_back(reshape(h, {1, h.rows(), h.cols()}));
  return concat_rows(parts);
}

}  // namespace

AttentionProbe::AttentionProbe() : previous_(g_probe) { g_probe = this; }
AttentionProbe::~AttentionProbe() { g_probe = previous_; }
AttentionProbe* AttentionProbe::active() { return g_probe; }

template <typename S>
Tensor<S> cmmdit_attention(const AttentionInputs<S>& inputs, const BranchLayout& layout) {
  layout.validate();
  check_inputs(inputs, layout.total());
  std::vector<Tensor<S>> heads;
  for (std::int64_t h = 0; h < inputs.q.dim(0); ++h)
    heads.push_back(scoped_head(head_of(inputs.q, h), head_of(inputs.k, h),
                                head_of(inputs.v, h), layout, h));
  return stack_heads(heads);
}

template <typename S>
Tensor<S> cmmdit_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                           const BranchLayout& layout, std::int64_t num_heads) {
  layout.validate();
  if (q.shape() != k.shape() || q.shape() != v.shape() || q.ndim() != 2)
    throw DimensionError("cmmdit_attention: q, k, v must share a 2-D shape");
  if (q.rows() != layout.total())
    throw DimensionError("cmmdit_attention: " + std::to_string(q.rows()) +
                         " tokens for a layout of " + std::to_string(layout.total()));
  if (num_heads < 1 || q.cols() % num_heads != 0)
    throw DimensionError("cmmdit_attention: width not divisible by head count");
  if (num_heads == 1) return scoped_head(q, k, v, layout, 0);
  const auto hd = q.cols() / num_heads;
  std::vector<Tensor<S>> heads;
  for (std::int64_t h = 0; h < num_heads; ++h) {
    const auto c0 = h * hd, c1 = c0 + hd;
    heads.push_back(scoped_head(slice_cols(q, c0, c1), slice_cols(k, c0, c1),
                                slice_cols(v, c0, c1), layout, h));
  }
  return concat_cols(heads);
}

template <typename S>
Tensor<S> mmdit_attention_masked(const AttentionInputs<S>& inputs, const ScopeMask& mask) {
  const auto n = mask.size;
  if (static_cast<std::int64_t>(mask.allowed.size()) != n * n)
    throw DimensionError("mmdit_attention_masked: mask is not square");
  check_inputs(inputs, n);
  for (std::int64_t r = 0; r < n; ++r) {
    const auto row = mask.allowed.begin() + r * n;
    if (std::none_of(row, row + n, [](std::uint8_t a) { return a != 0; }))
      throw ContractError("mmdit_attention_masked: row " + std::to_string(r) +
                          " has no allowed key");
  }
  std::vector<S> bias(static_cast<std::size_t>(n * n));
  for (std::size_t i = 0; i < bias.size(); ++i)
    bias[i] = mask.allowed[i] ? S(0) : static_cast<S>(kMaskSentinel);
  const auto bias_t = Tensor<S>::from({n, n}, std::move(bias));
  const S scale_factor = S(1) / std::sqrt(static_cast<S>(inputs.head_dim));
  std::vector<Tensor<S>> heads;
  for (std::int64_t h = 0; h < inputs.q.dim(0); ++h) {
    auto scores = add(matmul_nt(head_of(inputs.q, h), head_of(inputs.k, h)), bias_t);
    heads.push_back(matmul(softmax_scaled(scores, scale_factor), head_of(inputs.v, h)));
  }
  return stack_heads(heads);
}

std::string to_string(AttnMode mode) {
  return mode == AttnMode::MMDIT ? "mmdit" : "cmmdit";
}

AttnMode parse_attn_mode(const std::string& text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "mmdit") return AttnMode::MMDIT;
  if (lower == "cmmdit") return AttnMode::CMMDIT;
  throw ConfigError("unknown attention mode '" + text + "' (expected mmdit or cmmdit)");
}

std::int64_t count_attn_ops(const BranchLayout& layout, std::int64_t num_blocks, AttnMode mode) {
  if (num_blocks < 1) throw ContractError("count_attn_ops: num_blocks must be >= 1");
  layout.validate();
  const auto total = layout.total();
  if (mode == AttnMode::MMDIT) return total * total * num_blocks;
  const auto joint = layout.joint();
  std::int64_t per_block = joint * total;
  for (auto c : layout.len_cond) per_block += c * (joint + c);
  return per_block * num_blocks;
}

std::string format_millions(std::int64_t count) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2fM", static_cast<double>(count) / 1e6);
  return buf;
}

AttnOpsPreset subject_insertion_preset() {
  return {BranchLayout{512, 1024, {1024, 1024}}, 57};
}

#define UC_ATTENTION(S)                                                                     \
  template UnifiedSequence<S> assemble_sequence<S>(const Tensor<S>&, const Tensor<S>&,      \
                                                   const std::vector<Tensor<S>>&);          \
  template Tensor<S> cmmdit_attention<S>(const AttentionInputs<S>&, const BranchLayout&);   \
  template Tensor<S> cmmdit_attention<S>(const Tensor<S>&, const Tensor<S>&,                \
                                         const Tensor<S>&, const BranchLayout&,             \
                                         std::int64_t);                                     \
  template Tensor<S> mmdit_attention_masked<S>(const AttentionInputs<S>&, const ScopeMask&);

UC_ATTENTION(float)
UC_ATTENTION(double)

#undef UC_ATTENTION

}  // namespace unicombine
