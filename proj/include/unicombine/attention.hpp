// Unified multi-branch sequences and scoped joint attention.
//
// The sequence is laid out as [T; X; C_1; ...; C_N]. Text and denoising
// queries attend over the whole sequence; the queries of condition C_i attend
// only over [T; X; C_i]. cmmdit_attention computes this as 1 + N independent
// attention calls and never forms the full score matrix when N >= 1;
// mmdit_attention_masked is the dense reference used to check it.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "unicombine/tensor.hpp"

namespace unicombine {

struct Span {
  std::int64_t begin = 0;
  std::int64_t end = 0;
  std::int64_t size() const { return end - begin; }
  bool contains(std::int64_t i) const { return i >= begin && i < end; }
};

struct BranchLayout {
  std::int64_t len_text = 1;
  std::int64_t len_x = 1;
  std::vector<std::int64_t> len_cond;

  // Throws DimensionError unless every length is >= 1.
  void validate() const;
  std::size_t num_conditions() const { return len_cond.size(); }
  std::int64_t joint() const { return len_text + len_x; }
  std::int64_t total() const;
  Span text_span() const { return {0, len_text}; }
  Span x_span() const { return {len_text, len_text + len_x}; }
  Span cond_span(std::size_t i) const;
  // Spans in sequence order: T, X, C_1..C_N.
  std::vector<Span> spans() const;

  bool operator==(const BranchLayout&) const = default;
};

template <typename S>
struct UnifiedSequence {
  Tensor<S> tokens;  // [total × width]
  BranchLayout layout;
};

// Concatenates [T; X; C_1; ...; C_N] and records the spans.
template <typename S>
UnifiedSequence<S> assemble_sequence(const Tensor<S>& text, const Tensor<S>& x,
                                     const std::vector<Tensor<S>>& conds);

// Row-major total×total allowed-key matrix.
struct ScopeMask {
  std::int64_t size = 0;
  std::vector<std::uint8_t> allowed;
  bool operator()(std::int64_t query, std::int64_t key) const {
    return allowed[static_cast<std::size_t>(query * size + key)] != 0;
  }
};

ScopeMask scope_mask(const BranchLayout& layout);
ScopeMask full_mask(std::int64_t size);

// q, k, v: [heads × total × head_dim] in layout order.
template <typename S>
struct AttentionInputs {
  Tensor<S> q, k, v;
  std::int64_t head_dim = 0;
};

// Scoped attention on [heads × total × head_dim] inputs.
template <typename S>
Tensor<S> cmmdit_attention(const AttentionInputs<S>& inputs, const BranchLayout& layout);

// Same computation on heads packed along columns: q, k, v are
// [total × heads·head_dim], as produced by the projection layers.
template <typename S>
Tensor<S> cmmdit_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                           const BranchLayout& layout, std::int64_t num_heads);

// Dense reference: full score matrix with disallowed entries replaced by a
// -1e9 sentinel before the row-max subtraction.
template <typename S>
Tensor<S> mmdit_attention_masked(const AttentionInputs<S>& inputs, const ScopeMask& mask);

inline constexpr double kMaskSentinel = -1e9;

enum class AttnMode { MMDIT, CMMDIT };

std::string to_string(AttnMode mode);
AttnMode parse_attn_mode(const std::string& text);

// Query-key pairs scored across all blocks (heads not counted).
std::int64_t count_attn_ops(const BranchLayout& layout, std::int64_t num_blocks, AttnMode mode);

// "732.17M"
std::string format_millions(std::int64_t count);

// Text 512, denoising 1024, two 1024-token conditions, 57 blocks: the
// configuration whose counts are 732,168,192 (dense) and 612,630,528 (scoped).
struct AttnOpsPreset {
  BranchLayout layout;
  std::int64_t num_blocks = 0;
};
AttnOpsPreset subject_insertion_preset();

// ---- instrumentation ----------------------------------------------------------

// Softmax rows of the text+denoising query block, captured per block and head.
struct AttentionRecord {
  int block = 0;
  std::int64_t head = 0;
  BranchLayout layout;
  std::vector<double> probs;  // [layout.joint() × layout.total()]
};

// While installed on a thread, every cmmdit_attention call on that thread
// appends its records. The caller sets `block` before each attention call.
class AttentionProbe {
 public:
  AttentionProbe();
  ~AttentionProbe();
  AttentionProbe(const AttentionProbe&) = delete;
  AttentionProbe& operator=(const AttentionProbe&) = delete;

  static AttentionProbe* active();

  int block = 0;
  std::vector<AttentionRecord> records;

 private:
  AttentionProbe* previous_;
};

}  // namespace unicombine
