#include "unicombine/model.hpp"

#include <cmath>
#include <sstream>

namespace unicombine {

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model config: " + what);
  };
  require(embed_dim > 0 && head_dim > 0 && num_heads > 0, "dimensions must be positive");
  require(embed_dim == num_heads * head_dim, "embed_dim must equal num_heads * head_dim");
  require(head_dim % 4 == 0, "head_dim must be divisible by 4 for 2-D rotary encoding");
  require(patch_size > 0 && image_size > 0 && image_size % patch_size == 0,
          "image_size must be divisible by patch_size");
  require(num_dual_blocks >= 1, "num_dual_blocks must be >= 1");
  require(num_single_blocks >= 0, "num_single_blocks must be >= 0");
  require(channels == 3, "channels must be 3");
  require(vocab_size > 0 && max_text_len > 0, "text sizes must be positive");
  require(mlp_ratio > 0 && time_freq_dim > 0 && time_freq_dim % 2 == 0,
          "mlp_ratio and an even time_freq_dim are required");
  require(rope_base > 1.0, "rope_base must exceed 1");
  require(lora_rank > 0 && lora_alpha > 0.0, "lora rank and alpha must be positive");
}

std::vector<std::pair<std::string, std::string>> ModelConfig::to_pairs() const {
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  return {{"embed_dim", std::to_string(embed_dim)},
          {"head_dim", std::to_string(head_dim)},
          {"num_heads", std::to_string(num_heads)},
          {"num_dual_blocks", std::to_string(num_dual_blocks)},
          {"num_single_blocks", std::to_string(num_single_blocks)},
          {"patch_size", std::to_string(patch_size)},
          {"image_size", std::to_string(image_size)},
          {"channels", std::to_string(channels)},
          {"vocab_size", std::to_string(vocab_size)},
          {"max_text_len", std::to_string(max_text_len)},
          {"mlp_ratio", std::to_string(mlp_ratio)},
          {"time_freq_dim", std::to_string(time_freq_dim)},
          {"rope_base", num(rope_base)},
          {"lora_rank", std::to_string(lora_rank)},
          {"lora_alpha", num(lora_alpha)},
          {"lora_single_blocks", lora_single_blocks ? "true" : "false"},
          {"offset_reference_positions", offset_reference_positions ? "true" : "false"}};
}

ModelConfig ModelConfig::from_pairs(const std::vector<std::pair<std::string, std::string>>& pairs) {
  ModelConfig c;
  auto as_int = [](const std::string& k, const std::string& v) {
    try {
      std::size_t used = 0;
      auto out = std::stoll(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return static_cast<std::int64_t>(out);
    } catch (const std::exception&) {
      throw ConfigError("model." + k + ": expected an integer, got '" + v + "'");
    }
  };
  auto as_real = [](const std::string& k, const std::string& v) {
    try {
      std::size_t used = 0;
      auto out = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw ConfigError("model." + k + ": expected a number, got '" + v + "'");
    }
  };
  auto as_bool = [](const std::string& k, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("model." + k + ": expected true/false, got '" + v + "'");
  };
  for (const auto& [k, v] : pairs) {
    if (k == "embed_dim") c.embed_dim = as_int(k, v);
    else if (k == "head_dim") c.head_dim = as_int(k, v);
    else if (k == "num_heads") c.num_heads = as_int(k, v);
    else if (k == "num_dual_blocks") c.num_dual_blocks = as_int(k, v);
    else if (k == "num_single_blocks") c.num_single_blocks = as_int(k, v);
    else if (k == "patch_size") c.patch_size = as_int(k, v);
    else if (k == "image_size") c.image_size = as_int(k, v);
    else if (k == "channels") c.channels = as_int(k, v);
    else if (k == "vocab_size") c.vocab_size = as_int(k, v);
    else if (k == "max_text_len") c.max_text_len = as_int(k, v);
    else if (k == "mlp_ratio") c.mlp_ratio = as_int(k, v);
    else if (k == "time_freq_dim") c.time_freq_dim = as_int(k, v);
    else if (k == "rope_base") c.rope_base = as_real(k, v);
    else if (k == "lora_rank") c.lora_rank = as_int(k, v);
    else if (k == "lora_alpha") c.lora_alpha = as_real(k, v);
    else if (k == "lora_single_blocks") c.lora_single_blocks = as_bool(k, v);
    else if (k == "offset_reference_positions") c.offset_reference_positions = as_bool(k, v);
    else throw ConfigError("unknown key model." + k);
  }
  c.validate();
  return c;
}

ModelConfig desk_config() {
  ModelConfig c;
  c.patch_size = 4;
  return c;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.embed_dim = 8;
  c.head_dim = 4;
  c.num_heads = 2;
  c.num_dual_blocks = 1;
  c.num_single_blocks = 1;
  c.patch_size = 4;
  c.image_size = 8;
  c.vocab_size = 32;
  c.max_text_len = 4;
  c.mlp_ratio = 2;
  c.time_freq_dim = 4;
  c.lora_rank = 2;
  c.lora_alpha = 2.0;
  return c;
}

PositionAssignment assign_positions(const ModelConfig& config, std::int64_t text_len,
                                    const std::vector<ConditionType>& cond_types) {
  PositionAssignment pos;
  // Text tokens sit on the diagonal before the image grid.
  for (std::int64_t i = 0; i < text_len; ++i)
    pos.text.push_back({-1.0 - static_cast<double>(i), -1.0 - static_cast<double>(i)});
  const auto g = config.grid();
  for (std::int64_t r = 0; r < g; ++r)
    for (std::int64_t c = 0; c < g; ++c)
      pos.x.push_back({static_cast<double>(r), static_cast<double>(c)});
  for (auto type : cond_types) {
    auto coords = pos.x;
    if (!spatially_aligned(type) && config.offset_reference_positions)
      for (auto& rc : coords) rc[1] += static_cast<double>(g);
    pos.conds.push_back(std::move(coords));
  }
  return pos;
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> rope_tables(const std::vector<PositionAssignment::Coord>& coords,
                                            std::int64_t head_dim, double base) {
  if (head_dim % 4 != 0) throw DimensionError("rope_tables: head_dim must be divisible by 4");
  const auto pairs = head_dim / 2;
  const auto per_axis = pairs / 2;
  const auto len = static_cast<std::int64_t>(coords.size());
  std::vector<S> cs(static_cast<std::size_t>(len * pairs)), sn(cs.size());
  for (std::int64_t l = 0; l < len; ++l)
    for (std::int64_t j = 0; j < pairs; ++j) {
      const auto axis = j < per_axis ? 0 : 1;
      const auto jj = j % per_axis;
      const double freq = std::pow(base, -static_cast<double>(jj) / static_cast<double>(per_axis));
      const double angle = coords[static_cast<std::size_t>(l)][axis] * freq;
      cs[l * pairs + j] = static_cast<S>(std::cos(angle));
      sn[l * pairs + j] = static_cast<S>(std::sin(angle));
    }
  return {Tensor<S>::from({len, pairs}, std::move(cs)), Tensor<S>::from({len, pairs}, std::move(sn))};
}

template <typename S>
BranchLayout Branches<S>::layout() const {
  BranchLayout l{text.rows(), x.rows(), {}};
  for (const auto& c : conds) l.len_cond.push_back(c.rows());
  return l;
}

std::string branch_label(std::size_t branch) {
  if (branch == 0) return "T";
  if (branch == 1) return "X";
  return "C" + std::to_string(branch - 2);
}

// ---- ParamStore -------------------------------------------------------------------

template <typename S>
Tensor<S>& ParamStore<S>::add(const std::string& name, Tensor<S> tensor) {
  if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
  tensor.set_requires_grad(true);
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(tensor));
  return items_.back().second;
}

template <typename S>
const Tensor<S>& ParamStore<S>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return items_[it->second].second;
}

template <typename S>
void ParamStore<S>::set_trainable(bool on) {
  for (auto& [_, t] : items_) t.set_requires_grad(on);
}

template <typename S>
std::int64_t ParamStore<S>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : items_) n += t.numel();
  return n;
}

// ---- Model ---------------------------------------------------------------------

template <typename S>
typename Model<S>::StreamWeights Model<S>::make_stream(const std::string& prefix,
                                                       std::int64_t mod_chunks,
                                                       std::mt19937_64& rng) {
  const auto d = config_.embed_dim, m = config_.mlp_dim();
  const S sd = S(1) / std::sqrt(static_cast<S>(d));
  const S sm = S(1) / std::sqrt(static_cast<S>(m));
  auto w = [&](const std::string& name, Shape shape, S stddev) -> Tensor<S> {
    return params_.add(prefix + "/" + name, Tensor<S>::randn(std::move(shape), rng, stddev));
  };
  auto z = [&](const std::string& name, std::int64_t n) -> Tensor<S> {
    return params_.add(prefix + "/" + name, Tensor<S>::zeros({n}));
  };
  StreamWeights s;
  s.mod_w = w("mod/w", {mod_chunks * d, d}, S(0.02));
  s.mod_b = z("mod/b", mod_chunks * d);
  s.q_w = w("q/w", {d, d}, sd);
  s.q_b = z("q/b", d);
  s.k_w = w("k/w", {d, d}, sd);
  s.k_b = z("k/b", d);
  s.v_w = w("v/w", {d, d}, sd);
  s.v_b = z("v/b", d);
  s.o_w = w("o/w", {d, d}, sd);
  s.o_b = z("o/b", d);
  s.mlp1_w = w("mlp1/w", {m, d}, sd);
  s.mlp1_b = z("mlp1/b", m);
  s.mlp2_w = w("mlp2/w", {d, m}, sm);
  s.mlp2_b = z("mlp2/b", d);
  return s;
}

template <typename S>
Model<S>::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto d = config_.embed_dim, f = config_.time_freq_dim, p = config_.patch_dim();
  time_fc1_w_ = params_.add("base/time/fc1/w",
                            Tensor<S>::randn({d, f}, rng, S(1) / std::sqrt(static_cast<S>(f))));
  time_fc1_b_ = params_.add("base/time/fc1/b", Tensor<S>::zeros({d}));
  time_fc2_w_ = params_.add("base/time/fc2/w",
                            Tensor<S>::randn({d, d}, rng, S(1) / std::sqrt(static_cast<S>(d))));
  time_fc2_b_ = params_.add("base/time/fc2/b", Tensor<S>::zeros({d}));
  text_embed_ = params_.add("base/text/embed", Tensor<S>::randn({config_.vocab_size, d}, rng, S(1)));
  x_embed_w_ = params_.add("base/x_embed/w",
                           Tensor<S>::randn({d, p}, rng, S(1) / std::sqrt(static_cast<S>(p))));
  x_embed_b_ = params_.add("base/x_embed/b", Tensor<S>::zeros({d}));
  for (std::int64_t b = 0; b < config_.num_dual_blocks; ++b) {
    const auto prefix = "base/dual" + std::to_string(b);
    auto txt = make_stream(prefix + "/txt", 6, rng);
    auto img = make_stream(prefix + "/img", 6, rng);
    dual_.emplace_back(std::move(txt), std::move(img));
  }
  for (std::int64_t b = 0; b < config_.num_single_blocks; ++b)
    single_.push_back(make_stream("base/single" + std::to_string(b), 3, rng));
  final_mod_w_ = params_.add("base/final/mod/w", Tensor<S>::randn({2 * d, d}, rng, S(0.02)));
  final_mod_b_ = params_.add("base/final/mod/b", Tensor<S>::zeros({2 * d}));
  out_w_ = params_.add("base/final/out/w", Tensor<S>::randn({p, d}, rng, S(0.02)));
  out_b_ = params_.add("base/final/out/b", Tensor<S>::zeros({p}));

  const auto g = config_.grid(), ps = config_.patch_size, ch = config_.channels;
  const auto w = config_.image_size;
  patch_index_.resize(static_cast<std::size_t>(g * g * p));
  unpatch_index_.resize(patch_index_.size());
  for (std::int64_t gy = 0; gy < g; ++gy)
    for (std::int64_t gx = 0; gx < g; ++gx)
      for (std::int64_t dy = 0; dy < ps; ++dy)
        for (std::int64_t dx = 0; dx < ps; ++dx)
          for (std::int64_t c = 0; c < ch; ++c) {
            const auto token = gy * g + gx;
            const auto feat = (dy * ps + dx) * ch + c;
            const auto pix = ((gy * ps + dy) * w + gx * ps + dx) * ch + c;
            patch_index_[token * p + feat] = pix;
            unpatch_index_[pix] = token * p + feat;
          }
}

template <typename S>
Tensor<S> Model<S>::patchify(const Tensor<S>& image) const {
  const Shape want{config_.image_size, config_.image_size, config_.channels};
  if (image.shape() != want)
    throw DimensionError("image of shape " + shape_str(image.shape()) + ", expected " +
                         shape_str(want));
  return gather(image, patch_index_, {config_.tokens_per_image(), config_.patch_dim()});
}

template <typename S>
Tensor<S> Model<S>::unpatchify(const Tensor<S>& tokens) const {
  return gather(tokens, unpatch_index_,
                {config_.image_size, config_.image_size, config_.channels});
}

template <typename S>
Tensor<S> to_rgb(const Tensor<S>& image) {
  if (image.ndim() != 3) throw DimensionError("condition image must be [H x W x C]");
  const auto c = image.dim(2);
  if (c == 3) return image;
  if (c != 1 && c != 4)
    throw DimensionError("condition image with " + std::to_string(c) + " channels");
  const auto hw = image.dim(0) * image.dim(1);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(hw * 3));
  for (std::int64_t i = 0; i < hw; ++i)
    for (std::int64_t k = 0; k < 3; ++k) idx[i * 3 + k] = c == 1 ? i : i * 4 + k;
  return gather(image, idx, {image.dim(0), image.dim(1), 3});
}

template <typename S>
Branches<S> Model<S>::embed_branches(const Tensor<S>& x_t, const std::vector<std::int64_t>& caption,
                                     const std::vector<Condition<S>>& conds) const {
  if (caption.empty()) throw ContractError("caption must contain at least one token");
  if (static_cast<std::int64_t>(caption.size()) > config_.max_text_len)
    throw ContractError("caption of " + std::to_string(caption.size()) + " tokens exceeds " +
                        std::to_string(config_.max_text_len));
  Branches<S> br;
  br.text = gather_rows(text_embed_, caption);
  br.x = linear(patchify(x_t), x_embed_w_, x_embed_b_);
  for (const auto& c : conds) {
    br.conds.push_back(linear(patchify(to_rgb(c.image)), x_embed_w_, x_embed_b_));
    br.types.push_back(c.type);
  }
  return br;
}

template <typename S>
Tensor<S> Model<S>::timestep_embed(S t) const {
  if (!(t >= S(0) && t <= S(1)))
    throw ContractError("timestep " + std::to_string(static_cast<double>(t)) +
                        " outside [0, 1]");
  const auto half = config_.time_freq_dim / 2;
  std::vector<S> feats(static_cast<std::size_t>(2 * half));
  for (std::int64_t j = 0; j < half; ++j) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
    const double arg = 1000.0 * static_cast<double>(t) * freq;
    feats[j] = static_cast<S>(std::cos(arg));
    feats[half + j] = static_cast<S>(std::sin(arg));
  }
  auto f = Tensor<S>::from({1, 2 * half}, std::move(feats));
  return linear(silu(linear(f, time_fc1_w_, time_fc1_b_)), time_fc2_w_, time_fc2_b_);
}

template <typename S>
BranchRope<S> Model<S>::branch_rope(const Branches<S>& branches) const {
  auto pos = assign_positions(config_, branches.text.rows(), branches.types);
  BranchRope<S> r;
  auto push = [&](const std::vector<PositionAssignment::Coord>& coords) {
    auto [c, s] = rope_tables<S>(coords, config_.head_dim, config_.rope_base);
    r.cos.push_back(std::move(c));
    r.sin.push_back(std::move(s));
  };
  push(pos.text);
  push(pos.x);
  for (const auto& c : pos.conds) push(c);
  return r;
}

template <typename S>
const LoraAdapter<S>* Model<S>::branch_adapter(const Branches<S>& branches, std::size_t branch,
                                               const AdapterSet<S>& adapters) const {
  if (branch == 0)
    return adapters.use_text && adapters.registry ? adapters.registry->text().get() : nullptr;
  if (branch == 1) {
    if (!adapters.use_denoising) return nullptr;
    if (!adapters.registry || !adapters.registry->denoising())
      throw ConfigError("denoising adapter requested but none is loaded");
    return adapters.registry->denoising().get();
  }
  const auto type = branches.types.at(branch - 2);
  if (!adapters.registry)
    throw ConfigError("no Condition-LoRA registered for condition type " + to_string(type));
  return &switch_select(type, *adapters.registry);
}

template <typename S>
Tensor<S> Model<S>::project(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                            const LoraAdapter<S>* adapter, const std::string& block,
                            const std::string& proj, std::size_t branch) const {
  const LoraFactors<S>* factors = nullptr;
  S s = S(0);
  if (adapter) {
    const auto key = block + "/" + proj;
    if (adapter->has_target(key)) {
      factors = &adapter->at(key);
      s = adapter->scale();
    }
  }
  if (auto* log = AdapterLog::active())
    log->calls.push_back({block, proj, branch_label(branch), factors ? adapter->name() : "",
                          w.impl().get()});
  return linear_with_lora(x, w, b, factors, s);
}

namespace {

template <typename S>
Tensor<S> modulate(const Tensor<S>& x, const Tensor<S>& shift, const Tensor<S>& scale_vec) {
  return add_rowvec(mul_rowvec(layer_norm(x), add_scalar(scale_vec, S(1))), shift);
}

template <typename S>
std::vector<Tensor<S>> chunks(const Tensor<S>& mod, std::int64_t n) {
  const auto d = mod.cols() / n;
  std::vector<Tensor<S>> out;
  for (std::int64_t i = 0; i < n; ++i) out.push_back(slice_cols(mod, i * d, (i + 1) * d));
  return out;
}

}  // namespace

template <typename S>
void Model<S>::dual_stream_block(std::int64_t index, Branches<S>& br, const Tensor<S>& temb,
                                 const AdapterSet<S>& adapters, const BranchRope<S>& pos) const {
  const auto& [txt, img] = dual_.at(static_cast<std::size_t>(index));
  const auto block = "dual" + std::to_string(index);
  const auto act = silu(temb);
  // Conditional branches reuse the denoising-branch modulation.
  const auto mod_txt = chunks(linear(act, txt.mod_w, txt.mod_b), 6);
  const auto mod_img = chunks(linear(act, img.mod_w, img.mod_b), 6);
  const auto n = br.count();
  const auto layout = br.layout();

  std::vector<const LoraAdapter<S>*> adapter(n);
  std::vector<Tensor<S>> qs, ks, vs;
  for (std::size_t j = 0; j < n; ++j) {
    const auto& sw = j == 0 ? txt : img;
    const auto& mod = j == 0 ? mod_txt : mod_img;
    adapter[j] = branch_adapter(br, j, adapters);
    auto h = modulate(br.at(j), mod[0], mod[1]);
    qs.push_back(rope(project(h, sw.q_w, sw.q_b, adapter[j], block, "q", j), pos.cos[j],
                      pos.sin[j], config_.num_heads));
    ks.push_back(rope(project(h, sw.k_w, sw.k_b, adapter[j], block, "k", j), pos.cos[j],
                      pos.sin[j], config_.num_heads));
    vs.push_back(project(h, sw.v_w, sw.v_b, adapter[j], block, "v", j));
  }
  if (auto* probe = AttentionProbe::active()) probe->block = static_cast<int>(index);
  auto attn = cmmdit_attention(concat_rows(qs), concat_rows(ks), concat_rows(vs), layout,
                               config_.num_heads);
  const auto spans = layout.spans();
  for (std::size_t j = 0; j < n; ++j) {
    const auto& sw = j == 0 ? txt : img;
    const auto& mod = j == 0 ? mod_txt : mod_img;
    auto a = slice_rows(attn, spans[j].begin, spans[j].end);
    auto o = project(a, sw.o_w, sw.o_b, adapter[j], block, "o", j);
    auto x = add(br.at(j), mul_rowvec(o, mod[2]));
    auto h2 = modulate(x, mod[3], mod[4]);
    auto m = linear(gelu(linear(h2, sw.mlp1_w, sw.mlp1_b)), sw.mlp2_w, sw.mlp2_b);
    br.at(j) = add(x, mul_rowvec(m, mod[5]));
  }
}

template <typename S>
void Model<S>::single_stream_block(std::int64_t index, Branches<S>& br, const Tensor<S>& temb,
                                   const AdapterSet<S>& adapters,
                                   const BranchRope<S>& pos) const {
  const auto& sw = single_.at(static_cast<std::size_t>(index));
  const auto block = "single" + std::to_string(index);
  const auto mod = chunks(linear(silu(temb), sw.mod_w, sw.mod_b), 3);
  const auto n = br.count();
  const auto layout = br.layout();

  std::vector<const LoraAdapter<S>*> adapter(n);
  std::vector<Tensor<S>> hs, qs, ks, vs;
  for (std::size_t j = 0; j < n; ++j) {
    adapter[j] = branch_adapter(br, j, adapters);
    auto h = modulate(br.at(j), mod[0], mod[1]);
    qs.push_back(rope(project(h, sw.q_w, sw.q_b, adapter[j], block, "q", j), pos.cos[j],
                      pos.sin[j], config_.num_heads));
    ks.push_back(rope(project(h, sw.k_w, sw.k_b, adapter[j], block, "k", j), pos.cos[j],
                      pos.sin[j], config_.num_heads));
    vs.push_back(project(h, sw.v_w, sw.v_b, adapter[j], block, "v", j));
    hs.push_back(std::move(h));
  }
  if (auto* probe = AttentionProbe::active())
    probe->block = static_cast<int>(config_.num_dual_blocks + index);
  auto attn = cmmdit_attention(concat_rows(qs), concat_rows(ks), concat_rows(vs), layout,
                               config_.num_heads);
  const auto spans = layout.spans();
  for (std::size_t j = 0; j < n; ++j) {
    auto a = slice_rows(attn, spans[j].begin, spans[j].end);
    auto o = project(a, sw.o_w, sw.o_b, adapter[j], block, "o", j);
    auto m = linear(gelu(linear(hs[j], sw.mlp1_w, sw.mlp1_b)), sw.mlp2_w, sw.mlp2_b);
    br.at(j) = add(br.at(j), mul_rowvec(add(o, m), mod[2]));
  }
}

template <typename S>
Tensor<S> Model<S>::forward(const Tensor<S>& x_t, S t, const std::vector<std::int64_t>& caption,
                            const std::vector<Condition<S>>& conds,
                            const AdapterSet<S>& adapters) const {
  auto br = embed_branches(x_t, caption, conds);
  const auto temb = timestep_embed(t);
  const auto pos = branch_rope(br);
  for (std::int64_t b = 0; b < config_.num_dual_blocks; ++b)
    dual_stream_block(b, br, temb, adapters, pos);
  for (std::int64_t b = 0; b < config_.num_single_blocks; ++b)
    single_stream_block(b, br, temb, adapters, pos);
  const auto mod = chunks(linear(silu(temb), final_mod_w_, final_mod_b_), 2);
  auto h = modulate(br.x, mod[0], mod[1]);
  return unpatchify(linear(h, out_w_, out_b_));
}

template <typename S>
std::vector<std::string> Model<S>::adapter_targets() const {
  std::vector<std::string> out;
  static const char* kProjs[] = {"q", "k", "v", "o"};
  for (std::int64_t b = 0; b < config_.num_dual_blocks; ++b)
    for (const char* p : kProjs) out.push_back("dual" + std::to_string(b) + "/" + p);
  if (config_.lora_single_blocks)
    for (std::int64_t b = 0; b < config_.num_single_blocks; ++b)
      for (const char* p : kProjs) out.push_back("single" + std::to_string(b) + "/" + p);
  return out;
}

template <typename S>
std::shared_ptr<LoraAdapter<S>> Model<S>::make_adapter(const std::string& name,
                                                       std::mt19937_64& rng) const {
  auto a = std::make_shared<LoraAdapter<S>>(name, config_.lora_rank,
                                            static_cast<S>(config_.lora_alpha));
  const auto d = config_.embed_dim;
  for (const auto& target : adapter_targets()) a->add_target(target, d, d, rng);
  return a;
}

#define UC_MODEL(S)                                                                       \
  template struct Branches<S>;                                                            \
  template class ParamStore<S>;                                                           \
  template class Model<S>;                                                                \
  template Tensor<S> to_rgb<S>(const Tensor<S>&);                                         \
  template std::pair<Tensor<S>, Tensor<S>> rope_tables<S>(                                \
      const std::vector<PositionAssignment::Coord>&, std::int64_t, double);

UC_MODEL(float)
UC_MODEL(double)

#undef UC_MODEL

}  // namespace unicombine
