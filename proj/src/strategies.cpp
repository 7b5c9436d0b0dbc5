// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <random>

#include "adaptkit/errors.hpp"
#include "adaptkit/peft.hpp"

namespace adaptkit::peft {

using namespace ad;
namespace names = model::names;

namespace {

const std::vector<std::pair<Variant, const char*>> kVariantNames = {
    {Variant::continued, "continued"}, {Variant::madx, "madx"},     {Variant::ia3, "ia3"},
    {Variant::ia3_inv, "ia3_inv"},     {Variant::lora, "lora"},     {Variant::bitfit, "bitfit"},
    {Variant::csft, "csft"},           {Variant::fishmask, "fishmask"},
};

std::string adapter_block(int i, const char* module, const char* param) {
  return "adapter.block." + std::to_string(i) + "." + module + "." + param;
}

const std::string kInvPrefix = "adapter.invertible.";

int coupling_half(const ModelSpec& m) { return m.width / 2; }
int coupling_width(const ModelSpec& m) { return std::max(1, coupling_half(m) / kCouplingReduction); }

bool uses_invertible(const StrategySpec& s) {
  return s.invertible && (s.variant == Variant::madx || s.variant == Variant::ia3_inv);
}

// Weights to draw from normal(0, 0.02); everything else is constant-initialised.
bool is_random_adapter(const std::string& name) {
  return name.ends_with("down_weight") || name.ends_with("q_a") || name.ends_with("v_a");
}

bool is_ones_adapter(const std::string& name) {
  return name.ends_with("l_k") || name.ends_with("l_v") || name.ends_with("l_ff");
}

Tensor mlp(const Tensor& x, const Tensor& down, const Tensor& down_bias, const Tensor& up, const Tensor& up_bias) {
  return add(matmul(gelu(add(matmul(x, down), down_bias)), up), up_bias);
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

}  // namespace

std::string to_string(Variant v) {
  for (const auto& [var, name] : kVariantNames)
    if (var == v) return name;
  throw std::logic_error("unknown variant");
}

Variant variant_from_string(const std::string& s) {
  for (const auto& [var, name] : kVariantNames)
    if (s == name) return var;
  throw ValidationError("strategy.variant", "unknown variant '" + s + "'");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> out = [] {
    std::vector<Variant> v;
    for (const auto& [var, _] : kVariantNames) v.push_back(var);
    return v;
  }();
  return out;
}

StrategySpec StrategySpec::defaults_for(Variant v) {
  StrategySpec s;
  s.variant = v;
  s.invertible = v == Variant::madx || v == Variant::ia3_inv;
  return s;
}

void StrategySpec::validate(const ModelSpec& m) const {
  if (variant == Variant::madx) {
    if (reduction <= 0) throw ValidationError("strategy.reduction", "must be positive");
    if (m.width % reduction != 0)
      throw ValidationError("strategy.reduction", "reduction " + std::to_string(reduction) +
                                                      " does not divide width " + std::to_string(m.width));
  }
  if (variant == Variant::ia3_inv && !invertible)
    throw ValidationError("strategy.invertible", "ia3_inv requires the invertible adapter");
  if (invertible && variant != Variant::madx && variant != Variant::ia3_inv)
    throw ValidationError("strategy.invertible", "only madx and ia3_inv carry an invertible adapter");
  if (uses_invertible(*this) && m.width % 2 != 0)
    throw ValidationError("strategy.invertible", "width " + std::to_string(m.width) + " is odd");
  for (int b : placement)
    if (b < 0 || b >= m.layers)
      throw ValidationError("strategy.placement", "block " + std::to_string(b) + " outside 0.." +
                                                      std::to_string(m.layers - 1));
  if (variant == Variant::lora && (lora_rank < 1 || lora_rank > m.width))
    throw ValidationError("strategy.lora_rank", "rank " + std::to_string(lora_rank) + " outside 1.." +
                                                    std::to_string(m.width));
  if (!(mask_density > 0.0 && mask_density <= 1.0))
    throw ValidationError("strategy.mask_density", "must be in (0, 1]");
  if (width_multiplier < 1) throw ValidationError("strategy.width_multiplier", "must be positive");
  if (single_layer_scaled) {
    if (*single_layer_scaled < 0 || *single_layer_scaled >= m.layers)
      throw ValidationError("strategy.single_layer_scaled", "block index out of range");
    if (variant == Variant::madx && bottleneck_width(m) > kMaxBottleneckWidthFactor * m.width)
      throw ValidationError("strategy.single_layer_scaled",
                            "scaled bottleneck width " + std::to_string(bottleneck_width(m)) + " exceeds cap " +
                                std::to_string(kMaxBottleneckWidthFactor * m.width));
  }
}

std::vector<int> StrategySpec::blocks(const ModelSpec& m) const {
  std::set<int> out(placement.begin(), placement.end());
  if (placement.empty())
    for (int i = 0; i < m.layers; ++i) out.insert(i);
  return {out.begin(), out.end()};
}

int StrategySpec::bottleneck_width(const ModelSpec& m) const { return m.width / reduction * width_multiplier; }

nlohmann::json to_json(const StrategySpec& s) {
  nlohmann::json j = {{"variant", to_string(s.variant)},   {"reduction", s.reduction},
                      {"invertible", s.invertible},        {"placement", s.placement},
                      {"lora_rank", s.lora_rank},          {"mask_density", s.mask_density},
                      {"width_multiplier", s.width_multiplier}};
  j["single_layer_scaled"] = s.single_layer_scaled ? nlohmann::json(*s.single_layer_scaled) : nlohmann::json();
  return j;
}

StrategySpec strategy_spec_from_json(const nlohmann::json& j) {
  StrategySpec s;
  s.variant = variant_from_string(j.at("variant").get<std::string>());
  s.reduction = j.at("reduction").get<int>();
  s.invertible = j.at("invertible").get<bool>();
  s.placement = j.at("placement").get<std::vector<int>>();
  s.lora_rank = j.at("lora_rank").get<int>();
  s.mask_density = j.at("mask_density").get<double>();
  s.width_multiplier = j.at("width_multiplier").get<int>();
  if (!j.at("single_layer_scaled").is_null()) s.single_layer_scaled = j.at("single_layer_scaled").get<int>();
  return s;
}

std::map<std::string, Shape> adapter_shapes(const ModelSpec& m, const StrategySpec& s) {
  const auto d = static_cast<std::size_t>(m.width);
  const auto f = static_cast<std::size_t>(m.ffn_width);
  std::map<std::string, Shape> out;
  for (int i : s.blocks(m)) {
    switch (s.variant) {
      case Variant::madx: {
        const auto w = static_cast<std::size_t>(s.bottleneck_width(m));
        out[adapter_block(i, "bottleneck", "down_weight")] = {d, w};
        out[adapter_block(i, "bottleneck", "down_bias")] = {w};
        out[adapter_block(i, "bottleneck", "up_weight")] = {w, d};
        out[adapter_block(i, "bottleneck", "up_bias")] = {d};
        break;
      }
      case Variant::ia3:
      case Variant::ia3_inv:
        out[adapter_block(i, "ia3", "l_k")] = {d};
        out[adapter_block(i, "ia3", "l_v")] = {d};
        out[adapter_block(i, "ia3", "l_ff")] = {f};
        break;
      case Variant::lora: {
        const auto r = static_cast<std::size_t>(s.lora_rank);
        out[adapter_block(i, "lora", "q_a")] = {d, r};
        out[adapter_block(i, "lora", "q_b")] = {r, d};
        out[adapter_block(i, "lora", "v_a")] = {d, r};
        out[adapter_block(i, "lora", "v_b")] = {r, d};
        break;
      }
      default:
        break;
    }
  }
  if (uses_invertible(s)) {
    const auto h = static_cast<std::size_t>(coupling_half(m));
    const auto w = static_cast<std::size_t>(coupling_width(m));
    for (const char* fn : {"f", "g"}) {
      const std::string p = kInvPrefix + fn + ".";
      out[p + "down_weight"] = {h, w};
      out[p + "down_bias"] = {w};
      out[p + "up_weight"] = {w, h};
      out[p + "up_bias"] = {h};
    }
  }
  return out;
}

std::set<std::string> default_frozen_names(const Checkpoint& ckpt) {
  std::set<std::string> out = {names::kEmbed};
  for (const auto& [name, _] : ckpt.tensors)
    if (names::is_layer_norm(name)) out.insert(name);
  return out;
}

std::size_t eligible_scalars(const ModelSpec& m) {
  const std::size_t d = m.width, L = m.layers;
  return model::param_count(m) - static_cast<std::size_t>(m.vocab) * d - 4 * d - L * 4 * d;
}

std::size_t mask_budget(const ModelSpec& m, double density) {
  const auto eligible = eligible_scalars(m);
  auto k = static_cast<std::size_t>(std::llround(density * static_cast<double>(eligible)));
  return std::clamp<std::size_t>(k, 1, eligible);
}

StrategyState attach(Checkpoint& ckpt, const StrategySpec& spec, std::uint64_t seed) {
  spec.validate(ckpt.spec);
  for (const auto& [name, _] : ckpt.tensors)
    if (name.starts_with("adapter."))
      throw std::invalid_argument("attach: checkpoint already carries adapter tensor " + name);

  StrategyState state;
  state.spec = spec;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (const auto& [name, shape] : adapter_shapes(ckpt.spec, spec)) {
    Tensor t = Tensor::zeros(shape);
    auto data = t.mutable_data();
    if (is_random_adapter(name))
      for (auto& v : data) v = normal(rng);
    else if (is_ones_adapter(name))
      std::fill(data.begin(), data.end(), 1.0);
    ckpt.tensors.emplace(name, std::move(t));
    state.trainable.push_back(name);
  }

  switch (spec.variant) {
    case Variant::continued:
      state.frozen_base = false;
      for (const auto& [name, _] : ckpt.tensors) state.trainable.push_back(name);
      break;
    case Variant::bitfit:
      state.frozen_base = false;
      for (const auto& [name, _] : ckpt.tensors)
        if (names::is_bias(name)) state.trainable.push_back(name);
      break;
    case Variant::csft:
    case Variant::fishmask: {
      state.frozen_base = false;
      const auto frozen = default_frozen_names(ckpt);
      for (const auto& [name, _] : ckpt.tensors)
        if (!frozen.contains(name)) state.trainable.push_back(name);
      break;
    }
    default:
      break;
  }
  ckpt.metadata["strategy"] = to_json(spec);
  return state;
}

void detach(Checkpoint& ckpt) {
  std::erase_if(ckpt.tensors, [](const auto& kv) { return kv.first.starts_with("adapter."); });
  ckpt.metadata.erase("strategy");
}

std::size_t closed_form_trainable(const ModelSpec& m, const StrategySpec& s) {
  const std::size_t d = m.width, f = m.ffn_width, L = m.layers;
  const std::size_t P = s.blocks(m).size();
  std::size_t inv = 0;
  if (uses_invertible(s)) {
    const std::size_t h = coupling_half(m), w = coupling_width(m);
    inv = 2 * (2 * h * w + w + h);
  }
  switch (s.variant) {
    case Variant::continued:
      return model::param_count(m);
    case Variant::madx: {
      const std::size_t w = s.bottleneck_width(m);
      return P * (2 * d * w + w + d) + inv;
    }
    case Variant::ia3:
    case Variant::ia3_inv:
      return P * (2 * d + f) + inv;
    case Variant::lora:
      return P * 4 * d * static_cast<std::size_t>(s.lora_rank);
    case Variant::bitfit:
      // embed/final norm biases, then per block q,k,v,o, two norms, down (d each) and up (f).
      return 2 * d + L * (7 * d + f);
    case Variant::csft:
    case Variant::fishmask:
      return mask_budget(m, s.mask_density);
  }
  return 0;
}

std::size_t count_trainable(const Checkpoint& ckpt, const StrategyState& state) {
  if (!state.mask.empty()) return mask_popcount(state.mask);
  std::size_t n = 0;
  for (const auto& name : state.trainable) n += ckpt.at(name).numel();
  return n;
}

Tensor bottleneck_forward(const Tensor& x, const Tensor& down, const Tensor& down_bias, const Tensor& up,
                          const Tensor& up_bias) {
  if (x.dim() != 2 || down.dim() != 2 || up.dim() != 2 || down.rows() != x.cols() || up.rows() != down.cols() ||
      up.cols() != x.cols() || down_bias.numel() != down.cols() || up_bias.numel() != up.cols())
    throw ShapeError("bottleneck_forward: x " + shape_str(x.shape()) + ", down " + shape_str(down.shape()) +
                     ", up " + shape_str(up.shape()) + " do not conform");
  return add(x, mlp(x, down, down_bias, up, up_bias));
}

CouplingParams CouplingParams::from(const Checkpoint& ckpt) {
  auto t = [&](const char* n) { return ckpt.at(kInvPrefix + n); };
  return {t("f.down_weight"), t("f.down_bias"), t("f.up_weight"), t("f.up_bias"),
          t("g.down_weight"), t("g.down_bias"), t("g.up_weight"), t("g.up_bias")};
}

Tensor invertible_forward(const Tensor& e, const CouplingParams& p) {
  if (e.dim() != 2 || e.cols() % 2 != 0)
    throw ShapeError("invertible_forward: needs an even width, got " + shape_str(e.shape()));
  auto halves = split_last_dim(e, 2);
  Tensor y1 = add(halves[0], mlp(halves[1], p.f_down, p.f_down_bias, p.f_up, p.f_up_bias));
  Tensor y2 = add(halves[1], mlp(y1, p.g_down, p.g_down_bias, p.g_up, p.g_up_bias));
  return concat_last_dim({y1, y2});
}

Tensor invertible_inverse(const Tensor& y, const CouplingParams& p) {
  if (y.dim() != 2 || y.cols() % 2 != 0)
    throw ShapeError("invertible_inverse: needs an even width, got " + shape_str(y.shape()));
  auto halves = split_last_dim(y, 2);
  Tensor e2 = sub(halves[1], mlp(halves[0], p.g_down, p.g_down_bias, p.g_up, p.g_up_bias));
  Tensor e1 = sub(halves[0], mlp(e2, p.f_down, p.f_down_bias, p.f_up, p.f_up_bias));
  return concat_last_dim({e1, e2});
}

// ---------------------------------------------------------------------------

AdapterHooks::AdapterHooks(const Checkpoint& ckpt) : blocks_(static_cast<std::size_t>(ckpt.spec.layers)) {
  auto find = [&](const std::string& name) -> const Tensor* {
    auto it = ckpt.tensors.find(name);
    return it == ckpt.tensors.end() ? nullptr : &it->second;
  };
  for (int i = 0; i < ckpt.spec.layers; ++i) {
    Block& b = blocks_[i];
    b.down = find(adapter_block(i, "bottleneck", "down_weight"));
    b.down_bias = find(adapter_block(i, "bottleneck", "down_bias"));
    b.up = find(adapter_block(i, "bottleneck", "up_weight"));
    b.up_bias = find(adapter_block(i, "bottleneck", "up_bias"));
    b.l_k = find(adapter_block(i, "ia3", "l_k"));
    b.l_v = find(adapter_block(i, "ia3", "l_v"));
    b.l_ff = find(adapter_block(i, "ia3", "l_ff"));
    b.q_a = find(adapter_block(i, "lora", "q_a"));
    b.q_b = find(adapter_block(i, "lora", "q_b"));
    b.v_a = find(adapter_block(i, "lora", "v_a"));
    b.v_b = find(adapter_block(i, "lora", "v_b"));
    // alpha = rank, so the alpha/rank scaling is 1.
    b.lora_scale = 1.0;
    if (b.down && !(b.down_bias && b.up && b.up_bias))
      throw std::runtime_error("adapter: incomplete bottleneck in block " + std::to_string(i));
  }
  if (ckpt.tensors.contains(kInvPrefix + "f.down_weight")) coupling_ = CouplingParams::from(ckpt);
}

bool AdapterHooks::empty() const {
  if (coupling_) return false;
  return std::all_of(blocks_.begin(), blocks_.end(), [](const Block& b) {
    return !b.down && !b.l_k && !b.l_v && !b.l_ff && !b.q_a && !b.v_a;
  });
}

Tensor AdapterHooks::after_embedding(const Tensor& h) const {
  return coupling_ ? invertible_forward(h, *coupling_) : h;
}

Tensor AdapterHooks::before_output(const Tensor& h) const {
  return coupling_ ? invertible_inverse(h, *coupling_) : h;
}

Tensor AdapterHooks::query(int block, const Tensor& normed, const Tensor& q) const {
  const Block& b = blocks_[block];
  if (!b.q_a) return q;
  return add(q, scale(matmul(matmul(normed, *b.q_a), *b.q_b), b.lora_scale));
}

Tensor AdapterHooks::key(int block, const Tensor& /*normed*/, const Tensor& k) const {
  const Block& b = blocks_[block];
  return b.l_k ? mul(k, *b.l_k) : k;
}

Tensor AdapterHooks::value(int block, const Tensor& normed, const Tensor& v) const {
  const Block& b = blocks_[block];
  Tensor out = v;
  if (b.v_a) out = add(out, scale(matmul(matmul(normed, *b.v_a), *b.v_b), b.lora_scale));
  if (b.l_v) out = mul(out, *b.l_v);
  return out;
}

Tensor AdapterHooks::ffn_hidden(int block, const Tensor& h) const {
  const Block& b = blocks_[block];
  return b.l_ff ? mul(h, *b.l_ff) : h;
}

Tensor AdapterHooks::ffn_output(int block, const Tensor& y) const {
  const Block& b = blocks_[block];
  return b.down ? bottleneck_forward(y, *b.down, *b.down_bias, *b.up, *b.up_bias) : y;
}

model::ForwardResult adapted_forward(const Checkpoint& ckpt, std::span<const int> tokens) {
  AdapterHooks hooks(ckpt);
  return model::forward(ckpt, &hooks, tokens);
}

// ---------------------------------------------------------------------------

MergeResult ia3_merge(const Checkpoint& adapted) {
  if (!adapted.metadata.contains("strategy"))
    throw std::invalid_argument("ia3_merge: checkpoint has no attached strategy");
  const auto spec = strategy_spec_from_json(adapted.metadata.at("strategy"));
  if (spec.variant != Variant::ia3 && spec.variant != Variant::ia3_inv)
    throw std::invalid_argument("ia3_merge: strategy is " + to_string(spec.variant) + ", not ia3/ia3_inv");

  MergeResult out;
  out.merged.format_version = adapted.format_version;
  out.merged.spec = adapted.spec;
  out.merged.metadata = adapted.metadata;
  out.merged.metadata.erase("strategy");
  out.merged.metadata["merged_from"] = to_json(spec);
  for (const auto& [name, t] : adapted.tensors) {
    if (name.starts_with(kInvPrefix))
      out.invertible.emplace(name, t.clone());
    else if (!name.starts_with("adapter."))
      out.merged.tensors.emplace(name, t.clone());
  }

  const auto d = static_cast<std::size_t>(adapted.spec.width);
  auto scale_columns = [d](Tensor& w, Tensor& b, const Tensor& l) {
    auto wd = w.mutable_data();
    auto bd = b.mutable_data();
    auto ld = l.data();
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d; ++c) wd[r * d + c] *= ld[c];
    for (std::size_t c = 0; c < d; ++c) bd[c] *= ld[c];
  };
  for (int i : spec.blocks(adapted.spec)) {
    auto& T = out.merged.tensors;
    scale_columns(T.at(names::block(i, "attn", "k_weight")), T.at(names::block(i, "attn", "k_bias")),
                  adapted.at(adapter_block(i, "ia3", "l_k")));
    scale_columns(T.at(names::block(i, "attn", "v_weight")), T.at(names::block(i, "attn", "v_bias")),
                  adapted.at(adapter_block(i, "ia3", "l_v")));
    // gelu(...) * l_ff feeds down_weight, so l_ff scales its input rows.
    auto down = T.at(names::block(i, "ffn", "down_weight")).mutable_data();
    auto lff = adapted.at(adapter_block(i, "ia3", "l_ff")).data();
    for (std::size_t r = 0; r < lff.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) down[r * d + c] *= lff[r];
  }
  return out;
}

namespace {

struct Candidate {
  double score;
  std::size_t order;  // position in canonical (sorted name, row-major) order
};

Mask top_k(const std::map<std::string, std::vector<double>>& scores, std::size_t k) {
  std::vector<Candidate> all;
  std::vector<std::pair<const std::string*, std::size_t>> where;
  for (const auto& [name, s] : scores)
    for (std::size_t i = 0; i < s.size(); ++i) {
      all.push_back({s[i], all.size()});
      where.emplace_back(&name, i);
    }
  if (k == 0) throw std::invalid_argument("mask selection: k must be positive");
  if (k > all.size())
    throw std::invalid_argument("mask selection: k=" + std::to_string(k) + " exceeds " + std::to_string(all.size()) +
                                " eligible scalars");
  auto better = [](const Candidate& a, const Candidate& b) {
    return a.score != b.score ? a.score > b.score : a.order < b.order;
  };
  std::nth_element(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k - 1), all.end(), better);
  Mask mask;
  for (const auto& [name, s] : scores) mask[name].assign(s.size(), false);
  for (std::size_t i = 0; i < k; ++i) {
    const auto& [name, idx] = where[all[i].order];
    mask[*name][idx] = true;
  }
  return mask;
}

}  // namespace

Mask csft_select_mask(const Checkpoint& base, const Checkpoint& stage1, std::size_t k,
                      const std::set<std::string>& frozen_names) {
  if (!(base.spec == stage1.spec)) throw std::invalid_argument("csft_select_mask: checkpoints have different specs");
  std::map<std::string, std::vector<double>> scores;
  for (const auto& [name, t] : base.tensors) {
    if (frozen_names.contains(name) || name.starts_with("adapter.")) continue;
    auto a = t.data();
    auto b = stage1.at(name).data();
    auto& s = scores[name];
    s.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) s[i] = std::abs(b[i] - a[i]);
  }
  return top_k(scores, k);
}

Mask fishmask_select(Checkpoint& ckpt, const std::function<Tensor(int)>& batch_loss, int batches, std::size_t k,
                     const std::set<std::string>& frozen_names) {
  if (batches < 1) throw std::invalid_argument("fishmask_select: empty data stream");
  std::vector<std::string> eligible;
  std::vector<bool> had_grad;
  for (auto& [name, t] : ckpt.tensors) {
    if (frozen_names.contains(name) || name.starts_with("adapter.")) continue;
    eligible.push_back(name);
    had_grad.push_back(t.requires_grad());
    t.set_requires_grad(true);
  }
  std::map<std::string, std::vector<double>> fisher;
  for (const auto& name : eligible) fisher[name].assign(ckpt.at(name).numel(), 0.0);
  for (int b = 0; b < batches; ++b) {
    for (const auto& name : eligible) ckpt.tensors.at(name).zero_grad();
    Tape tape;
    {
      TapeScope scope(tape);
      Tensor loss = batch_loss(b);
      tape.backward(loss);
    }
    for (const auto& name : eligible) {
      auto g = ckpt.at(name).grad();
      auto& f = fisher[name];
      for (std::size_t i = 0; i < g.size(); ++i) f[i] += g[i] * g[i] / batches;
    }
  }
  for (std::size_t i = 0; i < eligible.size(); ++i) {
    auto& t = ckpt.tensors.at(eligible[i]);
    t.zero_grad();
    t.set_requires_grad(had_grad[i]);
  }
  return top_k(fisher, k);
}

std::size_t mask_popcount(const Mask& mask) {
  std::size_t n = 0;
  for (const auto& [_, bits] : mask) n += static_cast<std::size_t>(std::count(bits.begin(), bits.end(), true));
  return n;
}

StrategySpec single_layer_scaled(const StrategySpec& base, int layer, const ModelSpec& m) {
  StrategySpec out = base;
  out.placement = {layer};
  out.single_layer_scaled = layer;
  out.width_multiplier = base.width_multiplier * m.layers;
  out.validate(m);
  return out;
}

// ---------------------------------------------------------------------------

Checkpoint adapter_bundle(const Checkpoint& adapted) {
  if (!adapted.metadata.contains("strategy"))
    throw std::invalid_argument("adapter_bundle: checkpoint has no attached strategy");
  Checkpoint out;
  out.spec = adapted.spec;
  out.metadata = {{"strategy", adapted.metadata.at("strategy")}, {"bundle", true}};
  for (const auto& [name, t] : adapted.tensors)
    if (name.starts_with("adapter.")) out.tensors.emplace(name, t);
  return out;
}

void save_adapter_bundle(const Checkpoint& adapted, const std::filesystem::path& path) {
  model::save_checkpoint(adapter_bundle(adapted), path);
}

Checkpoint load_adapter_bundle(const std::filesystem::path& path) {
  auto ckpt = model::load_checkpoint(path);
  if (!ckpt.metadata.contains("strategy")) throw std::runtime_error("adapter bundle without strategy: " + path.string());
  for (const auto& [name, _] : ckpt.tensors)
    if (!name.starts_with("adapter.")) throw std::runtime_error("adapter bundle holds base tensor " + name);
  return ckpt;
}

Checkpoint transplant(const Checkpoint& donor, const Checkpoint& target) {
  const auto dj = model::to_json(donor.spec);
  const auto tj = model::to_json(target.spec);
  for (const auto& [key, value] : dj.items())
    if (key != "seed" && tj.at(key) != value)
      throw ValidationError("model." + key, "donor has " + value.dump() + ", target has " + tj.at(key).dump());
  if (!donor.metadata.contains("strategy")) throw std::invalid_argument("transplant: donor has no strategy");
  const auto& strategy = donor.metadata.at("strategy");
  if (target.metadata.contains("strategy")) {
    const auto& other = target.metadata.at("strategy");
    for (const auto& [key, value] : strategy.items())
      if (!other.contains(key) || other.at(key) != value)
        throw ValidationError("strategy." + key, "donor and target strategies differ");
  }
  Checkpoint out;
  out.format_version = target.format_version;
  out.spec = target.spec;
  out.metadata = target.metadata;
  out.metadata["strategy"] = strategy;
  for (const auto& [name, t] : target.tensors)
    if (!name.starts_with("adapter.")) out.tensors.emplace(name, t);
  for (const auto& [name, t] : donor.tensors)
    if (name.starts_with("adapter.")) out.tensors.emplace(name, t.clone());
  return out;
}

}  // namespace adaptkit::peft
