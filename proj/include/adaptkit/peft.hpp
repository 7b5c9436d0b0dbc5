// SPDX-License-Identifier: Apache-2.0
//
// Adaptation strategies. Every strategy's parameters live in the checkpoint
// under `adapter.*`; the forward hooks are derived from whichever adapter
// tensors are present, so an adapted model is just a Checkpoint and removing
// the `adapter.*` entries restores the base model.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "adaptkit/model.hpp"

namespace adaptkit::peft {

using ad::Tensor;
using model::Checkpoint;
using model::ModelSpec;

enum class Variant { continued, madx, ia3, ia3_inv, lora, bitfit, csft, fishmask };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);  // ValidationError on `strategy.variant`
const std::vector<Variant>& all_variants();

struct StrategySpec {
  Variant variant = Variant::madx;
  int reduction = 16;
  bool invertible = false;
  std::vector<int> placement;  // empty: every block
  int lora_rank = 4;
  double mask_density = 0.005;
  std::optional<int> single_layer_scaled;
  int width_multiplier = 1;  // set by single_layer_scaled()

  // Variant defaults: madx and ia3_inv carry the invertible adapter.
  static StrategySpec defaults_for(Variant v);
  // Throws ValidationError with a `strategy.<field>` path.
  void validate(const ModelSpec& m) const;
  std::vector<int> blocks(const ModelSpec& m) const;  // resolved placement, sorted
  int bottleneck_width(const ModelSpec& m) const;
  bool operator==(const StrategySpec&) const = default;
};

nlohmann::json to_json(const StrategySpec& s);
StrategySpec strategy_spec_from_json(const nlohmann::json& j);

// Upper bound on the scaled single-layer bottleneck, as a multiple of d.
inline constexpr int kMaxBottleneckWidthFactor = 4;
// Coupling MLPs of the invertible adapter halve their input width.
inline constexpr int kCouplingReduction = 2;

// Per-scalar selection for the mask variants, keyed by base tensor name.
using Mask = std::map<std::string, std::vector<bool>>;

struct StrategyState {
  StrategySpec spec;
  bool frozen_base = true;
  std::vector<std::string> trainable;  // tensor names updated by the optimizer
  Mask mask;                           // empty until selected (csft stage 1 trains all eligible)
};

// Adapter tensor names and shapes the strategy adds, computed from specs alone.
std::map<std::string, ad::Shape> adapter_shapes(const ModelSpec& m, const StrategySpec& s);

// Adds freshly initialised adapter tensors (identity at init) to `ckpt` and
// records the strategy in ckpt.metadata["strategy"].
StrategyState attach(Checkpoint& ckpt, const StrategySpec& spec, std::uint64_t seed);
// Removes every `adapter.*` tensor and the strategy metadata.
void detach(Checkpoint& ckpt);

// Names never trained by csft/fishmask: the tied embedding and all layer norms.
std::set<std::string> default_frozen_names(const Checkpoint& ckpt);
std::size_t eligible_scalars(const ModelSpec& m);
std::size_t mask_budget(const ModelSpec& m, double density);

// Trainable scalars from specs alone vs by enumerating an attached state.
std::size_t closed_form_trainable(const ModelSpec& m, const StrategySpec& s);
std::size_t count_trainable(const Checkpoint& ckpt, const StrategyState& state);

// x + up(gelu(x down + b_down)) + b_up
Tensor bottleneck_forward(const Tensor& x, const Tensor& down, const Tensor& down_bias, const Tensor& up,
                          const Tensor& up_bias);

struct CouplingParams {
  Tensor f_down, f_down_bias, f_up, f_up_bias;
  Tensor g_down, g_down_bias, g_up, g_up_bias;
  static CouplingParams from(const Checkpoint& ckpt);  // adapter.invertible.*
};
// y1 = e1 + F(e2); y2 = e2 + G(y1)
Tensor invertible_forward(const Tensor& e, const CouplingParams& p);
// e2 = y2 - G(y1); e1 = y1 - F(e2)
Tensor invertible_inverse(const Tensor& y, const CouplingParams& p);

// Hooks implementing every adapter present in `ckpt`. Holds references into
// the checkpoint's tensor map; the checkpoint must outlive the hooks.
class AdapterHooks : public model::ForwardHooks {
 public:
  explicit AdapterHooks(const Checkpoint& ckpt);
  bool empty() const;

  Tensor after_embedding(const Tensor& h) const override;
  Tensor before_output(const Tensor& h) const override;
  Tensor query(int block, const Tensor& normed, const Tensor& q) const override;
  Tensor key(int block, const Tensor& normed, const Tensor& k) const override;
  Tensor value(int block, const Tensor& normed, const Tensor& v) const override;
  Tensor ffn_hidden(int block, const Tensor& h) const override;
  Tensor ffn_output(int block, const Tensor& y) const override;

 private:
  struct Block {
    const Tensor* down = nullptr;
    const Tensor* down_bias = nullptr;
    const Tensor* up = nullptr;
    const Tensor* up_bias = nullptr;
    const Tensor* l_k = nullptr;
    const Tensor* l_v = nullptr;
    const Tensor* l_ff = nullptr;
    const Tensor* q_a = nullptr;
    const Tensor* q_b = nullptr;
    const Tensor* v_a = nullptr;
    const Tensor* v_b = nullptr;
    double lora_scale = 1.0;
  };
  std::vector<Block> blocks_;
  std::optional<CouplingParams> coupling_;
};

// Forward through the base plus whatever adapters the checkpoint carries.
model::ForwardResult adapted_forward(const Checkpoint& ckpt, std::span<const int> tokens);

struct MergeResult {
  Checkpoint merged;                         // base tensors with (IA)³ folded in; no adapter.* entries
  std::map<std::string, Tensor> invertible;  // adapter.invertible.* carried separately (ia3_inv)
};
MergeResult ia3_merge(const Checkpoint& adapted);

Mask csft_select_mask(const Checkpoint& base, const Checkpoint& stage1, std::size_t k,
                      const std::set<std::string>& frozen_names);

// Diagonal Fisher: mean squared gradient of `batch_loss(b)` for b in [0, batches),
// over every tensor not in `frozen_names`. `batch_loss` must build its loss
// from `ckpt`'s tensors under the active tape.
Mask fishmask_select(Checkpoint& ckpt, const std::function<Tensor(int)>& batch_loss, int batches, std::size_t k,
                     const std::set<std::string>& frozen_names);

std::size_t mask_popcount(const Mask& mask);

StrategySpec single_layer_scaled(const StrategySpec& base, int layer, const ModelSpec& m);

// Adapter bundle: checkpoint container holding only `adapter.*` tensors.
Checkpoint adapter_bundle(const Checkpoint& adapted);
void save_adapter_bundle(const Checkpoint& adapted, const std::filesystem::path& path);
Checkpoint load_adapter_bundle(const std::filesystem::path& path);

// Copies the donor's adapter tensors onto `target`'s base tensors. The donor
// may be a full adapted checkpoint or a bundle.
Checkpoint transplant(const Checkpoint& donor, const Checkpoint& target);

}  // namespace adaptkit::peft
