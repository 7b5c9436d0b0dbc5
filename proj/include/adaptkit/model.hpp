// SPDX-License-Identifier: Apache-2.0
//
// BLOOM-style decoder: token embedding, layer norm right after the
// embedding, pre-norm blocks of causal ALiBi attention and a GELU
// feed-forward, final norm, and an output projection tied to the embedding.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "adaptkit/tensor.hpp"
#include "json.hpp"

namespace adaptkit::model {

using ad::Tensor;

struct ModelSpec {
  int layers = 2;
  int width = 64;
  int heads = 4;
  int ffn_width = 256;
  int vocab = 512;
  int max_seq = 256;
  std::uint64_t seed = 0;

  int head_dim() const { return width / heads; }
  // Throws ValidationError with a `model.<field>` path.
  void validate() const;
  bool operator==(const ModelSpec&) const = default;
};

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

inline constexpr const char* kCheckpointFormat = "ckpt-v1";

// Parameters by canonical name: `embed.*`, `block.<i>.<sublayer>.<param>`,
// `adapter.*`. Copying a Checkpoint aliases its tensors; use deep_copy().
struct Checkpoint {
  std::string format_version = kCheckpointFormat;
  ModelSpec spec;
  std::map<std::string, Tensor> tensors;
  nlohmann::json metadata = nlohmann::json::object();

  const Tensor& at(const std::string& name) const;
  Checkpoint deep_copy() const;
  std::size_t scalar_count() const;
};

namespace names {
std::string block(int i, const std::string& sublayer, const std::string& param);
inline constexpr const char* kEmbed = "embed.tokens";
inline constexpr const char* kEmbedNormGain = "embed.norm.gain";
inline constexpr const char* kEmbedNormBias = "embed.norm.bias";
inline constexpr const char* kFinalNormGain = "embed.final_norm.gain";
inline constexpr const char* kFinalNormBias = "embed.final_norm.bias";
bool is_canonical(const std::string& name);
bool is_layer_norm(const std::string& name);
bool is_bias(const std::string& name);
}  // namespace names

Checkpoint init_model(const ModelSpec& spec);

// V*d + 2d + L*(4d^2 + 4d + 2*d*ffn + d + ffn + 4d) + 2d
std::size_t param_count(const ModelSpec& spec);

std::vector<double> alibi_slopes(int heads);
// [heads x T x T]; causal entries -slope*(i-j), future entries -inf.
Tensor alibi_biases(int heads, int length);

// Hook points a strategy uses to modify the forward pass. The defaults are
// the identity, so a null hook pointer and a default ForwardHooks agree.
class ForwardHooks {
 public:
  virtual ~ForwardHooks() = default;
  virtual Tensor after_embedding(const Tensor& h) const { return h; }
  virtual Tensor before_output(const Tensor& h) const { return h; }
  virtual Tensor query(int /*block*/, const Tensor& /*normed*/, const Tensor& q) const { return q; }
  virtual Tensor key(int /*block*/, const Tensor& /*normed*/, const Tensor& k) const { return k; }
  virtual Tensor value(int /*block*/, const Tensor& /*normed*/, const Tensor& v) const { return v; }
  virtual Tensor ffn_hidden(int /*block*/, const Tensor& h) const { return h; }
  virtual Tensor ffn_output(int /*block*/, const Tensor& y) const { return y; }
};

struct HiddenStates {
  // layers[0] is the post-embedding-norm input to block 0; layers[i] the output of block i-1.
  std::vector<Tensor> layers;
};

struct ForwardResult {
  Tensor logits;  // [T x V]
  HiddenStates hidden;
};

// Reuses the transposed embedding and ALiBi tables across the sequences of a batch.
class Forwarder {
 public:
  Forwarder(const Checkpoint& ckpt, const ForwardHooks* hooks = nullptr);
  ForwardResult run(std::span<const int> tokens) const;

 private:
  const Tensor& alibi_head(int head, int length) const;

  const Checkpoint& ckpt_;
  const ForwardHooks* hooks_;
  Tensor embed_t_;
  mutable std::map<std::pair<int, int>, Tensor> alibi_cache_;
};

ForwardResult forward(const Checkpoint& ckpt, const ForwardHooks* hooks, std::span<const int> tokens);

// Container format shared by checkpoints and adapter bundles: `ckpt-v1`
// header, one line of canonical JSON metadata, then named tensors in sorted
// order as `name f64 ndim dims...` followed by little-endian float64 bytes.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Order-sensitive digest of every tensor's bytes (frozen-base comparisons).
std::string tensor_checksum(const Checkpoint& ckpt, bool include_adapters = false);

}  // namespace adaptkit::model
