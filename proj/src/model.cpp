// SPDX-License-Identifier: Apache-2.0

#include "adaptkit/model.hpp"

#include <bit>
#include <cmath>
#include <limits>
#include <random>
#include <regex>

#include "adaptkit/errors.hpp"

namespace adaptkit::model {

using namespace ad;

void ModelSpec::validate() const {
  auto positive = [](const char* field, long long v) {
    if (v <= 0) throw ValidationError(std::string("model.") + field, "must be positive, got " + std::to_string(v));
  };
  // A zero-block model is allowed (embedding + norms only).
  if (layers < 0) throw ValidationError("model.layers", "must be non-negative, got " + std::to_string(layers));
  positive("width", width);
  positive("heads", heads);
  positive("ffn_width", ffn_width);
  positive("vocab", vocab);
  positive("max_seq", max_seq);
  if (width % heads != 0)
    throw ValidationError("model.heads", "width " + std::to_string(width) + " is not divisible by " +
                                             std::to_string(heads) + " heads");
}

nlohmann::json to_json(const ModelSpec& s) {
  return {{"layers", s.layers},       {"width", s.width}, {"heads", s.heads},     {"ffn_width", s.ffn_width},
          {"vocab", s.vocab},         {"max_seq", s.max_seq}, {"seed", s.seed}};
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.layers = j.at("layers").get<int>();
  s.width = j.at("width").get<int>();
  s.heads = j.at("heads").get<int>();
  s.ffn_width = j.at("ffn_width").get<int>();
  s.vocab = j.at("vocab").get<int>();
  s.max_seq = j.at("max_seq").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

const Tensor& Checkpoint::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("checkpoint has no tensor " + name);
  return it->second;
}

Checkpoint Checkpoint::deep_copy() const {
  Checkpoint out;
  out.format_version = format_version;
  out.spec = spec;
  out.metadata = metadata;
  for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.clone());
  return out;
}

std::size_t Checkpoint::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors) n += t.numel();
  return n;
}

namespace names {

std::string block(int i, const std::string& sublayer, const std::string& param) {
  return "block." + std::to_string(i) + "." + sublayer + "." + param;
}

bool is_canonical(const std::string& name) {
  static const std::regex re(R"((block\.\d+\.[a-z_]+\.[a-z_0-9]+)|(embed\.[a-z_.]+)|(adapter\.[A-Za-z0-9_.]+))");
  return std::regex_match(name, re);
}

bool is_layer_norm(const std::string& name) {
  return name.starts_with("embed.norm.") || name.starts_with("embed.final_norm.") ||
         name.find(".attn_norm.") != std::string::npos || name.find(".ffn_norm.") != std::string::npos;
}

bool is_bias(const std::string& name) { return name.ends_with("bias"); }

}  // namespace names

namespace {

struct ParamDecl {
  std::string name;
  Shape shape;
  enum Kind { kWeight, kResidualOut, kZero, kOne } kind;
};

std::vector<ParamDecl> declare(const ModelSpec& s) {
  const auto d = static_cast<std::size_t>(s.width);
  const auto f = static_cast<std::size_t>(s.ffn_width);
  std::vector<ParamDecl> out = {
      {names::kEmbed, {static_cast<std::size_t>(s.vocab), d}, ParamDecl::kWeight},
      {names::kEmbedNormGain, {d}, ParamDecl::kOne},
      {names::kEmbedNormBias, {d}, ParamDecl::kZero},
      {names::kFinalNormGain, {d}, ParamDecl::kOne},
      {names::kFinalNormBias, {d}, ParamDecl::kZero},
  };
  for (int i = 0; i < s.layers; ++i) {
    auto b = [i](const char* sub, const char* p) { return names::block(i, sub, p); };
    out.push_back({b("attn_norm", "gain"), {d}, ParamDecl::kOne});
    out.push_back({b("attn_norm", "bias"), {d}, ParamDecl::kZero});
    for (const char* p : {"q", "k", "v"}) {
      out.push_back({b("attn", (std::string(p) + "_weight").c_str()), {d, d}, ParamDecl::kWeight});
      out.push_back({b("attn", (std::string(p) + "_bias").c_str()), {d}, ParamDecl::kZero});
    }
    out.push_back({b("attn", "o_weight"), {d, d}, ParamDecl::kResidualOut});
    out.push_back({b("attn", "o_bias"), {d}, ParamDecl::kZero});
    out.push_back({b("ffn_norm", "gain"), {d}, ParamDecl::kOne});
    out.push_back({b("ffn_norm", "bias"), {d}, ParamDecl::kZero});
    out.push_back({b("ffn", "up_weight"), {d, f}, ParamDecl::kWeight});
    out.push_back({b("ffn", "up_bias"), {f}, ParamDecl::kZero});
    out.push_back({b("ffn", "down_weight"), {f, d}, ParamDecl::kResidualOut});
    out.push_back({b("ffn", "down_bias"), {d}, ParamDecl::kZero});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  return out;
}

}  // namespace

Checkpoint init_model(const ModelSpec& spec) {
  spec.validate();
  Checkpoint ckpt;
  ckpt.spec = spec;
  std::mt19937_64 rng(spec.seed);
  const double std_w = 0.02;
  const double std_out = spec.layers > 0 ? 0.02 / std::sqrt(2.0 * spec.layers) : 0.02;
  for (const auto& p : declare(spec)) {
    Tensor t = Tensor::zeros(p.shape);
    auto data = t.mutable_data();
    switch (p.kind) {
      case ParamDecl::kWeight:
      case ParamDecl::kResidualOut: {
        std::normal_distribution<double> dist(0.0, p.kind == ParamDecl::kWeight ? std_w : std_out);
        for (auto& v : data) v = dist(rng);
        break;
      }
      case ParamDecl::kOne:
        std::fill(data.begin(), data.end(), 1.0);
        break;
      case ParamDecl::kZero:
        break;
    }
    ckpt.tensors.emplace(p.name, std::move(t));
  }
  return ckpt;
}

std::size_t param_count(const ModelSpec& s) {
  const std::size_t V = s.vocab, d = s.width, f = s.ffn_width, L = s.layers;
  const std::size_t block = 4 * d * d + 4 * d + 2 * d * f + d + f + 4 * d;
  return V * d + 2 * d + L * block + 2 * d;
}

namespace {

std::vector<double> pow2_slopes(int n) {
  std::vector<double> out(n);
  for (int h = 0; h < n; ++h) out[h] = std::exp2(-8.0 * (h + 1) / n);
  return out;
}

}  // namespace

std::vector<double> alibi_slopes(int heads) {
  if (heads <= 0) throw std::invalid_argument("alibi_slopes: heads must be positive");
  if (std::has_single_bit(static_cast<unsigned>(heads))) return pow2_slopes(heads);
  // Interleaved fallback: slopes of the largest power of two below, then every
  // other slope of twice that count.
  const int m = static_cast<int>(std::bit_floor(static_cast<unsigned>(heads)));
  auto out = pow2_slopes(m);
  auto extra = pow2_slopes(2 * m);
  for (int i = 0; static_cast<int>(out.size()) < heads; i += 2) out.push_back(extra[i]);
  return out;
}

Tensor alibi_biases(int heads, int length) {
  const auto slopes = alibi_slopes(heads);
  const auto T = static_cast<std::size_t>(length);
  Tensor out = Tensor::zeros({static_cast<std::size_t>(heads), T, T});
  auto data = out.mutable_data();
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (int h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < T; ++j)
        data[(h * T + i) * T + j] = j <= i ? -slopes[h] * static_cast<double>(i - j) : neg_inf;
  return out;
}

// ---------------------------------------------------------------------------

Forwarder::Forwarder(const Checkpoint& ckpt, const ForwardHooks* hooks) : ckpt_(ckpt), hooks_(hooks) {
  ckpt.spec.validate();
  // Recorded on the active tape (if any), so gradients from every run() reach the embedding.
  embed_t_ = transpose(ckpt.at(names::kEmbed));
}

const Tensor& Forwarder::alibi_head(int head, int length) const {
  auto key = std::make_pair(head, length);
  auto it = alibi_cache_.find(key);
  if (it != alibi_cache_.end()) return it->second;
  const double slope = alibi_slopes(ckpt_.spec.heads)[head];
  const auto T = static_cast<std::size_t>(length);
  Tensor t = Tensor::zeros({T, T});
  auto data = t.mutable_data();
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < T; ++j) data[i * T + j] = j <= i ? -slope * static_cast<double>(i - j) : neg_inf;
  return alibi_cache_.emplace(key, std::move(t)).first->second;
}

ForwardResult Forwarder::run(std::span<const int> tokens) const {
  const ModelSpec& s = ckpt_.spec;
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(s.max_seq))
    throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq " +
                                std::to_string(s.max_seq));
  for (std::size_t t = 0; t < tokens.size(); ++t)
    if (tokens[t] < 0 || tokens[t] >= s.vocab)
      throw std::out_of_range("forward: token id " + std::to_string(tokens[t]) + " at position " +
                              std::to_string(t) + " outside vocabulary of " + std::to_string(s.vocab));

  static const ForwardHooks kIdentity;
  const ForwardHooks& hk = hooks_ ? *hooks_ : kIdentity;
  const int T = static_cast<int>(tokens.size());
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(s.head_dim()));

  ForwardResult result;
  Tensor h = gather_rows(ckpt_.at(names::kEmbed), tokens);
  h = layer_norm(h, ckpt_.at(names::kEmbedNormGain), ckpt_.at(names::kEmbedNormBias));
  h = hk.after_embedding(h);
  result.hidden.layers.push_back(h);

  for (int i = 0; i < s.layers; ++i) {
    auto p = [&](const char* sub, const char* param) -> const Tensor& {
      return ckpt_.at(names::block(i, sub, param));
    };
    Tensor x = layer_norm(h, p("attn_norm", "gain"), p("attn_norm", "bias"));
    Tensor q = hk.query(i, x, add(matmul(x, p("attn", "q_weight")), p("attn", "q_bias")));
    Tensor k = hk.key(i, x, add(matmul(x, p("attn", "k_weight")), p("attn", "k_bias")));
    Tensor v = hk.value(i, x, add(matmul(x, p("attn", "v_weight")), p("attn", "v_bias")));
    auto qs = split_last_dim(q, s.heads);
    auto ks = split_last_dim(k, s.heads);
    auto vs = split_last_dim(v, s.heads);
    std::vector<Tensor> heads;
    heads.reserve(s.heads);
    for (int head = 0; head < s.heads; ++head) {
      Tensor scores = add(scale(matmul(qs[head], transpose(ks[head])), attn_scale), alibi_head(head, T));
      heads.push_back(matmul(softmax_rows(scores), vs[head]));
    }
    Tensor attn = add(matmul(concat_last_dim(heads), p("attn", "o_weight")), p("attn", "o_bias"));
    h = add(h, attn);

    Tensor y = layer_norm(h, p("ffn_norm", "gain"), p("ffn_norm", "bias"));
    Tensor hidden = hk.ffn_hidden(i, gelu(add(matmul(y, p("ffn", "up_weight")), p("ffn", "up_bias"))));
    Tensor out = hk.ffn_output(i, add(matmul(hidden, p("ffn", "down_weight")), p("ffn", "down_bias")));
    h = add(h, out);
    result.hidden.layers.push_back(h);
  }

  Tensor z = layer_norm(h, ckpt_.at(names::kFinalNormGain), ckpt_.at(names::kFinalNormBias));
  z = hk.before_output(z);
  result.logits = matmul(z, embed_t_);
  return result;
}

ForwardResult forward(const Checkpoint& ckpt, const ForwardHooks* hooks, std::span<const int> tokens) {
  return Forwarder(ckpt, hooks).run(tokens);
}

}  // namespace adaptkit::model
