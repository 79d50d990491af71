#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "fulora/checkpoint.hpp"
#include "fulora/nn.hpp"
#include "fulora/param.hpp"
#include "fulora/tensor.hpp"

namespace fulora {

struct UNetConfig {
  int in_channels = 1;
  int base_channels = 32;
  std::vector<int> channel_mults{1, 2};
  std::set<int> attention_levels{1};
  int context_dim = 64;
  int num_heads = 2;
  int image_size = 16;

  /// Throws ConfigError when an invariant is violated.
  void validate() const;
  int levels() const { return static_cast<int>(channel_mults.size()); }
  int time_dim() const { return 4 * base_channels; }
};

/// Lowercase + whitespace tokenizer over a fixed vocabulary. Id 0 is the
/// null token; unknown words map to it.
class PromptVocabulary {
 public:
  static constexpr std::int64_t kNull = 0;
  static constexpr const char* kNullToken = "<null>";

  PromptVocabulary();
  /// Ids assigned in first-appearance order over the given prompts.
  static PromptVocabulary from_prompts(const std::vector<std::string>& prompts);
  static PromptVocabulary from_tokens(const std::vector<std::string>& tokens);

  /// Never empty: the empty prompt tokenizes to {kNull}.
  std::vector<std::int64_t> tokenize(const std::string& text) const;
  std::int64_t id(const std::string& token) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int64_t> ids_;
};

/// Rows of the embedding table for each token of text: (seq_len, context_dim).
Tensor encode_prompt(const std::string& text, const PromptVocabulary& vocab, const Tensor& table);

/// Sinusoidal embedding: [sin(t f_0) .. sin(t f_{h-1}), cos(t f_0) .. cos(t f_{h-1})]
/// with f_i = 10000^(-i/h), h = dim/2. t may be fractional.
std::vector<float> time_embed(double t, int dim);

/// Routes x through a named projection weight (d_out, d_in). The default is a
/// plain bias-free linear map; LoRA replaces it.
using ProjectionFn = std::function<Tensor(const std::string& weight_name, const Tensor& x, const Tensor& weight)>;

struct CrossAttentionParams {
  std::string prefix;  // names are prefix + ".wq" etc.
  const Param* wq = nullptr;
  const Param* wk = nullptr;
  const Param* wv = nullptr;
  const Param* wout = nullptr;
};

/// Multi-head cross-attention of x_tokens (B, N, C) over ctx (B, L, D) or
/// (L, D). Returns (B, N, C); when weights is non-null it receives the
/// attention probabilities (B, heads, N, L).
Tensor cross_attention(const Tensor& x_tokens, const Tensor& ctx, const CrossAttentionParams& p, int num_heads,
                       const ProjectionFn& project = {}, Tensor* weights = nullptr);

/// eps-prediction interface used by samplers. t is one (possibly fractional)
/// step per batch element.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual Tensor predict(const Tensor& xt, std::span<const double> t) const = 0;
};

/// Small conditional U-Net: residual blocks with GroupNorm/SiLU, timestep
/// embedding added per block, cross-attention at the configured levels and in
/// the middle block, skip concatenation on the way up.
class UNet {
 public:
  UNet(UNetConfig cfg, PromptVocabulary vocab, std::uint64_t seed);
  UNet(UNet&&) noexcept;
  UNet& operator=(UNet&&) noexcept;
  ~UNet();

  const UNetConfig& config() const { return cfg_; }
  const PromptVocabulary& vocab() const { return vocab_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const Tensor& prompt_table() const;

  /// xt (B, C, S, S), one step per sample, ctx (B, L, D) or (1, L, D) or (L, D).
  Tensor forward(const Tensor& xt, std::span<const double> t, const Tensor& ctx) const;
  Tensor forward(const Tensor& xt, std::span<const int> t, const Tensor& ctx) const;

  /// (B, L, D) batch of prompt embeddings, right-padded with the null token.
  Tensor encode(const std::vector<std::string>& prompts) const;

  /// Names of every cross-attention projection weight, in a fixed order.
  std::vector<std::string> cross_attention_targets() const;

  void set_projection(ProjectionFn fn) { project_ = std::move(fn); }
  void clear_projection() { project_ = {}; }
  bool has_projection() const { return static_cast<bool>(project_); }

  /// Independent deep copy (values and trainable flags; no projection hook).
  UNet clone() const;

  /// JSON for "model.json": config plus vocabulary tokens.
  std::string to_json() const;
  static UNet from_json(const std::string& json);
  void save_to(Checkpoint& ckpt) const;
  static UNet load_from(const Checkpoint& ckpt);

 private:
  struct Impl;
  UNetConfig cfg_;
  PromptVocabulary vocab_;
  ParamStore store_;
  std::unique_ptr<Impl> impl_;
  ProjectionFn project_;
};

/// Binds a U-Net to a fixed context so it can drive a sampler.
class ConditionedUNet : public NoisePredictor {
 public:
  ConditionedUNet(const UNet& net, Tensor ctx) : net_(net), ctx_(std::move(ctx)) {}
  Tensor predict(const Tensor& xt, std::span<const double> t) const override { return net_.forward(xt, t, ctx_); }

 private:
  const UNet& net_;
  Tensor ctx_;
};

}  // namespace fulora
