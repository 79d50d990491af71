#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fulora/denoiser.hpp"
#include "fulora/param.hpp"
#include "fulora/tensor.hpp"

namespace fulora {

/// Low-rank update for one base weight W0 (d_out, d_in):
/// h = W0 x + w (alpha / r) B (A x), with A (r, d_in) and B (d_out, r).
struct LoraAdapter {
  std::string target;
  int r = 0;
  float alpha = 0.0f;
  Tensor A;
  Tensor B;

  std::int64_t d_in() const { return A.size(1); }
  std::int64_t d_out() const { return B.size(0); }
  float scale() const { return alpha / static_cast<float>(r); }
};

/// A ~ N(0, 1/r) i.i.d. and B = 0. Ranks above min(d_in, d_out) are allowed
/// with a warning.
LoraAdapter lora_init(std::int64_t d_in, std::int64_t d_out, int r, float alpha, std::uint64_t seed);

/// Evaluated low-rank first; B A is never formed.
Tensor lora_forward(const Tensor& x, const Tensor& W0, const LoraAdapter& adapter, float w);

/// W0 + w (alpha / r) B A, detached. W0 is not modified.
Tensor merge(const Tensor& W0, const LoraAdapter& adapter, float w);

/// One adapter per target name plus a global sampling-time weight. A and B
/// are exposed as trainable params named "<target>.lora_A" / ".lora_B".
/// Copies share state.
class LoraSet {
 public:
  LoraSet();

  void add(LoraAdapter adapter);
  bool contains(const std::string& target) const;
  const LoraAdapter& get(const std::string& target) const;
  std::vector<std::string> targets() const;
  std::size_t size() const;

  float weight() const;
  void set_weight(float w);
  /// New set aliasing the same A/B tensors with its own weight.
  LoraSet with_weight(float w) const;

  ParamStore& params();
  const ParamStore& params() const;
  /// Sum over adapters of r (d_in + d_out).
  std::int64_t parameter_count() const;

 private:
  struct State;
  std::shared_ptr<State> state_;
};

/// Freezes each target in model and routes its projection through a fresh
/// adapter (seeded per target from seed). Throws ConfigError listing the
/// available names if a target does not exist.
LoraSet inject(UNet& model, const std::vector<std::string>& targets, int r, float alpha, std::uint64_t seed);

/// Routes an existing set through model (dynamic lora_forward with the set's
/// weight). Checks that every target exists with matching shape.
void attach(UNet& model, const LoraSet& set);

/// Copy of base with every adapter merged into its target weight at the set's
/// weight; no routing hook.
UNet merged_model(const UNet& base, const LoraSet& set);

/// Checkpoint container with "lora.json" (format version, r, alpha, weight,
/// targets) and the A/B tensors.
void save_adapter(const LoraSet& set, const std::filesystem::path& path);
LoraSet load_adapter(const std::filesystem::path& path);
/// The same entries inside a larger checkpoint; origin names it in errors.
void write_adapter(const LoraSet& set, Checkpoint& ckpt);
LoraSet read_adapter(const Checkpoint& ckpt, const std::string& origin);

}  // namespace fulora
