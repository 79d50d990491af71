#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fulora/data.hpp"
#include "fulora/denoiser.hpp"
#include "fulora/lora.hpp"
#include "fulora/samplers.hpp"
#include "fulora/schedule.hpp"

namespace fulora {

struct LossPoint {
  std::int64_t step;
  double loss;
};
/// `step,loss`
std::string loss_csv(const std::vector<LossPoint>& curve);

// ---------------------------------------------------------------- base model

struct ScheduleConfig {
  int steps = 200;
  double beta_start = 5e-4;
  double beta_end = 0.05;

  void validate() const;
  NoiseSchedule make() const { return NoiseSchedule(steps, beta_start, beta_end); }
};

struct PretrainConfig {
  int steps = 3000;
  int batch_size = 16;
  float lr = 2e-3f;
  std::uint64_t seed = 0;

  void validate() const;
};

/// A denoiser with the schedule it was trained under.
struct BaseModel {
  UNet net;
  ScheduleConfig schedule;
};

struct PretrainResult {
  BaseModel model;
  std::vector<LossPoint> loss;
};

/// Plane prompts in kAllPlanes order, and the vocabulary covering them.
PromptVocabulary plane_vocabulary();

/// Adam on the epsilon MSE: each step draws a batch of images with
/// replacement, t ~ U{1..T} and fresh noise, conditioned on the plane prompt.
/// DataError unless every plane is present. NumericalError on a non-finite
/// loss, naming the step.
PretrainResult train_base_model(const LabeledImages& data, const UNetConfig& model_cfg, const ScheduleConfig& schedule,
                                const PretrainConfig& cfg);

/// Checkpoint with "model.json", "schedule.json" and the parameters.
void save_base_model(const BaseModel& m, const std::filesystem::path& path);
BaseModel load_base_model(const std::filesystem::path& path);

// ---------------------------------------------------------------- LoRA fine-tune

struct FinetuneConfig {
  int batch_size = 2;
  int epochs = 1;
  float lr = 1e-4f;
  int rank = 8;
  float alpha = 8.0f;
  int steps_per_image = 100;
  bool train_prompt_embeddings = true;
  std::vector<std::string> targets;  // empty = every cross-attention projection
  std::uint64_t seed = 0;

  void validate() const;
  /// n_images * steps_per_image * epochs
  std::int64_t total_steps(std::size_t n_images) const;
};

/// Adapters plus, when the prompt table was tuned, its new value.
struct AdapterBundle {
  LoraSet lora;
  std::optional<Tensor> prompt_table;
};

struct FinetuneResult {
  AdapterBundle adapter;
  std::vector<LossPoint> loss;
  std::int64_t total_steps = 0;
  std::int64_t trainable_elements = 0;
  /// Checksums of the frozen base parameters before and after.
  std::uint64_t frozen_checksum_before = 0;
  std::uint64_t frozen_checksum_after = 0;
};

/// Trains adapters (and optionally the prompt table) on a copy of the base;
/// the base itself is never written. Warns for planes absent from data.
FinetuneResult finetune_lora(const BaseModel& base, const LabeledImages& data, const FinetuneConfig& cfg);

/// Checkpoint with "lora.json", the adapter tensors, "finetune.json" and
/// "prompt.embedding" when present.
void save_adapter_bundle(const AdapterBundle& b, const std::filesystem::path& path);
AdapterBundle load_adapter_bundle(const std::filesystem::path& path);

/// Sampling model: adapters applied at `weight` and the tuned prompt table.
UNet adapted_model(const BaseModel& base, const AdapterBundle& adapter, float weight);

// ---------------------------------------------------------------- generation

struct GenSpec {
  int per_plane_per_sampler = 500;
  std::vector<SamplerKind> samplers{SamplerKind::Euler, SamplerKind::UniPC};
  std::vector<PlaneLabel> planes{kAllPlanes.begin(), kAllPlanes.end()};
  std::map<PlaneLabel, std::string> prompts;  // missing planes use plane_prompt
  int steps = 20;
  float lora_weight = 1.0f;
  int unipc_order = 2;
  int batch_size = 25;
  int workers = 1;
  std::uint64_t seed = 0;

  void validate() const;
  std::int64_t total_images() const;
  std::string prompt_for(PlaneLabel p) const;
};

/// Seed of image j for (plane, sampler).
std::uint64_t generation_seed(std::uint64_t seed, PlaneLabel p, SamplerKind k, int j);

/// Writes out_dir/<PLANE>/<plane>_<sampler>_<seed>.png, a `seeds.csv` ledger
/// (`path,plane,sampler,seed`) updated after every batch, and manifest.csv.
/// Images already listed in the ledger with their file on disk are not
/// regenerated, so an interrupted run resumes. Each image depends only on
/// its own seed and its fixed batch, never on workers or resumption.
DatasetManifest generate_synthetic(const UNet& model, const ScheduleConfig& schedule, const GenSpec& spec,
                                   const std::filesystem::path& out_dir);

// ---------------------------------------------------------------- hybrid

struct HybridSpec {
  int real_count = 0;        // R_o
  int synthetic_count = -1;  // N_s; -1 takes every synthetic record
  std::uint64_t seed = 0;
};

/// Plane quotas proportional to the real manifest (largest remainder); within
/// a plane, whole patients are taken in random order until the quota is met,
/// the last one possibly in part. The chosen real records keep manifest order
/// and precede the synthetic ones. ConfigError when R_o > N_o or N_s exceeds
/// the synthetic pool.
DatasetManifest build_hybrid(const DatasetManifest& real, const DatasetManifest& synthetic, const HybridSpec& spec);

}  // namespace fulora
