#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fulora/classifier.hpp"
#include "fulora/data.hpp"
#include "fulora/eval.hpp"
#include "fulora/pipeline.hpp"

namespace fulora {

// ---------------------------------------------------------------- config

struct ModelSection {
  UNetConfig unet = [] {
    UNetConfig c;
    c.base_channels = 16;
    c.context_dim = 32;
    return c;
  }();
  int pretrain_steps = 1500;
  int pretrain_batch_size = 16;
  float pretrain_lr = 2e-3f;
};

struct FinetuneSection {
  FinetuneConfig cfg = [] {
    FinetuneConfig c;
    c.rank = 128;
    c.alpha = 128.0f;
    c.steps_per_image = 10;
    return c;
  }();
  /// Every rank is fine-tuned with alpha / rank held at cfg.alpha / cfg.rank;
  /// cfg.rank is the one used for the synthetic corpus.
  std::vector<int> rank_sweep{8, 32, 128};
};

struct ClassifierSection {
  std::vector<Arch> archs{kAllArchs.begin(), kAllArchs.end()};
  int epochs = 20;
  int batch_size = 24;
  float lr = 1e-3f;
  float momentum = 0.9f;
  AugPolicy augmentation;  // used by the "+aug" condition only
  /// Patient-disjoint share of the real training records held out for
  /// validation; synthetic records always train.
  double val_fraction = 0.0;
};

struct TsneSection {
  bool enabled = true;
  TsneConfig cfg;
  int per_plane = 35;
  /// "best" (highest target accuracy) or "<data>/<arch>", e.g. "hybrid/resnet_mini".
  std::string embedder = "best";
};

/// Data sources are a directory (plane subfolders), a manifest.csv, or
/// "toy:<style>:<n_per_class>[:<plane>,<plane>...]".
struct PathsSection {
  std::string source = "toy:A:60";
  std::string finetune = "toy:B:20";
  std::string target = "toy:C:40:AB,BR,FE,TH";
};

struct SeedsSection {
  std::uint64_t master = 0;
};

struct ExperimentConfig {
  ScheduleConfig schedule;
  ModelSection model;
  FinetuneSection finetune;
  GenSpec genspec = [] {
    GenSpec g;
    g.per_plane_per_sampler = 60;
    return g;
  }();
  HybridSpec hybrid = [] {
    HybridSpec h;
    h.real_count = -1;
    return h;
  }();
  ClassifierSection classifier;
  TsneSection tsne;
  PathsSection paths;
  SeedsSection seeds;

  /// ConfigError on any violated invariant.
  void validate() const;
  nlohmann::ordered_json to_json() const;
  /// Strict: unknown keys and wrong types are ConfigErrors naming the key.
  static ExperimentConfig from_json(const nlohmann::ordered_json& j);
};

/// Defaults, then the file (if any), then each "a.b=value" override, then
/// the master seed. Values parse as JSON, falling back to a plain string.
ExperimentConfig load_config(const std::optional<std::filesystem::path>& file,
                             const std::vector<std::string>& overrides = {},
                             std::optional<std::uint64_t> master_seed = std::nullopt);

/// Component seeds, each derive_seed(master, "<name>").
struct ComponentSeeds {
  std::uint64_t toy, pretrain, finetune, generate, hybrid, classifier, tsne, subset;
  static ComponentSeeds from_master(std::uint64_t master);
  nlohmann::ordered_json to_json() const;
};

// ---------------------------------------------------------------- run directory

/// Output root: FULORA_RUN_DIR when set, else "runs".
std::filesystem::path run_root();
/// Relative paths are placed under run_root(); absolute ones are kept.
std::filesystem::path resolve_run_dir(const std::filesystem::path& p);

/// Collects the files a command writes and finishes with `config.json` and
/// `outputs.json` (command, seeds, sorted relative paths).
class RunDir {
 public:
  explicit RunDir(std::filesystem::path root);
  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path path(const std::string& rel) const { return root_ / rel; }
  void record(const std::filesystem::path& file);
  void write(const std::string& rel, std::string_view contents);
  void finish(const std::string& command, const nlohmann::ordered_json& config,
              const nlohmann::ordered_json& seeds = nlohmann::ordered_json::object());

 private:
  std::filesystem::path root_;
  std::vector<std::string> outputs_;
};

// ---------------------------------------------------------------- steps

/// Materializes a data source. Toy corpora are rendered into out_dir.
DatasetManifest resolve_data(const std::string& spec, Domain domain, int side, std::uint64_t seed,
                             const std::filesystem::path& out_dir);

/// Records of m whose label is in planes, in order.
DatasetManifest filter_planes(const DatasetManifest& m, const std::vector<PlaneLabel>& planes);

inline const std::vector<std::string> kDataConditions = {"source-only", "hybrid", "hybrid+aug"};

struct SummaryRow {
  std::string data;
  std::string model;
  int n_real = 0;
  int n_synthetic = 0;
  int n_patients = 0;  // distinct real patients
  MetricsReport report;
};

/// `data,model,n_real,n_synthetic,n_patients,acc,recall,precision,fscore,auc`
std::string summary_csv(const std::vector<SummaryRow>& rows);

struct RankSweepRow {
  int rank;
  float alpha;
  std::int64_t trainable;
  double final_loss;  // mean of the last 10% of steps
};
/// `rank,alpha,trainable_params,final_loss`
std::string rank_sweep_csv(const std::vector<RankSweepRow>& rows);

struct ExperimentResult {
  std::filesystem::path run_dir;
  std::vector<SummaryRow> rows;
  std::vector<RankSweepRow> sweep;
};

/// toy/real data -> pretrain(source) -> LoRA rank sweep on finetune data ->
/// generate with cfg.finetune.cfg.rank -> hybrid -> classifiers for every
/// data condition and arch -> evaluate on target -> t-SNE per swept rank ->
/// summary.csv.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);

/// Classifier training under the experiment's classifier section.
TrainedClassifier train_condition(const DatasetManifest& train, Arch arch, bool augment,
                                  const ExperimentConfig& cfg, std::uint64_t seed);

}  // namespace fulora
