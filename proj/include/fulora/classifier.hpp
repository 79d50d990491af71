#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "fulora/data.hpp"
#include "fulora/param.hpp"
#include "fulora/rng.hpp"

namespace fulora {

// ---------------------------------------------------------------- augmentation

struct AugPolicy {
  double rotation_min_deg = -25.0;
  double rotation_max_deg = 25.0;
  double p_hflip = 0.5;
  double p_vflip = 0.1;
  bool enabled = true;

  /// ConfigError unless probabilities lie in [0, 1] and bounds are ordered.
  void validate() const;
  static AugPolicy disabled() {
    AugPolicy p;
    p.enabled = false;
    return p;
  }
};

/// What one augment call drew.
struct AugDraw {
  double angle_deg = 0.0;
  bool hflip = false;
  bool vflip = false;
};

/// Rotation about the image center (bilinear, -1 outside), then horizontal
/// flip, then vertical flip. A disabled policy returns the input untouched
/// and draws nothing from rng.
GrayImage augment(const GrayImage& img, const AugPolicy& policy, Rng& rng, AugDraw* draw = nullptr);
GrayImage rotate(const GrayImage& img, double angle_deg, float fill = -1.0f);

// ---------------------------------------------------------------- models

enum class Arch { CnnSmall, ResnetMini, VitMini };
std::string to_string(Arch a);
Arch arch_from_string(const std::string& s);
inline constexpr std::array<Arch, 3> kAllArchs = {Arch::CnnSmall, Arch::ResnetMini, Arch::VitMini};

struct ClassifierConfig {
  Arch arch = Arch::CnnSmall;
  int epochs = 20;
  int batch_size = 24;
  float lr = 1e-3f;
  float momentum = 0.9f;
  int num_classes = 5;
  int image_size = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

/// cnn_small: 3 conv blocks + global average pool + linear.
/// resnet_mini: stem + 4 residual blocks (two with stride 2) + GAP + linear.
/// vit_mini: 4x4 patches, 2 pre-norm transformer blocks, mean-pooled tokens.
/// Group norm stands in for batch norm so outputs never depend on batch
/// composition.
class Classifier {
 public:
  Classifier(Arch arch, int num_classes, int image_size, std::uint64_t seed);
  ~Classifier();
  Classifier(Classifier&&) noexcept;
  Classifier& operator=(Classifier&&) noexcept;

  Arch arch() const;
  int num_classes() const;
  int image_size() const;
  /// Initialization seed.
  std::uint64_t seed() const;

  /// x (B, 1, S, S) -> logits (B, num_classes)
  Tensor logits(const Tensor& x) const;
  /// Penultimate activations (B, feature_dim).
  Tensor features(const Tensor& x) const;
  int feature_dim() const;

  ParamStore& params();
  const ParamStore& params() const;

  void save(const std::filesystem::path& path) const;
  static Classifier load(const std::filesystem::path& path);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_loss = 0;  // NaN without validation data
  double val_acc = 0;
};

struct TrainedClassifier {
  Classifier model;
  std::vector<EpochStats> history;
};

/// Mini-batch SGD on cross-entropy over shuffled batches, augmenting each
/// training image with `policy`. Warns when a label never occurs.
TrainedClassifier train_classifier(const LabeledImages& train, const ClassifierConfig& cfg, const AugPolicy& policy,
                                   const LabeledImages* val = nullptr);

/// `epoch,train_loss,val_loss,train_acc,val_acc`
std::string history_csv(const std::vector<EpochStats>& history);

/// Softmax probabilities (N, num_classes), evaluated in chunks without grad.
Tensor predict_proba(const Classifier& model, const Tensor& images, int chunk = 256);
/// Penultimate features (N, feature_dim), in chunks without grad.
Tensor extract_feature_rows(const Classifier& model, const Tensor& images, int chunk = 256);

// ---------------------------------------------------------------- metrics

struct AucResult {
  std::vector<double> per_class;  // NaN where skipped
  std::vector<bool> skipped;      // class lacks positives or negatives
  double macro = 0;               // NaN when every class is skipped
};

/// One-vs-rest AUC by rank sum with average ranks for ties.
AucResult auc_ovr(const std::vector<std::vector<double>>& scores, const std::vector<int>& labels);

/// Values are percentages; only serialization rounds them to 2 decimals.
struct MetricsReport {
  double accuracy = 0;
  double recall = 0;
  double precision = 0;
  double f_score = 0;
  double auc = 0;  // NaN when undefined
  bool auc_skipped = false;
  std::vector<bool> auc_class_skipped;
  std::vector<std::vector<int>> confusion;  // [true][predicted]
  int n_test = 0;
  std::vector<int> classes_present;
};

/// Lowest index wins ties.
int argmax_row(const std::vector<double>& row);

/// Macro recall, precision and F over classes present in `labels`; AUC is
/// macro one-vs-rest over the same probabilities.
MetricsReport compute_metrics(const std::vector<int>& labels, const std::vector<std::vector<double>>& probs,
                              int num_classes = kNumPlanes);
/// DataError on an empty test set.
MetricsReport evaluate(const Classifier& model, const LabeledImages& test);

std::string metrics_json(const MetricsReport& r);
/// `data,model,acc,recall,precision,fscore,auc`
std::string metrics_csv_header();
std::string metrics_csv_row(const std::string& data, const std::string& model, const MetricsReport& r);

std::vector<std::vector<double>> to_rows(const Tensor& t);

}  // namespace fulora
