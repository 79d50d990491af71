#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fulora/classifier.hpp"
#include "fulora/data.hpp"

namespace fulora {

/// n x d row-major features with per-row domain and plane tags.
struct FeatureMatrix {
  int n = 0;
  int d = 0;
  std::vector<double> values;
  std::vector<Domain> domains;
  std::vector<PlaneLabel> planes;

  double at(int i, int j) const { return values[static_cast<std::size_t>(i) * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)]; }
  /// NumericalError on NaN/inf, ShapeError on inconsistent sizes.
  void validate() const;
};

/// True when every parameter still equals the classifier's initialization.
bool is_untrained(const Classifier& model);

/// Penultimate activations of `model` for every record of every manifest,
/// in order. Images are resized to the model's input side. Warns (does not
/// fail) when the embedder was never trained.
FeatureMatrix extract_features(const Classifier& model, const std::vector<DatasetManifest>& manifests);
FeatureMatrix extract_features(const Classifier& model, const Tensor& images, const std::vector<Domain>& domains,
                               const std::vector<PlaneLabel>& planes);

inline const std::vector<PlaneLabel> kEvalPlanes = {PlaneLabel::AB, PlaneLabel::BR, PlaneLabel::FE, PlaneLabel::TH};

/// Up to per_plane random records of each plane, plane by plane, keeping
/// manifest order within a plane. Short planes are taken whole with a warning.
DatasetManifest select_eval_subset(const DatasetManifest& m, int per_plane = 35,
                                   const std::vector<PlaneLabel>& planes = kEvalPlanes, std::uint64_t seed = 0);
/// Applies the single-manifest selection to each source and concatenates.
DatasetManifest select_eval_subset(const std::vector<DatasetManifest>& sources, int per_plane = 35,
                                   const std::vector<PlaneLabel>& planes = kEvalPlanes, std::uint64_t seed = 0);

struct TsneConfig {
  double perplexity = 10.0;
  int iters = 1000;
  double early_exaggeration = 12.0;
  int exaggeration_iters = 250;
  double learning_rate = 0.0;  // <= 0 means max(n / early_exaggeration, 50)
  double momentum_initial = 0.5;
  double momentum_final = 0.8;
  int momentum_switch = 250;
  std::uint64_t seed = 0;

  /// ConfigError unless n >= 4 and perplexity < (n - 1) / 3.
  void validate(int n) const;
};

struct KlPoint {
  int iter;
  double kl;
};

struct TsneResult {
  std::vector<double> y;  // n x 2
  std::vector<KlPoint> kl_trace;  // KL(P || Q) against the unexaggerated P, iters 0..iters
  double y_at(int i, int k) const { return y[static_cast<std::size_t>(2 * i + k)]; }
};

/// Squared Euclidean distances, n x n, rounded to float precision.
std::vector<double> pairwise_sq_dists(const std::vector<double>& x, int n, int d);

/// Row-conditional P (n x n, zero diagonal) with each row's Gaussian
/// bandwidth found by bisection so that exp(entropy) equals perplexity.
std::vector<double> conditional_p(const std::vector<double>& sq_dists, int n, double perplexity);
/// exp of the Shannon entropy (natural log) of row i.
double row_perplexity(const std::vector<double>& p, int n, int i);
/// (P + P^T) / 2n floored at 1e-12.
std::vector<double> joint_p(const std::vector<double>& cond, int n);

/// Exact O(n^2) t-SNE into two dimensions.
TsneResult tsne(const FeatureMatrix& x, const TsneConfig& cfg);
TsneResult tsne(const std::vector<double>& x, int n, int d, const TsneConfig& cfg);

/// Scatter colors: target green, synthetic yellow, source red, finetune blue.
std::string domain_color(Domain d);

/// Writes `<stem>.csv` (`x,y,domain,plane`) and one `<stem>_<PLANE>.svg` per
/// plane present. All panels share the same axis limits. Returns the paths.
std::vector<std::filesystem::path> emit_scatter(const TsneResult& r, const FeatureMatrix& meta,
                                                const std::filesystem::path& out_dir, const std::string& stem = "tsne");
std::string scatter_csv(const TsneResult& r, const FeatureMatrix& meta);
std::string scatter_svg(const TsneResult& r, const FeatureMatrix& meta, PlaneLabel plane);
/// `iter,kl`
std::string kl_trace_csv(const TsneResult& r);

}  // namespace fulora
