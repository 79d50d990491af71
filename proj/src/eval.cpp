#include "fulora/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "fulora/error.hpp"
#include "fulora/io_util.hpp"
#include "fulora/log.hpp"
#include "fulora/ops.hpp"
#include "fulora/rng.hpp"

namespace fulora {

void FeatureMatrix::validate() const {
  if (n < 0 || d < 0 || values.size() != static_cast<std::size_t>(n) * static_cast<std::size_t>(d) ||
      domains.size() != static_cast<std::size_t>(n) || planes.size() != static_cast<std::size_t>(n))
    throw ShapeError("feature matrix: inconsistent sizes");
  for (double v : values)
    if (!std::isfinite(v)) throw NumericalError("feature matrix contains a non-finite value");
}

bool is_untrained(const Classifier& model) {
  Classifier fresh(model.arch(), model.num_classes(), model.image_size(), model.seed());
  auto a = model.params().all();
  auto b = fresh.params().all();
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto x = a[i]->value().data();
    auto y = b[i]->value().data();
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
  }
  return true;
}

FeatureMatrix extract_features(const Classifier& model, const Tensor& images, const std::vector<Domain>& domains,
                               const std::vector<PlaneLabel>& planes) {
  const auto n = static_cast<std::size_t>(images.size(0));
  if (domains.size() != n || planes.size() != n) throw ShapeError("extract_features: metadata length differs from image count");
  if (is_untrained(model)) log::warn("extract_features: embedder is at its random initialization");
  FeatureMatrix f;
  f.n = static_cast<int>(n);
  f.d = model.feature_dim();
  f.domains = domains;
  f.planes = planes;
  if (n > 0) {
    const Tensor rows = extract_feature_rows(model, images);
    auto d = rows.data();
    f.values.assign(d.begin(), d.end());
  }
  f.validate();
  return f;
}

FeatureMatrix extract_features(const Classifier& model, const std::vector<DatasetManifest>& manifests) {
  DatasetManifest all;
  std::vector<Domain> domains;
  std::vector<PlaneLabel> planes;
  std::vector<Tensor> parts;
  for (const auto& m : manifests) {
    if (m.empty()) continue;
    parts.push_back(load_images(m, model.image_size()));
    for (const auto& r : m) {
      domains.push_back(r.domain);
      planes.push_back(r.label);
    }
  }
  if (parts.empty()) {
    FeatureMatrix f;
    f.d = model.feature_dim();
    return f;
  }
  return extract_features(model, parts.size() == 1 ? parts[0] : concat(parts, 0), domains, planes);
}

DatasetManifest select_eval_subset(const DatasetManifest& m, int per_plane, const std::vector<PlaneLabel>& planes,
                                   std::uint64_t seed) {
  if (per_plane < 0) throw ConfigError("select_eval_subset: per_plane must be >= 0");
  DatasetManifest out;
  if (per_plane == 0) return out;
  for (PlaneLabel p : planes) {
    auto idx = m.indices_of(p);
    if (idx.size() < static_cast<std::size_t>(per_plane)) {
      log::warn("select_eval_subset: only " + std::to_string(idx.size()) + " " + to_string(p) + " images available, taking all");
    } else {
      Rng rng(derive_seed(seed, "eval.subset." + to_string(p)));
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(static_cast<std::size_t>(per_plane));
      std::sort(idx.begin(), idx.end());
    }
    for (auto i : idx) out.add(m[i]);
  }
  return out;
}

DatasetManifest select_eval_subset(const std::vector<DatasetManifest>& sources, int per_plane,
                                   const std::vector<PlaneLabel>& planes, std::uint64_t seed) {
  DatasetManifest out;
  for (std::size_t s = 0; s < sources.size(); ++s)
    out.append(select_eval_subset(sources[s], per_plane, planes, derive_seed(seed, static_cast<std::uint64_t>(s))));
  return out;
}

// ---------------------------------------------------------------- t-SNE

void TsneConfig::validate(int n) const {
  if (n < 4) throw ConfigError("t-SNE needs at least 4 points, got " + std::to_string(n));
  const double bound = (n - 1) / 3.0;
  if (!(perplexity > 0.0) || !(perplexity < bound))
    throw ConfigError("t-SNE perplexity " + std::to_string(perplexity) + " must lie in (0, " + std::to_string(bound) +
                      ") for n = " + std::to_string(n));
  if (iters < 1) throw ConfigError("t-SNE iters must be >= 1");
  if (early_exaggeration < 1.0) throw ConfigError("t-SNE early_exaggeration must be >= 1");
  if (exaggeration_iters < 0 || momentum_switch < 0) throw ConfigError("t-SNE iteration switches must be >= 0");
}

std::vector<double> pairwise_sq_dists(const std::vector<double>& x, int n, int d) {
  std::vector<double> out(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double s = 0;
      for (int k = 0; k < d; ++k) {
        const double t = x[static_cast<std::size_t>(i * d + k)] - x[static_cast<std::size_t>(j * d + k)];
        s += t * t;
      }
      // Rounded to float precision so inputs equal up to rounding noise (a
      // rotated copy, say) give the same P and the same trajectory.
      out[static_cast<std::size_t>(i * n + j)] = out[static_cast<std::size_t>(j * n + i)] = static_cast<float>(s);
    }
  return out;
}

namespace {

// Fills row i of p for bandwidth beta and returns the entropy (nats).
double fill_row(const std::vector<double>& d2, int n, int i, double beta, double dmin, std::vector<double>& p) {
  double sum = 0, wsum = 0;
  for (int j = 0; j < n; ++j) {
    const auto k = static_cast<std::size_t>(i * n + j);
    if (j == i) {
      p[k] = 0;
      continue;
    }
    const double dj = d2[k] - dmin;
    p[k] = std::exp(-beta * dj);
    sum += p[k];
    wsum += dj * p[k];
  }
  for (int j = 0; j < n; ++j) p[static_cast<std::size_t>(i * n + j)] /= sum;
  return std::log(sum) + beta * wsum / sum;
}

}  // namespace

std::vector<double> conditional_p(const std::vector<double>& d2, int n, double perplexity) {
  std::vector<double> p(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0.0);
  const double target = std::log(perplexity);
  for (int i = 0; i < n; ++i) {
    double dmin = std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j)
      if (j != i) dmin = std::min(dmin, d2[static_cast<std::size_t>(i * n + j)]);
    // Entropy falls monotonically in beta; bisect on log(beta).
    double lo = -60.0, hi = 60.0, lb = 0.0;
    for (int it = 0; it < 200; ++it) {
      lb = 0.5 * (lo + hi);
      const double h = fill_row(d2, n, i, std::exp(lb), dmin, p);
      if (std::fabs(h - target) < 1e-10) break;
      (h > target ? lo : hi) = lb;
    }
  }
  return p;
}

double row_perplexity(const std::vector<double>& p, int n, int i) {
  double h = 0;
  for (int j = 0; j < n; ++j) {
    const double v = p[static_cast<std::size_t>(i * n + j)];
    if (v > 0) h -= v * std::log(v);
  }
  return std::exp(h);
}

std::vector<double> joint_p(const std::vector<double>& cond, int n) {
  std::vector<double> p(cond.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const auto k = static_cast<std::size_t>(i * n + j);
      p[k] = i == j ? 0.0 : std::max((cond[k] + cond[static_cast<std::size_t>(j * n + i)]) / (2.0 * n), 1e-12);
    }
  return p;
}

TsneResult tsne(const std::vector<double>& x, int n, int d, const TsneConfig& cfg) {
  cfg.validate(n);
  if (x.size() != static_cast<std::size_t>(n) * static_cast<std::size_t>(d)) throw ShapeError("tsne: input size mismatch");
  const std::vector<double> P = joint_p(conditional_p(pairwise_sq_dists(x, n, d), n, cfg.perplexity), n);
  const double lr = cfg.learning_rate > 0 ? cfg.learning_rate : std::max(n / cfg.early_exaggeration, 50.0);

  Rng rng(derive_seed(cfg.seed, "tsne.init"));
  TsneResult r;
  r.y.resize(static_cast<std::size_t>(2 * n));
  for (auto& v : r.y) v = 1e-4 * rng.normal();
  std::vector<double> update(r.y.size(), 0.0), gains(r.y.size(), 1.0), grad(r.y.size());
  std::vector<double> num(P.size());

  auto step_q = [&]() {
    // Student-t kernel and its normalizer; returns KL(P || Q).
    double z = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const auto k = static_cast<std::size_t>(i * n + j);
        if (i == j) {
          num[k] = 0;
          continue;
        }
        const double dx = r.y_at(i, 0) - r.y_at(j, 0), dy = r.y_at(i, 1) - r.y_at(j, 1);
        num[k] = 1.0 / (1.0 + dx * dx + dy * dy);
        z += num[k];
      }
    double kl = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        if (i == j) continue;
        const auto k = static_cast<std::size_t>(i * n + j);
        const double q = std::max(num[k] / z, 1e-300);
        kl += P[k] * std::log(P[k] / q);
      }
    return std::pair{z, kl};
  };

  for (int it = 0; it < cfg.iters; ++it) {
    const auto [z, kl] = step_q();
    r.kl_trace.push_back({it, kl});
    if (!std::isfinite(kl)) throw NumericalError("t-SNE diverged at iteration " + std::to_string(it));
    const double ex = it < cfg.exaggeration_iters ? cfg.early_exaggeration : 1.0;
    const double mom = it < cfg.momentum_switch ? cfg.momentum_initial : cfg.momentum_final;
    for (int i = 0; i < n; ++i) {
      double gx = 0, gy = 0;
      for (int j = 0; j < n; ++j) {
        if (i == j) continue;
        const auto k = static_cast<std::size_t>(i * n + j);
        const double m = (ex * P[k] - num[k] / z) * num[k];
        gx += m * (r.y_at(i, 0) - r.y_at(j, 0));
        gy += m * (r.y_at(i, 1) - r.y_at(j, 1));
      }
      grad[static_cast<std::size_t>(2 * i)] = 4 * gx;
      grad[static_cast<std::size_t>(2 * i + 1)] = 4 * gy;
    }
    for (std::size_t k = 0; k < r.y.size(); ++k) {
      gains[k] = (grad[k] > 0) != (update[k] > 0) ? gains[k] + 0.2 : gains[k] * 0.8;
      gains[k] = std::max(gains[k], 0.01);
      update[k] = mom * update[k] - lr * gains[k] * grad[k];
      r.y[k] += update[k];
    }
    double mx = 0, my = 0;
    for (int i = 0; i < n; ++i) {
      mx += r.y_at(i, 0);
      my += r.y_at(i, 1);
    }
    for (int i = 0; i < n; ++i) {
      r.y[static_cast<std::size_t>(2 * i)] -= mx / n;
      r.y[static_cast<std::size_t>(2 * i + 1)] -= my / n;
    }
  }
  r.kl_trace.push_back({cfg.iters, step_q().second});
  return r;
}

TsneResult tsne(const FeatureMatrix& x, const TsneConfig& cfg) {
  x.validate();
  return tsne(x.values, x.n, x.d, cfg);
}

// ---------------------------------------------------------------- scatter

std::string domain_color(Domain d) {
  switch (d) {
    case Domain::Target: return "#2ca02c";
    case Domain::Synthetic: return "#f2c500";
    case Domain::Source: return "#d62728";
    case Domain::Finetune: return "#1f77b4";
  }
  return "#000000";
}

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void check_meta(const TsneResult& r, const FeatureMatrix& meta) {
  if (r.y.size() != 2 * meta.domains.size() || meta.planes.size() != meta.domains.size())
    throw ShapeError("scatter: embedding and metadata differ in length");
}

}  // namespace

std::string scatter_csv(const TsneResult& r, const FeatureMatrix& meta) {
  check_meta(r, meta);
  std::string out = "x,y,domain,plane\n";
  for (std::size_t i = 0; i < meta.domains.size(); ++i)
    out += csv_row({fmt("%.6f", r.y[2 * i]), fmt("%.6f", r.y[2 * i + 1]), to_string(meta.domains[i]), to_string(meta.planes[i])});
  return out;
}

std::string scatter_svg(const TsneResult& r, const FeatureMatrix& meta, PlaneLabel plane) {
  check_meta(r, meta);
  const int size = 360, margin = 30;
  double x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  for (std::size_t i = 0; i < meta.domains.size(); ++i) {
    x0 = std::min(x0, r.y[2 * i]);
    x1 = std::max(x1, r.y[2 * i]);
    y0 = std::min(y0, r.y[2 * i + 1]);
    y1 = std::max(y1, r.y[2 * i + 1]);
  }
  const double span = std::max({x1 - x0, y1 - y0, 1e-9});
  auto sx = [&](double v) { return margin + (v - x0) / span * (size - 2 * margin); };
  auto sy = [&](double v) { return size - margin - (v - y0) / span * (size - 2 * margin); };

  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(size) + "\" height=\"" +
                  std::to_string(size) + "\" viewBox=\"0 0 " + std::to_string(size) + " " + std::to_string(size) + "\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + std::to_string(margin) + "\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">" +
       plane_name(plane) + " (" + to_string(plane) + ")</text>\n";
  int legend = 0;
  for (Domain d : {Domain::Source, Domain::Synthetic, Domain::Target, Domain::Finetune}) {
    bool seen = false;
    for (std::size_t i = 0; i < meta.domains.size(); ++i) seen |= meta.planes[i] == plane && meta.domains[i] == d;
    if (!seen) continue;
    const int lx = size - 110, ly = 14 + 14 * legend++;
    s += "<circle cx=\"" + std::to_string(lx) + "\" cy=\"" + std::to_string(ly - 4) + "\" r=\"4\" fill=\"" + domain_color(d) + "\"/>\n";
    s += "<text x=\"" + std::to_string(lx + 8) + "\" y=\"" + std::to_string(ly) + "\" font-family=\"sans-serif\" font-size=\"11\">" +
         to_string(d) + "</text>\n";
  }
  for (std::size_t i = 0; i < meta.domains.size(); ++i) {
    if (meta.planes[i] != plane) continue;
    s += "<circle cx=\"" + fmt("%.2f", sx(r.y[2 * i])) + "\" cy=\"" + fmt("%.2f", sy(r.y[2 * i + 1])) + "\" r=\"3\" fill=\"" +
         domain_color(meta.domains[i]) + "\" fill-opacity=\"0.8\" stroke=\"black\" stroke-width=\"0.3\"/>\n";
  }
  s += "</svg>\n";
  return s;
}

std::string kl_trace_csv(const TsneResult& r) {
  std::string out = "iter,kl\n";
  for (const auto& p : r.kl_trace) out += std::to_string(p.iter) + "," + fmt("%.8f", p.kl) + "\n";
  return out;
}

std::vector<std::filesystem::path> emit_scatter(const TsneResult& r, const FeatureMatrix& meta,
                                                const std::filesystem::path& out_dir, const std::string& stem) {
  std::vector<std::filesystem::path> written;
  const auto csv = out_dir / (stem + ".csv");
  write_file_atomic(csv, scatter_csv(r, meta));
  written.push_back(csv);
  for (PlaneLabel p : kAllPlanes) {
    if (std::find(meta.planes.begin(), meta.planes.end(), p) == meta.planes.end()) continue;
    const auto svg = out_dir / (stem + "_" + to_string(p) + ".svg");
    write_file_atomic(svg, scatter_svg(r, meta, p));
    written.push_back(svg);
  }
  return written;
}

}  // namespace fulora
