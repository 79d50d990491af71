#include <algorithm>
#include <chrono>
#include <cmath>

#include "doctest.h"
#include "fulora/error.hpp"
#include "fulora/eval.hpp"
#include "fulora/io_util.hpp"
#include "support.hpp"

using namespace fulora;
namespace fs = std::filesystem;

namespace {

// Two isotropic clusters in 10-D, centers 20 sigma apart.
std::vector<double> two_clusters(int n, Rng& rng) {
  std::vector<double> x;
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < 10; ++k) x.push_back(rng.normal() + (i < n / 2 && k == 0 ? 20.0 : 0.0));
  return x;
}

// Separable by a threshold on the first principal axis of the 2-D embedding.
bool separable_on_pc1(const TsneResult& r, int n) {
  double mx = 0, my = 0;
  for (int i = 0; i < n; ++i) {
    mx += r.y_at(i, 0) / n;
    my += r.y_at(i, 1) / n;
  }
  double sxx = 0, sxy = 0, syy = 0;
  for (int i = 0; i < n; ++i) {
    const double a = r.y_at(i, 0) - mx, b = r.y_at(i, 1) - my;
    sxx += a * a;
    sxy += a * b;
    syy += b * b;
  }
  const double th = 0.5 * std::atan2(2 * sxy, sxx - syy);
  std::vector<std::pair<double, int>> proj;
  for (int i = 0; i < n; ++i)
    proj.push_back({std::cos(th) * (r.y_at(i, 0) - mx) + std::sin(th) * (r.y_at(i, 1) - my), i < n / 2 ? 0 : 1});
  std::sort(proj.begin(), proj.end());
  for (int cut = 0; cut <= n; ++cut) {
    bool lo0 = true, lo1 = true;
    for (int i = 0; i < n; ++i) {
      const bool below = i < cut;
      lo0 &= below == (proj[static_cast<std::size_t>(i)].second == 0);
      lo1 &= below == (proj[static_cast<std::size_t>(i)].second == 1);
    }
    if (lo0 || lo1) return true;
  }
  return false;
}

DatasetManifest fake_manifest(const std::string& prefix, Domain d, std::array<int, 5> counts) {
  DatasetManifest m;
  for (int p = 0; p < 5; ++p)
    for (int i = 0; i < counts[static_cast<std::size_t>(p)]; ++i)
      m.add(ImageRecord{"/" + prefix + "/" + std::to_string(p) + "_" + std::to_string(i) + ".png", static_cast<PlaneLabel>(p),
                        prefix + std::to_string(i / 3), d, prefix});
  return m;
}

}  // namespace

TEST_CASE("perplexity calibration") {
  SUBCASE("regular simplex gives uniform rows") {
    const int n = 5;
    std::vector<double> x(25, 0.0);
    for (int i = 0; i < n; ++i) x[static_cast<std::size_t>(i * n + i)] = 1.0;
    auto p = conditional_p(pairwise_sq_dists(x, n, n), n, 3.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) CHECK(p[static_cast<std::size_t>(i * n + j)] == doctest::Approx(i == j ? 0.0 : 0.25).epsilon(1e-6));
  }

  SUBCASE("random inputs hit the target perplexity") {
    Rng rng(4);
    for (double perp : {5.0, 10.0, 30.0}) {
      const int n = 120, d = 7;
      std::vector<double> x;
      for (int i = 0; i < n * d; ++i) x.push_back(rng.normal() * (1 + i % 3));
      auto p = conditional_p(pairwise_sq_dists(x, n, d), n, perp);
      double worst = 0;
      for (int i = 0; i < n; ++i) worst = std::max(worst, std::fabs(row_perplexity(p, n, i) - perp));
      CAPTURE(perp);
      CHECK(worst < 1e-3);

      auto P = joint_p(p, n);
      double sum = 0, asym = 0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          sum += P[static_cast<std::size_t>(i * n + j)];
          asym = std::max(asym, std::fabs(P[static_cast<std::size_t>(i * n + j)] - P[static_cast<std::size_t>(j * n + i)]));
          CHECK(P[static_cast<std::size_t>(i * n + j)] >= 0.0);
        }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(asym == 0.0);
    }
  }

  TsneConfig cfg;
  cfg.perplexity = 30;
  CHECK_THROWS_AS(cfg.validate(60), ConfigError);
  CHECK_NOTHROW(cfg.validate(100));
  CHECK_THROWS_AS(TsneConfig{}.validate(3), ConfigError);
}

TEST_CASE("tsne behaviour") {
  Rng rng(10);
  const int n = 80;
  auto x = two_clusters(n, rng);
  TsneConfig cfg;
  cfg.seed = 3;
  auto r = tsne(x, n, 10, cfg);
  REQUIRE(r.kl_trace.size() == static_cast<std::size_t>(cfg.iters + 1));
  MESSAGE("KL " << r.kl_trace.front().kl << " -> " << r.kl_trace.back().kl);
  CHECK(r.kl_trace.back().kl < r.kl_trace.front().kl);
  CHECK(separable_on_pc1(r, n));

  auto again = tsne(x, n, 10, cfg);
  CHECK(again.y == r.y);

  // Rotating the inputs by a random orthogonal matrix leaves the KL trace in place.
  std::vector<double> q(100);
  for (auto& v : q) v = rng.normal();
  for (int c = 0; c < 10; ++c) {  // Gram-Schmidt on columns
    for (int p = 0; p < c; ++p) {
      double dot = 0;
      for (int k = 0; k < 10; ++k) dot += q[static_cast<std::size_t>(k * 10 + c)] * q[static_cast<std::size_t>(k * 10 + p)];
      for (int k = 0; k < 10; ++k) q[static_cast<std::size_t>(k * 10 + c)] -= dot * q[static_cast<std::size_t>(k * 10 + p)];
    }
    double nrm = 0;
    for (int k = 0; k < 10; ++k) nrm += q[static_cast<std::size_t>(k * 10 + c)] * q[static_cast<std::size_t>(k * 10 + c)];
    for (int k = 0; k < 10; ++k) q[static_cast<std::size_t>(k * 10 + c)] /= std::sqrt(nrm);
  }
  std::vector<double> xr(x.size(), 0.0);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 10; ++c)
      for (int k = 0; k < 10; ++k)
        xr[static_cast<std::size_t>(i * 10 + c)] += x[static_cast<std::size_t>(i * 10 + k)] * q[static_cast<std::size_t>(k * 10 + c)];
  auto rr = tsne(xr, n, 10, cfg);
  double worst = 0;
  for (std::size_t i = 0; i < r.kl_trace.size(); ++i) worst = std::max(worst, std::fabs(rr.kl_trace[i].kl - r.kl_trace[i].kl));
  MESSAGE("rotation KL trace deviation " << worst);
  CHECK(worst < 1e-4);

  CHECK(kl_trace_csv(r).rfind("iter,kl\n0,", 0) == 0);
}

TEST_CASE("tsne at n = 420 stays inside two minutes") {
  Rng rng(12);
  const int n = 420, d = 32;
  std::vector<double> x;
  for (int i = 0; i < n * d; ++i) x.push_back(rng.normal() + (i / d) % 3 * 4.0 * (i % d == 0));
  auto t0 = std::chrono::steady_clock::now();
  auto r = tsne(x, n, d, TsneConfig{});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("t-SNE n=420 took " << secs << " s");
  CHECK(secs < 120.0);
  CHECK(r.kl_trace.back().kl < r.kl_trace.front().kl);
}

TEST_CASE("eval subset selection") {
  auto src = fake_manifest("es", Domain::Source, {50, 50, 50, 50, 10});
  auto syn = fake_manifest("syn", Domain::Synthetic, {40, 40, 40, 40, 40});
  auto afr = fake_manifest("af", Domain::Target, {60, 60, 60, 40, 0});
  auto all = select_eval_subset({src, syn, afr}, 35, kEvalPlanes, 9);
  CHECK(all.size() == 420);
  CHECK(select_eval_subset(src, 35, kEvalPlanes, 9).size() == 140);
  CHECK(select_eval_subset(src, 0, kEvalPlanes, 9).empty());
  CHECK(select_eval_subset(src, 35, kEvalPlanes, 9) == select_eval_subset(src, 35, kEvalPlanes, 9));
  CHECK(!(select_eval_subset(src, 35, kEvalPlanes, 9) == select_eval_subset(src, 35, kEvalPlanes, 10)));

  auto few = fake_manifest("f", Domain::Source, {50, 50, 50, 20, 0});
  auto s = select_eval_subset(few, 35, kEvalPlanes, 1);
  CHECK(s.size() == 35 * 3 + 20);
  CHECK(s.label_counts()[4] == 0);
}

TEST_CASE("feature extraction") {
  Classifier model(Arch::CnnSmall, 5, 16, 4);
  CHECK(is_untrained(model));
  auto img = render_toy_image(ToyStyle::A, PlaneLabel::BR, 16, 1);
  auto f = extract_features(model, stack_images({img, img, img}), {Domain::Source, Domain::Source, Domain::Target},
                            {PlaneLabel::BR, PlaneLabel::BR, PlaneLabel::BR});
  CHECK(f.n == 3);
  CHECK(f.d == model.feature_dim());
  for (int j = 0; j < f.d; ++j) CHECK(f.at(0, j) == f.at(2, j));

  testing::TempDir dir("feat");
  auto ma = make_toy_corpus(ToyStyle::A, 8, 16, 1, dir / "A");
  auto mc = make_toy_corpus(ToyStyle::C, 8, 16, 1, dir / "C");
  auto fm = extract_features(model, {ma, mc});
  CHECK(fm.n == 80);
  CHECK(fm.domains[0] == Domain::Source);
  CHECK(fm.domains[79] == Domain::Target);

  // Style shift is visible as a per-dimension effect size above 1.
  double best = 0;
  for (int j = 0; j < fm.d; ++j) {
    double m0 = 0, m1 = 0, v0 = 0, v1 = 0;
    for (int i = 0; i < 40; ++i) {
      m0 += fm.at(i, j) / 40;
      m1 += fm.at(40 + i, j) / 40;
    }
    for (int i = 0; i < 40; ++i) {
      v0 += std::pow(fm.at(i, j) - m0, 2) / 39;
      v1 += std::pow(fm.at(40 + i, j) - m1, 2) / 39;
    }
    best = std::max(best, std::fabs(m0 - m1) / std::sqrt(0.5 * (v0 + v1) + 1e-12));
  }
  MESSAGE("largest A-vs-C feature effect size " << best);
  CHECK(best > 1.0);
}

TEST_CASE("scatter output") {
  FeatureMatrix meta;
  meta.n = 4;
  meta.d = 0;
  meta.domains = {Domain::Source, Domain::Synthetic, Domain::Target, Domain::Source};
  meta.planes = {PlaneLabel::AB, PlaneLabel::AB, PlaneLabel::TH, PlaneLabel::TH};
  TsneResult r;
  r.y = {0, 0, 1, 1, -1, 2, 0.5, -0.5};
  const std::string csv = scatter_csv(r, meta);
  CHECK(csv.rfind("x,y,domain,plane\n0.000000,0.000000,source,AB\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);

  CHECK(domain_color(Domain::Target) == "#2ca02c");
  CHECK(domain_color(Domain::Synthetic) == "#f2c500");
  CHECK(domain_color(Domain::Source) == "#d62728");

  testing::TempDir a("sc1"), b("sc2");
  auto files = emit_scatter(r, meta, a.path());
  CHECK(files.size() == 3);
  emit_scatter(r, meta, b.path());
  for (const auto& f : files) CHECK(read_file(f) == read_file(b / f.filename()));
  const std::string svg = read_file(a / "tsne_AB.svg");
  CHECK(svg.find("#f2c500") != std::string::npos);
  CHECK(svg.find("#2ca02c\" fill-opacity") == std::string::npos);
}
