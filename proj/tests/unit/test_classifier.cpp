#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "fulora/classifier.hpp"
#include "fulora/error.hpp"
#include "fulora/ops.hpp"
#include "support.hpp"

using namespace fulora;

namespace {

// All-pairs AUC: P(score(pos) > score(neg)) with ties counting one half.
double brute_auc(const std::vector<double>& s, const std::vector<bool>& pos) {
  double num = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (pos[i] && !pos[j]) {
        pairs += 1;
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return num / pairs;
}

// Macro F straight from predictions, without going through a confusion matrix.
double macro_f_direct(const std::vector<int>& y, const std::vector<int>& pred, int k) {
  double sum = 0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      tp += y[i] == c && pred[i] == c;
      fp += y[i] != c && pred[i] == c;
      fn += y[i] == c && pred[i] != c;
    }
    if (tp + fn == 0) continue;
    ++present;
    const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0, r = tp / (tp + fn);
    sum += p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
  return 100.0 * sum / present;
}

std::vector<std::vector<double>> one_hot_scores(const std::vector<int>& pred, int k) {
  std::vector<std::vector<double>> s(pred.size(), std::vector<double>(static_cast<std::size_t>(k), 0.0));
  for (std::size_t i = 0; i < pred.size(); ++i) s[i][static_cast<std::size_t>(pred[i])] = 1.0;
  return s;
}

LabeledImages toy_set(ToyStyle style, int n, std::uint64_t seed) {
  std::vector<GrayImage> imgs;
  std::vector<int> labels;
  for (int j = 0; j < n; ++j) {
    const int l = j % kNumPlanes;
    imgs.push_back(render_toy_image(style, static_cast<PlaneLabel>(l), 16, derive_seed(seed, static_cast<std::uint64_t>(j))));
    labels.push_back(l);
  }
  return {stack_images(imgs), labels};
}

std::vector<float> flat_params(const Classifier& c) {
  std::vector<float> out;
  for (const auto& p : c.params().all()) {
    auto d = p->value().data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

}  // namespace

TEST_CASE("augmentation policy") {
  GrayImage img{16, 16, {}};
  Rng fill(4);
  for (int i = 0; i < 256; ++i) img.pixels.push_back(static_cast<float>(fill.uniform(-1, 1)));

  Rng rng(1);
  CHECK(augment(img, AugPolicy::disabled(), rng) == img);
  Rng fresh(1);
  CHECK(rng.uniform() == fresh.uniform());  // disabled policy consumed nothing

  CHECK(rotate(img, 0.0) == img);
  GrayImage r = rotate(img, 90.0);
  CHECK(r.at(0, 15) == doctest::Approx(img.at(0, 0)).epsilon(1e-5));

  AugPolicy pol;
  int h = 0, v = 0;
  double lo = 1e9, hi = -1e9;
  const int n = 10000;
  GrayImage tiny{4, 4, std::vector<float>(16, 0.0f)};
  for (int i = 0; i < n; ++i) {
    AugDraw d;
    augment(tiny, pol, rng, &d);
    h += d.hflip;
    v += d.vflip;
    lo = std::min(lo, d.angle_deg);
    hi = std::max(hi, d.angle_deg);
  }
  MESSAGE("hflip " << h / double(n) << " vflip " << v / double(n) << " angle [" << lo << ", " << hi << "]");
  CHECK(std::fabs(h / double(n) - 0.5) <= 0.02);
  CHECK(std::fabs(v / double(n) - 0.1) <= 0.015);
  CHECK(lo >= -25.0);
  CHECK(hi <= 25.0);
  CHECK(hi - lo > 45.0);

  AugPolicy flips_only;
  flips_only.rotation_min_deg = flips_only.rotation_max_deg = 0.0;
  flips_only.p_hflip = 1.0;
  flips_only.p_vflip = 1.0;
  GrayImage f = augment(img, flips_only, rng);
  CHECK(f.at(0, 0) == img.at(15, 15));
  CHECK(f.at(3, 5) == img.at(12, 10));

  AugPolicy bad;
  bad.p_hflip = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = AugPolicy{};
  bad.rotation_min_deg = 30;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("classifier architectures") {
  Rng rng(3);
  Tensor x = testing::randn_tensor({3, 1, 16, 16}, rng);
  for (Arch a : kAllArchs) {
    CAPTURE(to_string(a));
    Classifier c(a, 5, 16, 9);
    CHECK(c.logits(x).shape() == Shape{3, 5});
    CHECK(c.features(x).shape() == Shape{3, c.feature_dim()});
    const auto n = c.params().count_elements();
    MESSAGE(to_string(a) << " params " << n);
    CHECK(n > 40000);
    CHECK(n < 200000);
    CHECK(arch_from_string(to_string(a)) == a);

    // Rows are independent of batch composition.
    Tensor one = c.logits(LabeledImages{x, {0, 0, 0}}.subset({1}).images);
    Tensor all = c.logits(x);
    for (int k = 0; k < 5; ++k) CHECK(one.at(k) == doctest::Approx(all.at(5 + k)).epsilon(1e-5));

    testing::TempDir dir("clf");
    c.save(dir / "c.ckpt");
    Classifier back = Classifier::load(dir / "c.ckpt");
    CHECK(back.arch() == a);
    CHECK(flat_params(back) == flat_params(c));
    CHECK(back.logits(x).to_vector() == c.logits(x).to_vector());
  }
  CHECK_THROWS_AS(arch_from_string("densenet"), ConfigError);
  CHECK_THROWS_AS(Classifier(Arch::CnnSmall, 5, 10, 1), ConfigError);
  CHECK_THROWS_AS(Classifier(Arch::CnnSmall, 5, 16, 1).logits(Tensor::zeros({1, 1, 8, 8})), ShapeError);
}

TEST_CASE("classifier training contracts") {
  LabeledImages data = toy_set(ToyStyle::B, 20, 5);
  ClassifierConfig cfg;
  cfg.seed = 2;

  SUBCASE("overfits 20 images in 200 epochs") {
    cfg.epochs = 200;
    for (Arch a : kAllArchs) {
      CAPTURE(to_string(a));
      cfg.arch = a;
      auto t0 = std::chrono::steady_clock::now();
      auto tc = train_classifier(data, cfg, AugPolicy::disabled());
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      MESSAGE(to_string(a) << " final loss " << tc.history.back().train_loss << " in " << secs << " s");
      CHECK(tc.history.size() == 200);
      CHECK(evaluate(tc.model, data).accuracy == 100.0);
    }
  }

  SUBCASE("determinism and lr 0") {
    cfg.epochs = 2;
    auto a = train_classifier(data, cfg, AugPolicy{});
    auto b = train_classifier(data, cfg, AugPolicy{});
    CHECK(flat_params(a.model) == flat_params(b.model));
    cfg.seed = 3;
    CHECK(flat_params(train_classifier(data, cfg, AugPolicy{}).model) != flat_params(a.model));

    cfg.lr = 0.0f;
    auto z = train_classifier(data, cfg, AugPolicy{});
    Classifier init(cfg.arch, 5, 16, derive_seed(cfg.seed, "classifier.model"));
    CHECK(flat_params(z.model) == flat_params(init));
  }

  SUBCASE("history and validation") {
    cfg.epochs = 3;
    LabeledImages val = toy_set(ToyStyle::B, 10, 6);
    auto tc = train_classifier(data, cfg, AugPolicy{}, &val);
    REQUIRE(tc.history.size() == 3);
    CHECK(std::isfinite(tc.history[2].val_loss));
    const std::string csv = history_csv(tc.history);
    CHECK(csv.rfind("epoch,train_loss,val_loss,train_acc,val_acc\n1,", 0) == 0);
  }

  SUBCASE("errors") {
    CHECK_THROWS_AS(train_classifier(LabeledImages{}, cfg, AugPolicy{}), DataError);
    cfg.batch_size = 0;
    CHECK_THROWS_AS(train_classifier(data, cfg, AugPolicy{}), ConfigError);
    cfg = ClassifierConfig{};
    cfg.num_classes = 4;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = ClassifierConfig{};
    cfg.epochs = 3;
    cfg.lr = 1e30f;
    CHECK_THROWS_AS(train_classifier(data, cfg, AugPolicy::disabled()), NumericalError);
  }
}

TEST_CASE("style A toy corpus is separable") {
  LabeledImages train = toy_set(ToyStyle::A, 300, 11);
  LabeledImages test = toy_set(ToyStyle::A, 200, 12);
  ClassifierConfig cfg;
  cfg.seed = 1;
  auto tc = train_classifier(train, cfg, AugPolicy::disabled());
  auto rep = evaluate(tc.model, test);
  MESSAGE("style A held-out accuracy " << rep.accuracy);
  CHECK(rep.accuracy >= 95.0);
}

TEST_CASE("metrics hand examples") {
  SUBCASE("two-class confusion") {
    const std::vector<int> y = {0, 0, 1, 1};
    auto rep = compute_metrics(y, one_hot_scores({0, 1, 1, 1}, 5));
    CHECK(rep.accuracy == doctest::Approx(75.0));
    CHECK(rep.recall == doctest::Approx(75.0));
    CHECK(rep.precision == doctest::Approx(83.3333333));
    CHECK(rep.classes_present == std::vector<int>{0, 1});
    CHECK(rep.confusion[0][0] == 1);
    CHECK(rep.confusion[0][1] == 1);
    CHECK(rep.confusion[1][1] == 2);
    const std::string row = metrics_csv_row("toyC", "cnn_small", rep);
    CHECK(row.rfind("toyC,cnn_small,75.00,75.00,83.33,", 0) == 0);
  }

  SUBCASE("perfect predictions") {
    std::vector<int> y;
    for (int i = 0; i < 20; ++i) y.push_back(i % 5);
    auto rep = compute_metrics(y, one_hot_scores(y, 5));
    CHECK(rep.accuracy == 100.0);
    CHECK(rep.recall == 100.0);
    CHECK(rep.precision == 100.0);
    CHECK(rep.f_score == 100.0);
    CHECK(rep.auc == 100.0);
    CHECK(!rep.auc_skipped);
  }

  SUBCASE("single-class test set") {
    auto rep = compute_metrics({2, 2, 2}, one_hot_scores({2, 1, 2}, 5));
    CHECK(rep.auc_skipped);
    CHECK(std::isnan(rep.auc));
    CHECK(rep.auc_class_skipped == std::vector<bool>(5, true));
    CHECK(metrics_csv_row("d", "m", rep).find(",NA\n") != std::string::npos);
    CHECK(metrics_json(rep).find("\"auc\": null") != std::string::npos);
  }

  SUBCASE("four-plane test set") {
    // No OT images; an OT prediction is an ordinary miss.
    auto rep = compute_metrics({0, 1, 2, 3}, one_hot_scores({0, 1, 2, 4}, 5));
    CHECK(rep.accuracy == 75.0);
    CHECK(rep.classes_present.size() == 4);
    CHECK(rep.recall == doctest::Approx(75.0));
    CHECK(rep.auc_class_skipped[4]);
  }

  CHECK_THROWS_AS(compute_metrics({}, {}), DataError);
  CHECK(metrics_csv_header() == "data,model,acc,recall,precision,fscore,auc\n");
}

TEST_CASE("auc by rank sum") {
  auto bin = [](std::vector<double> s, std::vector<int> y) {
    std::vector<std::vector<double>> rows;
    for (double v : s) rows.push_back({1 - v, v});
    return auc_ovr(rows, y).per_class[1];
  };
  CHECK(bin({0.9, 0.4, 0.6, 0.2}, {1, 0, 1, 0}) == 1.0);
  CHECK(bin({0.9, 0.6, 0.4, 0.2}, {1, 0, 1, 0}) == 0.75);
  CHECK(bin({0.3, 0.3, 0.3, 0.3}, {1, 0, 1, 0}) == 0.5);
  CHECK(bin({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);

  Rng rng(77);
  int mismatches = 0;
  for (int inst = 0; inst < 1000; ++inst) {
    const int n = static_cast<int>(rng.uniform_int(2, 50));
    std::vector<std::vector<double>> s(static_cast<std::size_t>(n), std::vector<double>(5));
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      y[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(0, 4));
      // Coarse grid so ties are common.
      for (auto& v : s[static_cast<std::size_t>(i)]) v = static_cast<double>(rng.uniform_int(0, 10)) / 10.0;
    }
    auto r = auc_ovr(s, y);
    for (int c = 0; c < 5; ++c) {
      std::vector<double> col;
      std::vector<bool> pos;
      for (int i = 0; i < n; ++i) {
        col.push_back(s[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)]);
        pos.push_back(y[static_cast<std::size_t>(i)] == c);
      }
      const auto np = std::count(pos.begin(), pos.end(), true);
      if (np == 0 || np == n) {
        mismatches += !r.skipped[static_cast<std::size_t>(c)];
        continue;
      }
      mismatches += r.per_class[static_cast<std::size_t>(c)] != brute_auc(col, pos);
    }
  }
  CHECK(mismatches == 0);
}

TEST_CASE("macro F recomputation and permutation equivariance") {
  Rng rng(8);
  double worst = 0;
  for (int inst = 0; inst < 200; ++inst) {
    const int n = static_cast<int>(rng.uniform_int(5, 80));
    std::vector<int> y(static_cast<std::size_t>(n));
    std::vector<std::vector<double>> s(static_cast<std::size_t>(n), std::vector<double>(5));
    for (int i = 0; i < n; ++i) {
      y[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(0, 4));
      for (auto& v : s[static_cast<std::size_t>(i)]) v = rng.uniform();
    }
    auto rep = compute_metrics(y, s);
    std::vector<int> pred;
    for (const auto& row : s) pred.push_back(argmax_row(row));
    worst = std::max(worst, std::fabs(rep.f_score - macro_f_direct(y, pred, 5)));

    int trace = 0;
    for (int c = 0; c < 5; ++c) trace += rep.confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)];
    CHECK(rep.accuracy == doctest::Approx(100.0 * trace / n));

    std::vector<int> perm = {0, 1, 2, 3, 4};
    rng.shuffle(perm.begin(), perm.end());
    std::vector<int> yp;
    std::vector<std::vector<double>> sp;
    for (int i = 0; i < n; ++i) {
      yp.push_back(perm[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])]);
      std::vector<double> row(5);
      for (int c = 0; c < 5; ++c) row[static_cast<std::size_t>(perm[static_cast<std::size_t>(c)])] = s[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
      sp.push_back(row);
    }
    auto rp = compute_metrics(yp, sp);
    CHECK(rp.accuracy == doctest::Approx(rep.accuracy).epsilon(1e-12));
    CHECK(rp.recall == doctest::Approx(rep.recall).epsilon(1e-12));
    CHECK(rp.precision == doctest::Approx(rep.precision).epsilon(1e-12));
    CHECK(rp.f_score == doctest::Approx(rep.f_score).epsilon(1e-12));
    CHECK(rp.auc == doctest::Approx(rep.auc).epsilon(1e-12));
  }
  CHECK(worst < 1e-12);
}
