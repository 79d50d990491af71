#include <set>

#include "doctest.h"
#include "fulora/error.hpp"
#include "fulora/experiment.hpp"
#include "fulora/io_util.hpp"
#include "support.hpp"

using namespace fulora;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config() {
  return load_config(std::nullopt, {"model.base_channels=8", "model.context_dim=16", "model.pretrain_steps=20",
                                    "model.pretrain_batch_size=4", "finetune.rank=4", "finetune.alpha=4",
                                    "finetune.steps_per_image=1", "finetune.rank_sweep=[2,4]",
                                    "genspec.per_plane_per_sampler=2", "genspec.steps=4", "classifier.epochs=1",
                                    "classifier.batch_size=8", "tsne.per_plane=3", "tsne.iters=40",
                                    "tsne.perplexity=2", "tsne.exaggeration_iters=10", "tsne.momentum_switch=10",
                                    "paths.source=toy:A:4", "paths.finetune=toy:B:2", "paths.target=toy:C:3:AB,BR,FE,TH"});
}

}  // namespace

TEST_CASE("config defaults round-trip through json") {
  const ExperimentConfig d;
  const auto j = d.to_json();
  for (const char* s : {"schedule", "model", "finetune", "genspec", "hybrid", "classifier", "tsne", "paths", "seeds"})
    CHECK(j.contains(s));
  CHECK(ExperimentConfig::from_json(j).to_json() == j);
  CHECK(ExperimentConfig::from_json(nlohmann::ordered_json::object()).to_json() == j);
  CHECK(j["genspec"]["prompts"].size() == kNumPlanes);
  CHECK(j["model"]["pretrain_lr"].get<double>() == 0.002);
}

TEST_CASE("config rejects unknown keys and bad values") {
  auto with = [](const std::string& text) { return ExperimentConfig::from_json(nlohmann::ordered_json::parse(text)); };
  CHECK_THROWS_AS(with(R"({"finetun": {}})"), ConfigError);
  CHECK_THROWS_AS(with(R"({"finetune": {"rnk": 8}})"), ConfigError);
  CHECK_THROWS_AS(with(R"({"classifier": {"augmentation": {"p_hflp": 0.5}}})"), ConfigError);
  CHECK_THROWS_AS(with(R"({"finetune": {"rank": "eight"}})"), ConfigError);
  CHECK_THROWS_AS(with(R"({"finetune": {"rank": 16}})"), ConfigError);  // not in the sweep
  CHECK_THROWS_AS(with(R"({"finetune": {"lr_schedule": "cosine"}})"), ConfigError);
  CHECK_THROWS_AS(with(R"({"genspec": {"samplers": ["heun"]}})"), ConfigError);
  CHECK_THROWS_AS(with(R"({"classifier": {"archs": ["cnn_small", "cnn_small"]}})"), ConfigError);
  CHECK_THROWS_AS(with(R"({"tsne": {"embedder": "hybrid/alexnet"}})"), ConfigError);
  CHECK_THROWS_AS(with(R"({"classifier": {"augmentation": {"p_vflip": 1.5}}})"), ConfigError);
  try {
    with(R"({"finetune": {"rnk": 8}})");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("finetune.rnk") != std::string::npos);
  }
}

TEST_CASE("config overrides and file merge") {
  testing::TempDir tmp("cfg");
  write_file_atomic(tmp / "c.json", R"({"finetune": {"rank": 32, "alpha": 32}, "seeds": {"master": 5}})");
  auto c = load_config(tmp / "c.json", {"finetune.lr=0.0005", "paths.target=toy:C:10", "classifier.archs=[\"vit_mini\"]"});
  CHECK(c.finetune.cfg.rank == 32);
  CHECK(c.finetune.cfg.lr == doctest::Approx(5e-4));
  CHECK(c.finetune.cfg.steps_per_image == 10);  // untouched default
  CHECK(c.paths.target == "toy:C:10");
  CHECK(c.classifier.archs == std::vector<Arch>{Arch::VitMini});
  CHECK(c.seeds.master == 5);
  CHECK(load_config(tmp / "c.json", {}, 9).seeds.master == 9);

  CHECK_THROWS_AS(load_config(std::nullopt, {"finetune.rnk=3"}), ConfigError);
  CHECK_THROWS_AS(load_config(std::nullopt, {"finetune=3"}), ConfigError);
  CHECK_THROWS_AS(load_config(std::nullopt, {"noequals"}), ConfigError);
  CHECK_THROWS_AS(load_config(tmp / "missing.json"), DataError);
  write_file_atomic(tmp / "bad.json", "{ not json");
  CHECK_THROWS_AS(load_config(tmp / "bad.json"), ConfigError);

  // A resolved config reloads to itself.
  write_file_atomic(tmp / "full.json", c.to_json().dump(2));
  CHECK(load_config(tmp / "full.json").to_json() == c.to_json());
}

TEST_CASE("component seeds") {
  const auto a = ComponentSeeds::from_master(0), b = ComponentSeeds::from_master(1);
  CHECK(a.pretrain == derive_seed(0, "pretrain"));
  CHECK(a.classifier == derive_seed(0, "classifier"));
  CHECK(a.pretrain != b.pretrain);
  const std::set<std::uint64_t> all{a.toy, a.pretrain, a.finetune, a.generate, a.hybrid, a.classifier, a.tsne, a.subset};
  CHECK(all.size() == 8);
}

TEST_CASE("run directory root") {
  ::setenv("FULORA_RUN_DIR", "/tmp/somewhere", 1);
  CHECK(resolve_run_dir("x") == fs::path("/tmp/somewhere/x"));
  CHECK(resolve_run_dir("/abs/y") == fs::path("/abs/y"));
  ::unsetenv("FULORA_RUN_DIR");
  CHECK(resolve_run_dir("x") == fs::path("runs/x"));
}

TEST_CASE("summary csv layout") {
  MetricsReport r;
  r.accuracy = 82.4;
  r.recall = 80.125;
  r.precision = 90;
  r.f_score = 86.5449;
  r.auc = 89.775;
  SummaryRow row{"hybrid", "resnet_mini", 100, 500, 12, r};
  MetricsReport skipped = r;
  skipped.auc_skipped = true;
  skipped.auc = std::nan("");
  SummaryRow row2{"source-only", "vit_mini", 100, 0, 12, skipped};
  CHECK(summary_csv({row, row2}) ==
        "data,model,n_real,n_synthetic,n_patients,acc,recall,precision,fscore,auc\n"
        "hybrid,resnet_mini,100,500,12,82.40,80.12,90.00,86.54,89.78\n"
        "source-only,vit_mini,100,0,12,82.40,80.12,90.00,86.54,NA\n");
  CHECK(rank_sweep_csv({{8, 8.0f, 1234, 0.5}}) == "rank,alpha,trainable_params,final_loss\n8,8,1234,0.500000\n");
}

TEST_CASE("toy data specs") {
  testing::TempDir tmp("spec");
  const auto m = resolve_data("toy:C:3:AB,TH", Domain::Target, 16, 1, tmp / "c");
  CHECK(m.size() == 6);
  for (const auto& r : m) {
    CHECK(r.domain == Domain::Target);
    CHECK((r.label == PlaneLabel::AB || r.label == PlaneLabel::TH));
  }
  CHECK(DatasetManifest::read_csv(tmp / "c/manifest.csv") == m);
  CHECK_THROWS_AS(resolve_data("toy:Q:3", Domain::Source, 16, 1, tmp / "q"), ConfigError);
  CHECK_THROWS_AS(resolve_data("toy:A", Domain::Source, 16, 1, tmp / "q"), ConfigError);
  CHECK_THROWS_AS(resolve_data((tmp / "nope").string(), Domain::Source, 16, 1, tmp / "q"), DataError);
}

TEST_CASE("tiny experiment end to end") {
  testing::TempDir tmp("exp");
  const ExperimentConfig cfg = tiny_config();
  const auto res = run_experiment(cfg, tmp / "a");
  REQUIRE(res.rows.size() == 9);
  CHECK(res.sweep.size() == 2);
  const std::string summary = read_file(tmp / "a/summary.csv");
  const auto rows = parse_csv(summary);
  REQUIRE(rows.size() == 10);
  std::set<std::pair<std::string, std::string>> cells;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    cells.insert({rows[i][0], rows[i][1]});
    CHECK(rows[i][3] == (rows[i][0] == "source-only" ? "0" : "20"));
  }
  CHECK(cells.size() == 9);

  for (const char* f : {"config.json", "outputs.json", "base/base.ckpt", "lora/r2/adapter.ckpt", "lora/r4/adapter.ckpt",
                        "rank_sweep.csv", "synthetic/manifest.csv", "hybrid/manifest.csv", "tsne/r2/tsne.csv",
                        "tsne/r4/tsne.csv", "classifiers/hybrid+aug/vit_mini/metrics.json"})
    CHECK_MESSAGE(fs::exists(tmp / "a" / f), f);
  const auto outputs = nlohmann::json::parse(read_file(tmp / "a/outputs.json"));
  CHECK(outputs["command"] == "run-experiment");
  auto listed = outputs["outputs"].get<std::vector<std::string>>();
  CHECK(std::is_sorted(listed.begin(), listed.end()));
  for (const auto& p : listed) CHECK_MESSAGE(fs::exists(tmp / "a" / p), p);

  // The run directory alone reproduces the run.
  const auto again = load_config(tmp / "a/config.json");
  run_experiment(again, tmp / "b");
  CHECK(read_file(tmp / "b/summary.csv") == summary);
  CHECK(read_file(tmp / "b/rank_sweep.csv") == read_file(tmp / "a/rank_sweep.csv"));
}
