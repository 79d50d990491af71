// fulora: command-line front end for the pipeline.
//
// Exit codes: 0 success, 1 usage or config error, 2 data or filesystem
// error, 3 numerical failure.

#include <deque>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fulora/error.hpp"
#include "fulora/experiment.hpp"
#include "fulora/io_util.hpp"
#include "fulora/log.hpp"

namespace fs = std::filesystem;
using namespace fulora;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;

  ExperimentConfig load() const {
    return load_config(config.empty() ? std::nullopt : std::optional<fs::path>(config), sets, seed);
  }
};

Common& add_common(std::deque<Common>& all, CLI::App* cmd, const std::string& default_out) {
  Common& c = all.emplace_back();
  c.out = default_out;
  cmd->add_option("--config", c.config, "JSON experiment config");
  cmd->add_option("--set", c.sets, "Override a config leaf, e.g. --set finetune.rank=32 (repeatable)");
  cmd->add_option("--seed", c.seed, "Master seed (overrides seeds.master)");
  cmd->add_option("--out", c.out, "Run directory; relative paths go under $FULORA_RUN_DIR, else ./runs")
      ->capture_default_str();
  return c;
}

void require_file(const std::string& p, const std::string& what) {
  if (p.empty()) throw DataError(what + " not given");
  if (!fs::exists(p)) throw DataError(what + " not found: " + p);
}

nlohmann::ordered_json seeds_json(const ExperimentConfig& cfg) {
  auto j = ComponentSeeds::from_master(cfg.seeds.master).to_json();
  j["master"] = cfg.seeds.master;
  return j;
}

int cmd_toy_make(const Common& c, const std::string& style, int n, const std::string& planes) {
  const ExperimentConfig cfg = c.load();
  const ToyStyle s = toy_style_from_string(style);
  RunDir run(resolve_run_dir(c.out));
  std::string spec = "toy:" + style + ":" + std::to_string(n);
  if (!planes.empty()) spec += ":" + planes;
  const auto seeds = ComponentSeeds::from_master(cfg.seeds.master);
  const DatasetManifest m = resolve_data(spec, toy_domain(s), cfg.model.unet.image_size, seeds.toy, run.root());
  run.record(run.path("manifest.csv"));
  run.finish("toy-make", cfg.to_json(), seeds_json(cfg));
  std::cout << m.size() << " images, manifest " << run.path("manifest.csv").string() << "\n";
  return 0;
}

int cmd_pretrain(const Common& c, std::string data) {
  const ExperimentConfig cfg = c.load();
  if (data.empty()) data = cfg.paths.source;
  RunDir run(resolve_run_dir(c.out));
  const auto seeds = ComponentSeeds::from_master(cfg.seeds.master);
  const int side = cfg.model.unet.image_size;
  const DatasetManifest m = resolve_data(data, Domain::Source, side, seeds.toy, run.path("data"));
  PretrainConfig pc{cfg.model.pretrain_steps, cfg.model.pretrain_batch_size, cfg.model.pretrain_lr, seeds.pretrain};
  const PretrainResult r = train_base_model(load_labeled(m, side), cfg.model.unet, cfg.schedule, pc);
  save_base_model(r.model, run.path("base.ckpt"));
  run.record(run.path("base.ckpt"));
  run.write("loss.csv", loss_csv(r.loss));
  run.finish("pretrain", cfg.to_json(), seeds_json(cfg));
  std::cout << "base model " << run.path("base.ckpt").string() << "\n";
  return 0;
}

int cmd_finetune(const Common& c, const std::string& base_path, std::string data) {
  require_file(base_path, "base checkpoint (--base)");
  const ExperimentConfig cfg = c.load();
  if (data.empty()) data = cfg.paths.finetune;
  const BaseModel base = load_base_model(base_path);
  RunDir run(resolve_run_dir(c.out));
  const auto seeds = ComponentSeeds::from_master(cfg.seeds.master);
  const int side = base.net.config().image_size;
  const DatasetManifest m = resolve_data(data, Domain::Finetune, side, seeds.toy, run.path("data"));
  FinetuneConfig fc = cfg.finetune.cfg;
  fc.seed = derive_seed(seeds.finetune, static_cast<std::uint64_t>(fc.rank));
  const FinetuneResult r = finetune_lora(base, load_labeled(m, side), fc);
  save_adapter_bundle(r.adapter, run.path("adapter.ckpt"));
  run.record(run.path("adapter.ckpt"));
  run.write("loss.csv", loss_csv(r.loss));
  run.finish("finetune-lora", cfg.to_json(), seeds_json(cfg));
  std::cout << r.total_steps << " steps, " << r.trainable_elements << " trainable parameters, adapter "
            << run.path("adapter.ckpt").string() << "\n";
  return 0;
}

int cmd_generate(const Common& c, const std::string& base_path, const std::string& adapter_path,
                 std::optional<int> workers) {
  require_file(base_path, "base checkpoint (--base)");
  const ExperimentConfig cfg = c.load();
  const BaseModel base = load_base_model(base_path);
  GenSpec gs = cfg.genspec;
  if (workers) gs.workers = *workers;
  gs.seed = ComponentSeeds::from_master(cfg.seeds.master).generate;
  gs.validate();
  UNet model = base.net.clone();
  if (!adapter_path.empty()) {
    require_file(adapter_path, "adapter checkpoint (--adapter)");
    model = adapted_model(base, load_adapter_bundle(adapter_path), gs.lora_weight);
  }
  RunDir run(resolve_run_dir(c.out));
  const DatasetManifest m = generate_synthetic(model, base.schedule, gs, run.root());
  run.record(run.path("manifest.csv"));
  run.record(run.path("seeds.csv"));
  run.finish("generate", cfg.to_json(), seeds_json(cfg));
  std::cout << m.size() << " images, manifest " << run.path("manifest.csv").string() << "\n";
  return 0;
}

int cmd_build_hybrid(const Common& c, const std::string& real_spec, const std::string& synth_path) {
  require_file(synth_path, "synthetic manifest (--synthetic)");
  const ExperimentConfig cfg = c.load();
  RunDir run(resolve_run_dir(c.out));
  const auto seeds = ComponentSeeds::from_master(cfg.seeds.master);
  const std::string spec = real_spec.empty() ? cfg.paths.source : real_spec;
  const DatasetManifest real = resolve_data(spec, Domain::Source, cfg.model.unet.image_size, seeds.toy, run.path("data"));
  const DatasetManifest synth = DatasetManifest::read_csv(synth_path);
  HybridSpec hs = cfg.hybrid;
  if (hs.real_count < 0) hs.real_count = static_cast<int>(real.size());
  hs.seed = seeds.hybrid;
  const DatasetManifest h = build_hybrid(real, synth, hs);
  h.write_csv(run.path("manifest.csv"));
  run.record(run.path("manifest.csv"));
  run.finish("build-hybrid", cfg.to_json(), seeds_json(cfg));
  std::cout << h.size() << " records, manifest " << run.path("manifest.csv").string() << "\n";
  return 0;
}

int cmd_train_classifier(const Common& c, const std::string& train_spec, const std::string& arch_name, bool augment) {
  const ExperimentConfig cfg = c.load();
  const Arch arch = arch_from_string(arch_name);
  RunDir run(resolve_run_dir(c.out));
  const auto seeds = ComponentSeeds::from_master(cfg.seeds.master);
  const std::string spec = train_spec.empty() ? cfg.paths.source : train_spec;
  const DatasetManifest train = resolve_data(spec, Domain::Source, cfg.model.unet.image_size, seeds.toy, run.path("data"));
  const TrainedClassifier tc = train_condition(train, arch, augment, cfg, derive_seed(seeds.classifier, to_string(arch)));
  tc.model.save(run.path("model.ckpt"));
  run.record(run.path("model.ckpt"));
  run.write("history.csv", history_csv(tc.history));
  run.finish("train-classifier", cfg.to_json(), seeds_json(cfg));
  std::cout << "classifier " << run.path("model.ckpt").string() << "\n";
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& model_path, const std::string& test_spec) {
  require_file(model_path, "classifier checkpoint (--model)");
  const ExperimentConfig cfg = c.load();
  const Classifier model = Classifier::load(model_path);
  RunDir run(resolve_run_dir(c.out));
  const auto seeds = ComponentSeeds::from_master(cfg.seeds.master);
  const std::string spec = test_spec.empty() ? cfg.paths.target : test_spec;
  const DatasetManifest test = resolve_data(spec, Domain::Target, model.image_size(), seeds.toy, run.path("data"));
  const MetricsReport rep = evaluate(model, load_labeled(test, model.image_size()));
  run.write("metrics.json", metrics_json(rep));
  run.write("metrics.csv", metrics_csv_header() + metrics_csv_row(spec, to_string(model.arch()), rep));
  run.finish("evaluate", cfg.to_json(), seeds_json(cfg));
  std::cout << metrics_csv_header() << metrics_csv_row(spec, to_string(model.arch()), rep);
  return 0;
}

int cmd_tsne(const Common& c, const std::string& model_path, const std::vector<std::string>& manifests) {
  require_file(model_path, "classifier checkpoint (--model)");
  if (manifests.empty()) throw ConfigError("tsne: give at least one --data manifest");
  const ExperimentConfig cfg = c.load();
  const Classifier model = Classifier::load(model_path);
  const auto seeds = ComponentSeeds::from_master(cfg.seeds.master);
  std::vector<DatasetManifest> sources;
  for (const auto& p : manifests) {
    require_file(p, "manifest");
    sources.push_back(DatasetManifest::read_csv(p));
  }
  RunDir run(resolve_run_dir(c.out));
  const DatasetManifest subset = select_eval_subset(sources, cfg.tsne.per_plane, kEvalPlanes, seeds.subset);
  const FeatureMatrix feats = extract_features(model, {subset});
  TsneConfig tc = cfg.tsne.cfg;
  tc.seed = seeds.tsne;
  const TsneResult r = tsne(feats, tc);
  for (const auto& f : emit_scatter(r, feats, run.root())) run.record(f);
  run.write("kl.csv", kl_trace_csv(r));
  run.finish("tsne", cfg.to_json(), seeds_json(cfg));
  std::cout << feats.n << " points, KL " << r.kl_trace.front().kl << " -> " << r.kl_trace.back().kl << "\n";
  return 0;
}

int cmd_run_experiment(const Common& c) {
  const ExperimentConfig cfg = c.load();
  const ExperimentResult r = run_experiment(cfg, resolve_run_dir(c.out));
  std::cout << read_file(r.run_dir / "summary.csv");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fulora: diffusion + LoRA synthetic data pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  bool verbose = false, quiet = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");
  app.add_flag("-q,--quiet", quiet, "Warnings and errors only");

  std::deque<Common> commons;
  std::function<int()> action;

  auto* toy = app.add_subcommand("toy-make", "Render a procedural toy corpus");
  std::string style = "A", planes;
  int n_per_class = 60;
  Common& c_toy = add_common(commons, toy, "toy");
  toy->add_option("--style", style, "Toy style: A, B or C")->capture_default_str();
  toy->add_option("--n", n_per_class, "Images per plane")->capture_default_str();
  toy->add_option("--planes", planes, "Comma-separated plane codes to keep, e.g. AB,BR,FE,TH");
  toy->callback([&] { action = [&] { return cmd_toy_make(c_toy, style, n_per_class, planes); }; });

  std::string data;
  auto* pre = app.add_subcommand("pretrain", "Train the base denoiser on source data");
  Common& c_pre = add_common(commons, pre, "pretrain");
  pre->add_option("--data", data, "Directory, manifest.csv or toy spec (default paths.source)");
  pre->callback([&] { action = [&] { return cmd_pretrain(c_pre, data); }; });

  std::string base_path, adapter_path;
  auto* ft = app.add_subcommand("finetune-lora", "Fine-tune LoRA adapters on a pretrained base");
  Common& c_ft = add_common(commons, ft, "lora");
  ft->add_option("--base", base_path, "Base checkpoint from pretrain");
  ft->add_option("--data", data, "Fine-tuning data (default paths.finetune)");
  ft->callback([&] { action = [&] { return cmd_finetune(c_ft, base_path, data); }; });

  std::optional<int> workers;
  auto* gen = app.add_subcommand("generate", "Sample a synthetic corpus");
  Common& c_gen = add_common(commons, gen, "synthetic");
  gen->add_option("--base", base_path, "Base checkpoint");
  gen->add_option("--adapter", adapter_path, "Adapter checkpoint (omit to sample the base)");
  gen->add_option("--workers", workers, "Worker threads; output does not depend on it");
  gen->callback([&] { action = [&] { return cmd_generate(c_gen, base_path, adapter_path, workers); }; });

  std::string synth_path;
  auto* hyb = app.add_subcommand("build-hybrid", "Mix a real subset with synthetic records");
  Common& c_hyb = add_common(commons, hyb, "hybrid");
  hyb->add_option("--real", data, "Real data (default paths.source)");
  hyb->add_option("--synthetic", synth_path, "Synthetic manifest.csv from generate");
  hyb->callback([&] { action = [&] { return cmd_build_hybrid(c_hyb, data, synth_path); }; });

  std::string arch = "cnn_small";
  bool augment = false;
  auto* tc = app.add_subcommand("train-classifier", "Train a plane classifier");
  Common& c_tc = add_common(commons, tc, "classifier");
  tc->add_option("--train", data, "Training data (default paths.source)");
  tc->add_option("--arch", arch, "cnn_small, resnet_mini or vit_mini")->capture_default_str();
  tc->add_flag("--augment", augment, "Apply classifier.augmentation while training");
  tc->callback([&] { action = [&] { return cmd_train_classifier(c_tc, data, arch, augment); }; });

  std::string model_path;
  auto* ev = app.add_subcommand("evaluate", "Score a classifier on test data");
  Common& c_ev = add_common(commons, ev, "evaluate");
  ev->add_option("--model", model_path, "Classifier checkpoint");
  ev->add_option("--test", data, "Test data (default paths.target)");
  ev->callback([&] { action = [&] { return cmd_evaluate(c_ev, model_path, data); }; });

  std::vector<std::string> manifests;
  auto* ts = app.add_subcommand("tsne", "Embed classifier features of several manifests in 2-D");
  Common& c_ts = add_common(commons, ts, "tsne");
  ts->add_option("--model", model_path, "Classifier checkpoint used as the feature extractor");
  ts->add_option("--data", manifests, "Manifest files (repeatable)");
  ts->callback([&] { action = [&] { return cmd_tsne(c_ts, model_path, manifests); }; });

  auto* run = app.add_subcommand("run-experiment", "Whole pipeline from data to summary.csv");
  Common& c_run = add_common(commons, run, "experiment");
  run->callback([&] { action = [&] { return cmd_run_experiment(c_run); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  log::set_level(verbose ? log::Level::Debug : quiet ? log::Level::Warn : log::Level::Info);
  try {
    return action();
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "filesystem error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
