#include "fulora/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <set>
#include <sstream>

#include "fulora/error.hpp"
#include "fulora/io_util.hpp"
#include "fulora/log.hpp"

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace fulora {

// ---------------------------------------------------------------- json plumbing

namespace {

// Reads the keys of one object and rejects whatever is left over.
class Section {
 public:
  Section(const ojson& parent, const std::string& name, const std::string& prefix = "")
      : path_(prefix.empty() ? name : prefix + "." + name) {
    if (!parent.contains(name)) {
      obj_ = ojson::object();
      return;
    }
    obj_ = parent.at(name);
    if (!obj_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
  }
  Section(std::string path, const ojson& obj) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
  }

  template <class T>
  void take(const std::string& key, T& dst) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      dst = obj_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config: '" + join(key) + "' has the wrong type (" + obj_.at(key).dump() + ")");
    }
  }

  bool has(const std::string& key) const { return obj_.contains(key); }
  const ojson& raw(const std::string& key) {
    seen_.insert(key);
    return obj_.at(key);
  }
  Section child(const std::string& key) {
    seen_.insert(key);
    return Section(obj_, key, path_);
  }
  const std::string& path() const { return path_; }
  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void done() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("config: unknown key '" + join(it.key()) + "'");
    }
  }

 private:
  ojson obj_;
  std::string path_;
  std::set<std::string> seen_;
};

void merge_into(ojson& base, const ojson& patch) {
  if (!patch.is_object() || !base.is_object()) {
    base = patch;
    return;
  }
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (base.contains(it.key()) && base[it.key()].is_object() && it.value().is_object())
      merge_into(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

// Shortest decimal form, so 2e-3f is written as 0.002.
double num(float f) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, f);
  return std::strtod(std::string(buf, r.ptr).c_str(), nullptr);
}

}  // namespace

ojson ExperimentConfig::to_json() const {
  ojson j;
  j["schedule"] = {{"steps", schedule.steps}, {"beta_start", schedule.beta_start}, {"beta_end", schedule.beta_end}};

  const UNetConfig& u = model.unet;
  j["model"] = {{"image_size", u.image_size},
                {"base_channels", u.base_channels},
                {"channel_mults", u.channel_mults},
                {"attention_levels", std::vector<int>(u.attention_levels.begin(), u.attention_levels.end())},
                {"context_dim", u.context_dim},
                {"num_heads", u.num_heads},
                {"pretrain_steps", model.pretrain_steps},
                {"pretrain_batch_size", model.pretrain_batch_size},
                {"pretrain_lr", num(model.pretrain_lr)}};

  const FinetuneConfig& f = finetune.cfg;
  j["finetune"] = {{"batch_size", f.batch_size},
                   {"epochs", f.epochs},
                   {"lr", num(f.lr)},
                   {"lr_schedule", "constant"},
                   {"rank", f.rank},
                   {"alpha", num(f.alpha)},
                   {"steps_per_image", f.steps_per_image},
                   {"train_prompt_embeddings", f.train_prompt_embeddings},
                   {"targets", f.targets},
                   {"rank_sweep", finetune.rank_sweep}};

  std::vector<std::string> samplers, planes;
  for (auto k : genspec.samplers) samplers.push_back(to_string(k));
  for (auto p : genspec.planes) planes.push_back(to_string(p));
  ojson prompts = ojson::object();
  for (auto p : kAllPlanes) prompts[to_string(p)] = genspec.prompt_for(p);
  j["genspec"] = {{"per_plane_per_sampler", genspec.per_plane_per_sampler},
                  {"samplers", samplers},
                  {"planes", planes},
                  {"prompts", prompts},
                  {"steps", genspec.steps},
                  {"lora_weight", num(genspec.lora_weight)},
                  {"unipc_order", genspec.unipc_order},
                  {"batch_size", genspec.batch_size},
                  {"workers", genspec.workers}};

  j["hybrid"] = {{"real_count", hybrid.real_count}, {"synthetic_count", hybrid.synthetic_count}};

  std::vector<std::string> archs;
  for (auto a : classifier.archs) archs.push_back(to_string(a));
  const AugPolicy& a = classifier.augmentation;
  j["classifier"] = {{"archs", archs},
                     {"epochs", classifier.epochs},
                     {"batch_size", classifier.batch_size},
                     {"lr", num(classifier.lr)},
                     {"momentum", num(classifier.momentum)},
                     {"val_fraction", classifier.val_fraction},
                     {"augmentation",
                      {{"rotation_min_deg", a.rotation_min_deg},
                       {"rotation_max_deg", a.rotation_max_deg},
                       {"p_hflip", a.p_hflip},
                       {"p_vflip", a.p_vflip}}}};

  const TsneConfig& t = tsne.cfg;
  j["tsne"] = {{"enabled", tsne.enabled},
               {"perplexity", t.perplexity},
               {"iters", t.iters},
               {"early_exaggeration", t.early_exaggeration},
               {"exaggeration_iters", t.exaggeration_iters},
               {"learning_rate", t.learning_rate},
               {"momentum_initial", t.momentum_initial},
               {"momentum_final", t.momentum_final},
               {"momentum_switch", t.momentum_switch},
               {"per_plane", tsne.per_plane},
               {"embedder", tsne.embedder}};

  j["paths"] = {{"source", paths.source}, {"finetune", paths.finetune}, {"target", paths.target}};
  j["seeds"] = {{"master", seeds.master}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const ojson& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  ExperimentConfig c;
  Section root(std::string(), j);

  {
    Section s = root.child("schedule");
    s.take("steps", c.schedule.steps);
    s.take("beta_start", c.schedule.beta_start);
    s.take("beta_end", c.schedule.beta_end);
    s.done();
  }
  {
    Section s = root.child("model");
    UNetConfig& u = c.model.unet;
    s.take("image_size", u.image_size);
    s.take("base_channels", u.base_channels);
    s.take("channel_mults", u.channel_mults);
    std::vector<int> attn(u.attention_levels.begin(), u.attention_levels.end());
    s.take("attention_levels", attn);
    u.attention_levels = std::set<int>(attn.begin(), attn.end());
    s.take("context_dim", u.context_dim);
    s.take("num_heads", u.num_heads);
    s.take("pretrain_steps", c.model.pretrain_steps);
    s.take("pretrain_batch_size", c.model.pretrain_batch_size);
    s.take("pretrain_lr", c.model.pretrain_lr);
    s.done();
  }
  {
    Section s = root.child("finetune");
    FinetuneConfig& f = c.finetune.cfg;
    s.take("batch_size", f.batch_size);
    s.take("epochs", f.epochs);
    s.take("lr", f.lr);
    std::string sched = "constant";
    s.take("lr_schedule", sched);
    if (sched != "constant") throw ConfigError("config: finetune.lr_schedule supports only \"constant\"");
    s.take("rank", f.rank);
    s.take("alpha", f.alpha);
    s.take("steps_per_image", f.steps_per_image);
    s.take("train_prompt_embeddings", f.train_prompt_embeddings);
    s.take("targets", f.targets);
    s.take("rank_sweep", c.finetune.rank_sweep);
    s.done();
  }
  {
    Section s = root.child("genspec");
    GenSpec& g = c.genspec;
    s.take("per_plane_per_sampler", g.per_plane_per_sampler);
    std::vector<std::string> names;
    if (s.has("samplers")) {
      s.take("samplers", names);
      g.samplers.clear();
      for (const auto& n : names) g.samplers.push_back(sampler_from_string(n));
    }
    if (s.has("planes")) {
      names.clear();
      s.take("planes", names);
      g.planes.clear();
      for (const auto& n : names) g.planes.push_back(plane_from_string(n));
    }
    if (s.has("prompts")) {
      Section p = s.child("prompts");
      for (auto plane : kAllPlanes) {
        std::string text = g.prompt_for(plane);
        p.take(to_string(plane), text);
        if (text != plane_prompt(plane)) g.prompts[plane] = text;
      }
      p.done();
    }
    s.take("steps", g.steps);
    s.take("lora_weight", g.lora_weight);
    s.take("unipc_order", g.unipc_order);
    s.take("batch_size", g.batch_size);
    s.take("workers", g.workers);
    s.done();
  }
  {
    Section s = root.child("hybrid");
    s.take("real_count", c.hybrid.real_count);
    s.take("synthetic_count", c.hybrid.synthetic_count);
    s.done();
  }
  {
    Section s = root.child("classifier");
    ClassifierSection& k = c.classifier;
    if (s.has("archs")) {
      std::vector<std::string> names;
      s.take("archs", names);
      k.archs.clear();
      for (const auto& n : names) k.archs.push_back(arch_from_string(n));
    }
    s.take("epochs", k.epochs);
    s.take("batch_size", k.batch_size);
    s.take("lr", k.lr);
    s.take("momentum", k.momentum);
    s.take("val_fraction", k.val_fraction);
    if (s.has("augmentation")) {
      Section a = s.child("augmentation");
      a.take("rotation_min_deg", k.augmentation.rotation_min_deg);
      a.take("rotation_max_deg", k.augmentation.rotation_max_deg);
      a.take("p_hflip", k.augmentation.p_hflip);
      a.take("p_vflip", k.augmentation.p_vflip);
      a.done();
    }
    s.done();
  }
  {
    Section s = root.child("tsne");
    TsneConfig& t = c.tsne.cfg;
    s.take("enabled", c.tsne.enabled);
    s.take("perplexity", t.perplexity);
    s.take("iters", t.iters);
    s.take("early_exaggeration", t.early_exaggeration);
    s.take("exaggeration_iters", t.exaggeration_iters);
    s.take("learning_rate", t.learning_rate);
    s.take("momentum_initial", t.momentum_initial);
    s.take("momentum_final", t.momentum_final);
    s.take("momentum_switch", t.momentum_switch);
    s.take("per_plane", c.tsne.per_plane);
    s.take("embedder", c.tsne.embedder);
    s.done();
  }
  {
    Section s = root.child("paths");
    s.take("source", c.paths.source);
    s.take("finetune", c.paths.finetune);
    s.take("target", c.paths.target);
    s.done();
  }
  {
    Section s = root.child("seeds");
    s.take("master", c.seeds.master);
    s.done();
  }
  root.done();
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  schedule.validate();
  model.unet.validate();
  PretrainConfig{model.pretrain_steps, model.pretrain_batch_size, model.pretrain_lr, 0}.validate();
  finetune.cfg.validate();
  if (finetune.rank_sweep.empty()) throw ConfigError("config: finetune.rank_sweep must not be empty");
  for (int r : finetune.rank_sweep)
    if (r < 1) throw ConfigError("config: finetune.rank_sweep entries must be >= 1");
  if (std::set<int>(finetune.rank_sweep.begin(), finetune.rank_sweep.end()).size() != finetune.rank_sweep.size())
    throw ConfigError("config: finetune.rank_sweep lists a rank twice");
  if (std::find(finetune.rank_sweep.begin(), finetune.rank_sweep.end(), finetune.cfg.rank) == finetune.rank_sweep.end())
    throw ConfigError("config: finetune.rank must be one of finetune.rank_sweep");
  genspec.validate();
  if (genspec.steps < 1 || genspec.steps > schedule.steps)
    throw ConfigError("config: genspec.steps must lie in [1, schedule.steps]");
  if (genspec.unipc_order < 1 || genspec.unipc_order > 3 || genspec.unipc_order > genspec.steps)
    throw ConfigError("config: genspec.unipc_order must be 1, 2 or 3 and <= genspec.steps");
  if (hybrid.real_count < -1) throw ConfigError("config: hybrid.real_count must be >= 0, or -1 for all");
  if (hybrid.synthetic_count < -1) throw ConfigError("config: hybrid.synthetic_count must be >= 0, or -1 for all");
  if (classifier.archs.empty()) throw ConfigError("config: classifier.archs must not be empty");
  if (std::set<Arch>(classifier.archs.begin(), classifier.archs.end()).size() != classifier.archs.size())
    throw ConfigError("config: classifier.archs lists an arch twice");
  ClassifierConfig cc;
  cc.epochs = classifier.epochs;
  cc.batch_size = classifier.batch_size;
  cc.lr = classifier.lr;
  cc.momentum = classifier.momentum;
  cc.image_size = model.unet.image_size;
  cc.validate();
  if (!(classifier.val_fraction >= 0.0 && classifier.val_fraction < 1.0))
    throw ConfigError("config: classifier.val_fraction must lie in [0, 1)");
  classifier.augmentation.validate();
  if (tsne.per_plane < 2) throw ConfigError("config: tsne.per_plane must be >= 2");
  if (tsne.cfg.iters < 1) throw ConfigError("config: tsne.iters must be >= 1");
  if (tsne.embedder != "best") {
    const auto parts = split(tsne.embedder, '/');
    if (parts.size() != 2 || std::find(kDataConditions.begin(), kDataConditions.end(), parts[0]) == kDataConditions.end())
      throw ConfigError("config: tsne.embedder must be \"best\" or \"<data>/<arch>\", got '" + tsne.embedder + "'");
    const Arch a = arch_from_string(parts[1]);
    if (std::find(classifier.archs.begin(), classifier.archs.end(), a) == classifier.archs.end())
      throw ConfigError("config: tsne.embedder names an arch that is not trained");
  }
  if (paths.source.empty() || paths.finetune.empty() || paths.target.empty())
    throw ConfigError("config: paths.source, paths.finetune and paths.target must be set");
}

ExperimentConfig load_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides,
                             std::optional<std::uint64_t> master_seed) {
  ojson doc = ExperimentConfig{}.to_json();
  if (file) {
    if (!fs::exists(*file)) throw DataError("config file not found: " + file->string());
    ojson user;
    try {
      user = ojson::parse(read_file(*file));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config: " + file->string() + " is not valid JSON: " + e.what());
    }
    if (!user.is_object()) throw ConfigError("config: top level must be a JSON object");
    // Unknown keys are caught by from_json on the merged document.
    ExperimentConfig::from_json(user);
    merge_into(doc, user);
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key.path=value, got '" + o + "'");
    const std::string key = o.substr(0, eq), text = o.substr(eq + 1);
    ojson* node = &doc;
    for (const auto& part : split(key, '.')) {
      if (!node->is_object() || !node->contains(part)) throw ConfigError("--set: unknown key '" + key + "'");
      node = &(*node)[part];
    }
    if (node->is_object()) throw ConfigError("--set: '" + key + "' is a section, not a value");
    ojson value;
    try {
      value = ojson::parse(text);
    } catch (const nlohmann::json::parse_error&) {
      value = text;
    }
    *node = value;
  }
  if (master_seed) doc["seeds"]["master"] = *master_seed;
  return ExperimentConfig::from_json(doc);
}

ComponentSeeds ComponentSeeds::from_master(std::uint64_t m) {
  return {derive_seed(m, "toy"),      derive_seed(m, "pretrain"),   derive_seed(m, "finetune"),
          derive_seed(m, "generate"), derive_seed(m, "hybrid"),     derive_seed(m, "classifier"),
          derive_seed(m, "tsne"),     derive_seed(m, "eval.subset")};
}

ojson ComponentSeeds::to_json() const {
  return {{"toy", toy},           {"pretrain", pretrain},     {"finetune", finetune}, {"generate", generate},
          {"hybrid", hybrid},     {"classifier", classifier}, {"tsne", tsne},         {"subset", subset}};
}

// ---------------------------------------------------------------- run directory

fs::path run_root() {
  const char* env = std::getenv("FULORA_RUN_DIR");
  return (env && *env) ? fs::path(env) : fs::path("runs");
}

fs::path resolve_run_dir(const fs::path& p) { return p.is_absolute() ? p : run_root() / p; }

RunDir::RunDir(fs::path root) : root_(std::move(root)) {
  std::error_code ec;
  fs::create_directories(root_, ec);
  if (ec) throw DataError("cannot create run directory " + root_.string() + ": " + ec.message());
}

void RunDir::record(const fs::path& file) {
  const fs::path rel = fs::absolute(file).lexically_normal().lexically_relative(fs::absolute(root_).lexically_normal());
  outputs_.push_back(rel.empty() ? file.generic_string() : rel.generic_string());
}

void RunDir::write(const std::string& rel, std::string_view contents) {
  write_file_atomic(root_ / rel, contents);
  record(root_ / rel);
}

void RunDir::finish(const std::string& command, const ojson& config, const ojson& seeds) {
  write_file_atomic(root_ / "config.json", config.dump(2) + "\n");
  std::vector<std::string> outs = outputs_;
  outs.push_back("config.json");
  std::sort(outs.begin(), outs.end());
  outs.erase(std::unique(outs.begin(), outs.end()), outs.end());
  ojson j;
  j["command"] = command;
  j["seeds"] = seeds;
  j["outputs"] = outs;
  write_file_atomic(root_ / "outputs.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------- steps

DatasetManifest filter_planes(const DatasetManifest& m, const std::vector<PlaneLabel>& planes) {
  DatasetManifest out;
  for (const auto& r : m)
    if (std::find(planes.begin(), planes.end(), r.label) != planes.end()) out.add(r);
  return out;
}

DatasetManifest resolve_data(const std::string& spec, Domain domain, int side, std::uint64_t seed,
                             const fs::path& out_dir) {
  if (spec.rfind("toy:", 0) == 0) {
    const auto parts = split(spec, ':');
    if (parts.size() < 3 || parts.size() > 4) throw ConfigError("toy data spec must be toy:<style>:<n>[:<planes>], got '" + spec + "'");
    const ToyStyle style = toy_style_from_string(parts[1]);
    int n = 0;
    try {
      n = std::stoi(parts[2]);
    } catch (const std::exception&) {
      throw ConfigError("toy data spec: bad image count in '" + spec + "'");
    }
    DatasetManifest m = make_toy_corpus(style, n, side, seed, out_dir);
    std::vector<ImageRecord> recs;
    std::vector<PlaneLabel> keep(kAllPlanes.begin(), kAllPlanes.end());
    if (parts.size() == 4) {
      keep.clear();
      for (const auto& p : split(parts[3], ',')) keep.push_back(plane_from_string(p));
    }
    for (auto r : filter_planes(m, keep)) {
      r.domain = domain;
      recs.push_back(std::move(r));
    }
    DatasetManifest out(std::move(recs));
    out.write_csv(out_dir / "manifest.csv");
    return out;
  }
  const fs::path p(spec);
  if (!fs::exists(p)) throw DataError("data source not found: " + spec);
  DatasetManifest m = fs::is_directory(p) ? load_directory(p, domain, p.filename().string()) : DatasetManifest::read_csv(p);
  if (m.empty()) throw DataError("data source is empty: " + spec);
  return m;
}

namespace {

std::string fmt2(double v) {
  if (std::isnan(v)) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

int count_real(const DatasetManifest& m) {
  return static_cast<int>(std::count_if(m.begin(), m.end(), [](const ImageRecord& r) { return r.domain != Domain::Synthetic; }));
}

int count_real_patients(const DatasetManifest& m) {
  std::set<std::string> ids;
  for (const auto& r : m)
    if (r.domain != Domain::Synthetic) ids.insert(r.patient_id);
  return static_cast<int>(ids.size());
}

double tail_mean(const std::vector<LossPoint>& loss) {
  if (loss.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t from = loss.size() - std::max<std::size_t>(1, loss.size() / 10);
  double s = 0;
  for (std::size_t i = from; i < loss.size(); ++i) s += loss[i].loss;
  return s / static_cast<double>(loss.size() - from);
}

}  // namespace

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::string out = "data,model,n_real,n_synthetic,n_patients,acc,recall,precision,fscore,auc\n";
  for (const auto& r : rows) {
    const MetricsReport& m = r.report;
    out += csv_row({r.data, r.model, std::to_string(r.n_real), std::to_string(r.n_synthetic), std::to_string(r.n_patients),
                    fmt2(m.accuracy), fmt2(m.recall), fmt2(m.precision), fmt2(m.f_score),
                    fmt2(m.auc_skipped ? std::numeric_limits<double>::quiet_NaN() : m.auc)});
  }
  return out;
}

std::string rank_sweep_csv(const std::vector<RankSweepRow>& rows) {
  std::string out = "rank,alpha,trainable_params,final_loss\n";
  for (const auto& r : rows) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%d,%g,%lld,%.6f\n", r.rank, static_cast<double>(r.alpha), static_cast<long long>(r.trainable),
                  r.final_loss);
    out += buf;
  }
  return out;
}

TrainedClassifier train_condition(const DatasetManifest& train, Arch arch, bool augment, const ExperimentConfig& cfg,
                                  std::uint64_t seed) {
  const int side = cfg.model.unet.image_size;
  ClassifierConfig cc;
  cc.arch = arch;
  cc.epochs = cfg.classifier.epochs;
  cc.batch_size = cfg.classifier.batch_size;
  cc.lr = cfg.classifier.lr;
  cc.momentum = cfg.classifier.momentum;
  cc.image_size = side;
  cc.seed = seed;
  const AugPolicy policy = augment ? cfg.classifier.augmentation : AugPolicy::disabled();

  if (cfg.classifier.val_fraction <= 0.0) return train_classifier(load_labeled(train, side), cc, policy);

  DatasetManifest real, synth;
  for (const auto& r : train) (r.domain == Domain::Synthetic ? synth : real).add(r);
  auto parts = patient_split(real, {1.0 - cfg.classifier.val_fraction, cfg.classifier.val_fraction}, derive_seed(seed, "val"));
  parts[0].append(synth);
  const LabeledImages val = load_labeled(parts[1], side);
  return train_classifier(load_labeled(parts[0], side), cc, policy, &val);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const fs::path& run_dir) {
  cfg.validate();
  RunDir run(run_dir);
  const ComponentSeeds seeds = ComponentSeeds::from_master(cfg.seeds.master);
  const int side = cfg.model.unet.image_size;
  ExperimentResult result;
  result.run_dir = run.root();

  // data
  log::info("experiment: preparing data");
  const DatasetManifest source = resolve_data(cfg.paths.source, Domain::Source, side, seeds.toy, run.path("data/source"));
  const DatasetManifest tune = resolve_data(cfg.paths.finetune, Domain::Finetune, side, seeds.toy, run.path("data/finetune"));
  const DatasetManifest target = resolve_data(cfg.paths.target, Domain::Target, side, seeds.toy, run.path("data/target"));
  for (const char* d : {"source", "finetune", "target"}) run.record(run.path(std::string("data/") + d + "/manifest.csv"));

  // base model
  log::info("experiment: pretraining the base model on " + std::to_string(source.size()) + " images");
  PretrainConfig pc{cfg.model.pretrain_steps, cfg.model.pretrain_batch_size, cfg.model.pretrain_lr, seeds.pretrain};
  PretrainResult base = train_base_model(load_labeled(source, side), cfg.model.unet, cfg.schedule, pc);
  save_base_model(base.model, run.path("base/base.ckpt"));
  run.record(run.path("base/base.ckpt"));
  run.write("base/loss.csv", loss_csv(base.loss));

  // LoRA rank sweep
  const LabeledImages tune_images = load_labeled(tune, side);
  const double ratio = static_cast<double>(cfg.finetune.cfg.alpha) / cfg.finetune.cfg.rank;
  std::map<int, AdapterBundle> adapters;
  for (int r : cfg.finetune.rank_sweep) {
    FinetuneConfig fc = cfg.finetune.cfg;
    fc.rank = r;
    fc.alpha = static_cast<float>(ratio * r);
    fc.seed = derive_seed(seeds.finetune, static_cast<std::uint64_t>(r));
    log::info("experiment: LoRA fine-tune at rank " + std::to_string(r));
    FinetuneResult ft = finetune_lora(base.model, tune_images, fc);
    const std::string dir = "lora/r" + std::to_string(r);
    save_adapter_bundle(ft.adapter, run.path(dir + "/adapter.ckpt"));
    run.record(run.path(dir + "/adapter.ckpt"));
    run.write(dir + "/loss.csv", loss_csv(ft.loss));
    result.sweep.push_back({r, fc.alpha, ft.trainable_elements, tail_mean(ft.loss)});
    adapters.emplace(r, std::move(ft.adapter));
  }
  run.write("rank_sweep.csv", rank_sweep_csv(result.sweep));

  // synthetic corpus
  const int main_rank = cfg.finetune.cfg.rank;
  GenSpec gs = cfg.genspec;
  gs.seed = seeds.generate;
  log::info("experiment: generating " + std::to_string(gs.total_images()) + " synthetic images at rank " + std::to_string(main_rank));
  const UNet sampler_model = adapted_model(base.model, adapters.at(main_rank), gs.lora_weight);
  const DatasetManifest synthetic = generate_synthetic(sampler_model, cfg.schedule, gs, run.path("synthetic"));
  run.record(run.path("synthetic/manifest.csv"));
  run.record(run.path("synthetic/seeds.csv"));

  HybridSpec hs = cfg.hybrid;
  if (hs.real_count < 0) hs.real_count = static_cast<int>(source.size());
  hs.seed = seeds.hybrid;
  const DatasetManifest hybrid = build_hybrid(source, synthetic, hs);
  hybrid.write_csv(run.path("hybrid/manifest.csv"));
  run.record(run.path("hybrid/manifest.csv"));

  // classifiers
  const LabeledImages test = load_labeled(target, side);
  struct Trained {
    std::string data;
    Arch arch;
    Classifier model;
    double acc;
  };
  std::vector<Trained> trained;
  for (const auto& data : kDataConditions) {
    const DatasetManifest& train = data == "source-only" ? source : hybrid;
    const bool aug = data == "hybrid+aug";
    for (Arch arch : cfg.classifier.archs) {
      log::info("experiment: training " + to_string(arch) + " on " + data + " (" + std::to_string(train.size()) + " images)");
      // One init seed per arch, shared by every data condition.
      TrainedClassifier tc = train_condition(train, arch, aug, cfg, derive_seed(seeds.classifier, to_string(arch)));
      const MetricsReport rep = evaluate(tc.model, test);
      const std::string dir = "classifiers/" + data + "/" + to_string(arch);
      tc.model.save(run.path(dir + "/model.ckpt"));
      run.record(run.path(dir + "/model.ckpt"));
      run.write(dir + "/history.csv", history_csv(tc.history));
      run.write(dir + "/metrics.json", metrics_json(rep));
      result.rows.push_back({data, to_string(arch), count_real(train), static_cast<int>(train.size()) - count_real(train),
                             count_real_patients(train), rep});
      trained.push_back({data, arch, std::move(tc.model), rep.accuracy});
    }
  }
  run.write("summary.csv", summary_csv(result.rows));

  // t-SNE per swept rank
  if (cfg.tsne.enabled) {
    const Trained* emb = &trained.front();
    if (cfg.tsne.embedder == "best") {
      for (const auto& t : trained)
        if (t.acc > emb->acc) emb = &t;
    } else {
      const auto parts = split(cfg.tsne.embedder, '/');
      for (const auto& t : trained)
        if (t.data == parts[0] && to_string(t.arch) == parts[1]) emb = &t;
    }
    log::info("experiment: t-SNE with " + emb->data + "/" + to_string(emb->arch) + " features");
    std::vector<PlaneLabel> planes;
    for (auto p : kEvalPlanes)
      if (std::find(gs.planes.begin(), gs.planes.end(), p) != gs.planes.end()) planes.push_back(p);
    for (int r : cfg.finetune.rank_sweep) {
      const std::string dir = "tsne/r" + std::to_string(r);
      DatasetManifest synth = synthetic;
      if (r != main_rank) {
        GenSpec small = gs;
        small.planes = planes;
        const int ns = static_cast<int>(gs.samplers.size());
        small.per_plane_per_sampler = (cfg.tsne.per_plane + ns - 1) / ns;
        small.seed = derive_seed(seeds.generate, static_cast<std::uint64_t>(r));
        const UNet m = adapted_model(base.model, adapters.at(r), gs.lora_weight);
        synth = generate_synthetic(m, cfg.schedule, small, run.path(dir + "/synthetic"));
        run.record(run.path(dir + "/synthetic/manifest.csv"));
      }
      const DatasetManifest subset = select_eval_subset({source, synth, target}, cfg.tsne.per_plane, planes, seeds.subset);
      const FeatureMatrix feats = extract_features(emb->model, {subset});
      TsneConfig tc = cfg.tsne.cfg;
      tc.seed = seeds.tsne;
      const TsneResult tr = tsne(feats, tc);
      for (const auto& f : emit_scatter(tr, feats, run.path(dir))) run.record(f);
      run.write(dir + "/kl.csv", kl_trace_csv(tr));
    }
  }

  ojson seeds_json = seeds.to_json();
  seeds_json["master"] = cfg.seeds.master;
  run.finish("run-experiment", cfg.to_json(), seeds_json);
  log::info("experiment: done, summary at " + run.path("summary.csv").string());
  return result;
}

}  // namespace fulora
