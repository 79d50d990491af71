#include "fulora/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include "fulora/checkpoint.hpp"
#include "fulora/error.hpp"
#include "fulora/io_util.hpp"
#include "fulora/log.hpp"
#include "fulora/ops.hpp"
#include "fulora/optim.hpp"
#include "fulora/rng.hpp"
#include "json.hpp"

namespace fulora {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string loss_csv(const std::vector<LossPoint>& curve) {
  std::string out = "step,loss\n";
  char buf[64];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%lld,%.8g\n", static_cast<long long>(p.step), p.loss);
    out += buf;
  }
  return out;
}

void ScheduleConfig::validate() const {
  if (steps < 2) throw ConfigError("schedule.steps must be >= 2");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0))
    throw ConfigError("schedule betas must satisfy 0 < beta_start < beta_end < 1");
}

void PretrainConfig::validate() const {
  if (steps < 0) throw ConfigError("pretrain.steps must be >= 0");
  if (batch_size < 1) throw ConfigError("pretrain.batch_size must be >= 1");
  if (!(lr >= 0.0f)) throw ConfigError("pretrain.lr must be >= 0");
}

PromptVocabulary plane_vocabulary() { return PromptVocabulary::from_prompts(all_plane_prompts()); }

namespace {

std::vector<std::string> prompts_for(const std::vector<int>& labels, const std::vector<std::size_t>& idx) {
  std::vector<std::string> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(plane_prompt(static_cast<PlaneLabel>(labels[i])));
  return out;
}

// One epsilon-MSE step on a random batch; returns the loss tensor.
Tensor diffusion_step_loss(const UNet& net, const NoiseSchedule& sched, const LabeledImages& data,
                           const std::vector<std::size_t>& idx, Rng& rng) {
  LabeledImages batch = data.subset(idx);
  std::vector<int> t(idx.size());
  for (auto& v : t) v = static_cast<int>(rng.uniform_int(1, sched.steps()));
  std::vector<float> e(static_cast<std::size_t>(batch.images.numel()));
  for (auto& v : e) v = static_cast<float>(rng.normal());
  Tensor eps = Tensor::from(batch.images.shape(), std::move(e));
  Tensor xt = q_sample(batch.images, t, eps, sched);
  Tensor ctx = net.encode(prompts_for(data.labels, idx));
  return diffusion_loss(eps, net.forward(xt, std::span<const int>(t), ctx));
}

void check_loss(double v, std::int64_t step, const char* what) {
  if (!std::isfinite(v)) throw NumericalError(std::string(what) + ": non-finite loss at step " + std::to_string(step));
}

}  // namespace

PretrainResult train_base_model(const LabeledImages& data, const UNetConfig& model_cfg, const ScheduleConfig& schedule,
                                const PretrainConfig& cfg) {
  cfg.validate();
  schedule.validate();
  model_cfg.validate();
  if (data.size() == 0) throw DataError("pretrain: empty training set");
  if (data.images.size(2) != model_cfg.image_size) throw ConfigError("pretrain: image side differs from model.image_size");
  std::array<int, kNumPlanes> counts{};
  for (int l : data.labels) ++counts[static_cast<std::size_t>(l)];
  for (int p = 0; p < kNumPlanes; ++p)
    if (counts[static_cast<std::size_t>(p)] == 0)
      throw DataError("pretrain: no images for plane " + to_string(static_cast<PlaneLabel>(p)));

  PretrainResult out{BaseModel{UNet(model_cfg, plane_vocabulary(), derive_seed(cfg.seed, "pretrain.init")), schedule}, {}};
  UNet& net = out.model.net;
  const NoiseSchedule sched = schedule.make();
  Adam opt(cfg.lr);
  Rng rng(derive_seed(cfg.seed, "pretrain.steps"));
  std::vector<std::size_t> idx(static_cast<std::size_t>(cfg.batch_size));
  for (int step = 0; step < cfg.steps; ++step) {
    set_step_index(step);
    for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1));
    Tensor loss = diffusion_step_loss(net, sched, data, idx, rng);
    const double lv = loss.item();
    check_loss(lv, step, "pretrain");
    backward(loss);
    opt.step(net.params().trainable());
    out.loss.push_back({step, lv});
  }
  set_step_index(-1);
  return out;
}

void save_base_model(const BaseModel& m, const fs::path& path) {
  Checkpoint ck;
  m.net.save_to(ck);
  json s = {{"steps", m.schedule.steps}, {"beta_start", m.schedule.beta_start}, {"beta_end", m.schedule.beta_end}};
  ck.put_text("schedule.json", s.dump(2));
  save_checkpoint(ck, path);
}

BaseModel load_base_model(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("base checkpoint not found: " + path.string());
  Checkpoint ck = load_checkpoint(path);
  if (!ck.has_text("schedule.json")) throw DataError(path.string() + ": no schedule.json entry");
  ScheduleConfig sc;
  try {
    json s = json::parse(ck.text("schedule.json"));
    sc.steps = s.at("steps").get<int>();
    sc.beta_start = s.at("beta_start").get<double>();
    sc.beta_end = s.at("beta_end").get<double>();
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": schedule.json: " + e.what());
  }
  sc.validate();
  return BaseModel{UNet::load_from(ck), sc};
}

// ---------------------------------------------------------------- LoRA fine-tune

void FinetuneConfig::validate() const {
  if (batch_size < 1) throw ConfigError("finetune.batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("finetune.epochs must be >= 0");
  if (steps_per_image < 0) throw ConfigError("finetune.steps_per_image must be >= 0");
  if (rank < 1) throw ConfigError("finetune.rank must be >= 1");
  if (!(alpha > 0.0f)) throw ConfigError("finetune.alpha must be > 0");
  if (!(lr >= 0.0f)) throw ConfigError("finetune.lr must be >= 0");
}

std::int64_t FinetuneConfig::total_steps(std::size_t n_images) const {
  return static_cast<std::int64_t>(n_images) * steps_per_image * epochs;
}

namespace {

constexpr const char* kPromptTable = "prompt.embedding";

std::uint64_t frozen_checksum(const ParamStore& store, bool skip_table) {
  ParamStore copy;
  for (const auto* p : store.all()) {
    if (skip_table && p->name() == kPromptTable) continue;
    copy.add(p->name(), p->value().clone(), false);
  }
  return copy.checksum();
}

}  // namespace

FinetuneResult finetune_lora(const BaseModel& base, const LabeledImages& data, const FinetuneConfig& cfg) {
  cfg.validate();
  if (data.size() == 0) throw DataError("finetune: empty training set");
  std::array<int, kNumPlanes> counts{};
  for (int l : data.labels) ++counts[static_cast<std::size_t>(l)];
  for (int p = 0; p < kNumPlanes; ++p)
    if (counts[static_cast<std::size_t>(p)] == 0)
      log::warn("finetune: no images for plane " + to_string(static_cast<PlaneLabel>(p)));

  FinetuneResult out;
  out.frozen_checksum_before = frozen_checksum(base.net.params(), cfg.train_prompt_embeddings);
  UNet net = base.net.clone();
  net.params().freeze_all();
  const auto targets = cfg.targets.empty() ? net.cross_attention_targets() : cfg.targets;
  LoraSet set = inject(net, targets, cfg.rank, cfg.alpha, derive_seed(cfg.seed, "finetune.lora"));
  Param& table = net.params().get(kPromptTable);
  if (cfg.train_prompt_embeddings) table.set_trainable(true);

  std::vector<Param*> params = set.params().trainable();
  if (cfg.train_prompt_embeddings) params.push_back(&table);
  for (const auto* p : params) out.trainable_elements += p->value().numel();

  const NoiseSchedule sched = base.schedule.make();
  Adam opt(cfg.lr);
  Rng rng(derive_seed(cfg.seed, "finetune.steps"));
  out.total_steps = cfg.total_steps(data.size());
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();
  for (std::int64_t step = 0; step < out.total_steps; ++step) {
    set_step_index(step);
    // Walk shuffled passes over the images, reshuffling when one runs out.
    std::vector<std::size_t> idx;
    while (idx.size() < static_cast<std::size_t>(cfg.batch_size)) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    Tensor loss = diffusion_step_loss(net, sched, data, idx, rng);
    const double lv = loss.item();
    check_loss(lv, step, "finetune");
    backward(loss);
    opt.step(params);
    out.loss.push_back({step, lv});
  }
  set_step_index(-1);

  out.adapter.lora = set;
  if (cfg.train_prompt_embeddings) out.adapter.prompt_table = table.value().clone();
  out.frozen_checksum_after = frozen_checksum(base.net.params(), cfg.train_prompt_embeddings);
  return out;
}

void save_adapter_bundle(const AdapterBundle& b, const fs::path& path) {
  Checkpoint ck;
  write_adapter(b.lora, ck);
  ck.put_text("finetune.json", json{{"prompt_table", b.prompt_table.has_value()}}.dump());
  if (b.prompt_table) ck.put(kPromptTable, *b.prompt_table);
  save_checkpoint(ck, path);
}

AdapterBundle load_adapter_bundle(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("adapter file not found: " + path.string());
  Checkpoint ck = load_checkpoint(path);
  AdapterBundle b{read_adapter(ck, path.string()), std::nullopt};
  if (ck.has(kPromptTable)) b.prompt_table = ck.get(kPromptTable).clone();
  return b;
}

UNet adapted_model(const BaseModel& base, const AdapterBundle& adapter, float weight) {
  UNet net = with_lora(base.net, adapter.lora, weight);
  if (adapter.prompt_table) {
    Param& t = net.params().get(kPromptTable);
    if (t.value().shape() != adapter.prompt_table->shape())
      throw DataError("adapter prompt table " + shape_str(adapter.prompt_table->shape()) + " does not match the model's " +
                      shape_str(t.value().shape()));
    auto src = adapter.prompt_table->data();
    auto dst = t.value().mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return net;
}

// ---------------------------------------------------------------- generation

void GenSpec::validate() const {
  if (per_plane_per_sampler < 0) throw ConfigError("genspec.per_plane_per_sampler must be >= 0");
  if (samplers.empty()) throw ConfigError("genspec.samplers must not be empty");
  if (planes.empty()) throw ConfigError("genspec.planes must not be empty");
  if (std::set<SamplerKind>(samplers.begin(), samplers.end()).size() != samplers.size())
    throw ConfigError("genspec.samplers lists a sampler twice");
  if (std::set<PlaneLabel>(planes.begin(), planes.end()).size() != planes.size())
    throw ConfigError("genspec.planes lists a plane twice");
  if (batch_size < 1) throw ConfigError("genspec.batch_size must be >= 1");
  if (workers < 1) throw ConfigError("genspec.workers must be >= 1");
}

std::int64_t GenSpec::total_images() const {
  return static_cast<std::int64_t>(per_plane_per_sampler) * static_cast<std::int64_t>(samplers.size()) *
         static_cast<std::int64_t>(planes.size());
}

std::string GenSpec::prompt_for(PlaneLabel p) const {
  auto it = prompts.find(p);
  return it == prompts.end() ? plane_prompt(p) : it->second;
}

std::uint64_t generation_seed(std::uint64_t seed, PlaneLabel p, SamplerKind k, int j) {
  return derive_seed(derive_seed(seed, "generate." + to_string(p) + "." + to_string(k)), static_cast<std::uint64_t>(j));
}

namespace {

struct GenJob {
  PlaneLabel plane;
  SamplerKind kind;
  std::vector<std::uint64_t> seeds;
  std::vector<fs::path> paths;
};

struct LedgerRow {
  std::string path;  // relative to out_dir
  PlaneLabel plane;
  SamplerKind kind;
  std::uint64_t seed;
};

std::string ledger_csv(const std::vector<LedgerRow>& rows) {
  std::string out = "path,plane,sampler,seed\n";
  for (const auto& r : rows) out += csv_row({r.path, to_string(r.plane), to_string(r.kind), std::to_string(r.seed)});
  return out;
}

std::vector<LedgerRow> read_ledger(const fs::path& file) {
  std::vector<LedgerRow> rows;
  if (!fs::exists(file)) return rows;
  auto table = parse_csv(read_file(file));
  if (table.empty() || table[0] != std::vector<std::string>{"path", "plane", "sampler", "seed"})
    throw DataError(file.string() + ": unexpected ledger header");
  for (std::size_t i = 1; i < table.size(); ++i) {
    if (table[i].size() != 4) throw DataError(file.string() + ": malformed ledger row " + std::to_string(i));
    rows.push_back({table[i][0], plane_from_string(table[i][1]), sampler_from_string(table[i][2]), std::stoull(table[i][3])});
  }
  return rows;
}

Tensor run_sampler(const UNet& model, const NoiseSchedule& sched, const Tensor& ctx, const GenSpec& spec, SamplerKind kind,
                   const std::vector<std::uint64_t>& seeds) {
  NoGradGuard ng;
  ConditionedUNet cond(model, ctx);
  const int side = model.config().image_size;
  const Shape shape{model.config().in_channels, side, side};
  if (kind == SamplerKind::Ancestral) {
    std::vector<Tensor> parts;
    for (auto s : seeds) parts.push_back(sample_ancestral(cond, sched, shape, 1, s));
    return parts.size() == 1 ? parts[0] : concat(parts, 0);
  }
  std::vector<Tensor> noise;
  for (auto s : seeds) noise.push_back(initial_noise(shape, 1, s));
  Tensor x_T = noise.size() == 1 ? noise[0] : concat(noise, 0);
  if (kind == SamplerKind::Euler) return sample_euler(cond, sched, x_T, spec.steps);
  return sample_unipc(cond, sched, x_T, spec.steps, std::min(spec.unipc_order, spec.steps));
}

}  // namespace

DatasetManifest generate_synthetic(const UNet& model, const ScheduleConfig& schedule, const GenSpec& spec,
                                   const fs::path& out_dir) {
  spec.validate();
  const NoiseSchedule sched = schedule.make();
  for (auto k : spec.samplers) {
    SamplerConfig sc;
    sc.kind = k;
    sc.steps = spec.steps;
    sc.unipc_order = std::min(spec.unipc_order, spec.steps);
    sc.validate(sched.steps());
  }
  fs::create_directories(out_dir);
  const fs::path ledger_file = out_dir / "seeds.csv";
  std::vector<LedgerRow> ledger = read_ledger(ledger_file);
  std::set<std::string> done;
  for (const auto& r : ledger)
    if (fs::exists(out_dir / r.path)) done.insert(r.path);
  std::erase_if(ledger, [&](const LedgerRow& r) { return !done.count(r.path); });

  // Fixed batches per (plane, sampler) so every image sees the same batch
  // whether or not the run was resumed.
  std::vector<GenJob> jobs;
  std::vector<LedgerRow> expected;
  for (PlaneLabel p : spec.planes)
    for (SamplerKind k : spec.samplers)
      for (int j0 = 0; j0 < spec.per_plane_per_sampler; j0 += spec.batch_size) {
        GenJob job{p, k, {}, {}};
        bool missing = false;
        for (int j = j0; j < std::min(spec.per_plane_per_sampler, j0 + spec.batch_size); ++j) {
          const auto s = generation_seed(spec.seed, p, k, j);
          const fs::path rel = fs::path(to_string(p)) / sample_filename(to_string(p), k, s);
          job.seeds.push_back(s);
          job.paths.push_back(rel);
          expected.push_back({rel.generic_string(), p, k, s});
          missing |= !done.count(rel.generic_string());
        }
        if (missing) jobs.push_back(std::move(job));
      }
  if (!done.empty() && !jobs.empty())
    log::info("generate: resuming, " + std::to_string(done.size()) + " images already on disk");

  std::map<PlaneLabel, Tensor> ctx;
  for (PlaneLabel p : spec.planes) ctx[p] = model.encode({spec.prompt_for(p)});

  std::mutex mu;
  std::exception_ptr failure;
  std::size_t next = 0;
  auto worker = [&]() {
    while (true) {
      std::size_t j;
      {
        std::lock_guard lock(mu);
        if (failure || next >= jobs.size()) return;
        j = next++;
      }
      try {
        const GenJob& job = jobs[j];
        Tensor imgs = run_sampler(model, sched, ctx.at(job.plane), spec, job.kind, job.seeds);
        for (std::size_t i = 0; i < job.seeds.size(); ++i) {
          const auto rel = job.paths[i].generic_string();
          if (done.count(rel)) continue;
          write_png(out_dir / job.paths[i], image_at(imgs, static_cast<std::int64_t>(i)));
        }
        std::lock_guard lock(mu);
        for (std::size_t i = 0; i < job.seeds.size(); ++i) {
          const auto rel = job.paths[i].generic_string();
          if (done.insert(rel).second) ledger.push_back({rel, job.plane, job.kind, job.seeds[i]});
        }
        write_file_atomic(ledger_file, ledger_csv(ledger));
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  if (spec.workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < spec.workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  // Canonical ledger order regardless of completion order.
  write_file_atomic(ledger_file, ledger_csv(expected));
  DatasetManifest m;
  for (const auto& r : expected)
    m.add(ImageRecord{fs::absolute(out_dir / r.path).lexically_normal().string(), r.plane, kSyntheticPatient,
                      Domain::Synthetic, "fulora-" + to_string(r.kind)});
  m.write_csv(out_dir / "manifest.csv");
  return m;
}

// ---------------------------------------------------------------- hybrid

DatasetManifest build_hybrid(const DatasetManifest& real, const DatasetManifest& synthetic, const HybridSpec& spec) {
  const auto n_o = static_cast<int>(real.size());
  if (spec.real_count < 0 || spec.real_count > n_o)
    throw ConfigError("hybrid: R_o = " + std::to_string(spec.real_count) + " must lie in [0, N_o = " + std::to_string(n_o) + "]");
  if (spec.synthetic_count > static_cast<int>(synthetic.size()))
    throw ConfigError("hybrid: N_s = " + std::to_string(spec.synthetic_count) + " exceeds the " +
                      std::to_string(synthetic.size()) + " synthetic records available");

  // Largest-remainder plane quotas.
  const auto counts = real.label_counts();
  std::array<int, kNumPlanes> quota{};
  std::vector<std::pair<double, int>> rem;
  int assigned = 0;
  for (int p = 0; p < kNumPlanes; ++p) {
    const double exact = n_o ? static_cast<double>(spec.real_count) * counts[static_cast<std::size_t>(p)] / n_o : 0.0;
    quota[static_cast<std::size_t>(p)] = static_cast<int>(std::floor(exact));
    assigned += quota[static_cast<std::size_t>(p)];
    rem.push_back({exact - std::floor(exact), p});
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < spec.real_count; ++i, ++assigned) ++quota[static_cast<std::size_t>(rem[i].second)];

  std::vector<std::size_t> chosen;
  for (int p = 0; p < kNumPlanes; ++p) {
    const auto plane = static_cast<PlaneLabel>(p);
    std::map<std::string, std::vector<std::size_t>> by_patient;
    for (auto i : real.indices_of(plane)) by_patient[real[i].patient_id].push_back(i);
    std::vector<std::string> patients;
    for (const auto& [id, _] : by_patient) patients.push_back(id);
    Rng rng(derive_seed(spec.seed, "hybrid." + to_string(plane)));
    rng.shuffle(patients.begin(), patients.end());
    int left = quota[static_cast<std::size_t>(p)];
    for (const auto& id : patients) {
      for (auto i : by_patient[id]) {
        if (left == 0) break;
        chosen.push_back(i);
        --left;
      }
      if (left == 0) break;
    }
  }
  std::sort(chosen.begin(), chosen.end());
  DatasetManifest out;
  for (auto i : chosen) out.add(real[i]);

  if (spec.synthetic_count < 0 || spec.synthetic_count == static_cast<int>(synthetic.size())) {
    out.append(synthetic);
  } else {
    std::vector<std::size_t> idx(synthetic.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(spec.seed, "hybrid.synthetic"));
    rng.shuffle(idx.begin(), idx.end());
    idx.resize(static_cast<std::size_t>(spec.synthetic_count));
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) out.add(synthetic[i]);
  }
  return out;
}

}  // namespace fulora
