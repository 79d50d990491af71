#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include "doctest.h"
#include "fulora/error.hpp"
#include "fulora/io_util.hpp"
#include "fulora/ops.hpp"
#include "fulora/pipeline.hpp"
#include "support.hpp"

using namespace fulora;
namespace fs = std::filesystem;

namespace {

UNetConfig small_unet() {
  UNetConfig c;
  c.base_channels = 16;
  c.channel_mults = {1, 2};
  c.attention_levels = {1};
  c.context_dim = 32;
  c.num_heads = 2;
  c.image_size = 16;
  return c;
}

LabeledImages toy_images(ToyStyle s, int per_class, std::uint64_t seed) {
  std::vector<GrayImage> imgs;
  std::vector<int> labels;
  for (int j = 0; j < per_class * kNumPlanes; ++j) {
    imgs.push_back(render_toy_image(s, static_cast<PlaneLabel>(j % kNumPlanes), 16, derive_seed(seed, static_cast<std::uint64_t>(j))));
    labels.push_back(j % kNumPlanes);
  }
  return {stack_images(imgs), labels};
}

// Epsilon MSE on a fixed batch with fixed t and noise.
double fixed_batch_loss(const UNet& net, const NoiseSchedule& sched, const LabeledImages& data) {
  NoGradGuard ng;
  Rng rng(99);
  std::vector<int> t;
  std::vector<std::string> prompts;
  for (std::size_t i = 0; i < data.size(); ++i) {
    t.push_back(static_cast<int>(rng.uniform_int(1, sched.steps())));
    prompts.push_back(plane_prompt(static_cast<PlaneLabel>(data.labels[i])));
  }
  Tensor eps = testing::randn_tensor(data.images.shape(), rng);
  Tensor xt = q_sample(data.images, t, eps, sched);
  return diffusion_loss(eps, net.forward(xt, std::span<const int>(t), net.encode(prompts))).item();
}

BaseModel quick_base(int steps, std::uint64_t seed) {
  PretrainConfig pc;
  pc.steps = steps;
  pc.seed = seed;
  return train_base_model(toy_images(ToyStyle::A, 4, 1), small_unet(), ScheduleConfig{}, pc).model;
}

DatasetManifest fake_real(int per_plane, int per_patient) {
  DatasetManifest m;
  int k = 0;
  for (int p = 0; p < kNumPlanes; ++p)
    for (int i = 0; i < per_plane; ++i, ++k)
      m.add(ImageRecord{"/real/" + std::to_string(k) + ".png", static_cast<PlaneLabel>(p), "pt" + std::to_string(k / per_patient),
                        Domain::Source, "es"});
  return m;
}

DatasetManifest fake_synth(int n) {
  DatasetManifest m;
  for (int i = 0; i < n; ++i)
    m.add(ImageRecord{"/syn/" + std::to_string(i) + ".png", static_cast<PlaneLabel>(i % 5), kSyntheticPatient,
                      Domain::Synthetic, "fulora-euler"});
  return m;
}

}  // namespace

TEST_CASE("finetune step arithmetic") {
  FinetuneConfig c;
  CHECK(c.total_steps(100) == 10000);
  CHECK(c.total_steps(50) == 5000);
  c.epochs = 2;
  CHECK(c.total_steps(50) == 10000);
  CHECK(loss_csv({{0, 1.5}, {1, 0.25}}) == "step,loss\n0,1.5\n1,0.25\n");
}

TEST_CASE("base model pretraining") {
  LabeledImages data = toy_images(ToyStyle::A, 4, 1);
  PretrainConfig pc;
  pc.seed = 5;

  SUBCASE("zero steps keep the initialization") {
    pc.steps = 0;
    auto r = train_base_model(data, small_unet(), ScheduleConfig{}, pc);
    UNet init(small_unet(), plane_vocabulary(), derive_seed(pc.seed, "pretrain.init"));
    CHECK(r.model.net.params().checksum() == init.params().checksum());
    CHECK(r.loss.empty());
  }

  SUBCASE("determinism and checkpoint round trip") {
    pc.steps = 3;
    auto a = train_base_model(data, small_unet(), ScheduleConfig{}, pc);
    auto b = train_base_model(data, small_unet(), ScheduleConfig{}, pc);
    CHECK(a.model.net.params().checksum() == b.model.net.params().checksum());
    CHECK(a.loss.size() == 3);
    testing::TempDir dir("base");
    save_base_model(a.model, dir / "base.ckpt");
    auto back = load_base_model(dir / "base.ckpt");
    CHECK(back.net.params().checksum() == a.model.net.params().checksum());
    CHECK(back.schedule.steps == 200);
    CHECK_THROWS_AS(load_base_model(dir / "missing.ckpt"), DataError);
  }

  SUBCASE("errors") {
    pc.steps = 1;
    CHECK_THROWS_AS(train_base_model(data.subset({0, 1, 2, 3}), small_unet(), ScheduleConfig{}, pc), DataError);
    LabeledImages bad{data.images.clone(), data.labels};
    for (auto& v : bad.images.mutable_data()) v = std::nanf("");
    CHECK_THROWS_AS(train_base_model(bad, small_unet(), ScheduleConfig{}, pc), NumericalError);
  }
}

TEST_CASE("pretraining reduces the loss on a fixed batch") {
  LabeledImages data = toy_images(ToyStyle::A, 20, 2);
  LabeledImages probe = toy_images(ToyStyle::A, 4, 3);
  PretrainConfig pc;
  pc.steps = 0;
  pc.seed = 1;
  const NoiseSchedule sched = ScheduleConfig{}.make();
  const double before = fixed_batch_loss(train_base_model(data, small_unet(), ScheduleConfig{}, pc).model.net, sched, probe);
  pc.steps = 400;
  auto t0 = std::chrono::steady_clock::now();
  auto r = train_base_model(data, small_unet(), ScheduleConfig{}, pc);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double after = fixed_batch_loss(r.model.net, sched, probe);
  MESSAGE("fixed-batch loss " << before << " -> " << after << " after 400 steps (" << secs << " s)");
  CHECK(after < 0.7 * before);
}

TEST_CASE("lora fine-tune contracts") {
  BaseModel base = quick_base(2, 3);
  LabeledImages small = toy_images(ToyStyle::B, 2, 4);
  FinetuneConfig fc;
  fc.steps_per_image = 1;
  fc.rank = 4;
  fc.alpha = 4;

  for (bool table : {true, false}) {
    CAPTURE(table);
    fc.train_prompt_embeddings = table;
    const auto base_sum = base.net.params().checksum();
    auto r = finetune_lora(base, small, fc);
    CHECK(r.total_steps == 10);
    CHECK(r.loss.size() == 10);
    CHECK(r.frozen_checksum_before == r.frozen_checksum_after);
    CHECK(base.net.params().checksum() == base_sum);
    std::int64_t expect = r.adapter.lora.parameter_count();
    if (table) expect += base.net.prompt_table().numel();
    CHECK(r.trainable_elements == expect);
    CHECK(r.adapter.prompt_table.has_value() == table);
    CHECK(r.adapter.lora.size() == base.net.cross_attention_targets().size());

    testing::TempDir dir("adapter");
    save_adapter_bundle(r.adapter, dir / "a.lora");
    auto back = load_adapter_bundle(dir / "a.lora");
    CHECK(back.prompt_table.has_value() == table);
    for (const auto& t : r.adapter.lora.targets()) {
      CHECK(back.lora.get(t).A.to_vector() == r.adapter.lora.get(t).A.to_vector());
      CHECK(back.lora.get(t).B.to_vector() == r.adapter.lora.get(t).B.to_vector());
    }
  }

  SUBCASE("zero steps leave the sampling model equal to the base") {
    fc.steps_per_image = 0;
    fc.train_prompt_embeddings = true;
    auto r = finetune_lora(base, small, fc);
    UNet m = adapted_model(base, r.adapter, 1.0f);
    Rng rng(1);
    Tensor x = testing::randn_tensor({2, 1, 16, 16}, rng);
    std::vector<int> t{10, 150};
    Tensor ctx = base.net.encode({plane_prompt(PlaneLabel::BR), plane_prompt(PlaneLabel::TH)});
    NoGradGuard ng;
    CHECK(m.forward(x, std::span<const int>(t), ctx).to_vector() == base.net.forward(x, std::span<const int>(t), ctx).to_vector());
  }

  CHECK_THROWS_AS(load_adapter_bundle("/nonexistent/x.lora"), DataError);
}

TEST_CASE("synthetic generation") {
  BaseModel base = quick_base(2, 3);
  LabeledImages small = toy_images(ToyStyle::B, 1, 4);
  FinetuneConfig fc;
  fc.steps_per_image = 2;
  auto ad = finetune_lora(base, small, fc).adapter;
  UNet model = adapted_model(base, ad, 1.0f);

  GenSpec spec;
  spec.per_plane_per_sampler = 1;
  spec.samplers = {SamplerKind::Euler};
  spec.steps = 4;
  spec.seed = 8;
  CHECK(spec.total_images() == 5);

  testing::TempDir a("gen1"), b("gen2"), c("gen3");
  auto m = generate_synthetic(model, base.schedule, spec, a.path());
  REQUIRE(m.size() == 5);
  CHECK(m.label_counts() == std::array<int, 5>{1, 1, 1, 1, 1});
  for (const auto& r : m) {
    CHECK(fs::exists(r.path));
    CHECK(r.domain == Domain::Synthetic);
    CHECK(r.patient_id == kSyntheticPatient);
  }
  CHECK(DatasetManifest::read_csv(a / "manifest.csv") == m);
  CHECK(parse_csv(read_file(a / "seeds.csv")).size() == 6);

  spec.per_plane_per_sampler = 3;
  spec.samplers = {SamplerKind::Euler, SamplerKind::UniPC};
  spec.batch_size = 2;
  auto m1 = generate_synthetic(model, base.schedule, spec, b.path());
  CHECK(m1.size() == 30);
  spec.workers = 3;
  auto m2 = generate_synthetic(model, base.schedule, spec, c.path());
  for (std::size_t i = 0; i < m1.size(); ++i) {
    const auto rel = fs::path(m1[i].path).lexically_relative(b.path());
    CHECK(read_file(m1[i].path) == read_file(c / rel));
  }

  // Interrupted run: drop two images and a ledger line, then resume.
  const std::string victim = m1[3].path;
  const std::string bytes = read_file(victim);
  fs::remove(victim);
  fs::remove(m1[20].path);
  spec.workers = 1;
  auto m3 = generate_synthetic(model, base.schedule, spec, b.path());
  CHECK(m3 == m1);
  CHECK(read_file(victim) == bytes);

  GenSpec bad = spec;
  bad.samplers = {SamplerKind::Euler, SamplerKind::Euler};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = spec;
  bad.steps = 500;
  CHECK_THROWS_AS(generate_synthetic(model, base.schedule, bad, a.path()), ConfigError);
}

TEST_CASE("hybrid assembly") {
  auto real = fake_real(230, 3);  // N_o = 1150
  auto syn = fake_synth(5000);
  HybridSpec hs;
  hs.real_count = 1150;
  hs.seed = 1;
  CHECK(build_hybrid(real, syn, hs).size() == 6150);

  hs.real_count = 0;
  CHECK(build_hybrid(real, syn, hs) == syn);

  hs.real_count = 1151;
  CHECK_THROWS_AS(build_hybrid(real, syn, hs), ConfigError);
  hs.real_count = 10;
  hs.synthetic_count = 5001;
  CHECK_THROWS_AS(build_hybrid(real, syn, hs), ConfigError);

  hs.synthetic_count = 100;
  hs.real_count = 101;
  auto h = build_hybrid(real, syn, hs);
  CHECK(h.size() == 201);
  int n_real = 0;
  std::array<int, 5> per_plane{};
  std::map<std::string, int> per_patient;
  for (const auto& r : h)
    if (r.domain != Domain::Synthetic) {
      ++n_real;
      ++per_plane[static_cast<std::size_t>(r.label)];
      ++per_patient[r.patient_id];
    }
  CHECK(n_real == 101);
  for (int v : per_plane) CHECK((v == 20 || v == 21));
  // Whole patients except at most one partial patient per plane.
  int partial = 0;
  for (const auto& [id, n] : per_patient) partial += n < 3;
  CHECK(partial <= 5);
  CHECK(build_hybrid(real, syn, hs) == h);
  hs.seed = 2;
  CHECK(!(build_hybrid(real, syn, hs) == h));
}
