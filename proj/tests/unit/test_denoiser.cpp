#include <cmath>
#include <set>

#include "doctest.h"
#include "fulora/denoiser.hpp"
#include "fulora/error.hpp"
#include "fulora/gradcheck.hpp"
#include "fulora/ops.hpp"
#include "fulora/optim.hpp"
#include "fulora/rng.hpp"
#include "fulora/schedule.hpp"

using namespace fulora;

namespace {

const std::vector<std::string> kPrompts = {
    "fetal ultrasound, abdomen plane", "fetal ultrasound, brain plane", "fetal ultrasound, femur plane",
    "fetal ultrasound, thorax plane", "fetal ultrasound, other plane"};

Tensor randn(Shape s, Rng& rng) {
  std::vector<float> v(static_cast<std::size_t>(numel_of(s)));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor::from(std::move(s), std::move(v));
}

UNetConfig tiny_config() {
  UNetConfig c;
  c.base_channels = 8;
  c.image_size = 8;
  c.context_dim = 8;
  c.num_heads = 2;
  return c;
}

}  // namespace

TEST_CASE("config invariants") {
  UNetConfig c;
  c.validate();
  c.image_size = 15;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = UNetConfig{};
  c.context_dim = 63;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = UNetConfig{};
  c.attention_levels = {2};
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("prompt vocabulary and encoding") {
  auto vocab = PromptVocabulary::from_prompts(kPrompts);
  CHECK(vocab.id(PromptVocabulary::kNullToken) == 0);
  CHECK(vocab.tokenize("") == std::vector<std::int64_t>{0});
  CHECK(vocab.tokenize("FETAL   Ultrasound,") == vocab.tokenize("fetal ultrasound,"));
  CHECK(vocab.tokenize("unknown words")[0] == 0);
  // The plane word is the first token that differs between prompts.
  std::set<std::int64_t> plane_ids;
  for (const auto& p : kPrompts) plane_ids.insert(vocab.tokenize(p).at(2));
  CHECK(plane_ids.size() == 5);
  CHECK(plane_ids.count(0) == 0);

  Rng rng(1);
  Tensor table = randn({static_cast<std::int64_t>(vocab.size()), 6}, rng);
  Tensor empty = encode_prompt("", vocab, table);
  CHECK(empty.shape() == Shape{1, 6});
  for (int i = 0; i < 6; ++i) CHECK(empty.at(i) == table.at(i));
  CHECK(encode_prompt(kPrompts[1], vocab, table).to_vector() == encode_prompt(kPrompts[1], vocab, table).to_vector());
  CHECK(encode_prompt(kPrompts[1], vocab, table).shape() == Shape{4, 6});
}

TEST_CASE("time embedding") {
  auto e0 = time_embed(0, 16);
  for (int i = 0; i < 8; ++i) {
    CHECK(e0[i] == 0.0f);
    CHECK(e0[8 + i] == 1.0f);
  }
  CHECK_THROWS_AS(time_embed(3, 7), ShapeError);
  std::set<std::vector<float>> seen;
  for (int t = 1; t <= 1000; ++t) {
    auto e = time_embed(t, 8);
    double n2 = 0;
    for (float v : e) {
      CHECK(std::isfinite(v));
      n2 += v * v;
    }
    CHECK(n2 > 0.0);
    CHECK(n2 <= 8.0 + 1e-5);
    seen.insert(e);
  }
  CHECK(seen.size() == 1000);
}

TEST_CASE("cross attention contracts") {
  Rng rng(2);
  ParamStore s;
  CrossAttentionParams p;
  p.prefix = "blk.attn";
  p.wq = &s.add("blk.attn.wq", randn({8, 8}, rng));
  p.wk = &s.add("blk.attn.wk", randn({8, 6}, rng));
  p.wv = &s.add("blk.attn.wv", randn({8, 6}, rng));
  p.wout = &s.add("blk.attn.wout", randn({8, 8}, rng));
  Tensor x = randn({2, 5, 8}, rng);

  Tensor w;
  Tensor out = cross_attention(x, randn({1, 6}, rng), p, 2, {}, &w);
  CHECK(out.shape() == x.shape());
  CHECK(w.shape() == Shape{2, 2, 5, 1});
  for (float v : w.data()) CHECK(v == 1.0f);

  Tensor ctx = randn({2, 3, 6}, rng);
  Tensor base = cross_attention(x, ctx, p, 2);
  // Reverse the context rows: attention is a set operation over keys/values.
  std::vector<float> rev;
  auto cd = ctx.data();
  for (int b = 0; b < 2; ++b)
    for (int l = 2; l >= 0; --l) rev.insert(rev.end(), cd.begin() + (b * 3 + l) * 6, cd.begin() + (b * 3 + l + 1) * 6);
  Tensor permuted = cross_attention(x, Tensor::from({2, 3, 6}, rev), p, 2);
  for (int i = 0; i < base.numel(); ++i) CHECK(permuted.at(i) == doctest::Approx(base.at(i)).epsilon(1e-5));

  s.get("blk.attn.wout").value().mutable_data()[0] = 0.0f;
  for (auto& v : s.get("blk.attn.wout").value().mutable_data()) v = 0.0f;
  Tensor zeroed = cross_attention(x, ctx, p, 2);
  for (float v : zeroed.data()) CHECK(v == 0.0f);

  CHECK_THROWS_AS(cross_attention(x, ctx, p, 3), ShapeError);
}

TEST_CASE("unet forward contracts") {
  auto vocab = PromptVocabulary::from_prompts(kPrompts);
  for (auto cfg : {tiny_config(), UNetConfig{}}) {
    UNet net(cfg, vocab, 7);
    Rng rng(3);
    const int S = cfg.image_size;
    Tensor x = randn({3, 1, S, S}, rng);
    std::vector<int> t = {1, 40, 200};
    Tensor ctx = net.encode({kPrompts[0], kPrompts[0], kPrompts[0]});
    NoGradGuard ng;
    Tensor a = net.forward(x, t, ctx);
    CHECK(a.shape() == x.shape());
    CHECK(net.forward(x, t, ctx).to_vector() == a.to_vector());
    Tensor b = net.forward(x, t, net.encode({kPrompts[1], kPrompts[1], kPrompts[1]}));
    double diff = 0;
    for (int i = 0; i < a.numel(); ++i) diff += std::pow(a.at(i) - b.at(i), 2);
    CHECK(diff > 0.0);
    CHECK_THROWS_AS(net.forward(randn({1, 1, S + 2, S + 2}, rng), std::vector<int>{1}, ctx), ShapeError);
  }
  UNetConfig d;
  UNet def(d, vocab, 0);
  MESSAGE("default U-Net parameters: " << def.params().count_elements());
}

TEST_CASE("cross attention targets are stable and addressable") {
  auto vocab = PromptVocabulary::from_prompts(kPrompts);
  UNet a(UNetConfig{}, vocab, 1), b(UNetConfig{}, vocab, 2);
  auto names = a.cross_attention_targets();
  CHECK(names == b.cross_attention_targets());
  CHECK(names.size() == 12);
  for (const auto& n : names) {
    REQUIRE(a.params().contains(n));
    CHECK(a.params().get(n).value().dim() == 2);
  }
  CHECK(names[0] == "down1.attn.wq");
}

TEST_CASE("clone and checkpoint round trip") {
  auto vocab = PromptVocabulary::from_prompts(kPrompts);
  UNet net(tiny_config(), vocab, 4);
  UNet copy = net.clone();
  CHECK(copy.params().checksum() == net.params().checksum());
  Checkpoint ck;
  net.save_to(ck);
  UNet back = UNet::load_from(ck);
  CHECK(back.params().checksum() == net.params().checksum());
  CHECK(back.vocab().tokens() == vocab.tokens());
  CHECK(back.config().image_size == 8);
}

TEST_CASE("full tiny unet gradient check") {
  auto vocab = PromptVocabulary::from_prompts(kPrompts);
  UNet net(tiny_config(), vocab, 5);
  Rng rng(6);
  Tensor x = randn({2, 1, 8, 8}, rng);
  Tensor target = randn({2, 1, 8, 8}, rng);
  std::vector<int> t = {3, 150};
  auto loss_fn = [&] {
    Tensor ctx = net.encode({kPrompts[0], kPrompts[3]});
    return mse_loss(net.forward(x, t, ctx), target);
  };
  auto r = grad_check_params(loss_fn, net.params().all(), 4e-3, 150, 8);
  MESSAGE("unet grad check normwise " << r.max_rel_error << " worst entry " << r.max_entry_error << " at " << r.worst);
  CHECK(r.entries_checked >= 100);
  CHECK(r.max_rel_error < 2e-3);
}

TEST_CASE("one small adam step lowers the diffusion loss") {
  auto vocab = PromptVocabulary::from_prompts(kPrompts);
  NoiseSchedule sched(200, 5e-4, 0.1);
  for (int trial = 0; trial < 5; ++trial) {
    UNet net(tiny_config(), vocab, 100 + trial);
    Rng rng(200 + trial);
    Tensor x0 = randn({4, 1, 8, 8}, rng);
    Tensor eps = randn({4, 1, 8, 8}, rng);
    std::vector<int> t = {5, 50, 100, 190};
    Tensor xt = q_sample(x0, t, eps, sched);
    auto loss_fn = [&] { return diffusion_loss(eps, net.forward(xt, t, net.encode({kPrompts[0], kPrompts[1], kPrompts[2], kPrompts[3]}))); };
    Tensor before = loss_fn();
    backward(before);
    Adam adam(1e-4f);
    adam.step(net.params().trainable());
    CHECK(loss_fn().item() < before.item());
  }
}
