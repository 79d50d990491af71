#include "fulora/denoiser.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <optional>
#include <sstream>

#include "fulora/error.hpp"
#include "fulora/ops.hpp"
#include "fulora/rng.hpp"
#include "json.hpp"

namespace fulora {

using nlohmann::json;

void UNetConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("UNetConfig: " + m); };
  if (in_channels < 1) fail("in_channels must be >= 1");
  if (base_channels < 2 || base_channels % 2 != 0) fail("base_channels must be even and >= 2");
  if (channel_mults.empty()) fail("channel_mults must be non-empty");
  for (int m : channel_mults)
    if (m < 1) fail("channel_mults entries must be >= 1");
  for (int l : attention_levels)
    if (l < 0 || l >= levels()) fail("attention level " + std::to_string(l) + " out of range");
  if (context_dim < 1 || num_heads < 1) fail("context_dim and num_heads must be >= 1");
  if (context_dim % num_heads != 0) fail("context_dim must be divisible by num_heads");
  for (int l = 0; l < levels(); ++l)
    if ((base_channels * channel_mults[static_cast<std::size_t>(l)]) % num_heads != 0)
      fail("channels at level " + std::to_string(l) + " must be divisible by num_heads");
  const int down = 1 << (levels() - 1);
  if (image_size < 1 || image_size % down != 0)
    fail("image_size " + std::to_string(image_size) + " not divisible by " + std::to_string(down));
}

// ---------------------------------------------------------------------------

PromptVocabulary::PromptVocabulary() {
  tokens_.push_back(kNullToken);
  ids_[kNullToken] = kNull;
}

namespace {

std::vector<std::string> split_words(const std::string& text) {
  std::string lower = text;
  for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  std::istringstream in(lower);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

}  // namespace

PromptVocabulary PromptVocabulary::from_prompts(const std::vector<std::string>& prompts) {
  PromptVocabulary v;
  for (const auto& p : prompts) {
    for (const auto& w : split_words(p)) {
      if (v.ids_.count(w)) continue;
      v.ids_[w] = static_cast<std::int64_t>(v.tokens_.size());
      v.tokens_.push_back(w);
    }
  }
  return v;
}

PromptVocabulary PromptVocabulary::from_tokens(const std::vector<std::string>& tokens) {
  if (tokens.empty() || tokens[0] != kNullToken) throw DataError("vocabulary must start with the null token");
  PromptVocabulary v;
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    if (v.ids_.count(tokens[i])) throw DataError("duplicate vocabulary token '" + tokens[i] + "'");
    v.ids_[tokens[i]] = static_cast<std::int64_t>(i);
    v.tokens_.push_back(tokens[i]);
  }
  return v;
}

std::vector<std::int64_t> PromptVocabulary::tokenize(const std::string& text) const {
  std::vector<std::int64_t> out;
  for (const auto& w : split_words(text)) out.push_back(id(w));
  if (out.empty()) out.push_back(kNull);
  return out;
}

std::int64_t PromptVocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kNull : it->second;
}

Tensor encode_prompt(const std::string& text, const PromptVocabulary& vocab, const Tensor& table) {
  if (table.dim() != 2 || table.size(0) != static_cast<std::int64_t>(vocab.size()))
    throw ShapeError("encode_prompt: table " + shape_str(table.shape()) + " does not match vocabulary of " +
                     std::to_string(vocab.size()));
  auto ids = vocab.tokenize(text);
  return embedding(table, ids);
}

std::vector<float> time_embed(double t, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw ShapeError("time_embed: dim must be positive and even, got " + std::to_string(dim));
  const int half = dim / 2;
  std::vector<float> out(static_cast<std::size_t>(dim));
  for (int i = 0; i < half; ++i) {
    const double f = std::exp(-std::log(10000.0) * i / half);
    out[static_cast<std::size_t>(i)] = static_cast<float>(std::sin(t * f));
    out[static_cast<std::size_t>(half + i)] = static_cast<float>(std::cos(t * f));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

Tensor apply_projection(const ProjectionFn& fn, const std::string& name, const Tensor& x, const Tensor& w) {
  return fn ? fn(name, x, w) : linear(x, w);
}

}  // namespace

Tensor cross_attention(const Tensor& x_tokens, const Tensor& ctx_in, const CrossAttentionParams& p, int num_heads,
                       const ProjectionFn& project, Tensor* weights) {
  if (x_tokens.dim() != 3) throw ShapeError("cross_attention: x_tokens must be (B, N, C), got " + shape_str(x_tokens.shape()));
  Tensor ctx = ctx_in.dim() == 2 ? reshape(ctx_in, {1, ctx_in.size(0), ctx_in.size(1)}) : ctx_in;
  if (ctx.dim() != 3) throw ShapeError("cross_attention: ctx must be (B, L, D), got " + shape_str(ctx_in.shape()));
  const auto B = x_tokens.size(0), N = x_tokens.size(1), C = x_tokens.size(2);
  if (ctx.size(0) != B) {
    if (ctx.size(0) != 1)
      throw ShapeError("cross_attention: ctx batch " + shape_str(ctx.shape()) + " vs tokens " + shape_str(x_tokens.shape()));
    std::vector<Tensor> reps(static_cast<std::size_t>(B), ctx);
    ctx = concat(reps, 0);
  }
  const auto L = ctx.size(1);
  const Tensor& wq = p.wq->value();
  const Tensor& wk = p.wk->value();
  const Tensor& wv = p.wv->value();
  const Tensor& wo = p.wout->value();
  const auto inner = wq.size(0);
  if (wk.size(0) != inner || wv.size(0) != inner || wo.size(1) != inner || inner % num_heads != 0)
    throw ShapeError("cross_attention: head-dim mismatch at " + p.prefix + " (q " + shape_str(wq.shape()) + ", k " +
                     shape_str(wk.shape()) + ", v " + shape_str(wv.shape()) + ", out " + shape_str(wo.shape()) +
                     ", heads " + std::to_string(num_heads) + ")");
  const auto dh = inner / num_heads;
  const auto H = static_cast<std::int64_t>(num_heads);

  Tensor q = apply_projection(project, p.prefix + ".wq", x_tokens, wq);
  Tensor k = apply_projection(project, p.prefix + ".wk", ctx, wk);
  Tensor v = apply_projection(project, p.prefix + ".wv", ctx, wv);
  q = permute(reshape(q, {B, N, H, dh}), {0, 2, 1, 3});  // (B, H, N, dh)
  k = permute(reshape(k, {B, L, H, dh}), {0, 2, 3, 1});  // (B, H, dh, L)
  v = permute(reshape(v, {B, L, H, dh}), {0, 2, 1, 3});  // (B, H, L, dh)
  Tensor attn = softmax(scale(matmul(q, k), 1.0f / std::sqrt(static_cast<float>(dh))));
  if (weights) *weights = attn;
  Tensor o = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {B, N, inner});
  Tensor out = apply_projection(project, p.prefix + ".wout", o, wo);
  if (out.size(2) != C) throw ShapeError("cross_attention: output width " + std::to_string(out.size(2)) + " != " + std::to_string(C));
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct ResBlock {
  nn::GroupNorm norm1, norm2;
  nn::Conv2d conv1, conv2;
  nn::Dense time_proj;
  std::optional<nn::Conv2d> skip;

  static ResBlock make(ParamStore& s, const std::string& name, int cin, int cout, int time_dim, Rng& rng) {
    ResBlock b;
    b.norm1 = nn::GroupNorm::make(s, name + ".norm1", cin);
    b.conv1 = nn::Conv2d::make(s, name + ".conv1", cin, cout, 3, 1, 1, rng);
    b.time_proj = nn::Dense::make(s, name + ".time", time_dim, cout, rng);
    b.norm2 = nn::GroupNorm::make(s, name + ".norm2", cout);
    b.conv2 = nn::Conv2d::make(s, name + ".conv2", cout, cout, 3, 1, 1, rng);
    if (cin != cout) b.skip = nn::Conv2d::make(s, name + ".skip", cin, cout, 1, 1, 0, rng);
    return b;
  }

  Tensor operator()(const Tensor& x, const Tensor& temb) const {
    Tensor h = conv1(silu(norm1(x)));
    Tensor tp = time_proj(temb);
    h = add(h, reshape(tp, {tp.size(0), tp.size(1), 1, 1}));
    h = conv2(silu(norm2(h)));
    return add(h, skip ? (*skip)(x) : x);
  }
};

struct AttnBlock {
  nn::GroupNorm norm;
  CrossAttentionParams p;

  static AttnBlock make(ParamStore& s, const std::string& name, int channels, int context_dim, Rng& rng) {
    AttnBlock a;
    a.norm = nn::GroupNorm::make(s, name + ".norm", channels);
    a.p.prefix = name;
    const float bq = 1.0f / std::sqrt(static_cast<float>(channels));
    const float bk = 1.0f / std::sqrt(static_cast<float>(context_dim));
    a.p.wq = &s.add(name + ".wq", nn::uniform_init({channels, channels}, bq, rng));
    a.p.wk = &s.add(name + ".wk", nn::uniform_init({channels, context_dim}, bk, rng));
    a.p.wv = &s.add(name + ".wv", nn::uniform_init({channels, context_dim}, bk, rng));
    a.p.wout = &s.add(name + ".wout", nn::uniform_init({channels, channels}, bq, rng));
    return a;
  }

  Tensor operator()(const Tensor& x, const Tensor& ctx, int heads, const ProjectionFn& project) const {
    const auto B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    Tensor tokens = permute(reshape(norm(x), {B, C, H * W}), {0, 2, 1});
    Tensor out = cross_attention(tokens, ctx, p, heads, project);
    return add(x, reshape(permute(out, {0, 2, 1}), {B, C, H, W}));
  }
};

}  // namespace

struct UNet::Impl {
  Param* table = nullptr;
  nn::Dense time1, time2;
  nn::Conv2d conv_in;
  std::vector<ResBlock> down;
  std::vector<std::optional<AttnBlock>> down_attn;
  ResBlock mid1, mid2;
  AttnBlock mid_attn;
  std::vector<ResBlock> up;  // indexed by level
  std::vector<std::optional<AttnBlock>> up_attn;
  nn::GroupNorm out_norm;
  nn::Conv2d out_conv;
  std::vector<std::string> attn_prefixes;
};

UNet::UNet(UNetConfig cfg, PromptVocabulary vocab, std::uint64_t seed)
    : cfg_(std::move(cfg)), vocab_(std::move(vocab)), impl_(std::make_unique<Impl>()) {
  cfg_.validate();
  Rng rng(seed);
  auto& s = store_;
  auto& m = *impl_;
  const int n = cfg_.levels();
  const int td = cfg_.time_dim();
  auto ch = [&](int level) { return cfg_.base_channels * cfg_.channel_mults[static_cast<std::size_t>(level)]; };

  m.table = &s.add("prompt.embedding", nn::normal_init({static_cast<std::int64_t>(vocab_.size()), cfg_.context_dim}, 1.0f, rng));
  m.time1 = nn::Dense::make(s, "time.mlp1", cfg_.base_channels, td, rng);
  m.time2 = nn::Dense::make(s, "time.mlp2", td, td, rng);
  m.conv_in = nn::Conv2d::make(s, "conv_in", cfg_.in_channels, cfg_.base_channels, 3, 1, 1, rng);

  int prev = cfg_.base_channels;
  for (int l = 0; l < n; ++l) {
    const std::string name = "down" + std::to_string(l);
    m.down.push_back(ResBlock::make(s, name + ".res", prev, ch(l), td, rng));
    if (cfg_.attention_levels.count(l)) {
      m.down_attn.push_back(AttnBlock::make(s, name + ".attn", ch(l), cfg_.context_dim, rng));
      m.attn_prefixes.push_back(name + ".attn");
    } else {
      m.down_attn.emplace_back();
    }
    prev = ch(l);
  }
  // The bottleneck always carries cross-attention so conditioning has a path
  // even when no level requests it.
  m.mid1 = ResBlock::make(s, "mid.res1", prev, prev, td, rng);
  m.mid_attn = AttnBlock::make(s, "mid.attn", prev, cfg_.context_dim, rng);
  m.attn_prefixes.push_back("mid.attn");
  m.mid2 = ResBlock::make(s, "mid.res2", prev, prev, td, rng);

  m.up.resize(static_cast<std::size_t>(n));
  m.up_attn.resize(static_cast<std::size_t>(n));
  for (int l = n - 1; l >= 0; --l) {
    const std::string name = "up" + std::to_string(l);
    m.up[static_cast<std::size_t>(l)] = ResBlock::make(s, name + ".res", prev + ch(l), ch(l), td, rng);
    if (cfg_.attention_levels.count(l)) {
      m.up_attn[static_cast<std::size_t>(l)] = AttnBlock::make(s, name + ".attn", ch(l), cfg_.context_dim, rng);
      m.attn_prefixes.push_back(name + ".attn");
    }
    prev = ch(l);
  }
  m.out_norm = nn::GroupNorm::make(s, "out.norm", prev);
  m.out_conv = nn::Conv2d::make(s, "out.conv", prev, cfg_.in_channels, 3, 1, 1, rng);
}

UNet::UNet(UNet&&) noexcept = default;
UNet& UNet::operator=(UNet&&) noexcept = default;
UNet::~UNet() = default;

const Tensor& UNet::prompt_table() const { return impl_->table->value(); }

Tensor UNet::forward(const Tensor& xt, std::span<const int> t, const Tensor& ctx) const {
  std::vector<double> td(t.begin(), t.end());
  return forward(xt, td, ctx);
}

Tensor UNet::forward(const Tensor& xt, std::span<const double> t, const Tensor& ctx_in) const {
  const auto& m = *impl_;
  const auto S = static_cast<std::int64_t>(cfg_.image_size);
  if (xt.dim() != 4 || xt.size(1) != cfg_.in_channels || xt.size(2) != S || xt.size(3) != S)
    throw ShapeError("unet_forward: expected (B, " + std::to_string(cfg_.in_channels) + ", " + std::to_string(S) + ", " +
                     std::to_string(S) + "), got " + shape_str(xt.shape()));
  const auto B = xt.size(0);
  if (static_cast<std::int64_t>(t.size()) != B)
    throw ShapeError("unet_forward: " + std::to_string(t.size()) + " timesteps for batch " + std::to_string(B));
  Tensor ctx = ctx_in.dim() == 2 ? reshape(ctx_in, {1, ctx_in.size(0), ctx_in.size(1)}) : ctx_in;
  if (ctx.dim() != 3 || ctx.size(2) != cfg_.context_dim || (ctx.size(0) != 1 && ctx.size(0) != B))
    throw ShapeError("unet_forward: context " + shape_str(ctx_in.shape()) + " incompatible with batch " +
                     std::to_string(B) + " and context_dim " + std::to_string(cfg_.context_dim));
  if (ctx.size(0) == 1 && B > 1) {
    std::vector<Tensor> reps(static_cast<std::size_t>(B), ctx);
    ctx = concat(reps, 0);
  }

  std::vector<float> sin_emb;
  sin_emb.reserve(static_cast<std::size_t>(B * cfg_.base_channels));
  for (double ti : t) {
    auto e = time_embed(ti, cfg_.base_channels);
    sin_emb.insert(sin_emb.end(), e.begin(), e.end());
  }
  Tensor temb = m.time2(silu(m.time1(Tensor::from({B, cfg_.base_channels}, std::move(sin_emb)))));
  Tensor temb_act = silu(temb);

  const int n = cfg_.levels();
  Tensor h = m.conv_in(xt);
  std::vector<Tensor> skips;
  for (int l = 0; l < n; ++l) {
    h = m.down[static_cast<std::size_t>(l)](h, temb_act);
    if (const auto& a = m.down_attn[static_cast<std::size_t>(l)]) h = (*a)(h, ctx, cfg_.num_heads, project_);
    skips.push_back(h);
    if (l < n - 1) h = avg_pool2d(h, 2);
  }
  h = m.mid1(h, temb_act);
  h = m.mid_attn(h, ctx, cfg_.num_heads, project_);
  h = m.mid2(h, temb_act);
  for (int l = n - 1; l >= 0; --l) {
    h = concat({h, skips[static_cast<std::size_t>(l)]}, 1);
    h = m.up[static_cast<std::size_t>(l)](h, temb_act);
    if (const auto& a = m.up_attn[static_cast<std::size_t>(l)]) h = (*a)(h, ctx, cfg_.num_heads, project_);
    if (l > 0) h = upsample_nearest2d(h, 2);
  }
  return m.out_conv(silu(m.out_norm(h)));
}

Tensor UNet::encode(const std::vector<std::string>& prompts) const {
  if (prompts.empty()) throw std::invalid_argument("UNet::encode: no prompts");
  std::vector<std::vector<std::int64_t>> ids;
  std::size_t len = 1;
  for (const auto& p : prompts) {
    ids.push_back(vocab_.tokenize(p));
    len = std::max(len, ids.back().size());
  }
  std::vector<std::int64_t> flat;
  for (auto& row : ids) {
    row.resize(len, PromptVocabulary::kNull);
    flat.insert(flat.end(), row.begin(), row.end());
  }
  Tensor e = embedding(prompt_table(), flat);
  return reshape(e, {static_cast<std::int64_t>(prompts.size()), static_cast<std::int64_t>(len), cfg_.context_dim});
}

std::vector<std::string> UNet::cross_attention_targets() const {
  std::vector<std::string> out;
  for (const auto& p : impl_->attn_prefixes)
    for (const char* w : {".wq", ".wk", ".wv", ".wout"}) out.push_back(p + w);
  return out;
}

UNet UNet::clone() const {
  UNet copy(cfg_, vocab_, 0);
  for (const Param* p : store_.all()) {
    Param& dst = copy.store_.get(p->name());
    auto src = p->value().data();
    std::copy(src.begin(), src.end(), dst.value().mutable_data().begin());
    dst.set_trainable(p->trainable());
  }
  return copy;
}

std::string UNet::to_json() const {
  json j;
  j["format"] = "fulora.unet";
  j["version"] = 1;
  j["config"] = {{"in_channels", cfg_.in_channels},
                 {"base_channels", cfg_.base_channels},
                 {"channel_mults", cfg_.channel_mults},
                 {"attention_levels", std::vector<int>(cfg_.attention_levels.begin(), cfg_.attention_levels.end())},
                 {"context_dim", cfg_.context_dim},
                 {"num_heads", cfg_.num_heads},
                 {"image_size", cfg_.image_size}};
  j["vocab"] = vocab_.tokens();
  return j.dump(2);
}

UNet UNet::from_json(const std::string& text) {
  try {
    json j = json::parse(text);
    if (j.at("format") != "fulora.unet") throw DataError("model.json: unexpected format");
    if (j.at("version") != 1) throw DataError("model.json: unsupported version " + j.at("version").dump());
    const auto& c = j.at("config");
    UNetConfig cfg;
    cfg.in_channels = c.at("in_channels");
    cfg.base_channels = c.at("base_channels");
    cfg.channel_mults = c.at("channel_mults").get<std::vector<int>>();
    auto levels = c.at("attention_levels").get<std::vector<int>>();
    cfg.attention_levels = std::set<int>(levels.begin(), levels.end());
    cfg.context_dim = c.at("context_dim");
    cfg.num_heads = c.at("num_heads");
    cfg.image_size = c.at("image_size");
    return UNet(cfg, PromptVocabulary::from_tokens(j.at("vocab").get<std::vector<std::string>>()), 0);
  } catch (const json::exception& e) {
    throw DataError(std::string("model.json: ") + e.what());
  }
}

void UNet::save_to(Checkpoint& ckpt) const {
  ckpt.put_text("model.json", to_json());
  ckpt.put_params(store_);
}

UNet UNet::load_from(const Checkpoint& ckpt) {
  if (!ckpt.has_text("model.json")) throw DataError("checkpoint has no model.json entry");
  UNet net = from_json(ckpt.text("model.json"));
  ckpt.load_params(net.store_);
  return net;
}

}  // namespace fulora
