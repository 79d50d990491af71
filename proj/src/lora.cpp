#include "fulora/lora.hpp"

#include <algorithm>
#include <cmath>

#include "fulora/checkpoint.hpp"
#include "fulora/error.hpp"
#include "fulora/log.hpp"
#include "fulora/nn.hpp"
#include "fulora/ops.hpp"
#include "fulora/rng.hpp"
#include "json.hpp"

namespace fulora {

using nlohmann::json;

LoraAdapter lora_init(std::int64_t d_in, std::int64_t d_out, int r, float alpha, std::uint64_t seed) {
  if (d_in <= 0 || d_out <= 0 || r <= 0)
    throw ConfigError("lora_init: dimensions and rank must be positive (d_in " + std::to_string(d_in) + ", d_out " +
                      std::to_string(d_out) + ", r " + std::to_string(r) + ")");
  if (r > std::min(d_in, d_out))
    log::warn("lora_init: rank " + std::to_string(r) + " exceeds min(d_in, d_out) = " +
              std::to_string(std::min(d_in, d_out)) + "; effective rank is capped");
  Rng rng(seed);
  LoraAdapter a;
  a.r = r;
  a.alpha = alpha;
  a.A = nn::normal_init({r, d_in}, static_cast<float>(1.0 / std::sqrt(static_cast<double>(r))), rng);
  a.B = Tensor::zeros({d_out, r});
  return a;
}

namespace {

void check_conform(const char* op, const Tensor& W0, const LoraAdapter& a) {
  if (W0.dim() != 2 || a.A.dim() != 2 || a.B.dim() != 2 || a.A.size(0) != a.r || a.B.size(1) != a.r ||
      W0.size(0) != a.B.size(0) || W0.size(1) != a.A.size(1))
    throw ShapeError(std::string(op) + ": base " + shape_str(W0.shape()) + " vs A " + shape_str(a.A.shape()) + ", B " +
                     shape_str(a.B.shape()));
}

}  // namespace

Tensor lora_forward(const Tensor& x, const Tensor& W0, const LoraAdapter& adapter, float w) {
  check_conform("lora_forward", W0, adapter);
  Tensor base = linear(x, W0);
  if (w == 0.0f) return base;
  return add(base, scale(linear(linear(x, adapter.A), adapter.B), w * adapter.scale()));
}

Tensor merge(const Tensor& W0, const LoraAdapter& adapter, float w) {
  check_conform("merge", W0, adapter);
  NoGradGuard no_grad;
  if (w == 0.0f) return W0.clone();
  Tensor delta = matmul(adapter.B, adapter.A);
  return add(W0, scale(delta, w * adapter.scale())).detach().clone();
}

// ---------------------------------------------------------------------------

struct LoraSet::State {
  ParamStore store;
  std::map<std::string, LoraAdapter> adapters;
  float weight = 1.0f;
};

LoraSet::LoraSet() : state_(std::make_shared<State>()) {}

void LoraSet::add(LoraAdapter adapter) {
  if (state_->adapters.count(adapter.target)) throw ConfigError("LoraSet: duplicate target " + adapter.target);
  adapter.A = state_->store.add(adapter.target + ".lora_A", adapter.A).value();
  adapter.B = state_->store.add(adapter.target + ".lora_B", adapter.B).value();
  state_->adapters.emplace(adapter.target, std::move(adapter));
}

bool LoraSet::contains(const std::string& target) const { return state_->adapters.count(target) != 0; }

const LoraAdapter& LoraSet::get(const std::string& target) const {
  auto it = state_->adapters.find(target);
  if (it == state_->adapters.end()) throw ConfigError("LoraSet: no adapter for " + target);
  return it->second;
}

std::vector<std::string> LoraSet::targets() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : state_->adapters) out.push_back(name);
  return out;
}

std::size_t LoraSet::size() const { return state_->adapters.size(); }
float LoraSet::weight() const { return state_->weight; }
void LoraSet::set_weight(float w) { state_->weight = w; }
LoraSet LoraSet::with_weight(float w) const {
  LoraSet out;
  for (const auto& [_, a] : state_->adapters) out.add(a);
  out.set_weight(w);
  return out;
}

ParamStore& LoraSet::params() { return state_->store; }
const ParamStore& LoraSet::params() const { return state_->store; }

std::int64_t LoraSet::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [_, a] : state_->adapters) n += a.r * (a.d_in() + a.d_out());
  return n;
}

namespace {

std::string available_names(const UNet& model) {
  std::string s;
  for (const auto& n : model.cross_attention_targets()) s += (s.empty() ? "" : ", ") + n;
  return s;
}

void check_targets(const UNet& model, const LoraSet& set) {
  for (const auto& t : set.targets()) {
    const Param* p = model.params().find(t);
    if (!p) throw ConfigError("LoRA target '" + t + "' not found in model; available: " + available_names(model));
    const auto& a = set.get(t);
    if (p->value().dim() != 2 || p->value().size(0) != a.d_out() || p->value().size(1) != a.d_in())
      throw ShapeError("LoRA target '" + t + "': weight " + shape_str(p->value().shape()) + " vs adapter (" +
                       std::to_string(a.d_out()) + ", " + std::to_string(a.d_in()) + ")");
  }
}

}  // namespace

void attach(UNet& model, const LoraSet& set) {
  check_targets(model, set);
  LoraSet shared = set;
  model.set_projection([shared](const std::string& name, const Tensor& x, const Tensor& w) {
    if (!shared.contains(name)) return linear(x, w);
    return lora_forward(x, w, shared.get(name), shared.weight());
  });
}

LoraSet inject(UNet& model, const std::vector<std::string>& targets, int r, float alpha, std::uint64_t seed) {
  LoraSet set;
  for (const auto& t : targets) {
    Param* p = model.params().find(t);
    if (!p || p->value().dim() != 2)
      throw ConfigError("inject: unknown 2-D target '" + t + "'; available: " + available_names(model));
    LoraAdapter a = lora_init(p->value().size(1), p->value().size(0), r, alpha, derive_seed(seed, t));
    a.target = t;
    set.add(std::move(a));
  }
  for (const auto& t : targets) model.params().get(t).set_trainable(false);
  attach(model, set);
  return set;
}

UNet merged_model(const UNet& base, const LoraSet& set) {
  check_targets(base, set);
  UNet out = base.clone();
  for (const auto& t : set.targets()) {
    Tensor m = merge(base.params().get(t).value(), set.get(t), set.weight());
    auto src = m.data();
    auto dst = out.params().get(t).value().mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return out;
}

void write_adapter(const LoraSet& set, Checkpoint& ck) {
  json meta;
  meta["format"] = "fulora.lora";
  meta["version"] = 1;
  meta["weight"] = set.weight();
  json targets = json::array();
  for (const auto& t : set.targets()) {
    const auto& a = set.get(t);
    targets.push_back({{"name", t}, {"r", a.r}, {"alpha", a.alpha}, {"d_in", a.d_in()}, {"d_out", a.d_out()}});
    ck.put(t + ".lora_A", a.A);
    ck.put(t + ".lora_B", a.B);
  }
  meta["targets"] = targets;
  if (set.size() > 0) {
    meta["r"] = set.get(set.targets().front()).r;
    meta["alpha"] = set.get(set.targets().front()).alpha;
  }
  ck.put_text("lora.json", meta.dump(2));
}

void save_adapter(const LoraSet& set, const std::filesystem::path& path) {
  Checkpoint ck;
  write_adapter(set, ck);
  save_checkpoint(ck, path);
}

LoraSet load_adapter(const std::filesystem::path& path) { return read_adapter(load_checkpoint(path), path.string()); }

LoraSet read_adapter(const Checkpoint& ck, const std::string& origin) {
  const std::filesystem::path path(origin);
  if (!ck.has_text("lora.json")) throw DataError(path.string() + ": no lora.json entry");
  LoraSet set;
  try {
    json meta = json::parse(ck.text("lora.json"));
    if (meta.at("format") != "fulora.lora") throw DataError(path.string() + ": not an adapter file");
    if (meta.at("version") != 1) throw DataError(path.string() + ": unsupported adapter version " + meta.at("version").dump());
    set.set_weight(meta.at("weight").get<float>());
    for (const auto& t : meta.at("targets")) {
      LoraAdapter a;
      a.target = t.at("name").get<std::string>();
      a.r = t.at("r").get<int>();
      a.alpha = t.at("alpha").get<float>();
      if (!ck.has(a.target + ".lora_A") || !ck.has(a.target + ".lora_B"))
        throw DataError(path.string() + ": missing tensors for " + a.target);
      a.A = ck.get(a.target + ".lora_A").clone();
      a.B = ck.get(a.target + ".lora_B").clone();
      if (a.A.dim() != 2 || a.B.dim() != 2 || a.A.size(0) != a.r || a.B.size(1) != a.r ||
          a.A.size(1) != t.at("d_in").get<std::int64_t>() || a.B.size(0) != t.at("d_out").get<std::int64_t>())
        throw DataError(path.string() + ": inconsistent shapes for " + a.target);
      set.add(std::move(a));
    }
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": lora.json: " + e.what());
  }
  return set;
}

}  // namespace fulora
