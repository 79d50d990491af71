#include "fulora/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <numeric>

#include "fulora/checkpoint.hpp"
#include "fulora/denoiser.hpp"
#include "fulora/error.hpp"
#include "fulora/io_util.hpp"
#include "fulora/log.hpp"
#include "fulora/nn.hpp"
#include "fulora/ops.hpp"
#include "fulora/optim.hpp"
#include "json.hpp"

namespace fulora {

// ---------------------------------------------------------------- augmentation

void AugPolicy::validate() const {
  if (!(p_hflip >= 0.0 && p_hflip <= 1.0) || !(p_vflip >= 0.0 && p_vflip <= 1.0))
    throw ConfigError("augmentation probabilities must lie in [0, 1]");
  if (!(rotation_min_deg <= rotation_max_deg)) throw ConfigError("augmentation rotation bounds out of order");
}

GrayImage rotate(const GrayImage& img, double angle_deg, float fill) {
  const double th = angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double cx = (img.width - 1) / 2.0, cy = (img.height - 1) / 2.0;
  auto px = [&](int y, int x) -> double {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return fill;
    return img.at(y, x);
  };
  GrayImage out{img.height, img.width, std::vector<float>(img.pixels.size())};
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double sx = cx + c * dx + s * dy, sy = cy - s * dx + c * dy;
      if (sx <= -1.0 || sy <= -1.0 || sx >= img.width || sy >= img.height) {
        out.at(y, x) = fill;
        continue;
      }
      const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      const double wx = sx - x0, wy = sy - y0;
      const double top = px(y0, x0) * (1 - wx) + px(y0, x0 + 1) * wx;
      const double bot = px(y0 + 1, x0) * (1 - wx) + px(y0 + 1, x0 + 1) * wx;
      out.at(y, x) = static_cast<float>(top * (1 - wy) + bot * wy);
    }
  return out;
}

GrayImage augment(const GrayImage& img, const AugPolicy& policy, Rng& rng, AugDraw* draw) {
  if (!policy.enabled) {
    if (draw) *draw = AugDraw{};
    return img;
  }
  AugDraw d;
  d.angle_deg = rng.uniform(policy.rotation_min_deg, policy.rotation_max_deg);
  d.hflip = rng.bernoulli(policy.p_hflip);
  d.vflip = rng.bernoulli(policy.p_vflip);
  GrayImage out = d.angle_deg == 0.0 ? img : rotate(img, d.angle_deg);
  if (d.hflip)
    for (int y = 0; y < out.height; ++y) std::reverse(out.pixels.begin() + y * out.width, out.pixels.begin() + (y + 1) * out.width);
  if (d.vflip)
    for (int y = 0; y < out.height / 2; ++y)
      std::swap_ranges(out.pixels.begin() + y * out.width, out.pixels.begin() + (y + 1) * out.width,
                       out.pixels.begin() + (out.height - 1 - y) * out.width);
  if (draw) *draw = d;
  return out;
}

// ---------------------------------------------------------------- models

std::string to_string(Arch a) {
  switch (a) {
    case Arch::CnnSmall: return "cnn_small";
    case Arch::ResnetMini: return "resnet_mini";
    case Arch::VitMini: return "vit_mini";
  }
  return "?";
}

Arch arch_from_string(const std::string& s) {
  for (auto a : kAllArchs)
    if (s == to_string(a)) return a;
  throw ConfigError("unknown classifier arch '" + s + "' (expected cnn_small, resnet_mini or vit_mini)");
}

void ClassifierConfig::validate() const {
  if (epochs < 0) throw ConfigError("classifier epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("classifier batch_size must be >= 1");
  if (!(lr >= 0.0f)) throw ConfigError("classifier lr must be >= 0");
  if (!(momentum >= 0.0f && momentum < 1.0f)) throw ConfigError("classifier momentum must be in [0, 1)");
  if (num_classes != kNumPlanes) throw ConfigError("classifier num_classes is fixed at 5");
  if (image_size < 4 || image_size % 4 != 0) throw ConfigError("classifier image_size must be a positive multiple of 4");
}

namespace {

struct Net {
  virtual ~Net() = default;
  virtual Tensor features(const Tensor& x) const = 0;
  virtual int feature_dim() const = 0;
};

struct ConvBlock {
  nn::Conv2d conv;
  nn::GroupNorm norm;
  static ConvBlock make(ParamStore& s, const std::string& name, int in, int out, int stride, Rng& rng) {
    return {nn::Conv2d::make(s, name + ".conv", in, out, 3, stride, 1, rng), nn::GroupNorm::make(s, name + ".norm", out)};
  }
  Tensor operator()(const Tensor& x) const { return relu(norm(conv(x))); }
};

struct CnnSmall : Net {
  ConvBlock b1, b2, b3;
  CnnSmall(ParamStore& s, Rng& rng)
      : b1(ConvBlock::make(s, "cnn.b1", 1, 32, 1, rng)),
        b2(ConvBlock::make(s, "cnn.b2", 32, 64, 1, rng)),
        b3(ConvBlock::make(s, "cnn.b3", 64, 128, 1, rng)) {}
  Tensor features(const Tensor& x) const override {
    Tensor h = avg_pool2d(b1(x), 2);
    h = avg_pool2d(b2(h), 2);
    return global_avg_pool(b3(h));
  }
  int feature_dim() const override { return 128; }
};

struct ResBlock {
  nn::Conv2d c1, c2;
  nn::GroupNorm n1, n2;
  bool has_proj = false;
  nn::Conv2d proj;
  nn::GroupNorm proj_norm;
  static ResBlock make(ParamStore& s, const std::string& name, int in, int out, int stride, Rng& rng) {
    ResBlock b;
    b.c1 = nn::Conv2d::make(s, name + ".conv1", in, out, 3, stride, 1, rng);
    b.n1 = nn::GroupNorm::make(s, name + ".norm1", out);
    b.c2 = nn::Conv2d::make(s, name + ".conv2", out, out, 3, 1, 1, rng);
    b.n2 = nn::GroupNorm::make(s, name + ".norm2", out);
    if (in != out || stride != 1) {
      b.has_proj = true;
      b.proj = nn::Conv2d::make(s, name + ".proj", in, out, 1, stride, 0, rng);
      b.proj_norm = nn::GroupNorm::make(s, name + ".proj_norm", out);
    }
    return b;
  }
  Tensor operator()(const Tensor& x) const {
    Tensor h = relu(n1(c1(x)));
    h = n2(c2(h));
    return relu(h + (has_proj ? proj_norm(proj(x)) : x));
  }
};

struct ResnetMini : Net {
  ConvBlock stem;
  std::vector<ResBlock> blocks;
  ResnetMini(ParamStore& s, Rng& rng) : stem(ConvBlock::make(s, "resnet.stem", 1, 24, 1, rng)) {
    const int spec[4][3] = {{24, 24, 1}, {24, 32, 2}, {32, 48, 2}, {48, 48, 1}};
    for (int i = 0; i < 4; ++i)
      blocks.push_back(ResBlock::make(s, "resnet.block" + std::to_string(i + 1), spec[i][0], spec[i][1], spec[i][2], rng));
  }
  Tensor features(const Tensor& x) const override {
    Tensor h = stem(x);
    for (const auto& b : blocks) h = b(h);
    return global_avg_pool(h);
  }
  int feature_dim() const override { return 48; }
};

struct VitBlock {
  nn::LayerNorm ln1, ln2;
  CrossAttentionParams attn;
  nn::Dense fc1, fc2;
  int heads = 4;
  static VitBlock make(ParamStore& s, const std::string& name, int dim, int mlp, int heads, Rng& rng) {
    VitBlock b;
    b.ln1 = nn::LayerNorm::make(s, name + ".ln1", dim);
    b.ln2 = nn::LayerNorm::make(s, name + ".ln2", dim);
    b.attn.prefix = name + ".attn";
    b.attn.wq = nn::Dense::make(s, name + ".attn.wq", dim, dim, rng, false).weight;
    b.attn.wk = nn::Dense::make(s, name + ".attn.wk", dim, dim, rng, false).weight;
    b.attn.wv = nn::Dense::make(s, name + ".attn.wv", dim, dim, rng, false).weight;
    b.attn.wout = nn::Dense::make(s, name + ".attn.wout", dim, dim, rng, false).weight;
    b.fc1 = nn::Dense::make(s, name + ".fc1", dim, mlp, rng);
    b.fc2 = nn::Dense::make(s, name + ".fc2", mlp, dim, rng);
    b.heads = heads;
    return b;
  }
  Tensor operator()(const Tensor& x) const {
    Tensor y = ln1(x);
    Tensor h = x + cross_attention(y, y, attn, heads);
    return h + fc2(gelu(fc1(ln2(h))));
  }
};

struct VitMini : Net {
  static constexpr int kPatch = 4, kDim = 64, kMlp = 256, kHeads = 4;
  int side;
  nn::Dense embed;
  Param* pos;
  std::vector<VitBlock> blocks;
  nn::LayerNorm ln_f;
  VitMini(ParamStore& s, Rng& rng, int image_size) : side(image_size) {
    const int n = (side / kPatch) * (side / kPatch);
    embed = nn::Dense::make(s, "vit.embed", kPatch * kPatch, kDim, rng);
    pos = &s.add("vit.pos", nn::normal_init({n, kDim}, 0.02f, rng));
    for (int i = 0; i < 2; ++i) blocks.push_back(VitBlock::make(s, "vit.block" + std::to_string(i + 1), kDim, kMlp, kHeads, rng));
    ln_f = nn::LayerNorm::make(s, "vit.ln_f", kDim);
  }
  Tensor features(const Tensor& x) const override {
    const auto B = x.size(0);
    const std::int64_t g = side / kPatch;
    Tensor t = reshape(x, {B, 1, g, kPatch, g, kPatch});
    t = permute(t, {0, 2, 4, 1, 3, 5});
    t = reshape(t, {B, g * g, kPatch * kPatch});
    Tensor h = embed(t) + pos->value();
    for (const auto& b : blocks) h = b(h);
    return ln_f(mean_dim(h, 1));
  }
  int feature_dim() const override { return kDim; }
};

void check_input(const Tensor& x, int side) {
  if (x.dim() != 4 || x.size(1) != 1 || x.size(2) != side || x.size(3) != side)
    throw ShapeError("classifier: expected (B, 1, " + std::to_string(side) + ", " + std::to_string(side) + "), got " +
                     shape_str(x.shape()));
}

}  // namespace

struct Classifier::Impl {
  Arch arch;
  int num_classes;
  int image_size;
  std::uint64_t seed;
  ParamStore store;
  std::unique_ptr<Net> net;
  nn::Dense head;
};

Classifier::Classifier(Arch arch, int num_classes, int image_size, std::uint64_t seed) : impl_(std::make_unique<Impl>()) {
  if (num_classes < 2) throw ConfigError("classifier needs at least 2 classes");
  if (image_size < 4 || image_size % 4 != 0) throw ConfigError("classifier image_size must be a positive multiple of 4");
  impl_->arch = arch;
  impl_->num_classes = num_classes;
  impl_->image_size = image_size;
  impl_->seed = seed;
  Rng rng(derive_seed(seed, "classifier.init." + to_string(arch)));
  switch (arch) {
    case Arch::CnnSmall: impl_->net = std::make_unique<CnnSmall>(impl_->store, rng); break;
    case Arch::ResnetMini: impl_->net = std::make_unique<ResnetMini>(impl_->store, rng); break;
    case Arch::VitMini: impl_->net = std::make_unique<VitMini>(impl_->store, rng, image_size); break;
  }
  impl_->head = nn::Dense::make(impl_->store, "head", impl_->net->feature_dim(), num_classes, rng);
}

Classifier::~Classifier() = default;
Classifier::Classifier(Classifier&&) noexcept = default;
Classifier& Classifier::operator=(Classifier&&) noexcept = default;

Arch Classifier::arch() const { return impl_->arch; }
int Classifier::num_classes() const { return impl_->num_classes; }
int Classifier::image_size() const { return impl_->image_size; }
std::uint64_t Classifier::seed() const { return impl_->seed; }
int Classifier::feature_dim() const { return impl_->net->feature_dim(); }
ParamStore& Classifier::params() { return impl_->store; }
const ParamStore& Classifier::params() const { return impl_->store; }

Tensor Classifier::features(const Tensor& x) const {
  check_input(x, impl_->image_size);
  return impl_->net->features(x);
}

Tensor Classifier::logits(const Tensor& x) const { return impl_->head(features(x)); }

void Classifier::save(const std::filesystem::path& path) const {
  nlohmann::json j = {{"format", "fulora.classifier"},
                      {"version", 1},
                      {"arch", to_string(impl_->arch)},
                      {"num_classes", impl_->num_classes},
                      {"image_size", impl_->image_size},
                      {"seed", impl_->seed}};
  Checkpoint ck;
  ck.put_text("classifier.json", j.dump(2));
  ck.put_params(impl_->store);
  save_checkpoint(ck, path);
}

Classifier Classifier::load(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  if (!ck.has_text("classifier.json")) throw DataError(path.string() + ": not a classifier checkpoint");
  auto j = nlohmann::json::parse(ck.text("classifier.json"));
  if (j.value("format", "") != "fulora.classifier" || j.value("version", 0) != 1)
    throw DataError(path.string() + ": unsupported classifier format");
  Classifier c(arch_from_string(j.at("arch").get<std::string>()), j.at("num_classes").get<int>(),
               j.at("image_size").get<int>(), j.at("seed").get<std::uint64_t>());
  ck.load_params(c.params());
  return c;
}

std::vector<std::vector<double>> to_rows(const Tensor& t) {
  if (t.dim() != 2) throw ShapeError("to_rows: expected a 2-D tensor");
  std::vector<std::vector<double>> out(static_cast<std::size_t>(t.size(0)));
  auto d = t.data();
  const auto k = static_cast<std::size_t>(t.size(1));
  for (std::size_t i = 0; i < out.size(); ++i) out[i].assign(d.begin() + static_cast<std::ptrdiff_t>(i * k), d.begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
  return out;
}

namespace {

template <class Fn>
Tensor chunked(const Tensor& images, int chunk, Fn fn) {
  NoGradGuard ng;
  const auto n = static_cast<std::size_t>(images.size(0));
  std::vector<Tensor> parts;
  LabeledImages all{images, std::vector<int>(n, 0)};
  for (std::size_t s = 0; s < n; s += static_cast<std::size_t>(chunk)) {
    std::vector<std::size_t> idx(std::min(n - s, static_cast<std::size_t>(chunk)));
    std::iota(idx.begin(), idx.end(), s);
    parts.push_back(fn(idx.size() == n ? images : all.subset(idx).images));
  }
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

double mean_loss_acc(const Classifier& model, const LabeledImages& data, double* acc) {
  Tensor logits = chunked(data.images, 256, [&](const Tensor& x) { return model.logits(x); });
  NoGradGuard ng;
  const double loss = cross_entropy(logits, data.labels).item();
  auto rows = to_rows(logits);
  int correct = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) correct += argmax_row(rows[i]) == data.labels[i];
  *acc = 100.0 * correct / static_cast<double>(rows.size());
  return loss;
}

}  // namespace

Tensor predict_proba(const Classifier& model, const Tensor& images, int chunk) {
  return chunked(images, chunk, [&](const Tensor& x) { return softmax(model.logits(x)); });
}

Tensor extract_feature_rows(const Classifier& model, const Tensor& images, int chunk) {
  return chunked(images, chunk, [&](const Tensor& x) { return model.features(x); });
}

TrainedClassifier train_classifier(const LabeledImages& train, const ClassifierConfig& cfg, const AugPolicy& policy,
                                   const LabeledImages* val) {
  cfg.validate();
  policy.validate();
  if (train.size() == 0) throw DataError("train_classifier: empty training set");
  std::array<int, kNumPlanes> counts{};
  for (int l : train.labels) {
    if (l < 0 || l >= cfg.num_classes) throw DataError("train_classifier: label " + std::to_string(l) + " out of range");
    ++counts[static_cast<std::size_t>(l)];
  }
  for (int c = 0; c < kNumPlanes; ++c)
    if (counts[static_cast<std::size_t>(c)] == 0)
      log::warn("train_classifier: no training images for " + to_string(static_cast<PlaneLabel>(c)));

  TrainedClassifier out{Classifier(cfg.arch, cfg.num_classes, cfg.image_size, derive_seed(cfg.seed, "classifier.model")), {}};
  Classifier& model = out.model;
  Sgd sgd(cfg.lr, cfg.momentum);
  Rng rng(derive_seed(cfg.seed, "classifier.train"));
  const std::size_t n = train.size();
  std::vector<std::size_t> order(n);
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0;
    int correct = 0;
    for (std::size_t s = 0; s < n; s += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(s),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + static_cast<std::size_t>(cfg.batch_size))));
      LabeledImages batch = train.subset(idx);
      if (policy.enabled) {
        std::vector<GrayImage> imgs;
        for (std::size_t i = 0; i < idx.size(); ++i) imgs.push_back(augment(image_at(batch.images, static_cast<std::int64_t>(i)), policy, rng));
        batch.images = stack_images(imgs);
      }
      set_step_index(step);
      Tensor logits = model.logits(batch.images);
      Tensor loss = cross_entropy(logits, batch.labels);
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw NumericalError("classifier loss is not finite at step " + std::to_string(step));
      backward(loss);
      sgd.step(model.params().trainable());
      loss_sum += lv * static_cast<double>(idx.size());
      auto rows = to_rows(logits);
      for (std::size_t i = 0; i < rows.size(); ++i) correct += argmax_row(rows[i]) == batch.labels[i];
      ++step;
    }
    set_step_index(-1);
    EpochStats st;
    st.epoch = epoch;
    st.train_loss = loss_sum / static_cast<double>(n);
    st.train_acc = 100.0 * correct / static_cast<double>(n);
    st.val_loss = std::numeric_limits<double>::quiet_NaN();
    st.val_acc = std::numeric_limits<double>::quiet_NaN();
    if (val && val->size() > 0) st.val_loss = mean_loss_acc(model, *val, &st.val_acc);
    out.history.push_back(st);
  }
  return out;
}

std::string history_csv(const std::vector<EpochStats>& history) {
  std::string out = "epoch,train_loss,val_loss,train_acc,val_acc\n";
  char buf[160];
  for (const auto& e : history) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.2f,%.2f\n", e.epoch, e.train_loss, e.val_loss, e.train_acc, e.val_acc);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------- metrics

int argmax_row(const std::vector<double>& row) {
  int best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

AucResult auc_ovr(const std::vector<std::vector<double>>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc_ovr: scores and labels differ in length");
  const std::size_t n = labels.size();
  const std::size_t k = n ? scores[0].size() : 0;
  AucResult r;
  r.per_class.assign(k, std::numeric_limits<double>::quiet_NaN());
  r.skipped.assign(k, true);
  double sum = 0;
  int used = 0;
  std::vector<std::size_t> order(n);
  std::vector<double> rank(n);
  for (std::size_t c = 0; c < k; ++c) {
    double P = 0;
    for (int l : labels) P += l == static_cast<int>(c);
    const double N = static_cast<double>(n) - P;
    if (P == 0 || N == 0) continue;
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a][c] < scores[b][c]; });
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j + 1 < n && scores[order[j + 1]][c] == scores[order[i]][c]) ++j;
      const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
      for (std::size_t q = i; q <= j; ++q) rank[order[q]] = avg;
      i = j + 1;
    }
    double R = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (labels[i] == static_cast<int>(c)) R += rank[i];
    r.per_class[c] = (R - P * (P + 1) / 2.0) / (P * N);
    r.skipped[c] = false;
    sum += r.per_class[c];
    ++used;
  }
  r.macro = used ? sum / used : std::numeric_limits<double>::quiet_NaN();
  return r;
}

MetricsReport compute_metrics(const std::vector<int>& labels, const std::vector<std::vector<double>>& probs, int num_classes) {
  if (labels.empty()) throw DataError("metrics: empty test set");
  if (labels.size() != probs.size()) throw ShapeError("metrics: labels and probabilities differ in length");
  MetricsReport r;
  const auto K = static_cast<std::size_t>(num_classes);
  r.confusion.assign(K, std::vector<int>(K, 0));
  r.n_test = static_cast<int>(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (probs[i].size() != K) throw ShapeError("metrics: score row has the wrong width");
    if (labels[i] < 0 || labels[i] >= num_classes) throw DataError("metrics: label out of range");
    ++r.confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(argmax_row(probs[i]))];
  }
  int trace = 0;
  double rec = 0, prec = 0, f = 0;
  for (std::size_t c = 0; c < K; ++c) {
    trace += r.confusion[c][c];
    int row = 0, col = 0;
    for (std::size_t j = 0; j < K; ++j) {
      row += r.confusion[c][j];
      col += r.confusion[j][c];
    }
    if (row == 0) continue;
    r.classes_present.push_back(static_cast<int>(c));
    const double tp = r.confusion[c][c];
    const double rc = tp / row;
    const double pc = col > 0 ? tp / col : 0.0;
    rec += rc;
    prec += pc;
    f += (pc + rc) > 0 ? 2 * pc * rc / (pc + rc) : 0.0;
  }
  const double m = static_cast<double>(r.classes_present.size());
  r.accuracy = 100.0 * trace / r.n_test;
  r.recall = 100.0 * rec / m;
  r.precision = 100.0 * prec / m;
  r.f_score = 100.0 * f / m;
  AucResult auc = auc_ovr(probs, labels);
  r.auc_class_skipped = auc.skipped;
  r.auc_skipped = std::isnan(auc.macro);
  r.auc = 100.0 * auc.macro;
  return r;
}

MetricsReport evaluate(const Classifier& model, const LabeledImages& test) {
  if (test.size() == 0) throw DataError("evaluate: empty test set");
  return compute_metrics(test.labels, to_rows(predict_proba(model, test.images)), model.num_classes());
}

namespace {

double round2(double v) { return std::round(v * 100.0) / 100.0; }

std::string fmt2(double v) {
  if (std::isnan(v)) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

std::string metrics_json(const MetricsReport& r) {
  nlohmann::json j;
  j["accuracy"] = round2(r.accuracy);
  j["recall"] = round2(r.recall);
  j["precision"] = round2(r.precision);
  j["f_score"] = round2(r.f_score);
  j["auc"] = r.auc_skipped ? nlohmann::json() : nlohmann::json(round2(r.auc));
  j["auc_skipped"] = r.auc_skipped;
  j["auc_class_skipped"] = r.auc_class_skipped;
  j["confusion"] = r.confusion;
  j["n_test"] = r.n_test;
  j["classes_present"] = r.classes_present;
  return j.dump(2) + "\n";
}

std::string metrics_csv_header() { return "data,model,acc,recall,precision,fscore,auc\n"; }

std::string metrics_csv_row(const std::string& data, const std::string& model, const MetricsReport& r) {
  return csv_row({data, model, fmt2(r.accuracy), fmt2(r.recall), fmt2(r.precision), fmt2(r.f_score),
                  fmt2(r.auc_skipped ? std::numeric_limits<double>::quiet_NaN() : r.auc)});
}

}  // namespace fulora
