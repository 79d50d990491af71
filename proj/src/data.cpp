#include "fulora/data.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <numbers>
#include <numeric>

#include "fulora/error.hpp"
#include "fulora/io_util.hpp"
#include "fulora/log.hpp"
#include "fulora/rng.hpp"

namespace fs = std::filesystem;

namespace fulora {

namespace {

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string valid_labels() { return "AB, BR, FE, TH, OT (or abdomen, brain, femur, thorax, other)"; }

}  // namespace

std::string to_string(PlaneLabel p) {
  switch (p) {
    case PlaneLabel::AB: return "AB";
    case PlaneLabel::BR: return "BR";
    case PlaneLabel::FE: return "FE";
    case PlaneLabel::TH: return "TH";
    case PlaneLabel::OT: return "OT";
  }
  return "?";
}

std::string plane_name(PlaneLabel p) {
  switch (p) {
    case PlaneLabel::AB: return "abdomen";
    case PlaneLabel::BR: return "brain";
    case PlaneLabel::FE: return "femur";
    case PlaneLabel::TH: return "thorax";
    case PlaneLabel::OT: return "other";
  }
  return "?";
}

PlaneLabel plane_from_string(const std::string& s) {
  const std::string l = lower(s);
  for (auto p : kAllPlanes)
    if (l == lower(to_string(p)) || l == plane_name(p)) return p;
  throw DataError("unknown plane label '" + s + "'; valid labels: " + valid_labels());
}

std::string plane_prompt(PlaneLabel p) { return "fetal ultrasound, " + plane_name(p) + " plane"; }

std::vector<std::string> all_plane_prompts() {
  std::vector<std::string> out;
  for (auto p : kAllPlanes) out.push_back(plane_prompt(p));
  return out;
}

std::string to_string(Domain d) {
  switch (d) {
    case Domain::Source: return "source";
    case Domain::Finetune: return "finetune";
    case Domain::Target: return "target";
    case Domain::Synthetic: return "synthetic";
  }
  return "?";
}

Domain domain_from_string(const std::string& s) {
  for (auto d : {Domain::Source, Domain::Finetune, Domain::Target, Domain::Synthetic})
    if (s == to_string(d)) return d;
  throw DataError("unknown domain '" + s + "' (expected source, finetune, target or synthetic)");
}

// ---------------------------------------------------------------- manifest

DatasetManifest::DatasetManifest(std::vector<ImageRecord> records) {
  for (auto& r : records) add(std::move(r));
}

void DatasetManifest::add(ImageRecord r) {
  if (!paths_.insert(r.path).second) throw DataError("duplicate path in manifest: " + r.path);
  records_.push_back(std::move(r));
}

void DatasetManifest::append(const DatasetManifest& other) {
  for (const auto& r : other) add(r);
}

std::vector<std::size_t> DatasetManifest::indices_of(PlaneLabel p) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records_.size(); ++i)
    if (records_[i].label == p) out.push_back(i);
  return out;
}

std::map<std::string, std::vector<std::size_t>> DatasetManifest::by_patient() const {
  std::map<std::string, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < records_.size(); ++i) out[records_[i].patient_id].push_back(i);
  return out;
}

std::array<int, kNumPlanes> DatasetManifest::label_counts() const {
  std::array<int, kNumPlanes> c{};
  for (const auto& r : records_) ++c[static_cast<std::size_t>(r.label)];
  return c;
}

std::vector<int> DatasetManifest::labels() const {
  std::vector<int> out;
  for (const auto& r : records_) out.push_back(static_cast<int>(r.label));
  return out;
}

std::string DatasetManifest::to_csv(const fs::path& base) const {
  std::string out = "path,label,patient_id,domain,source\n";
  const fs::path b = base.empty() ? fs::path() : fs::absolute(base).lexically_normal();
  for (const auto& r : records_) {
    std::string p = r.path;
    if (!b.empty()) {
      const fs::path rel = fs::path(r.path).lexically_relative(b);
      if (!rel.empty() && *rel.begin() != "..") p = rel.generic_string();
    }
    out += csv_row({p, to_string(r.label), r.patient_id, to_string(r.domain), r.source});
  }
  return out;
}

DatasetManifest DatasetManifest::from_csv(std::string_view text, const fs::path& base) {
  auto rows = parse_csv(text);
  const std::vector<std::string> header = {"path", "label", "patient_id", "domain", "source"};
  if (rows.empty() || rows[0] != header) throw DataError("manifest: expected header path,label,patient_id,domain,source");
  const fs::path b = base.empty() ? fs::path() : fs::absolute(base).lexically_normal();
  DatasetManifest m;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& row = rows[i];
    if (row.size() != 5) throw DataError("manifest: line " + std::to_string(i + 1) + " has " + std::to_string(row.size()) + " fields");
    ImageRecord r;
    fs::path p(row[0]);
    r.path = (p.is_absolute() || b.empty() ? p : b / p).lexically_normal().string();
    r.label = plane_from_string(row[1]);
    r.patient_id = row[2];
    r.domain = domain_from_string(row[3]);
    r.source = row[4];
    m.add(std::move(r));
  }
  return m;
}

void DatasetManifest::write_csv(const fs::path& file) const { write_file_atomic(file, to_csv(file.parent_path())); }

DatasetManifest DatasetManifest::read_csv(const fs::path& file) {
  return from_csv(read_file(file), fs::absolute(file).parent_path());
}

DatasetManifest load_directory(const fs::path& root, Domain domain, const std::string& source) {
  if (!fs::is_directory(root)) throw DataError("not a directory: " + root.string());
  const fs::path abs = fs::absolute(root).lexically_normal();

  std::map<std::string, std::string> patients;
  const bool have_map = fs::exists(abs / "patients.csv");
  if (have_map) {
    auto rows = parse_csv(read_file(abs / "patients.csv"));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != 2) throw DataError("patients.csv: line " + std::to_string(i + 1) + " must have 2 fields");
      if (i == 0 && rows[i][0] == "filename") continue;
      patients[rows[i][0]] = rows[i][1];
    }
  }

  std::vector<std::pair<PlaneLabel, fs::path>> dirs;
  for (const auto& e : fs::directory_iterator(abs)) {
    if (!e.is_directory()) continue;
    const std::string name = e.path().filename().string();
    PlaneLabel p;
    try {
      p = plane_from_string(name);
    } catch (const DataError&) {
      throw DataError("unknown subdirectory '" + name + "' in " + abs.string() + "; valid labels: " + valid_labels());
    }
    dirs.emplace_back(p, e.path());
  }
  std::sort(dirs.begin(), dirs.end());

  DatasetManifest m;
  bool warned = false;
  for (const auto& [label, dir] : dirs) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && lower(e.path().extension().string()) == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      ImageRecord r;
      r.path = f.string();
      r.label = label;
      r.domain = domain;
      r.source = source.empty() ? abs.filename().string() : source;
      const std::string rel = (dir.filename() / f.filename()).generic_string();
      if (auto it = patients.find(rel); it != patients.end()) {
        r.patient_id = it->second;
      } else if (auto it2 = patients.find(f.filename().string()); it2 != patients.end()) {
        r.patient_id = it2->second;
      } else {
        if (!warned) {
          log::warn("load_directory: no patient entry for " + rel + (have_map ? "" : " (no patients.csv)") +
                    "; using the filename prefix");
          warned = true;
        }
        const std::string stem = f.stem().string();
        r.patient_id = stem.substr(0, std::min(stem.find('_'), stem.find('-')));
        if (r.patient_id.empty()) r.patient_id = stem;
      }
      m.add(std::move(r));
    }
  }
  return m;
}

std::vector<DatasetManifest> patient_split(const DatasetManifest& m, const std::vector<double>& fractions,
                                           std::uint64_t seed) {
  if (fractions.empty()) throw ConfigError("patient_split: no fractions");
  double sum = 0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw ConfigError("patient_split: fractions must be non-negative");
    sum += f;
  }
  if (std::fabs(sum - 1.0) > 1e-9) throw ConfigError("patient_split: fractions sum to " + std::to_string(sum) + ", not 1");

  auto groups = m.by_patient();
  std::vector<std::string> ids;
  for (const auto& [id, _] : groups) ids.push_back(id);
  std::vector<std::size_t> active;
  for (std::size_t k = 0; k < fractions.size(); ++k)
    if (fractions[k] > 0.0) active.push_back(k);
  if (ids.size() < active.size())
    throw DataError("patient_split: " + std::to_string(ids.size()) + " patients cannot fill " +
                    std::to_string(active.size()) + " non-empty splits");

  Rng rng(derive_seed(seed, "patient_split"));
  rng.shuffle(ids.begin(), ids.end());

  std::vector<double> have(fractions.size(), 0.0);
  std::vector<std::vector<std::string>> members(fractions.size());
  const double total = static_cast<double>(m.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::size_t k;
    if (i < active.size()) {
      k = active[i];
    } else {
      k = active[0];
      double best = -1e300;
      for (std::size_t a : active) {
        const double deficit = fractions[a] * total - have[a];
        if (deficit > best) {
          best = deficit;
          k = a;
        }
      }
    }
    have[k] += static_cast<double>(groups[ids[i]].size());
    members[k].push_back(ids[i]);
  }

  std::vector<DatasetManifest> out(fractions.size());
  std::map<std::string, std::size_t> where;
  for (std::size_t k = 0; k < members.size(); ++k)
    for (const auto& id : members[k]) where[id] = k;
  for (const auto& r : m) out[where.at(r.patient_id)].add(r);
  return out;
}

// ---------------------------------------------------------------- pixels

float normalize(std::uint8_t v) { return static_cast<float>(static_cast<double>(v) / 127.5 - 1.0); }

std::vector<float> normalize(std::span<const std::uint8_t> v) {
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = normalize(v[i]);
  return out;
}

std::uint8_t to_byte(float v) {
  const double x = std::round((static_cast<double>(v) + 1.0) * 127.5);
  if (!(x >= 0.0)) return 0;  // also maps NaN to 0
  return static_cast<std::uint8_t>(std::min(x, 255.0));
}

GrayImage resize(const GrayImage& img, int side) {
  if (side < 1) throw ConfigError("resize: side must be >= 1, got " + std::to_string(side));
  if (img.height < 1 || img.width < 1) throw ShapeError("resize: empty image");
  GrayImage out{side, side, std::vector<float>(static_cast<std::size_t>(side) * side)};
  const double sy = static_cast<double>(img.height) / side, sx = static_cast<double>(img.width) / side;
  for (int y = 0; y < side; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < side; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      const double top = img.at(y0, x0) * (1 - wx) + img.at(y0, x1) * wx;
      const double bot = img.at(y1, x0) * (1 - wx) + img.at(y1, x1) * wx;
      out.at(y, x) = static_cast<float>(top * (1 - wy) + bot * wy);
    }
  }
  return out;
}

GrayImage decode_png(std::string_view bytes) {
  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&im, bytes.data(), bytes.size()))
    throw DataError(std::string("png decode: ") + im.message);
  im.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&im);
    throw DataError(std::string("png decode: ") + im.message);
  }
  return GrayImage{static_cast<int>(im.height), static_cast<int>(im.width), normalize(buf)};
}

std::string encode_png(const GrayImage& img) {
  if (img.height < 1 || img.width < 1 || img.pixels.size() != static_cast<std::size_t>(img.height) * img.width)
    throw ShapeError("png encode: malformed image");
  std::vector<std::uint8_t> buf(img.pixels.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = to_byte(img.pixels[i]);
  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(img.width);
  im.height = static_cast<png_uint_32>(img.height);
  im.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&im, nullptr, &size, 0, buf.data(), 0, nullptr))
    throw DataError(std::string("png encode: ") + im.message);
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&im, out.data(), &size, 0, buf.data(), 0, nullptr))
    throw DataError(std::string("png encode: ") + im.message);
  out.resize(size);
  return out;
}

GrayImage read_png(const fs::path& path) {
  try {
    return decode_png(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_png(const fs::path& path, const GrayImage& img) { write_file_atomic(path, encode_png(img)); }

Tensor stack_images(const std::vector<GrayImage>& images) {
  if (images.empty()) throw ShapeError("stack_images: no images");
  const int h = images[0].height, w = images[0].width;
  std::vector<float> all;
  all.reserve(images.size() * static_cast<std::size_t>(h * w));
  for (const auto& im : images) {
    if (im.height != h || im.width != w) throw ShapeError("stack_images: images differ in size");
    all.insert(all.end(), im.pixels.begin(), im.pixels.end());
  }
  return Tensor::from({static_cast<std::int64_t>(images.size()), 1, h, w}, std::move(all));
}

GrayImage image_at(const Tensor& batch, std::int64_t i) {
  if (batch.dim() != 4 || batch.size(1) != 1) throw ShapeError("image_at: expected (N, 1, H, W)");
  const int h = static_cast<int>(batch.size(2)), w = static_cast<int>(batch.size(3));
  auto d = batch.data();
  const auto off = static_cast<std::size_t>(i * h * w);
  return GrayImage{h, w, std::vector<float>(d.begin() + static_cast<std::ptrdiff_t>(off),
                                            d.begin() + static_cast<std::ptrdiff_t>(off + static_cast<std::size_t>(h * w)))};
}

Tensor load_images(const DatasetManifest& m, int side) {
  if (m.empty()) throw DataError("load_images: empty manifest");
  std::vector<GrayImage> images;
  images.reserve(m.size());
  for (const auto& r : m) {
    GrayImage im = read_png(r.path);
    if (im.height != side || im.width != side) im = resize(im, side);
    images.push_back(std::move(im));
  }
  return stack_images(images);
}

LabeledImages LabeledImages::subset(const std::vector<std::size_t>& idx) const {
  if (idx.empty()) throw ShapeError("LabeledImages::subset: empty index list");
  const auto per = static_cast<std::size_t>(images.numel() / images.size(0));
  auto d = images.data();
  std::vector<float> out;
  out.reserve(idx.size() * per);
  LabeledImages r;
  for (std::size_t i : idx) {
    if (i >= labels.size()) throw ShapeError("LabeledImages::subset: index out of range");
    out.insert(out.end(), d.begin() + static_cast<std::ptrdiff_t>(i * per), d.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    r.labels.push_back(labels[i]);
  }
  Shape s = images.shape();
  s[0] = static_cast<std::int64_t>(idx.size());
  r.images = Tensor::from(std::move(s), std::move(out));
  return r;
}

LabeledImages load_labeled(const DatasetManifest& m, int side) { return {load_images(m, side), m.labels()}; }

// ---------------------------------------------------------------- toy corpus

std::string to_string(ToyStyle s) {
  switch (s) {
    case ToyStyle::A: return "A";
    case ToyStyle::B: return "B";
    case ToyStyle::C: return "C";
  }
  return "?";
}

ToyStyle toy_style_from_string(const std::string& s) {
  if (s == "A" || s == "a") return ToyStyle::A;
  if (s == "B" || s == "b") return ToyStyle::B;
  if (s == "C" || s == "c") return ToyStyle::C;
  throw ConfigError("unknown toy style '" + s + "' (expected A, B or C)");
}

ToyStyleParams toy_style_params(ToyStyle s) {
  switch (s) {
    case ToyStyle::A: return {0.10, 1.00, 1.00, 0.00, 0.20, 0.04, 15.0, 0.0};
    case ToyStyle::B: return {0.15, 0.85, 0.90, 0.12, 0.30, 0.06, 15.0, 0.0};
    case ToyStyle::C: return {0.20, 0.70, 0.80, 0.25, 0.40, 0.08, 40.0, 0.5};
  }
  throw ConfigError("unknown toy style");
}

Domain toy_domain(ToyStyle s) {
  switch (s) {
    case ToyStyle::A: return Domain::Source;
    case ToyStyle::B: return Domain::Finetune;
    case ToyStyle::C: return Domain::Target;
  }
  return Domain::Source;
}

namespace {

// 1 inside (x < 0), 0 outside, with a soft edge of width w.
double inside(double x, double w) { return 1.0 / (1.0 + std::exp(x / w)); }

}  // namespace

GrayImage render_toy_image(ToyStyle style, PlaneLabel label, int side, std::uint64_t seed) {
  if (side < 1) throw ConfigError("render_toy_image: side must be >= 1");
  const ToyStyleParams sp = toy_style_params(style);
  Rng rng(seed);
  const double cx = rng.uniform(-0.15, 0.15), cy = rng.uniform(-0.15, 0.15);
  const double k = rng.uniform(0.85, 1.15);
  const double tilt = sp.tilt_deg * std::numbers::pi / 180.0;
  const double th = rng.uniform(-tilt, tilt);
  const double phi = rng.uniform(-tilt, tilt);
  const bool mirror = rng.uniform() < sp.p_mirror;
  const double ct = std::cos(th), st = std::sin(th);

  auto shape = [&](double u, double v) -> double {
    const double du = (mirror ? -u : u) - cx, dv = v - cy;
    const double p = du * ct + dv * st, q = -du * st + dv * ct;
    switch (label) {
      case PlaneLabel::BR: {
        const double d = std::hypot(p / (0.65 * k), q / (0.48 * k));
        return std::exp(-std::pow((d - 1.0) / 0.22, 2));
      }
      case PlaneLabel::AB: {
        const double outer = 0.5 * inside(std::hypot(p, q) - 0.6 * k, 0.04);
        const double ix = 0.15 * k * std::cos(phi), iy = 0.15 * k * std::sin(phi);
        return outer + 0.5 * inside(std::hypot(p - ix, q - iy) - 0.22 * k, 0.04);
      }
      case PlaneLabel::FE:
        return inside(std::fabs(p) - 0.75 * k, 0.04) * inside(std::fabs(q) - 0.09, 0.03);
      case PlaneLabel::TH: {
        const double s2 = 2.0 * std::pow(0.13 * k, 2);
        double f = 0;
        for (double a : {-1.0, 1.0})
          for (double b : {-1.0, 1.0}) f += std::exp(-(std::pow(p - a * 0.3 * k, 2) + std::pow(q - b * 0.3 * k, 2)) / s2);
        return std::min(f, 1.0);
      }
      case PlaneLabel::OT: return 0.0;
    }
    return 0.0;
  };

  // Speckle grain spans about two pixels: both noise fields are drawn on a
  // half-resolution grid and upsampled.
  const int grain = std::max(1, side / 2);
  auto field = [&] {
    GrayImage g{grain, grain, std::vector<float>(static_cast<std::size_t>(grain) * grain)};
    for (auto& v : g.pixels) v = static_cast<float>(rng.normal());
    return resize(g, side);
  };
  const GrayImage speckle = field();
  const GrayImage noise = field();
  GrayImage img{side, side, std::vector<float>(static_cast<std::size_t>(side) * side)};
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const double u = (x + 0.5) / side * 2.0 - 1.0, v = (y + 0.5) / side * 2.0 - 1.0;
      double I = sp.background + (1.0 - sp.background) * sp.gain * shape(u, v);
      I *= std::max(0.0, 1.0 + sp.speckle * speckle.at(y, x));
      I += sp.noise * noise.at(y, x);
      img.at(y, x) = static_cast<float>(std::clamp(sp.contrast * (2.0 * I - 1.0) + sp.offset, -1.0, 1.0));
    }
  return img;
}

DatasetManifest make_toy_corpus(ToyStyle style, int n_per_class, int side, std::uint64_t seed, const fs::path& out_dir) {
  if (n_per_class < 1) throw ConfigError("make_toy_corpus: n_per_class must be >= 1");
  const fs::path abs = fs::absolute(out_dir).lexically_normal();
  const std::string st = to_string(style);
  const std::uint64_t base = derive_seed(seed, "toy." + st);
  DatasetManifest m;
  std::string patients = "filename,patient_id\n";
  const int n = n_per_class * kNumPlanes;
  for (int j = 0; j < n; ++j) {
    const PlaneLabel label = kAllPlanes[static_cast<std::size_t>(j % kNumPlanes)];
    char name[64];
    std::snprintf(name, sizeof name, "%s_%s_%05d.png", st.c_str(), to_string(label).c_str(), j);
    char pid[32];
    std::snprintf(pid, sizeof pid, "%s-p%04d", st.c_str(), j / 3);
    const fs::path rel = fs::path(to_string(label)) / name;
    write_png(abs / rel, render_toy_image(style, label, side, derive_seed(base, static_cast<std::uint64_t>(j))));
    patients += csv_row({rel.generic_string(), pid});
    m.add(ImageRecord{(abs / rel).string(), label, pid, toy_domain(style), "toy-" + st});
  }
  write_file_atomic(abs / "patients.csv", patients);
  m.write_csv(abs / "manifest.csv");
  return m;
}

}  // namespace fulora
