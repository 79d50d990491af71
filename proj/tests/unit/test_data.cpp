#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "fulora/data.hpp"
#include "fulora/error.hpp"
#include "fulora/io_util.hpp"
#include "support.hpp"

using namespace fulora;
namespace fs = std::filesystem;

namespace {

GrayImage constant(int h, int w, float v) { return GrayImage{h, w, std::vector<float>(static_cast<std::size_t>(h * w), v)}; }

ImageRecord rec(const std::string& path, PlaneLabel l, const std::string& pid) {
  return ImageRecord{path, l, pid, Domain::Source, "test"};
}

}  // namespace

TEST_CASE("plane labels and prompts") {
  CHECK(to_string(PlaneLabel::TH) == "TH");
  CHECK(plane_from_string("br") == PlaneLabel::BR);
  CHECK(plane_from_string("Femur") == PlaneLabel::FE);
  CHECK_THROWS_AS(plane_from_string("XX"), DataError);
  CHECK(plane_prompt(PlaneLabel::AB) == "fetal ultrasound, abdomen plane");
  CHECK(all_plane_prompts().size() == 5);
  CHECK(domain_from_string(to_string(Domain::Synthetic)) == Domain::Synthetic);
}

TEST_CASE("manifest uniqueness and csv round trip") {
  DatasetManifest m;
  m.add(rec("/data/a/x.png", PlaneLabel::AB, "p1"));
  CHECK_THROWS_AS(m.add(rec("/data/a/x.png", PlaneLabel::BR, "p2")), DataError);
  m.add(rec("/data/a/with,comma.png", PlaneLabel::BR, "p\"2"));
  m.add(rec("/elsewhere/y.png", PlaneLabel::OT, "p3"));

  const std::string csv = m.to_csv("/data");
  CHECK(csv.rfind("path,label,patient_id,domain,source\n", 0) == 0);
  CHECK(csv.find("a/x.png,AB,p1,source,test\n") != std::string::npos);
  CHECK(csv.find("/elsewhere/y.png") != std::string::npos);
  CHECK(DatasetManifest::from_csv(csv, "/data") == m);
  CHECK(m.label_counts() == std::array<int, 5>{1, 1, 0, 0, 1});
  CHECK(m.indices_of(PlaneLabel::BR) == std::vector<std::size_t>{1});

  CHECK_THROWS_AS(DatasetManifest::from_csv("a,b\n", "/"), DataError);
  CHECK_THROWS_AS(DatasetManifest::from_csv("path,label,patient_id,domain,source\nx.png,ZZ,p,source,s\n", "/"), DataError);

  testing::TempDir dir("manifest");
  m.write_csv(dir / "m.csv");
  CHECK(DatasetManifest::read_csv(dir / "m.csv") == m);
}

TEST_CASE("load_directory") {
  testing::TempDir root("loaddir");
  CHECK(load_directory(root.path()).empty());

  for (auto p : kAllPlanes)
    for (int i = 0; i < 2; ++i)
      write_png(root / (to_string(p) + "/pat" + std::to_string(i) + "_img.png"), constant(4, 4, 0.0f));
  auto m = load_directory(root.path(), Domain::Target, "african");
  REQUIRE(m.size() == 10);
  CHECK(m.label_counts() == std::array<int, 5>{2, 2, 2, 2, 2});
  for (const auto& r : m) {
    CHECK(fs::path(r.path).parent_path().filename().string() == to_string(r.label));
    CHECK((r.patient_id == "pat0" || r.patient_id == "pat1"));
    CHECK(r.domain == Domain::Target);
    CHECK(r.source == "african");
  }

  write_file_atomic(root / "patients.csv", "filename,patient_id\nAB/pat0_img.png,P-17\npat1_img.png,P-99\n");
  auto mapped = load_directory(root.path());
  CHECK(mapped[0].patient_id == "P-17");
  CHECK(mapped[1].patient_id == "P-99");

  fs::create_directories(root / "lungs");
  try {
    load_directory(root.path());
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("lungs") != std::string::npos);
    CHECK(std::string(e.what()).find("AB, BR, FE, TH, OT") != std::string::npos);
  }
}

TEST_CASE("patient_split") {
  SUBCASE("one patient lands in exactly one split") {
    DatasetManifest m;
    for (int i = 0; i < 4; ++i) m.add(rec("/x/" + std::to_string(i), PlaneLabel::AB, "solo"));
    auto s = patient_split(m, {1.0, 0.0, 0.0}, 3);
    CHECK(s[0].size() == 4);
    CHECK(s[1].empty());
    CHECK(s[2].empty());
    CHECK_THROWS_AS(patient_split(m, {0.7, 0.15, 0.15}, 3), DataError);
  }

  SUBCASE("african-style patient accounting") {
    // 127 patients holding 450 images, split 61 / 66 by patient count.
    DatasetManifest m;
    Rng rng(5);
    int k = 0;
    for (int p = 0; p < 127; ++p) {
      const int n = 2 + static_cast<int>(rng.uniform_int(0, 3));
      for (int i = 0; i < n; ++i)
        m.add(rec("/img/" + std::to_string(k++), kAllPlanes[static_cast<std::size_t>(i % 4)], "pt" + std::to_string(p)));
    }
    const std::vector<double> fr = {61.0 / 127.0, 66.0 / 127.0};
    auto s = patient_split(m, fr, 11);
    std::set<std::string> a, b;
    for (const auto& r : s[0]) a.insert(r.patient_id);
    for (const auto& r : s[1]) b.insert(r.patient_id);
    for (const auto& id : a) CHECK(b.count(id) == 0);
    CHECK(s[0].size() + s[1].size() == m.size());
    CHECK(a.size() + b.size() == 127);
    CHECK(std::fabs(static_cast<double>(s[0].size()) / static_cast<double>(m.size()) - fr[0]) < 0.03);
    CHECK(patient_split(m, fr, 11)[0] == s[0]);
    CHECK(!(patient_split(m, fr, 12)[0] == s[0]));
  }

  DatasetManifest m;
  m.add(rec("/a", PlaneLabel::AB, "p"));
  CHECK_THROWS_AS(patient_split(m, {0.5, 0.4}, 1), ConfigError);
  CHECK_THROWS_AS(patient_split(m, {1.2, -0.2}, 1), ConfigError);
}

TEST_CASE("normalize and export mapping") {
  CHECK(normalize(std::uint8_t{0}) == -1.0f);
  CHECK(normalize(std::uint8_t{255}) == 1.0f);
  CHECK(normalize(std::uint8_t{128}) == doctest::Approx(0.00392157).epsilon(1e-6));
  for (int v = 0; v < 256; ++v) CHECK(to_byte(normalize(static_cast<std::uint8_t>(v))) == v);
  CHECK(to_byte(-3.0f) == 0);
  CHECK(to_byte(7.0f) == 255);
  CHECK(to_byte(0.0f) == 128);  // round(127.5) rounds half away from zero
}

TEST_CASE("bilinear resize") {
  Rng rng(2);
  GrayImage img{5, 5, {}};
  for (int i = 0; i < 25; ++i) img.pixels.push_back(static_cast<float>(rng.uniform(-1, 1)));
  auto same = resize(img, 5);
  for (int i = 0; i < 25; ++i) CHECK(std::fabs(same.pixels[static_cast<std::size_t>(i)] - img.pixels[static_cast<std::size_t>(i)]) < 1e-6);

  for (float v : resize(constant(7, 3, 0.3f), 11).pixels) CHECK(v == doctest::Approx(0.3f));

  GrayImage cb{2, 2, {1.0f, -1.0f, -1.0f, 1.0f}};
  auto up = resize(cb, 4);
  CHECK(up.at(0, 0) == 1.0f);
  CHECK(up.at(0, 3) == -1.0f);
  CHECK(up.at(3, 0) == -1.0f);
  CHECK(up.at(3, 3) == 1.0f);
  CHECK(up.at(0, 1) == doctest::Approx(0.5f));  // 3/4 of the way to the left pixel

  CHECK_THROWS_AS(resize(cb, 0), ConfigError);
}

TEST_CASE("png round trip") {
  GrayImage img{3, 4, {}};
  for (int v = 0; v < 12; ++v) img.pixels.push_back(normalize(static_cast<std::uint8_t>(v * 23)));
  const std::string bytes = encode_png(img);
  CHECK(bytes.substr(1, 3) == "PNG");
  CHECK(decode_png(bytes) == img);
  CHECK(encode_png(img) == bytes);
  CHECK_THROWS_AS(decode_png("not a png"), DataError);

  Tensor t = stack_images({img, img});
  CHECK(t.shape() == Shape{2, 1, 3, 4});
  CHECK(image_at(t, 1) == img);
}

TEST_CASE("toy corpus") {
  testing::TempDir a("toyA"), b("toyB");
  auto m = make_toy_corpus(ToyStyle::A, 10, 16, 7, a.path());
  CHECK(m.size() == 50);
  CHECK(m.label_counts() == std::array<int, 5>{10, 10, 10, 10, 10});
  auto groups = m.by_patient();
  CHECK(groups.size() == 17);  // ceil(50 / 3)
  for (const auto& [id, idx] : groups) CHECK(idx.size() <= 3);
  CHECK(DatasetManifest::read_csv(a / "manifest.csv") == m);
  auto by_path = [](const DatasetManifest& x) {
    auto v = x.records();
    std::sort(v.begin(), v.end(), [](const auto& l, const auto& r) { return l.path < r.path; });
    return v;
  };
  CHECK(by_path(load_directory(a.path(), Domain::Source, "toy-A")) == by_path(m));

  make_toy_corpus(ToyStyle::A, 10, 16, 7, b.path());
  for (const auto& r : m) {
    const auto rel = fs::path(r.path).lexically_relative(a.path());
    CHECK(read_file(r.path) == read_file(b.path() / rel));
  }

  // Shifted style: mean intensity over 100 images moves by at least 0.1.
  auto mean_of = [](ToyStyle s) {
    double sum = 0;
    for (int j = 0; j < 100; ++j) {
      auto im = render_toy_image(s, kAllPlanes[static_cast<std::size_t>(j % 5)], 16, static_cast<std::uint64_t>(j));
      for (float v : im.pixels) sum += v;
    }
    return sum / (100.0 * 256.0);
  };
  const double ma = mean_of(ToyStyle::A), mc = mean_of(ToyStyle::C);
  MESSAGE("toy mean intensity A " << ma << ", C " << mc);
  CHECK(mc - ma >= 0.1);
  CHECK(toy_style_params(ToyStyle::C).offset - toy_style_params(ToyStyle::A).offset >= 0.1);

  auto im = render_toy_image(ToyStyle::B, PlaneLabel::BR, 16, 3);
  for (float v : im.pixels) CHECK((v >= -1.0f && v <= 1.0f));
  CHECK_THROWS_AS(make_toy_corpus(ToyStyle::A, 0, 16, 1, a.path()), ConfigError);
}
