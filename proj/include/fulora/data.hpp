#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fulora/tensor.hpp"

namespace fulora {

enum class PlaneLabel { AB = 0, BR = 1, FE = 2, TH = 3, OT = 4 };
inline constexpr int kNumPlanes = 5;
inline constexpr std::array<PlaneLabel, kNumPlanes> kAllPlanes = {PlaneLabel::AB, PlaneLabel::BR, PlaneLabel::FE,
                                                                  PlaneLabel::TH, PlaneLabel::OT};

/// "AB", "BR", ...
std::string to_string(PlaneLabel p);
/// "abdomen", "brain", "femur", "thorax", "other"
std::string plane_name(PlaneLabel p);
/// Accepts the code or the plane name, case-insensitive. DataError otherwise,
/// listing the valid labels.
PlaneLabel plane_from_string(const std::string& s);
/// "fetal ultrasound, <plane name> plane"
std::string plane_prompt(PlaneLabel p);
std::vector<std::string> all_plane_prompts();

enum class Domain { Source, Finetune, Target, Synthetic };
std::string to_string(Domain d);
Domain domain_from_string(const std::string& s);

inline constexpr const char* kSyntheticPatient = "synthetic";

struct ImageRecord {
  std::string path;  // absolute in memory; relative to the CSV when written
  PlaneLabel label = PlaneLabel::OT;
  std::string patient_id;
  Domain domain = Domain::Source;
  std::string source;

  bool operator==(const ImageRecord&) const = default;
};

/// Ordered records with unique paths.
class DatasetManifest {
 public:
  DatasetManifest() = default;
  explicit DatasetManifest(std::vector<ImageRecord> records);

  /// DataError on a duplicate path.
  void add(ImageRecord r);
  void append(const DatasetManifest& other);

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const ImageRecord& operator[](std::size_t i) const { return records_[i]; }
  const std::vector<ImageRecord>& records() const { return records_; }
  auto begin() const { return records_.begin(); }
  auto end() const { return records_.end(); }

  std::vector<std::size_t> indices_of(PlaneLabel p) const;
  /// Patient id -> record indices, ordered by id.
  std::map<std::string, std::vector<std::size_t>> by_patient() const;
  std::array<int, kNumPlanes> label_counts() const;
  std::vector<int> labels() const;

  /// Header `path,label,patient_id,domain,source`. Paths are written relative
  /// to `base` when they live under it.
  std::string to_csv(const std::filesystem::path& base) const;
  static DatasetManifest from_csv(std::string_view text, const std::filesystem::path& base);
  void write_csv(const std::filesystem::path& file) const;
  static DatasetManifest read_csv(const std::filesystem::path& file);

  bool operator==(const DatasetManifest& o) const { return records_ == o.records_; }

 private:
  std::vector<ImageRecord> records_;
  std::set<std::string> paths_;
};

/// Scans `root/<label>/*.png` for each plane subdirectory (code or name).
/// Patient ids come from `root/patients.csv` (`filename,patient_id`, where
/// filename is "label/file.png" or "file.png"); without it they are the file
/// stem up to the first '_' or '-', and a warning is logged.
DatasetManifest load_directory(const std::filesystem::path& root, Domain domain = Domain::Source,
                               const std::string& source = "");

/// Patient-disjoint split. Patients are shuffled, one is seeded into every
/// split with a positive fraction, and the rest go greedily to the split
/// furthest below its image target. Returns one manifest per fraction.
std::vector<DatasetManifest> patient_split(const DatasetManifest& m, const std::vector<double>& fractions,
                                           std::uint64_t seed);

// ---------------------------------------------------------------- pixels

struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;  // row-major, [-1, 1]

  float at(int y, int x) const { return pixels[static_cast<std::size_t>(y * width + x)]; }
  float& at(int y, int x) { return pixels[static_cast<std::size_t>(y * width + x)]; }
  bool operator==(const GrayImage&) const = default;
};

/// v / 127.5 - 1
float normalize(std::uint8_t v);
std::vector<float> normalize(std::span<const std::uint8_t> v);
/// Export mapping round((v + 1) * 127.5) clamped to [0, 255].
std::uint8_t to_byte(float v);

/// Bilinear with half-pixel centers and edge clamping; square output.
inline constexpr const char* kResizeMethod = "bilinear";
GrayImage resize(const GrayImage& img, int side);

/// 8-bit grayscale PNG. Colour, alpha and 16-bit inputs are converted.
GrayImage decode_png(std::string_view bytes);
std::string encode_png(const GrayImage& img);
GrayImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const GrayImage& img);

/// (N, 1, side, side) from a list of equally sized images.
Tensor stack_images(const std::vector<GrayImage>& images);
GrayImage image_at(const Tensor& batch, std::int64_t i);
/// Reads every record, resizing to side x side where needed.
Tensor load_images(const DatasetManifest& m, int side);

/// Images (N, 1, side, side) with their integer plane labels.
struct LabeledImages {
  Tensor images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  /// Rows idx as a new (k, 1, H, W) tensor plus labels.
  LabeledImages subset(const std::vector<std::size_t>& idx) const;
};
LabeledImages load_labeled(const DatasetManifest& m, int side);

// ---------------------------------------------------------------- toy corpus

enum class ToyStyle { A, B, C };
std::string to_string(ToyStyle s);
ToyStyle toy_style_from_string(const std::string& s);

/// Rendering statistics of a style. Pixel value before clamping is
/// contrast * (2 * I - 1) + offset, with I = background + (1 - background) *
/// gain * shape, under multiplicative speckle and additive noise. The shape
/// axis is tilted by up to tilt_deg from horizontal and the layout is
/// mirrored left-right with probability p_mirror.
struct ToyStyleParams {
  double background;
  double gain;
  double contrast;
  double offset;
  double speckle;
  double noise;
  double tilt_deg;
  double p_mirror;
};
ToyStyleParams toy_style_params(ToyStyle s);
/// Domain tag of a style: A source, B finetune, C target.
Domain toy_domain(ToyStyle s);

/// One procedural image: BR elliptical ring, AB disc within disc, FE bright
/// bar, TH four-blob cluster, OT speckle only.
GrayImage render_toy_image(ToyStyle style, PlaneLabel label, int side, std::uint64_t seed);

/// Writes `out_dir/<LABEL>/<style>_<LABEL>_<index>.png`, `patients.csv` and
/// `manifest.csv`. Image j has label j % 5 and patient "<style>-p<j / 3>".
DatasetManifest make_toy_corpus(ToyStyle style, int n_per_class, int side, std::uint64_t seed,
                                const std::filesystem::path& out_dir);

}  // namespace fulora
