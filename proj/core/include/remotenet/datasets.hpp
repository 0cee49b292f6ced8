#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "remotenet/config.hpp"
#include "remotenet/ops.hpp"
#include "remotenet/tensor.hpp"

namespace remotenet {

struct Sample {
  Tensor<float> image;  // [3, H, W], values in [0, 1]
  LabelMap label;       // [H, W], values in [0, num_classes) or kIgnoreIndex
  std::string id;
};

/// Ordered RGB -> class index table. Colors not listed decode to kIgnoreIndex.
class Palette {
 public:
  struct Entry {
    std::array<uint8_t, 3> rgb;
    int index;
    std::string name;
  };

  Palette() = default;
  /// Throws ConfigError unless colors are unique and indices dense from 0.
  explicit Palette(std::vector<Entry> entries);

  /// Lines of "R,G,B,class_index,name"; '#' starts a comment.
  static Palette parse(const std::string& text);
  static Palette load(const std::string& path);
  /// Standard ISPRS Potsdam colors (clutter last, index 5).
  static Palette potsdam();
  static Palette loveda();

  int lookup(uint8_t r, uint8_t g, uint8_t b) const;
  const Entry* find_index(int index) const;
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<std::string> class_names() const;
  std::string to_text() const;

 private:
  std::vector<Entry> entries_;
};

/// Random-access sample source. Iterating indices in order is the stream.
class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual size_t size() const = 0;
  virtual Sample get(size_t i) const = 0;
};

enum class Split { train, val, test };
Split parse_split(std::string_view s);

/// LoveDA raw mask value: 0 -> ignore, k -> k - 1 for k in 1..7, else ignore.
int32_t remap_loveda(uint8_t raw);

/// LoveDA layout: <root>/{Train,Val,Test}/[<domain>/]{images_png,masks_png}/<id>.png.
/// Masks are required for train and val; a missing mask raises IngestionError
/// naming the id. Samples are sorted by id.
std::unique_ptr<Dataset> load_loveda(const std::string& root, Split split);

/// Standard 24/14 tile split of the 38 Potsdam tiles, as "2_10" style ids.
std::vector<std::string> potsdam_tile_ids(Split split);

/// Potsdam layout: <root>/2_Ortho_RGB/top_potsdam_<id>_RGB.tif (or
/// 3_Ortho_IRRG/..._IRRG.tif) with <root>/5_Labels_all/top_potsdam_<id>_label.tif.
std::unique_ptr<Dataset> load_potsdam(const std::string& root, Split split, const Palette& palette,
                                      const std::string& rendition = "RGB");

/// Cuts every sample of `base` into window x window patches on a
/// sliding_windows grid.
std::unique_ptr<Dataset> patch_dataset(std::shared_ptr<const Dataset> base, int window, int stride);

/// Synthetic scenes of axis-aligned colored rectangles on an 8-pixel grid;
/// each class has a fixed color (plus small noise), so labels are recoverable
/// from pixels. Every sample contains every class.
std::unique_ptr<Dataset> toy_dataset(int n, int hw, int classes, unsigned long long seed);
std::array<uint8_t, 3> toy_class_color(int cls, int classes);

/// Dataset subset by index list (sharding, validation splits).
std::unique_ptr<Dataset> subset(std::shared_ptr<const Dataset> base, std::vector<size_t> indices);

// ---- augmentation -----------------------------------------------------------

struct AugmentSpec {
  bool hflip = false;
  bool vflip = false;
  double scale_min = 1.0;
  double scale_max = 1.0;
  int crop = 0;  // 0 keeps the full extent
};

Sample hflip(const Sample& s);
Sample vflip(const Sample& s);
/// Bilinear image, nearest-neighbour label.
Sample rescale(const Sample& s, int64_t out_h, int64_t out_w);
/// Pads bottom/right with zeros (image) and kIgnoreIndex (label).
Sample pad_to(const Sample& s, int64_t h, int64_t w);
Sample crop(const Sample& s, int64_t top, int64_t left, int64_t h, int64_t w);

/// Random flips, scale drawn uniformly from [scale_min, scale_max], then a
/// uniformly placed crop. The same geometry is applied to image and label.
Sample augment(const Sample& s, const AugmentSpec& spec, std::mt19937_64& rng);

/// Per-axis window offsets covering [0, dim); the last is clipped to dim - window.
std::vector<int64_t> axis_offsets(int64_t dim, int64_t window, int64_t stride);
/// Top-left corners (row, col) of windows covering an h x w extent.
std::vector<std::pair<int64_t, int64_t>> sliding_windows(int64_t h, int64_t w, int64_t window, int64_t stride);

/// Stacks equally sized samples into normalized images [B, 3, H, W] and labels [B, H, W].
std::pair<Tensor<float>, LabelMap> make_batch(const std::vector<Sample>& samples, const std::array<double, 3>& mean,
                                              const std::array<double, 3>& std);
Tensor<float> normalize_image(const Tensor<float>& image, const std::array<double, 3>& mean,
                              const std::array<double, 3>& std);

// ---- raster IO ---------------------------------------------------------------

/// 8-bit RGB raster -> [3, H, W] in [0, 1].
Tensor<float> read_image(const std::string& path);
void write_index_png(const std::string& path, const LabelMap& labels);
void write_color_png(const std::string& path, const LabelMap& labels, const Palette& palette);

}  // namespace remotenet
