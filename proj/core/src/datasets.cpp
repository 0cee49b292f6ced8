#include "remotenet/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <fmt/format.h>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "remotenet/errors.hpp"

namespace fs = std::filesystem;

namespace remotenet {

// ---- palette ---------------------------------------------------------------

Palette::Palette(std::vector<Entry> entries) : entries_(std::move(entries)) {
  std::set<std::array<uint8_t, 3>> colors;
  std::set<int> indices;
  for (const auto& e : entries_) {
    if (!colors.insert(e.rgb).second) {
      throw ConfigError(fmt::format("palette: duplicate color {},{},{}", e.rgb[0], e.rgb[1], e.rgb[2]));
    }
    if (e.index < 0 || e.index == kIgnoreIndex || !indices.insert(e.index).second) {
      throw ConfigError(fmt::format("palette: bad or duplicate class index {}", e.index));
    }
  }
  for (int i = 0; i < static_cast<int>(indices.size()); ++i) {
    if (!indices.count(i)) throw ConfigError(fmt::format("palette: class indices not dense, {} missing", i));
  }
}

Palette Palette::parse(const std::string& text) {
  std::vector<Entry> entries;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    boost::algorithm::trim(line);
    if (line.empty()) continue;
    std::vector<std::string> f;
    boost::algorithm::split(f, line, boost::is_any_of(","));
    if (f.size() != 5) throw ConfigError(fmt::format("palette line {}: expected R,G,B,class_index,name", lineno));
    Entry e;
    try {
      for (int c = 0; c < 3; ++c) {
        const int v = std::stoi(boost::algorithm::trim_copy(f[c]));
        if (v < 0 || v > 255) throw ConfigError(fmt::format("palette line {}: channel out of range", lineno));
        e.rgb[c] = static_cast<uint8_t>(v);
      }
      e.index = std::stoi(boost::algorithm::trim_copy(f[3]));
    } catch (const std::logic_error&) {
      throw ConfigError(fmt::format("palette line {}: not a number", lineno));
    }
    e.name = boost::algorithm::trim_copy(f[4]);
    entries.push_back(std::move(e));
  }
  if (entries.empty()) throw ConfigError("palette: no entries");
  return Palette(std::move(entries));
}

Palette Palette::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open palette file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

Palette Palette::potsdam() {
  return Palette({{{255, 255, 255}, 0, "impervious_surfaces"},
                  {{0, 0, 255}, 1, "building"},
                  {{0, 255, 255}, 2, "low_vegetation"},
                  {{0, 255, 0}, 3, "tree"},
                  {{255, 255, 0}, 4, "car"},
                  {{255, 0, 0}, 5, "clutter"}});
}

Palette Palette::loveda() {
  return Palette({{{255, 255, 255}, 0, "background"},
                  {{255, 0, 0}, 1, "building"},
                  {{255, 255, 0}, 2, "road"},
                  {{0, 0, 255}, 3, "water"},
                  {{159, 129, 183}, 4, "barren"},
                  {{0, 255, 0}, 5, "forest"},
                  {{255, 195, 128}, 6, "agriculture"}});
}

int Palette::lookup(uint8_t r, uint8_t g, uint8_t b) const {
  for (const auto& e : entries_) {
    if (e.rgb[0] == r && e.rgb[1] == g && e.rgb[2] == b) return e.index;
  }
  return kIgnoreIndex;
}

const Palette::Entry* Palette::find_index(int index) const {
  for (const auto& e : entries_) {
    if (e.index == index) return &e;
  }
  return nullptr;
}

std::vector<std::string> Palette::class_names() const {
  std::vector<std::string> names(entries_.size());
  for (const auto& e : entries_) names[static_cast<size_t>(e.index)] = e.name;
  return names;
}

std::string Palette::to_text() const {
  std::string out;
  for (const auto& e : entries_) out += fmt::format("{},{},{},{},{}\n", e.rgb[0], e.rgb[1], e.rgb[2], e.index, e.name);
  return out;
}

// ---- raster IO ---------------------------------------------------------------

namespace {

Tensor<float> mat_to_image(const cv::Mat& bgr) {
  const int h = bgr.rows, w = bgr.cols;
  Tensor<float> img({3, h, w});
  float* d = img.data();
  const int64_t plane = int64_t{h} * w;
  for (int y = 0; y < h; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) d[c * plane + int64_t{y} * w + x] = row[x][2 - c] / 255.0f;
    }
  }
  return img;
}

cv::Mat imread_checked(const std::string& path, int flags, const std::string& id) {
  cv::Mat m;
  try {
    m = cv::imread(path, flags);
  } catch (const cv::Exception& e) {
    throw IngestionError(fmt::format("{}: cannot decode {}: {}", id, path, e.what()));
  }
  if (m.empty()) throw IngestionError(fmt::format("{}: cannot read or decode {}", id, path));
  if (m.depth() != CV_8U) throw IngestionError(fmt::format("{}: {} is not an 8-bit raster", id, path));
  return m;
}

void write_checked(const std::string& path, const cv::Mat& m) {
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  if (!cv::imwrite(path, m)) throw IngestionError("cannot write " + path);
}

}  // namespace

Tensor<float> read_image(const std::string& path) {
  return mat_to_image(imread_checked(path, cv::IMREAD_COLOR, path));
}

void write_index_png(const std::string& path, const LabelMap& labels) {
  if (labels.rank() != 2) throw ShapeError("write_index_png expects [H, W], got " + shape_str(labels.shape()));
  cv::Mat m(static_cast<int>(labels.dim(0)), static_cast<int>(labels.dim(1)), CV_8UC1);
  for (int64_t i = 0; i < labels.numel(); ++i) m.data[i] = static_cast<uint8_t>(std::clamp(labels[i], 0, 255));
  write_checked(path, m);
}

void write_color_png(const std::string& path, const LabelMap& labels, const Palette& palette) {
  if (labels.rank() != 2) throw ShapeError("write_color_png expects [H, W], got " + shape_str(labels.shape()));
  cv::Mat m(static_cast<int>(labels.dim(0)), static_cast<int>(labels.dim(1)), CV_8UC3, cv::Scalar(0, 0, 0));
  for (int64_t i = 0; i < labels.numel(); ++i) {
    if (const auto* e = palette.find_index(labels[i])) {
      auto& px = reinterpret_cast<cv::Vec3b*>(m.data)[i];
      px = cv::Vec3b(e->rgb[2], e->rgb[1], e->rgb[0]);
    }
  }
  write_checked(path, m);
}

// ---- datasets ----------------------------------------------------------------

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

int32_t remap_loveda(uint8_t raw) {
  if (raw >= 1 && raw <= 7) return raw - 1;
  return kIgnoreIndex;
}

namespace {

struct FileEntry {
  std::string id;
  std::string image;
  std::string mask;  // empty when unlabeled
};

enum class MaskKind { loveda, palette };

class FileDataset final : public Dataset {
 public:
  FileDataset(std::vector<FileEntry> entries, MaskKind kind, Palette palette)
      : entries_(std::move(entries)), kind_(kind), palette_(std::move(palette)) {}

  size_t size() const override { return entries_.size(); }

  Sample get(size_t i) const override {
    const auto& e = entries_.at(i);
    Sample s;
    s.id = e.id;
    s.image = mat_to_image(imread_checked(e.image, cv::IMREAD_COLOR, e.id));
    const int64_t h = s.image.dim(1), w = s.image.dim(2);
    s.label = LabelMap({h, w}, kIgnoreIndex);
    if (e.mask.empty()) return s;
    const cv::Mat m = imread_checked(e.mask, kind_ == MaskKind::loveda ? cv::IMREAD_UNCHANGED : cv::IMREAD_COLOR, e.id);
    if (m.rows != h || m.cols != w) {
      throw IngestionError(fmt::format("{}: mask {}x{} does not match image {}x{}", e.id, m.rows, m.cols, h, w));
    }
    if (kind_ == MaskKind::loveda) {
      if (m.channels() != 1) throw IngestionError(e.id + ": mask is not single-channel");
      for (int y = 0; y < m.rows; ++y) {
        const auto* row = m.ptr<uint8_t>(y);
        for (int x = 0; x < m.cols; ++x) s.label[y * w + x] = remap_loveda(row[x]);
      }
    } else {
      for (int y = 0; y < m.rows; ++y) {
        const auto* row = m.ptr<cv::Vec3b>(y);
        for (int x = 0; x < m.cols; ++x) s.label[y * w + x] = palette_.lookup(row[x][2], row[x][1], row[x][0]);
      }
    }
    return s;
  }

 private:
  std::vector<FileEntry> entries_;
  MaskKind kind_;
  Palette palette_;
};

std::string split_dir_name(Split s) {
  switch (s) {
    case Split::train: return "Train";
    case Split::val: return "Val";
    case Split::test: return "Test";
  }
  return {};
}

}  // namespace

std::unique_ptr<Dataset> load_loveda(const std::string& root, Split split) {
  const fs::path base = fs::path(root) / split_dir_name(split);
  if (!fs::is_directory(base)) throw IngestionError("LoveDA split directory not found: " + base.string());
  std::vector<fs::path> dirs{base};
  for (const auto& d : fs::directory_iterator(base)) {
    if (d.is_directory() && fs::is_directory(d.path() / "images_png")) dirs.push_back(d.path());
  }
  std::sort(dirs.begin(), dirs.end());

  const bool need_masks = split != Split::test;
  std::vector<FileEntry> entries;
  for (const auto& dir : dirs) {
    const fs::path images = dir / "images_png";
    if (!fs::is_directory(images)) continue;
    const std::string domain = dir == base ? "" : dir.filename().string() + "/";
    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(images)) {
      if (f.is_regular_file() && f.path().extension() == ".png") files.push_back(f.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      FileEntry e{domain + f.stem().string(), f.string(), {}};
      const fs::path mask = dir / "masks_png" / f.filename();
      if (fs::is_regular_file(mask)) {
        e.mask = mask.string();
      } else if (need_masks) {
        throw IngestionError("LoveDA sample " + e.id + ": mask not found at " + mask.string());
      }
      entries.push_back(std::move(e));
    }
    // Orphan masks are also missing pairs.
    if (fs::is_directory(dir / "masks_png")) {
      for (const auto& m : fs::directory_iterator(dir / "masks_png")) {
        if (m.path().extension() == ".png" && !fs::is_regular_file(images / m.path().filename())) {
          throw IngestionError("LoveDA sample " + domain + m.path().stem().string() + ": image not found");
        }
      }
    }
  }
  if (entries.empty()) throw IngestionError("no LoveDA images under " + base.string());
  return std::make_unique<FileDataset>(std::move(entries), MaskKind::loveda, Palette::loveda());
}

std::vector<std::string> potsdam_tile_ids(Split split) {
  static const std::vector<std::string> train{"2_10", "2_11", "2_12", "3_10", "3_11", "3_12", "4_10", "4_11",
                                              "4_12", "5_10", "5_11", "5_12", "6_7",  "6_8",  "6_9",  "6_10",
                                              "6_11", "6_12", "7_7",  "7_8",  "7_9",  "7_10", "7_11", "7_12"};
  static const std::vector<std::string> test{"2_13", "2_14", "3_13", "3_14", "4_13", "4_14", "4_15",
                                             "5_13", "5_14", "5_15", "6_13", "6_14", "6_15", "7_13"};
  switch (split) {
    case Split::train: return train;
    case Split::test: return test;
    case Split::val: throw ConfigError("Potsdam has no val split; use train or test");
  }
  return {};
}

std::unique_ptr<Dataset> load_potsdam(const std::string& root, Split split, const Palette& palette,
                                      const std::string& rendition) {
  std::string image_dir;
  if (rendition == "RGB") {
    image_dir = "2_Ortho_RGB";
  } else if (rendition == "IRRG") {
    image_dir = "3_Ortho_IRRG";
  } else {
    throw ConfigError("unknown Potsdam rendition '" + rendition + "' (expected RGB or IRRG)");
  }
  const auto locate = [&](const std::string& dir, const std::string& file) {
    for (const fs::path& p : {fs::path(root) / dir / file, fs::path(root) / file}) {
      if (fs::is_regular_file(p)) return p.string();
    }
    return std::string{};
  };
  std::vector<FileEntry> entries;
  for (const auto& id : potsdam_tile_ids(split)) {
    FileEntry e{id, locate(image_dir, "top_potsdam_" + id + "_" + rendition + ".tif"),
                locate("5_Labels_all", "top_potsdam_" + id + "_label.tif")};
    if (e.image.empty()) throw IngestionError("Potsdam tile " + id + ": " + rendition + " image not found");
    if (e.mask.empty()) throw IngestionError("Potsdam tile " + id + ": label image not found");
    entries.push_back(std::move(e));
  }
  return std::make_unique<FileDataset>(std::move(entries), MaskKind::palette, palette);
}

namespace {

class PatchDataset final : public Dataset {
 public:
  PatchDataset(std::shared_ptr<const Dataset> base, int window, int stride)
      : base_(std::move(base)), window_(window), stride_(stride) {
    // Sample extents are needed to enumerate patches; each source is read once here.
    for (size_t i = 0; i < base_->size(); ++i) {
      const Sample s = base_->get(i);
      const int64_t h = s.image.dim(1), w = s.image.dim(2);
      const int64_t wh = std::min<int64_t>(window_, h), ww = std::min<int64_t>(window_, w);
      for (const auto& [y, x] : grid(h, w, wh, ww)) index_.push_back({i, y, x, wh, ww});
    }
  }

  size_t size() const override { return index_.size(); }

  Sample get(size_t i) const override {
    const auto& p = index_.at(i);
    std::lock_guard lock(mu_);
    if (cached_index_ != p.source) {
      cached_ = base_->get(p.source);
      cached_index_ = p.source;
    }
    Sample s = crop(cached_, p.y, p.x, p.h, p.w);
    s.id = fmt::format("{}@{}_{}", cached_.id, p.y, p.x);
    return s;
  }

 private:
  struct Patch {
    size_t source;
    int64_t y, x, h, w;
  };

  std::vector<std::pair<int64_t, int64_t>> grid(int64_t h, int64_t w, int64_t wh, int64_t ww) const {
    std::vector<std::pair<int64_t, int64_t>> out;
    for (auto y : axis_offsets(h, wh, stride_)) {
      for (auto x : axis_offsets(w, ww, stride_)) out.emplace_back(y, x);
    }
    return out;
  }

  std::shared_ptr<const Dataset> base_;
  int window_, stride_;
  std::vector<Patch> index_;
  mutable std::mutex mu_;
  mutable Sample cached_;
  mutable size_t cached_index_ = static_cast<size_t>(-1);
};

class SubsetDataset final : public Dataset {
 public:
  SubsetDataset(std::shared_ptr<const Dataset> base, std::vector<size_t> idx) : base_(std::move(base)), idx_(std::move(idx)) {
    for (auto i : idx_) {
      if (i >= base_->size()) throw ConfigError(fmt::format("subset index {} out of range {}", i, base_->size()));
    }
  }
  size_t size() const override { return idx_.size(); }
  Sample get(size_t i) const override { return base_->get(idx_.at(i)); }

 private:
  std::shared_ptr<const Dataset> base_;
  std::vector<size_t> idx_;
};

class MemoryDataset final : public Dataset {
 public:
  explicit MemoryDataset(std::vector<Sample> s) : samples_(std::move(s)) {}
  size_t size() const override { return samples_.size(); }
  Sample get(size_t i) const override { return samples_.at(i); }

 private:
  std::vector<Sample> samples_;
};

}  // namespace

std::unique_ptr<Dataset> patch_dataset(std::shared_ptr<const Dataset> base, int window, int stride) {
  if (window < 1 || stride < 1) throw ConfigError("patch window and stride must be >= 1");
  return std::make_unique<PatchDataset>(std::move(base), window, stride);
}

std::unique_ptr<Dataset> subset(std::shared_ptr<const Dataset> base, std::vector<size_t> indices) {
  return std::make_unique<SubsetDataset>(std::move(base), std::move(indices));
}

std::array<uint8_t, 3> toy_class_color(int cls, int classes) {
  cv::Mat hsv(1, 1, CV_8UC3, cv::Scalar(static_cast<int>(180.0 * cls / classes), 200, 230));
  cv::Mat rgb;
  cv::cvtColor(hsv, rgb, cv::COLOR_HSV2RGB);
  const auto px = rgb.at<cv::Vec3b>(0, 0);
  return {px[0], px[1], px[2]};
}

std::unique_ptr<Dataset> toy_dataset(int n, int hw, int classes, unsigned long long seed) {
  if (classes < 2) throw ConfigError("toy dataset needs at least 2 classes");
  if (n < 1 || hw < 8) throw ConfigError("toy dataset needs n >= 1 and hw >= 8");
  constexpr int kCell = 8;
  const int cells = hw / kCell;
  if (cells * cells < classes) throw ConfigError("toy image too small for the number of classes");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> cell(0, cells - 1);
  std::uniform_real_distribution<float> noise(-0.03f, 0.03f);

  std::vector<Sample> samples;
  for (int k = 0; k < n; ++k) {
    // Class per 8x8 cell: background 0, then one rectangle per foreground class.
    std::vector<int> grid(static_cast<size_t>(cells * cells), 0);
    for (int c = 1; c < classes; ++c) {
      int r0 = cell(rng), r1 = cell(rng), c0 = cell(rng), c1 = cell(rng);
      if (r0 > r1) std::swap(r0, r1);
      if (c0 > c1) std::swap(c0, c1);
      for (int r = r0; r <= r1; ++r) {
        for (int q = c0; q <= c1; ++q) grid[static_cast<size_t>(r * cells + q)] = c;
      }
    }
    // Force any class painted over (or never drawn) into a free cell.
    for (int c = 0; c < classes; ++c) {
      if (std::find(grid.begin(), grid.end(), c) != grid.end()) continue;
      std::vector<int> count(static_cast<size_t>(classes), 0);
      for (int g : grid) ++count[static_cast<size_t>(g)];
      for (;;) {
        auto& g = grid[static_cast<size_t>(cell(rng) * cells + cell(rng))];
        if (count[static_cast<size_t>(g)] > 1) {
          g = c;
          break;
        }
      }
    }

    Sample s;
    s.id = fmt::format("toy_{:04d}", k);
    s.image = Tensor<float>({3, hw, hw});
    s.label = LabelMap({hw, hw});
    const int64_t plane = int64_t{hw} * hw;
    for (int y = 0; y < hw; ++y) {
      for (int x = 0; x < hw; ++x) {
        const int gy = std::min(y / kCell, cells - 1), gx = std::min(x / kCell, cells - 1);
        const int c = grid[static_cast<size_t>(gy * cells + gx)];
        const auto rgb = toy_class_color(c, classes);
        s.label[int64_t{y} * hw + x] = c;
        for (int ch = 0; ch < 3; ++ch) {
          s.image[ch * plane + int64_t{y} * hw + x] = std::clamp(rgb[ch] / 255.0f + noise(rng), 0.0f, 1.0f);
        }
      }
    }
    samples.push_back(std::move(s));
  }
  return std::make_unique<MemoryDataset>(std::move(samples));
}

// ---- augmentation -------------------------------------------------------------

namespace {

void check_sample(const Sample& s) {
  if (s.image.rank() != 3 || s.image.dim(0) != 3 || s.label.rank() != 2 || s.label.dim(0) != s.image.dim(1) ||
      s.label.dim(1) != s.image.dim(2)) {
    throw ShapeError("sample image " + shape_str(s.image.shape()) + " and label " + shape_str(s.label.shape()) +
                     " disagree");
  }
}

template <typename Map>
Sample remap(const Sample& s, int64_t oh, int64_t ow, Map src) {
  check_sample(s);
  const int64_t h = s.image.dim(1), w = s.image.dim(2);
  Sample out{Tensor<float>({3, oh, ow}), LabelMap({oh, ow}), s.id};
  for (int64_t y = 0; y < oh; ++y) {
    for (int64_t x = 0; x < ow; ++x) {
      const auto [sy, sx] = src(y, x);
      const bool inside = sy >= 0 && sy < h && sx >= 0 && sx < w;
      out.label[y * ow + x] = inside ? s.label[sy * w + sx] : kIgnoreIndex;
      for (int64_t c = 0; c < 3; ++c) {
        out.image[(c * oh + y) * ow + x] = inside ? s.image[(c * h + sy) * w + sx] : 0.0f;
      }
    }
  }
  return out;
}

}  // namespace

Sample hflip(const Sample& s) {
  const int64_t w = s.image.dim(2);
  return remap(s, s.image.dim(1), w, [w](int64_t y, int64_t x) { return std::pair{y, w - 1 - x}; });
}

Sample vflip(const Sample& s) {
  const int64_t h = s.image.dim(1);
  return remap(s, h, s.image.dim(2), [h](int64_t y, int64_t x) { return std::pair{h - 1 - y, x}; });
}

Sample pad_to(const Sample& s, int64_t h, int64_t w) {
  return remap(s, std::max(h, s.image.dim(1)), std::max(w, s.image.dim(2)),
               [](int64_t y, int64_t x) { return std::pair{y, x}; });
}

Sample crop(const Sample& s, int64_t top, int64_t left, int64_t h, int64_t w) {
  check_sample(s);
  if (h < 1 || w < 1 || top < 0 || left < 0 || top + h > s.image.dim(1) || left + w > s.image.dim(2)) {
    throw ConfigError(fmt::format("crop {}x{} at ({}, {}) outside {}x{}", h, w, top, left, s.image.dim(1),
                                  s.image.dim(2)));
  }
  return remap(s, h, w, [top, left](int64_t y, int64_t x) { return std::pair{y + top, x + left}; });
}

Sample rescale(const Sample& s, int64_t out_h, int64_t out_w) {
  check_sample(s);
  if (out_h < 1 || out_w < 1) throw ConfigError("rescale target must be positive");
  const int64_t h = s.image.dim(1), w = s.image.dim(2);
  Sample out;
  out.id = s.id;
  {
    NoGradGuard guard;
    out.image = ops::resize_bilinear(Var<float>(s.image.reshaped({1, 3, h, w})), out_h, out_w)
                    .value()
                    .reshaped({3, out_h, out_w});
  }
  // Nearest source pixel under the same half-pixel-centre mapping.
  const auto src = [](int64_t o, int64_t in, int64_t out_n) {
    return std::min<int64_t>(in - 1, static_cast<int64_t>(std::floor((o + 0.5) * static_cast<double>(in) / out_n)));
  };
  out.label = LabelMap({out_h, out_w});
  for (int64_t y = 0; y < out_h; ++y) {
    const int64_t sy = src(y, h, out_h);
    for (int64_t x = 0; x < out_w; ++x) out.label[y * out_w + x] = s.label[sy * w + src(x, w, out_w)];
  }
  return out;
}

Sample augment(const Sample& s, const AugmentSpec& spec, std::mt19937_64& rng) {
  check_sample(s);
  if (spec.crop < 0) throw ConfigError(fmt::format("crop size must be >= 0, got {}", spec.crop));
  if (!(spec.scale_min > 0) || spec.scale_max < spec.scale_min) {
    throw ConfigError(fmt::format("invalid scale range [{}, {}]", spec.scale_min, spec.scale_max));
  }
  std::uniform_int_distribution<int> coin(0, 1);
  Sample out = s;
  if (spec.hflip && coin(rng)) out = hflip(out);
  if (spec.vflip && coin(rng)) out = vflip(out);
  if (spec.scale_min != 1.0 || spec.scale_max != 1.0) {
    const double f = std::uniform_real_distribution<double>(spec.scale_min, spec.scale_max)(rng);
    const auto oh = std::max<int64_t>(1, std::llround(out.image.dim(1) * f));
    const auto ow = std::max<int64_t>(1, std::llround(out.image.dim(2) * f));
    if (oh != out.image.dim(1) || ow != out.image.dim(2)) out = rescale(out, oh, ow);
  }
  if (spec.crop > 0) {
    out = pad_to(out, spec.crop, spec.crop);
    const auto top = std::uniform_int_distribution<int64_t>(0, out.image.dim(1) - spec.crop)(rng);
    const auto left = std::uniform_int_distribution<int64_t>(0, out.image.dim(2) - spec.crop)(rng);
    if (top != 0 || left != 0 || out.image.dim(1) != spec.crop || out.image.dim(2) != spec.crop) {
      out = crop(out, top, left, spec.crop, spec.crop);
    }
  }
  return out;
}

std::vector<int64_t> axis_offsets(int64_t dim, int64_t window, int64_t stride) {
  if (window < 1 || stride < 1) throw ConfigError("sliding window and stride must be >= 1");
  if (window > dim) throw ConfigError(fmt::format("window {} larger than extent {}", window, dim));
  // A stride wider than the window would leave gaps, so it is capped at the window.
  const int64_t step = std::min(stride, window);
  std::vector<int64_t> out;
  for (int64_t o = 0; o + window < dim; o += step) out.push_back(o);
  out.push_back(dim - window);
  return out;
}

std::vector<std::pair<int64_t, int64_t>> sliding_windows(int64_t h, int64_t w, int64_t window, int64_t stride) {
  std::vector<std::pair<int64_t, int64_t>> out;
  const auto ys = axis_offsets(h, window, stride);
  const auto xs = axis_offsets(w, window, stride);
  for (auto y : ys) {
    for (auto x : xs) out.emplace_back(y, x);
  }
  return out;
}

Tensor<float> normalize_image(const Tensor<float>& image, const std::array<double, 3>& mean,
                              const std::array<double, 3>& std) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("normalize expects [3, H, W], got " + shape_str(image.shape()));
  Tensor<float> out = image;
  const int64_t plane = image.dim(1) * image.dim(2);
  for (int c = 0; c < 3; ++c) {
    if (!(std[c] > 0)) throw ConfigError("normalization std must be positive");
    const auto m = static_cast<float>(mean[c]), inv = static_cast<float>(1.0 / std[c]);
    for (int64_t i = 0; i < plane; ++i) out[c * plane + i] = (out[c * plane + i] - m) * inv;
  }
  return out;
}

std::pair<Tensor<float>, LabelMap> make_batch(const std::vector<Sample>& samples, const std::array<double, 3>& mean,
                                              const std::array<double, 3>& std) {
  if (samples.empty()) throw ShapeError("empty batch");
  const int64_t b = static_cast<int64_t>(samples.size());
  const int64_t h = samples[0].image.dim(1), w = samples[0].image.dim(2);
  Tensor<float> x({b, 3, h, w});
  LabelMap y({b, h, w});
  for (int64_t i = 0; i < b; ++i) {
    const auto& s = samples[static_cast<size_t>(i)];
    check_sample(s);
    if (s.image.dim(1) != h || s.image.dim(2) != w) {
      throw ShapeError("batch samples differ in size: " + shape_str(s.image.shape()));
    }
    const auto img = normalize_image(s.image, mean, std);
    std::copy(img.storage().begin(), img.storage().end(), x.storage().begin() + i * 3 * h * w);
    std::copy(s.label.storage().begin(), s.label.storage().end(), y.storage().begin() + i * h * w);
  }
  return {std::move(x), std::move(y)};
}

}  // namespace remotenet
