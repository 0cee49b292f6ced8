#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <doctest.h>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "remotenet/datasets.hpp"
#include "remotenet/errors.hpp"

namespace fs = std::filesystem;
using namespace remotenet;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("remotenet_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Writes an RGB image with a solid colour per row band (OpenCV wants BGR).
void write_rgb(const fs::path& p, int h, int w, const std::vector<std::array<uint8_t, 3>>& bands) {
  fs::create_directories(p.parent_path());
  cv::Mat m(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y) {
    const auto& c = bands[static_cast<size_t>(y * bands.size() / h)];
    for (int x = 0; x < w; ++x) m.at<cv::Vec3b>(y, x) = {c[2], c[1], c[0]};
  }
  REQUIRE(cv::imwrite(p.string(), m));
}

void write_gray(const fs::path& p, int h, int w, uint8_t v) {
  fs::create_directories(p.parent_path());
  REQUIRE(cv::imwrite(p.string(), cv::Mat(h, w, CV_8UC1, cv::Scalar(v))));
}

}  // namespace

TEST_CASE("Potsdam palette decodes ISPRS colours and ignores the rest") {
  const auto p = Palette::potsdam();
  CHECK(p.lookup(255, 255, 0) == 4);  // car
  CHECK(p.lookup(255, 0, 0) == 5);    // clutter
  CHECK(p.lookup(255, 255, 255) == 0);
  CHECK(p.lookup(12, 34, 56) == kIgnoreIndex);
  CHECK(p.class_names().size() == 6);
  CHECK(Palette::parse(p.to_text()).class_names() == p.class_names());
}

TEST_CASE("palette files are validated") {
  CHECK_THROWS_AS(Palette::parse("0,0,0,0,a\n0,0,0,1,b\n"), ConfigError);  // repeated colour
  CHECK_THROWS_AS(Palette::parse("0,0,0,0,a\n1,1,1,2,b\n"), ConfigError);  // gap in indices
  CHECK_THROWS_AS(Palette::parse("0,0,0\n"), ConfigError);
  const auto p = Palette::parse("# comment\n10,20,30,0,road\n40,50,60,1,roof\n");
  CHECK(p.lookup(40, 50, 60) == 1);
}

TEST_CASE("Potsdam tile lists") {
  const auto train = potsdam_tile_ids(Split::train);
  const auto test = potsdam_tile_ids(Split::test);
  CHECK(train.size() == 24);
  CHECK(test.size() == 14);
  std::set<std::string> all(train.begin(), train.end());
  all.insert(test.begin(), test.end());
  CHECK(all.size() == 38);
  CHECK(std::find(train.begin(), train.end(), "7_10") != train.end());
  CHECK_THROWS_AS(potsdam_tile_ids(Split::val), ConfigError);
}

TEST_CASE("LoveDA labels shift down by one with 0 ignored") {
  CHECK(remap_loveda(0) == kIgnoreIndex);
  CHECK(remap_loveda(1) == 0);
  CHECK(remap_loveda(7) == 6);
  CHECK(remap_loveda(8) == kIgnoreIndex);
}

TEST_CASE("LoveDA loader pairs images and masks across domains") {
  TempDir tmp("loveda");
  const auto train = tmp.path / "Train";
  for (int i = 0; i < 3; ++i) {
    write_rgb(train / "Urban/images_png" / (std::to_string(i) + ".png"), 16, 16, {{255, 0, 0}});
    write_gray(train / "Urban/masks_png" / (std::to_string(i) + ".png"), 16, 16, static_cast<uint8_t>(i + 1));
  }
  for (int i = 3; i < 5; ++i) {
    write_rgb(train / "Rural/images_png" / (std::to_string(i) + ".png"), 16, 16, {{0, 0, 255}});
    write_gray(train / "Rural/masks_png" / (std::to_string(i) + ".png"), 16, 16, 0);
  }
  const auto ds = load_loveda(tmp.path.string(), Split::train);
  REQUIRE(ds->size() == 5);
  const auto s0 = ds->get(0);
  CHECK(s0.id == "Rural/3");
  CHECK(s0.image.shape() == Shape{3, 16, 16});
  CHECK(s0.image[2 * 256] == 1.0f);  // blue channel
  CHECK(s0.label[0] == kIgnoreIndex);
  const auto s4 = ds->get(4);
  CHECK(s4.id == "Urban/2");
  CHECK(s4.image[0] == 1.0f);
  CHECK(s4.label[0] == 2);

  fs::remove(train / "Urban/masks_png/1.png");
  try {
    (void)load_loveda(tmp.path.string(), Split::train);
    FAIL("missing mask not reported");
  } catch (const IngestionError& e) {
    CHECK(std::string(e.what()).find("Urban/1") != std::string::npos);
  }
  CHECK_THROWS_AS(load_loveda(tmp.path.string(), Split::val), IngestionError);
}

TEST_CASE("LoveDA test split loads without masks") {
  TempDir tmp("loveda_test");
  write_rgb(tmp.path / "Test/Urban/images_png/9.png", 8, 8, {{1, 2, 3}});
  const auto ds = load_loveda(tmp.path.string(), Split::test);
  REQUIRE(ds->size() == 1);
  const Sample t = ds->get(0);
  for (int32_t v : t.label.values()) CHECK(v == kIgnoreIndex);
}

TEST_CASE("Potsdam loader decodes colour labels and cuts patches") {
  TempDir tmp("potsdam");
  for (const auto& id : potsdam_tile_ids(Split::train)) {
    write_rgb(tmp.path / "2_Ortho_RGB" / ("top_potsdam_" + id + "_RGB.tif"), 40, 40, {{10, 20, 30}});
    write_rgb(tmp.path / "5_Labels_all" / ("top_potsdam_" + id + "_label.tif"), 40, 40,
              {{255, 255, 0}, {0, 0, 255}, {7, 7, 7}, {255, 0, 0}});
  }
  std::shared_ptr<const Dataset> tiles = load_potsdam(tmp.path.string(), Split::train, Palette::potsdam(), "RGB");
  REQUIRE(tiles->size() == 24);
  const auto s = tiles->get(0);
  CHECK(s.label[0] == 4);
  CHECK(s.label[10 * 40] == 1);
  CHECK(s.label[20 * 40] == kIgnoreIndex);
  CHECK(s.label[39 * 40] == 5);

  // 40 px at window 32, stride 16: offsets {0, 8} per axis.
  const auto patches = patch_dataset(tiles, 32, 16);
  CHECK(patches->size() == 24 * 4);
  CHECK(patches->get(3).image.shape() == Shape{3, 32, 32});

  CHECK_THROWS_AS(load_potsdam(tmp.path.string(), Split::test, Palette::potsdam(), "RGB"), IngestionError);
  CHECK_THROWS_AS(load_potsdam(tmp.path.string(), Split::train, Palette::potsdam(), "NIR"), ConfigError);

  std::ofstream(tmp.path / "5_Labels_all/top_potsdam_2_10_label.tif") << "not a tiff";
  CHECK_THROWS_AS(tiles->get(0), IngestionError);
}

TEST_CASE("toy dataset is deterministic and shows every class") {
  const auto a = toy_dataset(4, 64, 3, 0);
  const auto b = toy_dataset(4, 64, 3, 0);
  for (size_t i = 0; i < 4; ++i) {
    const auto sa = a->get(i), sb = b->get(i);
    CHECK(sa.image == sb.image);
    CHECK(sa.label == sb.label);
    std::set<int32_t> present(sa.label.values().begin(), sa.label.values().end());
    CHECK(present == std::set<int32_t>{0, 1, 2});
  }
  CHECK_FALSE(toy_dataset(4, 64, 3, 1)->get(0).label == a->get(0).label);
}

TEST_CASE("augmentation") {
  const Sample s = toy_dataset(1, 64, 3, 2)->get(0);
  std::mt19937_64 rng(0);

  SUBCASE("no flips, unit scale and a full crop leave the sample unchanged") {
    const Sample t = augment(s, {false, false, 1.0, 1.0, 64}, rng);
    CHECK(t.image == s.image);
    CHECK(t.label == s.label);
  }
  SUBCASE("flipping twice is the identity") {
    CHECK(hflip(hflip(s)).image == s.image);
    CHECK(vflip(vflip(s)).label == s.label);
    CHECK(hflip(s).label[0] == s.label[63]);
  }
  SUBCASE("large crops pad with ignore labels") {
    const Sample t = augment(s, {true, true, 0.5, 2.0, 512}, rng);
    CHECK(t.image.shape() == Shape{3, 512, 512});
    CHECK(t.label.shape() == Shape{512, 512});
  }
  SUBCASE("padding and cropping") {
    const Sample p = pad_to(s, 70, 66);
    CHECK(p.label[69 * 66 + 65] == kIgnoreIndex);
    CHECK(p.image[69 * 66 + 65] == 0.0f);
    CHECK(crop(p, 0, 0, 64, 64).label == s.label);
    CHECK_THROWS_AS(crop(s, 10, 10, 64, 64), ConfigError);
  }
  SUBCASE("rescaled labels stay in the label set") {
    const Sample r = rescale(s, 100, 37);
    for (int32_t v : r.label.values()) CHECK((v >= 0 && v < 3));
  }
  SUBCASE("bad specs") {
    CHECK_THROWS_AS(augment(s, {false, false, 1.5, 1.0, 64}, rng), ConfigError);
    CHECK_THROWS_AS(augment(s, {false, false, 1.0, 1.0, -1}, rng), ConfigError);
  }
}

TEST_CASE("sliding windows cover every pixel") {
  const auto offs = axis_offsets(6000, 1024, 512);
  CHECK(offs.size() == 11);
  CHECK(offs.front() == 0);
  CHECK(offs.back() == 4976);
  CHECK(axis_offsets(1024, 1024, 512) == std::vector<int64_t>{0});
  CHECK_THROWS_AS(axis_offsets(100, 128, 64), ConfigError);

  std::mt19937 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int64_t window = 1 + rng() % 20;
    const int64_t dim = window + rng() % 60;
    const int64_t stride = 1 + rng() % 30;  // may exceed the window
    std::vector<int> hits(static_cast<size_t>(dim), 0);
    for (auto o : axis_offsets(dim, window, stride)) {
      REQUIRE(o + window <= dim);
      for (int64_t i = o; i < o + window; ++i) ++hits[static_cast<size_t>(i)];
    }
    for (int h : hits) CHECK(h > 0);
  }
  CHECK(sliding_windows(2048, 3000, 1024, 1024).size() == 2 * 3);
}

TEST_CASE("batches stack normalized images") {
  const auto ds = toy_dataset(2, 32, 2, 0);
  const auto [x, y] = make_batch({ds->get(0), ds->get(1)}, {0.5, 0.5, 0.5}, {0.5, 0.5, 0.5});
  CHECK(x.shape() == Shape{2, 3, 32, 32});
  CHECK(y.shape() == Shape{2, 32, 32});
  CHECK(x[0] == doctest::Approx((ds->get(0).image[0] - 0.5f) / 0.5f));
}

TEST_CASE("index and colour rasters round-trip through PNG") {
  TempDir tmp("png");
  LabelMap l({5, 7});
  for (int64_t i = 0; i < l.numel(); ++i) l[i] = static_cast<int32_t>(i % 6);
  write_index_png((tmp.path / "i.png").string(), l);
  write_color_png((tmp.path / "c.png").string(), l, Palette::potsdam());
  const cv::Mat idx = cv::imread((tmp.path / "i.png").string(), cv::IMREAD_UNCHANGED);
  REQUIRE(idx.rows == 5);
  CHECK(idx.cols == 7);
  CHECK(idx.at<uint8_t>(0, 4) == 4);
  const Tensor<float> c = read_image((tmp.path / "c.png").string());
  CHECK(c.shape() == Shape{3, 5, 7});
  CHECK(c[4] == 1.0f);       // car is yellow: R = 1
  CHECK(c[2 * 35 + 4] == 0.0f);  // B = 0
}
