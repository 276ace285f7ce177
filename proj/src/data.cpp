#include "dcount/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dcount/hash.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace dcount::data {

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::val: return "val";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  if (s == "val") return Split::val;
  throw ConfigError("unknown split '" + s + "' (expected train|test|val)");
}

DensityMap DensityMap::from_values(cv::Mat values) {
  DensityMap m;
  m.values = std::move(values);
  m.total = cv::sum(m.values)[0];
  return m;
}

namespace {

Point clamp_to_box(Point p, int height, int width) {
  return {std::clamp(p.x, 0.0, static_cast<double>(width - 1)),
          std::clamp(p.y, 0.0, static_cast<double>(height - 1))};
}

bool in_bounds(Point p, int height, int width) {
  return p.x >= 0.0 && p.x < width && p.y >= 0.0 && p.y < height;
}

std::string point_str(Point p) {
  std::ostringstream os;
  os << "(" << p.x << ", " << p.y << ")";
  return os.str();
}

// Maps a coordinate through a resize whose pixel centres follow
// dst = (src + 0.5) * scale - 0.5, the convention cv::resize uses.
double rescale_coord(double v, double scale) {
  if (scale == 1.0) return v;
  return (v + 0.5) * scale - 0.5;
}

cv::Mat resize_image(const cv::Mat& src, int height, int width) {
  if (src.rows == height && src.cols == width) return src.clone();
  cv::Mat dst;
  const bool shrink = height < src.rows || width < src.cols;
  cv::resize(src, dst, cv::Size(width, height), 0, 0,
             shrink ? cv::INTER_AREA : cv::INTER_LINEAR);
  return dst;
}

struct Cell {
  double x, y, radius, blur, brightness;
};

// Soft disk: a uniform disk of the given radius seen through a Gaussian blur,
// approximated radially by the blurred step 0.5 * erfc((d - r) / (sqrt2 s)).
void render_cell(cv::Mat& canvas, const Cell& cell) {
  const double reach = cell.radius + 4.0 * cell.blur + 1.0;
  const int x0 = std::max(0, static_cast<int>(std::floor(cell.x - reach)));
  const int x1 = std::min(canvas.cols - 1, static_cast<int>(std::ceil(cell.x + reach)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cell.y - reach)));
  const int y1 = std::min(canvas.rows - 1, static_cast<int>(std::ceil(cell.y + reach)));
  const double denom = std::sqrt(2.0) * std::max(cell.blur, 1e-3);
  for (int y = y0; y <= y1; ++y) {
    double* row = canvas.ptr<double>(y);
    for (int x = x0; x <= x1; ++x) {
      const double d = std::hypot(x - cell.x, y - cell.y);
      row[x] += cell.brightness * 0.5 * std::erfc((d - cell.radius) / denom);
    }
  }
}

}  // namespace

void SynthConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("synth: " + m); };
  if (num_images < 0) fail("num_images must be >= 0");
  if (height < 1 || width < 1) fail("image_size must be positive");
  if (count_std < 0.0) fail("count_std must be >= 0");
  if (!(radius_min > 0.0)) fail("cell_radius_range min must be > 0");
  if (radius_min > radius_max) fail("cell_radius_range min > max");
  if (blur_min < 0.0) fail("blur_sigma_range min must be >= 0");
  if (blur_min > blur_max) fail("blur_sigma_range min > max");
  if (noise_std < 0.0) fail("noise_std must be >= 0");
}

std::vector<ImageSample> generate_synthetic(const SynthConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> count_dist(config.count_mean,
                                              config.count_std);
  std::uniform_real_distribution<double> ux(0.0, config.width - 1.0);
  std::uniform_real_distribution<double> uy(0.0, config.height - 1.0);
  std::uniform_real_distribution<double> ur(config.radius_min,
                                            config.radius_max);
  std::uniform_real_distribution<double> ub(config.blur_min, config.blur_max);
  std::uniform_real_distribution<double> ubright(0.6, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  // Fluorescence tint, BGR order.
  constexpr double kGain[3] = {1.0, 0.45, 0.2};

  std::vector<ImageSample> out;
  out.reserve(config.num_images);
  for (int i = 0; i < config.num_images; ++i) {
    const double drawn = config.count_std > 0.0 ? count_dist(rng)
                                                : config.count_mean;
    const int count = static_cast<int>(std::lround(std::max(0.0, drawn)));

    std::vector<Cell> cells;
    cells.reserve(count);
    for (int c = 0; c < count; ++c) {
      Cell cell{};
      for (int attempt = 0;; ++attempt) {
        cell = {ux(rng), uy(rng), ur(rng), ub(rng), ubright(rng)};
        if (config.overlap_allowed) break;
        const bool clear = std::none_of(
            cells.begin(), cells.end(), [&](const Cell& o) {
              return std::hypot(o.x - cell.x, o.y - cell.y) <
                     o.radius + cell.radius;
            });
        if (clear) break;
        if (attempt >= 1000) {
          throw ConfigError("synth: cannot place " + std::to_string(count) +
                            " non-overlapping cells in a " +
                            std::to_string(config.width) + "x" +
                            std::to_string(config.height) + " image");
        }
      }
      cells.push_back(cell);
    }

    cv::Mat intensity = cv::Mat::zeros(config.height, config.width, CV_64F);
    for (const Cell& cell : cells) render_cell(intensity, cell);

    cv::Mat image(config.height, config.width, CV_32FC3);
    for (int y = 0; y < config.height; ++y) {
      const double* src = intensity.ptr<double>(y);
      auto* dst = image.ptr<cv::Vec3f>(y);
      for (int x = 0; x < config.width; ++x) {
        const double v = std::min(1.0, src[x]);
        for (int ch = 0; ch < 3; ++ch) {
          const double n = config.noise_std > 0.0 ? config.noise_std * noise(rng) : 0.0;
          dst[x][ch] = static_cast<float>(std::clamp(kGain[ch] * v + n, 0.0, 1.0));
        }
      }
    }

    ImageSample s;
    s.image = image;
    s.dots.points.reserve(cells.size());
    for (const Cell& cell : cells) s.dots.points.push_back({cell.x, cell.y});
    char id[32];
    std::snprintf(id, sizeof(id), "synth_%04d", i);
    s.source_id = id;
    s.parent_id = id;
    out.push_back(std::move(s));
  }
  assign_splits(out, config.seed);
  return out;
}

double density_peak_value(double sigma) {
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  double sum = 0.0;
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      sum += std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
    }
  }
  return 1.0 / sum;
}

DensityMap rasterize_density(const DotAnnotation& dots, int height, int width,
                             double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("rasterize_density: sigma must be > 0");
  for (std::size_t i = 0; i < dots.points.size(); ++i) {
    if (!in_bounds(dots.points[i], height, width)) {
      throw AnnotationError("dot #" + std::to_string(i) + " at " +
                            point_str(dots.points[i]) + " lies outside the " +
                            std::to_string(width) + "x" +
                            std::to_string(height) + " image");
    }
  }
  cv::Mat values = cv::Mat::zeros(height, width, CV_64F);
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  std::vector<double> kernel;
  for (const Point& p : dots.points) {
    const int cx = static_cast<int>(std::lround(p.x));
    const int cy = static_cast<int>(std::lround(p.y));
    const int x0 = std::max(0, cx - radius), x1 = std::min(width - 1, cx + radius);
    const int y0 = std::max(0, cy - radius), y1 = std::min(height - 1, cy + radius);
    const int kw = x1 - x0 + 1;
    kernel.assign(static_cast<std::size_t>(kw) * (y1 - y0 + 1), 0.0);
    double mass = 0.0;
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double d2 = (x - p.x) * (x - p.x) + (y - p.y) * (y - p.y);
        const double v = std::exp(-d2 * inv2s2);
        kernel[static_cast<std::size_t>(y - y0) * kw + (x - x0)] = v;
        mass += v;
      }
    }
    if (mass <= 0.0) {
      // sigma far below a pixel: all mass goes to the nearest pixel.
      values.at<double>(std::clamp(cy, 0, height - 1),
                        std::clamp(cx, 0, width - 1)) += 1.0;
      continue;
    }
    const double inv = 1.0 / mass;
    for (int y = y0; y <= y1; ++y) {
      double* row = values.ptr<double>(y);
      for (int x = x0; x <= x1; ++x) {
        row[x] += kernel[static_cast<std::size_t>(y - y0) * kw + (x - x0)] * inv;
      }
    }
  }
  return DensityMap::from_values(values);
}

std::vector<ImageSample> pad_and_tile(const ImageSample& sample, int tile) {
  if (sample.image.empty()) throw ShapeError("pad_and_tile: empty image");
  if (tile < 1) throw ConfigError("pad_and_tile: tile must be >= 1");
  const int side = std::max(sample.height(), sample.width());
  cv::Mat square;
  cv::copyMakeBorder(sample.image, square, 0, side - sample.height(), 0,
                     side - sample.width(), cv::BORDER_CONSTANT,
                     cv::Scalar::all(0));
  // Nearest multiple of the tile size; exact halves round up.
  const int k = std::max(1, static_cast<int>(std::floor(
                                static_cast<double>(side) / tile + 0.5)));
  const int target = k * tile;
  const cv::Mat resized = resize_image(square, target, target);
  const double scale = static_cast<double>(target) / side;

  std::vector<ImageSample> tiles(static_cast<std::size_t>(k) * k);
  for (int r = 0; r < k; ++r) {
    for (int c = 0; c < k; ++c) {
      ImageSample& t = tiles[static_cast<std::size_t>(r) * k + c];
      t.image = resized(cv::Rect(c * tile, r * tile, tile, tile)).clone();
      t.source_id = k == 1 ? sample.source_id
                           : sample.source_id + "_r" + std::to_string(r) +
                                 "c" + std::to_string(c);
      t.parent_id = sample.parent_id.empty() ? sample.source_id
                                             : sample.parent_id;
      t.split = sample.split;
    }
  }
  for (const Point& p : sample.dots.points) {
    const Point q = clamp_to_box(
        {rescale_coord(p.x, scale), rescale_coord(p.y, scale)}, target, target);
    // Half-open tile intervals [c*tile, (c+1)*tile).
    const int c = std::min(k - 1, static_cast<int>(q.x) / tile);
    const int r = std::min(k - 1, static_cast<int>(q.y) / tile);
    tiles[static_cast<std::size_t>(r) * k + c].dots.points.push_back(
        {q.x - c * tile, q.y - r * tile});
  }
  return tiles;
}

ImageSample resize_sample(const ImageSample& sample, int height, int width) {
  if (sample.image.empty()) throw ShapeError("resize_sample: empty image");
  ImageSample out;
  out.image = resize_image(sample.image, height, width);
  const double sx = static_cast<double>(width) / sample.width();
  const double sy = static_cast<double>(height) / sample.height();
  for (const Point& p : sample.dots.points) {
    out.dots.points.push_back(clamp_to_box(
        {rescale_coord(p.x, sx), rescale_coord(p.y, sy)}, height, width));
  }
  out.source_id = sample.source_id;
  out.parent_id = sample.parent_id.empty() ? sample.source_id : sample.parent_id;
  out.split = sample.split;
  return out;
}

std::vector<ImageSample> split_quadrants(const ImageSample& sample, int tile) {
  if (sample.image.empty()) throw ShapeError("split_quadrants: empty image");
  const int hh = sample.height() / 2, hw = sample.width() / 2;
  if (hh < 1 || hw < 1) throw ShapeError("split_quadrants: image too small");
  std::vector<ImageSample> quads(4);
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 2; ++c) {
      ImageSample& q = quads[r * 2 + c];
      q.image = sample.image(cv::Rect(c * hw, r * hh, hw, hh)).clone();
      q.source_id = sample.source_id + "_q" + std::to_string(r * 2 + c);
      q.parent_id = sample.parent_id.empty() ? sample.source_id : sample.parent_id;
      q.split = sample.split;
    }
  }
  for (const Point& p : sample.dots.points) {
    // Odd remainders (last row/column) join the last patch.
    const int c = std::min(1, static_cast<int>(p.x) / hw);
    const int r = std::min(1, static_cast<int>(p.y) / hh);
    quads[r * 2 + c].dots.points.push_back(
        clamp_to_box({p.x - c * hw, p.y - r * hh}, hh, hw));
  }
  for (ImageSample& q : quads) {
    const std::string id = q.source_id, parent = q.parent_id;
    q = resize_sample(q, tile, tile);
    q.source_id = id;
    q.parent_id = parent;
  }
  return quads;
}

std::string to_string(AugmentOp op) {
  switch (op) {
    case AugmentOp::identity: return "identity";
    case AugmentOp::hflip: return "hflip";
    case AugmentOp::vflip: return "vflip";
    case AugmentOp::rot90cw: return "rot90cw";
    case AugmentOp::rot90ccw: return "rot90ccw";
  }
  return "?";
}

cv::Mat augment_mat(const cv::Mat& m, AugmentOp op) {
  cv::Mat out;
  switch (op) {
    case AugmentOp::identity: return m;
    case AugmentOp::hflip: cv::flip(m, out, 1); break;
    case AugmentOp::vflip: cv::flip(m, out, 0); break;
    case AugmentOp::rot90cw:
    case AugmentOp::rot90ccw:
      if (m.rows != m.cols) {
        throw ShapeError("augment: 90-degree rotation needs a square input, got " +
                         std::to_string(m.cols) + "x" + std::to_string(m.rows));
      }
      cv::rotate(m, out, op == AugmentOp::rot90cw ? cv::ROTATE_90_CLOCKWISE
                                                  : cv::ROTATE_90_COUNTERCLOCKWISE);
      break;
  }
  return out;
}

Point augment_point(Point p, int height, int width, AugmentOp op) {
  switch (op) {
    case AugmentOp::identity: return p;
    case AugmentOp::hflip: return {width - 1 - p.x, p.y};
    case AugmentOp::vflip: return {p.x, height - 1 - p.y};
    case AugmentOp::rot90cw: return {height - 1 - p.y, p.x};
    case AugmentOp::rot90ccw: return {p.y, width - 1 - p.x};
  }
  return p;
}

ImageSample augment(const ImageSample& sample, AugmentOp op) {
  if (op == AugmentOp::identity) return sample;
  ImageSample out = sample;
  out.image = augment_mat(sample.image, op);
  for (Point& p : out.dots.points) {
    p = augment_point(p, sample.height(), sample.width(), op);
  }
  return out;
}

std::pair<ImageSample, DensityMap> augment(const ImageSample& sample,
                                           const DensityMap& map,
                                           AugmentOp op) {
  if (map.height() != sample.height() || map.width() != sample.width()) {
    throw ShapeError("augment: density map and image sizes differ");
  }
  DensityMap m;
  m.values = augment_mat(map.values, op);
  m.total = map.total;  // isometries permute values
  return {augment(sample, op), m};
}

Preprocess parse_preprocess(const std::string& s) {
  if (s == "none") return Preprocess::none;
  if (s == "pad_tile" || s == "dcc") return Preprocess::pad_tile;
  if (s == "resize" || s == "adi") return Preprocess::resize;
  if (s == "quadrants" || s == "mbm") return Preprocess::quadrants;
  throw ConfigError("unknown preprocess mode '" + s +
                    "' (expected none|pad_tile|resize|quadrants)");
}

std::string to_string(Preprocess p) {
  switch (p) {
    case Preprocess::none: return "none";
    case Preprocess::pad_tile: return "pad_tile";
    case Preprocess::resize: return "resize";
    case Preprocess::quadrants: return "quadrants";
  }
  return "?";
}

std::vector<ImageSample> preprocess(const std::vector<ImageSample>& samples,
                                    Preprocess mode, int tile) {
  std::vector<ImageSample> out;
  for (const ImageSample& s : samples) {
    switch (mode) {
      case Preprocess::none: out.push_back(s); break;
      case Preprocess::resize: out.push_back(resize_sample(s, tile, tile)); break;
      case Preprocess::pad_tile:
        for (auto& t : pad_and_tile(s, tile)) out.push_back(std::move(t));
        break;
      case Preprocess::quadrants:
        for (auto& t : split_quadrants(s, tile)) out.push_back(std::move(t));
        break;
    }
  }
  return out;
}

void assign_splits(std::vector<ImageSample>& samples, std::uint64_t seed) {
  std::set<std::string> parents;
  for (const auto& s : samples) {
    parents.insert(s.parent_id.empty() ? s.source_id : s.parent_id);
  }
  std::vector<std::pair<std::uint64_t, std::string>> ranked;
  for (const auto& p : parents) ranked.emplace_back(keyed_hash64(seed, p), p);
  std::sort(ranked.begin(), ranked.end());

  const std::size_t n = ranked.size();
  // 10:9:1 quotas, rounded half up.
  const std::size_t n_train = std::min(n, (10 * n + 10) / 20);
  const std::size_t n_test = std::min(n - n_train, (9 * n + 10) / 20);
  std::map<std::string, Split> split_of;
  for (std::size_t i = 0; i < n; ++i) {
    split_of[ranked[i].second] = i < n_train            ? Split::train
                                 : i < n_train + n_test ? Split::test
                                                        : Split::val;
  }
  for (auto& s : samples) {
    s.split = split_of.at(s.parent_id.empty() ? s.source_id : s.parent_id);
  }
}

DotAnnotation parse_annotation(const std::string& text,
                               const std::string& origin) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + upto, '\n');
    throw ParseError(origin + ":" + std::to_string(line) +
                     ": malformed annotation JSON");
  }
  if (!doc.is_array()) {
    throw ParseError(origin + ":1: annotation must be a JSON list of {x, y}");
  }
  DotAnnotation dots;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const json& e = doc[i];
    if (!e.is_object() || !e.contains("x") || !e.contains("y") ||
        !e["x"].is_number() || !e["y"].is_number()) {
      throw ParseError(origin + ": entry " + std::to_string(i) +
                       " is not an {x, y} record");
    }
    dots.points.push_back({e["x"].get<double>(), e["y"].get<double>()});
  }
  return dots;
}

std::string annotation_to_json(const DotAnnotation& dots) {
  json arr = json::array();
  for (const Point& p : dots.points) arr.push_back({{"x", p.x}, {"y", p.y}});
  return arr.dump();
}

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

cv::Mat to_float_bgr(const cv::Mat& raw) {
  cv::Mat f;
  switch (raw.depth()) {
    case CV_8U: raw.convertTo(f, CV_32F, 1.0 / 255.0); break;
    case CV_16U: raw.convertTo(f, CV_32F, 1.0 / 65535.0); break;
    default: raw.convertTo(f, CV_32F); break;
  }
  cv::Mat bgr;
  if (f.channels() == 1) {
    cv::cvtColor(f, bgr, cv::COLOR_GRAY2BGR);
  } else if (f.channels() == 4) {
    cv::cvtColor(f, bgr, cv::COLOR_BGRA2BGR);
  } else {
    bgr = f;
  }
  cv::min(bgr, 1.0, bgr);
  cv::max(bgr, 0.0, bgr);
  return bgr;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::vector<ImageSample> load_dataset(const fs::path& root,
                                      const DatasetLayout& layout,
                                      std::vector<std::string>* warnings) {
  if (!fs::is_directory(root)) {
    throw IngestionError("dataset root " + root.string() + " does not exist");
  }
  auto warn = [&](const std::string& m) {
    std::clog << "warning: " << m << "\n";
    if (warnings) warnings->push_back(m);
  };

  const fs::path image_dir = root / layout.images_dir;
  const fs::path ann_dir = root / layout.annotations_dir;
  std::vector<std::pair<std::string, fs::path>> images;
  if (fs::is_directory(image_dir)) {
    for (const auto& entry : fs::directory_iterator(image_dir)) {
      if (!entry.is_regular_file()) continue;
      const std::string ext = lower(entry.path().extension().string());
      if (ext == ".png" || ext == ".tif" || ext == ".tiff") {
        images.emplace_back(entry.path().stem().string(), entry.path());
      }
    }
  }
  std::sort(images.begin(), images.end());
  if (images.empty()) {
    warn("no images found under " + image_dir.string());
    return {};
  }

  std::vector<std::string> missing;
  for (const auto& [id, path] : images) {
    if (!fs::is_regular_file(ann_dir / (id + ".json"))) {
      missing.push_back((ann_dir / (id + ".json")).string());
    }
  }
  if (!missing.empty()) {
    std::string msg = "missing annotation files:";
    for (const auto& m : missing) msg += " " + m;
    throw IngestionError(msg);
  }

  std::vector<ImageSample> samples;
  for (const auto& [id, path] : images) {
    const cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (raw.empty()) throw IngestionError("cannot decode image " + path.string());
    ImageSample s;
    s.image = to_float_bgr(raw);
    const fs::path ann = ann_dir / (id + ".json");
    s.dots = parse_annotation(read_text(ann), ann.string());
    for (std::size_t i = 0; i < s.dots.points.size(); ++i) {
      Point& p = s.dots.points[i];
      if (!in_bounds(p, s.height(), s.width())) {
        throw AnnotationError(ann.string() + ": dot #" + std::to_string(i) +
                              " at " + point_str(p) + " outside the " +
                              std::to_string(s.width()) + "x" +
                              std::to_string(s.height()) + " image");
      }
      p = clamp_to_box(p, s.height(), s.width());
    }
    s.source_id = id;
    s.parent_id = id;
    samples.push_back(std::move(s));
  }

  const fs::path index_path = root / kIndexFile;
  if (!fs::is_regular_file(index_path)) {
    assign_splits(samples, layout.split_seed);
    return samples;
  }
  std::map<std::string, std::pair<std::string, Split>> index;
  try {
    const json doc = json::parse(read_text(index_path));
    for (const json& e : doc.at("samples")) {
      index[e.at("id").get<std::string>()] = {e.at("parent").get<std::string>(),
                                              parse_split(e.at("split").get<std::string>())};
    }
  } catch (const json::exception& e) {
    throw ParseError(index_path.string() + ": " + e.what());
  }
  for (ImageSample& s : samples) {
    auto it = index.find(s.source_id);
    if (it == index.end()) {
      throw IngestionError(index_path.string() + " has no entry for " + s.source_id);
    }
    s.parent_id = it->second.first;
    s.split = it->second.second;
  }
  return samples;
}

std::vector<WrittenFile> write_dataset(const fs::path& root,
                                       const std::vector<ImageSample>& samples,
                                       const DatasetLayout& layout) {
  fs::create_directories(root / layout.images_dir);
  fs::create_directories(root / layout.annotations_dir);
  std::vector<WrittenFile> written;
  for (const ImageSample& s : samples) {
    const fs::path img = root / layout.images_dir / (s.source_id + ".png");
    const fs::path ann = root / layout.annotations_dir / (s.source_id + ".json");
    cv::Mat u16;
    s.image.convertTo(u16, CV_16U, 65535.0);
    if (!cv::imwrite(img.string(), u16)) {
      throw IngestionError("cannot write " + img.string());
    }
    {
      std::ofstream out(ann, std::ios::binary);
      out << annotation_to_json(s.dots);
      if (!out) throw IngestionError("cannot write " + ann.string());
    }
    written.push_back({s.source_id, sha256_file(img), sha256_file(ann), s.split});
  }
  json index = {{"samples", json::array()}};
  for (const ImageSample& s : samples) {
    index["samples"].push_back(
        {{"id", s.source_id},
         {"parent", s.parent_id.empty() ? s.source_id : s.parent_id},
         {"split", to_string(s.split)}});
  }
  std::ofstream out(root / kIndexFile, std::ios::binary | std::ios::trunc);
  out << index.dump(2) << "\n";
  if (!out) throw IngestionError("cannot write " + (root / kIndexFile).string());
  return written;
}

std::string dataset_hash(const std::vector<ImageSample>& samples) {
  Sha256 h;
  for (const ImageSample& s : samples) {
    h.update(s.source_id).update(s.parent_id).update(to_string(s.split));
    const cv::Mat img = s.image.isContinuous() ? s.image : s.image.clone();
    h.update_pod(img.rows).update_pod(img.cols).update_pod(img.type());
    h.update(img.data, img.total() * img.elemSize());
    h.update_pod(s.dots.points.size());
    for (const Point& p : s.dots.points) h.update_pod(p.x).update_pod(p.y);
  }
  return h.hex();
}

std::vector<ImageSample> select_split(const std::vector<ImageSample>& samples,
                                      Split split) {
  std::vector<ImageSample> out;
  std::copy_if(samples.begin(), samples.end(), std::back_inserter(out),
               [&](const ImageSample& s) { return s.split == split; });
  return out;
}

}  // namespace dcount::data
