#include "rvit/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "binary_io.hpp"
#include "rvit/masking.hpp"

namespace rvit {

namespace {

// Acklam's rational approximation refined by one Halley step.
double normal_quantile(double p) {
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                             1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                             6.680131188771972e+01,  -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                             -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                             3.754408661907416e+00};
  double x;
  if (p < 0.02425) {
    const double q = std::sqrt(-2 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (p > 1 - 0.02425) {
    const double q = std::sqrt(-2 * std::log(1 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  }
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = e * std::sqrt(2 * M_PI) * std::exp(x * x / 2);
  return x - u / (1 + x * u / 2);
}

std::vector<double> unit_kernel(double sigma, std::size_t& radius) {
  radius = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double norm = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double x = static_cast<double>(i) - static_cast<double>(radius);
    k[i] = std::exp(-0.5 * x * x / (sigma * sigma));
    norm += k[i] * k[i];
  }
  norm = std::sqrt(norm);
  for (double& v : k) v /= norm;
  return k;
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  SplitMix64 rng(a ^ (b * 0x9e3779b97f4a7c15ull));
  return rng.next();
}

}  // namespace

std::vector<double> SceneSpec::levels() const {
  if (!thresholds.empty()) return thresholds;
  std::vector<double> out;
  for (std::size_t i = 1; i < classes; ++i) {
    out.push_back(normal_quantile(static_cast<double>(i) / static_cast<double>(classes)));
  }
  return out;
}

void SceneSpec::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid scene spec: " + msg); };
  if (height == 0 || width == 0 || channels == 0) fail("extents must be positive");
  if (!(lambda >= 1.0)) fail("lambda must be at least 1 pixel");
  if (classes < 1 || classes > 255) fail("classes must be in [1, 255]");
  if (!thresholds.empty()) {
    if (thresholds.size() != classes - 1) fail("need classes - 1 threshold levels");
    for (std::size_t i = 1; i < thresholds.size(); ++i) {
      if (!(thresholds[i] > thresholds[i - 1])) fail("thresholds must be strictly increasing");
    }
  }
}

nlohmann::json SceneSpec::to_json() const {
  nlohmann::json doc = {{"height", height}, {"width", width},     {"channels", channels},
                        {"lambda", lambda}, {"classes", classes}, {"seed", seed}};
  // empty means "pick later"; writing the quantile defaults would pin them
  if (!thresholds.empty()) doc["thresholds"] = thresholds;
  return doc;
}

SceneSpec SceneSpec::from_json(const nlohmann::json& doc) {
  SceneSpec s;
  try {
    s.height = doc.value("height", s.height);
    s.width = doc.value("width", s.width);
    s.channels = doc.value("channels", s.channels);
    s.lambda = doc.value("lambda", s.lambda);
    s.classes = doc.value("classes", s.classes);
    if (doc.contains("thresholds")) s.thresholds = doc["thresholds"].get<std::vector<double>>();
    s.seed = doc.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed scene spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::vector<double> balanced_levels(const SceneSpec& spec, std::size_t scenes) {
  if (spec.classes < 2) return {};
  if (scenes == 0) throw ConfigError("balanced_levels: need at least one calibration scene");
  SceneSpec probe = spec;
  probe.thresholds.clear();
  probe.channels = 1;
  std::vector<double> maxima;
  for (const ImageSample& s : generate_dataset(probe, scenes, "levels")) {
    maxima.push_back(*std::max_element(s.pixels.data().begin(), s.pixels.data().end()));
  }
  std::nth_element(maxima.begin(), maxima.begin() + maxima.size() / 2, maxima.end());
  const double m = maxima[maxima.size() / 2];
  if (spec.classes == 2) return {m};
  std::vector<double> out{-m};
  const std::size_t inner = spec.classes - 3;
  for (std::size_t i = 1; i <= inner; ++i) {
    out.push_back(normal_quantile(static_cast<double>(i) / static_cast<double>(inner + 1)));
  }
  out.push_back(m);
  return out;
}

double kernel_sigma(double lambda) { return lambda / (2.0 * std::sqrt(2.0 * std::log(2.0))); }

std::uint8_t bucket_of(double value, const std::vector<double>& levels) {
  return static_cast<std::uint8_t>(std::upper_bound(levels.begin(), levels.end(), value) - levels.begin());
}

ImageSample generate(const SceneSpec& spec) {
  spec.validate();
  const std::size_t h = spec.height, w = spec.width, c = spec.channels;
  std::size_t radius = 0;
  const std::vector<double> kernel = unit_kernel(kernel_sigma(spec.lambda), radius);
  const std::size_t ph = h + 2 * radius, pw = w + 2 * radius;
  SplitMix64 rng(spec.seed);

  ImageSample out;
  char key[32];
  std::snprintf(key, sizeof key, "scene-%016llx", static_cast<unsigned long long>(spec.seed));
  out.key = key;
  out.pixels = Tensor({h, w, c});
  std::vector<double> noise(ph * pw), rows(ph * w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (double& v : noise) v = rng.normal();
    for (std::size_t y = 0; y < ph; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::size_t t = 0; t < kernel.size(); ++t) acc += kernel[t] * noise[y * pw + x + t];
        rows[y * w + x] = acc;
      }
    }
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::size_t t = 0; t < kernel.size(); ++t) acc += kernel[t] * rows[(y + t) * w + x];
        out.pixels[(y * w + x) * c + ch] = static_cast<double>(static_cast<float>(acc));
      }
    }
  }
  const std::vector<double> levels = spec.levels();
  out.seg_labels.resize(h * w);
  out.class_labels.assign(spec.classes, 0);
  for (std::size_t i = 0; i < h * w; ++i) {
    const std::uint8_t b = bucket_of(out.pixels[i * c], levels);
    out.seg_labels[i] = b;
    out.class_labels[b] = 1;
  }
  return out;
}

std::vector<ImageSample> generate_dataset(const SceneSpec& spec, std::size_t count,
                                          const std::string& split) {
  spec.validate();
  std::vector<ImageSample> out;
  out.reserve(count);
  const std::uint64_t split_hash = fnv1a64(split);
  for (std::size_t i = 0; i < count; ++i) {
    SceneSpec s = spec;
    s.seed = mix(mix(spec.seed, split_hash), i);
    out.push_back(generate(s));
  }
  return out;
}

std::vector<ImageSample> merge_classes(const std::vector<ImageSample>& samples, std::size_t group) {
  if (group == 0) throw ConfigError("merge_classes: group size must be positive");
  std::vector<ImageSample> out = samples;
  for (ImageSample& s : out) {
    const std::size_t fine = s.class_labels.size();
    const std::size_t coarse = (fine + group - 1) / group;
    std::vector<std::uint8_t> labels(coarse, 0);
    for (std::uint8_t& v : s.seg_labels) {
      v = static_cast<std::uint8_t>(v / group);
      labels[v] = 1;
    }
    if (s.seg_labels.empty()) {
      for (std::size_t i = 0; i < fine; ++i) labels[i / group] |= s.class_labels[i];
    }
    s.class_labels = std::move(labels);
  }
  return out;
}

double lag1_autocorrelation(const ImageSample& image, std::size_t channel) {
  const std::size_t h = image.height(), w = image.width(), c = image.channels();
  auto px = [&](std::size_t y, std::size_t x) { return image.pixels[(y * w + x) * c + channel]; };
  auto pearson = [](const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ma += a[i];
      mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      sab += (a[i] - ma) * (b[i] - mb);
      saa += (a[i] - ma) * (a[i] - ma);
      sbb += (b[i] - mb) * (b[i] - mb);
    }
    return (saa > 0 && sbb > 0) ? sab / std::sqrt(saa * sbb) : 0.0;
  };
  std::vector<double> a, b;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x + 1 < w; ++x) {
      a.push_back(px(y, x));
      b.push_back(px(y, x + 1));
    }
  }
  const double horizontal = pearson(a, b);
  a.clear();
  b.clear();
  for (std::size_t y = 0; y + 1 < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      a.push_back(px(y, x));
      b.push_back(px(y + 1, x));
    }
  }
  return 0.5 * (horizontal + pearson(a, b));
}

void write_dataset(const std::vector<ImageSample>& samples, const std::string& dir,
                   const nlohmann::json& extra) {
  if (samples.empty()) throw ConfigError("write_dataset: no samples");
  const ImageSample& first = samples.front();
  const std::size_t h = first.height(), w = first.width(), c = first.channels();
  const std::size_t classes = first.class_labels.size();
  nlohmann::json keys = nlohmann::json::array();
  detail::ByteWriter images, labels;
  for (const ImageSample& s : samples) {
    if (s.pixels.shape() != first.pixels.shape() || s.class_labels.size() != classes ||
        s.seg_labels.size() != h * w) {
      throw ShapeError("write_dataset: sample " + s.key + " differs in shape from the first sample");
    }
    keys.push_back(s.key);
    for (double v : s.pixels.data()) images.put<float>(static_cast<float>(v));
    for (std::uint8_t v : s.class_labels) labels.put<std::uint8_t>(v);
    for (std::uint8_t v : s.seg_labels) labels.put<std::uint8_t>(v);
  }
  nlohmann::json meta = {
      {"format", "rvit-dataset"},
      {"version", 1},
      {"count", samples.size()},
      {"shape", {h, w, c}},
      {"dtype", "f32"},
      {"byte_order", "little"},
      {"classes", classes},
      {"label_schema",
       {{"classification", "u8 multi-hot [classes]"}, {"segmentation", "u8 class index [H, W]"}}},
      {"keys", keys},
      {"extra", extra}};
  std::filesystem::create_directories(dir);
  detail::write_file(dir + "/meta.json", meta.dump(2) + "\n");
  detail::write_file(dir + "/images.bin", images.str());
  detail::write_file(dir + "/labels.bin", labels.str());
}

std::vector<ImageSample> read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir) || fs::is_empty(dir)) throw Error("empty dataset: " + dir + " has no files");
  if (!fs::exists(dir + "/meta.json")) throw Error("empty dataset: " + dir + " has no meta.json");
  const std::string meta_text = detail::read_file(dir + "/meta.json");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(dir + "/meta.json: " + e.what(), e.byte);
  }
  std::size_t count = 0, h = 0, w = 0, c = 0, classes = 0;
  std::vector<std::string> keys;
  try {
    if (meta.at("dtype").get<std::string>() != "f32") throw ParseError(dir + "/meta.json: dtype must be f32", 0);
    count = meta.at("count").get<std::size_t>();
    const auto shape = meta.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw ParseError(dir + "/meta.json: shape must have 3 extents", 0);
    h = shape[0];
    w = shape[1];
    c = shape[2];
    classes = meta.at("classes").get<std::size_t>();
    keys = meta.at("keys").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(dir + "/meta.json: " + e.what(), 0);
  }
  if (count == 0) throw Error("empty dataset: " + dir + " holds zero samples");
  if (keys.size() != count) throw ParseError(dir + "/meta.json: key count differs from sample count", 0);

  const std::string image_bytes = detail::read_file(dir + "/images.bin");
  const std::string label_bytes = detail::read_file(dir + "/labels.bin");
  detail::ByteReader images(image_bytes, dir + "/images.bin");
  detail::ByteReader labels(label_bytes, dir + "/labels.bin");
  const std::size_t pixels = h * w * c;
  images.require(count * pixels * sizeof(float), "image data");
  labels.require(count * (classes + h * w), "label data");
  std::vector<ImageSample> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    ImageSample& s = out[i];
    s.key = keys[i];
    s.pixels = Tensor({h, w, c});
    for (double& v : s.pixels.data()) v = static_cast<double>(images.get<float>("pixel"));
    s.class_labels.resize(classes);
    for (auto& v : s.class_labels) v = labels.get<std::uint8_t>("class label");
    s.seg_labels.resize(h * w);
    for (auto& v : s.seg_labels) {
      v = labels.get<std::uint8_t>("segmentation label");
      if (v >= classes) labels.fail("segmentation label " + std::to_string(v) + " out of range");
    }
  }
  if (images.remaining() != 0) images.fail("trailing bytes after " + std::to_string(count) + " samples");
  if (labels.remaining() != 0) labels.fail("trailing bytes after " + std::to_string(count) + " samples");
  return out;
}

}  // namespace rvit
