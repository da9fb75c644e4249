#include "dexpr/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "dexpr/errors.hpp"
#include "dexpr/random.hpp"

namespace dexpr {

namespace {

struct Point {
  double x, y;
};

// Face-relative coordinates: origin at the face center, unit = image size.
class Canvas {
 public:
  Canvas(std::size_t size, double cx, double cy, double scale)
      : size_(size), cx_(cx), cy_(cy), unit_(scale * static_cast<double>(size)), image_(Shape{1, size, size}) {}

  void segment(Point a, Point b, double thickness) {
    const Point pa = to_pixels(a), pb = to_pixels(b);
    const double half = 0.5 * thickness * unit_;
    for_box(std::min(pa.x, pb.x) - half, std::max(pa.x, pb.x) + half, std::min(pa.y, pb.y) - half,
            std::max(pa.y, pb.y) + half, [&](double x, double y) {
              const double vx = pb.x - pa.x, vy = pb.y - pa.y;
              const double len2 = vx * vx + vy * vy;
              double t = len2 > 0 ? ((x - pa.x) * vx + (y - pa.y) * vy) / len2 : 0.0;
              t = std::clamp(t, 0.0, 1.0);
              const double dx = x - (pa.x + t * vx), dy = y - (pa.y + t * vy);
              return dx * dx + dy * dy <= half * half;
            });
  }

  void polyline(const std::vector<Point>& pts, double thickness) {
    for (std::size_t i = 1; i < pts.size(); ++i) segment(pts[i - 1], pts[i], thickness);
  }

  void ellipse(Point center, double rx, double ry, bool filled, double thickness = 0.0) {
    const Point c = to_pixels(center);
    const double ax = rx * unit_, ay = ry * unit_, half = 0.5 * thickness * unit_;
    for_box(c.x - ax - half, c.x + ax + half, c.y - ay - half, c.y + ay + half, [&](double x, double y) {
      const double nx = (x - c.x) / ax, ny = (y - c.y) / ay;
      const double r = std::sqrt(nx * nx + ny * ny);
      if (filled) return r <= 1.0;
      // Approximate distance to the outline.
      const double dist = std::abs(r - 1.0) * std::min(ax, ay);
      return dist <= half;
    });
  }

  Tensor take() { return std::move(image_); }

 private:
  Point to_pixels(Point p) const { return {cx_ + p.x * unit_, cy_ + p.y * unit_}; }

  template <typename Inside>
  void for_box(double x0, double x1, double y0, double y1, Inside&& inside) {
    const auto lo = [](double v) { return static_cast<std::ptrdiff_t>(std::floor(v)); };
    const auto n = static_cast<std::ptrdiff_t>(size_);
    for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, lo(y0)); y <= std::min(n - 1, lo(y1) + 1); ++y) {
      for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(0, lo(x0)); x <= std::min(n - 1, lo(x1) + 1); ++x) {
        if (inside(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) {
          image_.at(0, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1.0f;
        }
      }
    }
  }

  std::size_t size_;
  double cx_, cy_, unit_;
  Tensor image_;
};

// Parabolic mouth: curvature > 0 smiles, < 0 frowns.
std::vector<Point> curve(double x0, double x1, double y, double curvature, double tilt = 0.0, int steps = 16) {
  std::vector<Point> pts;
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    const double x = x0 + (x1 - x0) * t;
    const double u = 2.0 * t - 1.0;
    pts.push_back({x, y + curvature * (1.0 - u * u) + tilt * u});
  }
  return pts;
}

}  // namespace

const std::vector<std::string>& synthetic_class_names() {
  static const std::vector<std::string> names = {"anger",     "contempt", "disgust", "fear",
                                                 "happiness", "sadness",  "surprise"};
  return names;
}

Tensor render_synthetic_face(std::size_t label, std::size_t size, double strength, double dx, double dy,
                             double scale) {
  const double s = std::clamp(strength, 0.0, 1.0);
  const double n = static_cast<double>(size);
  Canvas canvas(size, 0.5 * n + dx * n, 0.5 * n + dy * n, scale);
  const double line = 0.022;

  canvas.ellipse({0, 0}, 0.34, 0.40, false, line);
  canvas.ellipse({-0.13, -0.09}, 0.035, 0.035 * (1.0 - 0.4 * s * (label == 0)), true);
  canvas.ellipse({0.13, -0.09}, 0.035, 0.035 * (1.0 - 0.4 * s * (label == 0)), true);

  // Brows: inner/outer end heights per class.
  double brow_inner = -0.19, brow_outer = -0.19;
  switch (label) {
    case 0: brow_inner += 0.06 * s; brow_outer -= 0.03 * s; break;          // anger: pulled down and in
    case 3: brow_inner -= 0.08 * s; brow_outer -= 0.02 * s; break;          // fear: inner raised
    case 5: brow_inner -= 0.05 * s; brow_outer += 0.05 * s; break;          // sadness: outer dropped
    case 6: brow_inner -= 0.09 * s; brow_outer -= 0.09 * s; break;          // surprise: raised
    default: break;
  }
  canvas.segment({-0.23, brow_outer}, {-0.06, brow_inner}, line);
  canvas.segment({0.23, brow_outer}, {0.06, brow_inner}, line);

  const double mouth_y = 0.19;
  switch (label) {
    case 0:  // anger: tight straight mouth
      canvas.segment({-0.10, mouth_y}, {0.10, mouth_y}, line * (1.0 + 1.2 * s));
      break;
    case 1:  // contempt: one corner raised
      canvas.polyline(curve(-0.12, 0.12, mouth_y, 0.0, -0.06 * s), line);
      break;
    case 2: {  // disgust: zigzag
      std::vector<Point> pts;
      for (int i = 0; i <= 6; ++i) {
        pts.push_back({-0.13 + 0.26 * i / 6.0, mouth_y + ((i % 2) ? -0.035 : 0.035) * s});
      }
      canvas.polyline(pts, line);
      break;
    }
    case 3:  // fear: small open mouth, stretched
      canvas.ellipse({0, mouth_y}, 0.04 + 0.08 * s, 0.01 + 0.03 * s, false, line);
      break;
    case 4:  // happiness: wide smile
      canvas.polyline(curve(-0.15, 0.15, mouth_y, 0.08 * s), line);
      break;
    case 5:  // sadness: frown
      canvas.polyline(curve(-0.12, 0.12, mouth_y + 0.03 * s, -0.06 * s), line);
      break;
    case 6:  // surprise: large open mouth
      canvas.ellipse({0, mouth_y}, 0.03 + 0.05 * s, 0.02 + 0.08 * s, true);
      break;
    default:
      throw ConfigError("synthetic class index out of range");
  }
  return canvas.take();
}

LabeledDataset make_synthetic_dataset(const SyntheticOptions& options) {
  LabeledDataset dataset;
  dataset.class_names = synthetic_class_names();
  const std::size_t classes = dataset.class_names.size();
  Rng rng(options.seed);
  for (std::size_t i = 0; i < options.per_class; ++i) {
    for (std::size_t label = 0; label < classes; ++label) {
      const double dx = rng.uniform(-options.jitter, options.jitter);
      const double dy = rng.uniform(-options.jitter, options.jitter);
      const double scale = rng.uniform(0.9, 1.1);
      Tensor img = render_synthetic_face(label, options.image_size, 1.0, dx, dy, scale);
      for (float& v : img.data()) {
        v = std::clamp(v * 0.8f + 0.1f + static_cast<float>(options.noise * rng.normal()), 0.0f, 1.0f);
      }
      dataset.samples.push_back(Sample{std::move(img), label,
                                       dataset.class_names[label] + "/synthetic_" + std::to_string(i) + ".png"});
    }
  }
  return dataset;
}

std::vector<Tensor> make_synthetic_sequence(std::size_t frames, std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t label = static_cast<std::size_t>(rng.below(synthetic_class_names().size()));
  std::vector<Tensor> out;
  out.reserve(frames);
  double dx = 0.0;
  for (std::size_t t = 0; t < frames; ++t) {
    // Expression ramps up over the middle third; small head drift throughout.
    const double phase = static_cast<double>(t) / static_cast<double>(std::max<std::size_t>(frames - 1, 1));
    const double strength = std::clamp((phase - 0.3) * 3.0, 0.0, 1.0);
    if (rng.uniform() < 0.15) dx += rng.uniform(-0.01, 0.01);
    Tensor img = render_synthetic_face(label, size, strength, dx, 0.0, 1.0);
    for (float& v : img.data()) v = std::clamp(v * 0.8f + 0.1f + static_cast<float>(0.01 * rng.normal()), 0.0f, 1.0f);
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace dexpr
