#include <algorithm>
#include <cctype>
#include <cmath>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "dexpr/frameselect.hpp"

namespace dexpr {

namespace {

std::string lowercase_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

// Mirror without repeating the edge sample: -1 -> 1, n -> n - 2.
std::ptrdiff_t reflect(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

void require_image(const Tensor& t, const char* what) {
  if (t.shape().rank() != 3 || t.shape()[0] != 1) {
    throw ShapeError(std::string(what) + " expects a [1,H,W] image, got " + t.shape().to_string());
  }
}

}  // namespace

bool is_supported_image(const std::filesystem::path& path) {
  const std::string ext = lowercase_extension(path);
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".pgm";
}

Tensor load_image(const std::filesystem::path& path) {
  if (!is_supported_image(path)) {
    throw IoError("unsupported image format '" + path.extension().string() + "' for " + path.string() +
                  " (expected PNG, JPEG or PGM)");
  }
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) throw IoError("cannot read image '" + path.string() + "'");
  const cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw IoError("cannot decode image '" + path.string() + "'");

  double full_scale = 0;
  switch (mat.depth()) {
    case CV_8U:
      full_scale = 255.0;
      break;
    case CV_16U:
      full_scale = 65535.0;
      break;
    default:
      throw IoError("unsupported pixel depth in '" + path.string() + "'");
  }
  const int channels = mat.channels();
  if (channels != 1 && channels != 3 && channels != 4) {
    throw IoError("unsupported channel count in '" + path.string() + "'");
  }
  const auto height = static_cast<std::size_t>(mat.rows);
  const auto width = static_cast<std::size_t>(mat.cols);
  Tensor out(Shape{1, height, width});
  for (int y = 0; y < mat.rows; ++y) {
    for (int x = 0; x < mat.cols; ++x) {
      auto sample = [&](int c) -> double {
        const int idx = x * channels + c;
        return mat.depth() == CV_8U ? mat.ptr<std::uint8_t>(y)[idx] : mat.ptr<std::uint16_t>(y)[idx];
      };
      double value;
      if (channels == 1) {
        value = sample(0);
      } else {  // OpenCV stores BGR(A)
        value = 0.299 * sample(2) + 0.587 * sample(1) + 0.114 * sample(0);
      }
      out.at(0, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = static_cast<float>(value / full_scale);
    }
  }
  return out;
}

void save_png(const std::filesystem::path& path, const Tensor& image) {
  require_image(image, "save_png");
  cv::Mat mat(static_cast<int>(image.shape()[1]), static_cast<int>(image.shape()[2]), CV_8UC1);
  for (int y = 0; y < mat.rows; ++y) {
    auto* row = mat.ptr<std::uint8_t>(y);
    for (int x = 0; x < mat.cols; ++x) {
      const float v = std::clamp(image.at(0, static_cast<std::size_t>(y), static_cast<std::size_t>(x)), 0.0f, 1.0f);
      row[x] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  if (!cv::imwrite(path.string(), mat)) throw IoError("cannot write image '" + path.string() + "'");
}

Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width) {
  require_image(image, "resize");
  const std::size_t in_h = image.shape()[1], in_w = image.shape()[2];
  if (in_h < 2 || in_w < 2) throw ShapeError("cannot resize degenerate image " + image.shape().to_string());
  if (height == 0 || width == 0) throw ShapeError("resize target must be non-empty");
  if (in_h == height && in_w == width) return image;

  struct Tap {
    std::size_t lo, hi;
    double frac;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> result(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto lo = static_cast<std::size_t>(std::floor(src));
      result[o] = Tap{lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
    }
    return result;
  };
  const auto ty = taps(in_h, height);
  const auto tx = taps(in_w, width);
  Tensor out(Shape{1, height, width});
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double top = (1 - tx[x].frac) * image.at(0, ty[y].lo, tx[x].lo) + tx[x].frac * image.at(0, ty[y].lo, tx[x].hi);
      const double bottom =
          (1 - tx[x].frac) * image.at(0, ty[y].hi, tx[x].lo) + tx[x].frac * image.at(0, ty[y].hi, tx[x].hi);
      out.at(0, y, x) = static_cast<float>((1 - ty[y].frac) * top + ty[y].frac * bottom);
    }
  }
  return out;
}

Tensor resize_to_input(const Tensor& image, std::size_t size) { return resize_bilinear(image, size, size); }

Tensor gaussian_smooth(const Tensor& frame, double sigma) {
  require_image(frame, "gaussian_smooth");
  if (!(sigma > 0.0)) throw ConfigError("Gaussian sigma must be > 0");
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (double& v : kernel) v /= total;

  const auto h = static_cast<std::ptrdiff_t>(frame.shape()[1]);
  const auto w = static_cast<std::ptrdiff_t>(frame.shape()[2]);
  std::vector<double> rows(static_cast<std::size_t>(h * w));
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double acc = 0;
      for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        acc += kernel[static_cast<std::size_t>(i + radius)] * frame[static_cast<std::size_t>(y * w + reflect(x + i, w))];
      }
      rows[static_cast<std::size_t>(y * w + x)] = acc;
    }
  }
  Tensor out(frame.shape());
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double acc = 0;
      for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        acc += kernel[static_cast<std::size_t>(i + radius)] * rows[static_cast<std::size_t>(reflect(y + i, h) * w + x)];
      }
      out[static_cast<std::size_t>(y * w + x)] = static_cast<float>(acc);
    }
  }
  return out;
}

}  // namespace dexpr
