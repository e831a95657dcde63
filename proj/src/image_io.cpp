#include <algorithm>
#include <cmath>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "lwnet/data_io.hpp"
#include "lwnet/resample.hpp"

namespace lwnet {

std::size_t Mask::count_nonzero() const {
  return static_cast<std::size_t>(
      std::count_if(px.begin(), px.end(), [](std::uint8_t v) { return v != 0; }));
}

namespace {

cv::Mat load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw DataError("missing file: " + path.string());
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw DataError("cannot decode image: " + path.string());
  if (m.depth() != CV_8U && m.depth() != CV_16U)
    throw DataError("unsupported bit depth in " + path.string());
  return m;
}

double code_scale(const cv::Mat& m) {
  return m.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0;
}

double code_at(const cv::Mat& m, int y, int x, int c) {
  const int ch = m.channels();
  if (m.depth() == CV_16U) return m.ptr<std::uint16_t>(y)[x * ch + c];
  return m.ptr<std::uint8_t>(y)[x * ch + c];
}

void write(const std::filesystem::path& path, const cv::Mat& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m))
    throw DataError("cannot write image: " + path.string());
}

std::uint8_t to8(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  cv::Mat m = load(path);
  const int ch = m.channels();
  if (ch != 1 && ch != 3 && ch != 4)
    throw DataError("unsupported channel count in " + path.string());
  Image img(3, m.rows, m.cols);
  const double s = code_scale(m);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x)
      for (int c = 0; c < 3; ++c) {
        // OpenCV stores BGR(A).
        const int src = ch == 1 ? 0 : 2 - c;
        img.at(c, y, x) = static_cast<float>(code_at(m, y, x, src) * s);
      }
  return img;
}

Image read_probability(const std::filesystem::path& path) {
  cv::Mat m = load(path);
  Image img(1, m.rows, m.cols);
  const double s = code_scale(m);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x)
      img.at(0, y, x) = static_cast<float>(code_at(m, y, x, 0) * s);
  return img;
}

Mask read_mask_raw(const std::filesystem::path& path) {
  cv::Mat m = load(path);
  if (m.depth() != CV_8U) throw DataError("mask must be 8-bit: " + path.string());
  Mask out(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x)
      out.at(y, x) = static_cast<std::uint8_t>(code_at(m, y, x, 0));
  return out;
}

Mask read_binary_mask(const std::filesystem::path& path) {
  Mask m = read_mask_raw(path);
  for (auto& v : m.px) v = v > 127 ? 1 : 0;
  return m;
}

void write_image8(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw DataError("write_image8: need 1 or 3 planes");
  cv::Mat m(img.height, img.width, img.channels == 1 ? CV_8UC1 : CV_8UC3);
  for (int y = 0; y < img.height; ++y) {
    auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < img.width; ++x) {
      if (img.channels == 1) {
        row[x] = to8(img.at(0, y, x));
      } else {
        for (int c = 0; c < 3; ++c) row[x * 3 + (2 - c)] = to8(img.at(c, y, x));
      }
    }
  }
  write(path, m);
}

void write_probability16(const std::filesystem::path& path, const Image& map,
                         int channel) {
  if (channel < 0 || channel >= map.channels)
    throw DataError("write_probability16: no plane " + std::to_string(channel));
  cv::Mat m(map.height, map.width, CV_16UC1);
  for (int y = 0; y < map.height; ++y) {
    auto* row = m.ptr<std::uint16_t>(y);
    for (int x = 0; x < map.width; ++x)
      row[x] = static_cast<std::uint16_t>(
          std::lround(std::clamp(map.at(channel, y, x), 0.0f, 1.0f) * 65535.0f));
  }
  write(path, m);
}

void write_mask(const std::filesystem::path& path, const Mask& mask, int scale) {
  cv::Mat m(mask.height, mask.width, CV_8UC1);
  for (int y = 0; y < mask.height; ++y) {
    auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < mask.width; ++x)
      row[x] = static_cast<std::uint8_t>(std::min(255, mask.at(y, x) * scale));
  }
  write(path, m);
}

Image resize_bilinear(const Image& img, int height, int width) {
  if (height <= 0 || width <= 0) throw DataError("resize: non-positive size");
  if (height == img.height && width == img.width) return img;
  const LinearTaps ty(img.height, height), tx(img.width, width);
  Image out(img.channels, height, width);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < height; ++y) {
      const double fy = ty.frac[y];
      for (int x = 0; x < width; ++x) {
        const double fx = tx.frac[x];
        const double top = (1 - fx) * img.at(c, ty.lo[y], tx.lo[x]) + fx * img.at(c, ty.lo[y], tx.hi[x]);
        const double bot = (1 - fx) * img.at(c, ty.hi[y], tx.lo[x]) + fx * img.at(c, ty.hi[y], tx.hi[x]);
        out.at(c, y, x) = static_cast<float>((1 - fy) * top + fy * bot);
      }
    }
  return out;
}

Mask resize_nearest(const Mask& m, int height, int width) {
  if (height <= 0 || width <= 0) throw DataError("resize: non-positive size");
  if (height == m.height && width == m.width) return m;
  Mask out(height, width);
  for (int y = 0; y < height; ++y) {
    const int sy = nearest_source(y, m.height, height);
    for (int x = 0; x < width; ++x)
      out.at(y, x) = m.at(sy, nearest_source(x, m.width, width));
  }
  return out;
}

Image resize_probs_native(const Image& probs, int height, int width) {
  Image out = resize_bilinear(probs, height, width);
  for (auto& v : out.px) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

Image pad_to_multiple(const Image& img, int multiple) {
  const int h = (img.height + multiple - 1) / multiple * multiple;
  const int w = (img.width + multiple - 1) / multiple * multiple;
  if (h == img.height && w == img.width) return img;
  Image out(img.channels, h, w);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.at(c, y, x) = img.at(c, reflect_index(y, img.height), reflect_index(x, img.width));
  return out;
}

Image crop(const Image& img, int height, int width) {
  if (height > img.height || width > img.width) throw DataError("crop: larger than image");
  if (height == img.height && width == img.width) return img;
  Image out(img.channels, height, width);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) out.at(c, y, x) = img.at(c, y, x);
  return out;
}

}  // namespace lwnet
