#include "mpsn/image_io.hpp"

#include <algorithm>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mpsn/errors.hpp"

namespace mpsn {

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
}

void write(const std::filesystem::path& path, const cv::Mat& mat) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), mat);
  } catch (const cv::Exception& e) {
    throw IoError("cannot write image " + path.string() + ": " + e.what());
  }
  if (!ok) throw IoError("cannot write image " + path.string());
}

}  // namespace

LoadedImage load_image(const std::filesystem::path& path, std::size_t max_side) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot read image " + path.string());
  LoadedImage out;
  const int longest = std::max(bgr.rows, bgr.cols);
  if (static_cast<std::size_t>(longest) > max_side) {
    out.scale = static_cast<double>(max_side) / longest;
    cv::Mat resized;
    cv::resize(bgr, resized, cv::Size(), out.scale, out.scale, cv::INTER_AREA);
    bgr = resized;
  }
  const std::size_t h = static_cast<std::size_t>(bgr.rows), w = static_cast<std::size_t>(bgr.cols);
  out.pixels = Tensor::chw(3, h, w);
  for (std::size_t y = 0; y < h; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(static_cast<int>(y));
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) out.pixels.at(c, y, x) = row[x][2 - c] / 255.0;
    }
  }
  return out;
}

void save_image(const std::filesystem::path& path, const Tensor& pixels) {
  if (pixels.rank() != 3 || pixels.channels() != 3) {
    throw DimensionError("save_image expects 3 x H x W, got " + pixels.shape_string());
  }
  const int h = static_cast<int>(pixels.height()), w = static_cast<int>(pixels.width());
  cv::Mat mat(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y) {
    auto* row = mat.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) row[x][2 - c] = to_byte(pixels.at(c, y, x));
    }
  }
  write(path, mat);
}

void save_gray(const std::filesystem::path& path, const Tensor& map) {
  if (map.rank() != 2) throw DimensionError("save_gray expects H x W, got " + map.shape_string());
  const int h = static_cast<int>(map.dim(0)), w = static_cast<int>(map.dim(1));
  cv::Mat mat(h, w, CV_8UC1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) mat.at<std::uint8_t>(y, x) = to_byte(map[y * w + x]);
  }
  write(path, mat);
}

}  // namespace mpsn
