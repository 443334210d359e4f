#include "lrdg/plot.hpp"

#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace lrdg {

namespace {

void save_png(const std::filesystem::path& path, const cv::Mat& image) {
  if (!cv::imwrite(path.string(), image)) throw Error("cannot write " + path.string());
}

cv::Mat to_bgr(const Image& image, const ImageShape& shape) {
  const std::vector<std::uint8_t> rgb = to_rgb8(image, shape);
  cv::Mat out(shape.height, shape.width, CV_8UC3);
  for (int p = 0; p < shape.pixels(); ++p) {
    auto& px = out.at<cv::Vec3b>(p / shape.width, p % shape.width);
    for (int c = 0; c < 3; ++c) px[2 - c] = rgb[static_cast<std::size_t>(p) * 3 + static_cast<std::size_t>(c)];
  }
  return out;
}

}  // namespace

void write_pad_scatter(const std::filesystem::path& png, std::span<const ScatterPoint> points,
                       const std::string& title) {
  constexpr int kSize = 560;
  constexpr int kMargin = 60;
  constexpr double kMax = 2.0;
  const int plot = kSize - 2 * kMargin;
  cv::Mat canvas(kSize, kSize, CV_8UC3, cv::Scalar(255, 255, 255));
  auto to_px = [&](double x, double y) {
    return cv::Point(kMargin + static_cast<int>(std::lround(x / kMax * plot)),
                     kSize - kMargin - static_cast<int>(std::lround(y / kMax * plot)));
  };
  const cv::Scalar grid(225, 225, 225), axis(0, 0, 0), text(40, 40, 40);
  for (int k = 0; k <= 4; ++k) {
    const double v = k * 0.5;
    cv::line(canvas, to_px(v, 0), to_px(v, kMax), grid, 1);
    cv::line(canvas, to_px(0, v), to_px(kMax, v), grid, 1);
    char label[8];
    std::snprintf(label, sizeof label, "%.1f", v);
    cv::putText(canvas, label, to_px(v, 0) + cv::Point(-10, 18), cv::FONT_HERSHEY_SIMPLEX, 0.4, text, 1, cv::LINE_AA);
    cv::putText(canvas, label, to_px(0, v) + cv::Point(-32, 4), cv::FONT_HERSHEY_SIMPLEX, 0.4, text, 1, cv::LINE_AA);
  }
  cv::rectangle(canvas, to_px(0, kMax), to_px(kMax, 0), axis, 1);
  cv::line(canvas, to_px(0, 0), to_px(kMax, kMax), cv::Scalar(120, 120, 120), 1, cv::LINE_AA);
  cv::putText(canvas, "PAD (baseline)", cv::Point(kSize / 2 - 50, kSize - 18), cv::FONT_HERSHEY_SIMPLEX, 0.5, text, 1,
              cv::LINE_AA);
  cv::putText(canvas, "PAD (LRDG)", cv::Point(6, kMargin - 12), cv::FONT_HERSHEY_SIMPLEX, 0.5, text, 1, cv::LINE_AA);
  cv::putText(canvas, title, cv::Point(kMargin + 80, 30), cv::FONT_HERSHEY_SIMPLEX, 0.55, axis, 1, cv::LINE_AA);

  nlohmann::json sidecar = {{"title", title}, {"x", "baseline PAD"}, {"y", "LRDG PAD"}, {"points", nlohmann::json::array()}};
  for (const ScatterPoint& p : points) {
    const cv::Point c = to_px(std::clamp(p.baseline, 0.0, kMax), std::clamp(p.lrdg, 0.0, kMax));
    if (p.kind == "source-target") {
      cv::rectangle(canvas, c - cv::Point(5, 5), c + cv::Point(5, 5), cv::Scalar(40, 40, 200), cv::FILLED);
    } else {
      cv::circle(canvas, c, 5, cv::Scalar(200, 90, 30), cv::FILLED, cv::LINE_AA);
    }
    sidecar["points"].push_back({{"label", p.label},
                                 {"kind", p.kind},
                                 {"baseline", p.baseline},
                                 {"lrdg", p.lrdg},
                                 {"below_diagonal", p.lrdg < p.baseline}});
  }
  save_png(png, canvas);
  std::filesystem::path json_path = png;
  json_path.replace_extension(".json");
  std::ofstream(json_path) << sidecar.dump(2) << '\n';
}

void write_image_grid(const std::filesystem::path& png, std::span<const Image> top, std::span<const Image> bottom,
                      const ImageShape& shape, int zoom) {
  if (top.size() != bottom.size() || top.empty()) throw ShapeError("image grid rows must be nonempty and equal length");
  const int n = static_cast<int>(top.size());
  cv::Mat grid(2 * shape.height + 2, n * (shape.width + 2), CV_8UC3, cv::Scalar(255, 255, 255));
  for (int k = 0; k < n; ++k) {
    to_bgr(top[static_cast<std::size_t>(k)], shape)
        .copyTo(grid(cv::Rect(k * (shape.width + 2), 0, shape.width, shape.height)));
    to_bgr(bottom[static_cast<std::size_t>(k)], shape)
        .copyTo(grid(cv::Rect(k * (shape.width + 2), shape.height + 2, shape.width, shape.height)));
  }
  cv::Mat big;
  cv::resize(grid, big, cv::Size(), zoom, zoom, cv::INTER_NEAREST);
  save_png(png, big);
}

}  // namespace lrdg
