#pragma once

#include <filesystem>
#include <span>
#include <string>

#include "lrdg/dataset.hpp"

namespace lrdg {

struct ScatterPoint {
  std::string label;
  std::string kind;  // "pairwise" or "source-target"
  double baseline = 0;
  double lrdg = 0;
};

/// Baseline PAD on x, LRDG PAD on y, both axes [0, 2], with the diagonal.
/// Also writes a JSON sidecar (same stem) listing the plotted points.
void write_pad_scatter(const std::filesystem::path& png, std::span<const ScatterPoint> points,
                       const std::string& title);

/// Two-row grid: originals on top, their mapped versions below.
void write_image_grid(const std::filesystem::path& png, std::span<const Image> top, std::span<const Image> bottom,
                      const ImageShape& shape, int zoom = 4);

}  // namespace lrdg
