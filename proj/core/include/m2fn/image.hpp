#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace m2fn {

// Planar [C,H,W] image with values in [0,1].
struct Image {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;

  static Image filled(std::size_t height, std::size_t width, std::array<double, 3> rgb);

  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data[(c * height + y) * width + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }
  std::size_t pixels() const { return height * width; }
};

// Binary P6, 8 bits per channel. Throws DataError on malformed files.
Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& image);

// Bilinear resampling (pixel centers aligned).
Image resize(const Image& image, std::size_t height, std::size_t width);

using Rgb = std::array<double, 3>;

struct PaletteEntry {
  std::string name;
  Rgb rgb;
};

// black, white, red, orange, yellow, green, cyan, blue, purple, gray.
const std::vector<PaletteEntry>& default_palette();

struct DominantColorOptions {
  std::size_t k = 3;
  std::uint64_t seed = 0;
  std::size_t max_iter = 100;
  double tol = 1e-6;
  double mcd_fraction = 0.75;
  std::size_t mcd_starts = 20;
};

struct RobustCovariance {
  Rgb mean{};
  std::array<double, 9> cov{};  // row-major 3x3
  double log_det = 0.0;
  bool degenerate = false;
};

struct DominantColorResult {
  std::size_t palette_index = 0;
  Rgb dominant{};                     // mean of the largest cluster
  std::vector<Rgb> initial_centers;   // k-means++ seeds
  std::vector<Rgb> centers;           // final cluster means
  std::vector<std::size_t> counts;    // members per cluster
  std::size_t iterations = 0;
  RobustCovariance robust;
  bool euclidean_fallback = false;
  std::vector<std::string> warnings;
};

// Minimum covariance determinant estimate over RGB pixels using
// concentration steps from `starts` random elemental subsets.
RobustCovariance mcd_covariance(const std::vector<Rgb>& pixels, double fraction,
                                std::size_t starts, std::uint64_t seed);

std::vector<Rgb> image_pixels(const Image& image);

// K-means under the robust Mahalanobis distance; the mean of the largest
// cluster is snapped to the nearest palette entry (ties to the lower index).
// A singular robust covariance falls back to Euclidean distance and records
// a warning.
DominantColorResult dominant_color(const Image& image, const DominantColorOptions& options = {},
                                   const std::vector<PaletteEntry>& palette = default_palette());

std::size_t nearest_palette_index(const Rgb& color, const std::vector<PaletteEntry>& palette);

}  // namespace m2fn
