#include "m2fn/image.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "m2fn/errors.hpp"
#include "m2fn/random.hpp"

namespace m2fn {

Image Image::filled(std::size_t height, std::size_t width, std::array<double, 3> rgb) {
  Image img{3, height, width, std::vector<double>(3 * height * width)};
  for (std::size_t c = 0; c < 3; ++c) {
    std::fill_n(img.data.begin() + static_cast<std::ptrdiff_t>(c * height * width), height * width,
                rgb[c]);
  }
  return img;
}

namespace {

// Next header token of a PNM file, skipping whitespace and comments.
std::string pnm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {}
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok += static_cast<char>(c);
  }
  return tok;
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("ppm: cannot open " + path.string());
  if (pnm_token(in) != "P6") throw DataError("ppm: " + path.string() + " is not a binary P6 file");
  std::size_t width = 0, height = 0, maxval = 0;
  try {
    width = std::stoul(pnm_token(in));
    height = std::stoul(pnm_token(in));
    maxval = std::stoul(pnm_token(in));
  } catch (const std::exception&) {
    throw DataError("ppm: bad header in " + path.string());
  }
  if (width == 0 || height == 0 || maxval == 0 || maxval > 255) {
    throw DataError("ppm: unsupported dimensions or depth in " + path.string());
  }
  std::vector<unsigned char> raw(width * height * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
    throw DataError("ppm: truncated pixel data in " + path.string());
  }
  Image img{3, height, width, std::vector<double>(raw.size())};
  for (std::size_t p = 0; p < height * width; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      img.data[c * height * width + p] = raw[p * 3 + c] / static_cast<double>(maxval);
    }
  }
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 3) throw ShapeError("ppm: image must have 3 channels");
  std::ofstream out(path, std::ios::binary);
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> raw(image.pixels() * 3);
  for (std::size_t p = 0; p < image.pixels(); ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(image.data[c * image.pixels() + p], 0.0, 1.0);
      raw[p * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw DataError("ppm: cannot write " + path.string());
}

Image resize(const Image& image, std::size_t height, std::size_t width) {
  if (height == image.height && width == image.width) return image;
  Image out{image.channels, height, width, std::vector<double>(image.channels * height * width)};
  const auto source = [](std::size_t i, std::size_t from, std::size_t to) {
    const double s = (static_cast<double>(i) + 0.5) * static_cast<double>(from) / to - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(from - 1));
  };
  for (std::size_t y = 0; y < height; ++y) {
    const double sy = source(y, image.height, height);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double fy = sy - y0;
    for (std::size_t x = 0; x < width; ++x) {
      const double sx = source(x, image.width, width);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double fx = sx - x0;
      for (std::size_t c = 0; c < image.channels; ++c) {
        const double top = image.at(c, y0, x0) * (1 - fx) + image.at(c, y0, x1) * fx;
        const double bottom = image.at(c, y1, x0) * (1 - fx) + image.at(c, y1, x1) * fx;
        out.at(c, y, x) = top * (1 - fy) + bottom * fy;
      }
    }
  }
  return out;
}

const std::vector<PaletteEntry>& default_palette() {
  static const std::vector<PaletteEntry> palette = {
      {"black", {0.0, 0.0, 0.0}},
      {"white", {1.0, 1.0, 1.0}},
      {"red", {1.0, 0.0, 0.0}},
      {"orange", {1.0, 165 / 255.0, 0.0}},
      {"yellow", {1.0, 1.0, 0.0}},
      {"green", {0.0, 128 / 255.0, 0.0}},
      {"cyan", {0.0, 1.0, 1.0}},
      {"blue", {0.0, 0.0, 1.0}},
      {"purple", {128 / 255.0, 0.0, 128 / 255.0}},
      {"gray", {128 / 255.0, 128 / 255.0, 128 / 255.0}},
  };
  return palette;
}

std::size_t nearest_palette_index(const Rgb& color, const std::vector<PaletteEntry>& palette) {
  if (palette.empty()) throw ContractError("dominant_color: empty palette");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < palette.size(); ++i) {
    double d = 0.0;
    for (std::size_t c = 0; c < 3; ++c) d += (color[c] - palette[i].rgb[c]) * (color[c] - palette[i].rgb[c]);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

std::vector<Rgb> image_pixels(const Image& image) {
  if (image.channels != 3) throw ShapeError("dominant_color: image must have 3 channels");
  std::vector<Rgb> px(image.pixels());
  for (std::size_t p = 0; p < px.size(); ++p) {
    for (std::size_t c = 0; c < 3; ++c) px[p][c] = image.data[c * image.pixels() + p];
  }
  return px;
}

namespace {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

Vec3 as_vec(const Rgb& p) { return Vec3(p[0], p[1], p[2]); }
Rgb as_rgb(const Vec3& v) { return {v[0], v[1], v[2]}; }

struct Fit {
  Vec3 mean = Vec3::Zero();
  Mat3 cov = Mat3::Zero();
  double log_det = -std::numeric_limits<double>::infinity();
  bool singular = true;
};

// Relative eigenvalue floor below which a covariance counts as singular.
constexpr double kSingular = 1e-10;

Fit fit_subset(const std::vector<Rgb>& px, const std::vector<std::size_t>& subset) {
  Fit f;
  for (const std::size_t i : subset) f.mean += as_vec(px[i]);
  f.mean /= static_cast<double>(subset.size());
  for (const std::size_t i : subset) {
    const Vec3 d = as_vec(px[i]) - f.mean;
    f.cov += d * d.transpose();
  }
  f.cov /= static_cast<double>(subset.size());
  const Eigen::SelfAdjointEigenSolver<Mat3> eig(f.cov, Eigen::EigenvaluesOnly);
  const Vec3 ev = eig.eigenvalues();
  f.singular = !(ev[0] > kSingular * std::max(ev[2], 1e-300)) || ev[2] <= 1e-300;
  if (!f.singular) f.log_det = std::log(ev[0]) + std::log(ev[1]) + std::log(ev[2]);
  return f;
}

// Indices of the h points with the smallest Mahalanobis distance under `f`.
std::vector<std::size_t> concentrate(const std::vector<Rgb>& px, const Fit& f, std::size_t h) {
  const Eigen::LLT<Mat3> llt(f.cov);
  std::vector<std::pair<double, std::size_t>> d(px.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    const Vec3 z = llt.matrixL().solve(as_vec(px[i]) - f.mean);
    d[i] = {z.squaredNorm(), i};
  }
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(h - 1), d.end());
  std::vector<std::size_t> subset(h);
  for (std::size_t i = 0; i < h; ++i) subset[i] = d[i].second;
  std::sort(subset.begin(), subset.end());
  return subset;
}

}  // namespace

RobustCovariance mcd_covariance(const std::vector<Rgb>& pixels, double fraction,
                                std::size_t starts, std::uint64_t seed) {
  if (pixels.empty()) throw ContractError("mcd: no pixels");
  if (!(fraction > 0.5 && fraction <= 1.0)) throw ContractError("mcd: fraction must be in (0.5, 1]");
  const std::size_t n = pixels.size();
  const std::size_t h = std::max<std::size_t>(
      std::min<std::size_t>(n, 4), static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n))));
  Fit best;
  bool degenerate = false;
  for (std::size_t s = 0; s < std::max<std::size_t>(starts, 1) && !degenerate; ++s) {
    SplitMix rng(derive_seed(seed, "mcd.start." + std::to_string(s)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    // Elemental subset of p + 1 points, grown while singular.
    std::size_t take = std::min<std::size_t>(4, n);
    for (std::size_t i = 0; i < n; ++i) std::swap(order[i], order[i + rng.below(n - i)]);
    Fit f = fit_subset(pixels, std::vector<std::size_t>(order.begin(), order.begin() + take));
    while (f.singular && take < h) {
      ++take;
      f = fit_subset(pixels, std::vector<std::size_t>(order.begin(), order.begin() + take));
    }
    if (f.singular) {
      degenerate = true;
      best = f;
      break;
    }
    for (std::size_t iter = 0; iter < 100; ++iter) {
      const Fit next = fit_subset(pixels, concentrate(pixels, f, h));
      if (next.singular) {
        degenerate = true;
        f = next;
        break;
      }
      const bool improved = next.log_det < f.log_det - 1e-12;
      f = next;
      if (!improved) break;
    }
    if (degenerate || best.singular || f.log_det < best.log_det) best = f;
  }
  RobustCovariance out;
  out.mean = as_rgb(best.mean);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 3; ++c) out.cov[r * 3 + c] = best.cov(r, c);
  }
  out.log_det = best.log_det;
  out.degenerate = degenerate || best.singular;
  return out;
}

DominantColorResult dominant_color(const Image& image, const DominantColorOptions& options,
                                   const std::vector<PaletteEntry>& palette) {
  if (options.k == 0) throw ContractError("dominant_color: k must be at least 1");
  const std::vector<Rgb> px = image_pixels(image);
  if (px.empty()) throw ContractError("dominant_color: empty image");
  const std::size_t n = px.size(), k = options.k;

  DominantColorResult res;
  res.robust = mcd_covariance(px, options.mcd_fraction, options.mcd_starts, options.seed);
  Mat3 whitener = Mat3::Identity();
  if (res.robust.degenerate) {
    res.euclidean_fallback = true;
    res.warnings.push_back(
        "dominant_color: robust covariance is singular; using Euclidean distance");
  } else {
    Mat3 cov;
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t c = 0; c < 3; ++c) cov(r, c) = res.robust.cov[r * 3 + c];
    }
    const Eigen::LLT<Mat3> llt(cov);
    whitener = llt.matrixL().solve(Mat3::Identity());
  }
  std::vector<Vec3> z(n);
  for (std::size_t i = 0; i < n; ++i) z[i] = whitener * as_vec(px[i]);

  // k-means++ seeding.
  SplitMix rng(derive_seed(options.seed, "kmeans++"));
  std::vector<Vec3> centers;
  centers.push_back(z[rng.below(n)]);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  while (centers.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (z[i] - centers.back()).squaredNorm());
      total += d2[i];
    }
    std::size_t pick = n - 1;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        u -= d2[i];
        if (u < 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.below(n);
    }
    centers.push_back(z[pick]);
  }
  const Mat3 unwhiten = whitener.inverse();
  for (const Vec3& c : centers) res.initial_centers.push_back(as_rgb(unwhiten * c));

  // Lloyd iterations; ties go to the lower cluster index, empty clusters keep
  // their center.
  std::vector<std::size_t> label(n, 0);
  std::vector<std::size_t> counts(k, 0);
  for (res.iterations = 1; res.iterations <= options.max_iter; ++res.iterations) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = (z[i] - centers[c]).squaredNorm();
        if (d < best) {
          best = d;
          label[i] = c;
        }
      }
    }
    std::vector<Vec3> sums(k, Vec3::Zero());
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums[label[i]] += z[i];
      ++counts[label[i]];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      const Vec3 next = sums[c] / static_cast<double>(counts[c]);
      shift = std::max(shift, (next - centers[c]).norm());
      centers[c] = next;
    }
    if (shift < options.tol) break;
  }
  res.iterations = std::min(res.iterations, options.max_iter);

  std::size_t largest = 0;
  for (std::size_t c = 1; c < k; ++c) {
    if (counts[c] > counts[largest]) largest = c;
  }
  for (std::size_t c = 0; c < k; ++c) res.centers.push_back(as_rgb(unwhiten * centers[c]));
  res.counts = counts;
  Vec3 mean = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    if (label[i] == largest) mean += as_vec(px[i]);
  }
  res.dominant = as_rgb(mean / static_cast<double>(counts[largest]));
  res.palette_index = nearest_palette_index(res.dominant, palette);
  return res;
}

}  // namespace m2fn
