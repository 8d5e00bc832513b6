#pragma once

#include <Eigen/Dense>
#include <sstream>

#include "across/common.hpp"
#include "across/mesh.hpp"

// DIGIT image synthesis: orthographic height-map rasterization of the
// deformed gel mesh, a second-order polynomial photometric model over the
// surface-normal slopes, composition over a background image, and the
// four-pass pyramid Gaussian blur that removes rasterization artifacts.

namespace across::render {

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

// Per-pixel gel depth in millimeters: reference_depth for the undeformed
// pad, increasing with indentation (the pad deforms toward -z).
struct HeightMap {
  int width = 0, height = 0;
  double pixel_pitch_mm = 0.0;
  Eigen::ArrayXXd depth;  // height rows x width cols

  void validate() const {
    require(width > 0 && height > 0, Errc::dimension_mismatch, "empty height map");
    require(depth.rows() == height && depth.cols() == width, Errc::dimension_mismatch,
            "height map buffer does not match dimensions");
  }
};

struct SensorImage {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  static SensorImage filled(int w, int h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    SensorImage img;
    img.width = w;
    img.height = h;
    img.rgb.resize(static_cast<std::size_t>(w) * h * 3);
    for (std::size_t i = 0; i < img.rgb.size(); i += 3) {
      img.rgb[i] = r;
      img.rgb[i + 1] = g;
      img.rgb[i + 2] = b;
    }
    return img;
  }

  std::uint8_t& at(int x, int y, int c) {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + static_cast<std::size_t>(c)];
  }
  std::uint8_t at(int x, int y, int c) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + static_cast<std::size_t>(c)];
  }
};

// Orthographic camera over the pad plane; world (x, y) in millimeters maps
// to pixels at pixel_pitch_mm per pixel, image center at (center_x,
// center_y), +y up.
struct RenderConfig {
  int width = 320, height = 240;
  double pixel_pitch_mm = 0.0625;
  double center_x_mm = 0.0, center_y_mm = 0.0;
  double reference_depth_mm = 0.0;
  double near_mm = -10.0, far_mm = 10.0;

  double world_x(int px) const { return center_x_mm + (px + 0.5 - 0.5 * width) * pixel_pitch_mm; }
  double world_y(int py) const { return center_y_mm + (0.5 * height - py - 0.5) * pixel_pitch_mm; }
};

// Per channel: delta = a0 + a1 nx + a2 ny + a3 nx^2 + a4 nx ny + a5 ny^2,
// where (nx, ny) are the tangent-plane slope components of the height map.
struct PhotometricTable {
  Eigen::Matrix<double, 3, 6> coeff = Eigen::Matrix<double, 3, 6>::Zero();

  double delta(int channel, double nx, double ny) const {
    const auto& a = coeff.row(channel);
    return a[0] + a[1] * nx + a[2] * ny + a[3] * nx * nx + a[4] * nx * ny + a[5] * ny * ny;
  }

  // Plausible three-LED response: distinct slope signs per channel, zero
  // flat-surface offset so the rest state reproduces the background.
  static PhotometricTable default_table() {
    PhotometricTable t;
    t.coeff.row(0) << 0.0, 130.0, 10.0, -15.0, 0.0, -5.0;
    t.coeff.row(1) << 0.0, -60.0, 110.0, -10.0, 0.0, -8.0;
    t.coeff.row(2) << 0.0, -70.0, -120.0, -5.0, 0.0, -10.0;
    return t;
  }
};

struct RasterStats {
  int degenerate_skipped = 0;
};

// ---------------------------------------------------------------------------
// Height map rasterization
// ---------------------------------------------------------------------------

// Orthographic rasterization with barycentric interpolation at pixel
// centers and a max-depth z-buffer (the camera sees the most indented
// surface). Uncovered pixels take the reference pad depth. Degenerate
// (zero-area) triangles are skipped and counted.
inline HeightMap rasterize_heightmap(const mesh::SurfaceMesh& m, const RenderConfig& cfg,
                                     RasterStats* stats = nullptr) {
  require(m.topology != nullptr, Errc::topology_mismatch, "mesh without topology");
  require(m.positions.rows() == m.topology->vertex_count(0), Errc::topology_mismatch,
          "mesh positions do not match topology");
  HeightMap hm;
  hm.width = cfg.width;
  hm.height = cfg.height;
  hm.pixel_pitch_mm = cfg.pixel_pitch_mm;
  hm.depth = Eigen::ArrayXXd::Constant(cfg.height, cfg.width, cfg.reference_depth_mm);

  RasterStats local;
  const double x0 = cfg.world_x(0), y_top = cfg.world_y(0);
  for (const auto& t : m.topology->triangles(0)) {
    Eigen::Vector3d pa = m.positions.row(t.a), pb = m.positions.row(t.b),
                    pc = m.positions.row(t.c);
    double ha = cfg.reference_depth_mm - pa.z();
    double hb = cfg.reference_depth_mm - pb.z();
    double hc = cfg.reference_depth_mm - pc.z();

    double area = (pb.x() - pa.x()) * (pc.y() - pa.y()) - (pc.x() - pa.x()) * (pb.y() - pa.y());
    if (area == 0.0) {
      ++local.degenerate_skipped;
      continue;
    }

    double min_x = std::min({pa.x(), pb.x(), pc.x()}), max_x = std::max({pa.x(), pb.x(), pc.x()});
    double min_y = std::min({pa.y(), pb.y(), pc.y()}), max_y = std::max({pa.y(), pb.y(), pc.y()});
    int px_lo = std::max(0, static_cast<int>(std::floor((min_x - x0) / cfg.pixel_pitch_mm)));
    int px_hi = std::min(cfg.width - 1, static_cast<int>(std::ceil((max_x - x0) / cfg.pixel_pitch_mm)));
    int py_lo = std::max(0, static_cast<int>(std::floor((y_top - max_y) / cfg.pixel_pitch_mm)));
    int py_hi = std::min(cfg.height - 1, static_cast<int>(std::ceil((y_top - min_y) / cfg.pixel_pitch_mm)));

    const double inv_area = 1.0 / area;
    for (int py = py_lo; py <= py_hi; ++py) {
      double wy = cfg.world_y(py);
      for (int px = px_lo; px <= px_hi; ++px) {
        double wx = cfg.world_x(px);
        double w0 = ((pb.x() - wx) * (pc.y() - wy) - (pc.x() - wx) * (pb.y() - wy)) * inv_area;
        double w1 = ((pc.x() - wx) * (pa.y() - wy) - (pa.x() - wx) * (pc.y() - wy)) * inv_area;
        double w2 = 1.0 - w0 - w1;
        if (w0 < -1e-12 || w1 < -1e-12 || w2 < -1e-12) continue;
        double h = w0 * ha + w1 * hb + w2 * hc;
        if (h < cfg.near_mm || h > cfg.far_mm) continue;
        if (h > hm.depth(py, px)) hm.depth(py, px) = h;
      }
    }
  }
  if (stats) *stats = local;
  return hm;
}

// ---------------------------------------------------------------------------
// Normals
// ---------------------------------------------------------------------------

// Tangent-plane slope components (dh/dx, dh/dy) by central differences on
// the interior and one-sided differences at the borders, in mm/mm.
inline void normals_from_heightmap(const HeightMap& hm, Eigen::ArrayXXd& nx, Eigen::ArrayXXd& ny) {
  hm.validate();
  require(hm.width >= 3 && hm.height >= 3, Errc::dimension_mismatch,
          "normals need at least a 3x3 height map");
  nx.resize(hm.height, hm.width);
  ny.resize(hm.height, hm.width);
  const double inv2p = 1.0 / (2.0 * hm.pixel_pitch_mm);
  const double invp = 1.0 / hm.pixel_pitch_mm;
  for (int y = 0; y < hm.height; ++y) {
    for (int x = 0; x < hm.width; ++x) {
      if (x == 0) nx(y, x) = (hm.depth(y, 1) - hm.depth(y, 0)) * invp;
      else if (x == hm.width - 1) nx(y, x) = (hm.depth(y, x) - hm.depth(y, x - 1)) * invp;
      else nx(y, x) = (hm.depth(y, x + 1) - hm.depth(y, x - 1)) * inv2p;
      // Image row index grows downward while world y grows upward.
      if (y == 0) ny(y, x) = (hm.depth(0, x) - hm.depth(1, x)) * invp;
      else if (y == hm.height - 1) ny(y, x) = (hm.depth(y - 1, x) - hm.depth(y, x)) * invp;
      else ny(y, x) = (hm.depth(y - 1, x) - hm.depth(y + 1, x)) * inv2p;
    }
  }
}

// ---------------------------------------------------------------------------
// Photometric calibration
// ---------------------------------------------------------------------------

struct PhotometricSample {
  double nx = 0, ny = 0;
  Eigen::Vector3d delta_color = Eigen::Vector3d::Zero();
};

// Linear least squares per channel on the six monomials
// (1, nx, ny, nx^2, nx ny, ny^2). Noise-free polynomial samples are
// recovered exactly.
inline PhotometricTable fit_photometric(const std::vector<PhotometricSample>& samples) {
  require(samples.size() >= 6, Errc::rank_deficient, "fit_photometric: need at least 6 samples");
  Eigen::MatrixXd design(static_cast<Eigen::Index>(samples.size()), 6);
  Eigen::MatrixXd rhs(static_cast<Eigen::Index>(samples.size()), 3);
  for (Eigen::Index i = 0; i < design.rows(); ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    design.row(i) << 1.0, s.nx, s.ny, s.nx * s.nx, s.nx * s.ny, s.ny * s.ny;
    rhs.row(i) = s.delta_color.transpose();
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  require(qr.rank() == 6, Errc::rank_deficient,
          "fit_photometric: design matrix rank " + std::to_string(qr.rank()) + " < 6");
  PhotometricTable t;
  Eigen::MatrixXd solution = qr.solve(rhs);  // 6 x 3
  t.coeff = solution.transpose();
  return t;
}

// ---------------------------------------------------------------------------
// Image rendering
// ---------------------------------------------------------------------------

inline SensorImage render_image(const HeightMap& hm, const PhotometricTable& table,
                                const SensorImage& background) {
  hm.validate();
  require(background.width == hm.width && background.height == hm.height,
          Errc::dimension_mismatch, "background does not match height map");
  Eigen::ArrayXXd nx, ny;
  normals_from_heightmap(hm, nx, ny);
  SensorImage out;
  out.width = hm.width;
  out.height = hm.height;
  out.rgb.resize(background.rgb.size());
  for (int y = 0; y < hm.height; ++y)
    for (int x = 0; x < hm.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = static_cast<double>(background.at(x, y, c)) + table.delta(c, nx(y, x), ny(y, x));
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp<long>(std::lround(v), 0, 255));
      }
  return out;
}

// ---------------------------------------------------------------------------
// Pyramid Gaussian blur
// ---------------------------------------------------------------------------

inline constexpr std::array<int, 4> kPyramidKernelSizes{51, 21, 11, 5};

// Conventional size-to-sigma rule.
inline double kernel_sigma(int size) { return 0.3 * ((size - 1) / 2 - 1) + 0.8; }

inline std::vector<double> gaussian_kernel(int size) {
  require(size >= 1 && size % 2 == 1, Errc::dimension_mismatch, "kernel size must be odd");
  double sigma = kernel_sigma(size);
  std::vector<double> k(static_cast<std::size_t>(size));
  int c = size / 2;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    double d = i - c;
    k[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += k[static_cast<std::size_t>(i)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Kernel sizes actually applied to a w x h image: sizes larger than either
// dimension are skipped (with a warning at call time).
inline std::vector<int> blur_kernel_sizes_for(int width, int height) {
  std::vector<int> out;
  for (int k : kPyramidKernelSizes)
    if (k <= width && k <= height) out.push_back(k);
  return out;
}

namespace detail {

// Separable pass with replicate borders on a float plane.
inline void separable_blur(Eigen::ArrayXXd& plane, const std::vector<double>& kernel) {
  const int h = static_cast<int>(plane.rows()), w = static_cast<int>(plane.cols());
  const int half = static_cast<int>(kernel.size()) / 2;
  Eigen::ArrayXXd tmp(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int k = -half; k <= half; ++k)
        acc += plane(y, std::clamp(x + k, 0, w - 1)) * kernel[static_cast<std::size_t>(k + half)];
      tmp(y, x) = acc;
    }
  for (int x = 0; x < w; ++x)
    for (int y = 0; y < h; ++y) {
      double acc = 0.0;
      for (int k = -half; k <= half; ++k)
        acc += tmp(std::clamp(y + k, 0, h - 1), x) * kernel[static_cast<std::size_t>(k + half)];
      plane(y, x) = acc;
    }
}

}  // namespace detail

// Four sequential separable Gaussian passes (51, 21, 11, 5) with replicate
// padding, accumulated in floating point and quantized once at the end.
inline SensorImage pyramid_gaussian_blur(const SensorImage& img) {
  require(img.width > 0 && img.height > 0, Errc::dimension_mismatch, "empty image");
  auto sizes = blur_kernel_sizes_for(img.width, img.height);
  if (sizes.size() != kPyramidKernelSizes.size())
    warn("pyramid blur: image smaller than 51 px, large kernels skipped");
  std::array<Eigen::ArrayXXd, 3> planes;
  for (int c = 0; c < 3; ++c) {
    planes[static_cast<std::size_t>(c)].resize(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        planes[static_cast<std::size_t>(c)](y, x) = static_cast<double>(img.at(x, y, c));
  }
  for (int size : sizes) {
    auto kernel = gaussian_kernel(size);
    for (auto& plane : planes) detail::separable_blur(plane, kernel);
  }
  SensorImage out;
  out.width = img.width;
  out.height = img.height;
  out.rgb.resize(img.rgb.size());
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(x, y, c) = static_cast<std::uint8_t>(
            std::clamp<long>(std::lround(planes[static_cast<std::size_t>(c)](y, x)), 0, 255));
  return out;
}

// ---------------------------------------------------------------------------
// Backgrounds
// ---------------------------------------------------------------------------

// Deterministic synthetic DIGIT background: a dim blue-grey base with
// gentle per-channel gradients.
inline SensorImage synthetic_background(int width, int height) {
  SensorImage img;
  img.width = width;
  img.height = height;
  img.rgb.resize(static_cast<std::size_t>(width) * height * 3);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      double fx = static_cast<double>(x) / width, fy = static_cast<double>(y) / height;
      double base[3] = {96.0 + 14.0 * fx, 92.0 + 12.0 * fy, 118.0 + 10.0 * (1.0 - fx)};
      for (int c = 0; c < 3; ++c)
        img.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(base[c]), 0l, 255l));
    }
  return img;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

// Binary PPM (P6).
inline std::string image_to_ppm(const SensorImage& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
  return out;
}

inline SensorImage image_from_ppm(const std::string& data, const std::string& name = "ppm") {
  std::istringstream in(data);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  require(magic == "P6" && w > 0 && h > 0 && maxval == 255, Errc::format_error,
          name + ": not an 8-bit P6 PPM");
  in.get();  // single whitespace after maxval
  SensorImage img;
  img.width = w;
  img.height = h;
  img.rgb.resize(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  require(in.gcount() == static_cast<std::streamsize>(img.rgb.size()), Errc::format_error,
          name + ": truncated pixel data");
  return img;
}

inline void save_ppm(const std::filesystem::path& path, const SensorImage& img) {
  io::write_file(path, image_to_ppm(img));
}
inline SensorImage load_ppm(const std::filesystem::path& path) {
  return image_from_ppm(io::read_file(path), path.string());
}

// Height map binary: magic "ACRH", u32 width, u32 height, f32 pixel pitch,
// then width*height f32 depths row-major from the top row.
inline std::string heightmap_to_acrh(const HeightMap& hm) {
  hm.validate();
  std::string out = "ACRH";
  io::put_u32(out, static_cast<std::uint32_t>(hm.width));
  io::put_u32(out, static_cast<std::uint32_t>(hm.height));
  io::put_f32(out, static_cast<float>(hm.pixel_pitch_mm));
  for (int y = 0; y < hm.height; ++y)
    for (int x = 0; x < hm.width; ++x) io::put_f32(out, static_cast<float>(hm.depth(y, x)));
  return out;
}

inline HeightMap heightmap_from_acrh(const std::string& data, const std::string& name = "acrh") {
  io::Reader r(data, name);
  if (r.bytes(4) != "ACRH") fail(Errc::format_error, name + ": bad magic (expected ACRH)");
  HeightMap hm;
  hm.width = static_cast<int>(r.u32());
  hm.height = static_cast<int>(r.u32());
  hm.pixel_pitch_mm = static_cast<double>(r.f32());
  require(hm.width > 0 && hm.height > 0, Errc::format_error, name + ": bad dimensions");
  hm.depth.resize(hm.height, hm.width);
  for (int y = 0; y < hm.height; ++y)
    for (int x = 0; x < hm.width; ++x) hm.depth(y, x) = static_cast<double>(r.f32());
  return hm;
}

// Photometric table CSV: three rows (R, G, B) of six coefficients.
inline std::string photometric_to_csv(const PhotometricTable& t) {
  std::string out = "channel,a0,a1,a2,a3,a4,a5\n";
  const char* names[3] = {"R", "G", "B"};
  for (int c = 0; c < 3; ++c) {
    out += names[c];
    for (int k = 0; k < 6; ++k) out += "," + format_double(t.coeff(c, k));
    out += "\n";
  }
  return out;
}

inline PhotometricTable photometric_from_csv(const std::string& text,
                                             const std::string& name = "photometric") {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && trim(line) == "channel,a0,a1,a2,a3,a4,a5",
          Errc::format_error, name + ": bad header");
  PhotometricTable t;
  int row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    require(row < 3, Errc::format_error, name + ": too many rows");
    auto cells = split(trim(line), ',');
    require(cells.size() == 7, Errc::format_error, name + ": bad row");
    for (int k = 0; k < 6; ++k) t.coeff(row, k) = parse_double(cells[static_cast<std::size_t>(k + 1)], name);
    ++row;
  }
  require(row == 3, Errc::format_error, name + ": expected 3 channel rows");
  return t;
}

}  // namespace across::render
