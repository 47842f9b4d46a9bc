#pragma once

// Rendering at arbitrary upsampling, binary cleanup and raster IO.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "metanet/common.hpp"
#include "metanet/fea.hpp"
#include "metanet/neural_field.hpp"
#include "metanet/raster.hpp"

namespace metanet {

inline constexpr long long kDefaultPixelBudget = 64LL * 1024 * 1024;

inline Dims render_size(Dims macro, Dims micro, int upsample) {
  return {macro.x * micro.x * upsample, macro.y * micro.y * upsample};
}

/// Evaluates every subcell's micro grid and tiles the results into one raster.
inline RenderedDesign render(const TopologyNetwork& net, Dims macro, Dims micro, int upsample,
                             long long pixel_budget = kDefaultPixelBudget) {
  if (upsample < 1) throw InvalidArgument("upsample must be >= 1");
  const Dims size = render_size(macro, micro, upsample);
  if (size.count() > pixel_budget)
    throw InvalidArgument("render of " + std::to_string(size.x) + "x" + std::to_string(size.y) + " = " +
                          std::to_string(size.count()) + " pixels exceeds the pixel budget of " +
                          std::to_string(pixel_budget));
  RenderedDesign d;
  d.macro = macro;
  d.micro = micro;
  d.upsample = upsample;
  d.size = size;
  d.raster.assign(static_cast<std::size_t>(size.count()), 0.0);
  const auto full = build_coordinates(macro, micro, upsample);
  // Chunks are whole forward blocks, so a 1x render repeats the training evaluation bit for bit.
  const std::size_t chunk = 4 * detail::kCenterBlock;
  for (std::size_t c0 = 0; c0 < full.centers.size(); c0 += chunk) {
    const std::size_t c1 = std::min(full.centers.size(), c0 + chunk);
    CoordinateBatch part;
    part.local = full.local;
    part.centers.assign(full.centers.begin() + static_cast<std::ptrdiff_t>(c0), full.centers.begin() + static_cast<std::ptrdiff_t>(c1));
    const Eigen::VectorXd rho = forward(net, part);
    for (std::size_t c = c0; c < c1; ++c) {
      const auto pos = full.lattice[c];
      for (int ey = 0; ey < micro.y; ++ey)
        for (int ex = 0; ex < micro.x; ++ex) {
          const auto r = static_cast<Eigen::Index>((c - c0) * full.local.size()) + ey * micro.x + ex;
          const auto px = static_cast<std::size_t>(pos.x * micro.x + ex);
          const auto py = static_cast<std::size_t>(pos.y * micro.y + ey);
          d.raster[py * static_cast<std::size_t>(size.x) + px] = rho(r);
        }
    }
  }
  return d;
}

// ---------------------------------------------------------------------------------------------
// Binary morphology

using PixelMask = std::vector<std::uint8_t>;

inline PixelMask binarize(const RenderedDesign& d, double cutoff) {
  PixelMask m(d.raster.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = d.raster[i] >= cutoff ? 1 : 0;
  return m;
}

struct Components {
  std::vector<int> label;  // -1 for background
  std::vector<long long> area;
  [[nodiscard]] std::size_t count() const { return area.size(); }
};

/// 8-connected labeling of the set pixels.
inline Components label_components(Dims size, const PixelMask& mask) {
  Components out;
  out.label.assign(mask.size(), -1);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || out.label[start] >= 0) continue;
    const int id = static_cast<int>(out.area.size());
    long long area = 0;
    stack.push_back(start);
    out.label[start] = id;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++area;
      const int px = static_cast<int>(p % static_cast<std::size_t>(size.x));
      const int py = static_cast<int>(p / static_cast<std::size_t>(size.x));
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int qx = px + dx, qy = py + dy;
          if ((dx == 0 && dy == 0) || qx < 0 || qy < 0 || qx >= size.x || qy >= size.y) continue;
          const std::size_t q = static_cast<std::size_t>(qy) * static_cast<std::size_t>(size.x) + static_cast<std::size_t>(qx);
          if (mask[q] && out.label[q] < 0) {
            out.label[q] = id;
            stack.push_back(q);
          }
        }
    }
    out.area.push_back(area);
  }
  return out;
}

/// Deletes components smaller than min_area unless they overlap `protect`.
inline PixelMask drop_small_components(Dims size, const PixelMask& mask, long long min_area, const PixelMask& protect) {
  const auto comp = label_components(size, mask);
  std::vector<std::uint8_t> keep(comp.count(), 0);
  for (std::size_t k = 0; k < comp.count(); ++k) keep[k] = comp.area[k] >= min_area ? 1 : 0;
  for (std::size_t i = 0; i < protect.size(); ++i)
    if (protect[i] && comp.label[i] >= 0) keep[static_cast<std::size_t>(comp.label[i])] = 1;
  PixelMask out(mask.size(), 0);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (comp.label[i] >= 0 && keep[static_cast<std::size_t>(comp.label[i])]) out[i] = 1;
  return out;
}

inline PixelMask dilate(Dims size, const PixelMask& mask, int radius) {
  PixelMask out = mask;
  for (int y = 0; y < size.y; ++y)
    for (int x = 0; x < size.x; ++x) {
      if (!mask[static_cast<std::size_t>(y) * size.x + x]) continue;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          const int qx = x + dx, qy = y + dy;
          if (qx >= 0 && qy >= 0 && qx < size.x && qy < size.y) out[static_cast<std::size_t>(qy) * size.x + qx] = 1;
        }
    }
  return out;
}

/// Pixels touching any constrained or loaded node of `macro` once it is scaled onto the raster.
inline PixelMask boundary_protection(const RenderedDesign& d, const FeProblem& macro) {
  require(d.size.x % macro.nel.x == 0 && d.size.y % macro.nel.y == 0 && d.size.x / macro.nel.x == d.size.y / macro.nel.y,
          "raster is not an integer, isotropic refinement of the macro mesh");
  const int pitch = d.size.x / macro.nel.x;
  const FeProblem fine = scale_problem(macro, pitch);
  PixelMask m(static_cast<std::size_t>(d.size.count()), 0);
  auto mark_node = [&](int dof) {
    const int node = dof / 2;
    const int i = node % (d.size.x + 1), j = node / (d.size.x + 1);
    for (int ey = j - 1; ey <= j; ++ey)
      for (int ex = i - 1; ex <= i; ++ex)
        if (ex >= 0 && ey >= 0 && ex < d.size.x && ey < d.size.y) m[static_cast<std::size_t>(ey) * d.size.x + ex] = 1;
  };
  for (int dof : fine.fixed_dofs) mark_node(dof);
  for (const auto& l : fine.loads) mark_node(l.dof);
  for (const auto& p : fine.prescribed) mark_node(p.dof);
  return m;
}

/// Binarizes at `cutoff` and deletes 8-connected solid components below `min_area` pixels;
/// components overlapping `protect` always survive.
inline BinaryDesign remove_islands(const RenderedDesign& d, double cutoff = 0.3, long long min_area = 400,
                                   const PixelMask& protect = {}) {
  if (!(cutoff > 0.0 && cutoff < 1.0)) throw InvalidArgument("cutoff must lie in (0, 1)");
  require(protect.empty() || protect.size() == d.raster.size(), "protection mask size mismatch");
  return {d.size, drop_small_components(d.size, binarize(d, cutoff), min_area, protect), cutoff};
}

/// Dual-threshold cleanup: pieces that detach from the structure when the cutoff is raised to
/// `high` are dilated by `dilation` pixels and erased from the island-free `low` mask.
inline BinaryDesign remove_dangling(const RenderedDesign& d, double low = 0.3, double high = 0.5, long long min_area = 400,
                                    const PixelMask& protect = {}, int dilation = 1) {
  if (!(low > 0.0 && low < high && high < 1.0)) throw InvalidArgument("need 0 < low < high < 1");
  const PixelMask base = remove_islands(d, low, min_area, protect).mask;
  PixelMask hi = binarize(d, high);
  for (std::size_t i = 0; i < hi.size(); ++i) hi[i] &= base[i];
  const auto comp = label_components(d.size, hi);
  std::vector<std::uint8_t> detached(comp.count(), 0);
  for (std::size_t k = 0; k < comp.count(); ++k) detached[k] = comp.area[k] < min_area ? 1 : 0;
  for (std::size_t i = 0; i < protect.size(); ++i)
    if (protect[i] && comp.label[i] >= 0) detached[static_cast<std::size_t>(comp.label[i])] = 0;
  PixelMask erase(hi.size(), 0);
  for (std::size_t i = 0; i < hi.size(); ++i)
    if (comp.label[i] >= 0 && detached[static_cast<std::size_t>(comp.label[i])]) erase[i] = 1;
  erase = dilate(d.size, erase, dilation);
  PixelMask out = base;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (erase[i] && !protect.empty() && protect[i]) erase[i] = 0;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (erase[i]) out[i] = 0;
  // Erasing can strand slivers; clearing them keeps the operation idempotent.
  return {d.size, drop_small_components(d.size, out, min_area, protect), low};
}

/// Binary mask as a 0/1 density raster with the same layout metadata.
inline RenderedDesign as_design(const BinaryDesign& b, const RenderedDesign& like) {
  RenderedDesign d = like;
  d.size = b.size;
  d.raster.assign(b.mask.size(), 0.0);
  for (std::size_t i = 0; i < b.mask.size(); ++i) d.raster[i] = b.mask[i] ? 1.0 : 0.0;
  return d;
}

struct ConnectivityReport {
  std::size_t components = 0;
  double largest_fraction = 0.0;
  double mean_boundary_jump = 0.0;
};

/// Solid components at `cutoff`, share of solid pixels in the largest one, and the mean density
/// jump over pixel pairs straddling cell boundaries spaced `pitch` pixels apart (default: the
/// rendered unit-cell pitch).
inline ConnectivityReport connectivity_metric(const RenderedDesign& d, double cutoff = 0.5, Dims pitch = {0, 0}) {
  if (!(cutoff > 0.0 && cutoff < 1.0)) throw InvalidArgument("cutoff must lie in (0, 1)");
  if (pitch.x <= 0 || pitch.y <= 0) pitch = d.cell_pitch();
  require(pitch.x >= 1 && pitch.y >= 1, "cell pitch must be >= 1");
  ConnectivityReport r;
  const auto comp = label_components(d.size, binarize(d, cutoff));
  r.components = comp.count();
  long long total = 0, largest = 0;
  for (auto a : comp.area) {
    total += a;
    largest = std::max(largest, a);
  }
  r.largest_fraction = total > 0 ? static_cast<double>(largest) / static_cast<double>(total) : 0.0;
  double jump = 0.0;
  long long pairs = 0;
  for (int x = pitch.x; x < d.size.x; x += pitch.x)
    for (int y = 0; y < d.size.y; ++y, ++pairs) jump += std::abs(d.at(x, y) - d.at(x - 1, y));
  for (int y = pitch.y; y < d.size.y; y += pitch.y)
    for (int x = 0; x < d.size.x; ++x, ++pairs) jump += std::abs(d.at(x, y) - d.at(x, y - 1));
  r.mean_boundary_jump = pairs > 0 ? jump / static_cast<double>(pairs) : 0.0;
  return r;
}

// ---------------------------------------------------------------------------------------------
// PGM (P5) IO. Files store the top row first; rasters keep y up.

inline void write_pgm(const std::string& path, Dims size, const std::vector<std::uint8_t>& bytes_y_up,
                      const std::string& comment) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path);
  os << "P5\n";
  if (!comment.empty()) os << "# " << comment << "\n";
  os << size.x << ' ' << size.y << "\n255\n";
  for (int y = size.y - 1; y >= 0; --y)
    os.write(reinterpret_cast<const char*>(bytes_y_up.data() + static_cast<std::size_t>(y) * size.x), size.x);
  if (!os) throw ConfigError("failed writing " + path);
}

inline std::string provenance_comment(const RenderedDesign& d) {
  std::ostringstream c;
  c << "provenance " << (d.provenance.empty() ? "-" : d.provenance) << " epoch " << d.epoch << " macro " << d.macro.x
    << 'x' << d.macro.y << " micro " << d.micro.x << 'x' << d.micro.y << " upsample " << d.upsample;
  return c.str();
}

inline void write_pgm(const std::string& path, const RenderedDesign& d) {
  std::vector<std::uint8_t> bytes(d.raster.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(d.raster[i], 0.0, 1.0) * 255.0));
  write_pgm(path, d.size, bytes, provenance_comment(d));
}

inline void write_pgm(const std::string& path, const BinaryDesign& b, const std::string& comment = {}) {
  std::vector<std::uint8_t> bytes(b.mask.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = b.mask[i] ? 255 : 0;
  write_pgm(path, b.size, bytes, comment);
}

/// Reads a P5 raster (maxval 255) back as densities in [0, 1]. Layout metadata is restored from
/// the provenance comment when present.
inline RenderedDesign read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5") throw ConfigError(path + " is not a binary PGM");
  RenderedDesign d;
  std::vector<long long> header;
  while (header.size() < 3) {
    is >> std::ws;
    if (is.peek() == '#') {
      std::string line;
      std::getline(is, line);
      std::istringstream c(line.substr(1));
      std::string key;
      while (c >> key) {
        char sep = 0;
        if (key == "provenance") c >> d.provenance;
        else if (key == "epoch") c >> d.epoch;
        else if (key == "macro") c >> d.macro.x >> sep >> d.macro.y;
        else if (key == "micro") c >> d.micro.x >> sep >> d.micro.y;
        else if (key == "upsample") c >> d.upsample;
      }
      if (d.provenance == "-") d.provenance.clear();
      continue;
    }
    long long v = 0;
    if (!(is >> v)) throw ConfigError(path + ": malformed PGM header");
    header.push_back(v);
  }
  if (header[2] != 255) throw ConfigError(path + ": only maxval 255 is supported");
  if (header[0] <= 0 || header[1] <= 0 || header[0] * header[1] > (1LL << 31)) throw ConfigError(path + ": bad PGM dims");
  is.get();
  d.size = {static_cast<int>(header[0]), static_cast<int>(header[1])};
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(d.size.count()));
  for (int y = d.size.y - 1; y >= 0; --y)
    is.read(reinterpret_cast<char*>(bytes.data() + static_cast<std::size_t>(y) * d.size.x), d.size.x);
  if (!is) throw ConfigError(path + ": truncated pixel data");
  d.raster.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) d.raster[i] = bytes[i] / 255.0;
  if (d.micro.x <= 0 || d.micro.y <= 0) d.micro = d.size;
  if (d.macro.x <= 0 || d.macro.y <= 0 || d.upsample <= 0) {
    d.macro = {1, 1};
    d.upsample = 1;
  }
  return d;
}

}  // namespace metanet
