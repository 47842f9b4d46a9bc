#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metanet/common.hpp"

namespace metanet {

/// Density raster of a whole two-scale structure. Pixel (px, py) lives at index py * size.x + px,
/// with py = 0 on the bottom row, the same layout as the finite-element meshes.
struct RenderedDesign {
  Dims macro;
  Dims micro;
  int upsample = 1;
  Dims size;                  // macro * micro * upsample per axis
  std::vector<double> raster;
  std::string provenance;     // config hash
  int epoch = 0;

  [[nodiscard]] double at(int px, int py) const { return raster[static_cast<std::size_t>(py) * size.x + px]; }
  /// Pixels per rendered unit cell along each axis.
  [[nodiscard]] Dims cell_pitch() const { return micro; }
  /// Pixels per macro cell along each axis.
  [[nodiscard]] Dims macro_pitch() const { return {micro.x * upsample, micro.y * upsample}; }
};

struct BinaryDesign {
  Dims size;
  std::vector<std::uint8_t> mask;  // 1 = solid
  double threshold = 0.5;

  [[nodiscard]] bool at(int px, int py) const { return mask[static_cast<std::size_t>(py) * size.x + px] != 0; }
  friend bool operator==(const BinaryDesign&, const BinaryDesign&) = default;
};

/// Wraps a plain raster; handy for fixtures and for rasters read back from disk.
inline RenderedDesign make_design(Dims size, std::vector<double> raster, Dims micro = {1, 1}) {
  require(static_cast<long long>(raster.size()) == size.count(), "raster size does not match dims");
  RenderedDesign d;
  d.size = size;
  d.micro = micro;
  d.macro = {size.x / std::max(1, micro.x), size.y / std::max(1, micro.y)};
  d.raster = std::move(raster);
  return d;
}

}  // namespace metanet
