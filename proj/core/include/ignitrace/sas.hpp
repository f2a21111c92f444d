#pragma once

// Signal-and-structure (SAS) threshold detector.

#include <cstdint>
#include <optional>
#include <vector>

#include "ignitrace/common.hpp"
#include "ignitrace/seqio.hpp"

namespace ignitrace::sas {

enum class Connectivity : int { Four = 4, Eight = 8 };

struct SASConfig {
  double intensity_threshold = 1.2;  // normalized units, strict ">"
  int area_threshold = 9;            // pixels, ">="
  Connectivity connectivity = Connectivity::Eight;
  /// Absolute search radius in pixels; when unset, search_radius_diameters
  /// times the particle diameter (converted with the pixel pitch).
  std::optional<double> search_radius_px;
  double search_radius_diameters = 4.0;
  int persistence = 1;
  int track_gap = 2;  // frames searched for the nearest valid track entry

  /// Throws std::invalid_argument.
  void validate() const;
};

struct BoundingBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive
  bool operator==(const BoundingBox&) const = default;
};

struct Component {
  int area = 0;
  double centroid_x = 0.0;
  double centroid_y = 0.0;
  BoundingBox box;
  bool operator==(const Component&) const = default;
};

/// Components in raster order of their first pixel.
using ComponentSet = std::vector<Component>;

using BinaryImage = Image<std::uint8_t>;

/// Median pixel count. Throws std::domain_error when the median is zero
/// (normalization undefined, e.g. an all-zero frame).
double estimate_background(const Frame& frame);
Image<double> normalize(const Frame& frame, double background);
BinaryImage binarize(const Image<double>& normalized, double intensity_threshold);
ComponentSet connected_components(const BinaryImage& binary, Connectivity connectivity);

/// Whether frame k holds a qualifying component near the particle centre.
/// nullopt when no valid track entry lies within track_gap frames.
std::optional<bool> frame_has_flame(const FrameSequence& seq, const ParticleTrack& track, int k,
                                    const SASConfig& cfg);

std::optional<int> sas_ignition_frame(const EventRecord& rec, const SASConfig& cfg = {});

}  // namespace ignitrace::sas
