#include "ignitrace/sas.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ignitrace::sas {

void SASConfig::validate() const {
  if (!(intensity_threshold > 1.0)) throw std::invalid_argument("SAS: intensity threshold must exceed 1");
  if (area_threshold < 1) throw std::invalid_argument("SAS: area threshold must be >= 1");
  if (connectivity != Connectivity::Four && connectivity != Connectivity::Eight) {
    throw std::invalid_argument("SAS: connectivity must be 4 or 8");
  }
  if (search_radius_px && !(*search_radius_px > 0.0)) throw std::invalid_argument("SAS: search radius must be > 0");
  if (!search_radius_px && !(search_radius_diameters > 0.0)) {
    throw std::invalid_argument("SAS: search radius factor must be > 0");
  }
  if (persistence < 1) throw std::invalid_argument("SAS: persistence must be >= 1");
  if (track_gap < 0) throw std::invalid_argument("SAS: track gap must be >= 0");
}

double estimate_background(const Frame& frame) {
  if (frame.empty()) throw std::invalid_argument("estimate_background: empty frame");
  std::vector<std::uint16_t> v = frame.data();
  const std::size_t n = v.size();
  const std::size_t mid = n / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double median = v[mid];
  if (n % 2 == 0) {
    const auto lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    median = 0.5 * (median + lower);
  }
  if (median <= 0.0) throw std::domain_error("estimate_background: zero background, normalization undefined");
  return median;
}

Image<double> normalize(const Frame& frame, double background) {
  if (!(background > 0.0)) throw std::invalid_argument("normalize: background must be positive");
  Image<double> out(frame.width(), frame.height());
  const double inv = 1.0 / background;
  auto& o = out.data();
  const auto& in = frame.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] * inv;
  return out;
}

BinaryImage binarize(const Image<double>& normalized, double intensity_threshold) {
  BinaryImage out(normalized.width(), normalized.height());
  auto& o = out.data();
  const auto& in = normalized.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] > intensity_threshold ? 1 : 0;
  return out;
}

ComponentSet connected_components(const BinaryImage& binary, Connectivity connectivity) {
  if (connectivity != Connectivity::Four && connectivity != Connectivity::Eight) {
    throw std::invalid_argument("connected_components: connectivity must be 4 or 8");
  }
  const int w = binary.width();
  const int h = binary.height();
  std::vector<std::uint8_t> seen(binary.size(), 0);
  std::vector<int> stack;
  ComponentSet out;

  static constexpr int kDx[8] = {1, -1, 0, 0, 1, 1, -1, -1};
  static constexpr int kDy[8] = {0, 0, 1, -1, 1, -1, 1, -1};
  const int n_neighbours = connectivity == Connectivity::Eight ? 8 : 4;

  for (int y0 = 0; y0 < h; ++y0) {
    for (int x0 = 0; x0 < w; ++x0) {
      const int start = y0 * w + x0;
      if (!binary.data()[static_cast<std::size_t>(start)] || seen[static_cast<std::size_t>(start)]) continue;
      Component c;
      c.box = {x0, y0, x0, y0};
      double sx = 0.0, sy = 0.0;
      seen[static_cast<std::size_t>(start)] = 1;
      stack.push_back(start);
      while (!stack.empty()) {
        const int p = stack.back();
        stack.pop_back();
        const int x = p % w;
        const int y = p / w;
        ++c.area;
        sx += x;
        sy += y;
        c.box.x0 = std::min(c.box.x0, x);
        c.box.x1 = std::max(c.box.x1, x);
        c.box.y0 = std::min(c.box.y0, y);
        c.box.y1 = std::max(c.box.y1, y);
        for (int i = 0; i < n_neighbours; ++i) {
          const int nx = x + kDx[i];
          const int ny = y + kDy[i];
          if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
          const auto q = static_cast<std::size_t>(ny * w + nx);
          if (binary.data()[q] && !seen[q]) {
            seen[q] = 1;
            stack.push_back(static_cast<int>(q));
          }
        }
      }
      c.centroid_x = sx / c.area;
      c.centroid_y = sy / c.area;
      out.push_back(c);
    }
  }
  return out;
}

std::optional<bool> frame_has_flame(const FrameSequence& seq, const ParticleTrack& track, int k,
                                    const SASConfig& cfg) {
  const TrackEntry* e = track.nearest_valid(k, cfg.track_gap);
  if (!e) return std::nullopt;
  const Frame& frame = seq.frames.at(static_cast<std::size_t>(k));
  const auto norm = normalize(frame, estimate_background(frame));
  const auto comps = connected_components(binarize(norm, cfg.intensity_threshold), cfg.connectivity);
  const double radius =
      cfg.search_radius_px ? *cfg.search_radius_px : cfg.search_radius_diameters * e->diameter_um / seq.pixel_pitch_um;
  const double r2 = radius * radius;
  for (const auto& c : comps) {
    if (c.area < cfg.area_threshold) continue;
    const double dx = c.centroid_x - e->x;
    const double dy = c.centroid_y - e->y;
    if (dx * dx + dy * dy <= r2) return true;
  }
  return false;
}

std::optional<int> sas_ignition_frame(const EventRecord& rec, const SASConfig& cfg) {
  cfg.validate();
  const int n = static_cast<int>(rec.sequence.frame_count());
  int run = 0;
  for (int k = 0; k < n; ++k) {
    const auto hit = frame_has_flame(rec.sequence, rec.track, k, cfg);
    if (hit.value_or(false)) {
      if (++run == cfg.persistence) return k - cfg.persistence + 1;
    } else {
      run = 0;
    }
  }
  return std::nullopt;
}

}  // namespace ignitrace::sas
