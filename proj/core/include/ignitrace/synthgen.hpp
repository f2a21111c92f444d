#pragma once

// Synthetic single-particle events with known ignition frames.
//
// Each event: a static smoothed background field, per-frame read noise, a
// particle moving towards +y at constant speed, and from the ignition frame
// on a Gaussian flame kernel centred on the pixel nearest the particle.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ignitrace/seqio.hpp"

namespace ignitrace::synth {

struct Spread {
  double mean = 0.0;
  double sd = 0.0;
};

/// Per-condition distributions. Draws are Gaussian, clipped to mean +- 2.5 sd.
struct ConditionRow {
  Spread delay_ms;
  Spread velocity_px;     // px/frame towards +y
  Spread peak_ratio;      // normalized peak intensity of the saturated kernel
  Spread radius0_px;      // kernel radius at the ignition frame
  Spread growth_px;       // kernel radius growth per frame
  Spread rise_frames;     // amplitude time constant
  double diameter_min_um = 90.0;
  double diameter_max_um = 125.0;
  double non_igniting_fraction = 0.0;
};

struct SynthGeometry {
  int width = 96;
  int height = 96;
  double frame_rate = kDefaultFrameRateHz;
  double pixel_pitch_um = default_pixel_pitch_um(96);
  double y_ref_mm = 1.5;  // heat-up reference above the burner
  int lead_frames = 10;   // frames before the particle crosses y_ref
  int tail_frames = 60;   // frames kept after ignition
  double background_level = 1000.0;
  double background_sigma = 50.0;
  double noise_sigma = 40.0;
  double x_jitter_px = 8.0;

  double y_ref_px() const { return y_ref_mm * 1000.0 / pixel_pitch_um; }
};

class ConditionTable {
 public:
  SynthGeometry geometry;
  std::map<Condition, ConditionRow> rows;

  /// Default calibration: class B ignites later than A, delays shrink with
  /// oxygen, CO2 replacement delays ignition, and class-B kernels grow slowly.
  static ConditionTable calibrated();

  const ConditionRow& row(const Condition& c) const;
  /// Empty iff the monotone trends (B later than A; later at lower O2) hold.
  std::vector<std::string> trend_violations() const;
};

struct SyntheticEventSpec {
  std::string event_id;
  Condition condition;
  std::optional<int> ignition_frame;
  int n_frames = 0;
  int reference_frame = 0;  // frame at which the particle crosses y_ref

  int width = 96;
  int height = 96;
  double frame_rate = kDefaultFrameRateHz;
  double pixel_pitch_um = default_pixel_pitch_um(96);

  double x0 = 0.0;
  double y0 = 0.0;
  double velocity = 0.0;
  double diameter_um = 100.0;

  double background_level = 1000.0;
  double background_sigma = 0.0;
  double kernel_peak_ratio = 2.0;
  double kernel_radius0 = 1.5;
  double kernel_rise_frames = 1.0;
  double kernel_growth = 0.0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  /// Normalized excess at the kernel centre in the ignition frame.
  double onset_excess() const;
  /// Kernel amplitude (normalized excess at centre) at frame k; 0 before ignition.
  double kernel_amplitude(int k) const;
  double kernel_radius(int k) const;
  double particle_y(int k) const { return y0 + velocity * k; }

  /// Throws std::invalid_argument on invariant violation.
  void validate() const;
};

SyntheticEventSpec sample_spec(const Condition& cond, const ConditionTable& table, std::uint64_t seed,
                               std::string event_id = {});

EventRecord render_event(const SyntheticEventSpec& spec);

/// Event counts per condition.
using Census = std::map<Condition, int>;

/// 1006 class-A and 512 class-B events spread as evenly as possible over the
/// seven atmospheres.
Census paper_census();
Census uniform_census(int per_condition);
int census_total(const Census& c);

std::string event_id_for(const Condition& c, int index);
/// Seed of event `index` of condition `c` within a dataset seeded with `seed`.
std::uint64_t event_seed(std::uint64_t dataset_seed, const std::string& event_id);

/// Spec of every event of a dataset, in manifest order (condition-major).
std::vector<SyntheticEventSpec> dataset_specs(const ConditionTable& table, const Census& counts,
                                              std::uint64_t seed);

/// Writes LFRS, track CSV, labels.jsonl and manifest.csv under out_dir.
std::vector<ManifestRow> gen_dataset(const ConditionTable& table, const Census& counts, std::uint64_t seed,
                                     const std::filesystem::path& out_dir, int threads = 1);

}  // namespace ignitrace::synth
