#include "ignitrace/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace ignitrace::synth {

namespace fs = std::filesystem;

namespace {

double draw(std::mt19937_64& rng, const Spread& s) {
  if (s.sd <= 0.0) return s.mean;
  std::normal_distribution<double> n(s.mean, s.sd);
  return std::clamp(n(rng), s.mean - 2.5 * s.sd, s.mean + 2.5 * s.sd);
}

Image<double> smoothed_background(const SyntheticEventSpec& spec) {
  Image<double> field(spec.width, spec.height, spec.background_level);
  if (spec.background_sigma <= 0.0) return field;
  std::mt19937_64 rng(mix_seed(spec.seed, 1));
  std::normal_distribution<double> n(0.0, spec.background_sigma);
  Image<double> raw(spec.width, spec.height);
  for (auto& v : raw.data()) v = n(rng);
  // 5x5 box average over in-bounds neighbours.
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      double sum = 0.0;
      int count = 0;
      for (int dy = -2; dy <= 2; ++dy) {
        for (int dx = -2; dx <= 2; ++dx) {
          if (raw.contains(x + dx, y + dy)) {
            sum += raw.at(x + dx, y + dy);
            ++count;
          }
        }
      }
      field.at(x, y) += sum / count;
    }
  }
  return field;
}

}  // namespace

// --- table ------------------------------------------------------------------

ConditionTable ConditionTable::calibrated() {
  ConditionTable t;
  struct Delays {
    Atmosphere atm;
    double a_ms;
    double b_ms;
  };
  // Later ignition for B; faster ignition with more O2; CO2 slows ignition.
  constexpr Delays delays[] = {
      {Atmosphere::AIR10, 6.0, 8.5}, {Atmosphere::AIR20, 4.0, 6.2}, {Atmosphere::AIR30, 3.2, 5.0},
      {Atmosphere::AIR40, 2.6, 4.3}, {Atmosphere::OXY20, 5.0, 7.2}, {Atmosphere::OXY30, 3.8, 5.6},
      {Atmosphere::OXY40, 3.0, 4.7},
  };
  for (const auto& d : delays) {
    const double o2 = oxygen_percent(d.atm) / 100.0;
    ConditionRow a;
    a.delay_ms = {d.a_ms, 0.5};
    a.velocity_px = {0.22, 0.03};
    a.peak_ratio = {1.8 + 0.4 * o2, 0.15};
    a.radius0_px = {1.1, 0.15};
    a.growth_px = {0.04, 0.01};
    a.rise_frames = {2.2, 0.4};
    a.diameter_min_um = 90.0;
    a.diameter_max_um = 125.0;
    t.rows[{d.atm, SizeClass::A}] = a;

    ConditionRow b;
    b.delay_ms = {d.b_ms, 0.7};
    b.velocity_px = {0.18, 0.03};
    b.peak_ratio = {1.7, 0.08};
    b.radius0_px = {0.5, 0.04};
    b.growth_px = {0.016, 0.003};
    b.rise_frames = {1.0, 0.12};
    b.diameter_min_um = 160.0;
    b.diameter_max_um = 200.0;
    t.rows[{d.atm, SizeClass::B}] = b;
  }
  return t;
}

const ConditionRow& ConditionTable::row(const Condition& c) const {
  auto it = rows.find(c);
  if (it == rows.end()) throw std::out_of_range("condition table has no row for " + to_string(c));
  return it->second;
}

std::vector<std::string> ConditionTable::trend_violations() const {
  std::vector<std::string> v;
  for (auto atm : kAtmospheres) {
    const Condition a{atm, SizeClass::A};
    const Condition b{atm, SizeClass::B};
    if (!rows.contains(a) || !rows.contains(b)) continue;
    if (!(row(b).delay_ms.mean > row(a).delay_ms.mean)) {
      v.push_back("mean delay of " + to_string(b) + " does not exceed " + to_string(a));
    }
  }
  for (auto size : kSizeClasses) {
    for (bool oxy : {false, true}) {
      double prev_o2 = -1, prev_delay = 0;
      for (auto atm : kAtmospheres) {
        if (is_oxyfuel(atm) != oxy) continue;
        const Condition c{atm, size};
        if (!rows.contains(c)) continue;
        const double delay = row(c).delay_ms.mean;
        if (prev_o2 >= 0 && !(delay < prev_delay)) {
          v.push_back("mean delay of " + to_string(c) + " does not decrease with oxygen");
        }
        prev_o2 = oxygen_percent(atm);
        prev_delay = delay;
      }
    }
  }
  return v;
}

// --- spec -------------------------------------------------------------------

double SyntheticEventSpec::kernel_amplitude(int k) const {
  if (!ignition_frame || k < *ignition_frame) return 0.0;
  // Frame k integrates up to the end of its exposure, so the ignition frame
  // already carries a fraction of the amplitude.
  const double elapsed = static_cast<double>(k - *ignition_frame + 1);
  return (kernel_peak_ratio - 1.0) * (1.0 - std::exp(-elapsed / kernel_rise_frames));
}

double SyntheticEventSpec::kernel_radius(int k) const {
  if (!ignition_frame) return kernel_radius0;
  return kernel_radius0 + kernel_growth * static_cast<double>(std::max(0, k - *ignition_frame));
}

double SyntheticEventSpec::onset_excess() const {
  if (!ignition_frame) return 0.0;
  return kernel_amplitude(*ignition_frame);
}

void SyntheticEventSpec::validate() const {
  auto fail = [&](const std::string& what) {
    throw std::invalid_argument("SyntheticEventSpec(" + event_id + "): " + what);
  };
  if (event_id.empty()) fail("event_id is empty");
  if (n_frames < 2) fail("n_frames must be >= 2");
  if (ignition_frame && (*ignition_frame < 0 || *ignition_frame >= n_frames)) fail("ignition_frame out of range");
  if (width <= 0 || height <= 0 || width > 0xFFFF || height > 0xFFFF) fail("bad frame size");
  if (!(frame_rate > 0.0)) fail("frame_rate must be positive");
  if (!(pixel_pitch_um > 0.0)) fail("pixel_pitch must be positive");
  if (!(diameter_um > 0.0)) fail("diameter must be positive");
  if (!(background_level > 0.0)) fail("background_level must be positive");
  if (background_sigma < 0.0 || noise_sigma < 0.0) fail("noise levels must be non-negative");
  if (!(kernel_peak_ratio > 1.0)) fail("kernel_peak_ratio must exceed 1");
  if (!(kernel_rise_frames > 0.0)) fail("kernel_rise_frames must be positive");
  if (!(kernel_radius0 > 0.0)) fail("kernel radius must be positive");
  if (kernel_growth < 0.0) fail("kernel_growth must be non-negative");
}

SyntheticEventSpec sample_spec(const Condition& cond, const ConditionTable& table, std::uint64_t seed,
                               std::string event_id) {
  const ConditionRow& row = table.row(cond);
  const SynthGeometry& g = table.geometry;
  std::mt19937_64 rng(seed);

  SyntheticEventSpec s;
  s.event_id = event_id.empty() ? to_string(cond) + "-synthetic" : std::move(event_id);
  s.condition = cond;
  s.seed = seed;
  s.width = g.width;
  s.height = g.height;
  s.frame_rate = g.frame_rate;
  s.pixel_pitch_um = g.pixel_pitch_um;
  s.background_level = g.background_level;
  s.background_sigma = g.background_sigma;
  s.noise_sigma = g.noise_sigma;

  // Fixed draw order keeps specs reproducible when table values change.
  const double delay_ms = std::max(0.5, draw(rng, row.delay_ms));
  s.velocity = std::max(0.01, draw(rng, row.velocity_px));
  s.kernel_peak_ratio = std::max(1.05, draw(rng, row.peak_ratio));
  s.kernel_radius0 = std::max(0.2, draw(rng, row.radius0_px));
  s.kernel_growth = std::max(0.0, draw(rng, row.growth_px));
  s.kernel_rise_frames = std::max(0.2, draw(rng, row.rise_frames));
  std::uniform_real_distribution<double> diam(row.diameter_min_um, row.diameter_max_um);
  s.diameter_um = diam(rng);
  std::uniform_real_distribution<double> jitter(-g.x_jitter_px, g.x_jitter_px);
  s.x0 = g.width / 2.0 + jitter(rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const bool ignites = unit(rng) >= row.non_igniting_fraction;

  s.reference_frame = g.lead_frames;
  s.y0 = g.y_ref_px() - s.velocity * s.reference_frame;
  const int delay_frames = static_cast<int>(std::lround(delay_ms * g.frame_rate / 1000.0));
  if (ignites) {
    s.ignition_frame = s.reference_frame + delay_frames;
    s.n_frames = *s.ignition_frame + g.tail_frames;
  } else {
    s.n_frames = s.reference_frame + delay_frames + g.tail_frames;
  }
  s.validate();
  return s;
}

// --- rendering --------------------------------------------------------------

EventRecord render_event(const SyntheticEventSpec& spec) {
  spec.validate();
  const Image<double> field = smoothed_background(spec);
  std::mt19937_64 noise_rng(mix_seed(spec.seed, 2));
  std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0.0 ? spec.noise_sigma : 1.0);

  EventRecord rec;
  auto& seq = rec.sequence;
  seq.event_id = spec.event_id;
  seq.width = spec.width;
  seq.height = spec.height;
  seq.frame_rate = spec.frame_rate;
  seq.pixel_pitch_um = spec.pixel_pitch_um;
  seq.condition = spec.condition;
  seq.frames.reserve(static_cast<std::size_t>(spec.n_frames));

  rec.track.event_id = spec.event_id;
  rec.track.entries.reserve(static_cast<std::size_t>(spec.n_frames));

  Image<double> counts(spec.width, spec.height);
  for (int k = 0; k < spec.n_frames; ++k) {
    const double px = spec.x0;
    const double py = spec.particle_y(k);
    counts.data() = field.data();

    const double amp = spec.kernel_amplitude(k);
    if (amp > 0.0) {
      const double rho = spec.kernel_radius(k);
      const double cx = std::round(px);
      const double cy = std::round(py);
      const int reach = static_cast<int>(std::ceil(5.0 * rho)) + 1;
      const double scale = spec.background_level * amp;
      const double inv2r2 = 1.0 / (2.0 * rho * rho);
      const int x_lo = std::max(0, static_cast<int>(cx) - reach);
      const int x_hi = std::min(spec.width - 1, static_cast<int>(cx) + reach);
      const int y_lo = std::max(0, static_cast<int>(cy) - reach);
      const int y_hi = std::min(spec.height - 1, static_cast<int>(cy) + reach);
      for (int y = y_lo; y <= y_hi; ++y) {
        for (int x = x_lo; x <= x_hi; ++x) {
          const double dx = x - cx;
          const double dy = y - cy;
          counts.at(x, y) += scale * std::exp(-(dx * dx + dy * dy) * inv2r2);
        }
      }
    }

    Frame frame(spec.width, spec.height);
    auto& out = frame.data();
    const auto& in = counts.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
      double v = in[i];
      if (spec.noise_sigma > 0.0) v += noise(noise_rng);
      out[i] = static_cast<std::uint16_t>(std::clamp(std::round(v), 0.0, 65535.0));
    }
    seq.frames.push_back(std::move(frame));

    TrackEntry e;
    e.frame_index = k;
    e.x = round_sig6(px);
    e.y = round_sig6(py);
    e.diameter_um = round_sig6(spec.diameter_um);
    e.valid = e.x >= 0.0 && e.x < spec.width && e.y >= 0.0 && e.y < spec.height;
    rec.track.entries.push_back(e);
  }

  rec.label = GroundTruthLabel{spec.event_id, spec.ignition_frame, "synthgen", 0};
  return rec;
}

// --- datasets ---------------------------------------------------------------

Census paper_census() {
  Census c;
  const int per_a = 1006 / 7, extra_a = 1006 % 7;
  const int per_b = 512 / 7, extra_b = 512 % 7;
  int i = 0;
  for (auto atm : kAtmospheres) {
    c[{atm, SizeClass::A}] = per_a + (i < extra_a ? 1 : 0);
    c[{atm, SizeClass::B}] = per_b + (i < extra_b ? 1 : 0);
    ++i;
  }
  return c;
}

Census uniform_census(int per_condition) {
  Census c;
  for (const auto& cond : all_conditions()) c[cond] = per_condition;
  return c;
}

int census_total(const Census& c) {
  int n = 0;
  for (const auto& [_, count] : c) n += count;
  return n;
}

std::string event_id_for(const Condition& c, int index) { return to_string(c) + strprintf("-%04d", index); }

std::uint64_t event_seed(std::uint64_t dataset_seed, const std::string& event_id) {
  return mix_seed(dataset_seed, hash_string(event_id));
}

std::vector<SyntheticEventSpec> dataset_specs(const ConditionTable& table, const Census& counts,
                                              std::uint64_t seed) {
  std::vector<SyntheticEventSpec> specs;
  for (const auto& cond : all_conditions()) {
    auto it = counts.find(cond);
    if (it == counts.end()) continue;
    for (int i = 0; i < it->second; ++i) {
      const auto id = event_id_for(cond, i);
      specs.push_back(sample_spec(cond, table, event_seed(seed, id), id));
    }
  }
  return specs;
}

std::vector<ManifestRow> gen_dataset(const ConditionTable& table, const Census& counts, std::uint64_t seed,
                                     const fs::path& out_dir, int threads) {
  const DatasetLayout layout(out_dir);
  std::error_code ec;
  fs::create_directories(layout.events_dir(), ec);
  fs::create_directories(layout.tracks_dir(), ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  const auto specs = dataset_specs(table, counts, seed);
  parallel_for(specs.size(), threads, [&](std::size_t i) {
    const auto rec = render_event(specs[i]);
    write_sequence(rec.sequence, layout.sequence_path(rec.sequence.event_id));
    write_track(rec.track, layout.track_path(rec.track.event_id));
  });

  std::vector<ManifestRow> manifest;
  std::vector<GroundTruthLabel> labels;
  for (const auto& s : specs) {
    manifest.push_back({s.event_id, s.condition, s.n_frames, s.ignition_frame});
    labels.push_back({s.event_id, s.ignition_frame, "synthgen", 0});
  }
  write_labels(labels, layout.labels_path());
  write_manifest(manifest, layout.manifest_path());
  return manifest;
}

}  // namespace ignitrace::synth
