#pragma once

// Ignition delays, the ignition time difference (ITD) metric, per-condition
// statistics and detector comparison reports.

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ignitrace/seqio.hpp"

namespace ignitrace::eval {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Fractional frame index at which the track crosses y_ref_px, by linear
/// interpolation between the bracketing valid entries. Throws EvalError when
/// the track never reaches y_ref_px.
double reference_frame(const ParticleTrack& track, double y_ref_px);

/// (ignition_frame - ref_frame) / frame_rate, in milliseconds.
double ignition_delay_ms(double ignition_frame, double ref_frame, double frame_rate_hz);

/// Detector minus ground truth; positive means over-prediction.
inline double itd(double t_detector_ms, double t_gt_ms) { return t_detector_ms - t_gt_ms; }

// --- detections CSV ---------------------------------------------------------

struct Detection {
  std::string event_id;
  std::string detector;
  std::optional<int> ignition_frame;  // nullopt: ABSENT

  bool operator==(const Detection&) const = default;
};

/// Header `event_id,detector,ignition_frame`; ABSENT is an empty field.
void write_detections(const std::vector<Detection>& rows, const std::filesystem::path& path);
std::vector<Detection> read_detections(const std::filesystem::path& path);

// --- statistics -------------------------------------------------------------

struct ITDRecord {
  std::string event_id;
  std::string detector;
  Condition condition;
  double itd_ms = 0.0;
};

/// An event for which a detector returned ABSENT while ground truth ignites.
struct Exclusion {
  std::string event_id;
  std::string detector;
  Condition condition;
};

inline constexpr std::string_view kPooled = "ALL";

struct ConditionStats {
  std::string condition;  // atmosphere name, or "ALL" when pooled
  SizeClass size_class = SizeClass::A;
  std::string detector;
  int n = 0;
  double mu_ms = 0.0;
  std::optional<double> sigma_ms;  // sample sd; nullopt when n < 2
  int absent_count = 0;
};

enum class Grouping { PerAtmosphere, PooledAtmospheres, Both };

/// Rows ordered by detector, size class, then atmosphere (pooled last).
std::vector<ConditionStats> condition_stats(std::span<const ITDRecord> records, Grouping grouping,
                                            std::span<const Exclusion> exclusions = {});

struct NormalCurve {
  std::vector<double> x;
  std::vector<double> density;
};

/// N(mu, sigma) sampled at `points` evenly spaced values over [lo, hi].
NormalCurve normal_summary(double mu, double sigma, double lo, double hi, int points = 1001);
double trapezoid(std::span<const double> x, std::span<const double> y);

// --- comparison report ------------------------------------------------------

struct EventInfo {
  Condition condition;
  ParticleTrack track;
  double frame_rate = kDefaultFrameRateHz;
  double pixel_pitch_um = 0.0;
};

struct ReportInput {
  std::map<std::string, EventInfo> events;
  std::map<std::string, GroundTruthLabel> labels;
  std::vector<Detection> detections;
  double y_ref_mm = 1.5;
};

struct SummaryRow {
  int rank = 0;
  std::string size_class;  // "A", "B"
  std::string detector;
  int n = 0;
  double mu_ms = 0.0;
  std::optional<double> sigma_ms;
  int absent_count = 0;
};

struct Report {
  std::vector<ITDRecord> records;
  std::vector<Exclusion> exclusions;
  std::vector<ConditionStats> stats;
  std::vector<SummaryRow> summary;
  std::vector<std::string> warnings;
};

/// Computes ITDs for every detection with a labeled igniting event.
Report build_report(const ReportInput& input);

/// build_report plus files under out_dir: itd_<detector>.csv, stats.csv,
/// summary.csv, hist_A.svg, hist_B.svg and warnings.txt.
Report compare_report(const ReportInput& input, const std::filesystem::path& out_dir);

/// Stats row lookup helper; nullptr when absent.
const ConditionStats* find_stats(const std::vector<ConditionStats>& stats, std::string_view condition, SizeClass size,
                                 std::string_view detector);

}  // namespace ignitrace::eval
