#pragma once

// Event data model and on-disk formats.
//
// Coordinates: pixel (x, y) with y measured as height above the burner,
// i.e. row 0 is the row closest to the burner and particles move towards
// larger y. Tracks store pixels; conversion to mm goes through pixel_pitch.

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ignitrace/common.hpp"

namespace ignitrace {

enum class Atmosphere : std::uint8_t { AIR10 = 0, AIR20, AIR30, AIR40, OXY20, OXY30, OXY40 };
enum class SizeClass : std::uint8_t { A = 0, B };

inline constexpr std::array<Atmosphere, 7> kAtmospheres = {
    Atmosphere::AIR10, Atmosphere::AIR20, Atmosphere::AIR30, Atmosphere::AIR40,
    Atmosphere::OXY20, Atmosphere::OXY30, Atmosphere::OXY40};
inline constexpr std::array<SizeClass, 2> kSizeClasses = {SizeClass::A, SizeClass::B};

std::string_view to_string(Atmosphere a);
std::string_view to_string(SizeClass s);
Atmosphere parse_atmosphere(std::string_view s);
SizeClass parse_size_class(std::string_view s);
int oxygen_percent(Atmosphere a);
bool is_oxyfuel(Atmosphere a);

struct Condition {
  Atmosphere atmosphere = Atmosphere::AIR20;
  SizeClass size_class = SizeClass::A;

  auto operator<=>(const Condition&) const = default;
};

std::string to_string(const Condition& c);  // "AIR20-A"

/// All 14 atmosphere/size pairs, atmosphere-major.
std::vector<Condition> all_conditions();

inline constexpr double kDefaultFrameRateHz = 10'000.0;
inline constexpr double kFieldOfViewMm = 19.0;

/// Pixel pitch that maps the OH-LIF field of view onto `pixels` pixels.
double default_pixel_pitch_um(int pixels);

using Frame = Image<std::uint16_t>;

/// Exact frame timestamp: index / rate. Differences are computed on the
/// integer index, so t(k+1) - t(k) == 1/rate holds exactly.
struct FrameTime {
  std::int64_t index = 0;
  double rate_hz = kDefaultFrameRateHz;

  double seconds() const { return static_cast<double>(index) / rate_hz; }
  double operator-(const FrameTime& other) const {
    return static_cast<double>(index - other.index) / rate_hz;
  }
};

struct SequenceHeader {
  std::string event_id;
  int width = 0;
  int height = 0;
  std::uint32_t frame_count = 0;
  double frame_rate = kDefaultFrameRateHz;
  double pixel_pitch_um = 0.0;
  Condition condition;
};

struct FrameSequence {
  std::string event_id;
  int width = 0;
  int height = 0;
  double frame_rate = kDefaultFrameRateHz;
  double pixel_pitch_um = 0.0;
  Condition condition;
  std::vector<Frame> frames;

  std::size_t frame_count() const { return frames.size(); }
  FrameTime timestamp(std::size_t k) const { return {static_cast<std::int64_t>(k), frame_rate}; }
  SequenceHeader header() const;

  bool operator==(const FrameSequence&) const = default;
};

struct TrackEntry {
  int frame_index = 0;
  double x = 0.0;
  double y = 0.0;
  double diameter_um = 0.0;
  bool valid = false;

  bool operator==(const TrackEntry&) const = default;
};

struct ParticleTrack {
  std::string event_id;
  std::vector<TrackEntry> entries;

  /// Valid entry recorded exactly at frame k.
  const TrackEntry* valid_at(int k) const;
  /// Valid entry nearest to frame k within +-max_gap frames (ties: earlier).
  const TrackEntry* nearest_valid(int k, int max_gap) const;

  bool operator==(const ParticleTrack&) const = default;
};

struct GroundTruthLabel {
  std::string event_id;
  std::optional<int> ignition_frame;  // nullopt: non-igniting event
  std::string labeler;
  std::int64_t unix_ms = 0;

  bool operator==(const GroundTruthLabel&) const = default;
};

struct EventRecord {
  FrameSequence sequence;
  ParticleTrack track;
  std::optional<GroundTruthLabel> label;
};

// --- errors -----------------------------------------------------------------

class SeqioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class InvariantError : public SeqioError {
 public:
  using SeqioError::SeqioError;
};
class IoError : public SeqioError {
 public:
  using SeqioError::SeqioError;
};
class BadMagicError : public SeqioError {
 public:
  using SeqioError::SeqioError;
};
class VersionError : public SeqioError {
 public:
  using SeqioError::SeqioError;
};
class TruncatedError : public SeqioError {
 public:
  TruncatedError(const std::string& what, std::uint64_t missing_bytes)
      : SeqioError(what), missing_bytes_(missing_bytes) {}
  std::uint64_t missing_bytes() const { return missing_bytes_; }

 private:
  std::uint64_t missing_bytes_;
};
class TrackFormatError : public SeqioError {
 public:
  using SeqioError::SeqioError;
};
class MonotonicityError : public TrackFormatError {
 public:
  using TrackFormatError::TrackFormatError;
};
class RangeError : public TrackFormatError {
 public:
  using TrackFormatError::TrackFormatError;
};

// --- LFRS container ---------------------------------------------------------

inline constexpr std::uint16_t kLfrsVersion = 1;
/// Bytes before the event id: magic, version, geometry, rate, pitch, condition.
inline constexpr std::size_t kLfrsFixedHeaderBytes = 4 + 2 + 2 + 2 + 4 + 8 + 8 + 1 + 1;

/// Empty iff the sequence satisfies every FrameSequence invariant.
std::vector<std::string> sequence_violations(const FrameSequence& seq);

void write_sequence(const FrameSequence& seq, const std::filesystem::path& path);
FrameSequence read_sequence(const std::filesystem::path& path);
SequenceHeader read_sequence_header(const std::filesystem::path& path);

// --- track CSV --------------------------------------------------------------

struct FrameGeometry {
  int width = 0;
  int height = 0;
};

/// Values are written with 6 significant digits.
void write_track(const ParticleTrack& track, const std::filesystem::path& path);
/// event_id is taken from the file stem. With geometry, valid entries must
/// lie inside the frame.
ParticleTrack read_track(const std::filesystem::path& path,
                         std::optional<FrameGeometry> geometry = std::nullopt);

// --- label store (JSON lines) -----------------------------------------------

std::string label_to_json_line(const GroundTruthLabel& label);
GroundTruthLabel label_from_json_line(std::string_view line);
std::vector<GroundTruthLabel> read_labels(const std::filesystem::path& path);
void write_labels(const std::vector<GroundTruthLabel>& labels, const std::filesystem::path& path);
/// Last write per event wins.
std::map<std::string, GroundTruthLabel> current_labels(const std::vector<GroundTruthLabel>& log);

// --- validation -------------------------------------------------------------

std::vector<std::string> validate_event(const EventRecord& rec);

// --- dataset directory ------------------------------------------------------

struct ManifestRow {
  std::string event_id;
  Condition condition;
  int n_frames = 0;
  std::optional<int> ignition_frame;

  bool operator==(const ManifestRow&) const = default;
};

void write_manifest(const std::vector<ManifestRow>& rows, const std::filesystem::path& path);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);

/// <root>/manifest.csv, <root>/labels.jsonl, <root>/events/<id>.lfrs, <root>/tracks/<id>.csv
class DatasetLayout {
 public:
  explicit DatasetLayout(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path manifest_path() const { return root_ / "manifest.csv"; }
  std::filesystem::path labels_path() const { return root_ / "labels.jsonl"; }
  std::filesystem::path events_dir() const { return root_ / "events"; }
  std::filesystem::path tracks_dir() const { return root_ / "tracks"; }
  std::filesystem::path sequence_path(const std::string& id) const { return events_dir() / (id + ".lfrs"); }
  std::filesystem::path track_path(const std::string& id) const { return tracks_dir() / (id + ".csv"); }

  std::vector<ManifestRow> manifest() const { return read_manifest(manifest_path()); }
  /// Reads sequence and track; attaches labels[id] when present.
  EventRecord load_event(const std::string& id,
                         const std::map<std::string, GroundTruthLabel>* labels = nullptr) const;

 private:
  std::filesystem::path root_;
};

}  // namespace ignitrace
