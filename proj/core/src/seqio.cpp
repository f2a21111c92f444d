#include "ignitrace/seqio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace ignitrace {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::array<std::string_view, 7> kAtmosphereNames = {"AIR10", "AIR20", "AIR30", "AIR40",
                                                              "OXY20", "OXY30", "OXY40"};
constexpr char kMagic[4] = {'L', 'F', 'R', 'S'};

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) {
    u8(static_cast<std::uint8_t>(v & 0xFF));
    u8(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xFF));
  }
  void bytes(std::string_view s) { buf_.append(s); }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& data, std::string context) : data_(data), context_(std::move(context)) {}

  void need(std::size_t n, const char* what) const {
    if (pos_ + n > data_.size()) {
      const auto missing = pos_ + n - data_.size();
      throw TruncatedError(context_ + ": truncated " + what + ", missing " + std::to_string(missing) + " bytes",
                           missing);
    }
  }
  std::uint8_t u8() {
    need(1, "header");
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint16_t u16() {
    need(2, "header");
    const auto lo = static_cast<std::uint8_t>(data_[pos_]);
    const auto hi = static_cast<std::uint8_t>(data_[pos_ + 1]);
    pos_ += 2;
    return static_cast<std::uint16_t>(lo | (hi << 8));
  }
  std::uint32_t u32() {
    need(4, "header");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8, "header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  std::string bytes(std::size_t n) {
    need(n, "header");
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  const char* cursor() const { return data_.data() + pos_; }

 private:
  const std::string& data_;
  std::string context_;
  std::size_t pos_ = 0;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

SequenceHeader parse_header(ByteReader& r, const fs::path& path) {
  if (r.remaining() < 4 || std::memcmp(r.cursor(), kMagic, 4) != 0) {
    throw BadMagicError(path.string() + ": bad magic, not an LFRS file");
  }
  r.bytes(4);
  const auto version = r.u16();
  if (version != kLfrsVersion) {
    throw VersionError(path.string() + ": unsupported LFRS version " + std::to_string(version));
  }
  SequenceHeader h;
  h.width = r.u16();
  h.height = r.u16();
  h.frame_count = r.u32();
  h.frame_rate = r.f64();
  h.pixel_pitch_um = r.f64();
  const auto atm = r.u8();
  const auto size = r.u8();
  if (atm > 6 || size > 1) throw InvariantError(path.string() + ": invalid condition code");
  h.condition = {static_cast<Atmosphere>(atm), static_cast<SizeClass>(size)};
  const auto id_len = r.u16();
  h.event_id = r.bytes(id_len);
  return h;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, const std::string& context) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw TrackFormatError(context + ": not a number: '" + s + "'");
  }
  if (used != s.size()) throw TrackFormatError(context + ": trailing characters in '" + s + "'");
  return v;
}

int parse_int(const std::string& s, const std::string& context) {
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(s, &used);
  } catch (const std::exception&) {
    throw TrackFormatError(context + ": not an integer: '" + s + "'");
  }
  if (used != s.size()) throw TrackFormatError(context + ": trailing characters in '" + s + "'");
  return static_cast<int>(v);
}

}  // namespace

std::string_view to_string(Atmosphere a) { return kAtmosphereNames.at(static_cast<std::size_t>(a)); }
std::string_view to_string(SizeClass s) { return s == SizeClass::A ? "A" : "B"; }

Atmosphere parse_atmosphere(std::string_view s) {
  for (std::size_t i = 0; i < kAtmosphereNames.size(); ++i) {
    if (kAtmosphereNames[i] == s) return static_cast<Atmosphere>(i);
  }
  throw std::invalid_argument("unknown atmosphere '" + std::string(s) + "'");
}

SizeClass parse_size_class(std::string_view s) {
  if (s == "A") return SizeClass::A;
  if (s == "B") return SizeClass::B;
  throw std::invalid_argument("unknown size class '" + std::string(s) + "'");
}

int oxygen_percent(Atmosphere a) {
  switch (a) {
    case Atmosphere::AIR10: return 10;
    case Atmosphere::AIR20: case Atmosphere::OXY20: return 20;
    case Atmosphere::AIR30: case Atmosphere::OXY30: return 30;
    case Atmosphere::AIR40: case Atmosphere::OXY40: return 40;
  }
  return 0;
}

bool is_oxyfuel(Atmosphere a) { return a >= Atmosphere::OXY20; }

std::string to_string(const Condition& c) {
  return std::string(to_string(c.atmosphere)) + "-" + std::string(to_string(c.size_class));
}

std::vector<Condition> all_conditions() {
  std::vector<Condition> out;
  for (auto a : kAtmospheres)
    for (auto s : kSizeClasses) out.push_back({a, s});
  return out;
}

double default_pixel_pitch_um(int pixels) { return kFieldOfViewMm * 1000.0 / static_cast<double>(pixels); }

SequenceHeader FrameSequence::header() const {
  return {event_id, width, height, static_cast<std::uint32_t>(frames.size()), frame_rate, pixel_pitch_um, condition};
}

const TrackEntry* ParticleTrack::valid_at(int k) const {
  auto it = std::lower_bound(entries.begin(), entries.end(), k,
                             [](const TrackEntry& e, int f) { return e.frame_index < f; });
  if (it != entries.end() && it->frame_index == k && it->valid) return &*it;
  return nullptr;
}

const TrackEntry* ParticleTrack::nearest_valid(int k, int max_gap) const {
  for (int d = 0; d <= max_gap; ++d) {
    if (const auto* e = valid_at(k - d)) return e;
    if (d > 0) {
      if (const auto* e = valid_at(k + d)) return e;
    }
  }
  return nullptr;
}

// --- LFRS -------------------------------------------------------------------

std::vector<std::string> sequence_violations(const FrameSequence& seq) {
  std::vector<std::string> v;
  if (seq.event_id.empty()) v.push_back("event_id is empty");
  if (seq.event_id.size() > 0xFFFF) v.push_back("event_id longer than 65535 bytes");
  if (seq.width <= 0 || seq.width > 0xFFFF) v.push_back("width must be in [1, 65535]");
  if (seq.height <= 0 || seq.height > 0xFFFF) v.push_back("height must be in [1, 65535]");
  if (!(seq.frame_rate > 0.0) || !std::isfinite(seq.frame_rate)) v.push_back("frame_rate must be positive");
  if (!(seq.pixel_pitch_um > 0.0) || !std::isfinite(seq.pixel_pitch_um)) v.push_back("pixel_pitch must be positive");
  if (seq.frames.size() < 2) v.push_back("frame count must be >= 2");
  for (std::size_t k = 0; k < seq.frames.size(); ++k) {
    const auto& f = seq.frames[k];
    if (f.width() != seq.width || f.height() != seq.height) {
      v.push_back(strprintf("frame %zu is %dx%d, expected %dx%d", k, f.width(), f.height(), seq.width, seq.height));
    }
  }
  return v;
}

void write_sequence(const FrameSequence& seq, const fs::path& path) {
  if (auto v = sequence_violations(seq); !v.empty()) {
    throw InvariantError("write_sequence(" + seq.event_id + "): " + v.front());
  }
  ByteWriter w;
  const auto pixels = static_cast<std::size_t>(seq.width) * static_cast<std::size_t>(seq.height);
  w.buffer().reserve(kLfrsFixedHeaderBytes + 2 + seq.event_id.size() + 2 * pixels * seq.frames.size());
  w.bytes(std::string_view(kMagic, 4));
  w.u16(kLfrsVersion);
  w.u16(static_cast<std::uint16_t>(seq.width));
  w.u16(static_cast<std::uint16_t>(seq.height));
  w.u32(static_cast<std::uint32_t>(seq.frames.size()));
  w.f64(seq.frame_rate);
  w.f64(seq.pixel_pitch_um);
  w.u8(static_cast<std::uint8_t>(seq.condition.atmosphere));
  w.u8(static_cast<std::uint8_t>(seq.condition.size_class));
  w.u16(static_cast<std::uint16_t>(seq.event_id.size()));
  w.bytes(seq.event_id);
  for (const auto& f : seq.frames) {
    for (auto c : f.data()) w.u16(c);
  }
  write_file(path, w.buffer());
}

SequenceHeader read_sequence_header(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string head(kLfrsFixedHeaderBytes + 2 + 0xFFFF, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head.size()));
  head.resize(static_cast<std::size_t>(in.gcount()));
  ByteReader r(head, path.string());
  return parse_header(r, path);
}

FrameSequence read_sequence(const fs::path& path) {
  const std::string data = read_file(path);
  ByteReader r(data, path.string());
  const auto h = parse_header(r, path);

  const auto pixels = static_cast<std::size_t>(h.width) * static_cast<std::size_t>(h.height);
  const std::uint64_t payload = 2ULL * pixels * h.frame_count;
  if (r.remaining() < payload) {
    const auto missing = payload - r.remaining();
    throw TruncatedError(path.string() + ": truncated frame payload, missing " + std::to_string(missing) + " bytes",
                         missing);
  }
  if (r.remaining() > payload) {
    throw InvariantError(path.string() + ": " + std::to_string(r.remaining() - payload) + " trailing bytes");
  }

  FrameSequence seq;
  seq.event_id = h.event_id;
  seq.width = h.width;
  seq.height = h.height;
  seq.frame_rate = h.frame_rate;
  seq.pixel_pitch_um = h.pixel_pitch_um;
  seq.condition = h.condition;
  seq.frames.reserve(h.frame_count);
  const auto* p = reinterpret_cast<const unsigned char*>(r.cursor());
  for (std::uint32_t k = 0; k < h.frame_count; ++k) {
    std::vector<std::uint16_t> counts(pixels);
    for (std::size_t i = 0; i < pixels; ++i, p += 2) {
      counts[i] = static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    }
    seq.frames.emplace_back(h.width, h.height, std::move(counts));
  }
  if (auto v = sequence_violations(seq); !v.empty()) {
    throw InvariantError(path.string() + ": " + v.front());
  }
  return seq;
}

// --- tracks -----------------------------------------------------------------

void write_track(const ParticleTrack& track, const fs::path& path) {
  std::string out = "frame,x_px,y_px,diameter_um,valid\n";
  int prev = -1;
  for (const auto& e : track.entries) {
    if (e.frame_index < 0 || e.frame_index <= prev) {
      throw MonotonicityError("write_track(" + track.event_id + "): frame_index not strictly increasing at " +
                              std::to_string(e.frame_index));
    }
    prev = e.frame_index;
    out += strprintf("%d,%.6g,%.6g,%.6g,%d\n", e.frame_index, e.x, e.y, e.diameter_um, e.valid ? 1 : 0);
  }
  write_file(path, out);
}

ParticleTrack read_track(const fs::path& path, std::optional<FrameGeometry> geometry) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  ParticleTrack track;
  track.event_id = path.stem().string();
  std::string line;
  if (!std::getline(in, line)) throw TrackFormatError(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "frame,x_px,y_px,diameter_um,valid") {
    throw TrackFormatError(path.string() + ": unexpected header '" + line + "'");
  }
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto ctx = path.string() + ":" + std::to_string(lineno);
    const auto f = split_csv_line(line);
    if (f.size() != 5) throw TrackFormatError(ctx + ": expected 5 columns");
    TrackEntry e;
    e.frame_index = parse_int(f[0], ctx);
    e.x = parse_double(f[1], ctx);
    e.y = parse_double(f[2], ctx);
    e.diameter_um = parse_double(f[3], ctx);
    const int valid = parse_int(f[4], ctx);
    if (valid != 0 && valid != 1) throw TrackFormatError(ctx + ": valid must be 0 or 1");
    e.valid = valid == 1;
    if (e.frame_index < 0) throw TrackFormatError(ctx + ": negative frame index");
    if (!track.entries.empty() && e.frame_index <= track.entries.back().frame_index) {
      throw MonotonicityError(ctx + ": frame_index " + std::to_string(e.frame_index) +
                              " does not increase (previous " + std::to_string(track.entries.back().frame_index) + ")");
    }
    if (!(e.diameter_um > 0.0)) throw RangeError(ctx + ": diameter must be positive");
    if (geometry && e.valid) {
      if (!(e.x >= 0.0 && e.x < geometry->width)) {
        throw RangeError(ctx + strprintf(": x=%g outside [0, %d)", e.x, geometry->width));
      }
      if (!(e.y >= 0.0 && e.y < geometry->height)) {
        throw RangeError(ctx + strprintf(": y=%g outside [0, %d)", e.y, geometry->height));
      }
    }
    track.entries.push_back(e);
  }
  return track;
}

// --- labels -----------------------------------------------------------------

std::string label_to_json_line(const GroundTruthLabel& label) {
  json j;
  j["event_id"] = label.event_id;
  j["ignition_frame"] = label.ignition_frame ? json(*label.ignition_frame) : json(nullptr);
  j["labeler"] = label.labeler;
  j["unix_ms"] = label.unix_ms;
  return j.dump();
}

GroundTruthLabel label_from_json_line(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw SeqioError(std::string("malformed label line: ") + e.what());
  }
  try {
    GroundTruthLabel l;
    l.event_id = j.at("event_id").get<std::string>();
    const auto& f = j.at("ignition_frame");
    if (!f.is_null()) {
      const auto v = f.get<long long>();
      if (v < 0) throw SeqioError("negative ignition_frame");
      l.ignition_frame = static_cast<int>(v);
    }
    l.labeler = j.at("labeler").get<std::string>();
    l.unix_ms = j.at("unix_ms").get<std::int64_t>();
    return l;
  } catch (const json::exception& e) {
    throw SeqioError(std::string("malformed label line: ") + e.what());
  }
}

std::vector<GroundTruthLabel> read_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<GroundTruthLabel> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(label_from_json_line(line));
  }
  return out;
}

void write_labels(const std::vector<GroundTruthLabel>& labels, const fs::path& path) {
  std::string out;
  for (const auto& l : labels) {
    out += label_to_json_line(l);
    out += '\n';
  }
  write_file(path, out);
}

std::map<std::string, GroundTruthLabel> current_labels(const std::vector<GroundTruthLabel>& log) {
  std::map<std::string, GroundTruthLabel> m;
  for (const auto& l : log) m[l.event_id] = l;
  return m;
}

// --- validation -------------------------------------------------------------

std::vector<std::string> validate_event(const EventRecord& rec) {
  auto v = sequence_violations(rec.sequence);
  const auto& track = rec.track;
  if (track.event_id != rec.sequence.event_id) {
    v.push_back("track event_id '" + track.event_id + "' != sequence event_id '" + rec.sequence.event_id + "'");
  }
  bool any_valid = false;
  for (std::size_t i = 0; i < track.entries.size(); ++i) {
    const auto& e = track.entries[i];
    if (e.frame_index < 0) v.push_back(strprintf("track entry %zu has negative frame_index", i));
    if (i > 0 && e.frame_index <= track.entries[i - 1].frame_index) {
      v.push_back(strprintf("track frame_index not strictly increasing at entry %zu", i));
    }
    if (!(e.diameter_um > 0.0)) v.push_back(strprintf("track entry %zu has non-positive diameter", i));
    if (e.valid) {
      any_valid = true;
      if (!(e.x >= 0.0 && e.x < rec.sequence.width && e.y >= 0.0 && e.y < rec.sequence.height)) {
        v.push_back(strprintf("valid track entry at frame %d lies outside the frame", e.frame_index));
      }
    }
  }
  if (!any_valid) v.push_back("track has no valid entry");
  if (rec.label) {
    if (rec.label->event_id != rec.sequence.event_id) {
      v.push_back("label event_id '" + rec.label->event_id + "' != sequence event_id '" + rec.sequence.event_id + "'");
    }
    if (rec.label->ignition_frame &&
        (*rec.label->ignition_frame < 0 ||
         static_cast<std::size_t>(*rec.label->ignition_frame) >= rec.sequence.frame_count())) {
      v.push_back(strprintf("label ignition_frame %d outside [0, %zu)", *rec.label->ignition_frame,
                            rec.sequence.frame_count()));
    }
  }
  return v;
}

// --- dataset ----------------------------------------------------------------

void write_manifest(const std::vector<ManifestRow>& rows, const fs::path& path) {
  std::string out = "event_id,atmosphere,size_class,n_frames,ignition_frame\n";
  for (const auto& r : rows) {
    out += r.event_id + "," + std::string(to_string(r.condition.atmosphere)) + "," +
           std::string(to_string(r.condition.size_class)) + "," + std::to_string(r.n_frames) + "," +
           (r.ignition_frame ? std::to_string(*r.ignition_frame) : std::string()) + "\n";
  }
  write_file(path, out);
}

std::vector<ManifestRow> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "event_id,atmosphere,size_class,n_frames,ignition_frame") {
    throw SeqioError(path.string() + ": unexpected manifest header");
  }
  std::vector<ManifestRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    const auto ctx = path.string() + ":" + std::to_string(lineno);
    if (f.size() != 5) throw SeqioError(ctx + ": expected 5 columns");
    ManifestRow r;
    r.event_id = f[0];
    try {
      r.condition = {parse_atmosphere(f[1]), parse_size_class(f[2])};
    } catch (const std::invalid_argument& e) {
      throw SeqioError(ctx + ": " + e.what());
    }
    r.n_frames = parse_int(f[3], ctx);
    if (!f[4].empty()) r.ignition_frame = parse_int(f[4], ctx);
    rows.push_back(std::move(r));
  }
  return rows;
}

EventRecord DatasetLayout::load_event(const std::string& id,
                                      const std::map<std::string, GroundTruthLabel>* labels) const {
  EventRecord rec;
  rec.sequence = read_sequence(sequence_path(id));
  rec.track = read_track(track_path(id), FrameGeometry{rec.sequence.width, rec.sequence.height});
  if (labels) {
    if (auto it = labels->find(id); it != labels->end()) rec.label = it->second;
  }
  return rec;
}

}  // namespace ignitrace
