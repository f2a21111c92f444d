#include "ignitrace/evalstats.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace ignitrace::eval {

namespace fs = std::filesystem;

double reference_frame(const ParticleTrack& track, double y_ref_px) {
  const TrackEntry* prev = nullptr;
  for (const auto& e : track.entries) {
    if (!e.valid) continue;
    if (e.y == y_ref_px) return e.frame_index;
    if (prev && ((prev->y < y_ref_px && e.y > y_ref_px) || (prev->y > y_ref_px && e.y < y_ref_px))) {
      const double t = (y_ref_px - prev->y) / (e.y - prev->y);
      return prev->frame_index + t * (e.frame_index - prev->frame_index);
    }
    prev = &e;
  }
  throw EvalError("event " + track.event_id + ": track never crosses y_ref = " + strprintf("%g", y_ref_px) + " px");
}

double ignition_delay_ms(double ignition_frame, double ref_frame, double frame_rate_hz) {
  if (!(frame_rate_hz > 0.0)) throw std::invalid_argument("ignition_delay_ms: frame rate must be positive");
  return (ignition_frame - ref_frame) / frame_rate_hz * 1000.0;
}

// --- detections CSV ---------------------------------------------------------

namespace {

constexpr std::string_view kDetectionsHeader = "event_id,detector,ignition_frame";

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out(1);
  for (char c : line) {
    if (c == ',') {
      out.emplace_back();
    } else if (c != '\r') {
      out.back().push_back(c);
    }
  }
  return out;
}

std::string opt(const std::optional<double>& v) { return v ? strprintf("%.6f", *v) : std::string(); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

void write_detections(const std::vector<Detection>& rows, const fs::path& path) {
  std::string s(kDetectionsHeader);
  s += '\n';
  for (const auto& r : rows) {
    if (r.event_id.find(',') != std::string::npos || r.detector.find(',') != std::string::npos) {
      throw std::invalid_argument("write_detections: commas are not allowed in ids");
    }
    s += r.event_id + "," + r.detector + "," + (r.ignition_frame ? std::to_string(*r.ignition_frame) : "") + "\n";
  }
  write_text(path, s);
}

std::vector<Detection> read_detections(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) return {};
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kDetectionsHeader) throw EvalError(path.string() + ": unexpected detections header '" + line + "'");
  std::vector<Detection> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split(line);
    const auto ctx = path.string() + ":" + std::to_string(lineno);
    if (f.size() != 3) throw EvalError(ctx + ": expected 3 columns");
    if (f[0].empty() || f[1].empty()) throw EvalError(ctx + ": empty event id or detector");
    Detection d{f[0], f[1], std::nullopt};
    if (!f[2].empty()) {
      int v = 0;
      const auto [ptr, ec] = std::from_chars(f[2].data(), f[2].data() + f[2].size(), v);
      if (ec != std::errc() || ptr != f[2].data() + f[2].size() || v < 0) {
        throw EvalError(ctx + ": bad ignition frame '" + f[2] + "'");
      }
      d.ignition_frame = v;
    }
    rows.push_back(std::move(d));
  }
  return rows;
}

// --- statistics -------------------------------------------------------------

std::vector<ConditionStats> condition_stats(std::span<const ITDRecord> records, Grouping grouping,
                                            std::span<const Exclusion> exclusions) {
  struct Acc {
    std::vector<double> values;
    int absent = 0;
  };
  // key: detector, size class, atmosphere index (7 = pooled)
  std::map<std::tuple<std::string, int, int>, Acc> acc;
  const bool per = grouping != Grouping::PooledAtmospheres;
  const bool pooled = grouping != Grouping::PerAtmosphere;
  auto keys = [&](const std::string& det, const Condition& c) {
    std::vector<std::tuple<std::string, int, int>> k;
    if (per) k.emplace_back(det, static_cast<int>(c.size_class), static_cast<int>(c.atmosphere));
    if (pooled) k.emplace_back(det, static_cast<int>(c.size_class), 7);
    return k;
  };
  for (const auto& r : records) {
    if (!std::isfinite(r.itd_ms)) throw EvalError("condition_stats: non-finite ITD for " + r.event_id);
    for (const auto& k : keys(r.detector, r.condition)) acc[k].values.push_back(r.itd_ms);
  }
  for (const auto& x : exclusions) {
    for (const auto& k : keys(x.detector, x.condition)) ++acc[k].absent;
  }
  std::vector<ConditionStats> out;
  for (const auto& [key, a] : acc) {
    const auto& [det, size, atm] = key;
    ConditionStats s;
    s.condition = atm == 7 ? std::string(kPooled) : std::string(to_string(static_cast<Atmosphere>(atm)));
    s.size_class = static_cast<SizeClass>(size);
    s.detector = det;
    s.n = static_cast<int>(a.values.size());
    s.absent_count = a.absent;
    if (s.n > 0) {
      double sum = 0.0;
      for (double v : a.values) sum += v;
      s.mu_ms = sum / s.n;
    }
    if (s.n >= 2) {
      double sq = 0.0;
      for (double v : a.values) sq += (v - s.mu_ms) * (v - s.mu_ms);
      s.sigma_ms = std::sqrt(sq / (s.n - 1));
    }
    out.push_back(std::move(s));
  }
  return out;
}

NormalCurve normal_summary(double mu, double sigma, double lo, double hi, int points) {
  if (!(sigma > 0.0)) throw std::invalid_argument("normal_summary: sigma must be positive");
  if (!(hi > lo) || points < 2) throw std::invalid_argument("normal_summary: need hi > lo and >= 2 points");
  NormalCurve c;
  const double step = (hi - lo) / (points - 1);
  const double norm = 1.0 / (sigma * std::sqrt(2.0 * std::numbers::pi));
  for (int i = 0; i < points; ++i) {
    const double x = lo + step * i;
    const double z = (x - mu) / sigma;
    c.x.push_back(x);
    c.density.push_back(norm * std::exp(-0.5 * z * z));
  }
  return c;
}

double trapezoid(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("trapezoid: size mismatch");
  double s = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) s += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
  return s;
}

const ConditionStats* find_stats(const std::vector<ConditionStats>& stats, std::string_view condition, SizeClass size,
                                 std::string_view detector) {
  for (const auto& s : stats) {
    if (s.condition == condition && s.size_class == size && s.detector == detector) return &s;
  }
  return nullptr;
}

// --- report -----------------------------------------------------------------

namespace {

struct ItdRow {
  std::string event_id;
  Condition condition;
  int gt_frame = 0;
  std::optional<int> detected;
  double ref = 0.0;
  double gt_delay = 0.0;
  std::optional<double> det_delay;
  std::optional<double> itd;
};

std::string svg_histogram(const std::string& size, const std::vector<std::string>& detectors,
                          const std::map<std::string, std::vector<double>>& values,
                          const std::vector<ConditionStats>& stats) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"};
  constexpr double kW = 640, kH = 400, kL = 60, kR = 20, kT = 40, kB = 50;
  double lo = -1.0, hi = 1.0;
  for (const auto& [_, v] : values) {
    for (double x : v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }
  lo = std::floor(lo * 2.0) / 2.0 - 0.5;
  hi = std::ceil(hi * 2.0) / 2.0 + 0.5;
  const double bin = std::max(0.1, std::ceil((hi - lo) / 60.0 * 10.0) / 10.0);
  const int nbins = static_cast<int>(std::ceil((hi - lo) / bin));
  hi = lo + nbins * bin;

  std::map<std::string, std::vector<double>> dens;
  std::map<std::string, NormalCurve> curves;
  double ymax = 0.0;
  for (const auto& d : detectors) {
    auto& h = dens[d];
    h.assign(static_cast<std::size_t>(nbins), 0.0);
    const auto it = values.find(d);
    if (it == values.end() || it->second.empty()) continue;
    for (double x : it->second) {
      const int b = std::clamp(static_cast<int>(std::floor((x - lo) / bin)), 0, nbins - 1);
      h[static_cast<std::size_t>(b)] += 1.0;
    }
    for (auto& c : h) {
      c /= static_cast<double>(it->second.size()) * bin;
      ymax = std::max(ymax, c);
    }
    const auto* s = find_stats(stats, kPooled, parse_size_class(size), d);
    if (s && s->sigma_ms && *s->sigma_ms > 0.0) {
      curves[d] = normal_summary(s->mu_ms, *s->sigma_ms, lo, hi, 401);
      for (double y : curves[d].density) ymax = std::max(ymax, y);
    }
  }
  if (ymax <= 0.0) ymax = 1.0;
  ymax *= 1.1;
  auto px = [&](double x) { return kL + (x - lo) / (hi - lo) * (kW - kL - kR); };
  auto py = [&](double y) { return kH - kB - y / ymax * (kH - kT - kB); };

  std::ostringstream o;
  o << strprintf("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n",
                 kW, kH, kW, kH);
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << strprintf("<text x=\"%.1f\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">"
                 "Ignition time difference, size class %s</text>\n",
                 kW / 2, size.c_str());
  o << strprintf("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", kL, py(0), kW - kR, py(0));
  o << strprintf("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", kL, py(0), kL, kT);
  for (double t = std::ceil(lo); t <= hi + 1e-9; t += 1.0) {
    o << strprintf("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", px(t), py(0), px(t),
                   py(0) + 5);
    o << strprintf("<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">"
                   "%.0f</text>\n",
                   px(t), py(0) + 18, t);
  }
  o << strprintf("<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">"
                 "ITD [ms]</text>\n",
                 kW / 2, kH - 10);
  o << strprintf("<text x=\"16\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" "
                 "transform=\"rotate(-90 16 %.1f)\">relative probability [1/ms]</text>\n",
                 kH / 2, kH / 2);
  std::size_t ci = 0;
  for (const auto& d : detectors) {
    const char* color = kColors[ci++ % std::size(kColors)];
    const auto& h = dens[d];
    for (int b = 0; b < nbins; ++b) {
      const double v = h[static_cast<std::size_t>(b)];
      if (v <= 0.0) continue;
      o << strprintf("<rect x=\"%.2f\" y=\"%.2f\" width=\"%.2f\" height=\"%.2f\" fill=\"%s\" fill-opacity=\"0.35\"/>\n",
                     px(lo + b * bin), py(v), px(lo + (b + 1) * bin) - px(lo + b * bin), py(0) - py(v), color);
    }
    if (auto it = curves.find(d); it != curves.end()) {
      o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      for (std::size_t i = 0; i < it->second.x.size(); ++i) {
        o << strprintf("%s%.2f,%.2f", i ? " " : "", px(it->second.x[i]), py(it->second.density[i]));
      }
      o << "\"/>\n";
    }
    const auto* s = find_stats(stats, kPooled, parse_size_class(size), d);
    const double ly = kT + 16.0 * static_cast<double>(ci);
    o << strprintf("<rect x=\"%.1f\" y=\"%.1f\" width=\"12\" height=\"10\" fill=\"%s\"/>\n", kW - kR - 230, ly - 9,
                   color);
    o << strprintf("<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"11\">%s",
                   kW - kR - 212, ly, d.c_str());
    if (s && s->n > 0) {
      o << strprintf(" &#956;=%.3f", s->mu_ms);
      if (s->sigma_ms) o << strprintf(" &#963;=%.3f", *s->sigma_ms);
    }
    o << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace

namespace {

Report build(const ReportInput& input, std::map<std::string, std::vector<ItdRow>>* rows_out) {
  Report rep;
  std::map<std::string, std::vector<const Detection*>> by_det;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& d : input.detections) {
    if (!seen.insert({d.detector, d.event_id}).second) {
      rep.warnings.push_back("duplicate detection for event " + d.event_id + " by " + d.detector + "; first row kept");
      continue;
    }
    by_det[d.detector].push_back(&d);
  }
  if (input.detections.empty()) rep.warnings.push_back("no detections supplied; report is empty");

  std::map<std::string, double> ref_cache;
  auto ref_of = [&](const std::string& id, const EventInfo& ev) {
    if (auto it = ref_cache.find(id); it != ref_cache.end()) return it->second;
    if (!(ev.pixel_pitch_um > 0.0)) throw EvalError("event " + id + ": pixel pitch unknown");
    const double r = reference_frame(ev.track, input.y_ref_mm * 1000.0 / ev.pixel_pitch_um);
    ref_cache[id] = r;
    return r;
  };

  for (auto& [det, list] : by_det) {
    std::sort(list.begin(), list.end(), [](auto* a, auto* b) { return a->event_id < b->event_id; });
    std::vector<ItdRow> rows;
    int non_igniting = 0, false_detections = 0;
    std::set<std::string> covered;
    for (const Detection* d : list) {
      covered.insert(d->event_id);
      const auto lab = input.labels.find(d->event_id);
      const auto ev = input.events.find(d->event_id);
      if (lab == input.labels.end()) {
        rep.warnings.push_back("detector " + det + ": event " + d->event_id + " has no ground-truth label");
        continue;
      }
      if (ev == input.events.end()) {
        rep.warnings.push_back("detector " + det + ": event " + d->event_id + " has no track");
        continue;
      }
      if (!lab->second.ignition_frame) {
        ++non_igniting;
        if (d->ignition_frame) ++false_detections;
        continue;
      }
      double ref = 0.0;
      try {
        ref = ref_of(d->event_id, ev->second);
      } catch (const EvalError& e) {
        rep.warnings.push_back(std::string("detector ") + det + ": " + e.what());
        continue;
      }
      ItdRow r;
      r.event_id = d->event_id;
      r.condition = ev->second.condition;
      r.gt_frame = *lab->second.ignition_frame;
      r.detected = d->ignition_frame;
      r.ref = ref;
      r.gt_delay = ignition_delay_ms(r.gt_frame, ref, ev->second.frame_rate);
      if (r.detected) {
        r.det_delay = ignition_delay_ms(*r.detected, ref, ev->second.frame_rate);
        r.itd = itd(*r.det_delay, r.gt_delay);
        rep.records.push_back({r.event_id, det, r.condition, *r.itd});
        if (*r.det_delay < 0.0) {
          rep.warnings.push_back("detector " + det + ": event " + r.event_id + " detected before the reference");
        }
      } else {
        rep.exclusions.push_back({r.event_id, det, r.condition});
      }
      rows.push_back(std::move(r));
    }
    for (const auto& [id, lab] : input.labels) {
      if (!covered.contains(id)) rep.warnings.push_back("detector " + det + ": no detection for labeled event " + id);
    }
    if (non_igniting) {
      rep.warnings.push_back(strprintf("detector %s: %d non-igniting events skipped (%d with a detection)", det.c_str(),
                                       non_igniting, false_detections));
    }
    if (rows_out) (*rows_out)[det] = std::move(rows);
  }

  rep.stats = condition_stats(rep.records, Grouping::Both, rep.exclusions);
  for (auto size : kSizeClasses) {
    std::vector<SummaryRow> rows;
    for (const auto& s : rep.stats) {
      if (s.condition != kPooled || s.size_class != size) continue;
      rows.push_back({0, std::string(to_string(size)), s.detector, s.n, s.mu_ms, s.sigma_ms, s.absent_count});
    }
    std::stable_sort(rows.begin(), rows.end(), [](const SummaryRow& a, const SummaryRow& b) {
      if (std::abs(a.mu_ms) != std::abs(b.mu_ms)) return std::abs(a.mu_ms) < std::abs(b.mu_ms);
      return a.sigma_ms.value_or(INFINITY) < b.sigma_ms.value_or(INFINITY);
    });
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i].rank = static_cast<int>(i) + 1;
    rep.summary.insert(rep.summary.end(), rows.begin(), rows.end());
  }
  return rep;
}

}  // namespace

Report build_report(const ReportInput& input) { return build(input, nullptr); }

Report compare_report(const ReportInput& input, const fs::path& out_dir) {
  std::map<std::string, std::vector<ItdRow>> rows;
  Report rep = build(input, &rows);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  std::vector<std::string> detectors;
  for (const auto& [det, r] : rows) {
    detectors.push_back(det);
    std::string s = "event_id,condition,size_class,detector,gt_frame,detected_frame,ref_frame,gt_delay_ms,"
                    "detected_delay_ms,itd_ms\n";
    for (const auto& x : r) {
      s += x.event_id + "," + std::string(to_string(x.condition.atmosphere)) + "," +
           std::string(to_string(x.condition.size_class)) + "," + det + "," + std::to_string(x.gt_frame) + "," +
           (x.detected ? std::to_string(*x.detected) : "") + "," + strprintf("%.6f", x.ref) + "," +
           strprintf("%.6f", x.gt_delay) + "," + opt(x.det_delay) + "," + opt(x.itd) + "\n";
    }
    write_text(out_dir / ("itd_" + det + ".csv"), s);
  }

  std::string st = "condition,size_class,detector,n,mu_ms,sigma_ms,absent_count\n";
  for (const auto& s : rep.stats) {
    st += s.condition + "," + std::string(to_string(s.size_class)) + "," + s.detector + "," + std::to_string(s.n) +
          "," + (s.n > 0 ? strprintf("%.6f", s.mu_ms) : "") + "," + opt(s.sigma_ms) + "," +
          std::to_string(s.absent_count) + "\n";
  }
  write_text(out_dir / "stats.csv", st);

  std::string sm = "rank,size_class,detector,n,mu_ms,sigma_ms,absent_count\n";
  for (const auto& s : rep.summary) {
    sm += std::to_string(s.rank) + "," + s.size_class + "," + s.detector + "," + std::to_string(s.n) + "," +
          (s.n > 0 ? strprintf("%.6f", s.mu_ms) : "") + "," + opt(s.sigma_ms) + "," + std::to_string(s.absent_count) +
          "\n";
  }
  write_text(out_dir / "summary.csv", sm);

  for (auto size : kSizeClasses) {
    std::map<std::string, std::vector<double>> values;
    for (const auto& r : rep.records) {
      if (r.condition.size_class == size) values[r.detector].push_back(r.itd_ms);
    }
    const std::string name(to_string(size));
    write_text(out_dir / ("hist_" + name + ".svg"), svg_histogram(name, detectors, values, rep.stats));
  }

  std::string w;
  for (const auto& line : rep.warnings) w += line + "\n";
  write_text(out_dir / "warnings.txt", w);
  return rep;
}

}  // namespace ignitrace::eval
