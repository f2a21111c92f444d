#include "ignitrace/labsvc.hpp"

#include <zlib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <regex>

#include "httplib.h"
#include "json.hpp"

namespace ignitrace::labsvc {

namespace fs = std::filesystem;
using json = nlohmann::json;

// --- rendering --------------------------------------------------------------

void Contrast::validate() const {
  if (!(p_lo >= 0.0 && p_lo <= p_hi && p_hi <= 100.0)) {
    throw std::invalid_argument("contrast percentiles must satisfy 0 <= plo <= phi <= 100");
  }
}

double percentile(std::vector<std::uint16_t> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile: no values");
  if (!(p >= 0.0 && p <= 100.0)) throw std::invalid_argument("percentile: p must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double t = pos - static_cast<double>(lo);
  return values[lo] + t * (static_cast<double>(values[hi]) - values[lo]);
}

Image<std::uint8_t> render_gray(const Frame& frame, const Contrast& contrast) {
  contrast.validate();
  Image<std::uint8_t> out(frame.width(), frame.height(), 128);
  if (frame.empty()) return out;
  const double lo = percentile(frame.data(), contrast.p_lo);
  const double hi = percentile(frame.data(), contrast.p_hi);
  if (!(hi > lo)) return out;
  const double scale = 255.0 / (hi - lo);
  const auto& in = frame.data();
  auto& o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    o[i] = static_cast<std::uint8_t>(std::clamp(std::round((in[i] - lo) * scale), 0.0, 255.0));
  }
  return out;
}

namespace {

void put_be32(std::string& s, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_chunk(std::string& png, const char* type, const std::string& data) {
  put_be32(png, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  png += body;
  put_be32(png, static_cast<std::uint32_t>(
                    crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

}  // namespace

std::string encode_png(const Image<std::uint8_t>& image) {
  if (image.width() <= 0 || image.height() <= 0) throw std::invalid_argument("encode_png: empty image");
  std::string raw;
  raw.reserve(image.size() + static_cast<std::size_t>(image.height()));
  for (int y = 0; y < image.height(); ++y) {
    raw.push_back('\0');
    const auto* row = image.data().data() + static_cast<std::size_t>(y) * static_cast<std::size_t>(image.width());
    raw.append(reinterpret_cast<const char*>(row), static_cast<std::size_t>(image.width()));
  }
  uLongf len = compressBound(static_cast<uLong>(raw.size()));
  std::string z(len, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &len, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 6) != Z_OK) {
    throw std::runtime_error("encode_png: compression failed");
  }
  z.resize(len);

  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_be32(ihdr, static_cast<std::uint32_t>(image.width()));
  put_be32(ihdr, static_cast<std::uint32_t>(image.height()));
  ihdr += std::string("\x08\x00\x00\x00\x00", 5);  // 8-bit grayscale, deflate, no filter, no interlace
  put_chunk(png, "IHDR", ihdr);
  put_chunk(png, "IDAT", z);
  put_chunk(png, "IEND", "");
  return png;
}

std::string render_frame_png(const FrameSequence& seq, int frame_index, const Contrast& contrast) {
  if (frame_index < 0 || static_cast<std::size_t>(frame_index) >= seq.frame_count()) {
    throw std::out_of_range("frame index out of range");
  }
  return encode_png(render_gray(seq.frames[static_cast<std::size_t>(frame_index)], contrast));
}

// --- label store ------------------------------------------------------------

LabelStore::LabelStore(fs::path path) : path_(std::move(path)) {
  if (fs::exists(path_)) {
    log_ = read_labels(path_);
    current_ = current_labels(log_);
  }
}

GroundTruthLabel LabelStore::append(const GroundTruthLabel& label) {
  const std::string line = label_to_json_line(label) + "\n";
  std::unique_lock lock(mu_);
  std::ofstream out(path_, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot open " + path_.string() + " for appending");
  out << line;
  out.flush();
  if (!out) throw IoError("append failed: " + path_.string());
  log_.push_back(label);
  current_[label.event_id] = label;
  return label;
}

std::map<std::string, GroundTruthLabel> LabelStore::current() const {
  std::shared_lock lock(mu_);
  return current_;
}

std::optional<GroundTruthLabel> LabelStore::current(const std::string& event_id) const {
  std::shared_lock lock(mu_);
  auto it = current_.find(event_id);
  if (it == current_.end()) return std::nullopt;
  return it->second;
}

std::vector<GroundTruthLabel> LabelStore::log() const {
  std::shared_lock lock(mu_);
  return log_;
}

std::size_t LabelStore::log_size() const {
  std::shared_lock lock(mu_);
  return log_.size();
}

// --- service ----------------------------------------------------------------

namespace {

HttpResponse error(int status, const std::string& message) {
  return {status, "application/json", json{{"error", message}}.dump()};
}

HttpResponse ok(const json& j) { return {200, "application/json", j.dump()}; }

json label_json(const GroundTruthLabel& l) { return json::parse(label_to_json_line(l)); }

std::int64_t system_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

}  // namespace

LabelService::LabelService(ServiceConfig cfg)
    : cfg_(std::move(cfg)), layout_(cfg_.dataset_dir), manifest_(layout_.manifest()), store_(cfg_.labels_path) {
  if (!cfg_.clock) cfg_.clock = system_ms;
  for (std::size_t i = 0; i < manifest_.size(); ++i) index_[manifest_[i].event_id] = i;
}

std::shared_ptr<const EventRecord> LabelService::event(const std::string& id) {
  {
    std::lock_guard lock(cache_mu_);
    for (auto& [key, rec] : cache_) {
      if (key == id) return rec;
    }
  }
  auto rec = std::make_shared<const EventRecord>(layout_.load_event(id));
  std::lock_guard lock(cache_mu_);
  cache_.emplace_back(id, rec);
  while (cache_.size() > std::max<std::size_t>(1, cfg_.cache_events)) cache_.erase(cache_.begin());
  return rec;
}

HttpResponse LabelService::handle(const std::string& method, const std::string& path,
                                  const std::map<std::string, std::string>& query, const std::string& body) {
  static const std::regex kMeta("^/events/([^/]+)/meta$");
  static const std::regex kFrame("^/events/([^/]+)/frames/([0-9]+)\\.png$");
  static const std::regex kTrack("^/events/([^/]+)/track$");
  static const std::regex kLabel("^/events/([^/]+)/label$");
  std::smatch m;

  try {
    if (method == "GET" && path == "/events") {
      const auto labels = store_.current();
      json arr = json::array();
      for (const auto& r : manifest_) {
        arr.push_back({{"event_id", r.event_id},
                       {"condition", to_string(r.condition)},
                       {"n_frames", r.n_frames},
                       {"labeled", labels.contains(r.event_id)}});
      }
      return ok(arr);
    }
    if (method == "GET" && path == "/labels") {
      std::string s;
      for (const auto& l : store_.log()) s += label_to_json_line(l) + "\n";
      return {200, "application/x-ndjson", s};
    }
    if (method == "GET" && path == "/progress") {
      const auto labels = store_.current();
      std::size_t n = 0;
      for (const auto& r : manifest_) n += labels.contains(r.event_id) ? 1 : 0;
      return ok({{"labeled", n}, {"total", manifest_.size()}});
    }

    auto known = [&](const std::string& id) { return index_.contains(id); };

    if (method == "GET" && std::regex_match(path, m, kMeta)) {
      const std::string id = m[1];
      if (!known(id)) return error(404, "unknown event " + id);
      const auto rec = event(id);
      const auto& s = rec->sequence;
      int n_valid = 0;
      std::optional<int> first, last;
      double diam = 0.0;
      for (const auto& e : rec->track.entries) {
        if (!e.valid) continue;
        ++n_valid;
        if (!first) first = e.frame_index;
        last = e.frame_index;
        diam += e.diameter_um;
      }
      json track{{"n_entries", rec->track.entries.size()},
                 {"n_valid", n_valid},
                 {"first_valid_frame", first ? json(*first) : json(nullptr)},
                 {"last_valid_frame", last ? json(*last) : json(nullptr)},
                 {"mean_diameter_um", n_valid ? json(diam / n_valid) : json(nullptr)}};
      const auto cur = store_.current(id);
      return ok({{"event_id", id},
                 {"condition", to_string(s.condition)},
                 {"atmosphere", to_string(s.condition.atmosphere)},
                 {"size_class", to_string(s.condition.size_class)},
                 {"width", s.width},
                 {"height", s.height},
                 {"n_frames", s.frame_count()},
                 {"frame_rate", s.frame_rate},
                 {"pixel_pitch_um", s.pixel_pitch_um},
                 {"track", track},
                 {"label", cur ? label_json(*cur) : json(nullptr)}});
    }
    if (method == "GET" && std::regex_match(path, m, kFrame)) {
      const std::string id = m[1];
      if (!known(id)) return error(404, "unknown event " + id);
      const auto rec = event(id);
      long k = 0;
      try {
        k = std::stol(m[2].str());
      } catch (const std::exception&) {
        return error(422, "frame index out of range");
      }
      if (k < 0 || static_cast<std::size_t>(k) >= rec->sequence.frame_count()) {
        return error(422, strprintf("frame %ld out of range [0, %zu)", k, rec->sequence.frame_count()));
      }
      Contrast c;
      try {
        if (auto it = query.find("plo"); it != query.end() && !it->second.empty()) c.p_lo = std::stod(it->second);
        if (auto it = query.find("phi"); it != query.end() && !it->second.empty()) c.p_hi = std::stod(it->second);
        c.validate();
      } catch (const std::exception&) {
        return error(422, "contrast percentiles must satisfy 0 <= plo <= phi <= 100");
      }
      return {200, "image/png", render_frame_png(rec->sequence, static_cast<int>(k), c)};
    }
    if (method == "GET" && std::regex_match(path, m, kTrack)) {
      const std::string id = m[1];
      if (!known(id)) return error(404, "unknown event " + id);
      json arr = json::array();
      for (const auto& e : event(id)->track.entries) {
        arr.push_back({{"frame", e.frame_index},
                       {"x_px", e.x},
                       {"y_px", e.y},
                       {"diameter_um", e.diameter_um},
                       {"valid", e.valid}});
      }
      return ok(arr);
    }
    if (method == "POST" && std::regex_match(path, m, kLabel)) {
      const std::string id = m[1];
      if (!known(id)) return error(404, "unknown event " + id);
      json j;
      try {
        j = json::parse(body);
      } catch (const json::exception&) {
        return error(422, "body is not valid JSON");
      }
      if (!j.is_object() || !j.contains("ignition_frame") || !j.contains("labeler")) {
        return error(422, "body must be {\"ignition_frame\": int|null, \"labeler\": string}");
      }
      const auto& f = j["ignition_frame"];
      const auto& who = j["labeler"];
      if (!who.is_string() || who.get<std::string>().empty()) return error(422, "labeler must be a non-empty string");
      GroundTruthLabel label{id, std::nullopt, who.get<std::string>(), cfg_.clock()};
      if (!f.is_null()) {
        if (!f.is_number_integer()) return error(422, "ignition_frame must be an integer or null");
        const auto v = f.get<std::int64_t>();
        const int n = manifest_[index_.at(id)].n_frames;
        if (v < 0 || v >= n) return error(422, strprintf("ignition_frame %lld out of range [0, %d)", (long long)v, n));
        label.ignition_frame = static_cast<int>(v);
      }
      return ok(label_json(store_.append(label)));
    }
    return error(404, "no route for " + method + " " + path);
  } catch (const SeqioError& e) {
    return error(500, e.what());
  }
}

// --- HTTP -------------------------------------------------------------------

struct HttpServer::Impl {
  LabelService& service;
  httplib::Server server;
  explicit Impl(LabelService& s) : service(s) {}
};

HttpServer::HttpServer(LabelService& service) : impl_(std::make_unique<Impl>(service)) {
  auto dispatch = [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query[k] = v;
    const auto r = impl_->service.handle(req.method, req.path, query, req.body);
    res.status = r.status;
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_content(r.body, r.content_type);
  };
  impl_->server.Get(".*", dispatch);
  impl_->server.Post(".*", dispatch);
  impl_->server.Options(".*", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace ignitrace::labsvc
