#pragma once

// Labeling service: frame rendering, append-only label store and the HTTP
// endpoints consumed by the labeling front end.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "ignitrace/seqio.hpp"

namespace ignitrace::labsvc {

// --- rendering --------------------------------------------------------------

struct Contrast {
  double p_lo = 1.0;
  double p_hi = 99.5;

  /// Throws std::invalid_argument unless 0 <= p_lo <= p_hi <= 100.
  void validate() const;
};

/// Linear interpolation between order statistics; p in [0, 100].
double percentile(std::vector<std::uint16_t> values, double p);

/// Counts mapped linearly from [percentile(p_lo), percentile(p_hi)] to
/// [0, 255], clipped. A degenerate range renders uniform 128.
Image<std::uint8_t> render_gray(const Frame& frame, const Contrast& contrast = {});

/// 8-bit grayscale PNG (single IDAT, no filtering).
std::string encode_png(const Image<std::uint8_t>& image);

std::string render_frame_png(const FrameSequence& seq, int frame_index, const Contrast& contrast = {});

// --- label store ------------------------------------------------------------

/// JSON-lines log; lines are only ever appended. The current label of an
/// event is its last log entry.
class LabelStore {
 public:
  /// Replays an existing log; a missing file starts an empty store.
  explicit LabelStore(std::filesystem::path path);

  const std::filesystem::path& path() const { return path_; }
  GroundTruthLabel append(const GroundTruthLabel& label);
  std::map<std::string, GroundTruthLabel> current() const;
  std::optional<GroundTruthLabel> current(const std::string& event_id) const;
  std::vector<GroundTruthLabel> log() const;
  std::size_t log_size() const;

 private:
  std::filesystem::path path_;
  mutable std::shared_mutex mu_;
  std::vector<GroundTruthLabel> log_;
  std::map<std::string, GroundTruthLabel> current_;
};

// --- service ----------------------------------------------------------------

struct HttpResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

struct ServiceConfig {
  std::filesystem::path dataset_dir;
  std::filesystem::path labels_path;
  std::size_t cache_events = 8;
  /// Milliseconds since the epoch; injectable for tests.
  std::function<std::int64_t()> clock;
};

class LabelService {
 public:
  /// Throws IoError / SeqioError when the dataset manifest is unreadable.
  explicit LabelService(ServiceConfig cfg);

  /// Transport-independent request handler. `path` excludes the query.
  HttpResponse handle(const std::string& method, const std::string& path,
                      const std::map<std::string, std::string>& query, const std::string& body);

  LabelStore& store() { return store_; }
  const std::vector<ManifestRow>& manifest() const { return manifest_; }

 private:
  std::shared_ptr<const EventRecord> event(const std::string& id);

  ServiceConfig cfg_;
  DatasetLayout layout_;
  std::vector<ManifestRow> manifest_;
  std::map<std::string, std::size_t> index_;
  LabelStore store_;
  std::mutex cache_mu_;
  std::vector<std::pair<std::string, std::shared_ptr<const EventRecord>>> cache_;
};

/// HTTP front of a LabelService.
class HttpServer {
 public:
  explicit HttpServer(LabelService& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds host:port (port 0 picks a free port) and returns the bound port.
  /// Throws std::runtime_error when the address is unavailable.
  int bind(const std::string& host, int port);
  /// Blocks until stop().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace ignitrace::labsvc
