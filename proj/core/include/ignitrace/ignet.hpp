#pragma once

// Learned ignition detector: RoI extraction around the tracked particle,
// per-frame binary classification with a residual network, k-fold training
// and first-crossing sequence prediction.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ignitrace/common.hpp"
#include "ignitrace/nncore.hpp"
#include "ignitrace/seqio.hpp"

namespace ignitrace::ignet {

struct ModelConfig {
  int roi_size = 32;
  std::vector<std::size_t> stage_blocks{2, 2, 2, 2};
  std::size_t base_channels = 16;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 64;
  int epochs = 10;
  int folds = 5;
  double decision_threshold = 0.5;
  int window = 15;  // frames taken on each side of the ignition frame
  std::uint64_t seed = 0;
  /// Optional checkpoint whose first fold initializes every fold model.
  std::optional<std::filesystem::path> warm_start;

  /// Throws std::invalid_argument.
  void validate() const;
  nn::ResNetConfig network() const;
};

struct FrameSample {
  std::string event_id;
  int frame_index = 0;
  std::vector<float> roi;  // roi_size * roi_size normalized intensities, row-major
  int label = 0;           // 0 not ignited, 1 ignited
};

struct SampleWarning {
  std::string event_id;
  std::string reason;
};

struct FrameDataset {
  std::vector<FrameSample> samples;
  std::vector<SampleWarning> warnings;
};

/// Frame divided by its median count.
Image<double> normalized_frame(const Frame& frame);

/// roi_size x roi_size window whose pixel (roi_size/2, roi_size/2) is the
/// rounded centre. Pixels outside the frame are 1.0.
Image<double> extract_roi(const Image<double>& frame, double cx, double cy, int roi_size);

/// Samples of one event, appended to `out`. The event must be labeled.
void append_event_samples(const EventRecord& rec, const ModelConfig& cfg, FrameDataset& out);
FrameDataset build_frame_dataset(std::span<const EventRecord> events, const ModelConfig& cfg);

/// k disjoint validation folds. With strata, events of each stratum are
/// dealt round-robin so every fold sees every stratum where possible.
std::vector<std::vector<std::string>> kfold_split(const std::vector<std::string>& ids, int k, std::uint64_t seed,
                                                  const std::vector<std::string>* strata = nullptr);

struct FoldCurve {
  std::vector<double> train_loss;
  std::vector<double> val_accuracy;
};

struct TrainedModel {
  ModelConfig config;
  std::vector<nn::ResNet<float>> folds;
  std::vector<std::vector<std::string>> validation_ids;  // per fold
  std::vector<std::string> train_ids;                    // every event used, sorted
  std::vector<FoldCurve> curves;

  bool empty() const { return folds.empty(); }
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Loads labeled events by id; called once per event per build.
using EventLoader = std::function<EventRecord(const std::string& id)>;

struct TrainOptions {
  int threads = 1;  // folds trained concurrently
  std::function<void(const std::string&)> log;
};

TrainedModel train_kfold(const FrameDataset& data, const std::vector<std::string>& event_ids,
                         const std::vector<std::string>& strata, const ModelConfig& cfg,
                         const TrainOptions& opts = {});
TrainedModel train_kfold(std::span<const EventRecord> events, const ModelConfig& cfg, const TrainOptions& opts = {});

/// Model with k untrained (initialization-only) folds.
TrainedModel untrained_model(const ModelConfig& cfg);

/// Mean fold probability of "ignited" for each RoI.
std::vector<double> predict_batch(TrainedModel& model, std::span<const Image<double>> rois);
double predict_frame(TrainedModel& model, const Image<double>& roi);

/// Index of the first probability strictly above threshold.
std::optional<std::size_t> first_crossing(std::span<const double> probs, double threshold);

/// Frames are visited in temporal order; frames without a valid track entry
/// are skipped. nullopt when no frame crosses the threshold.
std::optional<int> predict_sequence_ignition(TrainedModel& model, const EventRecord& rec);

/// Per-frame probabilities of every tracked frame (frame index, p).
std::vector<std::pair<int, double>> sequence_probabilities(TrainedModel& model, const EventRecord& rec);

/// Probability at every stride-spaced RoI centre of a normalized frame.
Image<double> sliding_prediction_map(TrainedModel& model, const Image<double>& frame, int stride);

void save_model(const TrainedModel& model, const std::filesystem::path& path);
TrainedModel load_model(const std::filesystem::path& path);

}  // namespace ignitrace::ignet
