#include "ignitrace/ignet.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "ignitrace/sas.hpp"
#include "json.hpp"

namespace ignitrace::ignet {

using json = nlohmann::json;

void ModelConfig::validate() const {
  if (roi_size <= 0 || roi_size % 2 != 0) throw std::invalid_argument("model: roi_size must be a positive even integer");
  if (stage_blocks.empty()) throw std::invalid_argument("model: stage_blocks must not be empty");
  for (auto b : stage_blocks) {
    if (b == 0) throw std::invalid_argument("model: every stage needs at least one block");
  }
  if (base_channels == 0) throw std::invalid_argument("model: base_channels must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("model: lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("model: momentum must be in [0,1)");
  if (weight_decay < 0.0) throw std::invalid_argument("model: weight_decay must be non-negative");
  if (batch_size < 2) throw std::invalid_argument("model: batch_size must be >= 2");
  if (epochs < 0) throw std::invalid_argument("model: epochs must be non-negative");
  if (folds < 2) throw std::invalid_argument("model: folds must be >= 2");
  if (!(decision_threshold > 0.0 && decision_threshold < 1.0)) {
    throw std::invalid_argument("model: decision_threshold must lie in (0,1)");
  }
  if (window < 1) throw std::invalid_argument("model: window must be >= 1");
}

nn::ResNetConfig ModelConfig::network() const {
  nn::ResNetConfig n;
  n.in_channels = 1;
  n.base_channels = base_channels;
  n.stage_blocks = stage_blocks;
  n.num_classes = 2;
  return n;
}

// --- samples ----------------------------------------------------------------

Image<double> normalized_frame(const Frame& frame) {
  return sas::normalize(frame, sas::estimate_background(frame));
}

Image<double> extract_roi(const Image<double>& frame, double cx, double cy, int roi_size) {
  if (roi_size <= 0 || roi_size % 2 != 0) throw std::invalid_argument("extract_roi: roi_size must be positive and even");
  const int x0 = static_cast<int>(std::lround(cx)) - roi_size / 2;
  const int y0 = static_cast<int>(std::lround(cy)) - roi_size / 2;
  Image<double> roi(roi_size, roi_size, 1.0);
  for (int y = 0; y < roi_size; ++y) {
    const int fy = y0 + y;
    if (fy < 0 || fy >= frame.height()) continue;
    for (int x = 0; x < roi_size; ++x) {
      const int fx = x0 + x;
      if (fx >= 0 && fx < frame.width()) roi.at(x, y) = frame.at(fx, fy);
    }
  }
  return roi;
}

namespace {

FrameSample make_sample(const EventRecord& rec, const TrackEntry& e, int label, int roi_size) {
  const auto roi = extract_roi(normalized_frame(rec.sequence.frames.at(static_cast<std::size_t>(e.frame_index))), e.x,
                               e.y, roi_size);
  FrameSample s;
  s.event_id = rec.sequence.event_id;
  s.frame_index = e.frame_index;
  s.label = label;
  s.roi.assign(roi.data().begin(), roi.data().end());
  return s;
}

std::vector<const TrackEntry*> subsample(std::vector<const TrackEntry*> v, std::size_t n, std::mt19937_64& rng) {
  if (v.size() <= n) return v;
  std::shuffle(v.begin(), v.end(), rng);
  v.resize(n);
  std::sort(v.begin(), v.end(), [](auto* a, auto* b) { return a->frame_index < b->frame_index; });
  return v;
}

}  // namespace

void append_event_samples(const EventRecord& rec, const ModelConfig& cfg, FrameDataset& out) {
  const std::string& id = rec.sequence.event_id;
  if (!rec.label) throw std::invalid_argument("build_frame_dataset: event " + id + " is not labeled");
  std::mt19937_64 rng(mix_seed(cfg.seed, hash_string(id)));
  const int n = static_cast<int>(rec.sequence.frame_count());
  std::vector<const TrackEntry*> neg, pos;
  if (const auto ign = rec.label->ignition_frame) {
    for (const auto& e : rec.track.entries) {
      if (!e.valid || e.frame_index < 0 || e.frame_index >= n) continue;
      if (e.frame_index >= *ign - cfg.window && e.frame_index < *ign) neg.push_back(&e);
      if (e.frame_index >= *ign && e.frame_index < *ign + cfg.window) pos.push_back(&e);
    }
    if (neg.empty() || pos.empty()) {
      out.warnings.push_back({id, neg.empty() ? "no tracked pre-ignition frame" : "no tracked post-ignition frame"});
      return;
    }
    const std::size_t parity = std::min(neg.size(), pos.size());
    neg = subsample(std::move(neg), parity, rng);
    pos = subsample(std::move(pos), parity, rng);
  } else {
    for (const auto& e : rec.track.entries) {
      if (e.valid && e.frame_index >= 0 && e.frame_index < n) neg.push_back(&e);
    }
    if (neg.empty()) {
      out.warnings.push_back({id, "no tracked frame"});
      return;
    }
    neg = subsample(std::move(neg), static_cast<std::size_t>(2 * cfg.window), rng);
  }
  for (auto* e : neg) out.samples.push_back(make_sample(rec, *e, 0, cfg.roi_size));
  for (auto* e : pos) out.samples.push_back(make_sample(rec, *e, 1, cfg.roi_size));
}

FrameDataset build_frame_dataset(std::span<const EventRecord> events, const ModelConfig& cfg) {
  cfg.validate();
  FrameDataset out;
  for (const auto& rec : events) append_event_samples(rec, cfg, out);
  return out;
}

// --- folds ------------------------------------------------------------------

std::vector<std::vector<std::string>> kfold_split(const std::vector<std::string>& ids, int k, std::uint64_t seed,
                                                  const std::vector<std::string>* strata) {
  if (k < 2) throw std::invalid_argument("kfold_split: k must be >= 2");
  if (ids.size() < static_cast<std::size_t>(k)) {
    throw std::invalid_argument("kfold_split: " + std::to_string(ids.size()) + " events for " + std::to_string(k) +
                                " folds");
  }
  if (strata && strata->size() != ids.size()) throw std::invalid_argument("kfold_split: strata size mismatch");
  if (std::set<std::string>(ids.begin(), ids.end()).size() != ids.size()) {
    throw std::invalid_argument("kfold_split: duplicate event ids");
  }
  std::map<std::string, std::vector<std::string>> groups;
  for (std::size_t i = 0; i < ids.size(); ++i) groups[strata ? (*strata)[i] : std::string()].push_back(ids[i]);

  std::mt19937_64 rng(mix_seed(seed, 0x6b666f6c64ULL));
  std::vector<std::string> order;
  for (auto& [_, members] : groups) {
    std::sort(members.begin(), members.end());
    std::shuffle(members.begin(), members.end(), rng);
    order.insert(order.end(), members.begin(), members.end());
  }
  std::vector<std::vector<std::string>> folds(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < order.size(); ++i) folds[i % static_cast<std::size_t>(k)].push_back(order[i]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

// --- training ---------------------------------------------------------------

namespace {

nn::Tensor<float> batch_tensor(const std::vector<const std::vector<float>*>& rois, int roi_size) {
  const auto r = static_cast<std::size_t>(roi_size);
  nn::Tensor<float> t({rois.size(), 1, r, r});
  float* dst = t.data();
  for (const auto* roi : rois) {
    for (float v : *roi) *dst++ = v - 1.0f;
  }
  return t;
}

nn::ResNet<float> fresh_network(const ModelConfig& cfg, std::size_t fold) {
  nn::ResNet<float> net(cfg.network(), mix_seed(cfg.seed, 0x1000 + fold));
  if (cfg.warm_start) {
    const auto ckpt = nn::read_checkpoint(*cfg.warm_start);
    std::vector<nn::NamedTensor> state;
    for (const auto& t : ckpt.tensors) {
      if (t.name.rfind("fold0/", 0) == 0) state.push_back({t.name.substr(6), t.shape, t.values});
    }
    net.import_state(state);
  }
  return net;
}

double accuracy(nn::ResNet<float>& net, const FrameDataset& data, const std::vector<std::size_t>& idx, int roi_size,
                int batch) {
  if (idx.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < idx.size(); b += static_cast<std::size_t>(batch)) {
    std::vector<const std::vector<float>*> rois;
    const std::size_t end = std::min(idx.size(), b + static_cast<std::size_t>(batch));
    for (std::size_t i = b; i < end; ++i) rois.push_back(&data.samples[idx[i]].roi);
    const auto p = net.predict_proba(batch_tensor(rois, roi_size));
    for (std::size_t i = b; i < end; ++i) {
      const int pred = p[(i - b) * 2 + 1] > 0.5f ? 1 : 0;
      if (pred == data.samples[idx[i]].label) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

}  // namespace

TrainedModel untrained_model(const ModelConfig& cfg) {
  cfg.validate();
  TrainedModel m;
  m.config = cfg;
  for (int f = 0; f < cfg.folds; ++f) m.folds.push_back(fresh_network(cfg, static_cast<std::size_t>(f)));
  m.validation_ids.resize(static_cast<std::size_t>(cfg.folds));
  m.curves.resize(static_cast<std::size_t>(cfg.folds));
  return m;
}

TrainedModel train_kfold(const FrameDataset& data, const std::vector<std::string>& event_ids,
                         const std::vector<std::string>& strata, const ModelConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  const auto k = static_cast<std::size_t>(cfg.folds);
  TrainedModel model;
  model.config = cfg;
  model.validation_ids = kfold_split(event_ids, cfg.folds, cfg.seed, strata.empty() ? nullptr : &strata);
  model.train_ids = event_ids;
  std::sort(model.train_ids.begin(), model.train_ids.end());

  std::map<std::string, std::size_t> fold_of;
  for (std::size_t f = 0; f < k; ++f) {
    for (const auto& id : model.validation_ids[f]) fold_of[id] = f;
  }
  for (const auto& s : data.samples) {
    if (!fold_of.contains(s.event_id)) {
      throw std::invalid_argument("train_kfold: sample from event " + s.event_id + " outside the training split");
    }
  }

  model.folds.resize(k);
  model.curves.resize(k);
  parallel_for(k, opts.threads, [&](std::size_t f) {
    nn::ResNet<float> net = fresh_network(cfg, f);
    std::vector<std::size_t> train_idx, val_idx;
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
      (fold_of.at(data.samples[i].event_id) == f ? val_idx : train_idx).push_back(i);
    }
    auto params = net.parameters();
    const nn::SgdOptions sgd{cfg.lr, cfg.momentum, cfg.weight_decay};
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x2000 + f));
    FoldCurve& curve = model.curves[f];
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::shuffle(train_idx.begin(), train_idx.end(), rng);
      double loss_sum = 0.0;
      std::size_t batches = 0;
      for (std::size_t b = 0; b + 2 <= train_idx.size(); b += bs) {
        const std::size_t end = std::min(train_idx.size(), b + bs);
        if (end - b < 2) break;
        std::vector<const std::vector<float>*> rois;
        std::vector<int> labels;
        for (std::size_t i = b; i < end; ++i) {
          rois.push_back(&data.samples[train_idx[i]].roi);
          labels.push_back(data.samples[train_idx[i]].label);
        }
        for (auto* p : params) p->zero_grad();
        nn::Tape<float> tape;
        const nn::Var x = tape.constant(batch_tensor(rois, cfg.roi_size));
        const auto res = nn::softmax_xent(tape, net.forward(tape, x, nn::Mode::Train), std::span<const int>(labels));
        const double loss = tape.value(res.loss)[0];
        if (!std::isfinite(loss)) {
          throw TrainingError(strprintf("training diverged: fold %zu epoch %d batch %zu loss %g", f, epoch, batches,
                                        loss));
        }
        tape.backward(res.loss);
        nn::sgd_step<float>(params, sgd);
        loss_sum += loss;
        ++batches;
      }
      curve.train_loss.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
      curve.val_accuracy.push_back(accuracy(net, data, val_idx, cfg.roi_size, cfg.batch_size));
      if (opts.log) {
        opts.log(strprintf("fold %zu epoch %d loss %.4f val_acc %.4f", f, epoch + 1, curve.train_loss.back(),
                           curve.val_accuracy.back()));
      }
    }
    model.folds[f] = std::move(net);
  });
  return model;
}

TrainedModel train_kfold(std::span<const EventRecord> events, const ModelConfig& cfg, const TrainOptions& opts) {
  const FrameDataset data = build_frame_dataset(events, cfg);
  std::vector<std::string> ids, strata;
  for (const auto& e : events) {
    ids.push_back(e.sequence.event_id);
    strata.push_back(to_string(e.sequence.condition));
  }
  return train_kfold(data, ids, strata, cfg, opts);
}

// --- prediction -------------------------------------------------------------

std::vector<double> predict_batch(TrainedModel& model, std::span<const Image<double>> rois) {
  if (model.folds.empty()) throw std::logic_error("predict: model has no folds");
  if (rois.empty()) return {};
  const int r = model.config.roi_size;
  std::vector<std::vector<float>> buf;
  buf.reserve(rois.size());
  for (const auto& roi : rois) {
    if (roi.width() != r || roi.height() != r) {
      throw std::invalid_argument(strprintf("predict: RoI is %dx%d, model expects %dx%d", roi.width(), roi.height(), r, r));
    }
    buf.emplace_back(roi.data().begin(), roi.data().end());
  }
  std::vector<const std::vector<float>*> ptrs;
  for (const auto& b : buf) ptrs.push_back(&b);
  const auto input = batch_tensor(ptrs, r);
  std::vector<double> mean(rois.size(), 0.0);
  for (auto& net : model.folds) {
    const auto p = net.predict_proba(input);
    for (std::size_t i = 0; i < rois.size(); ++i) mean[i] += p[i * 2 + 1];
  }
  for (auto& m : mean) m /= static_cast<double>(model.folds.size());
  return mean;
}

double predict_frame(TrainedModel& model, const Image<double>& roi) {
  return predict_batch(model, std::span<const Image<double>>(&roi, 1)).front();
}

std::optional<std::size_t> first_crossing(std::span<const double> probs, double threshold) {
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > threshold) return i;
  }
  return std::nullopt;
}

namespace {

constexpr std::size_t kPredictChunk = 16;

// Calls fn(frames, probabilities) chunk by chunk until it returns false.
void for_each_chunk(TrainedModel& model, const EventRecord& rec,
                    const std::function<bool(const std::vector<int>&, const std::vector<double>&)>& fn) {
  const int n = static_cast<int>(rec.sequence.frame_count());
  std::vector<int> frames;
  std::vector<Image<double>> rois;
  auto flush = [&] {
    if (frames.empty()) return true;
    const auto p = predict_batch(model, rois);
    const bool more = fn(frames, p);
    frames.clear();
    rois.clear();
    return more;
  };
  for (int k = 0; k < n; ++k) {
    const TrackEntry* e = rec.track.valid_at(k);
    if (!e) continue;
    frames.push_back(k);
    rois.push_back(extract_roi(normalized_frame(rec.sequence.frames[static_cast<std::size_t>(k)]), e->x, e->y,
                               model.config.roi_size));
    if (frames.size() == kPredictChunk && !flush()) return;
  }
  flush();
}

}  // namespace

std::optional<int> predict_sequence_ignition(TrainedModel& model, const EventRecord& rec) {
  std::optional<int> found;
  for_each_chunk(model, rec, [&](const std::vector<int>& frames, const std::vector<double>& p) {
    if (const auto i = first_crossing(p, model.config.decision_threshold)) {
      found = frames[*i];
      return false;
    }
    return true;
  });
  return found;
}

std::vector<std::pair<int, double>> sequence_probabilities(TrainedModel& model, const EventRecord& rec) {
  std::vector<std::pair<int, double>> out;
  for_each_chunk(model, rec, [&](const std::vector<int>& frames, const std::vector<double>& p) {
    for (std::size_t i = 0; i < frames.size(); ++i) out.emplace_back(frames[i], p[i]);
    return true;
  });
  return out;
}

Image<double> sliding_prediction_map(TrainedModel& model, const Image<double>& frame, int stride) {
  const int r = model.config.roi_size;
  if (stride <= 0) throw std::invalid_argument("sliding_prediction_map: stride must be positive");
  if (frame.width() < r || frame.height() < r) {
    throw std::invalid_argument("sliding_prediction_map: frame smaller than the RoI");
  }
  const int gw = (frame.width() - r) / stride + 1;
  const int gh = (frame.height() - r) / stride + 1;
  Image<double> grid(gw, gh);
  for (int gy = 0; gy < gh; ++gy) {
    std::vector<Image<double>> rois;
    for (int gx = 0; gx < gw; ++gx) {
      rois.push_back(extract_roi(frame, gx * stride + r / 2, gy * stride + r / 2, r));
    }
    const auto p = predict_batch(model, rois);
    for (int gx = 0; gx < gw; ++gx) grid.at(gx, gy) = p[static_cast<std::size_t>(gx)];
  }
  return grid;
}

// --- persistence ------------------------------------------------------------

namespace {

json config_json(const ModelConfig& c) {
  return {{"roi_size", c.roi_size},
          {"stage_blocks", c.stage_blocks},
          {"base_channels", c.base_channels},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"folds", c.folds},
          {"decision_threshold", c.decision_threshold},
          {"window", c.window},
          {"seed", c.seed},
          {"warm_start", c.warm_start ? json(c.warm_start->generic_string()) : json(nullptr)}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.roi_size = j.at("roi_size").get<int>();
  c.stage_blocks = j.at("stage_blocks").get<std::vector<std::size_t>>();
  c.base_channels = j.at("base_channels").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.folds = j.at("folds").get<int>();
  c.decision_threshold = j.at("decision_threshold").get<double>();
  c.window = j.at("window").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  if (!j.at("warm_start").is_null()) c.warm_start = j.at("warm_start").get<std::string>();
  c.validate();
  return c;
}

}  // namespace

void save_model(const TrainedModel& model, const std::filesystem::path& path) {
  json meta;
  meta["format"] = "ignitrace-model";
  meta["config"] = config_json(model.config);
  meta["validation_ids"] = model.validation_ids;
  meta["train_ids"] = model.train_ids;
  json curves = json::array();
  for (const auto& c : model.curves) curves.push_back({{"train_loss", c.train_loss}, {"val_accuracy", c.val_accuracy}});
  meta["curves"] = curves;

  nn::Checkpoint ckpt;
  ckpt.metadata = meta.dump();
  for (std::size_t f = 0; f < model.folds.size(); ++f) {
    for (auto& t : model.folds[f].export_state()) {
      t.name = "fold" + std::to_string(f) + "/" + t.name;
      ckpt.tensors.push_back(std::move(t));
    }
  }
  nn::write_checkpoint(ckpt, path);
}

TrainedModel load_model(const std::filesystem::path& path) {
  const auto ckpt = nn::read_checkpoint(path);
  json meta;
  try {
    meta = json::parse(ckpt.metadata);
  } catch (const json::exception& e) {
    throw nn::CheckpointError(path.string() + ": metadata is not valid JSON: " + e.what());
  }
  if (meta.value("format", "") != "ignitrace-model") {
    throw nn::CheckpointError(path.string() + ": not an ignitrace model checkpoint");
  }
  TrainedModel m;
  try {
    m.config = config_from_json(meta.at("config"));
    m.validation_ids = meta.at("validation_ids").get<std::vector<std::vector<std::string>>>();
    m.train_ids = meta.at("train_ids").get<std::vector<std::string>>();
    for (const auto& c : meta.at("curves")) {
      m.curves.push_back({c.at("train_loss").get<std::vector<double>>(), c.at("val_accuracy").get<std::vector<double>>()});
    }
  } catch (const json::exception& e) {
    throw nn::CheckpointError(path.string() + ": bad metadata: " + e.what());
  }
  std::vector<std::vector<nn::NamedTensor>> per_fold(static_cast<std::size_t>(m.config.folds));
  for (const auto& t : ckpt.tensors) {
    const auto slash = t.name.find('/');
    if (t.name.rfind("fold", 0) != 0 || slash == std::string::npos) {
      throw nn::CheckpointError(path.string() + ": unexpected tensor " + t.name);
    }
    const auto f = std::stoul(t.name.substr(4, slash - 4));
    if (f >= per_fold.size()) throw nn::CheckpointError(path.string() + ": tensor for unknown fold " + t.name);
    per_fold[f].push_back({t.name.substr(slash + 1), t.shape, t.values});
  }
  for (const auto& state : per_fold) {
    nn::ResNet<float> net(m.config.network(), 0);
    net.import_state(state);
    m.folds.push_back(std::move(net));
  }
  return m;
}

}  // namespace ignitrace::ignet
