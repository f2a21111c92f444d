#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "ignitrace/ignet.hpp"
#include "ignitrace/synthgen.hpp"
#include "support.hpp"

using namespace ignitrace;
using namespace ignitrace::ignet;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.base_channels = 4;
  c.stage_blocks = {1, 1};
  c.epochs = 4;
  c.folds = 2;
  c.batch_size = 32;
  c.lr = 0.05;
  c.seed = 5;
  return c;
}

std::vector<EventRecord> events(int per_condition, std::uint64_t seed) {
  std::vector<EventRecord> out;
  for (const auto& s : synth::dataset_specs(synth::ConditionTable::calibrated(), synth::uniform_census(per_condition), seed)) {
    out.push_back(synth::render_event(s));
  }
  return out;
}

TrainedModel& trained() {
  static TrainedModel model = [] {
    const auto ev = events(3, 21);
    return train_kfold(std::span<const EventRecord>(ev), small_config());
  }();
  return model;
}

EventRecord tracked_event(int ignition, int n, std::vector<int> tracked) {
  EventRecord r;
  r.sequence.event_id = "e";
  r.sequence.width = 40;
  r.sequence.height = 40;
  r.sequence.pixel_pitch_um = 197.9;
  for (int k = 0; k < n; ++k) r.sequence.frames.emplace_back(40, 40, 1000);
  r.track.event_id = "e";
  for (int k = 0; k < n; ++k) {
    const bool on = std::find(tracked.begin(), tracked.end(), k) != tracked.end();
    r.track.entries.push_back({k, 20.0, 20.0, 100.0, on});
  }
  r.label = GroundTruthLabel{"e", ignition, "t", 0};
  return r;
}

std::vector<int> range(int lo, int hi) {
  std::vector<int> v;
  for (int k = lo; k < hi; ++k) v.push_back(k);
  return v;
}

}  // namespace

TEST_SUITE("ignet") {
  TEST_CASE("config defaults and validation") {
    ModelConfig c;
    CHECK(c.roi_size == 32);
    CHECK(c.folds == 5);
    CHECK(c.epochs == 10);
    CHECK(c.decision_threshold == 0.5);
    CHECK(c.stage_blocks == std::vector<std::size_t>{2, 2, 2, 2});
    CHECK_NOTHROW(c.validate());
    c.folds = 1;
    CHECK_THROWS(c.validate());
    c = {};
    c.decision_threshold = 1.0;
    CHECK_THROWS(c.validate());
    c = {};
    c.roi_size = 31;
    CHECK_THROWS(c.validate());
  }

  TEST_CASE("extract_roi: plain crop and padding") {
    Image<double> f(64, 64);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) f.at(x, y) = 2.0 + x + 100.0 * y;
    const auto mid = extract_roi(f, 32.2, 31.8, 32);
    CHECK(mid.at(16, 16) == f.at(32, 32));
    CHECK(mid.at(0, 0) == f.at(16, 16));
    for (double v : mid.data()) CHECK(v != 1.0);

    const auto corner = extract_roi(f, 0.0, 0.0, 32);
    int padded = 0;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const bool inside = x >= 16 && y >= 16;
        if (!inside) {
          CHECK(corner.at(x, y) == 1.0);
          ++padded;
        } else {
          CHECK(corner.at(x, y) == f.at(x - 16, y - 16));
        }
      }
    CHECK(padded == 3 * 16 * 16);
    CHECK_THROWS(extract_roi(f, 0, 0, 7));
  }

  TEST_CASE("background-only RoI averages to 1") {
    synth::SyntheticEventSpec s;
    s.event_id = "bg";
    s.n_frames = 3;
    s.ignition_frame = std::nullopt;
    s.background_sigma = 50;
    s.noise_sigma = 40;
    s.x0 = 48;
    s.y0 = 40;
    s.seed = 3;
    const auto rec = synth::render_event(s);
    const auto roi = extract_roi(normalized_frame(rec.sequence.frames[1]), 48, 40, 32);
    double sum = 0;
    for (double v : roi.data()) sum += v;
    CHECK(sum / roi.size() == doctest::Approx(1.0).epsilon(0.02));
  }

  TEST_CASE("windowed sampling around the ignition frame") {
    const auto rec = tracked_event(50, 100, range(0, 100));
    FrameDataset d;
    append_event_samples(rec, ModelConfig{}, d);
    REQUIRE(d.samples.size() == 30);
    std::set<int> neg, pos;
    for (const auto& s : d.samples) (s.label ? pos : neg).insert(s.frame_index);
    CHECK(neg == std::set<int>{35, 36, 37, 38, 39, 40, 41, 42, 43, 44, 45, 46, 47, 48, 49});
    CHECK(pos.size() == 15);
    CHECK(*pos.begin() == 50);
    CHECK(*pos.rbegin() == 64);
    for (const auto& s : d.samples) {
      CHECK(s.roi.size() == 32 * 32);
      CHECK(s.label == (s.frame_index >= 50 ? 1 : 0));
    }
  }

  TEST_CASE("minority side is matched by subsampling the majority") {
    const auto rec = tracked_event(50, 100, range(45, 100));
    FrameDataset d;
    append_event_samples(rec, ModelConfig{}, d);
    int n0 = 0, n1 = 0;
    for (const auto& s : d.samples) (s.label ? n1 : n0)++;
    CHECK(n0 == 5);
    CHECK(n1 == 5);
  }

  TEST_CASE("non-igniting and unusable events") {
    auto rec = tracked_event(0, 100, range(0, 100));
    rec.label->ignition_frame.reset();
    FrameDataset d;
    append_event_samples(rec, ModelConfig{}, d);
    CHECK(d.samples.size() == 30);
    for (const auto& s : d.samples) CHECK(s.label == 0);

    FrameDataset w;
    append_event_samples(tracked_event(50, 100, range(50, 100)), ModelConfig{}, w);
    CHECK(w.samples.empty());
    REQUIRE(w.warnings.size() == 1);
    CHECK(w.warnings[0].reason.find("pre-ignition") != std::string::npos);

    auto unlabeled = tracked_event(50, 100, range(0, 100));
    unlabeled.label.reset();
    CHECK_THROWS_AS(append_event_samples(unlabeled, ModelConfig{}, w), std::invalid_argument);
  }

  TEST_CASE("dataset size is bounded by 30 samples per event") {
    const auto ev = events(1, 4);
    const auto d = build_frame_dataset(ev, ModelConfig{});
    CHECK(d.samples.size() <= ev.size() * 30);
    CHECK(d.samples.size() > 0);
  }

  TEST_CASE("kfold_split partitions events") {
    std::vector<std::string> ids;
    for (int i = 0; i < 10; ++i) ids.push_back("e" + std::to_string(i));
    const auto folds = kfold_split(ids, 5, 1);
    REQUIRE(folds.size() == 5);
    for (const auto& f : folds) CHECK(f.size() == 2);
    CHECK(kfold_split(ids, 5, 1) == folds);
    CHECK_THROWS(kfold_split(ids, 11, 1));
    CHECK_THROWS(kfold_split(ids, 1, 1));

    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 50; ++trial) {
      const int n = 5 + static_cast<int>(rng() % 60);
      const int k = 2 + static_cast<int>(rng() % 5);
      std::vector<std::string> v, strata;
      for (int i = 0; i < n; ++i) {
        v.push_back("id" + std::to_string(rng() % 100000) + "_" + std::to_string(i));
        strata.push_back("s" + std::to_string(rng() % 4));
      }
      const auto f = kfold_split(v, k, rng(), &strata);
      std::multiset<std::string> all;
      std::size_t lo = v.size(), hi = 0;
      for (const auto& fold : f) {
        all.insert(fold.begin(), fold.end());
        lo = std::min(lo, fold.size());
        hi = std::max(hi, fold.size());
      }
      CHECK(all == std::multiset<std::string>(v.begin(), v.end()));
      CHECK(hi - lo <= 1);
    }
  }

  TEST_CASE("stratified folds see every stratum") {
    std::vector<std::string> ids, strata;
    for (int s = 0; s < 14; ++s)
      for (int i = 0; i < 5; ++i) {
        ids.push_back("c" + std::to_string(s) + "_" + std::to_string(i));
        strata.push_back("c" + std::to_string(s));
      }
    for (const auto& fold : kfold_split(ids, 5, 3, &strata)) {
      std::set<std::string> seen;
      for (const auto& id : fold) seen.insert(id.substr(0, id.find('_')));
      CHECK(seen.size() == 14);
    }
  }

  TEST_CASE("first-crossing rule") {
    const std::vector<double> p{0.1, 0.4, 0.6, 0.7};
    CHECK(first_crossing(p, 0.5) == 2u);
    const std::vector<double> low{0.1, 0.5, 0.5};
    CHECK_FALSE(first_crossing(low, 0.5).has_value());

    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 200; ++i) {
      std::vector<double> q(20);
      for (auto& v : q) v = u(rng);
      const double t1 = u(rng), t2 = t1 + (1 - t1) * u(rng);
      const auto f1 = first_crossing(q, t1), f2 = first_crossing(q, t2);
      if (f1) {
        CHECK(q[*f1] > t1);
        for (std::size_t j = 0; j < *f1; ++j) CHECK(q[j] <= t1);
      }
      if (f2) {
        REQUIRE(f1.has_value());
        CHECK(*f2 >= *f1);
      }
    }
  }

  TEST_CASE("untrained model predicts one half") {
    auto cfg = small_config();
    auto m = untrained_model(cfg);
    CHECK(m.folds.size() == 2);
    Image<double> roi(32, 32, 1.3);
    const double p = predict_frame(m, roi);
    CHECK(p == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(p + (1 - p) == doctest::Approx(1.0));
    CHECK_FALSE(predict_sequence_ignition(m, tracked_event(50, 80, range(0, 80))).has_value());
  }

  TEST_CASE("epochs = 0 leaves the model at initialization") {
    auto cfg = small_config();
    cfg.epochs = 0;
    const auto ev = events(1, 8);
    auto m = train_kfold(std::span<const EventRecord>(ev), cfg);
    const auto init = untrained_model(cfg);
    for (std::size_t f = 0; f < m.folds.size(); ++f) {
      const auto a = m.folds[f].export_state();
      const auto b = init.folds[f].export_state();
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].values == b[i].values);
    }
  }

  TEST_CASE("training leaks no held-out event") {
    const auto ev = events(1, 8);
    auto cfg = small_config();
    const auto data = build_frame_dataset(ev, cfg);
    std::vector<std::string> ids;
    for (std::size_t i = 0; i + 1 < ev.size(); ++i) ids.push_back(ev[i].sequence.event_id);
    CHECK_THROWS_AS(train_kfold(data, ids, {}, cfg), std::invalid_argument);
  }

  TEST_CASE("trained model metadata and accuracy") {
    auto& m = trained();
    REQUIRE(m.folds.size() == 2);
    CHECK(m.train_ids.size() == 42);
    std::set<std::string> val;
    for (const auto& f : m.validation_ids) val.insert(f.begin(), f.end());
    CHECK(val == std::set<std::string>(m.train_ids.begin(), m.train_ids.end()));
    for (const auto& c : m.curves) {
      CHECK(c.val_accuracy.size() == 4);
      CHECK(c.val_accuracy.back() > 0.6);  // above chance on balanced folds
    }
  }

  TEST_CASE("trained model on held-out events") {
    auto& m = trained();
    const auto held = events(1, 777);
    int near = 0;
    for (const auto& rec : held) {
      const int ign = *rec.label->ignition_frame;
      const auto* e = rec.track.valid_at(ign + 5);
      REQUIRE(e);
      const auto roi = extract_roi(normalized_frame(rec.sequence.frames[static_cast<std::size_t>(ign + 5)]), e->x, e->y, 32);
      CHECK(predict_frame(m, roi) > 0.5);
      const auto f = predict_sequence_ignition(m, rec);
      REQUIRE(f.has_value());
      if (std::abs(*f - ign) <= 3) ++near;

      const auto probs = sequence_probabilities(m, rec);
      for (const auto& [k, p] : probs) {
        if (k >= *f) break;
        CHECK(p <= 0.5);
      }
    }
    CHECK(near >= 12);
  }

  TEST_CASE("raising the decision threshold never predicts earlier") {
    auto m = trained();
    const auto held = events(1, 778);
    for (const auto& rec : held) {
      std::optional<int> prev;
      for (double t : {0.3, 0.5, 0.7, 0.9}) {
        m.config.decision_threshold = t;
        const auto f = predict_sequence_ignition(m, rec);
        if (prev && f) CHECK(*f >= *prev);
        if (prev) CHECK(f.has_value() <= prev.has_value());
        if (f) prev = f;
      }
    }
  }

  TEST_CASE("sliding prediction map") {
    auto& m = trained();
    Image<double> flat(96, 96, 1.0);
    CHECK(sliding_prediction_map(m, flat, 96).width() == 1);
    CHECK(sliding_prediction_map(m, flat, 96).height() == 1);
    const auto grid = sliding_prediction_map(m, flat, 8);
    CHECK(grid.width() == 9);
    CHECK(grid.height() == 9);
    for (double p : grid.data()) CHECK(p < 0.5);
    CHECK_THROWS(sliding_prediction_map(m, Image<double>(16, 16, 1.0), 4));
    CHECK_THROWS(sliding_prediction_map(m, flat, 0));

    const auto held = events(1, 779);
    int located = 0;
    for (const auto& rec : held) {
      const int k = *rec.label->ignition_frame + 8;
      const auto* e = rec.track.valid_at(k);
      REQUIRE(e);
      const auto map = sliding_prediction_map(m, normalized_frame(rec.sequence.frames[static_cast<std::size_t>(k)]), 4);
      std::size_t best = 0;
      for (std::size_t i = 1; i < map.size(); ++i)
        if (map.data()[i] > map.data()[best]) best = i;
      const double gx = static_cast<double>(best % static_cast<std::size_t>(map.width())) * 4 + 16;
      const double gy = static_cast<double>(best / static_cast<std::size_t>(map.width())) * 4 + 16;
      if (std::hypot(gx - e->x, gy - e->y) <= 32) ++located;
    }
    CHECK(located >= 12);
  }

  TEST_CASE("model save and load round trip") {
    testing::TempDir dir("ignet");
    auto& m = trained();
    save_model(m, dir / "m.bin");
    auto back = load_model(dir / "m.bin");
    CHECK(back.train_ids == m.train_ids);
    CHECK(back.validation_ids == m.validation_ids);
    CHECK(back.config.stage_blocks == m.config.stage_blocks);
    REQUIRE(back.folds.size() == m.folds.size());
    Image<double> roi(32, 32, 1.1);
    roi.at(16, 16) = 3.0;
    CHECK(predict_frame(back, roi) == predict_frame(m, roi));
    save_model(back, dir / "m2.bin");
    CHECK(testing::slurp(dir / "m.bin") == testing::slurp(dir / "m2.bin"));

    testing::spit(dir / "bad.bin", "not a model");
    CHECK_THROWS(load_model(dir / "bad.bin"));
    CHECK_THROWS(load_model(dir / "missing.bin"));
  }

  TEST_CASE("training is bit-reproducible") {
    testing::TempDir dir("ignet_det");
    auto cfg = small_config();
    cfg.epochs = 1;
    const auto ev = events(1, 31);
    save_model(train_kfold(std::span<const EventRecord>(ev), cfg), dir / "a.bin");
    save_model(train_kfold(std::span<const EventRecord>(ev), cfg), dir / "b.bin");
    CHECK(testing::slurp(dir / "a.bin") == testing::slurp(dir / "b.bin"));
  }

  TEST_CASE("warm start loads the first fold") {
    testing::TempDir dir("ignet_warm");
    save_model(trained(), dir / "w.bin");
    auto cfg = small_config();
    cfg.epochs = 0;
    cfg.warm_start = dir / "w.bin";
    const auto ev = events(1, 8);
    auto m = train_kfold(std::span<const EventRecord>(ev), cfg);
    const auto want = trained().folds[0].export_state();
    for (const auto& f : m.folds) {
      const auto got = f.export_state();
      REQUIRE(got.size() == want.size());
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i].values == want[i].values);
    }
  }
}
