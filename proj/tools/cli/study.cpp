#include "ignitrace/study.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <random>
#include <set>

#include "ignitrace/ignet.hpp"
#include "ignitrace/sas.hpp"
#include "ignitrace/synthgen.hpp"
#include "json.hpp"

namespace ignitrace::cli {

namespace fs = std::filesystem;

std::map<Condition, std::vector<std::string>> priority_order(const std::vector<ManifestRow>& rows,
                                                             std::uint64_t seed) {
  std::map<Condition, std::vector<std::string>> order;
  for (const auto& r : rows) order[r.condition].push_back(r.event_id);
  for (auto& [cond, ids] : order) {
    std::sort(ids.begin(), ids.end());
    std::mt19937_64 rng(mix_seed(seed, hash_string("priority:" + to_string(cond))));
    std::shuffle(ids.begin(), ids.end(), rng);
  }
  return order;
}

std::vector<std::string> select_per_pair(const std::map<Condition, std::vector<std::string>>& order, int per_pair) {
  if (per_pair < 1) throw ConfigError("per-pair event count must be >= 1");
  std::vector<std::string> out;
  for (const auto& [cond, ids] : order) {
    if (ids.size() < static_cast<std::size_t>(per_pair)) {
      throw ConfigError(strprintf("pair %s has %zu events, %d requested", to_string(cond).c_str(), ids.size(),
                                  per_pair));
    }
    out.insert(out.end(), ids.begin(), ids.begin() + per_pair);
  }
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

using clk = std::chrono::steady_clock;

double since(clk::time_point t) { return std::chrono::duration<double>(clk::now() - t).count(); }

eval::ReportInput report_input(const DatasetLayout& layout, const std::vector<ManifestRow>& manifest,
                               const std::set<std::string>& ids, const std::vector<eval::Detection>& detections,
                               const std::map<std::string, GroundTruthLabel>& labels, double y_ref_mm) {
  eval::ReportInput in;
  in.y_ref_mm = y_ref_mm;
  for (const auto& r : manifest) {
    if (!ids.contains(r.event_id)) continue;
    const auto h = read_sequence_header(layout.sequence_path(r.event_id));
    in.events[r.event_id] = {r.condition, read_track(layout.track_path(r.event_id)), h.frame_rate, h.pixel_pitch_um};
    if (auto it = labels.find(r.event_id); it != labels.end()) in.labels[r.event_id] = it->second;
  }
  for (const auto& d : detections) {
    if (ids.contains(d.event_id)) in.detections.push_back(d);
  }
  return in;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace

StudyResult replicate_study(const StudyOptions& opts) {
  const RunConfig& cfg = opts.config;
  cfg.validate();
  auto log = [&](const std::string& s) {
    if (opts.log) opts.log(s);
  };
  StudyResult res;
  const fs::path data_dir = opts.out_dir / "data";
  const fs::path det_dir = opts.out_dir / "detections";
  const fs::path model_dir = opts.out_dir / "models";
  fs::create_directories(det_dir);
  fs::create_directories(model_dir);

  // 1. census
  auto t = clk::now();
  const auto table = cfg.table();
  const auto census =
      cfg.study.census_per_pair > 0 ? synth::uniform_census(cfg.study.census_per_pair) : synth::paper_census();
  const auto manifest = synth::gen_dataset(table, census, opts.seed, data_dir, opts.threads);
  const DatasetLayout layout(data_dir);
  const auto labels = current_labels(read_labels(layout.labels_path()));
  res.stage_seconds["generate"] = since(t);
  log(strprintf("generated %zu events in %.1fs", manifest.size(), res.stage_seconds["generate"]));

  // 2. split
  const auto order = priority_order(manifest, opts.seed);
  const int pool_per_pair = cfg.study.train_per_pair.back();
  res.pool_ids = select_per_pair(order, pool_per_pair);
  const std::set<std::string> pool(res.pool_ids.begin(), res.pool_ids.end());
  for (const auto& r : manifest) {
    if (!pool.contains(r.event_id)) res.held_out_ids.push_back(r.event_id);
  }
  const std::set<std::string> held_out(res.held_out_ids.begin(), res.held_out_ids.end());
  const auto n_pairs = static_cast<int>(order.size());
  for (int per : cfg.study.train_per_pair) res.train_ids[per * n_pairs] = select_per_pair(order, per);
  log(strprintf("training pool %zu events, held-out %zu events", res.pool_ids.size(), res.held_out_ids.size()));

  // 3. SAS over the census
  t = clk::now();
  std::vector<eval::Detection> sas_det(manifest.size());
  parallel_for(manifest.size(), opts.threads, [&](std::size_t i) {
    const auto rec = layout.load_event(manifest[i].event_id);
    sas_det[i] = {manifest[i].event_id, "sas", sas::sas_ignition_frame(rec, cfg.sas)};
  });
  eval::write_detections(sas_det, det_dir / "sas.csv");
  res.stage_seconds["sas"] = since(t);
  log(strprintf("SAS on %zu events in %.1fs", manifest.size(), res.stage_seconds["sas"]));

  // 4. training
  t = clk::now();
  ignet::ModelConfig mcfg = cfg.model;
  mcfg.seed = opts.seed;
  ignet::FrameDataset pool_data;
  {
    std::vector<ignet::FrameDataset> parts(res.pool_ids.size());
    parallel_for(res.pool_ids.size(), opts.threads, [&](std::size_t i) {
      const auto rec = layout.load_event(res.pool_ids[i], &labels);
      ignet::append_event_samples(rec, mcfg, parts[i]);
    });
    for (auto& p : parts) {
      std::move(p.samples.begin(), p.samples.end(), std::back_inserter(pool_data.samples));
      pool_data.warnings.insert(pool_data.warnings.end(), p.warnings.begin(), p.warnings.end());
    }
  }
  std::map<std::string, std::string> stratum;
  for (const auto& r : manifest) stratum[r.event_id] = to_string(r.condition);
  std::map<int, ignet::TrainedModel> models;
  for (const auto& [nev, ids] : res.train_ids) {
    const std::set<std::string> chosen(ids.begin(), ids.end());
    ignet::FrameDataset subset;
    for (const auto& s : pool_data.samples) {
      if (chosen.contains(s.event_id)) subset.samples.push_back(s);
    }
    std::vector<std::string> strata;
    for (const auto& id : ids) strata.push_back(stratum.at(id));
    auto t_fold = clk::now();
    ignet::TrainOptions topts;
    topts.threads = opts.threads;
    auto model = ignet::train_kfold(subset, ids, strata, mcfg, topts);
    ignet::save_model(model, model_dir / strprintf("nev%d.ignw", nev));
    for (const auto& c : model.curves) res.fold_accuracy[nev].push_back(c.val_accuracy.empty() ? 0.0 : c.val_accuracy.back());
    log(strprintf("trained N_ev=%d (%zu samples) in %.1fs", nev, subset.samples.size(), since(t_fold)));
    models.emplace(nev, std::move(model));
  }
  res.stage_seconds["train"] = since(t);

  // 5. prediction on the held-out set
  t = clk::now();
  std::vector<std::vector<eval::Detection>> per_event(res.held_out_ids.size());
  parallel_for(res.held_out_ids.size(), opts.threads, [&](std::size_t i) {
    const auto rec = layout.load_event(res.held_out_ids[i]);
    for (auto& [nev, model] : models) {
      per_event[i].push_back({rec.sequence.event_id, nev_detector(nev), ignet::predict_sequence_ignition(model, rec)});
    }
  });
  std::vector<eval::Detection> all = sas_det;
  for (const auto& [nev, model] : models) {
    std::vector<eval::Detection> det;
    for (const auto& v : per_event) {
      for (const auto& d : v) {
        if (d.detector == nev_detector(nev)) det.push_back(d);
      }
    }
    eval::write_detections(det, det_dir / (nev_detector(nev) + ".csv"));
    all.insert(all.end(), det.begin(), det.end());
  }
  res.stage_seconds["predict"] = since(t);
  log(strprintf("predicted %zu held-out events with %zu models in %.1fs", res.held_out_ids.size(), models.size(),
                res.stage_seconds["predict"]));

  // 6. reports
  t = clk::now();
  res.report = eval::compare_report(report_input(layout, manifest, held_out, all, labels, cfg.y_ref_mm),
                                    opts.out_dir / "report");
  std::set<std::string> every;
  for (const auto& r : manifest) every.insert(r.event_id);
  const auto census_report =
      eval::compare_report(report_input(layout, manifest, every, sas_det, labels, cfg.y_ref_mm),
                           opts.out_dir / "report_sas_census");
  res.stage_seconds["report"] = since(t);

  nlohmann::ordered_json j;
  j["seed"] = opts.seed;
  j["events"] = manifest.size();
  j["training_pool"] = res.pool_ids.size();
  j["held_out"] = res.held_out_ids.size();
  nlohmann::ordered_json sweep = nlohmann::ordered_json::array();
  for (const auto& [nev, ids] : res.train_ids) {
    nlohmann::ordered_json row;
    row["n_ev"] = nev;
    row["events"] = ids.size();
    row["fold_val_accuracy"] = res.fold_accuracy[nev];
    for (auto size : kSizeClasses) {
      const auto* s = eval::find_stats(res.report.stats, eval::kPooled, size, nev_detector(nev));
      const std::string key(to_string(size));
      row[key] = s ? nlohmann::ordered_json{{"n", s->n},
                                            {"mu_ms", strprintf("%.6f", s->mu_ms)},
                                            {"sigma_ms", s->sigma_ms ? strprintf("%.6f", *s->sigma_ms) : ""},
                                            {"absent", s->absent_count}}
                   : nlohmann::ordered_json(nullptr);
    }
    sweep.push_back(row);
  }
  j["sweep"] = sweep;
  for (auto size : kSizeClasses) {
    const auto* s = eval::find_stats(census_report.stats, eval::kPooled, size, "sas");
    if (s) {
      j["sas_census"][std::string(to_string(size))] = {
          {"n", s->n}, {"mu_ms", strprintf("%.6f", s->mu_ms)},
          {"sigma_ms", s->sigma_ms ? strprintf("%.6f", *s->sigma_ms) : ""}, {"absent", s->absent_count}};
    }
  }
  write_json(opts.out_dir / "study.json", j);
  return res;
}

}  // namespace ignitrace::cli
