#include "ignitrace/cli.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <set>
#include <thread>

#include "CLI11.hpp"
#include "ignitrace/config.hpp"
#include "ignitrace/evalstats.hpp"
#include "ignitrace/ignet.hpp"
#include "ignitrace/labsvc.hpp"
#include "ignitrace/sas.hpp"
#include "ignitrace/study.hpp"
#include "ignitrace/synthgen.hpp"
#include "json.hpp"

namespace ignitrace::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  bool deterministic = false;
  int threads = 0;

  RunConfig config() const { return config_path.empty() ? RunConfig{} : load_config(config_path); }
  int thread_count() const {
    if (deterministic) return 1;
    if (threads > 0) return threads;
    return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
  }
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "Configuration file ([sas], [model], [synth], [eval], [study])")
      ->check(CLI::ExistingFile);
  sub->add_flag("--deterministic", c.deterministic, "Single-threaded, bit-exact mode");
  sub->add_option("--threads", c.threads, "Worker threads (default: all cores)")->check(CLI::NonNegativeNumber);
}

/// <file>.manifest.json next to a file output, run_manifest.json inside a directory output.
void write_run_manifest(const fs::path& output, bool is_dir, const std::string& subcommand,
                        const std::vector<std::string>& args, const ojson& seeds, const RunConfig& cfg) {
  ojson j;
  j["tool"] = "ignitrace";
  j["version"] = std::string(kVersion);
  j["subcommand"] = subcommand;
  j["args"] = std::vector<std::string>(args.begin() + 1, args.end());
  j["seeds"] = seeds;
  j["config"] = ojson::parse(config_json(cfg));
  const fs::path path = is_dir ? output / "run_manifest.json" : fs::path(output.string() + ".manifest.json");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::vector<ManifestRow> select_events(const DatasetLayout& layout, const std::string& events_csv) {
  auto rows = layout.manifest();
  if (events_csv.empty()) return rows;
  std::set<std::string> wanted;
  for (const auto& r : read_manifest(events_csv)) wanted.insert(r.event_id);
  std::vector<ManifestRow> out;
  for (auto& r : rows) {
    if (wanted.erase(r.event_id)) out.push_back(std::move(r));
  }
  if (!wanted.empty()) throw SeqioError("event " + *wanted.begin() + " of " + events_csv + " is not in the dataset");
  return out;
}

fs::path default_labels(const std::string& in, const std::string& labels) {
  return labels.empty() ? DatasetLayout(in).labels_path() : fs::path(labels);
}

void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"ignitrace: ignition detection for solid-fuel particle image sequences", "ignitrace"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  Common common;

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic labeled dataset");
  std::string gen_out;
  std::uint64_t gen_seed = 1;
  bool paper_census = false;
  int per_condition = 0;
  gen->add_option("--out", gen_out, "Output dataset directory")->required();
  gen->add_option("--seed", gen_seed, "Dataset seed");
  auto* pc = gen->add_flag("--paper-census", paper_census, "1006 class-A and 512 class-B events (default)");
  gen->add_option("--per-condition", per_condition, "Events per condition-size pair instead of the census")
      ->check(CLI::PositiveNumber)
      ->excludes(pc);
  add_common(gen, common);

  // serve
  auto* serve = app.add_subcommand("serve", "Serve a dataset for labeling over HTTP");
  std::string serve_in, serve_labels, host = "127.0.0.1";
  int port = 8080;
  serve->add_option("--in", serve_in, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  serve->add_option("--labels", serve_labels, "Label log (JSON lines; default <in>/human_labels.jsonl)");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port (0 picks a free port)")->check(CLI::Range(0, 65535));
  add_common(serve, common);

  // sas
  auto* sascmd = app.add_subcommand("sas", "Run the SAS threshold detector");
  std::string sas_in, sas_out, sas_events;
  sascmd->add_option("--in", sas_in, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  sascmd->add_option("--out", sas_out, "Detections CSV")->required();
  sascmd->add_option("--events", sas_events, "Manifest CSV restricting the events")->check(CLI::ExistingFile);
  add_common(sascmd, common);

  // train
  auto* train = app.add_subcommand("train", "Train the k-fold residual classifier");
  std::string tr_in, tr_labels, tr_events, tr_out, warm;
  int nev = 0;
  std::uint64_t tr_seed = 1;
  train->add_option("--in", tr_in, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--labels", tr_labels, "Label log (default <in>/labels.jsonl)");
  train->add_option("--events", tr_events, "Manifest CSV restricting the candidate events")->check(CLI::ExistingFile);
  train->add_option("--nev", nev, "Training events; N/14 per condition-size pair by seeded priority")
      ->check(CLI::PositiveNumber);
  train->add_option("--out", tr_out, "Model checkpoint (.ignw)")->required();
  train->add_option("--seed", tr_seed, "Selection and initialization seed");
  train->add_option("--warm-start", warm, "Checkpoint initializing every fold")->check(CLI::ExistingFile);
  add_common(train, common);

  // predict
  auto* predict = app.add_subcommand("predict", "Predict ignition frames with a trained model");
  std::string pr_model, pr_in, pr_out, pr_events, pr_name = "resnet";
  predict->add_option("--model", pr_model, "Model checkpoint")->required()->check(CLI::ExistingFile);
  predict->add_option("--in", pr_in, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  predict->add_option("--out", pr_out, "Detections CSV")->required();
  predict->add_option("--events", pr_events, "Manifest CSV restricting the events")->check(CLI::ExistingFile);
  predict->add_option("--detector", pr_name, "Detector name written to the CSV");
  add_common(predict, common);

  // eval
  auto* evalcmd = app.add_subcommand("eval", "Compare detectors against ground truth");
  std::vector<std::string> ev_dets;
  std::string ev_labels, ev_tracks, ev_manifest, ev_out;
  double yref_mm = -1.0, frame_rate = kDefaultFrameRateHz, pitch = default_pixel_pitch_um(96);
  evalcmd->add_option("--detections", ev_dets, "Detections CSVs")->required()->check(CLI::ExistingFile);
  evalcmd->add_option("--labels", ev_labels, "Ground-truth label log")->required()->check(CLI::ExistingFile);
  evalcmd->add_option("--tracks", ev_tracks, "Track CSV directory")->required()->check(CLI::ExistingDirectory);
  evalcmd->add_option("--manifest", ev_manifest, "Dataset manifest (default <tracks>/../manifest.csv)");
  evalcmd->add_option("--yref-mm", yref_mm, "Heat-up reference height in mm (default 1.5)");
  evalcmd->add_option("--frame-rate", frame_rate, "Frame rate when no sequence header is available");
  evalcmd->add_option("--pixel-pitch-um", pitch, "Pixel pitch when no sequence header is available");
  evalcmd->add_option("--out", ev_out, "Report directory")->required();
  add_common(evalcmd, common);

  // replicate
  auto* rep = app.add_subcommand("replicate", "Full N_ev sweep and detector comparison");
  std::string rep_out;
  std::uint64_t rep_seed = 1;
  rep->add_option("--out", rep_out, "Study directory")->required();
  rep->add_option("--seed", rep_seed, "Study seed");
  add_common(rep, common);

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  auto say = [&](const std::string& s) { out << s << std::endl; };
  try {
    const RunConfig cfg = common.config();
    const int threads = common.thread_count();

    if (*gen) {
      const auto table = cfg.table();
      const auto census = per_condition > 0 ? synth::uniform_census(per_condition) : synth::paper_census();
      const auto rows = synth::gen_dataset(table, census, gen_seed, gen_out, threads);
      write_run_manifest(gen_out, true, "gen", args, {{"dataset", gen_seed}}, cfg);
      say(strprintf("wrote %zu events to %s", rows.size(), gen_out.c_str()));
      return kExitOk;
    }

    if (*serve) {
      labsvc::ServiceConfig sc;
      sc.dataset_dir = serve_in;
      sc.labels_path = serve_labels.empty() ? fs::path(serve_in) / "human_labels.jsonl" : fs::path(serve_labels);
      labsvc::LabelService service(sc);
      labsvc::HttpServer server(service);
      const int bound = server.bind(host, port);
      say(strprintf("serving %zu events on http://%s:%d (labels: %s)", service.manifest().size(), host.c_str(), bound,
                    sc.labels_path.string().c_str()));
      server.listen();
      return kExitOk;
    }

    if (*sascmd) {
      const DatasetLayout layout(sas_in);
      const auto rows = select_events(layout, sas_events);
      std::vector<eval::Detection> det(rows.size());
      parallel_for(rows.size(), threads, [&](std::size_t i) {
        det[i] = {rows[i].event_id, "sas", sas::sas_ignition_frame(layout.load_event(rows[i].event_id), cfg.sas)};
      });
      ensure_parent(sas_out);
      eval::write_detections(det, sas_out);
      write_run_manifest(sas_out, false, "sas", args, ojson::object(), cfg);
      std::size_t found = 0;
      for (const auto& d : det) found += d.ignition_frame ? 1 : 0;
      say(strprintf("SAS: %zu events, %zu detections -> %s", det.size(), found, sas_out.c_str()));
      return kExitOk;
    }

    if (*train) {
      const DatasetLayout layout(tr_in);
      const auto labels = current_labels(read_labels(default_labels(tr_in, tr_labels)));
      auto rows = select_events(layout, tr_events);
      std::vector<std::string> ids;
      if (nev > 0) {
        const auto order = priority_order(rows, tr_seed);
        if (nev % static_cast<int>(order.size()) != 0) {
          throw UsageError(strprintf("--nev %d is not a multiple of the %zu condition-size pairs", nev, order.size()));
        }
        ids = select_per_pair(order, nev / static_cast<int>(order.size()));
      } else {
        for (const auto& r : rows) ids.push_back(r.event_id);
      }
      std::map<std::string, std::string> stratum;
      for (const auto& r : rows) stratum[r.event_id] = to_string(r.condition);
      ignet::ModelConfig mcfg = cfg.model;
      mcfg.seed = tr_seed;
      if (!warm.empty()) mcfg.warm_start = warm;
      mcfg.validate();
      ignet::FrameDataset data;
      std::vector<std::string> strata;
      for (const auto& id : ids) {
        if (!labels.contains(id)) throw SeqioError("event " + id + " has no label");
        ignet::append_event_samples(layout.load_event(id, &labels), mcfg, data);
        strata.push_back(stratum.at(id));
      }
      for (const auto& w : data.warnings) err << "warning: " << w.event_id << ": " << w.reason << "\n";
      ignet::TrainOptions topts;
      topts.threads = threads;
      topts.log = say;
      const auto model = ignet::train_kfold(data, ids, strata, mcfg, topts);
      ensure_parent(tr_out);
      ignet::save_model(model, tr_out);
      write_run_manifest(tr_out, false, "train", args, {{"selection", tr_seed}, {"model", mcfg.seed}}, cfg);
      say(strprintf("trained %d folds on %zu events (%zu samples) -> %s", mcfg.folds, ids.size(), data.samples.size(),
                    tr_out.c_str()));
      return kExitOk;
    }

    if (*predict) {
      auto model = ignet::load_model(pr_model);
      const DatasetLayout layout(pr_in);
      const auto rows = select_events(layout, pr_events);
      std::vector<eval::Detection> det(rows.size());
      parallel_for(rows.size(), threads, [&](std::size_t i) {
        det[i] = {rows[i].event_id, pr_name, ignet::predict_sequence_ignition(model, layout.load_event(rows[i].event_id))};
      });
      ensure_parent(pr_out);
      eval::write_detections(det, pr_out);
      write_run_manifest(pr_out, false, "predict", args, {{"model", model.config.seed}}, cfg);
      say(strprintf("%s: %zu events -> %s", pr_name.c_str(), det.size(), pr_out.c_str()));
      return kExitOk;
    }

    if (*evalcmd) {
      eval::ReportInput in;
      in.y_ref_mm = yref_mm > 0.0 ? yref_mm : cfg.y_ref_mm;
      const fs::path tracks(ev_tracks);
      const fs::path root = fs::absolute(tracks).lexically_normal().parent_path();
      const fs::path manifest_path = ev_manifest.empty() ? root / "manifest.csv" : fs::path(ev_manifest);
      const DatasetLayout layout(root);
      for (const auto& r : read_manifest(manifest_path)) {
        const auto tp = tracks / (r.event_id + ".csv");
        if (!fs::exists(tp)) continue;
        eval::EventInfo info{r.condition, read_track(tp), frame_rate, pitch};
        if (fs::exists(layout.sequence_path(r.event_id))) {
          const auto h = read_sequence_header(layout.sequence_path(r.event_id));
          info.frame_rate = h.frame_rate;
          info.pixel_pitch_um = h.pixel_pitch_um;
        }
        in.events.emplace(r.event_id, std::move(info));
      }
      std::set<std::string> detected;
      for (const auto& path : ev_dets) {
        for (auto& d : eval::read_detections(path)) {
          detected.insert(d.event_id);
          in.detections.push_back(std::move(d));
        }
      }
      for (const auto& [id, l] : current_labels(read_labels(ev_labels))) {
        if (detected.contains(id)) in.labels.emplace(id, l);
      }
      const auto report = eval::compare_report(in, ev_out);
      write_run_manifest(ev_out, true, "eval", args, ojson::object(), cfg);
      for (const auto& s : report.summary) {
        say(strprintf("%s  %-16s n=%d mu=%+.3f ms sigma=%s absent=%d", s.size_class.c_str(), s.detector.c_str(), s.n,
                      s.mu_ms, s.sigma_ms ? strprintf("%.3f ms", *s.sigma_ms).c_str() : "n/a", s.absent_count));
      }
      if (!report.warnings.empty()) err << report.warnings.size() << " warnings, see " << ev_out << "/warnings.txt\n";
      return kExitOk;
    }

    if (*rep) {
      StudyOptions so;
      so.out_dir = rep_out;
      so.seed = rep_seed;
      so.config = cfg;
      so.threads = threads;
      so.log = say;
      fs::create_directories(so.out_dir);
      const auto res = replicate_study(so);
      write_run_manifest(rep_out, true, "replicate", args, {{"study", rep_seed}}, cfg);
      for (const auto& s : res.report.summary) {
        say(strprintf("%s  %-16s n=%d mu=%+.3f ms sigma=%s absent=%d", s.size_class.c_str(), s.detector.c_str(), s.n,
                      s.mu_ms, s.sigma_ms ? strprintf("%.3f ms", *s.sigma_ms).c_str() : "n/a", s.absent_count));
      }
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomain;
  }
  return kExitUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace ignitrace::cli
