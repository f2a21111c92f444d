#pragma once

// End-to-end N_ev sweep and detector comparison.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ignitrace/config.hpp"
#include "ignitrace/evalstats.hpp"

namespace ignitrace::cli {

/// Events of every condition-size pair in a seeded priority order. Taking
/// the first n of each pair yields nested subsets for increasing n.
std::map<Condition, std::vector<std::string>> priority_order(const std::vector<ManifestRow>& rows,
                                                             std::uint64_t seed);

/// First `per_pair` events of each pair's priority order, sorted by id.
/// Throws ConfigError when a pair has fewer events.
std::vector<std::string> select_per_pair(const std::map<Condition, std::vector<std::string>>& order, int per_pair);

struct StudyOptions {
  std::filesystem::path out_dir;
  std::uint64_t seed = 1;
  RunConfig config;
  int threads = 1;
  std::function<void(const std::string&)> log;
};

struct StudyResult {
  std::vector<std::string> pool_ids;     // training pool (largest subset)
  std::vector<std::string> held_out_ids;
  std::map<int, std::vector<std::string>> train_ids;  // keyed by N_ev
  std::map<int, std::vector<double>> fold_accuracy;   // final validation accuracy per fold
  eval::Report report;
  std::map<std::string, double> stage_seconds;
};

inline std::string nev_detector(int nev) { return "resnet_nev" + std::to_string(nev); }

/// Layout under out_dir: data/ (dataset), detections/<detector>.csv,
/// models/nev<N>.ignw, report/ (compare report), study.json.
StudyResult replicate_study(const StudyOptions& opts);

}  // namespace ignitrace::cli
