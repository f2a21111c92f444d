#pragma once

// Run configuration file: INI/TOML-style sections of key = value pairs.
//
//   [sas]    intensity_threshold, area_threshold, connectivity, search_radius_px,
//            search_radius_diameters, persistence, track_gap
//   [model]  roi_size, stage_blocks, base_channels, lr, momentum, weight_decay,
//            batch_size, epochs, folds, decision_threshold, window, seed
//   [synth]  frame_size, lead_frames, tail_frames, background_level,
//            background_sigma, noise_sigma, x_jitter_px
//   [eval]   y_ref_mm
//   [study]  census_per_pair, train_per_pair
//
// Unknown sections or keys are errors.

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "ignitrace/ignet.hpp"
#include "ignitrace/sas.hpp"
#include "ignitrace/synthgen.hpp"

namespace ignitrace::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StudyConfig {
  int census_per_pair = 0;  // 0: the 1518-event census
  std::vector<int> train_per_pair{1, 4, 10, 33};
};

struct RunConfig {
  sas::SASConfig sas;
  ignet::ModelConfig model;
  synth::SynthGeometry synth;
  double y_ref_mm = 1.5;
  StudyConfig study;

  /// Throws ConfigError.
  void validate() const;
  synth::ConditionTable table() const;
};

RunConfig parse_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_config(const std::filesystem::path& path);

/// Effective configuration as canonical JSON text (stable key order).
std::string config_json(const RunConfig& cfg);

}  // namespace ignitrace::cli
