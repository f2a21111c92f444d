#include "ignitrace/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "json.hpp"

namespace ignitrace::cli {

namespace pt = boost::property_tree;

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  if (b == std::string::npos) return {};
  s = s.substr(b, e - b + 1);
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) s = s.substr(1, s.size() - 2);
  return s;
}

double to_double(const std::string& s, const std::string& ctx) {
  double v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(ctx + ": expected a number, got '" + s + "'");
  return v;
}

long long to_int(const std::string& s, const std::string& ctx) {
  long long v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(ctx + ": expected an integer, got '" + s + "'");
  return v;
}

std::vector<long long> to_int_list(std::string s, const std::string& ctx) {
  if (s.size() >= 2 && s.front() == '[' && s.back() == ']') s = s.substr(1, s.size() - 2);
  std::vector<long long> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError(ctx + ": empty list element");
    out.push_back(to_int(item, ctx));
  }
  if (out.empty()) throw ConfigError(ctx + ": empty list");
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string& value, const std::string& ctx)>;

template <typename T>
Setter int_field(T RunConfig::*section, int T::*field) {
  return [=](RunConfig& c, const std::string& v, const std::string& ctx) {
    (c.*section).*field = static_cast<int>(to_int(v, ctx));
  };
}

template <typename T>
Setter double_field(T RunConfig::*section, double T::*field) {
  return [=](RunConfig& c, const std::string& v, const std::string& ctx) { (c.*section).*field = to_double(v, ctx); };
}

const std::map<std::string, std::map<std::string, Setter>>& setters() {
  using M = ignet::ModelConfig;
  using S = sas::SASConfig;
  using G = synth::SynthGeometry;
  static const std::map<std::string, std::map<std::string, Setter>> table = {
      {"sas",
       {{"intensity_threshold", double_field(&RunConfig::sas, &S::intensity_threshold)},
        {"area_threshold", int_field(&RunConfig::sas, &S::area_threshold)},
        {"connectivity",
         [](RunConfig& c, const std::string& v, const std::string& ctx) {
           const auto n = to_int(v, ctx);
           if (n != 4 && n != 8) throw ConfigError(ctx + ": connectivity must be 4 or 8");
           c.sas.connectivity = n == 4 ? sas::Connectivity::Four : sas::Connectivity::Eight;
         }},
        {"search_radius_px",
         [](RunConfig& c, const std::string& v, const std::string& ctx) { c.sas.search_radius_px = to_double(v, ctx); }},
        {"search_radius_diameters", double_field(&RunConfig::sas, &S::search_radius_diameters)},
        {"persistence", int_field(&RunConfig::sas, &S::persistence)},
        {"track_gap", int_field(&RunConfig::sas, &S::track_gap)}}},
      {"model",
       {{"roi_size", int_field(&RunConfig::model, &M::roi_size)},
        {"stage_blocks",
         [](RunConfig& c, const std::string& v, const std::string& ctx) {
           c.model.stage_blocks.clear();
           for (auto b : to_int_list(v, ctx)) {
             if (b <= 0) throw ConfigError(ctx + ": block counts must be positive");
             c.model.stage_blocks.push_back(static_cast<std::size_t>(b));
           }
         }},
        {"base_channels",
         [](RunConfig& c, const std::string& v, const std::string& ctx) {
           const auto n = to_int(v, ctx);
           if (n <= 0) throw ConfigError(ctx + ": base_channels must be positive");
           c.model.base_channels = static_cast<std::size_t>(n);
         }},
        {"lr", double_field(&RunConfig::model, &M::lr)},
        {"momentum", double_field(&RunConfig::model, &M::momentum)},
        {"weight_decay", double_field(&RunConfig::model, &M::weight_decay)},
        {"batch_size", int_field(&RunConfig::model, &M::batch_size)},
        {"epochs", int_field(&RunConfig::model, &M::epochs)},
        {"folds", int_field(&RunConfig::model, &M::folds)},
        {"decision_threshold", double_field(&RunConfig::model, &M::decision_threshold)},
        {"window", int_field(&RunConfig::model, &M::window)},
        {"seed",
         [](RunConfig& c, const std::string& v, const std::string& ctx) {
           const auto n = to_int(v, ctx);
           if (n < 0) throw ConfigError(ctx + ": seed must be non-negative");
           c.model.seed = static_cast<std::uint64_t>(n);
         }}}},
      {"synth",
       {{"frame_size",
         [](RunConfig& c, const std::string& v, const std::string& ctx) {
           const auto n = to_int(v, ctx);
           if (n < 16 || n > 4096) throw ConfigError(ctx + ": frame_size must lie in [16, 4096]");
           c.synth.width = c.synth.height = static_cast<int>(n);
           c.synth.pixel_pitch_um = default_pixel_pitch_um(static_cast<int>(n));
         }},
        {"lead_frames", int_field(&RunConfig::synth, &G::lead_frames)},
        {"tail_frames", int_field(&RunConfig::synth, &G::tail_frames)},
        {"background_level", double_field(&RunConfig::synth, &G::background_level)},
        {"background_sigma", double_field(&RunConfig::synth, &G::background_sigma)},
        {"noise_sigma", double_field(&RunConfig::synth, &G::noise_sigma)},
        {"x_jitter_px", double_field(&RunConfig::synth, &G::x_jitter_px)}}},
      {"eval",
       {{"y_ref_mm", [](RunConfig& c, const std::string& v, const std::string& ctx) { c.y_ref_mm = to_double(v, ctx); }}}},
      {"study",
       {{"census_per_pair",
         [](RunConfig& c, const std::string& v, const std::string& ctx) {
           c.study.census_per_pair = static_cast<int>(to_int(v, ctx));
         }},
        {"train_per_pair",
         [](RunConfig& c, const std::string& v, const std::string& ctx) {
           c.study.train_per_pair.clear();
           for (auto n : to_int_list(v, ctx)) c.study.train_per_pair.push_back(static_cast<int>(n));
         }}}},
  };
  return table;
}

}  // namespace

void RunConfig::validate() const {
  try {
    sas.validate();
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (synth.lead_frames < 1 || synth.tail_frames < 1) throw ConfigError("synth: lead and tail frames must be >= 1");
  if (!(synth.background_level > 0.0)) throw ConfigError("synth: background_level must be positive");
  if (synth.background_sigma < 0.0 || synth.noise_sigma < 0.0) throw ConfigError("synth: noise must be non-negative");
  if (synth.x_jitter_px < 0.0) throw ConfigError("synth: x_jitter_px must be non-negative");
  if (!(y_ref_mm > 0.0)) throw ConfigError("eval: y_ref_mm must be positive");
  if (study.census_per_pair < 0) throw ConfigError("study: census_per_pair must be >= 0");
  if (study.train_per_pair.empty()) throw ConfigError("study: train_per_pair must not be empty");
  int prev = 0;
  for (int n : study.train_per_pair) {
    if (n <= prev) throw ConfigError("study: train_per_pair must be strictly increasing and positive");
    prev = n;
  }
}

synth::ConditionTable RunConfig::table() const {
  auto t = synth::ConditionTable::calibrated();
  t.geometry = synth;
  t.geometry.y_ref_mm = y_ref_mm;
  return t;
}

RunConfig parse_config(const std::string& text, const std::string& source) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(source + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig cfg;
  const auto& table = setters();
  for (const auto& [section, keys] : tree) {
    if (keys.empty() && !keys.data().empty()) {
      throw ConfigError(source + ": key '" + section + "' outside of a section");
    }
    auto sec = table.find(section);
    if (sec == table.end()) throw ConfigError(source + ": unknown section [" + section + "]");
    for (const auto& [key, value] : keys) {
      const auto ctx = source + ": [" + section + "] " + key;
      auto it = sec->second.find(key);
      if (it == sec->second.end()) throw ConfigError(source + ": unknown key '" + key + "' in [" + section + "]");
      it->second(cfg, trim(value.data()), ctx);
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string config_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["sas"] = {{"intensity_threshold", c.sas.intensity_threshold},
              {"area_threshold", c.sas.area_threshold},
              {"connectivity", static_cast<int>(c.sas.connectivity)},
              {"search_radius_px", c.sas.search_radius_px ? nlohmann::ordered_json(*c.sas.search_radius_px) : nullptr},
              {"search_radius_diameters", c.sas.search_radius_diameters},
              {"persistence", c.sas.persistence},
              {"track_gap", c.sas.track_gap}};
  j["model"] = {{"roi_size", c.model.roi_size},
                {"stage_blocks", c.model.stage_blocks},
                {"base_channels", c.model.base_channels},
                {"lr", c.model.lr},
                {"momentum", c.model.momentum},
                {"weight_decay", c.model.weight_decay},
                {"batch_size", c.model.batch_size},
                {"epochs", c.model.epochs},
                {"folds", c.model.folds},
                {"decision_threshold", c.model.decision_threshold},
                {"window", c.model.window},
                {"seed", c.model.seed}};
  j["synth"] = {{"width", c.synth.width},
                {"height", c.synth.height},
                {"pixel_pitch_um", c.synth.pixel_pitch_um},
                {"lead_frames", c.synth.lead_frames},
                {"tail_frames", c.synth.tail_frames},
                {"background_level", c.synth.background_level},
                {"background_sigma", c.synth.background_sigma},
                {"noise_sigma", c.synth.noise_sigma},
                {"x_jitter_px", c.synth.x_jitter_px}};
  j["eval"] = {{"y_ref_mm", c.y_ref_mm}};
  j["study"] = {{"census_per_pair", c.study.census_per_pair}, {"train_per_pair", c.study.train_per_pair}};
  return j.dump(2);
}

}  // namespace ignitrace::cli
