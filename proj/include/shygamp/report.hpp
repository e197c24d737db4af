#pragma once

// Machine-readable run report.

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "shygamp/gamp.hpp"
#include "shygamp/input_denoisers.hpp"
#include "shygamp/output_denoisers.hpp"

namespace shygamp {

inline std::string to_string(Mode m) { return m == Mode::SPA ? "spa" : "msa"; }

inline std::string to_string(Tuner t) {
  switch (t) {
    case Tuner::EM: return "em";
    case Tuner::SURE: return "sure";
    case Tuner::Fixed: return "fixed";
  }
  return "?";
}

inline std::string to_string(MomentMethod m) {
  switch (m) {
    case MomentMethod::GM: return "gm";
    case MomentMethod::IS: return "is";
    case MomentMethod::NI: return "ni";
    case MomentMethod::TS: return "ts";
  }
  return "?";
}

struct DatasetDescriptor {
  std::string source;
  std::int64_t samples = 0;
  std::int64_t features = 0;
  int classes = 0;
  std::int64_t test_samples = 0;
  std::vector<std::string> labels;  ///< original label value for class 1..D
};

struct ReportRecord {
  std::string run_id;
  std::string mode;
  std::string moment_method;
  std::string tuner;
  int iterations = 0;
  bool converged = false;
  double tuning_seconds = 0;
  double training_seconds = 0;
  double evaluation_seconds = 0;
  double error_rate = 0;
  double error_se = 0;
  double k99 = 0;
  double l0 = 0;
  HyperParameters hyperparameters;
  std::uint64_t seed = 0;
  DatasetDescriptor dataset;
};

inline nlohmann::json to_json(const ReportRecord& r) {
  nlohmann::json j;
  j["run_id"] = r.run_id;
  j["mode"] = r.mode;
  j["moment_method"] = r.moment_method;
  j["tuner"] = r.tuner;
  j["iterations"] = r.iterations;
  j["converged"] = r.converged;
  j["timing"] = {{"tuning", r.tuning_seconds}, {"training", r.training_seconds}, {"evaluation", r.evaluation_seconds}};
  j["error_rate"] = r.error_rate;
  j["error_se"] = r.error_se;
  j["k99"] = r.k99;
  j["l0"] = r.l0;
  j["hyperparameters"] = nlohmann::json::object();
  for (const auto& [k, v] : r.hyperparameters) j["hyperparameters"][k] = v;
  j["seed"] = r.seed;
  j["dataset"] = {{"source", r.dataset.source},
                  {"samples", r.dataset.samples},
                  {"features", r.dataset.features},
                  {"classes", r.dataset.classes},
                  {"test_samples", r.dataset.test_samples},
                  {"labels", r.dataset.labels}};
  return j;
}

/// FNV-1a over the given text, as 16 hex digits.
inline std::string stable_run_id(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace shygamp
