#pragma once

// Builds the denoiser pair implied by a GampConfig and runs the engine.

#include <filesystem>
#include <memory>
#include <optional>

#include "shygamp/gamp.hpp"
#include "shygamp/gm_cache.hpp"
#include "shygamp/input_denoisers.hpp"
#include "shygamp/output_denoisers.hpp"

namespace shygamp {

struct TrainSettings {
  GampConfig config;
  double lambda = 1.0;  ///< initial (SURE) or fixed Laplace scale for min-sum mode
  std::optional<BgPrior> prior;  ///< sum-product prior; default from data statistics
  int gm_components = 2;
  std::filesystem::path gm_cache_dir = default_gm_cache_dir();
  unsigned workers = 1;
  RunOptions run_options;
};

inline TrainResult train(const Dataset& data, const TrainSettings& s) {
  s.config.validate();
  if (s.config.mode == Mode::MSA) {
    LaplaceInputDenoiser in(s.lambda, s.config.tuner == Tuner::SURE);
    MsaOutputDenoiser out(50, s.workers);
    return run(data, s.config, in, out, s.run_options);
  }
  BgPrior prior = s.prior ? *s.prior
                          : BgPrior::initial(data.num_samples(), data.num_features(), data.num_classes(),
                                             data.frobenius_sq());
  BgInputDenoiser in(std::move(prior), s.config.tuner == Tuner::EM);
  std::shared_ptr<const GmLikApprox> approx;
  const auto method = s.config.moment_method;
  if (method == MomentMethod::GM || method == MomentMethod::TS)
    approx = std::make_shared<const GmLikApprox>(
        load_or_fit_gm_approx(data.num_classes(), s.gm_components, s.gm_cache_dir));
  SpaOutputDenoiser::Settings os;
  os.method = method;
  os.seed = s.config.seed;
  os.workers = s.workers;
  SpaOutputDenoiser out(os, approx);
  return run(data, s.config, in, out, s.run_options);
}

}  // namespace shygamp
