#pragma once

// On-disk cache of fitted soft-max GM approximations, one plain-text file
// per (D, L):
//
//   shygamp-gm-approx 1
//   num_classes <D>
//   components <L>
//   fit_error <sup-norm residual>
//   grid <free text>
//   alpha <a_1> ... <a_L>
//   mu <m_1> ... <m_L>
//   sigma <s_1> ... <s_L>
//
// Numbers are written with 17 significant digits so a reload is exact.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>

#include "shygamp/errors.hpp"
#include "shygamp/output_denoisers.hpp"

namespace shygamp {

inline std::filesystem::path default_gm_cache_dir() {
  if (const char* env = std::getenv("SHYGAMP_GM_CACHE"); env && *env) return env;
  if (const char* xdg = std::getenv("XDG_CACHE_HOME"); xdg && *xdg) return std::filesystem::path(xdg) / "shygamp";
  if (const char* home = std::getenv("HOME"); home && *home) return std::filesystem::path(home) / ".cache" / "shygamp";
  return std::filesystem::temp_directory_path() / "shygamp";
}

inline std::string serialize_gm_approx(const GmLikApprox& g) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "shygamp-gm-approx 1\n";
  os << "num_classes " << g.num_classes << "\n";
  os << "components " << g.size() << "\n";
  os << "fit_error " << g.fit_error << "\n";
  os << "grid " << g.grid << "\n";
  auto row = [&](const char* key, const std::vector<double>& v) {
    os << key;
    for (double x : v) os << ' ' << x;
    os << '\n';
  };
  row("alpha", g.alpha);
  row("mu", g.mu);
  row("sigma", g.sigma);
  return os.str();
}

inline GmLikApprox parse_gm_approx(const std::string& text) {
  std::istringstream is(text);
  std::string line, key;
  std::size_t lineno = 0;
  auto next = [&](const char* expect) -> std::istringstream {
    if (!std::getline(is, line)) throw ParseError(std::string("GM cache: missing ") + expect, lineno + 1);
    ++lineno;
    std::istringstream ls(line);
    ls >> key;
    if (key != expect) throw ParseError(std::string("GM cache: expected ") + expect, lineno);
    return ls;
  };
  GmLikApprox g;
  {
    auto ls = next("shygamp-gm-approx");
    int version = 0;
    if (!(ls >> version) || version != 1) throw ParseError("GM cache: unsupported version", lineno);
  }
  std::size_t big_l = 0;
  if (!(next("num_classes") >> g.num_classes)) throw ParseError("GM cache: bad num_classes", lineno);
  if (!(next("components") >> big_l) || big_l == 0) throw ParseError("GM cache: bad components", lineno);
  if (!(next("fit_error") >> g.fit_error)) throw ParseError("GM cache: bad fit_error", lineno);
  {
    auto ls = next("grid");
    std::getline(ls >> std::ws, g.grid);
  }
  auto vec = [&](const char* name, std::vector<double>& out) {
    auto ls = next(name);
    out.resize(big_l);
    for (auto& x : out)
      if (!(ls >> x)) throw ParseError(std::string("GM cache: short ") + name + " row", lineno);
  };
  vec("alpha", g.alpha);
  vec("mu", g.mu);
  vec("sigma", g.sigma);
  for (double s : g.sigma)
    if (!(s > 0.0)) throw ParseError("GM cache: sigma must be positive");
  return g;
}

inline std::filesystem::path gm_cache_file(const std::filesystem::path& dir, int num_classes, int num_components) {
  return dir / ("gm_D" + std::to_string(num_classes) + "_L" + std::to_string(num_components) + ".txt");
}

/// Writes to a unique temporary file in the same directory, then renames it
/// over the destination so concurrent readers never see a partial record.
inline void store_gm_approx(const std::filesystem::path& dir, const GmLikApprox& g) {
  std::filesystem::create_directories(dir);
  const auto dest = gm_cache_file(dir, g.num_classes, static_cast<int>(g.size()));
  std::random_device rd;
  const auto tmp = dest.string() + ".tmp" + std::to_string(rd());
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error("cannot write GM cache file " + tmp);
    out << serialize_gm_approx(g);
    if (!out) throw Error("failed writing GM cache file " + tmp);
  }
  std::filesystem::rename(tmp, dest);
}

inline std::optional<GmLikApprox> load_gm_approx(const std::filesystem::path& dir, int num_classes,
                                                 int num_components) {
  std::ifstream in(gm_cache_file(dir, num_classes, num_components));
  if (!in) return std::nullopt;
  std::stringstream ss;
  ss << in.rdbuf();
  auto g = parse_gm_approx(ss.str());
  if (g.num_classes != num_classes || static_cast<int>(g.size()) != num_components)
    throw ParseError("GM cache record does not match its file name");
  return g;
}

/// Cached fit; fits and stores on a miss.
inline GmLikApprox load_or_fit_gm_approx(int num_classes, int num_components = 2,
                                         const std::filesystem::path& dir = default_gm_cache_dir()) {
  if (auto g = load_gm_approx(dir, num_classes, num_components)) return *g;
  auto g = fit_softmax_gm_approx(num_classes, num_components);
  store_gm_approx(dir, g);
  return g;
}

}  // namespace shygamp
