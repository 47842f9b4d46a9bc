#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "metanet/metanet.hpp"

namespace fs = std::filesystem;
using namespace metanet;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

RunConfig resolve_config(const std::string& arg) {
  if (arg.rfind("preset:", 0) == 0) return preset_config(arg.substr(7));
  return load_config(arg);
}

/// Largest absolute difference between numeric leaves present in both documents.
double max_numeric_diff(const nlohmann::json& a, const nlohmann::json& b) {
  if (a.is_number() && b.is_number()) return std::abs(a.get<double>() - b.get<double>());
  double m = 0.0;
  if (a.is_object() && b.is_object()) {
    for (const auto& [k, v] : a.items())
      if (b.contains(k)) m = std::max(m, max_numeric_diff(v, b[k]));
  } else if (a.is_array() && b.is_array()) {
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, max_numeric_diff(a[i], b[i]));
  }
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-scale metamaterial design with a coordinate network"};
  app.require_subcommand(1);

  std::string config_arg, out_dir = "out";
  bool render_only = false, quiet = false;
  int epochs_override = 0, upsample_override = 0;
  auto* opt = app.add_subcommand("optimize", "Train, render, clean up and report one configuration");
  opt->add_option("config", config_arg, "Config file, or preset:<name>")->required();
  opt->add_option("-o,--out", out_dir, "Output directory");
  opt->add_flag("--render-only", render_only, "Reuse the checkpoint in the output directory");
  opt->add_option("--epochs", epochs_override, "Override train.epochs");
  opt->add_option("--upsample", upsample_override, "Override train.upsample");
  opt->add_flag("-q,--quiet", quiet, "No per-epoch progress");

  std::string preset_name, preset_out;
  auto* pre = app.add_subcommand("preset", "Print the expanded config of a preset");
  pre->add_option("name", preset_name)->required()->check(CLI::IsMember(preset_names()));
  pre->add_option("-o,--out", preset_out, "Write to a file instead of stdout");

  std::string ck_path, render_config, render_out;
  int render_upsample = 1;
  auto* ren = app.add_subcommand("render", "Render a checkpoint at any upsampling");
  ren->add_option("checkpoint", ck_path)->required()->check(CLI::ExistingFile);
  ren->add_option("--upsample", render_upsample)->check(CLI::PositiveNumber);
  ren->add_option("--config", render_config, "Config of the run (default: config.json next to the checkpoint)");
  ren->add_option("-o,--out", render_out, "Output PGM (default: render_<N>x.pgm next to the checkpoint)");

  std::string raster_path, pp_out, pp_config;
  double low = 0.3, high = 0.5;
  long long min_area = 400;
  auto* pp = app.add_subcommand("postprocess", "Island and dangling-edge removal on a PGM raster");
  pp->add_option("raster", raster_path)->required()->check(CLI::ExistingFile);
  pp->add_option("--low", low);
  pp->add_option("--high", high);
  pp->add_option("--min-area", min_area);
  pp->add_option("--config", pp_config, "Protect supports and loads of this config's macro problem");
  pp->add_option("-o,--out", pp_out, "Output mask PGM");

  std::string verify_raster, verify_config;
  auto* ver = app.add_subcommand("verify", "Full-scale FE check of a rendered raster against a config's target");
  ver->add_option("raster", verify_raster)->required()->check(CLI::ExistingFile);
  ver->add_option("config", verify_config)->required();

  std::string metrics_dir;
  auto* met = app.add_subcommand("metrics", "Recompute the metrics of a finished run from its artifacts");
  met->add_option("artifacts", metrics_dir)->required()->check(CLI::ExistingDirectory);

  double vf = 0.5, young = 1.0, nu = 0.3;
  auto* hs = app.add_subcommand("hs-bound", "Hashin-Shtrikman upper bound on the plane bulk modulus");
  hs->add_option("--vf", vf)->required();
  hs->add_option("--E", young);
  hs->add_option("--nu", nu);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*opt) {
      RunConfig cfg = resolve_config(config_arg);
      if (epochs_override > 0) cfg.train.epochs = epochs_override;
      if (upsample_override > 0) cfg.train.upsample = upsample_override;
      cfg.validate();
      RunOptions ro;
      ro.render_only = render_only;
      ro.progress = !quiet;
      const auto s = run(cfg, out_dir, ro);
      std::ifstream summary(fs::path(out_dir) / "summary.json");
      std::cout << summary.rdbuf();
    } else if (*pre) {
      const auto j = to_json(preset_config(preset_name)).dump(2);
      if (preset_out.empty()) {
        std::cout << j << '\n';
      } else {
        std::ofstream(preset_out) << j << '\n';
      }
    } else if (*ren) {
      const fs::path dir = fs::path(ck_path).parent_path();
      const auto cfg = load_config(render_config.empty() ? (dir / "config.json").string() : render_config);
      const auto ck = load_checkpoint(ck_path);
      auto d = render(ck.net, cfg.macro, cfg.micro, render_upsample, cfg.output.pixel_budget);
      d.provenance = ck.provenance;
      d.epoch = ck.state.epoch;
      const std::string out = render_out.empty() ? (dir / ("render_" + std::to_string(render_upsample) + "x.pgm")).string() : render_out;
      write_pgm(out, d);
      std::cout << out << ' ' << d.size.x << 'x' << d.size.y << '\n';
    } else if (*pp) {
      const auto d = read_pgm(raster_path);
      PixelMask protect;
      if (!pp_config.empty()) protect = boundary_protection(d, load_config(pp_config).problem);
      const auto islands = remove_islands(d, low, min_area, protect);
      const auto clean = remove_dangling(d, low, high, min_area, protect);
      const std::string out = pp_out.empty() ? (fs::path(raster_path).replace_extension().string() + "_clean.pgm") : pp_out;
      write_pgm(out, clean, provenance_comment(d));
      long long removed_islands = 0, removed_dangling = 0;
      const auto raw = binarize(d, low);
      for (std::size_t i = 0; i < raw.size(); ++i) {
        removed_islands += raw[i] && !islands.mask[i];
        removed_dangling += islands.mask[i] && !clean.mask[i];
      }
      std::cout << out << " islands_removed_px " << removed_islands << " dangling_removed_px " << removed_dangling << '\n';
    } else if (*ver) {
      const auto cfg = load_config(verify_config);
      const auto d = read_pgm(verify_raster);
      const auto r = verify_full_scale(cfg, d);
      const auto conn = connectivity_metric(d, cfg.output.connectivity_cutoff);
      nlohmann::json j{{"rmse_pixels", r.rmse},
                       {"rmse_macro_units", r.rmse_macro_units},
                       {"mean_signed_error", r.mean_signed_error},
                       {"relative_residual", r.relative_residual},
                       {"largest_fraction", conn.largest_fraction},
                       {"components", conn.components}};
      std::cout << j.dump(2) << '\n';
    } else if (*met) {
      const auto m = to_json(recompute_metrics(metrics_dir));
      nlohmann::json out{{"metrics", m}};
      const fs::path summary = fs::path(metrics_dir) / "summary.json";
      if (fs::exists(summary)) {
        std::ifstream is(summary);
        const auto saved = nlohmann::json::parse(is);
        out["max_abs_diff_vs_summary"] = max_numeric_diff(m, saved.at("metrics"));
      }
      std::cout << out.dump(2) << '\n';
    } else if (*hs) {
      const Material m{young, nu};
      std::cout << format_real(hs_upper_bound(vf, m)) << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
