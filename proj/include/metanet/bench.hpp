#pragma once

// Problem presets, target generation, benchmark metrics and run orchestration.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "metanet/common.hpp"
#include "metanet/config.hpp"
#include "metanet/fea.hpp"
#include "metanet/homogenization.hpp"
#include "metanet/neural_field.hpp"
#include "metanet/objectives.hpp"
#include "metanet/postprocess.hpp"
#include "metanet/training.hpp"

namespace metanet {

// ---------------------------------------------------------------------------------------------
// Mesh helpers

enum class Side { Left, Right, Bottom, Top };

inline std::vector<int> edge_nodes(Dims nel, Side side) {
  std::vector<int> out;
  switch (side) {
    case Side::Left:
    case Side::Right: {
      const int i = side == Side::Left ? 0 : nel.x;
      for (int j = 0; j <= nel.y; ++j) out.push_back(node_id(nel, i, j));
      break;
    }
    case Side::Bottom:
    case Side::Top: {
      const int j = side == Side::Bottom ? 0 : nel.y;
      for (int i = 0; i <= nel.x; ++i) out.push_back(node_id(nel, i, j));
      break;
    }
  }
  return out;
}

/// comp: 0 = x, 1 = y, 2 = both.
inline std::vector<int> node_dofs(const std::vector<int>& nodes, int comp) {
  std::vector<int> out;
  for (int n : nodes) {
    if (comp != 1) out.push_back(2 * n);
    if (comp != 0) out.push_back(2 * n + 1);
  }
  return out;
}

inline void append(std::vector<int>& a, const std::vector<int>& b) { a.insert(a.end(), b.begin(), b.end()); }

inline std::vector<int> unique_sorted(std::vector<int> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

/// Drops DOFs that carry a support or prescribed value.
inline std::vector<int> free_only(const FeProblem& p, const std::vector<int>& dofs) {
  std::vector<char> constrained(static_cast<std::size_t>(p.ndof()), 0);
  for (int d : p.fixed_dofs) constrained[static_cast<std::size_t>(d)] = 1;
  for (const auto& v : p.prescribed) constrained[static_cast<std::size_t>(v.dof)] = 1;
  std::vector<int> out;
  for (int d : dofs)
    if (!constrained[static_cast<std::size_t>(d)]) out.push_back(d);
  return out;
}

inline std::vector<double> linear_ramp(double lo, double hi, int n) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = n == 1 ? lo : lo + (hi - lo) * i / (n - 1);
  return v;
}

// ---------------------------------------------------------------------------------------------
// Presets

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"bump", "displacement", "npr_a", "npr_b", "cloak", "tank", "bulk_bench"};
  return names;
}

namespace detail {

inline RunConfig npr_common(const std::string& name) {
  RunConfig c;
  c.preset = name;
  c.macro = {6, 6};
  c.micro = {30, 30};
  c.problem.nel = c.macro;
  c.target.kind = "poisson";
  c.target.poisson_ratio = -0.3;
  c.volume_targets.assign(36, 0.5);
  c.train.mode = ObjectiveMode::Displacement;
  c.output.render_upsamples = {1};
  return c;
}

}  // namespace detail

/// Fully expanded configuration of a named preset. Loads and displacements are normalized unit
/// values (E = 1, unit cell size = 1).
inline RunConfig preset_config(const std::string& name) {
  RunConfig c;
  c.preset = name;
  if (name == "bump") {
    // Both sides clamped, upward unit load at the bottom center, Gaussian bump on the top edge.
    c.macro = {12, 4};
    c.problem.nel = c.macro;
    append(c.problem.fixed_dofs, node_dofs(edge_nodes(c.macro, Side::Left), 2));
    append(c.problem.fixed_dofs, node_dofs(edge_nodes(c.macro, Side::Right), 2));
    c.problem.loads.push_back({2 * node_id(c.macro, 6, 0) + 1, 1.0});
    c.target.kind = "bump";
    c.target.amplitude = 10.0;
    c.target.width = 2.0;
    c.target.mask_dofs = free_only(c.problem, node_dofs(edge_nodes(c.macro, Side::Top), 1));
    c.volume_targets.assign(48, 0.5);
    c.train.mode = ObjectiveMode::Displacement;
    c.output.render_upsamples = {1, 4};
  } else if (name == "displacement") {
    // Left side clamped, unit stretch on the right side; the top edge should follow a material
    // without lateral contraction.
    c.macro = {12, 4};
    c.problem.nel = c.macro;
    append(c.problem.fixed_dofs, node_dofs(edge_nodes(c.macro, Side::Left), 2));
    for (int n : edge_nodes(c.macro, Side::Right)) c.problem.prescribed.push_back({2 * n, 1.0});
    c.target.kind = "poisson";
    c.target.poisson_ratio = 0.0;
    c.target.mask_dofs = free_only(c.problem, node_dofs(edge_nodes(c.macro, Side::Top), 2));
    c.volume_targets.assign(48, 0.5);
    c.train.mode = ObjectiveMode::Displacement;
    c.output.render_upsamples = {1};
    c.output.full_scale = true;
  } else if (name == "npr_a") {
    // Rollers on the bottom, uniform compression from the top; lateral edges should bulge inward.
    c = detail::npr_common(name);
    append(c.problem.fixed_dofs, node_dofs(edge_nodes(c.macro, Side::Bottom), 1));
    c.problem.fixed_dofs.push_back(2 * node_id(c.macro, 3, 0));
    for (int n : edge_nodes(c.macro, Side::Top)) c.problem.prescribed.push_back({2 * n + 1, -0.6});
    auto mask = node_dofs(edge_nodes(c.macro, Side::Left), 0);
    append(mask, node_dofs(edge_nodes(c.macro, Side::Right), 0));
    c.target.mask_dofs = free_only(c.problem, unique_sorted(mask));
  } else if (name == "npr_b") {
    // Clamped bottom, top pushed down while free to slide.
    c = detail::npr_common(name);
    append(c.problem.fixed_dofs, node_dofs(edge_nodes(c.macro, Side::Bottom), 2));
    for (int n : edge_nodes(c.macro, Side::Top)) c.problem.prescribed.push_back({2 * n + 1, -0.6});
    auto mask = node_dofs(edge_nodes(c.macro, Side::Left), 0);
    append(mask, node_dofs(edge_nodes(c.macro, Side::Right), 0));
    append(mask, node_dofs(edge_nodes(c.macro, Side::Top), 0));
    c.target.mask_dofs = free_only(c.problem, unique_sorted(mask));
  } else if (name == "cloak") {
    // Compressed block with a void 2x2 hole; the outer ring is tied to the base cell and the
    // outer boundary should move as if the block were uniformly filled with it.
    c.macro = {10, 10};
    c.micro = {20, 20};
    c.problem.nel = c.macro;
    append(c.problem.fixed_dofs, node_dofs(edge_nodes(c.macro, Side::Bottom), 1));
    c.problem.fixed_dofs.push_back(2 * node_id(c.macro, 5, 0));
    for (int n : edge_nodes(c.macro, Side::Top)) c.problem.prescribed.push_back({2 * n + 1, -1.0});
    std::vector<int> boundary;
    for (auto s : {Side::Left, Side::Right, Side::Bottom, Side::Top}) append(boundary, node_dofs(edge_nodes(c.macro, s), 2));
    c.target.kind = "base_cell";
    c.target.mask_dofs = free_only(c.problem, unique_sorted(boundary));
    c.base_cell = {"cross", 0.3};
    c.passive_cells = {44, 45, 54, 55};
    for (int y = 0; y < 10; ++y)
      for (int x = 0; x < 10; ++x)
        if (x == 0 || y == 0 || x == 9 || y == 9) c.band_cells.push_back(y * 10 + x);
    c.volume_targets.assign(100, 1.0 - 0.7 * 0.7);
    c.network.weight_init = 0.01;
    c.train.mode = ObjectiveMode::Displacement;
    c.train.weights.l1_base_weight = 10.0;
    c.output.render_upsamples = {1};
  } else if (name == "tank") {
    // Unrolled tank wall: clamped at the top ring, hoop pressure on the sides, propellant weight
    // on the bottom edge and engine thrust concentrated at the bottom center.
    c.macro = {8, 4};
    c.micro = {20, 20};
    c.problem.nel = c.macro;
    append(c.problem.fixed_dofs, node_dofs(edge_nodes(c.macro, Side::Top), 2));
    for (int n : edge_nodes(c.macro, Side::Left)) c.problem.loads.push_back({2 * n, -0.1});
    for (int n : edge_nodes(c.macro, Side::Right)) c.problem.loads.push_back({2 * n, 0.1});
    for (int n : edge_nodes(c.macro, Side::Bottom)) c.problem.loads.push_back({2 * n + 1, -0.1});
    c.problem.loads.push_back({2 * node_id(c.macro, 3, 0) + 1, 0.5});
    c.problem.loads.push_back({2 * node_id(c.macro, 5, 0) + 1, 0.5});
    c.volume_targets.assign(32, 0.4);
    c.train.mode = ObjectiveMode::Compliance;
    c.train.upsample = 2;
    c.output.render_upsamples = {1, 2, 8};
  } else if (name == "bulk_bench") {
    c.macro = {8, 1};
    c.problem.nel = c.macro;
    c.volume_targets = linear_ramp(0.4, 0.7, 8);
    c.train.mode = ObjectiveMode::BulkOnly;
    c.train.epochs = 1000;
    c.output.render_upsamples = {1};
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------------------------
// Derived problem data

inline Eigen::VectorXd base_cell_raster(const BaseCellSpec& spec, Dims micro) {
  Eigen::VectorXd r(micro.count());
  const auto pts = local_grid(micro);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto& p = pts[i];
    double v = 0.0;
    if (spec.kind == "solid") v = 1.0;
    else if (spec.kind == "cross") v = (std::abs(p.x) < 0.5 * spec.bar_width || std::abs(p.y) < 0.5 * spec.bar_width) ? 1.0 : 0.0;
    else throw InvalidArgument("no raster for base cell kind '" + spec.kind + "'");
    r(static_cast<Eigen::Index>(i)) = v;
  }
  return r;
}

inline ConstitutiveTensor base_cell_tensor(const RunConfig& c) {
  return homogenize(UnitCell{c.micro, base_cell_raster(c.base_cell, c.micro), c.material, c.penal, c.c0}).tensor;
}

inline Eigen::VectorXd target_mask(const RunConfig& c) {
  Eigen::VectorXd m = Eigen::VectorXd::Zero(c.problem.ndof());
  for (int d : c.target.mask_dofs) m(d) = 1.0;
  return m;
}

/// Target displacement over all macro DOFs.
inline DisplacementField make_target(const RunConfig& c) {
  const auto& t = c.target;
  if (t.kind == "bump") {
    DisplacementField u = DisplacementField::Zero(c.problem.ndof());
    const double xc = 0.5 * c.macro.x;
    for (int d : t.mask_dofs) {
      if (d % 2 != 1) continue;
      const double x = (d / 2) % (c.macro.x + 1);
      u(d) = t.amplitude * std::exp(-((x - xc) / t.width) * ((x - xc) / t.width));
    }
    return u;
  }
  if (t.kind == "poisson") {
    const Material m{c.material.youngs_modulus, t.poisson_ratio};
    const std::vector<ConstitutiveTensor> d(static_cast<std::size_t>(c.macro.count()), plane_stress_tensor(m));
    return assemble_and_solve(c.problem, d);
  }
  if (t.kind == "base_cell") {
    const std::vector<ConstitutiveTensor> d(static_cast<std::size_t>(c.macro.count()), base_cell_tensor(c));
    return assemble_and_solve(c.problem, d);
  }
  throw InvalidArgument("preset '" + c.preset + "' has no target displacement");
}

inline TopologyNetwork make_network(const RunConfig& c) {
  auto net = init_network(c.network);
  if (c.element_input_scale) net.input_scale = element_unit_scale(c.macro, c.micro);
  return net;
}

inline TrainProblem make_train_problem(const RunConfig& c) {
  TrainProblem tp;
  tp.macro = c.macro;
  tp.micro = c.micro;
  tp.params = {c.material, c.penal, c.c0};
  tp.problem = c.problem;
  tp.volume_targets = c.volume_targets;
  const auto n = static_cast<std::size_t>(c.macro.count());
  tp.passive = detail::mask_from_cells(c.passive_cells, n, "passive_cells");
  if (c.train.mode == ObjectiveMode::Displacement) {
    tp.target = make_target(c);
    tp.mask = target_mask(c);
  }
  if (!c.band_cells.empty()) {
    tp.base_cell = base_cell_raster(c.base_cell, c.micro);
    tp.band = detail::mask_from_cells(c.band_cells, n, "band_cells");
  }
  return with_baseline(std::move(tp), c.train.mode);
}

// ---------------------------------------------------------------------------------------------
// Metrics

/// Both forms of the cloaking error: `printed` = sqrt(sum (u - u_t)^2) / sum u_t^2 and
/// `normalized` = sqrt(sum (u - u_t)^2 / sum u_t^2).
struct DeltaMetric {
  double printed = 0.0;
  double normalized = 0.0;
};

inline DeltaMetric delta_metric(const Eigen::VectorXd& u, const Eigen::VectorXd& target) {
  require(u.size() == target.size(), "delta_metric: length mismatch");
  const double tt = target.squaredNorm();
  if (tt == 0.0) throw InvalidArgument("delta_metric: target is zero");
  const double dd = (u - target).squaredNorm();
  return {std::sqrt(dd) / tt, std::sqrt(dd / tt)};
}

/// Restriction of a full DOF vector to the DOFs selected by a mask.
inline Eigen::VectorXd masked(const Eigen::VectorXd& v, const std::vector<int>& dofs) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(dofs.size()));
  for (std::size_t i = 0; i < dofs.size(); ++i) out(static_cast<Eigen::Index>(i)) = v(dofs[i]);
  return out;
}

struct PercentHs {
  std::vector<double> per_cell;
  double mean = 0.0;
};

/// 100 * bulk modulus / HS upper bound at each cell's actual volume fraction.
inline PercentHs percent_hs_report(std::span<const ConstitutiveTensor> tensors, std::span<const double> volumes,
                                   const Material& m) {
  require(tensors.size() == volumes.size(), "percent_hs_report: one volume per tensor");
  PercentHs r;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const double v = std::clamp(volumes[i], 1e-12, 1.0);
    r.per_cell.push_back(100.0 * bulk_modulus(tensors[i]) / hs_upper_bound(v, m));
  }
  for (double p : r.per_cell) r.mean += p / static_cast<double>(r.per_cell.size());
  return r;
}

/// Macro problem, target and mask mapped onto a raster with `pitch` pixels per cell.
inline FullScaleReport verify_full_scale(const RunConfig& c, const RenderedDesign& design) {
  if (design.size.x % c.macro.x != 0 || design.size.y % c.macro.y != 0 || design.size.x / c.macro.x != design.size.y / c.macro.y)
    throw InvalidArgument("raster is not an isotropic integer refinement of the macro grid");
  const int pitch = design.size.x / c.macro.x;
  const FeProblem fine = scale_problem(c.problem, pitch);
  const DisplacementField macro_target = make_target(c);
  DisplacementField target = DisplacementField::Zero(fine.ndof());
  Eigen::VectorXd mask = Eigen::VectorXd::Zero(fine.ndof());
  for (int d : c.target.mask_dofs) {
    const int fd = scale_dof(c.macro, d, pitch);
    target(fd) = macro_target(d) * pitch;
    mask(fd) = 1.0;
  }
  return full_scale_verify(design, fine, target, mask, c.material, c.penal, c.c0, pitch);
}

struct RenderStats {
  int upsample = 1;
  ConnectivityReport connectivity;
  std::string raster;
  std::string cleaned;
};

/// Numbers recomputed from (config, trained network) alone.
struct MetricReport {
  int epoch = 0;
  std::vector<double> volumes;
  std::vector<double> volume_targets;
  PercentHs hs;
  std::optional<double> rmse;
  std::optional<double> mismatch;
  std::optional<double> compliance_ratio;
  std::optional<DeltaMetric> delta;
  std::optional<double> band_l1;
  std::optional<FullScaleReport> full_scale;
  std::vector<RenderStats> renders;
};

inline std::string provenance_hash(const RunConfig& c) {
  const std::string s = to_json(c).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

/// Evaluates the trained field at one subcell per macro cell (upsample 1) and measures it.
inline MetricReport compute_metrics(const RunConfig& c, const TopologyNetwork& net, int epoch) {
  MetricReport r;
  r.epoch = epoch;
  const auto tp = make_train_problem(c);
  const auto coords = build_coordinates(c.macro, c.micro, 1);
  CellGrid cells = make_cell_grid(c.macro, c.micro, forward(net, coords), tp.passive);
  homogenize_grid(cells, tp.params);
  std::vector<ConstitutiveTensor> active_t;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (cells.is_passive(i)) continue;
    r.volumes.push_back(cells.rho[i].mean());
    r.volume_targets.push_back(c.volume_targets[i]);
    active_t.push_back(cells.tensors[i]);
  }
  r.hs = percent_hs_report(active_t, r.volumes, c.material);
  if (c.train.mode == ObjectiveMode::Displacement) {
    const auto t = displacement_match_loss(cells, tp.problem, tp.target, tp.mask);
    r.mismatch = t.value;
    r.rmse = rmse(t.u, tp.target, tp.mask);
    if (c.target.kind == "base_cell") r.delta = delta_metric(masked(t.u, c.target.mask_dofs), masked(tp.target, c.target.mask_dofs));
  } else if (c.train.mode == ObjectiveMode::Compliance) {
    r.compliance_ratio = compliance_loss(cells, tp.problem, tp.compliance_baseline).value;
  }
  if (!tp.band.empty()) r.band_l1 = base_cell_l1(cells, tp.base_cell, tp.band).value;
  if (c.output.full_scale) {
    auto design = render(net, c.macro, c.micro, 1, c.output.pixel_budget);
    r.full_scale = verify_full_scale(c, design);
  }
  for (int s : c.output.render_upsamples) {
    const auto d = render(net, c.macro, c.micro, s, c.output.pixel_budget);
    r.renders.push_back({s, connectivity_metric(d, c.output.connectivity_cutoff), {}, {}});
  }
  return r;
}

inline nlohmann::json to_json(const MetricReport& m) {
  using nlohmann::json;
  json j;
  j["epoch"] = m.epoch;
  j["volumes"] = m.volumes;
  j["volume_targets"] = m.volume_targets;
  j["percent_hs"] = m.hs.per_cell;
  j["percent_hs_mean"] = m.hs.mean;
  auto opt = [&](const char* k, const std::optional<double>& v) { j[k] = v ? json(*v) : json(nullptr); };
  opt("rmse", m.rmse);
  opt("mismatch", m.mismatch);
  opt("compliance_ratio", m.compliance_ratio);
  opt("band_l1", m.band_l1);
  j["delta"] = m.delta ? json{{"printed", m.delta->printed}, {"normalized", m.delta->normalized}} : json(nullptr);
  if (m.full_scale)
    j["full_scale"] = {{"rmse_pixels", m.full_scale->rmse},
                       {"rmse_macro_units", m.full_scale->rmse_macro_units},
                       {"mean_signed_error", m.full_scale->mean_signed_error},
                       {"relative_residual", m.full_scale->relative_residual}};
  else
    j["full_scale"] = nullptr;
  j["renders"] = json::array();
  for (const auto& r : m.renders)
    j["renders"].push_back({{"upsample", r.upsample},
                            {"components", r.connectivity.components},
                            {"largest_fraction", r.connectivity.largest_fraction},
                            {"mean_boundary_jump", r.connectivity.mean_boundary_jump},
                            {"raster", r.raster},
                            {"cleaned", r.cleaned}});
  return j;
}

// ---------------------------------------------------------------------------------------------
// Runs

struct RunSummary {
  std::string provenance;
  std::vector<EpochRecord> log;
  MetricReport metrics;
  double wall_seconds = 0.0;
  std::vector<std::string> artifacts;

  [[nodiscard]] const LossReport& final_loss() const { return log.back().report; }
};

struct RunOptions {
  bool render_only = false;
  bool progress = true;
  std::ostream* out = &std::cout;
};

namespace detail {

/// Records files written by a run and deletes them unless the run completes.
class ArtifactGuard {
 public:
  explicit ArtifactGuard(std::filesystem::path dir) : dir_(std::move(dir)) {}
  ArtifactGuard(const ArtifactGuard&) = delete;
  ArtifactGuard& operator=(const ArtifactGuard&) = delete;
  ~ArtifactGuard() {
    if (done_) return;
    std::error_code ec;
    for (const auto& p : created_) std::filesystem::remove(p, ec);
  }
  std::string add(const std::string& name) {
    const auto p = dir_ / name;
    if (!std::filesystem::exists(p)) created_.push_back(p);
    names_.push_back(name);
    return p.string();
  }
  void commit() { done_ = true; }
  [[nodiscard]] const std::vector<std::string>& names() const { return names_; }

 private:
  std::filesystem::path dir_;
  std::vector<std::filesystem::path> created_;
  std::vector<std::string> names_;
  bool done_ = false;
};

inline std::vector<EpochRecord> read_log(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open " + path);
  std::string line;
  std::getline(is, line);
  std::vector<EpochRecord> log;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 8) throw ConfigError(path + ": malformed log row");
    EpochRecord r;
    r.epoch = std::stoi(f[0]);
    r.report.total = std::stod(f[1]);
    r.report.structural = std::stod(f[2]);
    r.report.volume = std::stod(f[3]);
    r.report.boundary = std::stod(f[4]);
    r.report.regularization = std::stod(f[5]);
    if (!f[6].empty()) r.report.rmse = std::stod(f[6]);
    r.report.alpha = std::stod(f[7]);
    log.push_back(r);
  }
  return log;
}

}  // namespace detail

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return from_json(j);
}

inline void save_config(const std::string& path, const RunConfig& c) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path);
  os << to_json(c).dump(2) << '\n';
}

/// train -> render -> postprocess -> optional full-scale verify -> metrics, all under `out_dir`.
inline RunSummary run(const RunConfig& cfg, const std::string& out_dir, const RunOptions& opt = {}) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  detail::ArtifactGuard guard(out_dir);
  const auto t0 = std::chrono::steady_clock::now();
  RunSummary s;
  s.provenance = provenance_hash(cfg);

  TopologyNetwork net;
  int epoch = 0;
  const std::string ck_path = (fs::path(out_dir) / "checkpoint.bin").string();
  const std::string log_path = (fs::path(out_dir) / "log.csv").string();
  if (opt.render_only) {
    auto ck = load_checkpoint(ck_path);
    if (ck.provenance != s.provenance) throw ConfigError("checkpoint was produced by a different config");
    net = std::move(ck.net);
    epoch = ck.state.epoch;
    s.log = detail::read_log(log_path);
  } else {
    save_config(guard.add("config.json"), cfg);
    net = make_network(cfg);
    const auto tp = make_train_problem(cfg);
    TrainState state;
    std::ofstream log(guard.add("log.csv"));
    write_log_header(log);
    s.log = train(net, state, tp, cfg.train, [&](const EpochRecord& r) {
      write_log_row(log, r);
      if (opt.progress && opt.out)
        *opt.out << "epoch " << r.epoch << "/" << cfg.train.epochs << " total " << r.report.total << " structural "
                 << r.report.structural << (r.report.rmse ? " rmse " + format_real(*r.report.rmse) : std::string())
                 << '\n';
    });
    log.flush();
    epoch = state.epoch;
    save_checkpoint(guard.add("checkpoint.bin"), {net, state, s.provenance});
  }

  s.metrics = compute_metrics(cfg, net, epoch);
  const auto protect_problem = cfg.train.mode == ObjectiveMode::BulkOnly ? std::optional<FeProblem>{} : cfg.problem;
  for (auto& rs : s.metrics.renders) {
    auto d = render(net, cfg.macro, cfg.micro, rs.upsample, cfg.output.pixel_budget);
    d.provenance = s.provenance;
    d.epoch = epoch;
    rs.raster = "render_" + std::to_string(rs.upsample) + "x.pgm";
    write_pgm(guard.add(rs.raster), d);
    if (cfg.output.postprocess) {
      const PixelMask protect = protect_problem ? boundary_protection(d, *protect_problem) : PixelMask{};
      const auto clean = remove_dangling(d, cfg.output.low, cfg.output.high, cfg.output.min_area, protect);
      rs.cleaned = "clean_" + std::to_string(rs.upsample) + "x.pgm";
      write_pgm(guard.add(rs.cleaned), clean, provenance_comment(d));
    }
  }
  s.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  guard.add("summary.json");
  s.artifacts = guard.names();

  nlohmann::json j;
  j["provenance"] = s.provenance;
  j["preset"] = cfg.preset;
  j["final_loss"] = {{"epoch", s.log.empty() ? 0 : s.log.back().epoch},
                     {"total", s.log.empty() ? 0.0 : s.final_loss().total},
                     {"first_total", s.log.empty() ? 0.0 : s.log.front().report.total}};
  j["metrics"] = to_json(s.metrics);
  j["wall_seconds"] = s.wall_seconds;
  j["artifacts"] = s.artifacts;
  std::ofstream(fs::path(out_dir) / "summary.json") << j.dump(2) << '\n';
  guard.commit();
  return s;
}

/// Recomputes the metric block of a finished run from its config and checkpoint.
inline MetricReport recompute_metrics(const std::string& dir) {
  namespace fs = std::filesystem;
  const auto cfg = load_config((fs::path(dir) / "config.json").string());
  const auto ck = load_checkpoint((fs::path(dir) / "checkpoint.bin").string());
  if (ck.provenance != provenance_hash(cfg)) throw ConfigError(dir + ": checkpoint does not belong to config.json");
  return compute_metrics(cfg, ck.net, ck.state.epoch);
}

}  // namespace metanet
