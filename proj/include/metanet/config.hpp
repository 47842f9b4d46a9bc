#pragma once

// Versioned JSON run configuration. One file fully determines a run.

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metanet/common.hpp"
#include "metanet/fea.hpp"
#include "metanet/neural_field.hpp"
#include "metanet/objectives.hpp"
#include "metanet/postprocess.hpp"
#include "metanet/training.hpp"

namespace metanet {

inline constexpr int kConfigVersion = 1;

/// How the target displacement is produced. Kinds: none, bump, poisson, base_cell.
struct TargetSpec {
  std::string kind = "none";
  double amplitude = 0.0;        // bump: peak u_y
  double width = 1.0;            // bump: Gaussian width in macro cells
  double poisson_ratio = -0.3;   // poisson: hypothetical homogeneous material
  std::vector<int> mask_dofs;    // DOFs where the mismatch is measured
  friend bool operator==(const TargetSpec&, const TargetSpec&) = default;
};

/// Parametric reference cell. Kinds: none, solid, cross (bars of `bar_width` through the center).
struct BaseCellSpec {
  std::string kind = "none";
  double bar_width = 0.3;
  friend bool operator==(const BaseCellSpec&, const BaseCellSpec&) = default;
};

struct OutputSpec {
  std::vector<int> render_upsamples{1};
  bool postprocess = true;
  double low = 0.3;
  double high = 0.5;
  long long min_area = 400;
  bool full_scale = false;
  double connectivity_cutoff = 0.5;
  long long pixel_budget = kDefaultPixelBudget;
  friend bool operator==(const OutputSpec&, const OutputSpec&) = default;
};

struct RunConfig {
  int version = kConfigVersion;
  std::string preset;
  Dims macro{1, 1};
  Dims micro{30, 30};
  Material material;
  double penal = 3.0;
  double c0 = 1e-9;
  FeProblem problem;
  TargetSpec target;
  std::vector<double> volume_targets;
  std::vector<int> passive_cells;
  BaseCellSpec base_cell;
  std::vector<int> band_cells;
  NetworkInit network;
  bool element_input_scale = true;
  TrainConfig train;
  OutputSpec output;

  void validate() const;
};

// ---------------------------------------------------------------------------------------------

namespace detail {

using nlohmann::json;

inline void check_keys(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw ConfigError((path.empty() ? k : path + "." + k) + ": unknown field");
}

template <class T>
T field(const json& j, const std::string& key, const std::string& path, const T& fallback) {
  const std::string p = path.empty() ? key : path + "." + key;
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(p + ": wrong type");
  }
}

inline Dims dims_field(const json& j, const std::string& key, const std::string& path, Dims fallback) {
  const auto v = field<std::vector<int>>(j, key, path, {fallback.x, fallback.y});
  if (v.size() != 2) throw ConfigError(path + "." + key + ": expected [x, y]");
  return {v[0], v[1]};
}

inline json nodal_json(const std::vector<NodalValue>& v) {
  json a = json::array();
  for (const auto& n : v) a.push_back({n.dof, n.value});
  return a;
}

inline std::vector<NodalValue> nodal_field(const json& j, const std::string& key, const std::string& path) {
  std::vector<NodalValue> out;
  if (!j.contains(key)) return out;
  const auto& a = j.at(key);
  const std::string p = path + "." + key;
  if (!a.is_array()) throw ConfigError(p + ": expected [[dof, value], ...]");
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& e = a[i];
    if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number())
      throw ConfigError(p + "[" + std::to_string(i) + "]: expected [dof, value]");
    out.push_back({e[0].get<int>(), e[1].get<double>()});
  }
  return out;
}

inline std::vector<int> cells_from_mask(const std::vector<std::uint8_t>& m) {
  std::vector<int> out;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) out.push_back(static_cast<int>(i));
  return out;
}

inline std::vector<std::uint8_t> mask_from_cells(const std::vector<int>& ids, std::size_t n, const std::string& path) {
  std::vector<std::uint8_t> m;
  if (ids.empty()) return m;
  m.assign(n, 0);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= n) throw ConfigError(path + ": element id " + std::to_string(id) + " out of range");
    m[static_cast<std::size_t>(id)] = 1;
  }
  return m;
}

}  // namespace detail

inline ObjectiveMode parse_mode(const std::string& s) {
  if (s == "compliance") return ObjectiveMode::Compliance;
  if (s == "displacement") return ObjectiveMode::Displacement;
  if (s == "bulk_only") return ObjectiveMode::BulkOnly;
  throw ConfigError("train.mode: unknown objective mode '" + s + "'");
}

inline nlohmann::json to_json(const RunConfig& c) {
  using nlohmann::json;
  json j;
  j["version"] = c.version;
  j["preset"] = c.preset;
  j["macro"] = {c.macro.x, c.macro.y};
  j["micro"] = {c.micro.x, c.micro.y};
  j["material"] = {{"E", c.material.youngs_modulus}, {"nu", c.material.poisson_ratio}, {"penal", c.penal}, {"c0", c.c0}};
  j["problem"] = {{"fixed_dofs", c.problem.fixed_dofs},
                  {"loads", detail::nodal_json(c.problem.loads)},
                  {"prescribed", detail::nodal_json(c.problem.prescribed)}};
  j["target"] = {{"kind", c.target.kind},         {"amplitude", c.target.amplitude},
                 {"width", c.target.width},       {"poisson_ratio", c.target.poisson_ratio},
                 {"mask_dofs", c.target.mask_dofs}};
  j["volume_targets"] = c.volume_targets;
  j["passive_cells"] = c.passive_cells;
  j["base_cell"] = {{"kind", c.base_cell.kind}, {"bar_width", c.base_cell.bar_width}};
  j["band_cells"] = c.band_cells;
  const auto& n = c.network;
  j["network"] = {{"local_kernels_per_dim", n.local_kernels_per_dim},
                  {"global_kernels_per_dim", n.global_kernels_per_dim},
                  {"local_range", n.local_range},
                  {"global_range", n.global_range},
                  {"weight_init", n.weight_init},
                  {"element_input_scale", c.element_input_scale}};
  const auto& t = c.train;
  const auto& w = t.weights;
  j["train"] = {{"epochs", t.epochs},
                {"learning_rate", t.learning_rate},
                {"upsample", t.upsample},
                {"seed", t.seed},
                {"mode", to_string(t.mode)},
                {"ramp_fraction", t.ramp_fraction},
                {"alpha_max", w.alpha_max},
                {"bc_scale", w.bc_scale},
                {"l2_weight", w.l2_weight},
                {"l1_base_weight", w.l1_base_weight},
                {"bulk_multiplier", w.bulk_multiplier}};
  const auto& o = c.output;
  j["output"] = {{"render_upsamples", o.render_upsamples},
                 {"postprocess", o.postprocess},
                 {"low", o.low},
                 {"high", o.high},
                 {"min_area", o.min_area},
                 {"full_scale", o.full_scale},
                 {"connectivity_cutoff", o.connectivity_cutoff},
                 {"pixel_budget", o.pixel_budget}};
  return j;
}

inline RunConfig from_json(const nlohmann::json& j) {
  using detail::field;
  detail::check_keys(j, "", {"version", "preset", "macro", "micro", "material", "problem", "target", "volume_targets",
                             "passive_cells", "base_cell", "band_cells", "network", "train", "output"});
  RunConfig c;
  c.version = field<int>(j, "version", "", -1);
  if (c.version != kConfigVersion)
    throw ConfigError("version: expected " + std::to_string(kConfigVersion) + ", got " + std::to_string(c.version));
  c.preset = field<std::string>(j, "preset", "", "");
  c.macro = detail::dims_field(j, "macro", "", c.macro);
  c.micro = detail::dims_field(j, "micro", "", c.micro);
  if (j.contains("material")) {
    const auto& m = j["material"];
    detail::check_keys(m, "material", {"E", "nu", "penal", "c0"});
    c.material.youngs_modulus = field<double>(m, "E", "material", 1.0);
    c.material.poisson_ratio = field<double>(m, "nu", "material", 0.3);
    c.penal = field<double>(m, "penal", "material", 3.0);
    c.c0 = field<double>(m, "c0", "material", 1e-9);
  }
  c.problem.nel = c.macro;
  if (j.contains("problem")) {
    const auto& p = j["problem"];
    detail::check_keys(p, "problem", {"fixed_dofs", "loads", "prescribed"});
    c.problem.fixed_dofs = field<std::vector<int>>(p, "fixed_dofs", "problem", {});
    c.problem.loads = detail::nodal_field(p, "loads", "problem");
    c.problem.prescribed = detail::nodal_field(p, "prescribed", "problem");
  }
  if (j.contains("target")) {
    const auto& t = j["target"];
    detail::check_keys(t, "target", {"kind", "amplitude", "width", "poisson_ratio", "mask_dofs"});
    c.target.kind = field<std::string>(t, "kind", "target", "none");
    c.target.amplitude = field<double>(t, "amplitude", "target", 0.0);
    c.target.width = field<double>(t, "width", "target", 1.0);
    c.target.poisson_ratio = field<double>(t, "poisson_ratio", "target", -0.3);
    c.target.mask_dofs = field<std::vector<int>>(t, "mask_dofs", "target", {});
  }
  c.volume_targets = field<std::vector<double>>(j, "volume_targets", "", {});
  c.passive_cells = field<std::vector<int>>(j, "passive_cells", "", {});
  if (j.contains("base_cell")) {
    const auto& b = j["base_cell"];
    detail::check_keys(b, "base_cell", {"kind", "bar_width"});
    c.base_cell.kind = field<std::string>(b, "kind", "base_cell", "none");
    c.base_cell.bar_width = field<double>(b, "bar_width", "base_cell", 0.3);
  }
  c.band_cells = field<std::vector<int>>(j, "band_cells", "", {});
  if (j.contains("network")) {
    const auto& n = j["network"];
    detail::check_keys(n, "network", {"local_kernels_per_dim", "global_kernels_per_dim", "local_range", "global_range",
                                      "weight_init", "element_input_scale"});
    auto& ni = c.network;
    ni.local_kernels_per_dim = field<int>(n, "local_kernels_per_dim", "network", ni.local_kernels_per_dim);
    ni.global_kernels_per_dim = field<int>(n, "global_kernels_per_dim", "network", ni.global_kernels_per_dim);
    ni.local_range = field<std::array<double, 2>>(n, "local_range", "network", ni.local_range);
    ni.global_range = field<std::array<double, 2>>(n, "global_range", "network", ni.global_range);
    ni.weight_init = field<double>(n, "weight_init", "network", ni.weight_init);
    c.element_input_scale = field<bool>(n, "element_input_scale", "network", true);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    detail::check_keys(t, "train", {"epochs", "learning_rate", "upsample", "seed", "mode", "ramp_fraction", "alpha_max",
                                    "bc_scale", "l2_weight", "l1_base_weight", "bulk_multiplier"});
    auto& tc = c.train;
    tc.epochs = field<int>(t, "epochs", "train", tc.epochs);
    tc.learning_rate = field<double>(t, "learning_rate", "train", tc.learning_rate);
    tc.upsample = field<int>(t, "upsample", "train", tc.upsample);
    tc.seed = field<std::uint64_t>(t, "seed", "train", tc.seed);
    tc.mode = parse_mode(field<std::string>(t, "mode", "train", "displacement"));
    tc.ramp_fraction = field<double>(t, "ramp_fraction", "train", tc.ramp_fraction);
    auto& w = tc.weights;
    w.alpha_max = field<double>(t, "alpha_max", "train", w.alpha_max);
    w.bc_scale = field<double>(t, "bc_scale", "train", w.bc_scale);
    w.l2_weight = field<double>(t, "l2_weight", "train", w.l2_weight);
    w.l1_base_weight = field<double>(t, "l1_base_weight", "train", w.l1_base_weight);
    w.bulk_multiplier = field<double>(t, "bulk_multiplier", "train", w.bulk_multiplier);
  }
  if (j.contains("output")) {
    const auto& o = j["output"];
    detail::check_keys(o, "output", {"render_upsamples", "postprocess", "low", "high", "min_area", "full_scale",
                                     "connectivity_cutoff", "pixel_budget"});
    auto& oc = c.output;
    oc.render_upsamples = field<std::vector<int>>(o, "render_upsamples", "output", oc.render_upsamples);
    oc.postprocess = field<bool>(o, "postprocess", "output", oc.postprocess);
    oc.low = field<double>(o, "low", "output", oc.low);
    oc.high = field<double>(o, "high", "output", oc.high);
    oc.min_area = field<long long>(o, "min_area", "output", oc.min_area);
    oc.full_scale = field<bool>(o, "full_scale", "output", oc.full_scale);
    oc.connectivity_cutoff = field<double>(o, "connectivity_cutoff", "output", oc.connectivity_cutoff);
    oc.pixel_budget = field<long long>(o, "pixel_budget", "output", oc.pixel_budget);
  }
  c.validate();
  return c;
}

inline void RunConfig::validate() const {
  auto fail = [](const std::string& path, const std::string& what) { throw ConfigError(path + ": " + what); };
  if (macro.x < 1 || macro.y < 1) fail("macro", "dims must be >= 1");
  if (micro.x < 2 || micro.y < 2) fail("micro", "dims must be >= 2");
  if (!(material.youngs_modulus > 0)) fail("material.E", "must be > 0");
  if (!(material.poisson_ratio > -1 && material.poisson_ratio < 0.5)) fail("material.nu", "must lie in (-1, 0.5)");
  if (penal < 1) fail("material.penal", "must be >= 1");
  if (!(c0 > 0 && c0 < 1)) fail("material.c0", "must lie in (0, 1)");
  if (!(problem.nel == macro)) fail("problem", "element dims must equal macro dims");
  const int ndof = dof_count(macro);
  for (std::size_t i = 0; i < problem.fixed_dofs.size(); ++i)
    if (problem.fixed_dofs[i] < 0 || problem.fixed_dofs[i] >= ndof) fail("problem.fixed_dofs[" + std::to_string(i) + "]", "out of range");
  for (std::size_t i = 0; i < problem.loads.size(); ++i)
    if (problem.loads[i].dof < 0 || problem.loads[i].dof >= ndof) fail("problem.loads[" + std::to_string(i) + "]", "DOF out of range");
  for (std::size_t i = 0; i < problem.prescribed.size(); ++i)
    if (problem.prescribed[i].dof < 0 || problem.prescribed[i].dof >= ndof)
      fail("problem.prescribed[" + std::to_string(i) + "]", "DOF out of range");
  static const std::set<std::string> target_kinds{"none", "bump", "poisson", "base_cell"};
  if (!target_kinds.count(target.kind)) fail("target.kind", "unknown kind '" + target.kind + "'");
  for (std::size_t i = 0; i < target.mask_dofs.size(); ++i)
    if (target.mask_dofs[i] < 0 || target.mask_dofs[i] >= ndof) fail("target.mask_dofs[" + std::to_string(i) + "]", "out of range");
  if (target.kind != "none" && target.mask_dofs.empty()) fail("target.mask_dofs", "must not be empty");
  if (target.kind == "poisson" && !(target.poisson_ratio > -1 && target.poisson_ratio < 0.5))
    fail("target.poisson_ratio", "must lie in (-1, 0.5)");
  if (target.kind == "base_cell" && base_cell.kind == "none") fail("base_cell.kind", "base_cell target needs a base cell");
  if (static_cast<long long>(volume_targets.size()) != macro.count())
    fail("volume_targets", "needs one entry per macro cell (" + std::to_string(macro.count()) + ")");
  for (std::size_t i = 0; i < volume_targets.size(); ++i)
    if (!(volume_targets[i] > 0 && volume_targets[i] <= 1)) fail("volume_targets[" + std::to_string(i) + "]", "must lie in (0, 1]");
  for (int id : passive_cells)
    if (id < 0 || id >= macro.count()) fail("passive_cells", "cell id " + std::to_string(id) + " out of range");
  for (int id : band_cells)
    if (id < 0 || id >= macro.count()) fail("band_cells", "cell id " + std::to_string(id) + " out of range");
  static const std::set<std::string> cell_kinds{"none", "solid", "cross"};
  if (!cell_kinds.count(base_cell.kind)) fail("base_cell.kind", "unknown kind '" + base_cell.kind + "'");
  if (!(base_cell.bar_width > 0 && base_cell.bar_width <= 1)) fail("base_cell.bar_width", "must lie in (0, 1]");
  if (!band_cells.empty() && base_cell.kind == "none") fail("band_cells", "band needs a base cell");
  if (network.local_kernels_per_dim < 1 || network.global_kernels_per_dim < 1) fail("network", "kernel counts must be >= 1");
  if (train.epochs < 1) fail("train.epochs", "must be >= 1");
  if (!(train.learning_rate > 0)) fail("train.learning_rate", "must be > 0");
  if (train.upsample < 1) fail("train.upsample", "must be >= 1");
  if (train.ramp_fraction < 0 || train.ramp_fraction > 1) fail("train.ramp_fraction", "must lie in [0, 1]");
  const auto& w = train.weights;
  if (w.alpha_max < 1) fail("train.alpha_max", "must be >= 1");
  if (w.bc_scale < 0 || w.l2_weight < 0 || w.l1_base_weight < 0 || w.bulk_multiplier < 0) fail("train", "loss weights must be >= 0");
  if ((train.mode == ObjectiveMode::Displacement) != (target.kind != "none"))
    fail("train.mode", "displacement mode needs a target and other modes must not have one");
  if (train.mode != ObjectiveMode::BulkOnly && problem.fixed_dofs.empty() && problem.prescribed.empty())
    fail("problem", "macro problem has no supports");
  if (train.mode == ObjectiveMode::Compliance && problem.loads.empty()) fail("problem.loads", "compliance mode needs loads");
  for (int s : output.render_upsamples)
    if (s < 1) fail("output.render_upsamples", "entries must be >= 1");
  if (!(output.low > 0 && output.low < output.high && output.high < 1)) fail("output", "need 0 < low < high < 1");
  if (output.min_area < 0) fail("output.min_area", "must be >= 0");
  if (!(output.connectivity_cutoff > 0 && output.connectivity_cutoff < 1)) fail("output.connectivity_cutoff", "must lie in (0, 1)");
  if (output.full_scale && train.mode != ObjectiveMode::Displacement) fail("output.full_scale", "needs a displacement target");
}

}  // namespace metanet
