#pragma once

// Tank phantom with a central piezoresistive inclusion: builds conductivity
// fields, applies load / fracture / debonding steps, and emits noisy
// protocol voltages for difference imaging.
//
// Load steps rescale the inclusion by the piezoresistive factor relative to
// the baseline load. A fracture replaces a through-centre band of the
// inclusion with tank water; debonding multiplies a boundary annulus of the
// inclusion by a contact-gain factor.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "eit/common.hpp"
#include "eit/forward.hpp"
#include "eit/material.hpp"
#include "eit/mesh.hpp"

namespace eit {

struct PhantomSpec {
  double tank_radius = 0.0665;       // m
  double background_sigma = 1e-3;    // S/m
  Vec2 inclusion_center{0.0, 0.0};   // m
  double inclusion_diameter = 0.045; // m
  double inclusion_sigma0 = 0.005;   // S/m
};

inline void validate_phantom(const PhantomSpec& s) {
  if (s.tank_radius <= 0.0) throw Error("phantom: tank radius must be positive");
  if (s.background_sigma <= 0.0 || s.inclusion_sigma0 <= 0.0)
    throw Error("phantom: conductivities must be positive");
  if (s.inclusion_diameter < 0.0)
    throw Error("phantom: inclusion diameter must be non-negative");
  if (norm(s.inclusion_center) + 0.5 * s.inclusion_diameter >
      s.tank_radius * (1.0 + 1e-12))
    throw Error("phantom: inclusion extends outside the tank");
}

enum class StepKind { load, fracture, debonding };

struct ScenarioStep {
  std::string label;
  StepKind kind = StepKind::load;
  double force_N = 0.0;  // load steps only
};

struct NoiseSpec {
  double rel = 1e-3;        // std = rel*|v| + abs_floor per channel
  double abs_floor = 1e-6;  // V
};

struct FailureSpec {
  double debond_gain = 5.0;       // conductivity multiplier on the annulus
  double debond_band = 0.008;     // annulus thickness, m
  double crack_halfwidth = 0.008; // half the fracture band height, m
};

struct Scenario {
  PhantomSpec phantom;
  std::vector<ScenarioStep> steps;
  NoiseSpec noise;
  std::uint64_t seed = 0;
  PiezoModel piezo;
  FailureSpec failure;
};

namespace detail {

inline bool in_inclusion(const PhantomSpec& spec, Vec2 p) {
  return distance(p, spec.inclusion_center) <= 0.5 * spec.inclusion_diameter;
}

inline void check_mesh_covers_tank(const PhantomSpec& spec, const Mesh& mesh) {
  if (std::abs(mesh.radius - spec.tank_radius) > 1e-6 * spec.tank_radius)
    throw Error("phantom: mesh radius " + std::to_string(mesh.radius) +
                " does not match tank radius " + std::to_string(spec.tank_radius));
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Deterministic standard normals: explicit Box-Muller over mt19937_64 so the
// stream does not depend on library internals.
class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed) : engine_(seed) {}

  double next() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform01();
    const double u2 = uniform01();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    have_spare_ = true;
    return radius * std::cos(angle);
  }

 private:
  double uniform01() {  // in (0,1]
    return (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
  }
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace detail

inline ConductivityField build_field(const PhantomSpec& spec, const Mesh& mesh) {
  validate_phantom(spec);
  detail::check_mesh_covers_tank(spec, mesh);
  ConductivityField field{Eigen::VectorXd::Constant(mesh.n_elements(),
                                                    spec.background_sigma)};
  if (spec.inclusion_diameter == 0.0) return field;
  int hits = 0;
  for (int e = 0; e < mesh.n_elements(); ++e)
    if (detail::in_inclusion(spec, element_centroid(mesh, e))) {
      field.values[e] = spec.inclusion_sigma0;
      ++hits;
    }
  if (hits == 0)
    throw Error("phantom: inclusion is not resolved by any element centroid");
  return field;
}

inline ConductivityField apply_step(const ConductivityField& field,
                                    const PhantomSpec& spec, const Mesh& mesh,
                                    const ScenarioStep& step, const PiezoModel& piezo,
                                    const FailureSpec& failure, double baseline_force) {
  if (field.values.size() != mesh.n_elements())
    throw Error("apply_step: field does not match mesh");
  ConductivityField out = field;
  switch (step.kind) {
    case StepKind::load: {
      if (step.force_N < 0.0) throw Error("apply_step: load must be non-negative");
      const double factor =
          piezo_factor(piezo, step.force_N) / piezo_factor(piezo, baseline_force);
      for (int e = 0; e < mesh.n_elements(); ++e)
        if (detail::in_inclusion(spec, element_centroid(mesh, e)))
          out.values[e] *= factor;
      break;
    }
    case StepKind::fracture: {
      // Through-centre horizontal band flooded with tank water.
      for (int e = 0; e < mesh.n_elements(); ++e) {
        const Vec2 c = element_centroid(mesh, e);
        if (detail::in_inclusion(spec, c) &&
            std::abs(c.y - spec.inclusion_center.y) <= failure.crack_halfwidth)
          out.values[e] = spec.background_sigma;
      }
      break;
    }
    case StepKind::debonding: {
      const double inner = 0.5 * spec.inclusion_diameter - failure.debond_band;
      for (int e = 0; e < mesh.n_elements(); ++e) {
        const Vec2 c = element_centroid(mesh, e);
        if (detail::in_inclusion(spec, c) &&
            distance(c, spec.inclusion_center) >= inner)
          out.values[e] *= failure.debond_gain;
      }
      break;
    }
    default:
      throw Error("apply_step: unknown step kind");
  }
  return out;
}

// Simulated measurement campaign: one noisy protocol voltage vector per
// step. The first step is the difference-imaging baseline and must be a
// load step. Noise streams derive from (seed, step index), so steps can be
// simulated in any order with identical results.
inline std::vector<std::pair<std::string, Eigen::VectorXd>> simulate_scenario(
    const Scenario& scenario, const Mesh& mesh, const Protocol& protocol,
    const ContactImpedances& z) {
  if (scenario.steps.empty()) throw Error("simulate_scenario: no steps");
  if (scenario.steps.front().kind != StepKind::load)
    throw Error("simulate_scenario: first step must be the baseline load");
  validate_phantom(scenario.phantom);
  detail::check_mesh_covers_tank(scenario.phantom, mesh);
  if (scenario.noise.rel < 0.0 || scenario.noise.abs_floor < 0.0)
    throw Error("simulate_scenario: noise levels must be non-negative");

  const double baseline_force = scenario.steps.front().force_N;
  const ConductivityField base = build_field(scenario.phantom, mesh);

  std::vector<std::pair<std::string, Eigen::VectorXd>> out;
  out.reserve(scenario.steps.size());
  for (size_t idx = 0; idx < scenario.steps.size(); ++idx) {
    const ScenarioStep& step = scenario.steps[idx];
    const ConductivityField staged = apply_step(base, scenario.phantom, mesh, step,
                                                scenario.piezo, scenario.failure,
                                                baseline_force);
    Eigen::VectorXd v =
        solve_protocol(mesh, staged, z, protocol).protocol_voltages;

    detail::NormalStream noise(detail::splitmix64(
        scenario.seed ^ (0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(idx) + 1))));
    for (long k = 0; k < v.size(); ++k) {
      const double sd = scenario.noise.rel * std::abs(v[k]) + scenario.noise.abs_floor;
      v[k] += sd * noise.next();
    }
    out.emplace_back(step.label, std::move(v));
  }
  return out;
}

inline std::string step_kind_name(StepKind k) {
  switch (k) {
    case StepKind::load: return "load";
    case StepKind::fracture: return "fracture";
    case StepKind::debonding: return "debonding";
  }
  throw Error("step_kind_name: unknown step kind");
}

inline StepKind step_kind_from_name(const std::string& name) {
  if (name == "load") return StepKind::load;
  if (name == "fracture") return StepKind::fracture;
  if (name == "debonding") return StepKind::debonding;
  throw ParseError("scenario: unknown step kind '" + name + "'");
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("load_scenario: cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("load_scenario: " + path + ": " + e.what());
  }

  Scenario sc;
  try {
    const auto& ph = j.at("phantom");
    sc.phantom.tank_radius = ph.at("tank_radius_m").get<double>();
    sc.phantom.background_sigma = ph.at("background_sigma_S_per_m").get<double>();
    sc.phantom.inclusion_center = {ph.at("inclusion_center_m").at(0).get<double>(),
                                   ph.at("inclusion_center_m").at(1).get<double>()};
    sc.phantom.inclusion_diameter = ph.at("inclusion_diameter_m").get<double>();
    sc.phantom.inclusion_sigma0 = ph.at("inclusion_sigma0_S_per_m").get<double>();

    for (const auto& st : j.at("steps")) {
      ScenarioStep step;
      step.label = st.at("label").get<std::string>();
      step.kind = step_kind_from_name(st.at("kind").get<std::string>());
      if (step.kind == StepKind::load) step.force_N = st.at("force_N").get<double>();
      sc.steps.push_back(std::move(step));
    }

    const auto& ns = j.at("noise");
    sc.noise.rel = ns.at("rel").get<double>();
    sc.noise.abs_floor = ns.at("abs_floor_V").get<double>();
    sc.seed = j.at("seed").get<std::uint64_t>();

    if (j.contains("piezo")) {
      sc.piezo.saturation_drop = j["piezo"].at("saturation_drop").get<double>();
      sc.piezo.load_scale = j["piezo"].at("load_scale_N").get<double>();
    }
    if (j.contains("failure")) {
      const auto& fl = j["failure"];
      if (fl.contains("debond_gain")) sc.failure.debond_gain = fl["debond_gain"].get<double>();
      if (fl.contains("debond_band_m")) sc.failure.debond_band = fl["debond_band_m"].get<double>();
      if (fl.contains("crack_halfwidth_m"))
        sc.failure.crack_halfwidth = fl["crack_halfwidth_m"].get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("load_scenario: " + path + ": " + e.what());
  }

  validate_phantom(sc.phantom);
  validate_piezo(sc.piezo);
  if (sc.failure.debond_gain <= 1.0)
    throw ValidationError("scenario: debond_gain must exceed 1");
  return sc;
}

inline void save_scenario(const Scenario& sc, const std::string& path) {
  nlohmann::json j;
  j["phantom"] = {
      {"tank_radius_m", sc.phantom.tank_radius},
      {"background_sigma_S_per_m", sc.phantom.background_sigma},
      {"inclusion_center_m", {sc.phantom.inclusion_center.x, sc.phantom.inclusion_center.y}},
      {"inclusion_diameter_m", sc.phantom.inclusion_diameter},
      {"inclusion_sigma0_S_per_m", sc.phantom.inclusion_sigma0}};
  j["steps"] = nlohmann::json::array();
  for (const auto& st : sc.steps) {
    nlohmann::json s{{"label", st.label}, {"kind", step_kind_name(st.kind)}};
    if (st.kind == StepKind::load) s["force_N"] = st.force_N;
    j["steps"].push_back(s);
  }
  j["noise"] = {{"rel", sc.noise.rel}, {"abs_floor_V", sc.noise.abs_floor}};
  j["seed"] = sc.seed;
  j["piezo"] = {{"saturation_drop", sc.piezo.saturation_drop},
                {"load_scale_N", sc.piezo.load_scale}};
  j["failure"] = {{"debond_gain", sc.failure.debond_gain},
                  {"debond_band_m", sc.failure.debond_band},
                  {"crack_halfwidth_m", sc.failure.crack_halfwidth}};
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("save_scenario: cannot open " + path);
  f << j.dump(2) << "\n";
}

}  // namespace eit
