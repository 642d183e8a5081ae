#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "eit/phantom.hpp"

using namespace eit;

namespace {

Mesh default_tank() { return generate_disk_mesh(0.0665, 16, 0.5, 0.008); }

double mean_inclusion_sigma(const ConductivityField& f, const PhantomSpec& spec,
                            const Mesh& mesh) {
  double area = 0.0, sum = 0.0;
  for (int e = 0; e < mesh.n_elements(); ++e) {
    const Vec2 c = element_centroid(mesh, e);
    if (distance(c, spec.inclusion_center) > 0.5 * spec.inclusion_diameter) continue;
    const double a = element_area(mesh, e);
    area += a;
    sum += a * f.values[e];
  }
  return sum / area;
}

Scenario ladder_scenario(double noise_rel, double noise_abs, std::uint64_t seed) {
  Scenario sc;
  sc.noise = {noise_rel, noise_abs};
  sc.seed = seed;
  for (double F : {50.0, 450.0, 900.0, 1350.0, 2250.0, 3100.0, 4000.0})
    sc.steps.push_back({"load_" + std::to_string(static_cast<int>(F)) + "N",
                        StepKind::load, F});
  return sc;
}

}  // namespace

TEST_CASE("build_field places the inclusion by centroid", "[phantom]") {
  const Mesh mesh = default_tank();
  PhantomSpec spec;

  SECTION("zero diameter gives the uniform background") {
    spec.inclusion_diameter = 0.0;
    const ConductivityField f = build_field(spec, mesh);
    CHECK((f.values.array() == spec.background_sigma).all());
  }

  SECTION("inclusion element area approximates the disk area") {
    const ConductivityField f = build_field(spec, mesh);
    double area = 0.0;
    for (int e = 0; e < mesh.n_elements(); ++e)
      if (f.values[e] == spec.inclusion_sigma0) area += element_area(mesh, e);
    const double target = std::numbers::pi * 0.0225 * 0.0225;
    CHECK(std::abs(area - target) < 0.05 * target);
  }

  SECTION("matched conductivities are indistinguishable from uniform") {
    spec.inclusion_sigma0 = spec.background_sigma;
    const ConductivityField f = build_field(spec, mesh);
    const ConductivityField uniform{
        Eigen::VectorXd::Constant(mesh.n_elements(), spec.background_sigma)};
    const Protocol proto = adjacent_protocol(16);
    const ContactImpedances z = uniform_contact_impedance(16, 1e-3);
    const Eigen::VectorXd va = solve_protocol(mesh, f, z, proto).protocol_voltages;
    const Eigen::VectorXd vb = solve_protocol(mesh, uniform, z, proto).protocol_voltages;
    CHECK((va - vb).cwiseAbs().maxCoeff() < 1e-12 * vb.cwiseAbs().maxCoeff());
  }

  SECTION("invalid geometry is rejected") {
    spec.inclusion_center = {0.06, 0.0};  // pokes outside the tank
    CHECK_THROWS_AS(build_field(spec, mesh), Error);
    PhantomSpec other;
    other.tank_radius = 0.1;  // mesh does not cover this tank
    CHECK_THROWS_AS(build_field(other, mesh), Error);
    PhantomSpec tiny;
    tiny.inclusion_diameter = 1e-4;  // smaller than any element
    CHECK_THROWS_AS(build_field(tiny, mesh), Error);
  }
}

TEST_CASE("apply_step load scaling", "[phantom]") {
  const Mesh mesh = default_tank();
  const PhantomSpec spec;
  const PiezoModel piezo;
  const FailureSpec failure;
  const ConductivityField base = build_field(spec, mesh);

  SECTION("baseline load leaves the field unchanged") {
    const ConductivityField out =
        apply_step(base, spec, mesh, {"b", StepKind::load, 50.0}, piezo, failure, 50.0);
    CHECK((out.values - base.values).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("heavier load means lower inclusion conductivity") {
    const ConductivityField light =
        apply_step(base, spec, mesh, {"l", StepKind::load, 450.0}, piezo, failure, 50.0);
    const ConductivityField heavy =
        apply_step(base, spec, mesh, {"h", StepKind::load, 4000.0}, piezo, failure, 50.0);
    CHECK(mean_inclusion_sigma(heavy, spec, mesh) <
          mean_inclusion_sigma(light, spec, mesh));
    // Background untouched either way.
    for (int e = 0; e < mesh.n_elements(); ++e)
      if (base.values[e] == spec.background_sigma) {
        CHECK(light.values[e] == spec.background_sigma);
        CHECK(heavy.values[e] == spec.background_sigma);
      }
  }
}

TEST_CASE("failure steps move the inclusion mean in opposite directions", "[phantom]") {
  const Mesh mesh = default_tank();
  const PhantomSpec spec;
  const PiezoModel piezo;
  const FailureSpec failure;
  const ConductivityField base = build_field(spec, mesh);
  const double base_mean = mean_inclusion_sigma(base, spec, mesh);

  const ConductivityField cracked =
      apply_step(base, spec, mesh, {"f", StepKind::fracture, 0}, piezo, failure, 50.0);
  CHECK(mean_inclusion_sigma(cracked, spec, mesh) < base_mean);

  const ConductivityField debonded =
      apply_step(base, spec, mesh, {"d", StepKind::debonding, 0}, piezo, failure, 50.0);
  CHECK(mean_inclusion_sigma(debonded, spec, mesh) > base_mean);
}

TEST_CASE("noiseless scenario voltages are deterministic and monotone in load",
          "[phantom][slow]") {
  const Mesh mesh = default_tank();
  const Protocol proto = adjacent_protocol(16);
  const ContactImpedances z = uniform_contact_impedance(16, 1e-3);

  Scenario sc = ladder_scenario(0.0, 0.0, 123);
  sc.steps.push_back({"load_50N_again", StepKind::load, 50.0});
  const auto frames = simulate_scenario(sc, mesh, proto, z);
  REQUIRE(frames.size() == 8);

  // Identical steps produce identical noiseless vectors.
  CHECK((frames.back().second - frames.front().second).cwiseAbs().maxCoeff() == 0.0);

  // Forward-model oracle: departure from baseline grows strictly with load.
  double prev = 0.0;
  for (size_t i = 1; i + 1 < frames.size(); ++i) {
    const double d = (frames[i].second - frames[0].second).norm();
    CHECK(d > prev);
    prev = d;
  }
}

TEST_CASE("seeded noise is reproducible and step-indexed", "[phantom]") {
  const Mesh mesh = default_tank();
  const Protocol proto = adjacent_protocol(16);
  const ContactImpedances z = uniform_contact_impedance(16, 1e-3);

  const Scenario sc = ladder_scenario(1e-3, 1e-6, 42);
  const auto a = simulate_scenario(sc, mesh, proto, z);
  const auto b = simulate_scenario(sc, mesh, proto, z);
  for (size_t i = 0; i < a.size(); ++i)
    CHECK((a[i].second - b[i].second).cwiseAbs().maxCoeff() == 0.0);

  Scenario other = sc;
  other.seed = 43;
  const auto c = simulate_scenario(other, mesh, proto, z);
  CHECK((a[0].second - c[0].second).cwiseAbs().maxCoeff() > 0.0);

  // Distinct steps draw from distinct streams even with equal fields.
  CHECK((a[0].second - a[1].second).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("scenario preconditions", "[phantom]") {
  const Mesh mesh = default_tank();
  const Protocol proto = adjacent_protocol(16);
  const ContactImpedances z = uniform_contact_impedance(16, 1e-3);

  Scenario sc;
  sc.steps.push_back({"f", StepKind::fracture, 0});
  CHECK_THROWS_AS(simulate_scenario(sc, mesh, proto, z), Error);
  sc.steps.clear();
  CHECK_THROWS_AS(simulate_scenario(sc, mesh, proto, z), Error);
}

TEST_CASE("scenario file round trip and validation", "[phantom]") {
  Scenario sc = ladder_scenario(1e-3, 1e-6, 777);
  sc.steps.push_back({"post_failure", StepKind::fracture, 0});
  sc.phantom.inclusion_sigma0 = 0.0049;
  save_scenario(sc, "scenario.json");

  const Scenario r = load_scenario("scenario.json");
  CHECK(r.seed == sc.seed);
  CHECK(r.noise.rel == sc.noise.rel);
  CHECK(r.noise.abs_floor == sc.noise.abs_floor);
  CHECK(r.phantom.inclusion_sigma0 == sc.phantom.inclusion_sigma0);
  REQUIRE(r.steps.size() == sc.steps.size());
  for (size_t i = 0; i < sc.steps.size(); ++i) {
    CHECK(r.steps[i].label == sc.steps[i].label);
    CHECK(r.steps[i].kind == sc.steps[i].kind);
    CHECK(r.steps[i].force_N == sc.steps[i].force_N);
  }
  CHECK(r.piezo.saturation_drop == sc.piezo.saturation_drop);
  CHECK(r.failure.debond_gain == sc.failure.debond_gain);

  std::ofstream bad("scenario_bad.json");
  bad << R"({"phantom":{"tank_radius_m":0.0665,"background_sigma_S_per_m":1e-3,)"
      << R"("inclusion_center_m":[0,0],"inclusion_diameter_m":0.045,)"
      << R"("inclusion_sigma0_S_per_m":0.005},)"
      << R"("steps":[{"label":"x","kind":"melt"}],)"
      << R"("noise":{"rel":0.001,"abs_floor_V":1e-6},"seed":1})";
  bad.close();
  CHECK_THROWS_AS(load_scenario("scenario_bad.json"), ParseError);

  CHECK_THROWS_AS(load_scenario("missing_scenario.json"), Error);
}
