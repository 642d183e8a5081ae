#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "eit/forward.hpp"
#include "eit/mesh.hpp"

using namespace eit;

namespace {

Mesh default_tank() { return generate_disk_mesh(0.0665, 16, 0.5, 0.008); }

ConductivityField uniform_field(const Mesh& m, double sigma) {
  return {Eigen::VectorXd::Constant(m.n_elements(), sigma)};
}

// Drive one (a,b) pair, read the (c,d) difference.
double transfer_voltage(const ForwardSolver& solver, int a, int b, int c, int d,
                        double amp, int L) {
  CurrentPattern p{Eigen::VectorXd::Zero(L)};
  p.injected[a] = amp;
  p.injected[b] = -amp;
  Eigen::VectorXd V;
  solver.solve_pattern(p, V);
  return V[c] - V[d];
}

}  // namespace

TEST_CASE("reference triangle stiffness matches the hand-computed matrix", "[forward]") {
  Mesh m;
  m.radius = 1.0;
  m.nodes = {{0, 0}, {1, 0}, {0, 1}};
  m.elements = {{0, 1, 2}};

  const double sigma = 3.5;
  const CemBlocks blocks =
      assemble_system(m, uniform_field(m, sigma), ContactImpedances{Eigen::VectorXd()});

  // (sigma/2) * [[2,-1,-1],[-1,1,0],[-1,0,1]] for the unit right triangle.
  Eigen::Matrix3d expected;
  expected << 2, -1, -1, -1, 1, 0, -1, 0, 1;
  expected *= sigma / 2.0;
  const Eigen::MatrixXd K = Eigen::MatrixXd(blocks.domain);
  CHECK((K - expected).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("electrode diagonal is arc length over contact impedance", "[forward]") {
  const Mesh m = default_tank();
  Eigen::VectorXd z(16);
  for (int l = 0; l < 16; ++l) z[l] = 1e-3 * (1.0 + 0.1 * l);
  const CemBlocks blocks = assemble_system(m, uniform_field(m, 1.0), {z});
  for (int l = 0; l < 16; ++l)
    CHECK_THAT(blocks.electrode_diag[l],
               Catch::Matchers::WithinRel(m.electrodes[l].arc_length / z[l], 1e-12));
}

TEST_CASE("electrode blocks vanish as contact impedance grows", "[forward]") {
  const Mesh m = default_tank();
  const CemBlocks tight =
      assemble_system(m, uniform_field(m, 1.0), uniform_contact_impedance(16, 1e-3));
  const CemBlocks loose =
      assemble_system(m, uniform_field(m, 1.0), uniform_contact_impedance(16, 1e30));
  CHECK(loose.coupling.cwiseAbs().maxCoeff() < 1e-25);
  CHECK(loose.electrode_diag.cwiseAbs().maxCoeff() < 1e-25);
  // The domain block keeps only the stiffness part in the loose limit.
  const Eigen::MatrixXd diff = Eigen::MatrixXd(tight.domain) - Eigen::MatrixXd(loose.domain);
  CHECK(diff.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("assembly rejects inconsistent inputs", "[forward]") {
  const Mesh m = default_tank();
  ConductivityField bad_size{Eigen::VectorXd::Constant(m.n_elements() - 1, 1.0)};
  CHECK_THROWS_AS(assemble_system(m, bad_size, uniform_contact_impedance(16, 1e-3)), Error);
  ConductivityField neg{Eigen::VectorXd::Constant(m.n_elements(), -1.0)};
  CHECK_THROWS_AS(assemble_system(m, neg, uniform_contact_impedance(16, 1e-3)), Error);
  CHECK_THROWS_AS(assemble_system(m, uniform_field(m, 1.0), uniform_contact_impedance(16, 0.0)),
                  Error);
  CHECK_THROWS_AS(assemble_system(m, uniform_field(m, 1.0), uniform_contact_impedance(15, 1e-3)),
                  Error);
}

TEST_CASE("reciprocity holds on random conductivity fields", "[forward]") {
  const Mesh m = default_tank();
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> logsig(-4.0, 0.0);
  for (int trial = 0; trial < 5; ++trial) {
    Eigen::VectorXd sig(m.n_elements());
    for (int e = 0; e < m.n_elements(); ++e) sig[e] = std::pow(10.0, logsig(rng));
    const ForwardSolver solver(m, {sig}, uniform_contact_impedance(16, 1e-3));

    const double v1 = transfer_voltage(solver, 0, 1, 8, 9, 25e-6, 16);
    const double v2 = transfer_voltage(solver, 8, 9, 0, 1, 25e-6, 16);
    CHECK_THAT(v2, Catch::Matchers::WithinRel(v1, 1e-10));

    const double v3 = transfer_voltage(solver, 2, 11, 5, 14, 25e-6, 16);
    const double v4 = transfer_voltage(solver, 5, 14, 2, 11, 25e-6, 16);
    CHECK_THAT(v4, Catch::Matchers::WithinRel(v3, 1e-10));
  }
}

TEST_CASE("opposite injection on a homogeneous disk is mirror symmetric", "[forward]") {
  const Mesh m = default_tank();
  const ForwardSolver solver(m, uniform_field(m, 1e-3), uniform_contact_impedance(16, 1e-3));
  CurrentPattern p{Eigen::VectorXd::Zero(16)};
  p.injected[0] = 25e-6;
  p.injected[8] = -25e-6;
  Eigen::VectorXd V;
  solver.solve_pattern(p, V);
  const double scale = V.cwiseAbs().maxCoeff();
  for (int l = 1; l < 8; ++l)
    CHECK(std::abs(V[l] - V[16 - l]) < 1e-10 * scale);
  CHECK(std::abs(V.sum()) < 1e-12 * scale);
}

TEST_CASE("joint scaling sigma->c*sigma, z->z/c divides voltages by c", "[forward]") {
  const Mesh m = default_tank();
  const double c = 7.3;
  const Protocol proto = adjacent_protocol(16);
  const auto base = solve_protocol(m, uniform_field(m, 1e-3),
                                   uniform_contact_impedance(16, 1e-3), proto);
  const auto scaled = solve_protocol(m, uniform_field(m, c * 1e-3),
                                     uniform_contact_impedance(16, 1e-3 / c), proto);
  const Eigen::VectorXd expected = base.protocol_voltages / c;
  CHECK((scaled.protocol_voltages - expected).cwiseAbs().maxCoeff() <
        1e-10 * expected.cwiseAbs().maxCoeff());
}

TEST_CASE("voltages scale linearly with injection amplitude", "[forward]") {
  const Mesh m = default_tank();
  const auto a = solve_protocol(m, uniform_field(m, 1e-3),
                                uniform_contact_impedance(16, 1e-3),
                                adjacent_protocol(16, 25e-6));
  const auto b = solve_protocol(m, uniform_field(m, 1e-3),
                                uniform_contact_impedance(16, 1e-3),
                                adjacent_protocol(16, 50e-6));
  CHECK((b.protocol_voltages - 2.0 * a.protocol_voltages).cwiseAbs().maxCoeff() <
        1e-10 * b.protocol_voltages.cwiseAbs().maxCoeff());
}

TEST_CASE("grounding keeps per-pattern electrode voltages zero sum", "[forward]") {
  const Mesh m = default_tank();
  const auto frame = solve_forward(m, uniform_field(m, 1e-3),
                                   uniform_contact_impedance(16, 1e-3),
                                   protocol_patterns(adjacent_protocol(16), 16));
  for (const auto& V : frame.electrode_voltages)
    CHECK(std::abs(V.sum()) < 1e-12 * V.cwiseAbs().maxCoeff());
}

TEST_CASE("adjacent protocol measurement counts", "[forward]") {
  CHECK(adjacent_protocol(16).n_measurements() == 208);
  CHECK(adjacent_protocol(4).n_measurements() == 4);
  CHECK_THROWS_AS(adjacent_protocol(3), Error);
}

TEST_CASE("apply_protocol flattens differences and validates electrodes", "[forward]") {
  const int L = 16;
  const Protocol proto = adjacent_protocol(L);
  MeasurementFrame frame;
  frame.electrode_voltages.assign(L, Eigen::VectorXd::Constant(L, 0.42));
  frame.patterns.resize(L);
  // All-equal voltages difference out to zero.
  CHECK(apply_protocol(frame, proto).cwiseAbs().maxCoeff() == 0.0);

  Protocol bad = proto;
  bad.measure_pairs[0][0] = {0, L};
  CHECK_THROWS_AS(apply_protocol(frame, bad), Error);

  MeasurementFrame short_frame;
  short_frame.electrode_voltages.assign(L - 1, Eigen::VectorXd::Zero(L));
  CHECK_THROWS_AS(apply_protocol(short_frame, proto), Error);
}

TEST_CASE("current patterns must conserve charge", "[forward]") {
  const Mesh m = default_tank();
  const ForwardSolver solver(m, uniform_field(m, 1e-3), uniform_contact_impedance(16, 1e-3));
  CurrentPattern bad{Eigen::VectorXd::Zero(16)};
  bad.injected[0] = 25e-6;  // nothing flows out
  Eigen::VectorXd V;
  CHECK_THROWS_AS(solver.solve_pattern(bad, V), Error);
}

TEST_CASE("protocol and voltage CSV round trips", "[forward]") {
  const Protocol proto = adjacent_protocol(16, 25e-6);
  save_protocol(proto, "proto.json");
  const Protocol r = load_protocol("proto.json");
  CHECK(r.amplitude == proto.amplitude);
  CHECK(r.drive_pairs == proto.drive_pairs);
  CHECK(r.measure_pairs == proto.measure_pairs);

  const Mesh m = default_tank();
  const auto frame = solve_protocol(m, uniform_field(m, 1e-3),
                                    uniform_contact_impedance(16, 1e-3), proto);
  write_voltages_csv("volt.csv", frame.protocol_voltages, proto);
  const Eigen::VectorXd back = read_voltages_csv("volt.csv");
  REQUIRE(back.size() == frame.protocol_voltages.size());
  CHECK((back - frame.protocol_voltages).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("protocol voltages converge under mesh refinement", "[forward][slow]") {
  // Homogeneous field; successive differences must shrink as edges halve.
  // z*sigma sets the width of the contact layer at the electrode edges; it
  // must be resolved by the coarsest mesh for the asymptotic order to show.
  const Protocol proto = adjacent_protocol(16);
  auto voltages = [&](double edge) {
    const Mesh m = generate_disk_mesh(0.0665, 16, 0.5, edge);
    return solve_protocol(m, uniform_field(m, 1.0), uniform_contact_impedance(16, 1e-2),
                          proto)
        .protocol_voltages;
  };
  const Eigen::VectorXd v1 = voltages(0.008);
  const Eigen::VectorXd v2 = voltages(0.004);
  const Eigen::VectorXd v3 = voltages(0.002);
  const double d1 = (v2 - v1).norm();
  const double d2 = (v3 - v2).norm();
  CHECK(d2 < d1);
  INFO("observed order " << std::log2(d1 / d2));
  CHECK(std::log2(d1 / d2) >= 1.0);
}
