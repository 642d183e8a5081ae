#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <unordered_map>

#include "eit/mesh.hpp"

using namespace eit;

namespace {

constexpr double kPi = std::numbers::pi;

Mesh two_triangle_mesh() {
  // Unit square split along the diagonal, one electrode on the bottom edge.
  Mesh m;
  m.radius = 1.0;
  m.nodes = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
  m.elements = {{0, 1, 2}, {0, 2, 3}};
  return m;
}

Mesh single_triangle_mesh() {
  Mesh m;
  m.radius = 1.0;
  m.nodes = {{0, 0}, {1, 0}, {0, 1}};
  m.elements = {{0, 1, 2}};
  return m;
}

// Independent interior-edge count: hash undirected edges, count those seen
// exactly twice.
int count_interior_edges(const Mesh& m) {
  std::unordered_map<long long, int> seen;
  auto key = [&](int a, int b) {
    if (a > b) std::swap(a, b);
    return static_cast<long long>(a) * m.n_nodes() + b;
  };
  for (const auto& t : m.elements) {
    ++seen[key(t[0], t[1])];
    ++seen[key(t[1], t[2])];
    ++seen[key(t[2], t[0])];
  }
  int interior = 0;
  for (const auto& [k, c] : seen)
    if (c == 2) ++interior;
  return interior;
}

double node_angle(const Mesh& m, int v) { return std::atan2(m.nodes[v].y, m.nodes[v].x); }

}  // namespace

TEST_CASE("default phantom mesh matches tank geometry", "[mesh]") {
  const Mesh m = generate_disk_mesh(0.0665, 16, 0.5, 0.008);

  REQUIRE(m.n_electrodes() == 16);
  const double arc = 2.0 * kPi * 0.0665 * 0.5 / 16.0;
  for (const Electrode& el : m.electrodes) {
    // Angular extent of the electrode, endpoint to endpoint.
    const int a = el.boundary_edges.front()[0];
    const int b = el.boundary_edges.back()[1];
    double span = node_angle(m, b) - node_angle(m, a);
    if (span < 0) span += 2.0 * kPi;
    CHECK_THAT(span * m.radius, Catch::Matchers::WithinRel(arc, 1e-12));
    // Stored arc_length is the chord sum, slightly below the true arc.
    CHECK(el.arc_length <= arc);
    CHECK_THAT(el.arc_length, Catch::Matchers::WithinRel(arc, 5e-3));
  }
}

TEST_CASE("four electrodes sit at the four axis directions", "[mesh]") {
  const Mesh m = generate_disk_mesh(1.0, 4, 0.5, 0.5);
  const double expected[] = {0.0, kPi / 2, kPi, 3 * kPi / 2};
  for (int l = 0; l < 4; ++l) {
    const Electrode& el = m.electrodes[l];
    const Vec2 a = m.nodes[el.boundary_edges.front()[0]];
    const Vec2 b = m.nodes[el.boundary_edges.back()[1]];
    // Midpoint direction avoids the atan2 branch cut at pi.
    double center = std::atan2(a.y + b.y, a.x + b.x);
    if (center < -1e-12) center += 2.0 * kPi;
    CHECK_THAT(center, Catch::Matchers::WithinAbs(expected[l], 1e-12));
  }
}

TEST_CASE("mesh area is within 1% of the disk area at default refinement", "[mesh]") {
  const Mesh m = generate_disk_mesh(0.0665, 16, 0.5, 0.008);
  const double disk = kPi * 0.0665 * 0.0665;
  CHECK_THAT(total_area(m), Catch::Matchers::WithinRel(disk, 1e-2));
}

TEST_CASE("infeasible refinement is an explicit error", "[mesh]") {
  // Electrode arc at radius 1, L=16, coverage 0.5 is ~0.196; asking for
  // 0.3 m edges cannot resolve it.
  CHECK_THROWS_AS(generate_disk_mesh(1.0, 16, 0.5, 0.3), Error);
  CHECK_THROWS_AS(generate_disk_mesh(1.0, 3, 0.5, 0.1), Error);
  CHECK_THROWS_AS(generate_disk_mesh(1.0, 16, 1.5, 0.1), Error);
  CHECK_THROWS_AS(generate_disk_mesh(-1.0, 16, 0.5, 0.1), Error);
  CHECK_THROWS_AS(generate_disk_mesh(1.0, 16, 0.5, 2.0), Error);
}

TEST_CASE("element adjacency on minimal meshes", "[mesh]") {
  const Mesh two = two_triangle_mesh();
  const ElementAdjacency adj = element_adjacency(two);
  REQUIRE(adj.pairs.size() == 1);
  CHECK(adj.pairs[0] == std::array<int, 2>{0, 1});
  CHECK(adj.neighbors[0] == std::vector<int>{1});
  CHECK(adj.neighbors[1] == std::vector<int>{0});

  const Mesh one = single_triangle_mesh();
  CHECK(element_adjacency(one).pairs.empty());
}

TEST_CASE("adjacency pair count equals interior edge count", "[mesh]") {
  const Mesh m = generate_disk_mesh(0.0665, 16, 0.5, 0.008);
  const ElementAdjacency adj = element_adjacency(m);
  CHECK(static_cast<int>(adj.pairs.size()) == count_interior_edges(m));
  for (const auto& nb : adj.neighbors) CHECK(nb.size() <= 3);
}

TEST_CASE("save/load round trip is exact", "[mesh]") {
  const Mesh m = generate_disk_mesh(0.0665, 16, 0.5, 0.008);
  const std::string path = "roundtrip_mesh.json";
  save_mesh(m, path);
  const Mesh r = load_mesh(path);

  REQUIRE(r.n_nodes() == m.n_nodes());
  REQUIRE(r.n_elements() == m.n_elements());
  REQUIRE(r.n_electrodes() == m.n_electrodes());
  CHECK(r.radius == m.radius);
  for (int v = 0; v < m.n_nodes(); ++v) {
    CHECK(r.nodes[v].x == m.nodes[v].x);
    CHECK(r.nodes[v].y == m.nodes[v].y);
  }
  CHECK(r.elements == m.elements);
  for (int l = 0; l < m.n_electrodes(); ++l) {
    CHECK(r.electrodes[l].boundary_edges == m.electrodes[l].boundary_edges);
    CHECK_THAT(r.electrodes[l].arc_length,
               Catch::Matchers::WithinRel(m.electrodes[l].arc_length, 1e-12));
  }
}

TEST_CASE("malformed mesh files are rejected with typed errors", "[mesh]") {
  SECTION("overlapping electrodes fail validation") {
    const Mesh m = generate_disk_mesh(1.0, 4, 0.5, 0.2);
    std::string path = "overlap_mesh.json";
    save_mesh(m, path);
    // Duplicate electrode 0's first edge into electrode 1's list.
    Mesh bad = m;
    bad.electrodes[1].boundary_edges.push_back(bad.electrodes[0].boundary_edges[0]);
    bad.electrodes[1].arc_length = electrode_edge_sum(bad, bad.electrodes[1]);
    CHECK_THROWS_AS(validate_mesh(bad), ValidationError);
    save_mesh(bad, path);
    CHECK_THROWS_AS(load_mesh(path), ValidationError);
  }

  SECTION("truncated file is a parse error") {
    const Mesh m = generate_disk_mesh(1.0, 4, 0.5, 0.2);
    save_mesh(m, "trunc_mesh.json");
    std::ifstream in("trunc_mesh.json", std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out("trunc_mesh.json", std::ios::binary);
    out << all.substr(0, all.size() / 2);
    out.close();
    CHECK_THROWS_AS(load_mesh("trunc_mesh.json"), ParseError);
  }

  SECTION("missing file") { CHECK_THROWS_AS(load_mesh("does_not_exist.json"), Error); }
}

TEST_CASE("generated meshes satisfy all invariants", "[mesh][property]") {
  std::mt19937 rng(20260809);
  std::uniform_real_distribution<double> radius_dist(0.05, 2.0);
  std::uniform_int_distribution<int> elec_dist(4, 32);
  std::uniform_real_distribution<double> cov_dist(0.2, 0.8);

  for (int trial = 0; trial < 25; ++trial) {
    const double radius = radius_dist(rng);
    const int L = elec_dist(rng);
    const double cov = cov_dist(rng);
    const double elec_arc = radius * cov * 2.0 * kPi / L;
    std::uniform_real_distribution<double> edge_dist(0.3 * elec_arc, 0.95 * elec_arc);
    const double edge = edge_dist(rng);

    const Mesh m = generate_disk_mesh(radius, L, cov, edge);
    REQUIRE_NOTHROW(validate_mesh(m));
    REQUIRE(m.n_electrodes() == L);

    const ElementAdjacency adj = element_adjacency(m);
    for (int e = 0; e < m.n_elements(); ++e) {
      CHECK(adj.neighbors[e].size() <= 3);
      for (int nb : adj.neighbors[e]) {
        const auto& back = adj.neighbors[nb];
        CHECK(std::find(back.begin(), back.end(), e) != back.end());
      }
    }

    // Refinement monotonicity: halving the edge at least doubles elements.
    const Mesh fine = generate_disk_mesh(radius, L, cov, edge / 2.0);
    CHECK(fine.n_elements() >= 2 * m.n_elements());
  }
}
