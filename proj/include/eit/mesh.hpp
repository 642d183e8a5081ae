#pragma once

// Triangular disk meshes with boundary electrodes.
//
// Meshes are generated as structured polar rings sharing one angular grid,
// so electrode arcs are tiled exactly by boundary edges and generation is
// deterministic (no seed). All coordinates are metres.

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "eit/common.hpp"

namespace eit {

struct Electrode {
  int index = 0;
  std::vector<std::array<int, 2>> boundary_edges;  // ordered node pairs, CCW
  double arc_length = 0.0;                         // sum of edge lengths
};

struct Mesh {
  std::vector<Vec2> nodes;
  std::vector<std::array<int, 3>> elements;  // counter-clockwise node triples
  std::vector<Electrode> electrodes;
  double radius = 0.0;

  int n_nodes() const { return static_cast<int>(nodes.size()); }
  int n_elements() const { return static_cast<int>(elements.size()); }
  int n_electrodes() const { return static_cast<int>(electrodes.size()); }
};

inline double signed_area(const Mesh& m, int e) {
  const auto& t = m.elements[e];
  return 0.5 * cross(m.nodes[t[1]] - m.nodes[t[0]], m.nodes[t[2]] - m.nodes[t[0]]);
}

inline double element_area(const Mesh& m, int e) { return signed_area(m, e); }

inline Vec2 element_centroid(const Mesh& m, int e) {
  const auto& t = m.elements[e];
  return (1.0 / 3.0) * (m.nodes[t[0]] + m.nodes[t[1]] + m.nodes[t[2]]);
}

inline double total_area(const Mesh& m) {
  double a = 0.0;
  for (int e = 0; e < m.n_elements(); ++e) a += signed_area(m, e);
  return a;
}

inline double electrode_edge_sum(const Mesh& m, const Electrode& el) {
  double s = 0.0;
  for (const auto& ed : el.boundary_edges)
    s += distance(m.nodes[ed[0]], m.nodes[ed[1]]);
  return s;
}

namespace detail {

// Undirected edge key with deterministic ordering.
inline std::pair<int, int> edge_key(int a, int b) {
  return a < b ? std::pair{a, b} : std::pair{b, a};
}

// Counts how many elements use each undirected edge.
inline std::map<std::pair<int, int>, std::vector<int>> edge_incidence(const Mesh& m) {
  std::map<std::pair<int, int>, std::vector<int>> inc;
  for (int e = 0; e < m.n_elements(); ++e) {
    const auto& t = m.elements[e];
    inc[edge_key(t[0], t[1])].push_back(e);
    inc[edge_key(t[1], t[2])].push_back(e);
    inc[edge_key(t[2], t[0])].push_back(e);
  }
  return inc;
}

}  // namespace detail

// Checks every structural invariant; throws ValidationError on the first
// violation. Boundary-membership tolerance is 1e-9 * radius.
inline void validate_mesh(const Mesh& m) {
  if (m.radius <= 0.0) throw ValidationError("mesh: radius must be positive");
  const int n = m.n_nodes();
  if (n < 3 || m.elements.empty())
    throw ValidationError("mesh: needs at least one triangle");

  std::vector<char> used(n, 0);
  for (int e = 0; e < m.n_elements(); ++e) {
    const auto& t = m.elements[e];
    for (int v : t) {
      if (v < 0 || v >= n)
        throw ValidationError("mesh: element " + std::to_string(e) +
                              " references node " + std::to_string(v) +
                              " out of range");
      used[v] = 1;
    }
    if (signed_area(m, e) <= 0.0)
      throw ValidationError("mesh: element " + std::to_string(e) +
                            " has non-positive signed area");
  }
  for (int v = 0; v < n; ++v)
    if (!used[v])
      throw ValidationError("mesh: node " + std::to_string(v) +
                            " not referenced by any element");

  const auto incidence = detail::edge_incidence(m);
  for (const auto& [edge, elems] : incidence)
    if (elems.size() > 2)
      throw ValidationError("mesh: edge (" + std::to_string(edge.first) + "," +
                            std::to_string(edge.second) +
                            ") shared by more than two elements");

  const double boundary_tol = 1e-9 * m.radius;
  std::map<std::pair<int, int>, int> edge_owner;  // electrode edge -> index
  std::vector<char> node_owner(n, 0);
  for (int l = 0; l < m.n_electrodes(); ++l) {
    const Electrode& el = m.electrodes[l];
    if (el.index != l)
      throw ValidationError("mesh: electrode at position " + std::to_string(l) +
                            " carries index " + std::to_string(el.index));
    if (el.boundary_edges.empty())
      throw ValidationError("mesh: electrode " + std::to_string(l) + " has no edges");
    for (const auto& ed : el.boundary_edges) {
      for (int v : ed) {
        if (v < 0 || v >= n)
          throw ValidationError("mesh: electrode " + std::to_string(l) +
                                " references node out of range");
        if (std::abs(norm(m.nodes[v]) - m.radius) > boundary_tol)
          throw ValidationError("mesh: electrode " + std::to_string(l) +
                                " node " + std::to_string(v) +
                                " is not on the disk boundary");
      }
      const auto key = detail::edge_key(ed[0], ed[1]);
      const auto it = incidence.find(key);
      if (it == incidence.end() || it->second.size() != 1)
        throw ValidationError("mesh: electrode " + std::to_string(l) +
                              " edge is not a boundary edge of the triangulation");
      if (!edge_owner.emplace(key, l).second)
        throw ValidationError("mesh: overlapping electrodes share an edge");
    }
    // Electrode arcs must be pairwise disjoint, including endpoints.
    std::vector<int> nodes_of_l;
    for (const auto& ed : el.boundary_edges) {
      nodes_of_l.push_back(ed[0]);
      nodes_of_l.push_back(ed[1]);
    }
    std::sort(nodes_of_l.begin(), nodes_of_l.end());
    nodes_of_l.erase(std::unique(nodes_of_l.begin(), nodes_of_l.end()), nodes_of_l.end());
    for (int v : nodes_of_l) {
      if (node_owner[v])
        throw ValidationError("mesh: overlapping electrodes share node " +
                              std::to_string(v));
      node_owner[v] = 1;
    }
    const double s = electrode_edge_sum(m, el);
    if (std::abs(s - el.arc_length) > 1e-9 * std::max(s, el.arc_length))
      throw ValidationError("mesh: electrode " + std::to_string(l) +
                            " arc_length disagrees with its edge lengths");
  }
}

// Structured polar-ring disk mesh. Electrodes are equiangular, centred at
// angles 2*pi*l/L, each spanning coverage * (2*pi/L) of the circumference.
// Boundary nodes land exactly on electrode arc endpoints.
inline Mesh generate_disk_mesh(double radius, int n_electrodes,
                               double electrode_coverage,
                               double target_edge_length) {
  if (radius <= 0.0) throw Error("generate_disk_mesh: radius must be positive");
  if (n_electrodes < 4) throw Error("generate_disk_mesh: need at least 4 electrodes");
  if (electrode_coverage <= 0.0 || electrode_coverage >= 1.0)
    throw Error("generate_disk_mesh: electrode_coverage must lie in (0,1)");
  if (target_edge_length <= 0.0 || target_edge_length >= radius)
    throw Error("generate_disk_mesh: target_edge_length must lie in (0,radius)");

  const int L = n_electrodes;
  const double two_pi = 2.0 * std::numbers::pi;
  const double elec_arc = radius * electrode_coverage * two_pi / L;
  const double gap_arc = radius * (1.0 - electrode_coverage) * two_pi / L;
  if (target_edge_length > elec_arc)
    throw Error("generate_disk_mesh: target_edge_length " +
                std::to_string(target_edge_length) +
                " exceeds the electrode arc length " + std::to_string(elec_arc) +
                "; refine the mesh to resolve the electrodes");

  const auto segments = [](double arc, double h) {
    return std::max(1, static_cast<int>(std::ceil(arc / h * (1.0 - 1e-12))));
  };
  const int se = segments(elec_arc, target_edge_length);
  const int sg = segments(gap_arc, target_edge_length);
  const int rings = std::max(2, static_cast<int>(
                                    std::ceil(radius / target_edge_length * (1.0 - 1e-12))));
  const int per_ring = L * (se + sg);

  // One angular grid shared by all rings; arc boundaries are grid points.
  std::vector<double> angles;
  angles.reserve(per_ring);
  const double w = electrode_coverage * two_pi / L;
  const double g = (1.0 - electrode_coverage) * two_pi / L;
  for (int l = 0; l < L; ++l) {
    const double estart = two_pi * l / L - 0.5 * w;
    for (int i = 0; i < se; ++i) angles.push_back(estart + w * i / se);
    const double gstart = estart + w;
    for (int i = 0; i < sg; ++i) angles.push_back(gstart + g * i / sg);
  }

  Mesh m;
  m.radius = radius;
  m.nodes.reserve(1 + rings * per_ring);
  m.nodes.push_back({0.0, 0.0});
  for (int k = 1; k <= rings; ++k) {
    const double r = radius * k / rings;
    for (double a : angles) m.nodes.push_back({r * std::cos(a), r * std::sin(a)});
  }

  const auto ring_node = [&](int k, int i) {  // k in [1,rings], i modulo per_ring
    return 1 + (k - 1) * per_ring + (i % per_ring);
  };

  m.elements.reserve(per_ring * (2 * rings - 1));
  for (int i = 0; i < per_ring; ++i)
    m.elements.push_back({0, ring_node(1, i), ring_node(1, i + 1)});
  for (int k = 1; k < rings; ++k) {
    for (int i = 0; i < per_ring; ++i) {
      m.elements.push_back({ring_node(k, i), ring_node(k + 1, i), ring_node(k + 1, i + 1)});
      m.elements.push_back({ring_node(k, i), ring_node(k + 1, i + 1), ring_node(k, i + 1)});
    }
  }

  for (int l = 0; l < L; ++l) {
    Electrode el;
    el.index = l;
    const int first = l * (se + sg);
    for (int i = 0; i < se; ++i)
      el.boundary_edges.push_back({ring_node(rings, first + i), ring_node(rings, first + i + 1)});
    el.arc_length = electrode_edge_sum(m, el);
    m.electrodes.push_back(std::move(el));
  }

  validate_mesh(m);
  return m;
}

struct ElementAdjacency {
  std::vector<std::array<int, 2>> pairs;    // unique, first < second
  std::vector<std::vector<int>> neighbors;  // per element, sorted
};

// Element pairs sharing an interior edge; pairs.size() equals the number of
// interior edges.
inline ElementAdjacency element_adjacency(const Mesh& m) {
  ElementAdjacency adj;
  adj.neighbors.resize(m.n_elements());
  for (const auto& [edge, elems] : detail::edge_incidence(m)) {
    if (elems.size() != 2) continue;
    const int a = std::min(elems[0], elems[1]);
    const int b = std::max(elems[0], elems[1]);
    adj.pairs.push_back({a, b});
    adj.neighbors[a].push_back(b);
    adj.neighbors[b].push_back(a);
  }
  std::sort(adj.pairs.begin(), adj.pairs.end());
  for (auto& nb : adj.neighbors) std::sort(nb.begin(), nb.end());
  return adj;
}

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// Writes the mesh as a JSON document with fields `radius`, `nodes`,
// `elements`, `electrodes`. Coordinates use 17 significant digits so a
// save/load round trip is bit exact.
inline void save_mesh(const Mesh& m, const std::string& path) {
  std::ostringstream os;
  os << "{\n";
  os << "  \"radius\": " << detail::format_double(m.radius) << ",\n";
  os << "  \"nodes\": [\n";
  for (size_t i = 0; i < m.nodes.size(); ++i)
    os << "    [" << detail::format_double(m.nodes[i].x) << ", "
       << detail::format_double(m.nodes[i].y) << "]"
       << (i + 1 < m.nodes.size() ? "," : "") << "\n";
  os << "  ],\n";
  os << "  \"elements\": [\n";
  for (size_t e = 0; e < m.elements.size(); ++e)
    os << "    [" << m.elements[e][0] << ", " << m.elements[e][1] << ", "
       << m.elements[e][2] << "]" << (e + 1 < m.elements.size() ? "," : "") << "\n";
  os << "  ],\n";
  os << "  \"electrodes\": [\n";
  for (size_t l = 0; l < m.electrodes.size(); ++l) {
    const Electrode& el = m.electrodes[l];
    os << "    { \"index\": " << el.index << ", \"edges\": [";
    for (size_t i = 0; i < el.boundary_edges.size(); ++i)
      os << "[" << el.boundary_edges[i][0] << ", " << el.boundary_edges[i][1] << "]"
         << (i + 1 < el.boundary_edges.size() ? ", " : "");
    os << "] }" << (l + 1 < m.electrodes.size() ? "," : "") << "\n";
  }
  os << "  ]\n";
  os << "}\n";

  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("save_mesh: cannot open " + path + " for writing");
  f << os.str();
  if (!f) throw Error("save_mesh: write to " + path + " failed");
}

inline Mesh load_mesh(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("load_mesh: cannot open " + path);

  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("load_mesh: " + path + ": " + e.what());
  }

  Mesh m;
  try {
    m.radius = j.at("radius").get<double>();
    for (const auto& node : j.at("nodes")) {
      if (!node.is_array() || node.size() != 2)
        throw ParseError("load_mesh: field 'nodes' must hold [x,y] pairs");
      m.nodes.push_back({node[0].get<double>(), node[1].get<double>()});
    }
    for (const auto& el : j.at("elements")) {
      if (!el.is_array() || el.size() != 3)
        throw ParseError("load_mesh: field 'elements' must hold [i,j,k] triples");
      m.elements.push_back({el[0].get<int>(), el[1].get<int>(), el[2].get<int>()});
    }
    for (const auto& e : j.at("electrodes")) {
      Electrode el;
      el.index = e.at("index").get<int>();
      for (const auto& ed : e.at("edges")) {
        if (!ed.is_array() || ed.size() != 2)
          throw ParseError("load_mesh: electrode 'edges' must hold [a,b] pairs");
        el.boundary_edges.push_back({ed[0].get<int>(), ed[1].get<int>()});
      }
      m.electrodes.push_back(std::move(el));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("load_mesh: " + path + ": " + e.what());
  }

  for (auto& el : m.electrodes) {
    for (const auto& ed : el.boundary_edges)
      if (ed[0] < 0 || ed[0] >= m.n_nodes() || ed[1] < 0 || ed[1] >= m.n_nodes())
        throw ValidationError("load_mesh: electrode edge references node out of range");
    el.arc_length = electrode_edge_sum(m, el);
  }
  validate_mesh(m);
  return m;
}

}  // namespace eit
