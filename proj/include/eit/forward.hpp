#pragma once

// Complete-electrode-model forward problem on a triangular mesh.
//
// The FEM system couples interior node potentials with electrode voltages
// through contact impedances:
//
//   [ K + Z   W ] [ phi ]   [ 0 ]
//   [ W^T     D ] [ V   ] = [ I ]
//
// K is the sigma-weighted diffusion stiffness matrix, Z and W integrate
// 1/z_l times the linear interpolation functions over electrode edges, and
// D = diag(E_l / z_l). The system is singular up to an additive constant;
// it is grounded with an appended Lagrange row enforcing sum(V) = 0.

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <json.hpp>

#include "eit/common.hpp"
#include "eit/mesh.hpp"

namespace eit {

struct ConductivityField {
  Eigen::VectorXd values;  // per-element conductivity, S/m
};

struct ContactImpedances {
  Eigen::VectorXd z;  // per-electrode contact impedance, Ohm*m (2D)
};

inline ContactImpedances uniform_contact_impedance(int n_electrodes, double z) {
  return {Eigen::VectorXd::Constant(n_electrodes, z)};
}

struct CurrentPattern {
  Eigen::VectorXd injected;  // per-electrode current, A; entries sum to zero
};

// Drive/measure schedule. measure_pairs[d] lists the differential voltage
// pairs read out while drive_pairs[d] carries current.
struct Protocol {
  double amplitude = 25e-6;  // A
  std::vector<std::array<int, 2>> drive_pairs;
  std::vector<std::vector<std::array<int, 2>>> measure_pairs;

  int n_drives() const { return static_cast<int>(drive_pairs.size()); }
  int n_measurements() const {
    int n = 0;
    for (const auto& mp : measure_pairs) n += static_cast<int>(mp.size());
    return n;
  }
};

struct MeasurementFrame {
  std::vector<CurrentPattern> patterns;
  std::vector<Eigen::VectorXd> electrode_voltages;  // per pattern, length L
  Eigen::VectorXd protocol_voltages;                // flattened differences
  std::vector<Eigen::VectorXd> node_potentials;     // kept only on request
};

namespace detail {

struct TriGeom {
  double b[3];  // b_i = y_j - y_k
  double c[3];  // c_i = x_k - x_j
  double area;
};

inline TriGeom tri_geom(const Mesh& m, int e) {
  const auto& t = m.elements[e];
  const Vec2 p0 = m.nodes[t[0]], p1 = m.nodes[t[1]], p2 = m.nodes[t[2]];
  TriGeom g;
  g.b[0] = p1.y - p2.y;
  g.b[1] = p2.y - p0.y;
  g.b[2] = p0.y - p1.y;
  g.c[0] = p2.x - p1.x;
  g.c[1] = p0.x - p2.x;
  g.c[2] = p1.x - p0.x;
  g.area = 0.5 * (g.c[2] * g.b[1] - g.c[1] * g.b[2]);
  return g;
}

inline void check_field(const Mesh& m, const ConductivityField& sigma) {
  if (sigma.values.size() != m.n_elements())
    throw Error("conductivity field has " + std::to_string(sigma.values.size()) +
                " values for " + std::to_string(m.n_elements()) + " elements");
  if ((sigma.values.array() <= 0.0).any())
    throw Error("conductivity field must be strictly positive");
}

inline void check_impedances(const Mesh& m, const ContactImpedances& z) {
  if (z.z.size() != m.n_electrodes())
    throw Error("contact impedance vector has " + std::to_string(z.z.size()) +
                " entries for " + std::to_string(m.n_electrodes()) + " electrodes");
  if ((z.z.array() <= 0.0).any())
    throw Error("contact impedances must be strictly positive");
}

inline void check_pattern(const CurrentPattern& p, int L) {
  if (p.injected.size() != L)
    throw Error("current pattern has " + std::to_string(p.injected.size()) +
                " entries for " + std::to_string(L) + " electrodes");
  const double max_abs = p.injected.cwiseAbs().maxCoeff();
  if (std::abs(p.injected.sum()) > 1e-15 * max_abs)
    throw Error("current pattern violates conservation of charge");
}

}  // namespace detail

// Assembled CEM blocks, exposed for inspection and tests.
struct CemBlocks {
  Eigen::SparseMatrix<double> domain;  // K + Z, n x n
  Eigen::MatrixXd coupling;            // W, n x L
  Eigen::VectorXd electrode_diag;      // D = E_l / z_l, length L
};

inline CemBlocks assemble_system(const Mesh& mesh, const ConductivityField& sigma,
                                 const ContactImpedances& z) {
  detail::check_field(mesh, sigma);
  detail::check_impedances(mesh, z);

  const int n = mesh.n_nodes();
  const int L = mesh.n_electrodes();

  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<size_t>(mesh.n_elements()) * 9 + 64);
  for (int e = 0; e < mesh.n_elements(); ++e) {
    const auto g = detail::tri_geom(mesh, e);
    const auto& t = mesh.elements[e];
    const double s = sigma.values[e] / (4.0 * g.area);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        trips.emplace_back(t[i], t[j], s * (g.b[i] * g.b[j] + g.c[i] * g.c[j]));
  }

  CemBlocks blocks;
  blocks.coupling = Eigen::MatrixXd::Zero(n, L);
  blocks.electrode_diag = Eigen::VectorXd::Zero(L);
  for (int l = 0; l < L; ++l) {
    const double zl = z.z[l];
    for (const auto& ed : mesh.electrodes[l].boundary_edges) {
      const double h = distance(mesh.nodes[ed[0]], mesh.nodes[ed[1]]);
      // Edge mass matrix of the linear interpolation functions, 1/z_l weight.
      trips.emplace_back(ed[0], ed[0], h / (3.0 * zl));
      trips.emplace_back(ed[1], ed[1], h / (3.0 * zl));
      trips.emplace_back(ed[0], ed[1], h / (6.0 * zl));
      trips.emplace_back(ed[1], ed[0], h / (6.0 * zl));
      blocks.coupling(ed[0], l) -= h / (2.0 * zl);
      blocks.coupling(ed[1], l) -= h / (2.0 * zl);
      blocks.electrode_diag[l] += h / zl;
    }
  }

  blocks.domain.resize(n, n);
  blocks.domain.setFromTriplets(trips.begin(), trips.end());
  return blocks;
}

// Holds one factorization of the grounded CEM system and answers any number
// of injection patterns against it. Immutable once constructed.
class ForwardSolver {
 public:
  ForwardSolver(const Mesh& mesh, const ConductivityField& sigma,
                const ContactImpedances& z)
      : n_(mesh.n_nodes()), L_(mesh.n_electrodes()) {
    if (L_ < 2) throw Error("forward solve needs at least two electrodes");
    const CemBlocks blocks = assemble_system(mesh, sigma, z);

    const int dim = n_ + L_ + 1;
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(blocks.domain.nonZeros() + 2 * n_ * L_ + 3 * L_);
    for (int k = 0; k < blocks.domain.outerSize(); ++k)
      for (Eigen::SparseMatrix<double>::InnerIterator it(blocks.domain, k); it; ++it)
        trips.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()),
                           it.value());
    for (int l = 0; l < L_; ++l) {
      for (int i = 0; i < n_; ++i) {
        const double w = blocks.coupling(i, l);
        if (w != 0.0) {
          trips.emplace_back(i, n_ + l, w);
          trips.emplace_back(n_ + l, i, w);
        }
      }
      trips.emplace_back(n_ + l, n_ + l, blocks.electrode_diag[l]);
      // Grounding row/column: sum of electrode voltages is zero.
      trips.emplace_back(n_ + l, n_ + L_, 1.0);
      trips.emplace_back(n_ + L_, n_ + l, 1.0);
    }

    Eigen::SparseMatrix<double> K(dim, dim);
    K.setFromTriplets(trips.begin(), trips.end());
    K.makeCompressed();
    matrix_ = K;
    lu_ = std::make_unique<Eigen::SparseLU<Eigen::SparseMatrix<double>>>();
    lu_->compute(matrix_);
    if (lu_->info() != Eigen::Success)
      throw Error("forward solve: factorization of the grounded CEM system failed "
                  "(dim " + std::to_string(dim) + "): " + lu_->lastErrorMessage());
  }

  int n_nodes() const { return n_; }
  int n_electrodes() const { return L_; }

  // Electrode voltages (and interior potentials) for one injection.
  void solve_pattern(const CurrentPattern& pattern, Eigen::VectorXd& voltages,
                     Eigen::VectorXd* potentials = nullptr) const {
    detail::check_pattern(pattern, L_);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n_ + L_ + 1);
    rhs.segment(n_, L_) = pattern.injected;
    const Eigen::VectorXd x = lu_->solve(rhs);
    const double resid = (matrix_ * x - rhs).norm();
    const double scale = rhs.norm();
    if (!x.allFinite() || resid > 1e-8 * (scale > 0 ? scale : 1.0))
      throw Error("forward solve: ill-conditioned CEM system, relative residual " +
                  std::to_string(resid / (scale > 0 ? scale : 1.0)));
    voltages = x.segment(n_, L_);
    if (potentials) *potentials = x.head(n_);
  }

  MeasurementFrame solve(const std::vector<CurrentPattern>& patterns,
                         bool keep_potentials = false) const {
    MeasurementFrame frame;
    frame.patterns = patterns;
    frame.electrode_voltages.resize(patterns.size());
    if (keep_potentials) frame.node_potentials.resize(patterns.size());
    for (size_t p = 0; p < patterns.size(); ++p)
      solve_pattern(patterns[p], frame.electrode_voltages[p],
                    keep_potentials ? &frame.node_potentials[p] : nullptr);
    return frame;
  }

 private:
  int n_;
  int L_;
  Eigen::SparseMatrix<double> matrix_;
  std::unique_ptr<Eigen::SparseLU<Eigen::SparseMatrix<double>>> lu_;
};

inline MeasurementFrame solve_forward(const Mesh& mesh, const ConductivityField& sigma,
                                      const ContactImpedances& z,
                                      const std::vector<CurrentPattern>& patterns,
                                      bool keep_potentials = false) {
  return ForwardSolver(mesh, sigma, z).solve(patterns, keep_potentials);
}

// Standard adjacent-pair schedule: drive (l, l+1), read every adjacent pair
// not touching a driven electrode. Gives L*(L-3) measurements.
inline Protocol adjacent_protocol(int L, double amplitude = 25e-6) {
  if (L < 4) throw Error("adjacent protocol needs at least 4 electrodes");
  Protocol p;
  p.amplitude = amplitude;
  for (int d = 0; d < L; ++d) {
    p.drive_pairs.push_back({d, (d + 1) % L});
    std::vector<std::array<int, 2>> mp;
    for (int m = 0; m < L; ++m) {
      const int a = m, b = (m + 1) % L;
      if (a == d || a == (d + 1) % L || b == d || b == (d + 1) % L) continue;
      mp.push_back({a, b});
    }
    p.measure_pairs.push_back(std::move(mp));
  }
  return p;
}

inline void validate_protocol(const Protocol& p, int L) {
  if (p.amplitude <= 0.0) throw Error("protocol: amplitude must be positive");
  if (p.drive_pairs.empty()) throw Error("protocol: no drive pairs");
  if (p.measure_pairs.size() != p.drive_pairs.size())
    throw Error("protocol: measure_pairs must list one array per drive");
  auto check = [L](int e) {
    if (e < 0 || e >= L)
      throw Error("protocol references electrode " + std::to_string(e) +
                  " outside [0," + std::to_string(L) + ")");
  };
  for (const auto& dp : p.drive_pairs) {
    check(dp[0]);
    check(dp[1]);
    if (dp[0] == dp[1]) throw Error("protocol: drive pair with equal electrodes");
  }
  for (const auto& mp : p.measure_pairs)
    for (const auto& pr : mp) {
      check(pr[0]);
      check(pr[1]);
    }
}

inline std::vector<CurrentPattern> protocol_patterns(const Protocol& p, int L) {
  validate_protocol(p, L);
  std::vector<CurrentPattern> patterns;
  patterns.reserve(p.drive_pairs.size());
  for (const auto& dp : p.drive_pairs) {
    CurrentPattern cp{Eigen::VectorXd::Zero(L)};
    cp.injected[dp[0]] = p.amplitude;
    cp.injected[dp[1]] = -p.amplitude;
    patterns.push_back(std::move(cp));
  }
  return patterns;
}

// Flattens a solved frame into the protocol's differential voltage vector.
inline Eigen::VectorXd apply_protocol(const MeasurementFrame& frame, const Protocol& p) {
  if (frame.electrode_voltages.size() != p.drive_pairs.size())
    throw Error("apply_protocol: frame holds " +
                std::to_string(frame.electrode_voltages.size()) + " patterns, protocol has " +
                std::to_string(p.drive_pairs.size()) + " drives");
  const int L = frame.electrode_voltages.empty()
                    ? 0
                    : static_cast<int>(frame.electrode_voltages[0].size());
  validate_protocol(p, L);
  Eigen::VectorXd out(p.n_measurements());
  int k = 0;
  for (size_t d = 0; d < p.drive_pairs.size(); ++d) {
    const Eigen::VectorXd& V = frame.electrode_voltages[d];
    for (const auto& pr : p.measure_pairs[d]) out[k++] = V[pr[0]] - V[pr[1]];
  }
  return out;
}

// Forward solve plus protocol flattening in one step.
inline MeasurementFrame solve_protocol(const Mesh& mesh, const ConductivityField& sigma,
                                       const ContactImpedances& z, const Protocol& p,
                                       bool keep_potentials = false) {
  validate_protocol(p, mesh.n_electrodes());
  MeasurementFrame frame =
      solve_forward(mesh, sigma, z, protocol_patterns(p, mesh.n_electrodes()),
                    keep_potentials);
  frame.protocol_voltages = apply_protocol(frame, p);
  return frame;
}

inline void save_protocol(const Protocol& p, const std::string& path) {
  nlohmann::json j;
  j["amplitude_A"] = p.amplitude;
  j["drive_pairs"] = p.drive_pairs;
  j["measure_pairs"] = p.measure_pairs;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("save_protocol: cannot open " + path);
  f << j.dump(2) << "\n";
}

inline Protocol load_protocol(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("load_protocol: cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("load_protocol: " + path + ": " + e.what());
  }
  Protocol p;
  try {
    p.amplitude = j.at("amplitude_A").get<double>();
    for (const auto& dp : j.at("drive_pairs"))
      p.drive_pairs.push_back({dp.at(0).get<int>(), dp.at(1).get<int>()});
    for (const auto& mp : j.at("measure_pairs")) {
      std::vector<std::array<int, 2>> pairs;
      for (const auto& pr : mp) pairs.push_back({pr.at(0).get<int>(), pr.at(1).get<int>()});
      p.measure_pairs.push_back(std::move(pairs));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("load_protocol: " + path + ": " + e.what());
  }
  return p;
}

// CSV with columns pattern_index, measure_index, voltage_V.
inline void write_voltages_csv(const std::string& path, const Eigen::VectorXd& v,
                               const Protocol& p) {
  if (v.size() != p.n_measurements())
    throw Error("write_voltages_csv: vector length " + std::to_string(v.size()) +
                " does not match protocol measurement count " +
                std::to_string(p.n_measurements()));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("write_voltages_csv: cannot open " + path);
  f << "pattern_index,measure_index,voltage_V\n";
  int k = 0;
  char buf[40];
  for (size_t d = 0; d < p.measure_pairs.size(); ++d)
    for (size_t m = 0; m < p.measure_pairs[d].size(); ++m) {
      std::snprintf(buf, sizeof(buf), "%.17g", v[k++]);
      f << d << "," << m << "," << buf << "\n";
    }
}

inline Eigen::VectorXd read_voltages_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("read_voltages_csv: cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line.rfind("pattern_index", 0) != 0)
    throw ParseError("read_voltages_csv: " + path + ": missing header line");
  std::vector<double> vals;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    int pat = 0, meas = 0;
    double volt = 0.0;
    if (std::sscanf(line.c_str(), "%d,%d,%lf", &pat, &meas, &volt) != 3)
      throw ParseError("read_voltages_csv: " + path + ": bad record at line " +
                       std::to_string(lineno));
    vals.push_back(volt);
  }
  return Eigen::Map<Eigen::VectorXd>(vals.data(), static_cast<long>(vals.size()));
}

}  // namespace eit
