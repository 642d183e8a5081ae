#pragma once

// Sensitivity of protocol voltages to per-element conductivity, linearized
// at a background field. Computed with adjoint fields: the derivative of a
// differential measurement with respect to sigma_e is
//
//   -integral_e grad(phi_drive) . grad(phi_adjoint) dOmega,
//
// where the adjoint field answers a unit current injected through the
// measurement pair. One factorization serves every drive and adjoint solve.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "eit/common.hpp"
#include "eit/forward.hpp"
#include "eit/mesh.hpp"

namespace eit {

struct SensitivityMatrix {
  Eigen::MatrixXd entries;       // rows: protocol measurements, cols: elements
  ConductivityField background;  // field the Jacobian was linearized at
};

inline SensitivityMatrix compute_jacobian(const Mesh& mesh,
                                          const ConductivityField& sigma0,
                                          const ContactImpedances& z,
                                          const Protocol& protocol) {
  const int L = mesh.n_electrodes();
  const int E = mesh.n_elements();
  validate_protocol(protocol, L);

  const ForwardSolver solver(mesh, sigma0, z);

  const auto drive_frame = solver.solve(protocol_patterns(protocol, L), true);

  // One adjoint solve per distinct measurement pair.
  std::map<std::pair<int, int>, int> pair_slot;
  std::vector<Eigen::VectorXd> adjoint_potentials;
  for (const auto& mp : protocol.measure_pairs)
    for (const auto& pr : mp) {
      const std::pair<int, int> key{pr[0], pr[1]};
      if (pair_slot.count(key)) continue;
      CurrentPattern unit{Eigen::VectorXd::Zero(L)};
      unit.injected[pr[0]] = 1.0;
      unit.injected[pr[1]] = -1.0;
      Eigen::VectorXd V, phi;
      solver.solve_pattern(unit, V, &phi);
      pair_slot[key] = static_cast<int>(adjoint_potentials.size());
      adjoint_potentials.push_back(std::move(phi));
    }

  // Constant per-element gradients of each potential field.
  const auto gradients = [&](const std::vector<Eigen::VectorXd>& fields) {
    Eigen::MatrixXd gx(fields.size(), E), gy(fields.size(), E);
    for (int e = 0; e < E; ++e) {
      const auto g = detail::tri_geom(mesh, e);
      const auto& t = mesh.elements[e];
      for (size_t s = 0; s < fields.size(); ++s) {
        const Eigen::VectorXd& u = fields[s];
        gx(static_cast<long>(s), e) =
            (g.b[0] * u[t[0]] + g.b[1] * u[t[1]] + g.b[2] * u[t[2]]) / (2.0 * g.area);
        gy(static_cast<long>(s), e) =
            (g.c[0] * u[t[0]] + g.c[1] * u[t[1]] + g.c[2] * u[t[2]]) / (2.0 * g.area);
      }
    }
    return std::pair{gx, gy};
  };
  const auto [dgx, dgy] = gradients(drive_frame.node_potentials);
  const auto [agx, agy] = gradients(adjoint_potentials);

  Eigen::VectorXd area(E);
  for (int e = 0; e < E; ++e) area[e] = element_area(mesh, e);

  SensitivityMatrix J;
  J.background = sigma0;
  J.entries.resize(protocol.n_measurements(), E);
  int row = 0;
  for (size_t d = 0; d < protocol.measure_pairs.size(); ++d) {
    for (const auto& pr : protocol.measure_pairs[d]) {
      const int s = pair_slot.at({pr[0], pr[1]});
      J.entries.row(row++) =
          -(area.transpose().array() *
            (dgx.row(static_cast<long>(d)).array() * agx.row(s).array() +
             dgy.row(static_cast<long>(d)).array() * agy.row(s).array()))
               .matrix();
    }
  }
  if (!J.entries.allFinite())
    throw Error("compute_jacobian: non-finite sensitivity entries");
  return J;
}

// Binary dump: magic, row/col counts, then row-major 8-byte doubles in
// native byte order.
inline void save_jacobian(const std::string& path, const Eigen::MatrixXd& J) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("save_jacobian: cannot open " + path);
  const char magic[8] = {'E', 'I', 'T', 'J', 'A', 'C', '0', '1'};
  f.write(magic, sizeof(magic));
  const std::int64_t rows = J.rows(), cols = J.cols();
  f.write(reinterpret_cast<const char*>(&rows), sizeof(rows));
  f.write(reinterpret_cast<const char*>(&cols), sizeof(cols));
  for (long r = 0; r < J.rows(); ++r)
    for (long c = 0; c < J.cols(); ++c) {
      const double v = J(r, c);
      f.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
  if (!f) throw Error("save_jacobian: write to " + path + " failed");
}

inline Eigen::MatrixXd load_jacobian(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("load_jacobian: cannot open " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::string(magic, 8) != "EITJAC01")
    throw ParseError("load_jacobian: " + path + ": bad magic");
  std::int64_t rows = 0, cols = 0;
  f.read(reinterpret_cast<char*>(&rows), sizeof(rows));
  f.read(reinterpret_cast<char*>(&cols), sizeof(cols));
  if (!f || rows <= 0 || cols <= 0)
    throw ParseError("load_jacobian: " + path + ": bad header dimensions");
  Eigen::MatrixXd J(rows, cols);
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c) {
      double v;
      f.read(reinterpret_cast<char*>(&v), sizeof(v));
      if (!f) throw ParseError("load_jacobian: " + path + ": truncated payload");
      J(r, c) = v;
    }
  return J;
}

}  // namespace eit
