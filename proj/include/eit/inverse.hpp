#pragma once

// One-step linearized difference imaging.
//
// Solves  min 0.5*(||J*ds - dV||^2 + alpha*||L*ds||^2)  for the conductivity
// change ds, either unconstrained (regularized normal equations) or subject
// to ds <= 0 via an active-set non-negative least squares solver on -ds.
// L is the element-graph discrete Laplacian.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "eit/common.hpp"
#include "eit/mesh.hpp"
#include "eit/sensitivity.hpp"

namespace eit {

struct RegularizationOperator {
  Eigen::SparseMatrix<double> matrix;  // element-graph Laplacian
};

inline RegularizationOperator build_laplacian(const Mesh& mesh) {
  const ElementAdjacency adj = element_adjacency(mesh);
  const int E = mesh.n_elements();
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(adj.pairs.size() * 2 + E);
  Eigen::VectorXd degree = Eigen::VectorXd::Zero(E);
  for (const auto& pr : adj.pairs) {
    trips.emplace_back(pr[0], pr[1], -1.0);
    trips.emplace_back(pr[1], pr[0], -1.0);
    degree[pr[0]] += 1.0;
    degree[pr[1]] += 1.0;
  }
  for (int e = 0; e < E; ++e) trips.emplace_back(e, e, degree[e]);
  RegularizationOperator op;
  op.matrix.resize(E, E);
  op.matrix.setFromTriplets(trips.begin(), trips.end());
  return op;
}

enum class ConstraintMode { nonpositive, unconstrained };

struct ReconstructionResult {
  Eigen::VectorXd delta_sigma;  // per-element conductivity change, S/m
  double alpha = 0.0;
  bool constrained = false;
  double data_residual = 0.0;  // ||J*ds - dV||_2
  double roughness = 0.0;      // ||L*ds||_2
  int iterations = 0;          // active-set iterations, 0 when unconstrained
};

namespace detail {

// Lawson–Hanson NNLS in normal-equation form: minimize 0.5 x'Gx - h'x over
// x >= 0 with G symmetric positive definite. The Cholesky factor of the
// passive-set block grows by appended columns; removals trigger a rebuild.
// The problem is Jacobi-scaled internally (x = D y with D = diag(G)^-1/2,
// positive, so y >= 0 iff x >= 0); G is strictly convex, hence the unique
// minimizer is unchanged.
class NnlsSolver {
 public:
  NnlsSolver(const Eigen::MatrixXd& G, const Eigen::VectorXd& h, int max_iter)
      : max_iter_(max_iter), n_(static_cast<int>(h.size())) {
    dscale_ = Eigen::VectorXd::Ones(n_);
    for (int i = 0; i < n_; ++i) {
      const double gii = G(i, i);
      if (gii <= 0.0)
        throw Error("nonpositive reconstruction: normal matrix not positive "
                    "definite");
      dscale_[i] = 1.0 / std::sqrt(gii);
    }
    G_ = dscale_.asDiagonal() * G * dscale_.asDiagonal();
    h_ = dscale_.cwiseProduct(h);
  }

  Eigen::VectorXd solve(int* iterations_out) {
    return dscale_.cwiseProduct(solve_scaled(iterations_out));
  }

 private:
  Eigen::VectorXd solve_scaled(int* iterations_out) {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(n_);
    std::vector<int> passive;
    Eigen::MatrixXd R;  // upper-triangular, R'R = G[passive,passive]
    std::vector<char> suppressed(n_, 0);
    const double wtol = 1e-12 * std::max(h_.cwiseAbs().maxCoeff(), 1e-300);
    int iter = 0;

    while (true) {
      const Eigen::VectorXd w = h_ - G_ * x;
      int j = -1;
      double wbest = wtol;
      for (int i = 0; i < n_; ++i) {
        if (x[i] > 0.0 || suppressed[i]) continue;
        if (w[i] > wbest) {  // strict: lowest index wins exact ties
          wbest = w[i];
          j = i;
        }
      }
      if (j < 0) break;  // KKT point

      append(passive, R, j);
      bool appended_failed = false;
      while (true) {
        if (++iter > max_iter_) {
          throw Error("nonpositive reconstruction: active-set solver exceeded " +
                      std::to_string(max_iter_) + " iterations (passive set " +
                      std::to_string(passive.size()) + ", best gradient " +
                      std::to_string(wbest) + ")");
        }
        const Eigen::VectorXd s = subproblem(passive, R);
        double smin = s.minCoeff();
        if (smin > 0.0) {
          x.setZero();
          for (size_t k = 0; k < passive.size(); ++k) x[passive[k]] = s[k];
          break;
        }
        // Step toward s until the first passive variable hits zero.
        double beta = 1.0;
        for (size_t k = 0; k < passive.size(); ++k)
          if (s[k] <= 0.0) {
            const double xk = x[passive[k]];
            beta = std::min(beta, xk / (xk - s[k]));
          }
        if (beta <= 0.0 && passive.back() == j) {
          // Roundoff made the fresh variable infeasible; drop it and keep it
          // out of the candidate set until the iterate moves.
          appended_failed = true;
          passive.pop_back();
          if (!passive.empty()) rebuild(passive, R);
          break;
        }
        double xmax = 0.0;
        for (size_t k = 0; k < passive.size(); ++k) {
          const int i = passive[k];
          x[i] += beta * (s[k] - x[i]);
          xmax = std::max(xmax, x[i]);
        }
        // The blocking variables land on zero only up to roundoff.
        const double zero_tol = 1e-14 * std::max(1.0, xmax);
        std::vector<int> kept;
        kept.reserve(passive.size());
        for (int i : passive) {
          if (x[i] <= zero_tol)
            x[i] = 0.0;
          else
            kept.push_back(i);
        }
        if (kept.size() < passive.size()) {
          passive = std::move(kept);
          if (!passive.empty()) rebuild(passive, R);
        }
        std::fill(suppressed.begin(), suppressed.end(), 0);
      }
      if (appended_failed)
        suppressed[j] = 1;
      else
        std::fill(suppressed.begin(), suppressed.end(), 0);
    }
    if (iterations_out) *iterations_out = iter;
    return x;
  }

  void append(std::vector<int>& passive, Eigen::MatrixXd& R, int j) {
    const int k = static_cast<int>(passive.size());
    Eigen::MatrixXd grown(k + 1, k + 1);
    grown.setZero();
    if (k > 0) grown.topLeftCorner(k, k) = R;
    Eigen::VectorXd g(k);
    for (int i = 0; i < k; ++i) g[i] = G_(passive[i], j);
    if (k > 0) {
      const Eigen::VectorXd r =
          R.topLeftCorner(k, k).transpose().triangularView<Eigen::Lower>().solve(g);
      grown.col(k).head(k) = r;
      const double rho2 = G_(j, j) - r.squaredNorm();
      if (rho2 <= 0.0)
        throw Error("nonpositive reconstruction: normal matrix numerically "
                    "singular; increase alpha");
      grown(k, k) = std::sqrt(rho2);
    } else {
      if (G_(j, j) <= 0.0)
        throw Error("nonpositive reconstruction: normal matrix not positive "
                    "definite");
      grown(0, 0) = std::sqrt(G_(j, j));
    }
    R = std::move(grown);
    passive.push_back(j);
  }

  Eigen::VectorXd subproblem(const std::vector<int>& passive, const Eigen::MatrixXd& R) {
    const int k = static_cast<int>(passive.size());
    Eigen::VectorXd hp(k);
    for (int i = 0; i < k; ++i) hp[i] = h_[passive[i]];
    const Eigen::VectorXd y = R.transpose().triangularView<Eigen::Lower>().solve(hp);
    return R.triangularView<Eigen::Upper>().solve(y);
  }

  void rebuild(const std::vector<int>& passive, Eigen::MatrixXd& R) {
    const int k = static_cast<int>(passive.size());
    Eigen::MatrixXd Gpp(k, k);
    for (int a = 0; a < k; ++a)
      for (int b = 0; b < k; ++b) Gpp(a, b) = G_(passive[a], passive[b]);
    const Eigen::LLT<Eigen::MatrixXd> llt(Gpp);
    if (llt.info() != Eigen::Success)
      throw Error("nonpositive reconstruction: passive block lost positive "
                  "definiteness; increase alpha");
    R = llt.matrixU();
  }

  Eigen::MatrixXd G_;
  Eigen::VectorXd h_;
  Eigen::VectorXd dscale_;
  const int max_iter_;
  const int n_;
};

inline void require_full_rank_for_zero_alpha(const Eigen::MatrixXd& J) {
  if (J.rows() < J.cols())
    throw Error("reconstruct: alpha = 0 with fewer measurements than elements "
                "is ill-posed; supply alpha > 0");
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(J);
  if (qr.rank() < J.cols())
    throw Error("reconstruct: alpha = 0 with rank-deficient sensitivity matrix "
                "(rank " + std::to_string(qr.rank()) + " of " +
                std::to_string(J.cols()) + "); supply alpha > 0");
}

}  // namespace detail

inline ReconstructionResult reconstruct(const SensitivityMatrix& J,
                                        const RegularizationOperator& L, double alpha,
                                        const Eigen::VectorXd& dV, ConstraintMode mode) {
  const Eigen::MatrixXd& A = J.entries;
  const int E = static_cast<int>(A.cols());
  if (dV.size() != A.rows())
    throw Error("reconstruct: voltage difference has " + std::to_string(dV.size()) +
                " entries, sensitivity matrix has " + std::to_string(A.rows()) +
                " rows");
  if (L.matrix.rows() != E || L.matrix.cols() != E)
    throw Error("reconstruct: regularization operator size mismatch");
  if (alpha < 0.0) throw Error("reconstruct: alpha must be non-negative");
  if (alpha == 0.0) detail::require_full_rank_for_zero_alpha(A);

  Eigen::MatrixXd G = A.transpose() * A;
  if (alpha > 0.0)
    G += alpha * Eigen::MatrixXd(L.matrix.transpose() * L.matrix);
  const Eigen::VectorXd Jtv = A.transpose() * dV;

  ReconstructionResult res;
  res.alpha = alpha;
  res.constrained = (mode == ConstraintMode::nonpositive);

  if (mode == ConstraintMode::unconstrained) {
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(G);
    if (ldlt.info() != Eigen::Success)
      throw Error("reconstruct: normal equations not factorizable; increase alpha");
    Eigen::VectorXd ds = ldlt.solve(Jtv);
    ds += ldlt.solve(Jtv - G * ds);  // one refinement pass
    res.delta_sigma = ds;
  } else {
    // x = -ds >= 0 minimizes 0.5 x'Gx - (-J'dV)'x.
    detail::NnlsSolver nnls(G, -Jtv, 10 * E);
    res.delta_sigma = -nnls.solve(&res.iterations);
  }

  res.data_residual = (A * res.delta_sigma - dV).norm();
  res.roughness = (L.matrix * res.delta_sigma).norm();
  return res;
}

// Same objective after rescaling the sensitivity columns to unit norm, so a
// single alpha behaves comparably across meshes and compensates the low
// sensitivity at the domain centre. The change is mapped back to physical
// units and the stored residual/roughness refer to the physical variables.
inline ReconstructionResult reconstruct_column_scaled(const SensitivityMatrix& J,
                                                      const RegularizationOperator& L,
                                                      double alpha,
                                                      const Eigen::VectorXd& dV,
                                                      ConstraintMode mode) {
  Eigen::VectorXd D = J.entries.colwise().norm();
  for (long i = 0; i < D.size(); ++i)
    if (D[i] <= 0.0) D[i] = 1.0;
  SensitivityMatrix scaled;
  scaled.background = J.background;
  scaled.entries = J.entries * D.cwiseInverse().asDiagonal();
  ReconstructionResult res = reconstruct(scaled, L, alpha, dV, mode);
  res.delta_sigma = res.delta_sigma.cwiseQuotient(D);
  res.data_residual = (J.entries * res.delta_sigma - dV).norm();
  res.roughness = (L.matrix * res.delta_sigma).norm();
  return res;
}

struct SweepPoint {
  double alpha = 0.0;
  double data_residual = 0.0;
  double roughness = 0.0;
};

// (residual, roughness) L-curve over a list of alphas.
inline std::vector<SweepPoint> alpha_sweep(const SensitivityMatrix& J,
                                           const RegularizationOperator& L,
                                           const std::vector<double>& alphas,
                                           const Eigen::VectorXd& dV,
                                           ConstraintMode mode) {
  std::vector<SweepPoint> out;
  out.reserve(alphas.size());
  for (double a : alphas) {
    const ReconstructionResult r = reconstruct(J, L, a, dV, mode);
    out.push_back({a, r.data_residual, r.roughness});
  }
  return out;
}

// Area-weighted mean conductivity change over elements whose centroid lies
// in the disk of the given diameter.
inline double region_average(const ReconstructionResult& result, const Mesh& mesh,
                             Vec2 center, double diameter) {
  if (diameter <= 0.0) throw Error("region_average: diameter must be positive");
  if (result.delta_sigma.size() != mesh.n_elements())
    throw Error("region_average: result does not match mesh element count");
  const double r = 0.5 * diameter;
  double area_sum = 0.0, weighted = 0.0;
  for (int e = 0; e < mesh.n_elements(); ++e) {
    if (distance(element_centroid(mesh, e), center) > r) continue;
    const double a = element_area(mesh, e);
    area_sum += a;
    weighted += a * result.delta_sigma[e];
  }
  if (area_sum <= 0.0)
    throw Error("region_average: no element centroid falls inside the region");
  return weighted / area_sum;
}

// CSV with columns element_id, centroid_x_m, centroid_y_m, delta_sigma_S_per_m.
inline void write_reconstruction_csv(const std::string& path, const Mesh& mesh,
                                     const ReconstructionResult& result) {
  if (result.delta_sigma.size() != mesh.n_elements())
    throw Error("write_reconstruction_csv: result does not match mesh");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("write_reconstruction_csv: cannot open " + path);
  f << "element_id,centroid_x_m,centroid_y_m,delta_sigma_S_per_m\n";
  char buf[128];
  for (int e = 0; e < mesh.n_elements(); ++e) {
    const Vec2 c = element_centroid(mesh, e);
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", e, c.x, c.y,
                  result.delta_sigma[e]);
    f << buf;
  }
}

inline Eigen::VectorXd read_reconstruction_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("read_reconstruction_csv: cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line.rfind("element_id", 0) != 0)
    throw ParseError("read_reconstruction_csv: " + path + ": missing header");
  std::vector<double> vals;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    int id;
    double x, y, ds;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf", &id, &x, &y, &ds) != 4)
      throw ParseError("read_reconstruction_csv: " + path + ": bad record at line " +
                       std::to_string(lineno));
    vals.push_back(ds);
  }
  return Eigen::Map<Eigen::VectorXd>(vals.data(), static_cast<long>(vals.size()));
}

// Grayscale raster of a per-element field sampled on a uniform grid over
// the mesh bounding square. Constrained images map [min,0] to black..white;
// diverging images map [-max|v|, +max|v|] to black..white with zero at
// mid-gray. Pixels outside the mesh are white.
inline void write_pgm(const std::string& path, const Mesh& mesh,
                      const Eigen::VectorXd& values, int size, bool diverging) {
  if (values.size() != mesh.n_elements())
    throw Error("write_pgm: values do not match mesh element count");
  if (size < 2) throw Error("write_pgm: raster size too small");

  const double R = mesh.radius;
  std::vector<unsigned char> img(static_cast<size_t>(size) * size, 255);

  double lo = 0.0, hi = 0.0;
  if (diverging) {
    const double A = std::max(values.cwiseAbs().maxCoeff(), 1e-300);
    lo = -A;
    hi = A;
  } else {
    lo = std::min(values.minCoeff(), 0.0);
    hi = 0.0;
  }
  const auto shade = [&](double v) -> unsigned char {
    if (hi <= lo) return 255;
    const double t = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
    return static_cast<unsigned char>(std::lround(255.0 * t));
  };

  for (int py = 0; py < size; ++py) {
    // Row 0 is the top of the image (largest y).
    const double y = R - (2.0 * R) * (py + 0.5) / size;
    for (int px = 0; px < size; ++px) {
      const double x = -R + (2.0 * R) * (px + 0.5) / size;
      if (x * x + y * y > R * R) continue;
      const Vec2 p{x, y};
      for (int e = 0; e < mesh.n_elements(); ++e) {
        const auto& t = mesh.elements[e];
        const Vec2 a = mesh.nodes[t[0]], b = mesh.nodes[t[1]], c = mesh.nodes[t[2]];
        const double d0 = cross(b - a, p - a);
        const double d1 = cross(c - b, p - b);
        const double d2 = cross(a - c, p - c);
        const double eps = -1e-12 * R * R;
        if (d0 >= eps && d1 >= eps && d2 >= eps) {
          img[static_cast<size_t>(py) * size + px] = shade(values[e]);
          break;
        }
      }
    }
  }

  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("write_pgm: cannot open " + path);
  f << "P5\n" << size << " " << size << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.data()), static_cast<long>(img.size()));
  if (!f) throw Error("write_pgm: write to " + path + " failed");
}

}  // namespace eit
