#pragma once

// Material models: equivalent-circuit impedance and its least-squares fit,
// percolation conductivity versus filler fraction, and the piezoresistive
// load law with saturation.
//
// Circuit topology: R_s and L_s in series with a parallel R_p || C_p block,
//   Z(f) = R_s + j*w*L_s + R_p / (1 + j*w*R_p*C_p),  w = 2*pi*f.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "eit/common.hpp"

namespace eit {

inline std::pair<double, double> polar_to_complex(double magnitude, double theta) {
  if (magnitude < 0.0) throw Error("polar_to_complex: magnitude must be non-negative");
  return {magnitude * std::cos(theta), magnitude * std::sin(theta)};
}

struct CircuitParams {
  double R_p = 0.0;  // Ohm
  double R_s = 0.0;  // Ohm
  double C_p = 0.0;  // F
  double L_s = 0.0;  // H
};

inline void validate_circuit(const CircuitParams& p) {
  if (p.R_p <= 0.0 || p.R_s <= 0.0 || p.C_p <= 0.0 || p.L_s <= 0.0)
    throw Error("circuit parameters must be strictly positive");
}

inline std::complex<double> circuit_impedance(const CircuitParams& p, double f) {
  if (f <= 0.0) throw Error("circuit_impedance: frequency must be positive");
  const double w = 2.0 * std::numbers::pi * f;
  const std::complex<double> jw(0.0, w);
  return p.R_s + jw * p.L_s + p.R_p / (1.0 + jw * p.R_p * p.C_p);
}

struct SpectrumPoint {
  double frequency_Hz = 0.0;
  std::complex<double> Z;  // Ohm
};

struct ImpedanceSpectrum {
  std::vector<SpectrumPoint> points;
};

inline void validate_spectrum(const ImpedanceSpectrum& s) {
  if (s.points.empty()) throw ValidationError("spectrum: no points");
  double prev = 0.0;
  for (const auto& pt : s.points) {
    if (pt.frequency_Hz <= prev)
      throw ValidationError("spectrum: frequencies must be strictly increasing "
                            "and positive");
    prev = pt.frequency_Hz;
  }
}

inline ImpedanceSpectrum synthesize_spectrum(const CircuitParams& p, double f_lo,
                                             double f_hi, int n_points) {
  if (n_points < 2 || f_lo <= 0.0 || f_hi <= f_lo)
    throw Error("synthesize_spectrum: bad sweep arguments");
  ImpedanceSpectrum s;
  s.points.reserve(n_points);
  for (int k = 0; k < n_points; ++k) {
    const double f = f_lo * std::pow(f_hi / f_lo, static_cast<double>(k) / (n_points - 1));
    s.points.push_back({f, circuit_impedance(p, f)});
  }
  return s;
}

struct CircuitFit {
  CircuitParams params;
  double residual = 0.0;                // sqrt of summed squared complex error, Ohm
  std::vector<double> point_residuals;  // |Z_fit - Z_data| per point, Ohm
  bool converged = false;
  int starts_tried = 0;
};

namespace detail {

// Residuals and Jacobian in log-parameter space (positivity by construction).
inline void circuit_residuals(const Eigen::Vector4d& logp, const ImpedanceSpectrum& s,
                              Eigen::VectorXd& r, Eigen::MatrixXd* Jout) {
  const double Rp = std::exp(logp[0]), Rs = std::exp(logp[1]);
  const double Cp = std::exp(logp[2]), Ls = std::exp(logp[3]);
  const long m = static_cast<long>(s.points.size());
  r.resize(2 * m);
  if (Jout) Jout->resize(2 * m, 4);
  for (long i = 0; i < m; ++i) {
    const double w = 2.0 * std::numbers::pi * s.points[i].frequency_Hz;
    const std::complex<double> jw(0.0, w);
    const std::complex<double> den = 1.0 + jw * Rp * Cp;
    const std::complex<double> Z = Rs + jw * Ls + Rp / den;
    const std::complex<double> diff = Z - s.points[i].Z;
    r[2 * i] = diff.real();
    r[2 * i + 1] = diff.imag();
    if (Jout) {
      const std::complex<double> dRp = 1.0 / (den * den) * Rp;      // d/d logRp
      const std::complex<double> dRs = Rs;                          // d/d logRs
      const std::complex<double> dCp = -jw * Rp * Rp / (den * den) * Cp;
      const std::complex<double> dLs = jw * Ls;
      (*Jout)(2 * i, 0) = dRp.real();
      (*Jout)(2 * i + 1, 0) = dRp.imag();
      (*Jout)(2 * i, 1) = dRs.real();
      (*Jout)(2 * i + 1, 1) = dRs.imag();
      (*Jout)(2 * i, 2) = dCp.real();
      (*Jout)(2 * i + 1, 2) = dCp.imag();
      (*Jout)(2 * i, 3) = dLs.real();
      (*Jout)(2 * i + 1, 3) = dLs.imag();
    }
  }
}

// Plain Levenberg–Marquardt with multiplicative damping on the normal
// equations; returns true when the gradient or step drops below tolerance.
inline bool levenberg_marquardt(Eigen::Vector4d& logp, const ImpedanceSpectrum& s,
                                double& cost_out) {
  Eigen::VectorXd r;
  Eigen::MatrixXd J;
  circuit_residuals(logp, s, r, &J);
  double cost = r.squaredNorm();
  double lambda = 1e-3;
  bool converged = false;

  for (int it = 0; it < 200; ++it) {
    const Eigen::Matrix4d H = J.transpose() * J;
    const Eigen::Vector4d g = J.transpose() * r;
    if (g.cwiseAbs().maxCoeff() < 1e-12 * std::max(cost, 1e-30)) {
      converged = true;
      break;
    }
    bool stepped = false;
    for (int attempt = 0; attempt < 30; ++attempt) {
      Eigen::Matrix4d damped = H;
      for (int d = 0; d < 4; ++d)
        damped(d, d) += lambda * std::max(H(d, d), 1e-30);
      const Eigen::Vector4d step = damped.ldlt().solve(-g);
      const Eigen::Vector4d trial = logp + step;
      Eigen::VectorXd rt;
      circuit_residuals(trial, s, rt, nullptr);
      const double trial_cost = rt.squaredNorm();
      if (std::isfinite(trial_cost) && trial_cost < cost) {
        logp = trial;
        r = rt;
        cost = trial_cost;
        lambda = std::max(lambda / 3.0, 1e-12);
        stepped = true;
        if (step.cwiseAbs().maxCoeff() < 1e-13) converged = true;
        break;
      }
      lambda *= 4.0;
    }
    if (!stepped) {
      converged = true;  // no further descent possible at any damping
      break;
    }
    if (converged) break;
    circuit_residuals(logp, s, r, &J);
  }
  cost_out = cost;
  return converged;
}

}  // namespace detail

// Nonlinear least squares in log parameters, multi-start from deterministic
// scalings of a heuristic initializer (R_s from the high-frequency real
// part, R_p from the low-frequency real part minus R_s).
inline CircuitFit fit_circuit(const ImpedanceSpectrum& spectrum) {
  validate_spectrum(spectrum);
  const auto& pts = spectrum.points;
  if (pts.size() < 8)
    throw Error("fit_circuit: need at least 8 frequency points");
  if (pts.back().frequency_Hz < 100.0 * pts.front().frequency_Hz)
    throw Error("fit_circuit: spectrum must span at least two decades");

  const double rs0 = std::max(pts.back().Z.real(), 1e-3);
  const double rp0 = std::max(pts.front().Z.real() - rs0, 1e-3);

  // Reactive guesses: capacitance from the most capacitive point, inductance
  // from the highest-frequency imaginary part.
  double cp0 = 0.0;
  for (const auto& pt : pts)
    if (pt.Z.imag() < 0.0)
      cp0 = std::max(cp0, -pt.Z.imag() /
                              (2.0 * std::numbers::pi * pt.frequency_Hz * rp0 * rp0));
  if (cp0 <= 0.0) cp0 = 1.0 / (2.0 * std::numbers::pi * pts.front().frequency_Hz * rp0 * 1e3);
  const double whigh = 2.0 * std::numbers::pi * pts.back().frequency_Hz;
  double ls0 = pts.back().Z.imag() / whigh;
  if (ls0 <= 0.0) ls0 = rs0 / whigh;

  CircuitFit best;
  double best_cost = std::numeric_limits<double>::infinity();
  Eigen::Vector4d best_logp = Eigen::Vector4d::Zero();

  for (int k = 0; k < 8; ++k) {
    const double factor = std::pow(10.0, -2.0 + 4.0 * k / 7.0);
    Eigen::Vector4d logp(std::log(rp0), std::log(rs0), std::log(cp0 * factor),
                         std::log(ls0 * factor));
    double cost = 0.0;
    const bool ok = detail::levenberg_marquardt(logp, spectrum, cost);
    ++best.starts_tried;
    if (std::isfinite(cost) && cost < best_cost) {
      best_cost = cost;
      best_logp = logp;
      best.converged = ok;
    }
  }

  if (!std::isfinite(best_cost))
    throw Error("fit_circuit: no start produced a finite residual");

  best.params = {std::exp(best_logp[0]), std::exp(best_logp[1]),
                 std::exp(best_logp[2]), std::exp(best_logp[3])};
  Eigen::VectorXd r;
  detail::circuit_residuals(best_logp, spectrum, r, nullptr);
  best.residual = r.norm();
  best.point_residuals.resize(pts.size());
  for (size_t i = 0; i < pts.size(); ++i)
    best.point_residuals[i] = std::hypot(r[2 * i], r[2 * i + 1]);
  if (!best.converged)
    throw Error("fit_circuit: no start converged; best residual " +
                std::to_string(best.residual) + " Ohm");
  return best;
}

// Percolation law: constant floor below the threshold, power-law rise above.
struct PercolationModel {
  double sigma_below = 0.002;  // S/m, pre-threshold plateau
  double sigma_scale = 53.0;   // S/m
  double v_c = 0.0125;         // critical volume fraction
  double t = 2.0;              // critical exponent
};

inline void validate_percolation(const PercolationModel& m) {
  if (m.v_c <= 0.0 || m.v_c >= 1.0)
    throw Error("percolation model: v_c must lie in (0,1)");
  if (m.t <= 0.0) throw Error("percolation model: exponent must be positive");
  if (m.sigma_below <= 0.0 || m.sigma_scale <= 0.0)
    throw Error("percolation model: conductivities must be positive");
}

inline double percolation_sigma(const PercolationModel& m, double v) {
  validate_percolation(m);
  if (v < 0.0 || v >= 1.0)
    throw Error("percolation_sigma: volume fraction must lie in [0,1)");
  if (v <= m.v_c) return m.sigma_below;
  return m.sigma_below + m.sigma_scale * std::pow(v - m.v_c, m.t);
}

// Normalized conductivity under compressive load: exponential approach to
// the saturation plateau, g(0) = 1.
struct PiezoModel {
  double saturation_drop = 0.5;  // max fractional conductivity loss, in (0,1)
  double load_scale = 780.0;     // N
};

inline void validate_piezo(const PiezoModel& m) {
  if (m.saturation_drop <= 0.0 || m.saturation_drop >= 1.0)
    throw Error("piezo model: saturation_drop must lie in (0,1)");
  if (m.load_scale <= 0.0) throw Error("piezo model: load_scale must be positive");
}

inline double piezo_factor(const PiezoModel& m, double load) {
  validate_piezo(m);
  if (load < 0.0) throw Error("piezo_factor: load must be non-negative");
  return 1.0 - m.saturation_drop * (1.0 - std::exp(-load / m.load_scale));
}

// Spectrum CSV, header-detected:
//   frequency_Hz,Z_abs_ohm,theta_rad   or   frequency_Hz,Z_real_ohm,Z_imag_ohm
inline ImpedanceSpectrum load_spectrum_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("load_spectrum_csv: cannot open " + path);
  std::string header;
  if (!std::getline(f, header))
    throw ParseError("load_spectrum_csv: " + path + ": empty file");
  if (!header.empty() && header.back() == '\r') header.pop_back();

  bool polar;
  if (header == "frequency_Hz,Z_abs_ohm,theta_rad")
    polar = true;
  else if (header == "frequency_Hz,Z_real_ohm,Z_imag_ohm")
    polar = false;
  else
    throw ParseError("load_spectrum_csv: " + path + ": unrecognized header '" +
                     header + "'");

  ImpedanceSpectrum s;
  std::string line;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    double freq, a, b;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &freq, &a, &b) != 3)
      throw ParseError("load_spectrum_csv: " + path + ": bad record at line " +
                       std::to_string(lineno));
    if (polar) {
      const auto [re, im] = polar_to_complex(a, b);
      s.points.push_back({freq, {re, im}});
    } else {
      s.points.push_back({freq, {a, b}});
    }
  }
  validate_spectrum(s);
  return s;
}

inline void write_spectrum_csv(const std::string& path, const ImpedanceSpectrum& s,
                               bool polar = false) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("write_spectrum_csv: cannot open " + path);
  char buf[160];
  if (polar) {
    f << "frequency_Hz,Z_abs_ohm,theta_rad\n";
    for (const auto& pt : s.points) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", pt.frequency_Hz,
                    std::abs(pt.Z), std::arg(pt.Z));
      f << buf;
    }
  } else {
    f << "frequency_Hz,Z_real_ohm,Z_imag_ohm\n";
    for (const auto& pt : s.points) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", pt.frequency_Hz,
                    pt.Z.real(), pt.Z.imag());
      f << buf;
    }
  }
}

inline void write_fit_report(const std::string& path, const CircuitFit& fit,
                             const ImpedanceSpectrum& s) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("write_fit_report: cannot open " + path);
  char buf[200];
  f << "equivalent_circuit_fit\n";
  std::snprintf(buf, sizeof(buf),
                "R_p_ohm: %.10g\nR_s_ohm: %.10g\nC_p_F: %.10g\nL_s_H: %.10g\n",
                fit.params.R_p, fit.params.R_s, fit.params.C_p, fit.params.L_s);
  f << buf;
  std::snprintf(buf, sizeof(buf), "residual_ohm: %.10g\nstarts_tried: %d\n",
                fit.residual, fit.starts_tried);
  f << buf;
  f << "per_point_residuals:\n";
  f << "index,frequency_Hz,abs_error_ohm\n";
  for (size_t i = 0; i < fit.point_residuals.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g\n", i,
                  s.points[i].frequency_Hz, fit.point_residuals[i]);
    f << buf;
  }
}

}  // namespace eit
