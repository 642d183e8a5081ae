// eitkit command line: mesh generation, phantom scenario simulation,
// difference-image reconstruction, region metrics and equivalent-circuit
// fitting.
//
// Exit codes: 0 success, 1 runtime or data error, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "eit/forward.hpp"
#include "eit/inverse.hpp"
#include "eit/manifest.hpp"
#include "eit/material.hpp"
#include "eit/mesh.hpp"
#include "eit/phantom.hpp"
#include "eit/sensitivity.hpp"

namespace fs = std::filesystem;
using namespace eit;

namespace {

std::string sanitize_label(const std::string& label) {
  std::string out;
  for (char c : label)
    out.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_'
                      ? c
                      : '_');
  return out;
}

Vec2 parse_point(const std::string& text) {
  double x = 0.0, y = 0.0;
  if (std::sscanf(text.c_str(), "%lf,%lf", &x, &y) != 2)
    throw Error("expected a point as 'x,y', got '" + text + "'");
  return {x, y};
}

struct MeshArgs {
  double radius = 0.0665;
  int electrodes = 16;
  double coverage = 0.5;
  double edge = 0.008;
  std::string out;
};

int run_mesh(const MeshArgs& a) {
  const Mesh mesh = generate_disk_mesh(a.radius, a.electrodes, a.coverage, a.edge);
  save_mesh(mesh, a.out);

  RunManifest man;
  man.command = "mesh";
  man.outputs = {a.out};
  write_manifest(man, a.out + ".manifest.json");
  std::cout << "mesh: " << mesh.n_nodes() << " nodes, " << mesh.n_elements()
            << " elements, " << mesh.n_electrodes() << " electrodes -> " << a.out
            << "\n";
  return 0;
}

struct SimulateArgs {
  std::string mesh;
  std::string scenario;
  std::string outdir;
  std::string protocol;
  double contact_z = 1e-3;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

int run_simulate(const SimulateArgs& a) {
  const Mesh mesh = load_mesh(a.mesh);
  Scenario sc = load_scenario(a.scenario);
  if (a.seed_set) sc.seed = a.seed;
  const Protocol proto = a.protocol.empty()
                             ? adjacent_protocol(mesh.n_electrodes())
                             : load_protocol(a.protocol);
  validate_protocol(proto, mesh.n_electrodes());
  const ContactImpedances z = uniform_contact_impedance(mesh.n_electrodes(), a.contact_z);

  // Everything is computed before any file is written: a failing step
  // leaves no partial outputs behind.
  const auto frames = simulate_scenario(sc, mesh, proto, z);

  fs::create_directories(a.outdir);
  RunManifest man;
  man.command = "simulate";
  man.add_input(a.mesh);
  man.add_input(a.scenario);
  if (!a.protocol.empty()) man.add_input(a.protocol);
  man.seed = sc.seed;

  nlohmann::json steps = nlohmann::json::array();
  for (size_t i = 0; i < frames.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "step_%02zu_%s.csv", i,
                  sanitize_label(frames[i].first).c_str());
    const std::string path = (fs::path(a.outdir) / name).string();
    write_voltages_csv(path, frames[i].second, proto);
    man.outputs.push_back(path);
    steps.push_back({{"label", frames[i].first}, {"file", name}});
  }
  write_manifest(man, (fs::path(a.outdir) / "manifest.json").string(),
                 nlohmann::json{{"steps", steps}});
  std::cout << "simulate: " << frames.size() << " step voltage files -> " << a.outdir
            << "\n";
  return 0;
}

struct ReconstructArgs {
  std::string mesh;
  std::string baseline;
  std::string frame;
  double alpha = 3e-2;
  std::string mode = "nonpositive";
  double sigma0 = 1e-3;
  std::string out;
  std::string raster;
  int raster_size = 256;
  double contact_z = 1e-3;
  std::string protocol;
  bool no_column_scale = false;
  std::string jacobian_in;
  std::string jacobian_out;
  std::string alpha_sweep;  // "min,max,count"
};

int run_reconstruct(const ReconstructArgs& a) {
  const Mesh mesh = load_mesh(a.mesh);
  const Protocol proto = a.protocol.empty()
                             ? adjacent_protocol(mesh.n_electrodes())
                             : load_protocol(a.protocol);
  validate_protocol(proto, mesh.n_electrodes());

  const Eigen::VectorXd v_base = read_voltages_csv(a.baseline);
  const Eigen::VectorXd v_frame = read_voltages_csv(a.frame);
  const int expected = proto.n_measurements();
  if (v_base.size() != expected || v_frame.size() != v_base.size())
    throw Error("voltage dimension mismatch: protocol expects " +
                std::to_string(expected) + " measurements, baseline has " +
                std::to_string(v_base.size()) + ", frame has " +
                std::to_string(v_frame.size()));
  const Eigen::VectorXd dV = v_frame - v_base;

  const ConductivityField background{
      Eigen::VectorXd::Constant(mesh.n_elements(), a.sigma0)};
  const ContactImpedances z = uniform_contact_impedance(mesh.n_electrodes(), a.contact_z);

  SensitivityMatrix J;
  if (!a.jacobian_in.empty()) {
    J.entries = load_jacobian(a.jacobian_in);
    if (J.entries.rows() != expected || J.entries.cols() != mesh.n_elements())
      throw Error("cached sensitivity matrix is " + std::to_string(J.entries.rows()) +
                  "x" + std::to_string(J.entries.cols()) + ", expected " +
                  std::to_string(expected) + "x" + std::to_string(mesh.n_elements()));
    J.background = background;
  } else {
    J = compute_jacobian(mesh, background, z, proto);
  }
  if (!a.jacobian_out.empty()) save_jacobian(a.jacobian_out, J.entries);

  const RegularizationOperator L = build_laplacian(mesh);
  const ConstraintMode mode = a.mode == "unconstrained" ? ConstraintMode::unconstrained
                                                        : ConstraintMode::nonpositive;

  RunManifest man;
  man.command = "reconstruct";
  man.add_input(a.mesh);
  man.add_input(a.baseline);
  man.add_input(a.frame);
  if (!a.protocol.empty()) man.add_input(a.protocol);
  if (!a.jacobian_in.empty()) man.add_input(a.jacobian_in);

  if (!a.alpha_sweep.empty()) {
    double lo = 0.0, hi = 0.0;
    int count = 0;
    if (std::sscanf(a.alpha_sweep.c_str(), "%lf,%lf,%d", &lo, &hi, &count) != 3 ||
        lo <= 0.0 || hi <= lo || count < 2)
      throw Error("--alpha-sweep expects 'min,max,count' with 0 < min < max, count >= 2");
    std::vector<double> alphas;
    for (int k = 0; k < count; ++k)
      alphas.push_back(lo * std::pow(hi / lo, static_cast<double>(k) / (count - 1)));
    const auto sweep = alpha_sweep(J, L, alphas, dV, mode);
    std::ofstream f(a.out, std::ios::binary);
    if (!f) throw Error("cannot open " + a.out);
    f << "alpha,data_residual,roughness\n";
    char buf[128];
    for (const auto& pt : sweep) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", pt.alpha,
                    pt.data_residual, pt.roughness);
      f << buf;
    }
    man.outputs.push_back(a.out);
    write_manifest(man, a.out + ".manifest.json");
    std::cout << "alpha sweep: " << count << " points -> " << a.out << "\n";
    return 0;
  }

  const ReconstructionResult result =
      a.no_column_scale ? reconstruct(J, L, a.alpha, dV, mode)
                        : reconstruct_column_scaled(J, L, a.alpha, dV, mode);
  write_reconstruction_csv(a.out, mesh, result);
  man.outputs.push_back(a.out);
  if (!a.jacobian_out.empty()) man.outputs.push_back(a.jacobian_out);
  if (!a.raster.empty()) {
    write_pgm(a.raster, mesh, result.delta_sigma, a.raster_size,
              mode == ConstraintMode::unconstrained);
    man.outputs.push_back(a.raster);
  }
  write_manifest(man, a.out + ".manifest.json");

  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "reconstruct: alpha=%g mode=%s residual=%.6g roughness=%.6g -> %s\n",
                result.alpha, a.mode.c_str(), result.data_residual, result.roughness,
                a.out.c_str());
  std::cout << buf;
  return 0;
}

struct AvgArgs {
  std::string recon;
  std::string mesh;
  std::string center = "0,0";
  double diameter = 0.045;
  std::string metrics;
};

int run_avg(const AvgArgs& a) {
  const Mesh mesh = load_mesh(a.mesh);
  ReconstructionResult result;
  result.delta_sigma = read_reconstruction_csv(a.recon);
  if (result.delta_sigma.size() != mesh.n_elements())
    throw Error("reconstruction has " + std::to_string(result.delta_sigma.size()) +
                " elements, mesh has " + std::to_string(mesh.n_elements()));
  const Vec2 center = parse_point(a.center);
  const double avg = region_average(result, mesh, center, a.diameter);

  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g\n", avg);
  std::cout << buf;

  if (!a.metrics.empty()) {
    const bool fresh = !fs::exists(a.metrics);
    std::ofstream f(a.metrics, std::ios::binary | std::ios::app);
    if (!f) throw Error("cannot open metrics file " + a.metrics);
    if (fresh)
      f << "recon,center_x_m,center_y_m,diameter_m,average_delta_sigma_S_per_m\n";
    char row[512];
    std::snprintf(row, sizeof(row), "%s,%.17g,%.17g,%.17g,%.17g\n", a.recon.c_str(),
                  center.x, center.y, a.diameter, avg);
    f << row;
  }
  return 0;
}

struct FitEisArgs {
  std::string spectrum;
  std::string out;
};

int run_fit_eis(const FitEisArgs& a) {
  const ImpedanceSpectrum s = load_spectrum_csv(a.spectrum);
  const CircuitFit fit = fit_circuit(s);
  write_fit_report(a.out, fit, s);

  RunManifest man;
  man.command = "fit-eis";
  man.add_input(a.spectrum);
  man.outputs = {a.out};
  write_manifest(man, a.out + ".manifest.json");

  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "fit-eis: R_p=%.6g ohm R_s=%.6g ohm C_p=%.6g F L_s=%.6g H "
                "residual=%.6g -> %s\n",
                fit.params.R_p, fit.params.R_s, fit.params.C_p, fit.params.L_s,
                fit.residual, a.out.c_str());
  std::cout << buf;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EIT phantom simulation and reconstruction toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  MeshArgs mesh_args;
  auto* mesh_cmd = app.add_subcommand("mesh", "Generate a disk mesh with boundary electrodes");
  mesh_cmd->add_option("--radius", mesh_args.radius, "Tank radius in metres")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  mesh_cmd->add_option("--electrodes", mesh_args.electrodes, "Number of electrodes")
      ->check(CLI::Range(4, 1024))
      ->capture_default_str();
  mesh_cmd->add_option("--coverage", mesh_args.coverage,
                       "Fraction of the circumference covered by electrodes")
      ->check(CLI::Range(1e-6, 1.0 - 1e-6))
      ->capture_default_str();
  mesh_cmd->add_option("--edge", mesh_args.edge, "Target edge length in metres")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  mesh_cmd->add_option("--out", mesh_args.out, "Output mesh file")->required();

  SimulateArgs sim_args;
  auto* sim_cmd = app.add_subcommand("simulate", "Simulate a phantom scenario to voltage CSVs");
  sim_cmd->add_option("--mesh", sim_args.mesh, "Mesh file")->required();
  sim_cmd->add_option("--scenario", sim_args.scenario, "Scenario file")->required();
  sim_cmd->add_option("--outdir", sim_args.outdir, "Output directory")->required();
  sim_cmd->add_option("--protocol", sim_args.protocol, "Protocol file (default: adjacent)");
  sim_cmd->add_option("--contact-z", sim_args.contact_z, "Contact impedance, ohm*m")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  auto* seed_opt = sim_cmd->add_option("--seed", sim_args.seed, "Override the scenario seed");

  ReconstructArgs rec_args;
  auto* rec_cmd = app.add_subcommand("reconstruct",
                                     "One-step difference image from two voltage files");
  rec_cmd->add_option("--mesh", rec_args.mesh, "Mesh file")->required();
  rec_cmd->add_option("--baseline", rec_args.baseline, "Baseline voltage CSV")->required();
  rec_cmd->add_option("--frame", rec_args.frame, "Frame voltage CSV")->required();
  rec_cmd->add_option("--alpha", rec_args.alpha, "Regularization weight")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  rec_cmd->add_option("--mode", rec_args.mode, "Constraint mode")
      ->check(CLI::IsMember({"nonpositive", "unconstrained"}))
      ->capture_default_str();
  rec_cmd->add_option("--sigma0", rec_args.sigma0, "Background conductivity, S/m")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  rec_cmd->add_option("--out", rec_args.out, "Output reconstruction CSV")->required();
  rec_cmd->add_option("--raster", rec_args.raster, "Optional PGM raster output");
  rec_cmd->add_option("--raster-size", rec_args.raster_size, "Raster width/height")
      ->check(CLI::Range(16, 4096))
      ->capture_default_str();
  rec_cmd->add_option("--contact-z", rec_args.contact_z, "Contact impedance, ohm*m")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  rec_cmd->add_option("--protocol", rec_args.protocol, "Protocol file (default: adjacent)");
  rec_cmd->add_flag("--no-column-scale", rec_args.no_column_scale,
                    "Skip sensitivity column normalization");
  rec_cmd->add_option("--jacobian-in", rec_args.jacobian_in,
                      "Reuse a saved sensitivity matrix");
  rec_cmd->add_option("--jacobian-out", rec_args.jacobian_out,
                      "Save the sensitivity matrix for reuse");
  rec_cmd->add_option("--alpha-sweep", rec_args.alpha_sweep,
                      "Emit an L-curve instead: 'min,max,count'");

  AvgArgs avg_args;
  auto* avg_cmd = app.add_subcommand("avg", "Area-weighted mean conductivity change in a disk region");
  avg_cmd->add_option("--recon", avg_args.recon, "Reconstruction CSV")->required();
  avg_cmd->add_option("--mesh", avg_args.mesh, "Mesh file")->required();
  avg_cmd->add_option("--center", avg_args.center, "Region centre as 'x,y' in metres")
      ->capture_default_str();
  avg_cmd->add_option("--diameter", avg_args.diameter, "Region diameter in metres")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  avg_cmd->add_option("--metrics", avg_args.metrics, "Append the result to this CSV");

  FitEisArgs fit_args;
  auto* fit_cmd = app.add_subcommand("fit-eis", "Fit the equivalent circuit to a spectrum CSV");
  fit_cmd->add_option("--spectrum", fit_args.spectrum, "Spectrum CSV")->required();
  fit_cmd->add_option("--out", fit_args.out, "Fit report file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (mesh_cmd->parsed()) return run_mesh(mesh_args);
    if (sim_cmd->parsed()) {
      sim_args.seed_set = seed_opt->count() > 0;
      return run_simulate(sim_args);
    }
    if (rec_cmd->parsed()) return run_reconstruct(rec_args);
    if (avg_cmd->parsed()) return run_avg(avg_args);
    if (fit_cmd->parsed()) return run_fit_eis(fit_args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
