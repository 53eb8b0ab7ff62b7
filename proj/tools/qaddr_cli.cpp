// qaddr command-line front end. Exit codes: 0 all checks passed, 1 a check failed,
// 2 usage or configuration error.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qaddr/analysis.hpp"
#include "qaddr/config.hpp"
#include "qaddr/program_io.hpp"
#include "qaddr/recipes.hpp"

namespace fs = std::filesystem;
using namespace qaddr;

namespace {

constexpr int kPass = 0, kCheckFailed = 1, kUsage = 2;

const std::map<std::string, GateKind> kGates{{"I", GateKind::I}, {"II", GateKind::II}, {"III", GateKind::III}};

GateSpec spec_of(GateKind k) {
  return k == GateKind::I ? GateSpec::I() : k == GateKind::II ? GateSpec::II() : GateSpec::III();
}

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> shots;
  std::optional<std::string> output;
  bool quiet = false;
};

RunConfig resolve(const Globals& g) {
  RunConfig c;
  if (!g.config_path.empty()) c = load_config(g.config_path);
  else if (auto env = default_config_path()) c = load_config(*env);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set: expected key=value, got '" + kv + "'");
    set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) c.seed = *g.seed;
  if (g.shots) c.shots = *g.shots;
  if (g.output) c.output_dir = *g.output;
  c.validate();
  return c;
}

int finish(const RecipeOutput& out, const Globals& g) {
  if (g.quiet) {
    for (const auto& c : out.checks)
      if (!c.passed) std::cout << "FAIL " << c.name << '\n';
  } else {
    std::cout << out.report;
  }
  std::cout << (out.passed() ? "PASS " : "FAIL ") << recipe_label(out.id) << " -> "
            << (out.directory / "summary.json").string() << '\n';
  return out.passed() ? kPass : kCheckFailed;
}

// Runs one gate program and writes the program, per-class tallies and, on request,
// per-atom final populations.
int simulate(const RunConfig& c, GateKind gate, const std::string& program_path, std::optional<double> alpha,
             bool trajectory, const Globals& g) {
  const auto setup = c.setup();
  GateProgram program;
  if (!program_path.empty()) {
    std::ifstream is(program_path);
    if (!is) throw ConfigError("--program: cannot open " + program_path);
    program = read_program(is);
  } else {
    if (c.gate_targets.empty()) throw ConfigError("sequence.gate_targets: empty");
    program = compile_gate_program(c.gate_targets, spec_of(gate), c.sequence, setup);
  }

  const fs::path dir = fs::path(c.output_dir) / "simulate";
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "program.json");
    write_program(os, program);
  }
  std::ofstream traj;
  RunOptions opts;
  opts.shots = c.shots;
  opts.seed = c.seed;
  opts.probe_alpha = alpha;
  if (trajectory) {
    traj.open(dir / "trajectory.csv");
    traj.precision(10);
    opts.trajectory_csv = &traj;
  }
  const auto r = run_program(program, setup, opts);
  {
    std::ofstream os(dir / "tallies.csv");
    os.precision(10);
    os << "class,initial,detected,ratio,mean_probability\n";
    for (auto cls : kClassTableOrder) {
      const auto& t = r.tally(cls);
      os << class_name(cls) << ',' << t.initial << ',' << t.detected << ',' << t.ratio() << ','
         << t.mean_probability() << '\n';
    }
  }
  const auto unpaired = dummy_pairing_violations(program, setup);
  if (!g.quiet) {
    std::cout << "program: " << program.steps.size() << " steps, " << program.total_duration() * 1e3 << " ms\n";
    std::cout << "class              atoms     R\n";
    for (auto cls : kClassTableOrder) {
      const auto& t = r.tally(cls);
      std::printf("%-18s %-9.0f %.4f\n", std::string(class_name(cls)).c_str(), t.initial, t.ratio());
    }
  }
  std::cout << (unpaired.empty() ? "PASS" : "FAIL") << " dummy pairing (" << unpaired.size()
            << " unpaired non-target sites) -> " << dir.string() << '\n';
  return unpaired.empty() ? kPass : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Site-selective addressing simulator: figure recipes, gate simulation and analysis"};
  app.require_subcommand(0, 1);
  app.fallthrough();

  Globals g;
  app.add_option("-c,--config", g.config_path, "JSON config file (default: $QADDR_CONFIG, else built-in defaults)");
  app.add_option("--set", g.overrides, "Override a config key, e.g. --set noise.T1_s=5 (repeatable)");
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--shots", g.shots, "Shots per point")->check(CLI::PositiveNumber);
  app.add_option("-o,--output", g.output, "Output directory");
  app.add_flag("-q,--quiet", g.quiet, "Print only failed checks and the verdict");
  bool dump_config = false;
  app.add_flag("--print-config", dump_config, "Print the resolved config as JSON and exit");

  std::string gate = "I";
  auto gate_opt = [&](CLI::App* sub) {
    sub->add_option("-g,--gate", gate, "Gate I, II or III")->check(CLI::IsMember({"I", "II", "III"}));
  };

  auto* sim = app.add_subcommand("simulate", "Run one gate program and tally F=3 detections per class");
  gate_opt(sim);
  std::string program_path;
  std::optional<double> alpha;
  bool trajectory = false;
  sim->add_option("--program", program_path, "Run a program JSON instead of compiling one");
  sim->add_option("--alpha", alpha, "Probe phase (rad)");
  sim->add_flag("--trajectory", trajectory, "Write per-atom final populations");

  auto* scan = app.add_subcommand("scan", "Frequency scan across the addressed resonances (fig2_spectrum)");
  auto* echo = app.add_subcommand("echo", "Echo contrast versus time and the two-zone Ramsey check (fig3_echo)");
  auto* gate_cmd = app.add_subcommand("gate", "Gate fringes with and without addressing (fig4_gate)");
  gate_opt(gate_cmd);

  auto* fid = app.add_subcommand("fidelity", "Fidelity table for gates I-III, or the report of a fringe CSV");
  gate_opt(fid);
  std::string fringe_in, reference_in;
  fid->add_option("--input", fringe_in, "Fringe CSV (class,alpha_rad,p0,shots); skips the simulation")
      ->check(CLI::ExistingFile);
  fid->add_option("--reference", reference_in, "Fringe CSV of the same program with addressing off")
      ->check(CLI::ExistingFile);

  auto* stab = app.add_subcommand("stabilize", "Closed-loop drift correction (feedback_demo)");
  std::optional<int> iterations;
  stab->add_option("--iterations", iterations, "Loop iterations")->check(CLI::PositiveNumber);

  auto* align = app.add_subcommand("align", "Beam alignment scans (alignment_demo)");
  std::optional<int> trials;
  align->add_option("--trials", trials, "Alignment trials")->check(CLI::PositiveNumber);

  auto* report = app.add_subcommand("report", "Crosstalk geometry report, or any recipe by name");
  std::string recipe_name = "crosstalk_report";
  report->add_option("-r,--recipe", recipe_name, "Recipe name, or 'all'");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kPass : kUsage;
  }

  try {
    auto config = resolve(g);
    if (iterations) config.stabilization.loop.iterations = *iterations;
    if (trials) config.stabilization.alignment_trials = *trials;
    if (dump_config) {
      std::cout << config_to_json(config).dump(2) << '\n';
      return kPass;
    }
    if (app.get_subcommands().empty()) {
      std::cerr << app.help();
      return kUsage;
    }
    const GateKind kind = kGates.at(gate);

    if (sim->parsed()) return simulate(config, kind, program_path, alpha, trajectory, g);
    if (scan->parsed()) return finish(run_recipe({RecipeKind::Fig2Spectrum}, config), g);
    if (echo->parsed()) return finish(run_recipe({RecipeKind::Fig3Echo}, config), g);
    if (gate_cmd->parsed()) return finish(run_recipe({RecipeKind::Fig4Gate, kind}, config), g);
    if (fid->parsed()) {
      if (fringe_in.empty()) return finish(run_recipe({RecipeKind::Table1Fidelities}, config), g);
      std::optional<fs::path> ref;
      if (!reference_in.empty()) ref = reference_in;
      return finish(fidelity_from_csv(fringe_in, spec_of(kind), config, ref), g);
    }
    if (stab->parsed()) return finish(run_recipe({RecipeKind::FeedbackDemo}, config), g);
    if (align->parsed()) return finish(run_recipe({RecipeKind::AlignmentDemo}, config), g);
    if (report->parsed()) {
      if (recipe_name != "all") return finish(run_recipe(parse_recipe(recipe_name), config), g);
      int worst = kPass;
      for (const auto& id : all_recipes()) worst = std::max(worst, finish(run_recipe(id, config), g));
      return worst;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const InvalidArgument& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kUsage;
  } catch (const FitError& e) {
    std::cerr << "fit failed: " << e.what() << '\n';
    return kCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
