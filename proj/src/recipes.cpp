#include "qaddr/recipes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "qaddr/analysis.hpp"
#include "qaddr/rng.hpp"

namespace qaddr {

namespace {

constexpr double kTwoPi = 2 * std::numbers::pi;

// Acceptance thresholds the summaries are judged against.
constexpr double kAdjacentLineRatio = 1.376e-3, kAdjacentLineTol = 1e-5;
constexpr double kAxialFalloff = 0.9657, kAxialFalloffTol = 1e-4;
constexpr double kPeakTolerance = 0.02;  // of Δ
constexpr double kBackground = 0.017, kBackgroundTol = 0.005;
constexpr double kTauTolerance = 0.05;
constexpr double kDifferentialBound = 0.003;
constexpr double kPhaseTolerance = 0.3;  // rad, fringe-shape checks
constexpr double kAlignmentBound = 0.1;  // μm
constexpr double kAlignmentFraction = 0.95;

const std::map<std::string, GateKind, std::less<>> kGateNames = {
    {"I", GateKind::I}, {"II", GateKind::II}, {"III", GateKind::III}};

GateSpec gate_spec(GateKind k) {
  switch (k) {
    case GateKind::I: return GateSpec::I();
    case GateKind::II: return GateSpec::II();
    case GateKind::III: return GateSpec::III();
    case GateKind::Custom: break;
  }
  throw RecipeConfigError("gate: only I, II and III have recipes");
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double wrap_phase(double x) { return std::remainder(x, kTwoPi); }

class Writer {
 public:
  explicit Writer(RecipeOutput& out) : out_(out) {}

  std::ofstream open(const std::string& name) {
    std::ofstream os(out_.directory / name);
    if (!os) throw std::runtime_error("cannot write " + (out_.directory / name).string());
    os.precision(10);
    out_.files.push_back(name);
    return os;
  }

  void check(std::string name, bool ok, std::optional<double> value, std::string requirement) {
    if (value && !std::isfinite(*value)) value.reset(), ok = false;
    out_.checks.push_back({std::move(name), ok, value, std::move(requirement)});
  }

  std::ostringstream report;

 private:
  RecipeOutput& out_;
};

bool noise_is_default(const RunConfig& c) {
  static const auto defaults = config_to_json(RunConfig{});
  const auto j = config_to_json(c);
  return j["noise"] == defaults["noise"] && j["beams"] == defaults["beams"] && j["sequence"] == defaults["sequence"];
}

FidelityOptions fidelity_options(const RunConfig& c) {
  return {c.analysis.normalization, c.analysis.normalize, c.analysis.bootstrap, derive_seed(c.seed, {0xB0075})};
}

void require_beams(const RunConfig& c, std::string_view recipe) {
  if (c.beams.peak_shift == 0)
    throw RecipeConfigError(std::string(recipe) + ": beams.peak_shift_hz is 0, so no atom is addressed");
}

void require_targets(const std::vector<SiteIndex>& targets, std::string_view key, std::string_view recipe) {
  if (targets.empty()) throw RecipeConfigError(std::string(recipe) + ": " + std::string(key) + " is empty");
}

// ---- crosstalk -------------------------------------------------------------------

void crosstalk(const RunConfig& c, RecipeOutput& out, Writer& w) {
  require_targets(c.gate_targets, "gate_targets", "crosstalk_report");
  const double a = c.lattice.spacing_um;
  BeamSpec probe{BeamAxis::X, {0, 0}, 0, c.beams.waist_um, c.beams.rayleigh_um, c.beams.peak_shift};
  const double adjacent = beam_intensity_at(probe, {0, a, 0});
  const double axial = beam_intensity_at(probe, {a, 0, 0});

  const auto target = c.gate_targets.front();
  const auto beams = beams_for_target(target, c.lattice, c.beams);
  const auto classes = classify_sites({target}, c.lattice, c.beams);
  const auto map = stark_shift_map({beams[0], beams[1]}, c.lattice, c.beams.coefficients);
  {
    auto os = w.open("stark_map.csv");
    map.write_csv(os);
  }

  std::map<AtomClass, std::pair<double, double>> range;  // min, max total intensity
  {
    auto os = w.open("crosstalk.csv");
    os << "i,j,k,class,intensity_a,intensity_b,intensity_total\n";
    for (std::size_t n = 0; n < c.lattice.site_count(); ++n) {
      const auto s = c.lattice.site(n);
      const double ia = beam_intensity(beams[0], s, c.lattice), ib = beam_intensity(beams[1], s, c.lattice);
      os << s.i << ',' << s.j << ',' << s.k << ',' << class_name(classes[n]) << ',' << ia << ',' << ib << ','
         << ia + ib << '\n';
      auto [it, fresh] = range.try_emplace(classes[n], ia + ib, ia + ib);
      if (!fresh) it->second = {std::min(it->second.first, ia + ib), std::max(it->second.second, ia + ib)};
    }
  }

  out.results["adjacent_line_ratio"] = adjacent;
  out.results["axial_falloff_one_site"] = axial;
  out.results["target"] = {target.i, target.j, target.k};
  auto per_class = nlohmann::ordered_json::object();
  for (auto cls : kClassTableOrder)
    if (range.contains(cls))
      per_class[std::string(class_name(cls))] = {{"min_intensity", range[cls].first},
                                                 {"max_intensity", range[cls].second}};
  out.results["classes"] = per_class;

  w.check("adjacent-line intensity ratio", std::abs(adjacent - kAdjacentLineRatio) <= kAdjacentLineTol, adjacent,
          "1.376e-3 +/- 1e-5");
  w.check("on-line axial falloff at one site", std::abs(axial - kAxialFalloff) <= kAxialFalloffTol, axial,
          "0.9657 +/- 1e-4");

  w.report << "relative intensity one line over:  " << fmt("%.6e", adjacent) << '\n';
  w.report << "relative intensity one site along: " << fmt("%.6f", axial) << '\n';
  w.report << "pointing at " << to_string(target) << ", total intensity per class (min .. max):\n";
  for (auto cls : kClassTableOrder)
    if (range.contains(cls))
      w.report << "  " << class_name(cls) << ": " << fmt("%.4e", range[cls].first) << " .. "
               << fmt("%.4e", range[cls].second) << '\n';
}

// ---- spectrum --------------------------------------------------------------------

void spectrum(const RunConfig& c, RecipeOutput& out, Writer& w) {
  require_beams(c, "fig2_spectrum");
  require_targets(c.scan_targets, "scan_targets", "fig2_spectrum");
  const auto& an = c.analysis;
  std::vector<double> detunings;
  for (int k = 0; k < an.scan_points; ++k)
    detunings.push_back(kTwoPi * (an.scan_min_hz + (an.scan_max_hz - an.scan_min_hz) * k / (an.scan_points - 1)));

  const auto scan = frequency_scan(detunings, c.scan_targets, c.sequence, c.setup(), c.shots, c.seed);
  {
    auto os = w.open("spectrum.csv");
    scan.write_csv(os);
  }
  const double delta = c.beams.peak_shift;
  {
    auto os = w.open("peaks.csv");
    os << "class,center_rad_s,center_over_delta,sigma_rad_s,amplitude,offset,center_stderr_rad_s,converged\n";
    for (auto cls : kClassTableOrder) {
      const auto it = scan.peaks.find(cls);
      if (it == scan.peaks.end()) continue;
      const auto& p = it->second;
      os << class_name(cls) << ',' << p.center << ',' << p.center / delta << ',' << p.sigma << ',' << p.amplitude
         << ',' << p.offset << ',' << p.center_stderr << ',' << (p.converged ? 1 : 0) << '\n';
    }
  }

  // Background: spectators far from their own peak.
  double width = 0;
  for (const auto& [cls, p] : scan.peaks) width = std::max(width, std::abs(p.sigma));
  double detected = 0, atoms = 0;
  const auto& rs = scan.ratio.at(AtomClass::Spectator);
  const auto& ns = scan.atoms.at(AtomClass::Spectator);
  for (std::size_t k = 0; k < detunings.size(); ++k)
    if (std::abs(detunings[k]) > 5 * width) detected += rs[k] * ns[k], atoms += ns[k];
  const double background = atoms > 0 ? detected / atoms : std::nan("");

  auto peaks = nlohmann::ordered_json::object();
  for (auto cls : kClassTableOrder) {
    const auto it = scan.peaks.find(cls);
    if (it == scan.peaks.end()) continue;
    peaks[std::string(class_name(cls))] = {{"center_over_delta", it->second.center / delta},
                                           {"sigma_hz", it->second.sigma / kTwoPi},
                                           {"amplitude", it->second.amplitude},
                                           {"offset", it->second.offset},
                                           {"converged", it->second.converged}};
  }
  out.results["delta_hz"] = delta / kTwoPi;
  out.results["peaks"] = peaks;
  out.results["background"] = background;

  const std::array<std::pair<AtomClass, double>, 3> expected{
      {{AtomClass::Spectator, 0.0}, {AtomClass::Line, 1.0}, {AtomClass::Target, 2.0}}};
  const std::array<const char*, 3> names{"spectator peak at 0", "line peak at delta", "target peak at 2 delta"};
  const std::array<const char*, 3> reqs{"|c|/delta <= 0.02", "|c/delta - 1| <= 0.02", "|c/delta - 2| <= 0.02"};
  bool resolved = true;
  for (std::size_t n = 0; n < expected.size(); ++n) {
    const auto it = scan.peaks.find(expected[n].first);
    const bool have = it != scan.peaks.end() && it->second.converged;
    resolved = resolved && have;
    const double at = have ? it->second.center / delta : std::nan("");
    w.check(names[n], have && std::abs(at - expected[n].second) <= kPeakTolerance, at, reqs[n]);
  }
  if (resolved) {
    const auto& s = scan.peaks.at(AtomClass::Spectator);
    const auto& l = scan.peaks.at(AtomClass::Line);
    const auto& t = scan.peaks.at(AtomClass::Target);
    resolved = l.center - s.center > 2 * (std::abs(l.sigma) + std::abs(s.sigma)) &&
               t.center - l.center > 2 * (std::abs(t.sigma) + std::abs(l.sigma));
  }
  w.check("three resolved peaks", resolved, std::nullopt, "fits converge, centres separated by > 2 (sigma_a + sigma_b)");
  w.check("far-detuned background", std::abs(background - kBackground) <= kBackgroundTol, background,
          "0.017 +/- 0.005");

  w.report << "delta = 2 pi x " << fmt("%.1f", delta / kTwoPi) << " Hz, " << detunings.size() << " detunings, "
           << c.shots << " shots each\n";
  w.report << "class              centre/delta   sigma (Hz)   amplitude\n";
  for (auto cls : kClassTableOrder) {
    const auto it = scan.peaks.find(cls);
    if (it == scan.peaks.end()) continue;
    char line[160];
    std::snprintf(line, sizeof line, "%-18s %8.4f     %9.1f   %8.4f%s\n", std::string(class_name(cls)).c_str(),
                  it->second.center / delta, it->second.sigma / kTwoPi, it->second.amplitude,
                  it->second.converged ? "" : "  (fit did not converge)");
    w.report << line;
  }
  w.report << "far-detuned background R = " << fmt("%.4f", background) << '\n';
}

// ---- echo contrast ---------------------------------------------------------------

void write_contrast(std::ostream& os, const std::vector<ContrastPoint>& pts) {
  os << "T_s,contrast,contrast_stderr,core_contrast,core_contrast_stderr,mean_signal\n";
  for (const auto& p : pts)
    os << p.T << ',' << p.contrast << ',' << p.contrast_stderr << ',' << p.core_contrast << ','
       << p.core_contrast_stderr << ',' << p.mean_signal << '\n';
}

void echo_contrast(const RunConfig& c, RecipeOutput& out, Writer& w) {
  const auto& an = c.analysis;
  if (an.contrast_times_s.size() < 3) throw RecipeConfigError("fig3_echo: analysis.contrast_times_s needs >= 3 times");
  const auto setup = c.setup();
  const auto echo = echo_contrast_curve(an.contrast_times_s, c.sequence, setup, c.shots, c.seed, true,
                                        an.contrast_alpha_points);
  const auto ramsey = echo_contrast_curve({0.01}, c.sequence, setup, c.shots, derive_seed(c.seed, {0x7A45E}), false,
                                          an.contrast_alpha_points);
  {
    auto os = w.open("echo_contrast.csv");
    write_contrast(os, echo);
  }
  {
    auto os = w.open("ramsey_10ms.csv");
    write_contrast(os, ramsey);
  }

  std::vector<double> T, C;
  for (const auto& p : echo) T.push_back(p.T), C.push_back(p.contrast);
  ExponentialFit fit;
  bool fitted = true;
  try {
    fit = fit_exponential_contrast(T, C);
  } catch (const std::exception& e) {
    fitted = false;
    w.report << "exponential fit failed: " << e.what() << '\n';
  }
  const double T1 = c.noise.T1_s;
  out.results["tau_s"] = fitted ? nlohmann::ordered_json(fit.tau) : nlohmann::ordered_json(nullptr);
  out.results["tau_stderr_s"] = fitted ? nlohmann::ordered_json(fit.tau_stderr) : nlohmann::ordered_json(nullptr);
  out.results["tau_unbounded"] = fitted && fit.unbounded;
  out.results["amplitude"] = fit.amplitude;
  out.results["T1_s"] = T1;
  out.results["ramsey_10ms"] = {{"contrast", ramsey[0].contrast},
                                {"contrast_stderr", ramsey[0].contrast_stderr},
                                {"core_contrast", ramsey[0].core_contrast},
                                {"core_contrast_stderr", ramsey[0].core_contrast_stderr}};

  const bool tau_ok = fitted && !fit.unbounded && std::isfinite(T1) && std::abs(fit.tau - T1) <= kTauTolerance * T1;
  w.check("echo time constant", tau_ok, fitted ? std::optional(fit.tau) : std::nullopt,
          "within 5% of noise.T1_s = " + fmt("%g", T1) + " s");
  w.check("core contrast above overall at 10 ms", ramsey[0].core_contrast > ramsey[0].contrast,
          ramsey[0].core_contrast - ramsey[0].contrast, "Ramsey core - overall > 0");

  w.report << "echo contrast versus total time\n  T (s)     contrast   core\n";
  for (const auto& p : echo)
    w.report << "  " << fmt("%-8.3f", p.T) << "  " << fmt("%.4f", p.contrast) << "     " << fmt("%.4f", p.core_contrast)
             << '\n';
  if (fitted)
    w.report << "tau = " << fmt("%.3f", fit.tau) << " +/- " << fmt("%.3f", fit.tau_stderr) << " s (T1 " << fmt("%g", T1)
             << " s)\n";
  w.report << "Ramsey at 10 ms: overall " << fmt("%.4f", ramsey[0].contrast) << ", core "
           << fmt("%.4f", ramsey[0].core_contrast) << '\n';
}

// ---- gates -----------------------------------------------------------------------

struct GateRun {
  GateSpec gate;
  std::map<AtomClass, FringeData> on, off;
  FidelityReport report;
};

GateRun run_gate(const RunConfig& c, GateKind kind) {
  require_beams(c, "fig4_gate");
  require_targets(c.gate_targets, "gate_targets", "fig4_gate");
  GateRun r;
  r.gate = gate_spec(kind);
  const auto setup = c.setup();
  const auto program = compile_gate_program(c.gate_targets, r.gate, c.sequence, setup);
  const auto alphas = uniform_alphas(c.analysis.alpha_points);
  RunOptions opts;
  opts.shots = c.shots;
  // Same seed with and without addressing: the differential sees common noise draws.
  opts.seed = derive_seed(c.seed, {0x6A7E, static_cast<std::uint64_t>(kind)});
  r.on = fringe_scan(program, setup, alphas, opts);
  opts.classes = program_classes(program, setup);  // the off run has no pointings of its own
  r.off = fringe_scan(addressing_off(program), setup, alphas, opts);
  r.report = gate_fidelity_report(r.on, r.gate, fidelity_options(c), &r.off);
  return r;
}

std::pair<double, std::string> band(GateKind k) {
  return k == GateKind::I ? std::pair{0.90, std::string("[0.90, 0.99]")} : std::pair{0.85, std::string("[0.85, 0.99]")};
}

void gate_checks(const GateRun& g, bool check_band, Writer& w) {
  const auto& rep = g.report;
  const std::string tag = std::string(gate_name(g.gate.kind));
  if (rep.classes.contains(AtomClass::Target) && rep.classes.contains(AtomClass::Spectator)) {
    const auto& t = rep.at(AtomClass::Target);
    const auto& s = rep.at(AtomClass::Spectator);
    const auto expected = expected_target_state(g.gate);
    if (g.gate.kind == GateKind::III) {
      // The fringe collapses to a flat line at half the unaffected peak.
      const double amp = std::sin(t.estimate.theta);
      const double level = t.estimate.n * t.estimate.n / 2;
      const double peak = s.estimate.n * s.estimate.n * (1 + std::sin(s.estimate.theta)) / 2;
      w.check("flat target fringe", amp <= kPhaseTolerance, amp, "sin(theta) <= 0.3");
      w.check("target level at half the unaffected peak", std::abs(level / peak - 0.5) <= 0.1, level / peak,
              "0.5 +/- 0.1");
    } else {
      const double shift = wrap_phase(t.estimate.phi - s.estimate.phi);
      const double want = wrap_phase(expected.phi() - expected_non_target_state().phi());
      const bool ok = !t.estimate.phi_indeterminate && std::abs(wrap_phase(shift - want)) <= kPhaseTolerance;
      const std::string name = g.gate.kind == GateKind::I ? "pi-shifted fringe" : "pi/2-shifted fringe";
      w.check(name, ok, shift, "target - spectator phase = " + fmt("%.4f", want) + " +/- 0.3 rad");
    }
  } else {
    w.check("target fringe present", false, std::nullopt, "target and spectator classes loaded");
  }

  for (auto cls : {AtomClass::Line, AtomClass::NearestNeighbor}) {
    const auto it = rep.classes.find(cls);
    if (it == rep.classes.end() || !it->second.differential) continue;
    const double d = *it->second.differential, e = *it->second.differential_stderr;
    w.check("gate " + tag + " " + std::string(class_name(cls)) + " differential fidelity",
            std::abs(d) <= kDifferentialBound + 2 * e, d, "|dF| <= 0.003 + 2 stderr");
  }

  if (check_band && rep.classes.contains(AtomClass::Target)) {
    const double f = rep.at(AtomClass::Target).fidelity;
    const auto [lo, text] = band(g.gate.kind);
    w.check("gate " + tag + " target fidelity in band", f >= lo && f <= 0.99, f, text);
  }
}

nlohmann::ordered_json report_json(const FidelityReport& r) { return nlohmann::ordered_json::parse(r.to_json()); }

void gate(const RunConfig& c, GateKind kind, RecipeOutput& out, Writer& w) {
  const auto g = run_gate(c, kind);
  {
    auto os = w.open("fringe.csv");
    write_fringe_csv(os, g.on);
  }
  {
    auto os = w.open("fringe_addressing_off.csv");
    write_fringe_csv(os, g.off);
  }
  out.results["fidelity"] = report_json(g.report);
  out.results["band_checked"] = noise_is_default(c);
  gate_checks(g, noise_is_default(c), w);
  g.report.write_table(w.report);
  if (!noise_is_default(c)) w.report << "noise, beams or sequence differ from the defaults: fidelity band not checked\n";
}

void table1(const RunConfig& c, RecipeOutput& out, Writer& w) {
  std::vector<GateRun> runs;
  for (auto k : {GateKind::I, GateKind::II, GateKind::III}) {
    runs.push_back(run_gate(c, k));
    const std::string tag(gate_name(k));
    auto on = w.open("fringe_" + tag + ".csv");
    write_fringe_csv(on, runs.back().on);
    auto off = w.open("fringe_" + tag + "_addressing_off.csv");
    write_fringe_csv(off, runs.back().off);
  }
  {
    auto os = w.open("table1.csv");
    os << "class,gate,fidelity,stderr,differential,differential_stderr\n";
    for (auto cls : kClassTableOrder)
      for (const auto& r : runs) {
        const auto it = r.report.classes.find(cls);
        if (it == r.report.classes.end()) continue;
        const auto& f = it->second;
        os << class_name(cls) << ',' << gate_name(r.gate.kind) << ',' << f.fidelity << ',' << f.stderr_ << ',';
        if (f.differential) os << *f.differential << ',' << *f.differential_stderr;
        else os << ',';
        os << '\n';
      }
  }

  // Rows in table order, one column per gate.
  auto rows = nlohmann::ordered_json::array();
  for (auto cls : kClassTableOrder) {
    nlohmann::ordered_json row;
    row["class"] = class_name(cls);
    bool any = false;
    for (const auto& r : runs) {
      const auto it = r.report.classes.find(cls);
      if (it == r.report.classes.end()) continue;
      any = true;
      nlohmann::ordered_json cell{{"fidelity", it->second.fidelity}, {"stderr", it->second.stderr_}};
      if (it->second.differential)
        cell["differential"] = *it->second.differential, cell["differential_stderr"] = *it->second.differential_stderr;
      row[std::string(gate_name(r.gate.kind))] = cell;
    }
    if (any) rows.push_back(row);
  }
  out.results["rows"] = rows;
  out.results["band_checked"] = noise_is_default(c);

  for (const auto& r : runs) gate_checks(r, noise_is_default(c), w);
  if (runs[0].report.classes.contains(AtomClass::Target) && runs[1].report.classes.contains(AtomClass::Target)) {
    const double d = runs[0].report.at(AtomClass::Target).fidelity - runs[1].report.at(AtomClass::Target).fidelity;
    w.check("gate I at least gate II", d >= 0, d, "F(I) - F(II) >= 0");
  }

  char line[160];
  w.report << "class              gate I            gate II           gate III\n";
  for (auto cls : kClassTableOrder) {
    const std::string name = cls == AtomClass::NearestNeighbor ? "Nearest Neighbors" : std::string(class_name(cls));
    std::snprintf(line, sizeof line, "%-18s", name.c_str());
    w.report << line;
    for (const auto& r : runs) {
      const auto it = r.report.classes.find(cls);
      if (it == r.report.classes.end()) w.report << "  -               ";
      else std::snprintf(line, sizeof line, "%.3f +/- %.3f   ", it->second.fidelity, it->second.stderr_), w.report << line;
    }
    w.report << '\n';
  }
  for (const auto& r : runs) {
    w.report << '\n';
    r.report.write_table(w.report);
  }
}

// ---- stabilization ---------------------------------------------------------------

void feedback(const RunConfig& c, RecipeOutput& out, Writer& w) {
  const auto& loop = c.stabilization.loop;
  const auto r = simulate_closed_loop(loop, c.lattice, c.seed);
  {
    auto os = w.open("feedback.csv");
    r.write_csv(os);
  }
  out.results["iterations"] = loop.iterations;
  out.results["rms_in_plane_um"] = r.rms_in_plane_um;
  out.results["rms_axial_um"] = r.rms_axial_um;
  out.results["skipped"] = r.skipped;
  out.results["saturated"] = r.saturated;

  w.check("in-plane RMS residual", r.rms_in_plane_um <= 0.1, r.rms_in_plane_um, "<= 0.1 um");
  w.check("axial RMS residual", r.rms_axial_um <= 0.23, r.rms_axial_um, "<= 0.23 um");
  w.check("actuator within range", r.saturated == 0, static_cast<double>(r.saturated), "0 saturated iterations");

  w.report << loop.iterations << " iterations of " << fmt("%g", loop.iteration_period_s) << " s, "
           << (loop.measurement == MeasurementModel::Images ? "image" : "gaussian") << " measurement\n";
  w.report << "RMS residual in-plane " << fmt("%.4f", r.rms_in_plane_um) << " um, axial " << fmt("%.4f", r.rms_axial_um)
           << " um\n";
  w.report << "skipped " << r.skipped << ", saturated " << r.saturated << '\n';
}

void alignment(const RunConfig& c, RecipeOutput& out, Writer& w) {
  require_beams(c, "alignment_demo");
  const auto& a = c.stabilization.alignment;
  const int trials = c.stabilization.alignment_trials;
  const auto setup = c.setup();
  int within = 0, failed = 0;
  double worst = 0;
  auto trials_csv = w.open("alignment_trials.csv");
  trials_csv << "trial,center_0_um,center_1_um,error_0_um,error_1_um,within_100nm\n";
  for (int t = 0; t < trials; ++t) {
    AlignmentResult r;
    try {
      r = alignment_scan(a, setup, c.sequence, derive_seed(c.seed, {static_cast<std::uint64_t>(t), 0xA1165}));
    } catch (const FitError&) {
      ++failed;
      trials_csv << t << ",,,,,0\n";
      continue;
    }
    if (t == 0) {
      auto os = w.open("alignment_scan.csv");
      r.write_csv(os);
    }
    const double e0 = r.center_um[0] + a.misalignment_um[0], e1 = r.center_um[1] + a.misalignment_um[1];
    const bool ok = std::abs(e0) <= kAlignmentBound && std::abs(e1) <= kAlignmentBound;
    within += ok;
    worst = std::max({worst, std::abs(e0), std::abs(e1)});
    trials_csv << t << ',' << r.center_um[0] << ',' << r.center_um[1] << ',' << e0 << ',' << e1 << ',' << (ok ? 1 : 0)
               << '\n';
  }
  const double fraction = trials > 0 ? static_cast<double>(within) / trials : 0.0;
  out.results["trials"] = trials;
  out.results["within_100nm"] = within;
  out.results["failed_scans"] = failed;
  out.results["fraction_within_100nm"] = fraction;
  out.results["worst_error_um"] = worst;

  w.check("beam centre within 100 nm", fraction >= kAlignmentFraction, fraction, ">= 95% of trials");

  w.report << trials << " alignment trials, beam along " << (a.axis == BeamAxis::X ? "x" : "y") << " through "
           << to_string(a.target) << '\n';
  w.report << within << " within 100 nm, " << failed << " scans without a peak, worst error " << fmt("%.4f", worst)
           << " um\n";
}

void write_outputs(RecipeOutput& out, const RunConfig& c, Writer& w) {
  std::ostringstream head;
  head << recipe_label(out.id) << ", seed " << c.seed << ", " << c.shots << " shots\n\n";
  out.report = head.str() + w.report.str() + "\nchecks\n";
  for (const auto& ch : out.checks) {
    out.report += std::string(ch.passed ? "  PASS  " : "  FAIL  ") + ch.name;
    if (ch.value) out.report += ": " + fmt("%.6g", *ch.value);
    out.report += "  (" + ch.requirement + ")\n";
  }
  out.report += out.passed() ? "all checks passed\n" : "some checks failed\n";

  out.files.push_back("summary.json");
  out.files.push_back("report.txt");
  std::ofstream(out.directory / "report.txt") << out.report;
  std::ofstream(out.directory / "summary.json") << out.summary(c).dump(2) << '\n';
}

RecipeOutput prepare(const RecipeId& id, const RunConfig& config) {
  config.validate();
  RecipeOutput out;
  out.id = id;
  out.directory = std::filesystem::path(config.output_dir) / recipe_dir_name(id);
  std::error_code ec;
  std::filesystem::create_directories(out.directory, ec);
  if (ec) throw std::runtime_error("cannot create " + out.directory.string() + ": " + ec.message());
  out.results = nlohmann::ordered_json::object();
  return out;
}

}  // namespace

std::string recipe_label(const RecipeId& id) {
  switch (id.kind) {
    case RecipeKind::Fig2Spectrum: return "fig2_spectrum";
    case RecipeKind::Fig3Echo: return "fig3_echo";
    case RecipeKind::Fig4Gate: return "fig4_gate(" + std::string(gate_name(id.gate)) + ")";
    case RecipeKind::Table1Fidelities: return "table1_fidelities";
    case RecipeKind::FeedbackDemo: return "feedback_demo";
    case RecipeKind::AlignmentDemo: return "alignment_demo";
    case RecipeKind::CrosstalkReport: return "crosstalk_report";
  }
  return "?";
}

std::string recipe_dir_name(const RecipeId& id) {
  if (id.kind == RecipeKind::Fig4Gate) return "fig4_gate_" + std::string(gate_name(id.gate));
  return recipe_label(id);
}

std::vector<RecipeId> all_recipes() {
  return {{RecipeKind::CrosstalkReport},          {RecipeKind::Fig2Spectrum},
          {RecipeKind::Fig3Echo},                 {RecipeKind::Fig4Gate, GateKind::I},
          {RecipeKind::Fig4Gate, GateKind::II},   {RecipeKind::Fig4Gate, GateKind::III},
          {RecipeKind::Table1Fidelities},         {RecipeKind::FeedbackDemo},
          {RecipeKind::AlignmentDemo}};
}

RecipeId parse_recipe(std::string_view text) {
  for (const auto& id : all_recipes())
    if (text == recipe_label(id) || text == recipe_dir_name(id)) return id;
  const std::string_view prefix = "fig4_gate:";
  if (text.starts_with(prefix)) {
    const auto it = kGateNames.find(text.substr(prefix.size()));
    if (it != kGateNames.end()) return {RecipeKind::Fig4Gate, it->second};
  }
  std::string known;
  for (const auto& id : all_recipes()) known += (known.empty() ? "" : ", ") + recipe_label(id);
  throw ConfigError("recipe: unknown '" + std::string(text) + "' (known: " + known + ")");
}

bool RecipeOutput::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const RecipeCheck& c) { return c.passed; });
}

nlohmann::ordered_json RecipeOutput::summary(const RunConfig& config) const {
  nlohmann::ordered_json j;
  j["format"] = kSummaryFormat;
  j["recipe"] = recipe_label(id);
  j["seed"] = config.seed;
  j["shots"] = config.shots;
  j["passed"] = passed();
  auto checks_json = nlohmann::ordered_json::array();
  for (const auto& c : checks) {
    nlohmann::ordered_json cj;
    cj["name"] = c.name;
    cj["passed"] = c.passed;
    cj["value"] = c.value ? nlohmann::ordered_json(*c.value) : nlohmann::ordered_json(nullptr);
    cj["requirement"] = c.requirement;
    checks_json.push_back(cj);
  }
  j["checks"] = checks_json;
  j["results"] = results;
  j["files"] = files;
  j["config"] = config_to_json(config);
  return j;
}

RecipeOutput run_recipe(const RecipeId& id, const RunConfig& config) {
  auto out = prepare(id, config);
  Writer w(out);
  switch (id.kind) {
    case RecipeKind::CrosstalkReport: crosstalk(config, out, w); break;
    case RecipeKind::Fig2Spectrum: spectrum(config, out, w); break;
    case RecipeKind::Fig3Echo: echo_contrast(config, out, w); break;
    case RecipeKind::Fig4Gate: gate(config, id.gate, out, w); break;
    case RecipeKind::Table1Fidelities: table1(config, out, w); break;
    case RecipeKind::FeedbackDemo: feedback(config, out, w); break;
    case RecipeKind::AlignmentDemo: alignment(config, out, w); break;
  }
  write_outputs(out, config, w);
  return out;
}

RecipeOutput fidelity_from_csv(const std::filesystem::path& fringe_csv, const GateSpec& gate, const RunConfig& config,
                               const std::optional<std::filesystem::path>& reference_csv) {
  auto read = [](const std::filesystem::path& p) {
    std::ifstream is(p);
    if (!is) throw ConfigError("fringe csv: cannot open " + p.string());
    return read_fringe_csv(is);
  };
  const auto fringes = read(fringe_csv);
  std::optional<std::map<AtomClass, FringeData>> reference;
  if (reference_csv) reference = read(*reference_csv);

  auto out = prepare({RecipeKind::Fig4Gate, gate.kind}, config);
  out.directory /= "from_csv";
  std::filesystem::create_directories(out.directory);
  Writer w(out);
  GateRun g;
  g.gate = gate;
  g.on = fringes;
  if (reference) g.off = *reference;
  g.report = gate_fidelity_report(fringes, gate, fidelity_options(config), reference ? &*reference : nullptr);
  out.results["input"] = fringe_csv.filename().string();
  out.results["fidelity"] = report_json(g.report);
  out.results["band_checked"] = false;
  // The band is a statement about the simulated noise model, not about arbitrary data.
  gate_checks(g, false, w);
  g.report.write_table(w.report);
  write_outputs(out, config, w);
  return out;
}

}  // namespace qaddr
