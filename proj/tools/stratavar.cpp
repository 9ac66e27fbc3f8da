// Command-line front end: analyze, hettest and simulate.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "stratavar/stratavar.hpp"

namespace fs = std::filesystem;
using namespace stratavar;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) out.push_back(detail::parse_real(item, 0, "--a-grid"));
  if (out.empty()) throw Error(ErrorKind::ParseError, "--a-grid is empty");
  return out;
}

unsigned resolve_threads(unsigned flag) { return flag > 0 ? flag : threads_from_env(); }

QMatrix q_from_spec(const ExperimentData& data, const std::string& spec, int poly) {
  if (spec == "q1") return build_q1(data.design);
  std::vector<std::size_t> cols;
  std::vector<std::string> labels;
  for (const auto& name : split_list(spec)) {
    cols.push_back(data.covariate_index(name));
    labels.push_back(name);
  }
  if (cols.empty()) throw Error(ErrorKind::ParseError, "--q-spec names no covariates");
  return build_q2(data.design, poly, cols, labels);
}

void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(out_path);
  if (!f) throw Error(ErrorKind::ParseError, "cannot write '" + out_path + "'");
  f << text;
}

fs::path prepare_dir(const std::string& dir) {
  fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw Error(ErrorKind::ParseError, "cannot create output directory '" + dir + "': " + ec.message());
  return p;
}

template <typename Writer>
void write_file(const fs::path& path, Writer&& writer) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::ParseError, "cannot write '" + path.string() + "'");
  writer(f);
}

ExperimentData load_with_response(const std::string& path) {
  ExperimentData data = read_experiment_csv(path);
  if (!data.has_response) throw Error(ErrorKind::SchemaError, "'" + path + "' carries no responses");
  return data;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variance estimation and additivity tests for block-randomized experiments"};
  app.require_subcommand(1);

  std::string csv;
  std::string q_spec = "q1";
  int poly = 1;
  std::string estimators = "s1,s2";
  double alpha = 0.05;
  std::uint64_t seed = 1;
  std::uint64_t max_draws = kDefaultMaxDraws;
  std::size_t reps = 0;
  std::string a_grid = "1.0,1.1,1.2,1.3,1.4,1.5";
  std::string out_dir = ".";
  std::string out;
  bool raw = false;
  unsigned threads = 0;

  auto* analyze_cmd = app.add_subcommand("analyze", "Point estimate, variance estimates and intervals as JSON");
  analyze_cmd->add_option("csv", csv, "Experiment CSV")->required();
  analyze_cmd->add_option("--q-spec", q_spec, "q1, or comma-separated covariate columns")->capture_default_str();
  analyze_cmd->add_option("--poly", poly, "Polynomial degree for covariate columns")->check(CLI::Range(1, 10));
  analyze_cmd->add_option("--estimators", estimators, "Subset of s1,s2,s3,paired,coarse")->capture_default_str();
  analyze_cmd->add_option("--alpha", alpha, "Interval level is 1 - alpha")->capture_default_str();
  analyze_cmd->add_option("--out", out, "Write JSON here instead of stdout");

  auto* hettest = app.add_subcommand("hettest", "Randomization test of additive effects as JSON");
  hettest->add_option("csv", csv, "Experiment CSV")->required();
  hettest->add_option("--q-spec", q_spec, "Comma-separated covariate columns")->required();
  hettest->add_option("--poly", poly, "Polynomial degree for covariate columns")->check(CLI::Range(1, 10));
  hettest->add_option("--max-draws", max_draws, "Enumerate when the space fits, else sample this many")
      ->check(CLI::PositiveNumber);
  hettest->add_option("--seed", seed, "Seed for sampled reference draws");
  hettest->add_option("--threads", threads, "Worker threads (default STRATAVAR_THREADS or 1)");
  hettest->add_option("--out", out, "Write JSON here instead of stdout");

  auto* simulate = app.add_subcommand("simulate", "Simulation studies");
  simulate->require_subcommand(1);
  auto* table1 = simulate->add_subcommand("table1", "Estimator expectations over repeated covariate draws");
  auto* power = simulate->add_subcommand("power", "Power of the additivity test over a grid of effect scales");
  auto* pq = simulate->add_subcommand("pairs-quartets", "Closed-form pairs against quartets comparison");
  auto* pate = simulate->add_subcommand("pate-demo", "Covariate-using estimators against the unconditional variance");
  for (auto* sub : {table1, power, pq, pate}) sub->add_option("--out-dir", out_dir, "Output directory");
  for (auto* sub : {table1, power, pate}) {
    sub->add_option("--reps", reps, "Replicates");
    sub->add_option("--seed", seed, "Master seed");
    sub->add_option("--threads", threads, "Worker threads (default STRATAVAR_THREADS or 1)");
  }
  table1->add_flag("--raw", raw, "Also write per-replicate values");
  power->add_option("--a-grid", a_grid, "Comma-separated treatment scales")->capture_default_str();
  power->add_option("--max-draws", max_draws, "Reference draws per test")->check(CLI::PositiveNumber);
  power->add_option("--alpha", alpha, "Test level")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (analyze_cmd->parsed()) {
      const ExperimentData data = load_with_response(csv);
      const QMatrix q = q_from_spec(data, q_spec, poly);
      AnalysisOptions opts;
      opts.estimators = split_list(estimators);
      opts.alpha = alpha;
      const VarianceReport rep = stratavar::analyze(data.design, data.observed, q, opts);
      emit(dump_json(to_json(rep)), out);
      for (const auto& w : rep.warnings) std::cerr << "warning: " << w << '\n';
    } else if (hettest->parsed()) {
      const ExperimentData data = load_with_response(csv);
      if (q_spec == "q1") throw Error(ErrorKind::ParseError, "hettest needs covariate columns in --q-spec");
      const QMatrix q1 = build_q1(data.design);
      const QMatrix q2 = q_from_spec(data, q_spec, poly);
      const HetTestResult res =
          permutation_test(data.design, data.observed, q1, q2, max_draws, seed, resolve_threads(threads));
      emit(dump_json(to_json(res)), out);
      for (const auto& w : res.warnings) std::cerr << "warning: " << w << '\n';
    } else if (table1->parsed()) {
      Table1Config cfg;
      if (reps > 0) cfg.reps = reps;
      if (table1->count("--seed")) cfg.seed = seed;
      cfg.threads = resolve_threads(threads);
      const Table1Result t = run_table1(cfg, raw);
      const fs::path dir = prepare_dir(out_dir);
      write_file(dir / "table1.csv", [&](std::ostream& o) { write_table1_csv(o, t); });
      if (raw) write_file(dir / "table1_raw.csv", [&](std::ostream& o) { write_table1_raw_csv(o, t); });
      std::cout << "estimator  none        correct     incorrect\n";
      for (std::size_t l = 0; l < 3; ++l) {
        std::cout << estimator_label(l) << "        ";
        for (std::size_t s = 0; s < 3; ++s) std::cout << format_short(t.cells[l][s].mean) << "      ";
        std::cout << '\n';
      }
      std::cout << "E var(D|F,Z) " << format_short(t.var_given_finite.mean) << ", E var(D|C,Z) "
                << format_short(t.var_given_covariates.mean) << ", var(D|Z) " << format_short(t.var_unconditional.mean)
                << '\n';
    } else if (power->parsed()) {
      PowerConfig cfg;
      cfg.a_grid = parse_grid(a_grid);
      if (reps > 0) cfg.reps = reps;
      if (power->count("--seed")) cfg.seed = seed;
      if (power->count("--max-draws")) cfg.draws = max_draws;
      cfg.alpha = alpha;
      cfg.threads = resolve_threads(threads);
      const auto rows = run_power_curve(cfg);
      const fs::path dir = prepare_dir(out_dir);
      write_file(dir / "power.csv", [&](std::ostream& o) { write_power_csv(o, rows); });
      for (const auto& r : rows)
        std::cout << "a=" << format_short(r.a) << ' ' << to_string(r.spec) << " rate " << format_short(r.rate)
                  << " (se " << format_short(r.se) << ")\n";
    } else if (pq->parsed()) {
      const Table2Report t = pairs_quartets_study();
      const fs::path dir = prepare_dir(out_dir);
      write_file(dir / "pairs_quartets.csv", [&](std::ostream& o) { write_table2_csv(o, t); });
      std::cout << "pairs: var " << format_short(t.pairs_variance) << ", E[S_P^2] " << format_short(t.paired_expectation)
                << " (bias " << format_short(t.paired_bias) << ")\n"
                << "quartets: var " << format_short(t.quartets_variance) << ", E[S_CS^2] "
                << format_short(t.coarse_expectation) << '\n';
      for (const auto& r : t.rows)
        std::cout << r.label << ": " << format_short(r.s1) << ' ' << format_short(r.s2) << ' ' << format_short(r.s3)
                  << '\n';
    } else if (pate->parsed()) {
      const std::size_t n = reps > 0 ? reps : 2000;
      const std::uint64_t s = pate->count("--seed") ? seed : 7;
      const PateDemoReport p = pate_demo(n, s, 1.0, resolve_threads(threads));
      const fs::path dir = prepare_dir(out_dir);
      write_file(dir / "pate_demo.csv", [&](std::ostream& o) { write_pate_csv(o, p); });
      std::cout << "var(D|Z) " << format_short(p.var_unconditional.mean) << '\n';
      for (const auto& r : p.rows)
        std::cout << to_string(r.spec) << ": S1 " << format_short(r.s1.mean) << ", gap " << format_short(r.gap)
                  << (r.anticonservative ? " anticonservative" : "") << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 5;
  }
  return 0;
}
