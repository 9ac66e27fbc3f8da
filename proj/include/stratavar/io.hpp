#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stratavar/design.hpp"
#include "stratavar/error.hpp"
#include "stratavar/estimators.hpp"
#include "stratavar/hettest.hpp"
#include "stratavar/simulation.hpp"

namespace stratavar {

/// 17 significant digits: enough to round-trip any double.
inline std::string format_raw(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// 4 significant digits for human-facing summaries.
inline std::string format_short(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Experiment CSV: block_id, unit_id, treated, response, then covariates.
// ---------------------------------------------------------------------------

struct ExperimentData {
  BlockDesign design;
  Observed observed;
  bool has_response = true;
  std::vector<std::string> covariate_names;
  std::vector<std::vector<std::string>> unit_ids;  ///< per block, in input order

  /// Index of a covariate column by header name.
  std::size_t covariate_index(const std::string& name) const {
    for (std::size_t k = 0; k < covariate_names.size(); ++k)
      if (covariate_names[k] == name) return k;
    throw Error(ErrorKind::SchemaError, "no covariate column named '" + name + "'");
  }
};

inline const std::vector<std::string>& required_columns() {
  static const std::vector<std::string> cols{"block_id", "unit_id", "treated", "response"};
  return cols;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

/// Splits one CSV record. Double-quoted fields may contain commas and "" escapes.
inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t row) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  bool was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
      was_quoted = true;
    } else if (c == ',') {
      out.push_back(was_quoted ? field : trim(field));
      field.clear();
      was_quoted = false;
    } else {
      field += c;
    }
  }
  if (quoted) throw Error(ErrorKind::ParseError, "row " + std::to_string(row) + ": unterminated quoted field");
  out.push_back(was_quoted ? field : trim(field));
  return out;
}

inline double parse_real(const std::string& s, std::size_t row, const std::string& column) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size() || !std::isfinite(v))
    throw Error(ErrorKind::ParseError,
                "row " + std::to_string(row) + ", column '" + column + "': expected a finite number, got '" + s + "'");
  return v;
}

inline std::string quote_if_needed(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos && s == trim(s)) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

/// Reads an experiment. Blocks appear in order of first appearance; units
/// keep their row order within each block. Rows are numbered from 1 with the
/// header as row 1.
inline ExperimentData read_experiment_csv(std::istream& in) {
  std::string line;
  std::size_t row = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++row;
    if (!detail::trim(line).empty()) {
      header = detail::split_csv_line(line, row);
      break;
    }
  }
  if (header.empty()) throw Error(ErrorKind::SchemaError, "empty input: no header row");
  const auto& req = required_columns();
  for (std::size_t c = 0; c < req.size(); ++c) {
    if (c >= header.size() || header[c] != req[c])
      throw Error(ErrorKind::SchemaError, "header must start with block_id,unit_id,treated,response; column " +
                                              std::to_string(c + 1) + " is '" +
                                              (c < header.size() ? header[c] : std::string()) + "'");
  }
  std::vector<std::string> covariate_names;
  std::set<std::string> seen_names;
  for (std::size_t c = req.size(); c < header.size(); ++c) {
    if (header[c].empty()) throw Error(ErrorKind::SchemaError, "covariate column " + std::to_string(c + 1) + " has no name");
    if (!seen_names.insert(header[c]).second)
      throw Error(ErrorKind::SchemaError, "duplicate column '" + header[c] + "'");
    covariate_names.push_back(header[c]);
  }
  const std::size_t K = covariate_names.size();

  struct Unit {
    std::string id;
    std::uint8_t treated;
    std::optional<double> response;
    std::vector<double> x;
  };
  std::vector<std::string> block_order;
  std::map<std::string, std::vector<Unit>> units;
  std::set<std::pair<std::string, std::string>> keys;
  std::size_t with_response = 0;
  std::size_t total = 0;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv_line(line, row);
    if (f.size() != header.size())
      throw Error(ErrorKind::ParseError, "row " + std::to_string(row) + ": expected " + std::to_string(header.size()) +
                                             " fields, got " + std::to_string(f.size()));
    if (f[0].empty()) throw Error(ErrorKind::ParseError, "row " + std::to_string(row) + ": empty block_id");
    if (f[1].empty()) throw Error(ErrorKind::ParseError, "row " + std::to_string(row) + ": empty unit_id");
    if (!keys.insert({f[0], f[1]}).second)
      throw Error(ErrorKind::ParseError,
                  "row " + std::to_string(row) + ": duplicate unit '" + f[1] + "' in block '" + f[0] + "'");
    Unit u;
    u.id = f[1];
    if (f[2] == "1") {
      u.treated = 1;
    } else if (f[2] == "0") {
      u.treated = 0;
    } else {
      throw Error(ErrorKind::ParseError,
                  "row " + std::to_string(row) + ", column 'treated': expected 0 or 1, got '" + f[2] + "'");
    }
    if (!f[3].empty()) {
      u.response = detail::parse_real(f[3], row, "response");
      ++with_response;
    }
    for (std::size_t k = 0; k < K; ++k) {
      if (f[4 + k].empty())
        throw Error(ErrorKind::ParseError,
                    "row " + std::to_string(row) + ", column '" + header[4 + k] + "': missing covariate value");
      u.x.push_back(detail::parse_real(f[4 + k], row, header[4 + k]));
    }
    if (!units.count(f[0])) block_order.push_back(f[0]);
    units[f[0]].push_back(std::move(u));
    ++total;
  }
  if (total == 0) throw Error(ErrorKind::SchemaError, "no data rows");
  if (with_response != 0 && with_response != total)
    throw Error(ErrorKind::ParseError, "response is empty on " + std::to_string(total - with_response) +
                                           " rows; either every row or no row must carry a response");
  Observed observed;
  std::vector<std::vector<std::string>> unit_ids;
  std::vector<Block> blocks;
  for (const auto& id : block_order) {
    const auto& us = units[id];
    Block b;
    b.id = id;
    b.n = static_cast<int>(us.size());
    std::vector<std::uint8_t> z;
    std::vector<double> r;
    std::vector<std::string> ids;
    for (const auto& u : us) {
      b.n_treated += u.treated;
      if (K > 0) b.covariates.push_back(u.x);
      z.push_back(u.treated);
      r.push_back(u.response.value_or(0.0));
      ids.push_back(u.id);
    }
    blocks.push_back(std::move(b));
    observed.assignment.z.push_back(std::move(z));
    observed.responses.push_back(std::move(r));
    unit_ids.push_back(std::move(ids));
  }
  try {
    return ExperimentData{validate_design(std::move(blocks)), std::move(observed), with_response == total,
                          std::move(covariate_names), std::move(unit_ids)};
  } catch (const Error& e) {
    throw Error(ErrorKind::InvalidDesign, e.what());
  }
}

inline ExperimentData read_experiment_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ParseError, "cannot open '" + path + "'");
  return read_experiment_csv(in);
}

/// Inverse of read_experiment_csv: blocks and units in stored order, reals
/// at 17 significant digits.
inline void write_experiment_csv(std::ostream& out, const ExperimentData& data) {
  out << "block_id,unit_id,treated,response";
  for (const auto& n : data.covariate_names) out << ',' << detail::quote_if_needed(n);
  out << '\n';
  for (std::size_t i = 0; i < data.design.num_blocks(); ++i) {
    const auto& b = data.design.block(i);
    for (int j = 0; j < b.n; ++j) {
      const auto ju = static_cast<std::size_t>(j);
      out << detail::quote_if_needed(b.id) << ',' << detail::quote_if_needed(data.unit_ids[i][ju]) << ','
          << static_cast<int>(data.observed.assignment.z[i][ju]) << ',';
      if (data.has_response) out << format_raw(data.observed.responses[i][ju]);
      for (std::size_t k = 0; k < data.covariate_names.size(); ++k) out << ',' << format_raw(b.covariates[ju][k]);
      out << '\n';
    }
  }
}

inline bool operator==(const ExperimentData& a, const ExperimentData& b) {
  if (a.covariate_names != b.covariate_names || a.has_response != b.has_response || a.unit_ids != b.unit_ids ||
      a.observed.assignment != b.observed.assignment || a.observed.responses != b.observed.responses)
    return false;
  if (a.design.num_blocks() != b.design.num_blocks()) return false;
  for (std::size_t i = 0; i < a.design.num_blocks(); ++i) {
    const auto& x = a.design.block(i);
    const auto& y = b.design.block(i);
    if (x.id != y.id || x.n != y.n || x.n_treated != y.n_treated || x.covariates != y.covariates) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// JSON reports.
// ---------------------------------------------------------------------------

/// Non-finite values become null.
inline nlohmann::json json_number(double v) {
  if (!std::isfinite(v)) return nullptr;
  return v;
}

inline nlohmann::json to_json(const VarianceReport& r) {
  nlohmann::json j;
  j["report"] = "analyze";
  j["delta_hat"] = json_number(r.delta_hat);
  j["alpha"] = r.alpha;
  nlohmann::json est = nlohmann::json::object();
  for (const auto& [name, v] : r.estimates) {
    const auto& ci = r.ci.at(name);
    est[name] = {{"variance", json_number(v)},
                 {"std_error", json_number(std::sqrt(v))},
                 {"ci_lower", json_number(ci.first)},
                 {"ci_upper", json_number(ci.second)}};
  }
  j["estimators"] = est;
  j["q"] = {{"description", r.q_description}, {"columns", r.q_columns}, {"dropped", r.q_dropped}, {"rank", r.q_rank}};
  j["design"] = {{"class", r.design_class}, {"blocks", r.num_blocks}, {"units", r.num_units}};
  j["warnings"] = r.warnings;
  return j;
}

inline nlohmann::json to_json(const HetTestResult& r) {
  nlohmann::json j;
  j["report"] = "hettest";
  j["f_observed"] = json_number(r.f_observed);
  j["p_value"] = r.p_value;
  j["draws"] = r.draws_used;
  j["exact"] = r.exact;
  j["numerator_df"] = r.numerator_df;
  j["denominator_df"] = r.denominator_df;
  j["zero_denominator"] = r.zero_denominator;
  j["warnings"] = r.warnings;
  return j;
}

/// JSON text; doubles use the shortest form that round-trips exactly.
inline std::string dump_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Simulation CSV writers.
// ---------------------------------------------------------------------------

inline const char* estimator_label(std::size_t l) {
  static const char* names[] = {"s1", "s2", "s3"};
  return names[l];
}

inline void write_table1_csv(std::ostream& out, const Table1Result& t) {
  out << "quantity,q_spec,mean,se,reps\n";
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t s = 0; s < 3; ++s)
      out << estimator_label(l) << ',' << to_string(kAllQSpecs[s]) << ',' << format_raw(t.cells[l][s].mean) << ','
          << format_raw(t.cells[l][s].se) << ',' << t.cells[l][s].reps << '\n';
  auto target = [&](const char* name, const McSummary& m) {
    out << name << ",," << format_raw(m.mean) << ',' << format_raw(m.se) << ',' << m.reps << '\n';
  };
  target("var_given_finite", t.var_given_finite);
  target("var_given_covariates", t.var_given_covariates);
  target("var_unconditional", t.var_unconditional);
  target("delta_hat", t.delta_hat);
  target("sate", t.sate);
}

inline void write_table1_raw_csv(std::ostream& out, const Table1Result& t) {
  out << "rep";
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t s = 0; s < 3; ++s) out << ',' << estimator_label(l) << '_' << to_string(kAllQSpecs[s]);
  out << ",delta_hat,sate,cate,var_given_finite,var_given_covariates\n";
  for (std::size_t r = 0; r < t.raw.size(); ++r) {
    const auto& x = t.raw[r];
    out << r;
    for (std::size_t l = 0; l < 3; ++l)
      for (std::size_t s = 0; s < 3; ++s) out << ',' << format_raw(x.estimates[l][s]);
    out << ',' << format_raw(x.delta_hat) << ',' << format_raw(x.sate) << ',' << format_raw(x.cate) << ','
        << format_raw(x.var_given_finite) << ',' << format_raw(x.var_given_covariates) << '\n';
  }
}

inline void write_power_csv(std::ostream& out, const std::vector<PowerRow>& rows) {
  out << "a,q_spec,rejections,reps,rate,se\n";
  for (const auto& r : rows)
    out << format_raw(r.a) << ',' << to_string(r.spec) << ',' << r.rejections << ',' << r.reps << ','
        << format_raw(r.rate) << ',' << format_raw(r.se) << '\n';
}

inline void write_table2_csv(std::ostream& out, const Table2Report& t) {
  out << "row,design,s1,s2,s3,classical\n";
  out << "variance,pairs,,,," << format_raw(t.pairs_variance) << '\n';
  out << "variance,quartets,,,," << format_raw(t.quartets_variance) << '\n';
  out << "classical_expectation,pairs,,,," << format_raw(t.paired_expectation) << '\n';
  out << "classical_bias,pairs,,,," << format_raw(t.paired_bias) << '\n';
  out << "classical_expectation,quartets,,,," << format_raw(t.coarse_expectation) << '\n';
  out << "classical_bias,quartets,,,," << format_raw(t.coarse_bias) << '\n';
  for (const auto& r : t.rows)
    out << '"' << r.label << "\",pairs," << format_raw(r.s1) << ',' << format_raw(r.s2) << ',' << format_raw(r.s3)
        << ",\n";
}

inline void write_pate_csv(std::ostream& out, const PateDemoReport& p) {
  out << "q_spec,s1_mean,s1_se,var_unconditional,var_unconditional_se,gap,gap_se,anticonservative\n";
  for (const auto& r : p.rows)
    out << to_string(r.spec) << ',' << format_raw(r.s1.mean) << ',' << format_raw(r.s1.se) << ','
        << format_raw(p.var_unconditional.mean) << ',' << format_raw(p.var_unconditional.se) << ','
        << format_raw(r.gap) << ',' << format_raw(r.gap_se) << ',' << (r.anticonservative ? 1 : 0) << '\n';
}

}  // namespace stratavar
