#pragma once

// Matrix-structured dose-response data: ingest, normalization, hold-out splits.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bmc/errors.hpp"
#include "bmc/stochastic.hpp"

namespace bmc {

struct Observation {
  double log10_dose = 0.0;
  double response = 0.0;
};

struct CellData {
  int chemical_index = 0;
  int endpoint_index = 0;
  std::vector<Observation> observations;

  bool missing() const noexcept { return observations.empty(); }
  std::size_t size() const noexcept { return observations.size(); }
};

/// Per-cell transform applied by normalize_cells: normalized = (raw - location) / scale.
struct NormalizationRecord {
  double location = 0.0;
  double scale = 1.0;

  double apply(double raw) const noexcept { return (raw - location) / scale; }
  double invert(double normalized) const noexcept { return normalized * scale + location; }
};

/// Boolean m x J grid stored row-major (chemical-major).
using CellMask = std::vector<char>;

/// An m x J grid of cells. Immutable once built; transformations return new values.
class Dataset {
 public:
  Dataset() = default;

  Dataset(std::vector<std::string> chemical_names, std::vector<std::string> endpoint_names,
          std::vector<CellData> cells, std::vector<std::optional<double>> cutoffs = {})
      : chemical_names_(std::move(chemical_names)),
        endpoint_names_(std::move(endpoint_names)),
        cells_(std::move(cells)),
        cutoffs_(std::move(cutoffs)) {
    if (cutoffs_.empty()) cutoffs_.assign(endpoint_names_.size(), std::nullopt);
    validate();
  }

  int m() const noexcept { return static_cast<int>(chemical_names_.size()); }
  int J() const noexcept { return static_cast<int>(endpoint_names_.size()); }
  std::size_t cell_count() const noexcept { return cells_.size(); }

  const CellData& cell(int i, int j) const { return cells_[index(i, j)]; }
  const std::vector<CellData>& cells() const noexcept { return cells_; }
  std::size_t index(int i, int j) const noexcept {
    return static_cast<std::size_t>(i) * static_cast<std::size_t>(J()) + static_cast<std::size_t>(j);
  }

  const std::vector<std::string>& chemical_names() const noexcept { return chemical_names_; }
  const std::vector<std::string>& endpoint_names() const noexcept { return endpoint_names_; }
  const std::vector<std::optional<double>>& cutoffs() const noexcept { return cutoffs_; }

  std::size_t missing_count() const {
    return static_cast<std::size_t>(
        std::count_if(cells_.begin(), cells_.end(), [](const CellData& c) { return c.missing(); }));
  }
  std::size_t observed_count() const { return cells_.size() - missing_count(); }

  CellMask observed_mask() const {
    CellMask mask(cells_.size());
    for (std::size_t k = 0; k < cells_.size(); ++k) mask[k] = cells_[k].missing() ? 0 : 1;
    return mask;
  }

  /// Copy with the given cells emptied.
  Dataset without_cells(const CellMask& mask) const {
    if (mask.size() != cells_.size()) throw invalid_argument("mask size does not match dataset");
    std::vector<CellData> cells = cells_;
    for (std::size_t k = 0; k < cells.size(); ++k)
      if (mask[k]) cells[k].observations.clear();
    return Dataset(chemical_names_, endpoint_names_, std::move(cells), cutoffs_);
  }

  Dataset with_cutoffs(std::vector<std::optional<double>> cutoffs) const {
    return Dataset(chemical_names_, endpoint_names_, cells_, std::move(cutoffs));
  }

  int chemical_index(std::string_view name) const { return find(chemical_names_, name); }
  int endpoint_index(std::string_view name) const { return find(endpoint_names_, name); }

 private:
  static int find(const std::vector<std::string>& names, std::string_view name) {
    auto it = std::find(names.begin(), names.end(), name);
    return it == names.end() ? -1 : static_cast<int>(it - names.begin());
  }

  void validate() const {
    if (cells_.size() != static_cast<std::size_t>(m()) * static_cast<std::size_t>(J()))
      throw invalid_argument("dataset: cell grid does not match label counts");
    if (cutoffs_.size() != endpoint_names_.size())
      throw invalid_argument("dataset: cutoff count does not match endpoint count");
    for (int i = 0; i < m(); ++i) {
      for (int j = 0; j < J(); ++j) {
        const CellData& c = cells_[index(i, j)];
        if (c.chemical_index != i || c.endpoint_index != j)
          throw invalid_argument("dataset: cell indices out of place");
        for (const Observation& o : c.observations)
          if (!std::isfinite(o.log10_dose) || !std::isfinite(o.response))
            throw invalid_argument("dataset: non-finite observation");
      }
    }
  }

  std::vector<std::string> chemical_names_;
  std::vector<std::string> endpoint_names_;
  std::vector<CellData> cells_;
  std::vector<std::optional<double>> cutoffs_;
};

// ---------------------------------------------------------------------------
// CSV

namespace csv {

/// Split one CSV record, honouring double-quoted fields.
inline std::vector<std::string> split(std::string_view line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char ch = line[k];
    if (quoted) {
      if (ch == '"') {
        if (k + 1 < line.size() && line[k + 1] == '"') {
          cur.push_back('"');
          ++k;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string quote(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char ch : field) {
    if (ch == '"') out.push_back('"');
    out.push_back(ch);
  }
  out.push_back('"');
  return out;
}

inline std::string trim(std::string s) {
  auto not_space = [](unsigned char ch) { return !std::isspace(ch); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

inline std::optional<double> parse_number(const std::string& text) {
  const std::string t = trim(text);
  if (t.empty()) return std::nullopt;
  std::size_t used = 0;
  double v;
  try {
    v = std::stod(t, &used);
  } catch (const std::exception&) {
    return std::nullopt;
  }
  if (used != t.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

/// Shortest text that round-trips a double exactly (17 significant digits).
inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

/// Reads all non-blank lines; returns (1-based line number, fields).
inline std::vector<std::pair<std::size_t, std::vector<std::string>>> read_records(std::istream& in) {
  std::vector<std::pair<std::size_t, std::vector<std::string>>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    if (trim(line).empty()) continue;
    out.emplace_back(lineno, split(line));
  }
  return out;
}

inline void expect_header(const std::vector<std::string>& got, const std::vector<std::string>& want,
                          std::size_t lineno) {
  bool ok = got.size() == want.size();
  for (std::size_t k = 0; ok && k < want.size(); ++k) ok = trim(got[k]) == want[k];
  if (!ok) {
    std::string expected;
    for (const auto& w : want) expected += (expected.empty() ? "" : ",") + w;
    throw parse_error(lineno, "expected header '" + expected + "'");
  }
}

}  // namespace csv

/// Parse the long-format dose-response table.
/// Labels are indexed in order of first appearance; absent pairs are missing cells.
inline Dataset ingest_csv(std::istream& in) {
  const auto records = csv::read_records(in);
  if (records.empty()) throw empty_input_error("dose-response file is empty");
  csv::expect_header(records.front().second,
                     {"chemical", "assay_endpoint", "log10_dose_uM", "response"},
                     records.front().first);

  std::vector<std::string> chemicals, endpoints;
  std::unordered_map<std::string, int> chem_ix, endp_ix;
  struct Row {
    int i, j;
    Observation obs;
  };
  std::vector<Row> rows;
  rows.reserve(records.size());
  auto intern = [](std::unordered_map<std::string, int>& ix, std::vector<std::string>& names,
                   const std::string& name) {
    auto [it, inserted] = ix.emplace(name, static_cast<int>(names.size()));
    if (inserted) names.push_back(name);
    return it->second;
  };

  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& [lineno, f] = records[r];
    if (f.size() != 4) throw parse_error(lineno, "expected 4 fields, found " + std::to_string(f.size()));
    const std::string chem = csv::trim(f[0]);
    const std::string endp = csv::trim(f[1]);
    if (chem.empty() || endp.empty()) throw parse_error(lineno, "empty chemical or endpoint label");
    const auto dose = csv::parse_number(f[2]);
    if (!dose) throw parse_error(lineno, "non-numeric dose '" + f[2] + "'");
    const auto resp = csv::parse_number(f[3]);
    if (!resp) throw parse_error(lineno, "non-numeric response '" + f[3] + "'");
    rows.push_back({intern(chem_ix, chemicals, chem), intern(endp_ix, endpoints, endp), {*dose, *resp}});
  }
  if (rows.empty()) throw empty_input_error("dose-response file has a header but no rows");

  const int m = static_cast<int>(chemicals.size());
  const int J = static_cast<int>(endpoints.size());
  std::vector<CellData> cells(static_cast<std::size_t>(m) * J);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < J; ++j) {
      cells[static_cast<std::size_t>(i) * J + j].chemical_index = i;
      cells[static_cast<std::size_t>(i) * J + j].endpoint_index = j;
    }
  for (const Row& row : rows) cells[static_cast<std::size_t>(row.i) * J + row.j].observations.push_back(row.obs);
  return Dataset(std::move(chemicals), std::move(endpoints), std::move(cells));
}

inline Dataset ingest_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw invalid_argument("cannot open " + path);
  return ingest_csv(in);
}

/// Attach per-endpoint efficacy cutoffs (`assay_endpoint,cutoff`). Unknown endpoints are ignored.
inline Dataset read_cutoffs(const Dataset& data, std::istream& in) {
  const auto records = csv::read_records(in);
  if (records.empty()) throw empty_input_error("cutoff file is empty");
  csv::expect_header(records.front().second, {"assay_endpoint", "cutoff"}, records.front().first);
  std::vector<std::optional<double>> cutoffs = data.cutoffs();
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& [lineno, f] = records[r];
    if (f.size() != 2) throw parse_error(lineno, "expected 2 fields");
    const auto v = csv::parse_number(f[1]);
    if (!v) throw parse_error(lineno, "non-numeric cutoff '" + f[1] + "'");
    const int j = data.endpoint_index(csv::trim(f[0]));
    if (j >= 0) cutoffs[static_cast<std::size_t>(j)] = *v;
  }
  return data.with_cutoffs(std::move(cutoffs));
}

inline void write_csv(const Dataset& data, std::ostream& out) {
  out << "chemical,assay_endpoint,log10_dose_uM,response\n";
  for (const CellData& c : data.cells())
    for (const Observation& o : c.observations)
      out << csv::quote(data.chemical_names()[c.chemical_index]) << ','
          << csv::quote(data.endpoint_names()[c.endpoint_index]) << ','
          << csv::format_double(o.log10_dose) << ',' << csv::format_double(o.response) << '\n';
}

inline void write_cutoffs(const Dataset& data, std::ostream& out) {
  out << "assay_endpoint,cutoff\n";
  for (int j = 0; j < data.J(); ++j)
    if (data.cutoffs()[j])
      out << csv::quote(data.endpoint_names()[j]) << ',' << csv::format_double(*data.cutoffs()[j]) << '\n';
}

inline void write_mask(const Dataset& data, const CellMask& mask, std::ostream& out) {
  out << "chemical,assay_endpoint\n";
  for (int i = 0; i < data.m(); ++i)
    for (int j = 0; j < data.J(); ++j)
      if (mask[data.index(i, j)])
        out << csv::quote(data.chemical_names()[i]) << ',' << csv::quote(data.endpoint_names()[j]) << '\n';
}

inline CellMask read_mask(const Dataset& data, std::istream& in) {
  const auto records = csv::read_records(in);
  CellMask mask(data.cell_count(), 0);
  if (records.empty()) return mask;
  csv::expect_header(records.front().second, {"chemical", "assay_endpoint"}, records.front().first);
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& [lineno, f] = records[r];
    if (f.size() != 2) throw parse_error(lineno, "expected 2 fields");
    const int i = data.chemical_index(csv::trim(f[0]));
    const int j = data.endpoint_index(csv::trim(f[1]));
    if (i < 0 || j < 0) throw parse_error(lineno, "unknown cell '" + f[0] + ":" + f[1] + "'");
    mask[data.index(i, j)] = 1;
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Normalization

enum class NormalizationMode { cell, endpoint };

struct Normalized {
  Dataset data;
  std::vector<NormalizationRecord> records;  // one per cell, row-major
};

namespace detail {

inline double mean_of(const std::vector<Observation>& obs) {
  double s = 0.0;
  for (const auto& o : obs) s += o.response;
  return s / static_cast<double>(obs.size());
}

inline double centered_sum_squares(const std::vector<Observation>& obs, double mean) {
  double s = 0.0;
  for (const auto& o : obs) s += (o.response - mean) * (o.response - mean);
  return s;
}

}  // namespace detail

/// Center every observed cell at its sample mean and divide by a sample SD.
///
/// `cell` mode uses each cell's own SD; cells with fewer than two observations
/// or zero variance are centered only. `endpoint` mode divides every cell of an
/// endpoint by the pooled within-cell SD of that endpoint.
inline Normalized normalize_cells(const Dataset& raw, NormalizationMode mode = NormalizationMode::cell) {
  std::vector<CellData> cells = raw.cells();
  std::vector<NormalizationRecord> records(cells.size());

  std::vector<double> endpoint_scale(static_cast<std::size_t>(raw.J()), 1.0);
  if (mode == NormalizationMode::endpoint) {
    std::vector<double> ss(raw.J(), 0.0), dof(raw.J(), 0.0);
    for (const CellData& c : cells) {
      if (c.size() < 2) continue;
      ss[c.endpoint_index] += detail::centered_sum_squares(c.observations, detail::mean_of(c.observations));
      dof[c.endpoint_index] += static_cast<double>(c.size() - 1);
    }
    for (int j = 0; j < raw.J(); ++j)
      if (dof[j] > 0 && ss[j] > 0) endpoint_scale[j] = std::sqrt(ss[j] / dof[j]);
  }

  for (std::size_t k = 0; k < cells.size(); ++k) {
    CellData& c = cells[k];
    if (c.missing()) continue;
    NormalizationRecord rec;
    rec.location = detail::mean_of(c.observations);
    if (mode == NormalizationMode::endpoint) {
      rec.scale = endpoint_scale[c.endpoint_index];
    } else if (c.size() >= 2) {
      const double var = detail::centered_sum_squares(c.observations, rec.location) /
                         static_cast<double>(c.size() - 1);
      if (var > 0.0) rec.scale = std::sqrt(var);
    }
    for (Observation& o : c.observations) o.response = rec.apply(o.response);
    records[k] = rec;
  }
  return {Dataset(raw.chemical_names(), raw.endpoint_names(), std::move(cells), raw.cutoffs()),
          std::move(records)};
}

inline Dataset denormalize(const Dataset& normalized, const std::vector<NormalizationRecord>& records) {
  std::vector<CellData> cells = normalized.cells();
  for (std::size_t k = 0; k < cells.size(); ++k)
    for (Observation& o : cells[k].observations) o.response = records[k].invert(o.response);
  return Dataset(normalized.chemical_names(), normalized.endpoint_names(), std::move(cells),
                 normalized.cutoffs());
}

/// Cutoff for cell k on the normalized response scale.
inline std::optional<double> normalized_cutoff(const Dataset& data, const std::vector<NormalizationRecord>& records,
                                               int i, int j) {
  const auto& c = data.cutoffs()[static_cast<std::size_t>(j)];
  if (!c) return std::nullopt;
  return records[data.index(i, j)].apply(*c);
}

// ---------------------------------------------------------------------------
// Hold-out

struct HoldoutSplit {
  Dataset data;
  CellMask held_out;
};

/// Hide round(fraction * observed) uniformly chosen observed cells.
inline HoldoutSplit split_holdout(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0) || fraction >= 1.0) throw invalid_argument("hold-out fraction must lie in [0, 1)");
  std::vector<std::size_t> observed;
  for (std::size_t k = 0; k < data.cell_count(); ++k)
    if (!data.cells()[k].missing()) observed.push_back(k);
  const auto n_hold = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(observed.size())));
  CellMask mask(data.cell_count(), 0);
  RngStream rng(seed, 0x401d);
  // Partial Fisher-Yates.
  for (std::size_t k = 0; k < n_hold; ++k) {
    const int pick = rng.uniform_int(static_cast<int>(k), static_cast<int>(observed.size()) - 1);
    std::swap(observed[k], observed[static_cast<std::size_t>(pick)]);
    mask[observed[k]] = 1;
  }
  return {data.without_cells(mask), std::move(mask)};
}

}  // namespace bmc
