#pragma once

#include "oscilloprobe/common.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace oscilloprobe {

// Rejected append; `existing_row` is the id of the row holding the same key.
class DuplicateKeyError : public UsageError {
 public:
  DuplicateKeyError(const std::string& what, std::size_t existing_row)
      : UsageError(what), existing_row(existing_row) {}
  std::size_t existing_row;
};

// Quoting follows RFC 4180: fields with commas, quotes or newlines are quoted.
std::string csv_escape(const std::string& field);
std::vector<std::vector<std::string>> parse_csv(const std::string& text);

// Append-only string table with a fixed header and a uniqueness key.
class CsvTable {
 public:
  CsvTable(std::vector<std::string> columns, std::vector<std::string> key_columns);

  const std::vector<std::string>& columns() const { return columns_; }
  std::size_t column(const std::string& name) const;  // throws UsageError
  std::size_t size() const { return rows_.size(); }
  const std::vector<std::string>& row(std::size_t id) const { return rows_.at(id); }

  // Returns the new row id; throws DuplicateKeyError or UsageError (width).
  std::size_t append(std::vector<std::string> row);
  std::string to_csv() const;
  // Replaces the contents with the file's rows; throws FormatError on a header mismatch.
  void load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

 private:
  std::string key_of(const std::vector<std::string>& row) const;

  std::vector<std::string> columns_;
  std::vector<std::size_t> key_index_;
  std::vector<std::vector<std::string>> rows_;
  std::map<std::string, std::size_t> keys_;
};

// Conjunction of clauses joined by '&': `col=v`, `col<v`, `col>v`,
// `col in {a,b}`. Values compare numerically when both sides parse as
// numbers, otherwise as strings. Aliases: L, H, CL, method (probe or
// intervention method) and site ("embed" or "L<l>.<pos>").
struct FilterClause {
  std::string column;
  std::string op;  // "=", "<", ">", "in"
  std::vector<std::string> values;
};

std::vector<FilterClause> parse_filter(const std::string& expression);
bool matches(const CsvTable& table, std::size_t row, const std::vector<FilterClause>& filter);
// Matching row ids in insertion order; unknown columns throw UsageError.
std::vector<std::size_t> query(const CsvTable& table, const std::string& expression);

struct ModelRecord {
  std::string datatype;  // dataset kind
  int emb = 0;           // H
  int layer = 0;         // L
  int epoch = 0;         // epochs completed
  int context = 0;       // largest context length trained on
  double lr = 0.0;
  int total_epochs = 0;
  int batch = 0;
  std::string model_path;
  std::uint64_t seed = 0;
  std::string status = "complete";

  std::string id() const;  // e.g. linreg-L2-H16-s1-e2000
  friend bool operator==(const ModelRecord&, const ModelRecord&) = default;
};

// `traintest` is the probe scoring mode (held-out or in-sample); `data_split`
// is the dataset split the activations came from (train, test, ood).
struct ProbeRecord {
  ModelRecord model;
  std::string datatype;
  std::string traintest;
  std::string data_split;
  std::string kind;  // linear, cca2, reverse
  std::string target_method;
  std::string target_name;
  int layer = 0;
  std::string inlayerpos;  // embed, attn, attn-res, mlp, mlp-res
  int context = 0;
  double r2 = kUndefined;  // variance explained for reverse probes
  double mse = kUndefined;
  std::string save_path;
  bool flagged = false;
  std::string flag_reason;

  friend bool operator==(const ProbeRecord&, const ProbeRecord&) = default;
};

struct InterventionRecord {
  ModelRecord model;
  int layer = 0;
  std::string inlayerpos;
  std::string method;
  std::string mode;
  double dt_factor = 1.0;
  double omega_factor = 1.0;
  double w_prime = kUndefined;
  double post_mse = kUndefined;
  double baseline_mse = kUndefined;
  double copy_last_mse = kUndefined;
  double clean_mse = kUndefined;
  double implied_error = kUndefined;
  std::string classification;
  int n_series = 0;
  std::string warning;

  friend bool operator==(const InterventionRecord&, const InterventionRecord&) = default;
};

// Registry directory: models.csv, probes.csv, interventions.csv. Appends
// stay in memory until commit(), which rewrites each table through a
// temporary file and a rename. Existing rows are never modified.
class Registry {
 public:
  explicit Registry(std::filesystem::path dir);

  const std::filesystem::path& dir() const { return dir_; }
  std::size_t append(const ModelRecord& r);
  std::size_t append(const ProbeRecord& r);
  std::size_t append(const InterventionRecord& r);
  void commit() const;

  const CsvTable& models() const { return models_; }
  const CsvTable& probes() const { return probes_; }
  const CsvTable& interventions() const { return interventions_; }
  const CsvTable& table(const std::string& name) const;  // models, probes, interventions

  ModelRecord model(std::size_t id) const;
  ProbeRecord probe(std::size_t id) const;
  InterventionRecord intervention(std::size_t id) const;

 private:
  std::filesystem::path dir_;
  CsvTable models_;
  CsvTable probes_;
  CsvTable interventions_;
};

// One cell of the method x criterion summary.
struct SummaryCell {
  std::string method;
  int criterion = 0;  // 1..4
  double value = kUndefined;
  std::string label;  // classification or note
  std::string best_model;
  std::string best_site;
};

std::string summary_to_csv(const std::vector<SummaryCell>& cells);
std::vector<SummaryCell> summary_from_csv(const std::string& text);

// Writes table2.csv, table2.txt, curves.csv, sweeps.csv and missing-inputs.txt
// into `out`. Missing files are listed rather than fatal; output depends only
// on the registry contents and the summary. Returns the missing inputs.
std::vector<std::string> write_report(const Registry& registry, const std::vector<SummaryCell>& summary,
                                      const std::filesystem::path& out);

}  // namespace oscilloprobe
