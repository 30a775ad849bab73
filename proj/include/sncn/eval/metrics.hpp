#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sncn/core/error.hpp"
#include "sncn/data/image.hpp"
#include "sncn/eval/corruption.hpp"

namespace sncn {

/// Top-1 error per (kind, severity) plus clean error.
struct ErrorTable {
  std::vector<CorruptionKind> kinds;
  std::vector<std::array<std::optional<double>, kSeverities>> cells;
  double clean_error = 0.0;

  static ErrorTable over(std::vector<CorruptionKind> kinds) {
    ErrorTable t;
    t.cells.resize(kinds.size());
    t.kinds = std::move(kinds);
    return t;
  }

  std::size_t row(CorruptionKind k) const {
    for (std::size_t i = 0; i < kinds.size(); ++i)
      if (kinds[i] == k) return i;
    throw std::invalid_argument("error table has no row for " + std::string(to_string(k)));
  }

  void set(CorruptionKind k, int severity, double error) {
    CorruptionSpec{k, severity}.validate();
    cells[row(k)][static_cast<std::size_t>(severity - 1)] = error;
  }

  double at(CorruptionKind k, int severity) const {
    const auto &cell = cells[row(k)].at(static_cast<std::size_t>(severity - 1));
    if (!cell) throw std::invalid_argument("error table cell " + std::string(to_string(k)) + "/" +
                                           std::to_string(severity) + " is missing");
    return *cell;
  }

  bool complete() const {
    if (kinds.empty() || cells.size() != kinds.size()) return false;
    for (const auto &r : cells)
      for (const auto &c : r)
        if (!c) return false;
    return true;
  }

  bool operator==(const ErrorTable &) const = default;
};

namespace detail {

inline void require_complete(const ErrorTable &t, const char *what) {
  if (!t.complete()) throw std::invalid_argument(std::string(what) + ": error table is incomplete");
}

// Summing in sorted order makes the result independent of enumeration order.
inline double sorted_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return std::accumulate(v.begin(), v.end(), 0.0);
}

} // namespace detail

/// Plain mean over every (kind, severity) cell.
inline double mce_unnormalized(const ErrorTable &t) {
  detail::require_complete(t, "mce_unnormalized");
  std::vector<double> all;
  for (const auto &r : t.cells)
    for (const auto &c : r) all.push_back(*c);
  const auto count = static_cast<double>(all.size());
  return detail::sorted_sum(std::move(all)) / count;
}

/// (1/K)·Σ_kinds Σ_s E / Σ_s E_ref.
inline double mce_normalized(const ErrorTable &t, const ErrorTable &ref) {
  detail::require_complete(t, "mce_normalized");
  std::vector<double> ratios;
  for (std::size_t i = 0; i < t.kinds.size(); ++i) {
    std::vector<double> num, den;
    for (int s = 1; s <= kSeverities; ++s) {
      num.push_back(t.at(t.kinds[i], s));
      den.push_back(ref.at(t.kinds[i], s));
    }
    const double d = detail::sorted_sum(std::move(den));
    if (!(d > 0.0))
      throw std::invalid_argument("mce_normalized: reference errors for " + std::string(to_string(t.kinds[i])) +
                                  " sum to zero");
    ratios.push_back(detail::sorted_sum(std::move(num)) / d);
  }
  return detail::sorted_sum(ratios) / static_cast<double>(ratios.size());
}

inline void write_error_table_csv(std::ostream &out, const ErrorTable &t) {
  out << "corruption,severity,error\n";
  std::ostringstream row;
  row << std::setprecision(17);
  for (std::size_t i = 0; i < t.kinds.size(); ++i)
    for (int s = 1; s <= kSeverities; ++s)
      if (t.cells[i][static_cast<std::size_t>(s - 1)]) row << to_string(t.kinds[i]) << ',' << s << ',' << t.at(t.kinds[i], s) << '\n';
  row << "clean,-," << t.clean_error << '\n';
  out << row.str();
}

inline ErrorTable read_error_table_csv(std::istream &in) {
  std::string line;
  if (!std::getline(in, line) || line != "corruption,severity,error")
    throw FormatError("error table: missing header 'corruption,severity,error'");
  ErrorTable t;
  bool has_clean = false;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string kind, sev, err;
    if (!std::getline(ss, kind, ',') || !std::getline(ss, sev, ',') || !std::getline(ss, err))
      throw FormatError("error table line " + std::to_string(line_no) + ": expected 3 fields");
    double value = 0;
    try {
      value = std::stod(err);
    } catch (const std::exception &) {
      throw FormatError("error table line " + std::to_string(line_no) + ": bad error value '" + err + "'");
    }
    if (kind == "clean") {
      t.clean_error = value;
      has_clean = true;
      continue;
    }
    CorruptionKind k;
    int s = 0;
    try {
      k = parse_corruption_kind(kind);
      s = std::stoi(sev);
    } catch (const std::exception &e) {
      throw FormatError("error table line " + std::to_string(line_no) + ": " + e.what());
    }
    if (std::find(t.kinds.begin(), t.kinds.end(), k) == t.kinds.end()) {
      t.kinds.push_back(k);
      t.cells.emplace_back();
    }
    try {
      t.set(k, s, value);
    } catch (const std::exception &e) {
      throw FormatError("error table line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!has_clean) throw FormatError("error table: missing 'clean' row");
  return t;
}

/// Classifier: callable mapping an N×3×H×W batch to N predicted labels.
template <typename Classifier>
double classification_error(Classifier &&classify, const Dataset &data, std::size_t batch_size,
                            const std::function<LabeledImage(const LabeledImage &, std::size_t)> &transform = {}) {
  if (data.empty()) throw std::invalid_argument("evaluation: empty dataset");
  std::size_t wrong = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    Dataset chunk;
    for (std::size_t i = start; i < end; ++i) chunk.images.push_back(transform ? transform(data.images[i], i) : data.images[i]);
    std::vector<std::size_t> idx(chunk.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto [batch, labels] = make_batch(chunk, idx);
    const std::vector<int> pred = classify(batch);
    if (pred.size() != labels.size()) throw ShapeError("classifier returned wrong number of predictions");
    for (std::size_t i = 0; i < labels.size(); ++i) wrong += pred[i] != labels[i];
  }
  return static_cast<double>(wrong) / static_cast<double>(data.size());
}

/// Clean error plus the full corruption grid; cell seeds come from
/// (seed, kind, severity, image index).
template <typename Classifier>
ErrorTable evaluate_suite(Classifier &&classify, const Dataset &test, const std::vector<CorruptionKind> &kinds,
                          std::uint64_t seed, std::size_t batch_size = 100, const CorruptionSchedule &sched = {}) {
  if (test.empty()) throw std::invalid_argument("evaluate_suite: empty dataset");
  if (batch_size == 0) throw std::invalid_argument("evaluate_suite: batch_size must be positive");
  ErrorTable table = ErrorTable::over(kinds);
  table.clean_error = classification_error(classify, test, batch_size);
  for (CorruptionKind k : kinds)
    for (int s = 1; s <= kSeverities; ++s) {
      const CorruptionSpec spec{k, s};
      table.set(k, s, classification_error(classify, test, batch_size, [&](const LabeledImage &img, std::size_t i) {
                  Rng rng = corruption_rng(seed, k, s, i);
                  return corrupt(img, spec, rng, sched);
                }));
    }
  return table;
}

} // namespace sncn
