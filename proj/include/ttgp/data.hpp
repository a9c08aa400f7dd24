#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ttgp/errors.hpp"

namespace ttgp {

/// A loaded table: dense features and one raw target value per row. Targets
/// stay in file units here; classification runs remap them to contiguous
/// class indices via remap_labels.
struct Dataset {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;

  Eigen::Index rows() const { return X.rows(); }
  Eigen::Index cols() const { return X.cols(); }
};

enum class HeaderMode { kAuto, kNone, kSkip };

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
    s.remove_prefix(1);
  }
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

inline bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);  // from_chars rejects a leading plus
  const char* begin = s.data();
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end;
}

inline std::vector<std::string_view> split_on(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline void require_finite(const Dataset& data, const std::string& path) {
  if (!data.X.allFinite() || !data.y.allFinite())
    throw DataError(path + ": non-finite value in loaded data");
}

}  // namespace detail

/// Comma-separated loader. `label_column` selects the target column
/// (negative = last). HeaderMode::kAuto skips the first line only when any of
/// its cells fails to parse as a number.
inline Dataset load_csv(const std::string& path, int label_column = -1,
                        HeaderMode header = HeaderMode::kAuto) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open file");

  std::vector<std::vector<double>> rows;
  std::string line;
  int line_no = 0;
  bool first_content_line = true;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view text = detail::trim(line);
    if (text.empty()) continue;
    const auto cells = detail::split_on(text, ',');
    std::vector<double> row(cells.size());
    bool ok = true;
    for (std::size_t j = 0; j < cells.size(); ++j)
      if (!detail::parse_double(cells[j], row[j])) {
        ok = false;
        if (!first_content_line || header == HeaderMode::kNone)
          throw DataError(path + ":" + std::to_string(line_no) + ": cannot parse field '" +
                          std::string(cells[j]) + "'");
        break;
      }
    if (first_content_line) {
      first_content_line = false;
      if (header == HeaderMode::kSkip || (header == HeaderMode::kAuto && !ok)) continue;
    }
    if (!ok)
      throw DataError(path + ":" + std::to_string(line_no) + ": cannot parse row");
    if (width == 0) width = cells.size();
    if (row.size() != width)
      throw DataError(path + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(width) + " fields, found " + std::to_string(row.size()));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError(path + ": no data rows");
  if (width < 2) throw DataError(path + ": need at least one feature and one target column");

  int lc = label_column < 0 ? static_cast<int>(width) - 1 : label_column;
  if (lc < 0 || lc >= static_cast<int>(width))
    throw DataError(path + ": label column " + std::to_string(label_column) +
                    " out of range for " + std::to_string(width) + " columns");

  Dataset data;
  data.X.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width) - 1);
  data.y.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Eigen::Index k = 0;
    for (std::size_t j = 0; j < width; ++j) {
      if (static_cast<int>(j) == lc)
        data.y[static_cast<Eigen::Index>(i)] = rows[i][j];
      else
        data.X(static_cast<Eigen::Index>(i), k++) = rows[i][j];
    }
  }
  detail::require_finite(data, path);
  return data;
}

/// Comma-separated loader without a target column: every field is a feature.
/// An empty file (or one holding only a header) yields a 0×0 matrix.
inline Eigen::MatrixXd load_csv_matrix(const std::string& path,
                                       HeaderMode header = HeaderMode::kAuto) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open file");

  std::vector<std::vector<double>> rows;
  std::string line;
  int line_no = 0;
  bool first_content_line = true;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view text = detail::trim(line);
    if (text.empty()) continue;
    const auto cells = detail::split_on(text, ',');
    std::vector<double> row(cells.size());
    bool ok = true;
    for (std::size_t j = 0; j < cells.size(); ++j)
      if (!detail::parse_double(cells[j], row[j])) {
        ok = false;
        if (!first_content_line || header == HeaderMode::kNone)
          throw DataError(path + ":" + std::to_string(line_no) + ": cannot parse field '" +
                          std::string(cells[j]) + "'");
        break;
      }
    if (first_content_line) {
      first_content_line = false;
      if (header == HeaderMode::kSkip || (header == HeaderMode::kAuto && !ok)) continue;
    }
    if (!ok)
      throw DataError(path + ":" + std::to_string(line_no) + ": cannot parse row");
    if (width == 0) width = cells.size();
    if (row.size() != width)
      throw DataError(path + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(width) + " fields, found " + std::to_string(row.size()));
    for (double v : row)
      if (!std::isfinite(v))
        throw DataError(path + ":" + std::to_string(line_no) + ": non-finite value in loaded data");
    rows.push_back(std::move(row));
  }

  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < width; ++j)
      X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return X;
}

/// Sparse "label idx:val …" loader with 1-based indices; absent indices are
/// zero. `dim` 0 infers the width from the largest index seen.
inline Dataset load_libsvm(const std::string& path, int dim = 0) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open file");
  if (dim < 0) throw DataError(path + ": negative feature dimension");

  std::vector<double> labels;
  std::vector<std::vector<std::pair<int, double>>> entries;
  std::string line;
  int line_no = 0;
  int max_index = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view text = detail::trim(line);
    if (text.empty()) continue;
    std::vector<std::string_view> tokens;
    for (std::string_view tok : detail::split_on(text, ' '))
      if (!detail::trim(tok).empty()) tokens.push_back(detail::trim(tok));
    double label;
    if (!detail::parse_double(tokens[0], label))
      throw DataError(path + ":" + std::to_string(line_no) + ": cannot parse label '" +
                      std::string(tokens[0]) + "'");
    std::vector<std::pair<int, double>> row;
    int prev_index = 0;
    for (std::size_t t = 1; t < tokens.size(); ++t) {
      const std::size_t colon = tokens[t].find(':');
      if (colon == std::string_view::npos)
        throw DataError(path + ":" + std::to_string(line_no) + ": expected idx:value, found '" +
                        std::string(tokens[t]) + "'");
      int idx = 0;
      const std::string_view idx_text = tokens[t].substr(0, colon);
      auto [p, ec] = std::from_chars(idx_text.data(), idx_text.data() + idx_text.size(), idx);
      double value;
      if (ec != std::errc() || p != idx_text.data() + idx_text.size() || idx < 1)
        throw DataError(path + ":" + std::to_string(line_no) + ": bad feature index '" +
                        std::string(idx_text) + "'");
      if (idx <= prev_index)
        throw DataError(path + ":" + std::to_string(line_no) +
                        ": feature indices must be strictly increasing");
      prev_index = idx;
      if (!detail::parse_double(tokens[t].substr(colon + 1), value))
        throw DataError(path + ":" + std::to_string(line_no) + ": cannot parse value '" +
                        std::string(tokens[t].substr(colon + 1)) + "'");
      row.emplace_back(idx, value);
      max_index = std::max(max_index, idx);
    }
    labels.push_back(label);
    entries.push_back(std::move(row));
  }
  if (labels.empty()) throw DataError(path + ": no data rows");
  const int width = dim > 0 ? dim : max_index;
  if (max_index > width)
    throw DataError(path + ": feature index " + std::to_string(max_index) +
                    " exceeds declared dimension " + std::to_string(width));
  if (width < 1) throw DataError(path + ": no features found");

  Dataset data;
  data.X = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(labels.size()), width);
  data.y.resize(static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    data.y[static_cast<Eigen::Index>(i)] = labels[i];
    for (const auto& [idx, value] : entries[i]) data.X(static_cast<Eigen::Index>(i), idx - 1) = value;
  }
  detail::require_finite(data, path);
  return data;
}

/// Contiguous class indices from raw target values, with the sorted original
/// values kept as the index → value mapping.
struct LabelMapping {
  std::vector<int> indices;
  std::vector<double> values;  ///< values[k] is the raw label for class k

  int num_classes() const { return static_cast<int>(values.size()); }

  int index_of(double raw) const {
    const auto it = std::lower_bound(values.begin(), values.end(), raw);
    if (it == values.end() || *it != raw)
      throw DataError("unknown class label " + std::to_string(raw));
    return static_cast<int>(it - values.begin());
  }
};

inline LabelMapping remap_labels(const Eigen::VectorXd& y) {
  LabelMapping map;
  std::map<double, int> seen;
  for (Eigen::Index i = 0; i < y.size(); ++i) seen.emplace(y[i], 0);
  int next = 0;
  for (auto& [value, index] : seen) {
    index = next++;
    map.values.push_back(value);
  }
  map.indices.resize(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) map.indices[i] = seen.at(y[i]);
  return map;
}

/// Per-column z-scoring statistics fitted on the training split. Constant
/// columns keep mean 0 and std 1 so they pass through unchanged; their
/// indices are recorded so callers can warn.
struct StandardizeStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;
  std::vector<int> constant_columns;
  double y_mean = 0.0;
  double y_std = 1.0;
};

inline StandardizeStats standardize_fit(const Eigen::MatrixXd& X) {
  if (X.rows() == 0) throw InvalidInputError("cannot fit statistics on an empty split");
  StandardizeStats s;
  s.mean.resize(X.cols());
  s.std.resize(X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    const double mean = X.col(j).mean();
    const double var = (X.col(j).array() - mean).square().mean();
    if (var > 0.0) {
      s.mean[j] = mean;
      s.std[j] = std::sqrt(var);
    } else {
      s.mean[j] = 0.0;
      s.std[j] = 1.0;
      s.constant_columns.push_back(static_cast<int>(j));
    }
  }
  return s;
}

inline StandardizeStats standardize_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  StandardizeStats s = standardize_fit(X);
  if (y.size() == 0) throw InvalidInputError("cannot fit statistics on empty targets");
  s.y_mean = y.mean();
  const double var = (y.array() - s.y_mean).square().mean();
  s.y_std = var > 0.0 ? std::sqrt(var) : 1.0;
  return s;
}

inline Eigen::MatrixXd standardize_apply(const StandardizeStats& s, const Eigen::MatrixXd& X) {
  if (X.cols() != s.mean.size())
    throw ShapeError("feature count does not match the fitted statistics");
  return (X.rowwise() - s.mean.transpose()).array().rowwise() / s.std.transpose().array();
}

inline Eigen::VectorXd standardize_targets(const StandardizeStats& s, const Eigen::VectorXd& y) {
  return (y.array() - s.y_mean) / s.y_std;
}

inline Eigen::VectorXd destandardize_targets(const StandardizeStats& s,
                                             const Eigen::VectorXd& y) {
  return (y.array() * s.y_std) + s.y_mean;
}

/// Seeded shuffle-and-partition row split. Returns (train, test) index lists
/// in shuffled order.
inline std::pair<std::vector<Eigen::Index>, std::vector<Eigen::Index>> split_rows(
    Eigen::Index n, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw InvalidInputError("test fraction must be strictly between 0 and 1");
  if (n < 2) throw InvalidInputError("need at least two rows to split");
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(n)));
  n_test = std::min(std::max<std::size_t>(n_test, 1), static_cast<std::size_t>(n) - 1);
  std::vector<Eigen::Index> test(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<Eigen::Index> train(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  return {std::move(train), std::move(test)};
}

/// Stratified variant: each class is shuffled and partitioned separately so
/// per-class proportions survive within one instance.
inline std::pair<std::vector<Eigen::Index>, std::vector<Eigen::Index>> split_rows_stratified(
    const std::vector<int>& labels, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw InvalidInputError("test fraction must be strictly between 0 and 1");
  std::map<int, std::vector<Eigen::Index>> per_class;
  for (std::size_t i = 0; i < labels.size(); ++i)
    per_class[labels[i]].push_back(static_cast<Eigen::Index>(i));
  std::mt19937_64 rng(seed);
  std::vector<Eigen::Index> train, test;
  for (auto& [cls, idx] : per_class) {
    if (idx.size() < 2)
      throw DataError("class " + std::to_string(cls) + " has fewer than two instances");
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_test =
        static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(idx.size())));
    n_test = std::min(n_test, idx.size() - 1);
    test.insert(test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  return {std::move(train), std::move(test)};
}

inline Eigen::MatrixXd select_rows(const Eigen::MatrixXd& X,
                                   const std::vector<Eigen::Index>& idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), X.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = X.row(idx[i]);
  return out;
}

inline Eigen::VectorXd select_rows(const Eigen::VectorXd& v,
                                   const std::vector<Eigen::Index>& idx) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[idx[i]];
  return out;
}

inline std::vector<int> select_rows(const std::vector<int>& v,
                                    const std::vector<Eigen::Index>& idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = v[static_cast<std::size_t>(idx[i])];
  return out;
}

}  // namespace ttgp
