#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdr/dataset.hpp"

namespace sdr {

// Dataset CSV schema: one row per unit; columns `L0_<name>`, `L<t>_<name>`,
// `A<t>`, `Y` in any order. K is inferred from the A-columns, which must form
// a contiguous run A1..AK. Values are plain decimal numbers.
namespace csv_detail {

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline bool parse_block_header(const std::string& h, int& block, std::string& rest) {
  if (h.size() < 2 || h[0] != 'L') return false;
  std::size_t p = 1;
  while (p < h.size() && h[p] >= '0' && h[p] <= '9') ++p;
  if (p == 1 || p >= h.size() || h[p] != '_') return false;
  block = std::stoi(h.substr(1, p - 1));
  rest = h.substr(p + 1);
  return true;
}

}  // namespace csv_detail

inline LongitudinalDataset read_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty CSV '" + path + "'");
  const auto header = csv_detail::split_line(line);

  int K = 0;
  std::vector<int> a_col;  // a_col[t-1] = column of A{t}
  struct ColRef {
    int block;
    std::string name;
    int col;
  };
  std::vector<ColRef> l_cols;
  int y_col = -1;
  for (std::size_t j = 0; j < header.size(); ++j) {
    const std::string& h = header[j];
    int block;
    std::string rest;
    if (h == "Y") {
      if (y_col >= 0) throw std::runtime_error("CSV header: duplicate column Y");
      y_col = static_cast<int>(j);
    } else if (h.size() >= 2 && h[0] == 'A') {
      int t = 0;
      try {
        t = std::stoi(h.substr(1));
      } catch (...) {
        throw std::runtime_error("CSV header: malformed column '" + h + "'");
      }
      if (t < 1) throw std::runtime_error("CSV header: malformed column '" + h + "'");
      if (static_cast<int>(a_col.size()) < t) a_col.resize(static_cast<std::size_t>(t), -1);
      if (a_col[static_cast<std::size_t>(t) - 1] >= 0)
        throw std::runtime_error("CSV header: duplicate column '" + h + "'");
      a_col[static_cast<std::size_t>(t) - 1] = static_cast<int>(j);
      K = std::max(K, t);
    } else if (csv_detail::parse_block_header(h, block, rest)) {
      l_cols.push_back({block, rest, static_cast<int>(j)});
    } else {
      throw std::runtime_error("CSV header: unrecognized column '" + h + "'");
    }
  }
  if (y_col < 0) throw std::runtime_error("CSV header: missing column Y");
  for (int t = 1; t <= K; ++t)
    if (a_col[static_cast<std::size_t>(t) - 1] < 0)
      throw std::runtime_error("CSV header: missing column A" + std::to_string(t));
  for (const auto& c : l_cols)
    if (c.block > K)
      throw std::runtime_error("CSV header: column L" + std::to_string(c.block) + "_" + c.name +
                               " exceeds inferred K=" + std::to_string(K));

  std::vector<UnitRecord> recs;
  std::vector<std::vector<std::string>> cov_names(static_cast<std::size_t>(K));
  std::vector<std::string> base_names;
  std::vector<std::vector<int>> block_cols(static_cast<std::size_t>(K) + 1);
  for (const auto& c : l_cols) {
    block_cols[static_cast<std::size_t>(c.block)].push_back(c.col);
    if (c.block == 0)
      base_names.push_back(c.name);
    else
      cov_names[static_cast<std::size_t>(c.block) - 1].push_back(c.name);
  }

  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = csv_detail::split_line(line);
    if (cells.size() != header.size())
      throw std::runtime_error("line " + std::to_string(line_no) + ": expected " +
                               std::to_string(header.size()) + " fields, got " + std::to_string(cells.size()));
    auto num = [&](int col) {
      try {
        std::size_t pos = 0;
        const double v = std::stod(cells[static_cast<std::size_t>(col)], &pos);
        if (pos != cells[static_cast<std::size_t>(col)].size()) throw std::invalid_argument("trailing");
        return v;
      } catch (...) {
        throw std::runtime_error("line " + std::to_string(line_no) + ": bad number in column '" +
                                 header[static_cast<std::size_t>(col)] + "'");
      }
    };
    UnitRecord r;
    for (int col : block_cols[0]) r.baseline.push_back(num(col));
    r.covariates.resize(static_cast<std::size_t>(K));
    r.treatment.resize(static_cast<std::size_t>(K));
    for (int t = 1; t <= K; ++t) {
      for (int col : block_cols[static_cast<std::size_t>(t)])
        r.covariates[static_cast<std::size_t>(t) - 1].push_back(num(col));
      const double a = num(a_col[static_cast<std::size_t>(t) - 1]);
      if (a != 0.0 && a != 1.0)
        throw std::runtime_error("line " + std::to_string(line_no) + ": non-binary treatment in column 'A" +
                                 std::to_string(t) + "'");
      r.treatment[static_cast<std::size_t>(t) - 1] = static_cast<int>(a);
    }
    r.outcome = num(y_col);
    if (r.outcome < 0.0 || r.outcome > 1.0)
      throw std::runtime_error("line " + std::to_string(line_no) + ": outcome outside [0,1]");
    recs.push_back(std::move(r));
  }
  if (recs.empty()) throw std::runtime_error("CSV '" + path + "' has no data rows");
  return build_dataset(K, recs, base_names, cov_names);
}

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

inline void write_dataset_csv(const LongitudinalDataset& ds, std::ostream& out) {
  bool first = true;
  auto emit = [&](const std::string& s) {
    if (!first) out << ',';
    out << s;
    first = false;
  };
  for (const auto& nm : ds.baseline_names) emit(nm);
  for (int t = 1; t <= ds.K; ++t) {
    for (const auto& nm : ds.covariate_names[static_cast<std::size_t>(t) - 1]) emit(nm);
    emit("A" + std::to_string(t));
  }
  emit("Y");
  out << '\n';
  for (int i = 0; i < ds.n; ++i) {
    first = true;
    for (int j = 0; j < ds.baseline.cols(); ++j) emit(format_number(ds.baseline(i, j)));
    for (int t = 1; t <= ds.K; ++t) {
      const auto& C = ds.covariates[static_cast<std::size_t>(t) - 1];
      for (int j = 0; j < C.cols(); ++j) emit(format_number(C(i, j)));
      emit(std::to_string(ds.treatment[static_cast<std::size_t>(t) - 1][i]));
    }
    emit(format_number(ds.outcome[i]));
    out << '\n';
  }
}

inline void write_dataset_csv(const LongitudinalDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  write_dataset_csv(ds, out);
}

}  // namespace sdr
