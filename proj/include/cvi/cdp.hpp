#pragma once
// Global-control-dependency measurement: compare the distinct basic blocks of
// a dry run against runs where one variable's value was flipped; the size of
// the set difference is the dependency score n. Instances with n above a
// threshold are candidate critical variables.
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cvi/trace.hpp"

namespace cvi {

enum class CdpDiff { Symmetric, Oneway };

struct CdpMeasurement {
  int instance = -1;
  int n = -1;  // -1 = unmeasured
  int flips_tried = 0;
  bool candidate = false;
};

inline std::set<uint64_t> bb_set(const Trace& trace) {
  std::set<uint64_t> out;
  for (const auto& ev : trace.events)
    if (ev.kind == EventKind::Ins) out.insert(ev.bb);
  return out;
}

inline int bb_diff(const std::set<uint64_t>& dry, const std::set<uint64_t>& flip,
                   CdpDiff mode = CdpDiff::Symmetric) {
  int n = 0;
  for (uint64_t b : flip)
    if (!dry.count(b)) ++n;
  if (mode == CdpDiff::Symmetric)
    for (uint64_t b : dry)
      if (!flip.count(b)) ++n;
  return n;
}

inline int measure_cdp(const std::set<uint64_t>& dry,
                       const std::vector<std::set<uint64_t>>& flipped,
                       CdpDiff mode = CdpDiff::Symmetric) {
  int n = -1;  // no flipped runs -> unmeasured
  for (const auto& f : flipped) n = std::max(n, bb_diff(dry, f, mode));
  return n;
}

inline int measure_cdp(const Trace& dry, const std::vector<Trace>& flipped,
                       CdpDiff mode = CdpDiff::Symmetric) {
  std::vector<std::set<uint64_t>> sets;
  sets.reserve(flipped.size());
  for (const auto& t : flipped) sets.push_back(bb_set(t));
  return measure_cdp(bb_set(dry), sets, mode);
}

inline std::vector<int> candidates(const std::vector<CdpMeasurement>& ms,
                                   int theta) {
  if (theta < 0)
    throw std::invalid_argument("candidate threshold must be >= 0");
  std::vector<int> out;
  for (const auto& m : ms)
    if (m.n > theta) out.push_back(m.instance);
  return out;
}

// ---------------------------------------------------------------------------
// measurements CSV

inline void write_measurements_csv(const std::vector<CdpMeasurement>& ms,
                                   std::ostream& out) {
  out << "instance_id,n,flips_tried,candidate\n";
  for (const auto& m : ms)
    out << m.instance << ',' << m.n << ',' << m.flips_tried << ','
        << (m.candidate ? 1 : 0) << '\n';
}

inline void write_measurements_csv(const std::vector<CdpMeasurement>& ms,
                                   const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write measurements: " + path);
  write_measurements_csv(ms, out);
}

inline std::vector<CdpMeasurement> read_measurements_csv(std::istream& in) {
  std::vector<CdpMeasurement> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || lineno == 1) continue;  // header
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 4)
      throw std::runtime_error("measurements CSV: bad row at line " +
                               std::to_string(lineno));
    CdpMeasurement m;
    m.instance = std::stoi(cells[0]);
    m.n = std::stoi(cells[1]);
    m.flips_tried = std::stoi(cells[2]);
    m.candidate = std::stoi(cells[3]) != 0;
    out.push_back(m);
  }
  return out;
}

inline std::vector<CdpMeasurement> read_measurements_csv(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open measurements: " + path);
  return read_measurements_csv(in);
}

}  // namespace cvi
