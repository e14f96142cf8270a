#include "intrus/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace intrus {

std::vector<RelativeIndex> relative_indices(const Trajectory& traj) {
  std::vector<RelativeIndex> out;
  const std::size_t n = traj.insertions();
  std::size_t rank = 0;
  for (const InsertionEvent& ev : traj.events) {
    if (ev.is_eos()) continue;
    const double idx = n <= 1 ? 0.0 : static_cast<double>(rank) / static_cast<double>(n - 1);
    out.push_back({ev.token, idx});
    ++rank;
  }
  return out;
}

OrderStats relative_order_stats(const std::vector<Trajectory>& trajectories, const Vocab& vocab) {
  OrderStats stats;
  std::map<std::string, double> sums;
  for (const Trajectory& traj : trajectories) {
    for (const RelativeIndex& r : relative_indices(traj)) {
      if (r.token < 0 || r.token >= vocab.size()) {
        throw VocabError("token id " + std::to_string(r.token) + " has no class in the vocab");
      }
      const std::string& cls = vocab.token_class(r.token);
      if (cls.empty()) throw VocabError("token '" + vocab.token(r.token) + "' has no class");
      auto& s = stats[cls];
      const int bin = std::min(static_cast<int>(r.index * kOrderBins), kOrderBins - 1);
      ++s.histogram[static_cast<std::size_t>(bin)];
      ++s.count;
      sums[cls] += r.index;
    }
  }
  for (auto& [cls, s] : stats) s.mean = sums[cls] / static_cast<double>(s.count);
  return stats;
}

std::string order_stats_csv(const OrderStats& stats) {
  std::ostringstream os;
  os << "class,bin,count\n";
  char edge[16];
  for (const auto& [cls, s] : stats) {
    for (int b = 0; b < kOrderBins; ++b) {
      std::snprintf(edge, sizeof edge, "%.1f", static_cast<double>(b) / kOrderBins);
      os << cls << ',' << edge << ',' << s.histogram[static_cast<std::size_t>(b)] << '\n';
    }
  }
  return os.str();
}

std::string direction_label(const Trajectory& traj) {
  bool appends = true, prepends = true;
  std::size_t len = 0;
  for (const InsertionEvent& ev : traj.events) {
    if (ev.is_eos()) continue;
    if (static_cast<std::size_t>(ev.pos) != len) appends = false;
    if (ev.pos != 0) prepends = false;
    ++len;
  }
  if (appends) return "l2r";
  if (prepends) return "r2l";
  return "mixed";
}

std::map<std::string, std::size_t> order_direction_profile(
    const std::vector<Trajectory>& trajectories) {
  std::map<std::string, std::size_t> counts{{"l2r", 0}, {"r2l", 0}, {"mixed", 0}};
  for (const Trajectory& t : trajectories) ++counts[direction_label(t)];
  return counts;
}

std::vector<Trajectory> read_decode_trajectories(const std::string& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open decode file: " + path);
  std::vector<Trajectory> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto a = line.find('\t');
    const auto b = a == std::string::npos ? a : line.find('\t', a + 1);
    if (b == std::string::npos) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected three TAB fields");
    }
    try {
      out.push_back(parse_trajectory(std::string_view(line).substr(a + 1, b - a - 1), &vocab));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace intrus
