#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "intrus/trajectory.hpp"
#include "intrus/vocab.hpp"

namespace intrus {

struct RelativeIndex {
  Token token;
  double index;  // rank / (insertions - 1); 0 when there is a single insertion
};

// Relative generation index of every inserted token; the Eos step is not counted.
std::vector<RelativeIndex> relative_indices(const Trajectory& traj);

inline constexpr int kOrderBins = 10;

struct ClassOrderStats {
  std::array<std::size_t, kOrderBins> histogram{};
  std::size_t count = 0;
  double mean = 0.0;
};

using OrderStats = std::map<std::string, ClassOrderStats>;

// Per-class histogram (bins of width 0.1, last bin closed) and mean of the
// relative index. Throws VocabError for tokens outside the vocab.
OrderStats relative_order_stats(const std::vector<Trajectory>& trajectories, const Vocab& vocab);

// CSV with header class,bin,count; `bin` is the lower edge of the bin.
std::string order_stats_csv(const OrderStats& stats);

// "l2r" when every insertion appends, "r2l" when every insertion prepends,
// "mixed" otherwise. Zero or one insertion counts as "l2r".
std::string direction_label(const Trajectory& traj);
std::map<std::string, std::size_t> order_direction_profile(
    const std::vector<Trajectory>& trajectories);

// Trajectory column of a decode file.
std::vector<Trajectory> read_decode_trajectories(const std::string& path, const Vocab& vocab);

}  // namespace intrus
