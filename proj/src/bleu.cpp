#include "intrus/bleu.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace intrus {
namespace {

std::map<TokenSeq, int> ngram_counts(const TokenSeq& s, std::size_t n) {
  std::map<TokenSeq, int> counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    ++counts[TokenSeq(s.begin() + static_cast<std::ptrdiff_t>(i),
                      s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

void check_counts(const std::vector<TokenSeq>& a, const std::vector<TokenSeq>& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("candidate/reference count mismatch: " + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()));
  }
}

}  // namespace

double corpus_bleu(const std::vector<TokenSeq>& candidates, const std::vector<TokenSeq>& references,
                   int max_n) {
  check_counts(candidates, references);
  if (max_n < 1) throw std::invalid_argument("max_n must be >= 1");
  std::vector<double> matches(static_cast<std::size_t>(max_n), 0.0);
  std::vector<double> totals(static_cast<std::size_t>(max_n), 0.0);
  double cand_len = 0, ref_len = 0;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    cand_len += static_cast<double>(candidates[s].size());
    ref_len += static_cast<double>(references[s].size());
    for (int n = 1; n <= max_n; ++n) {
      const auto cand = ngram_counts(candidates[s], static_cast<std::size_t>(n));
      const auto ref = ngram_counts(references[s], static_cast<std::size_t>(n));
      for (const auto& [gram, c] : cand) {
        totals[static_cast<std::size_t>(n - 1)] += c;
        auto it = ref.find(gram);
        if (it != ref.end()) matches[static_cast<std::size_t>(n - 1)] += std::min(c, it->second);
      }
    }
  }
  if (matches[0] == 0.0) return 0.0;
  double log_p = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    const auto i = static_cast<std::size_t>(n - 1);
    const double p =
        (n > 1 && matches[i] == 0.0) ? 1.0 / (totals[i] + 1.0) : matches[i] / totals[i];
    log_p += std::log(p) / max_n;
  }
  const double bp = cand_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return 100.0 * bp * std::exp(log_p);
}

double sequence_accuracy(const std::vector<TokenSeq>& candidates,
                         const std::vector<TokenSeq>& references) {
  check_counts(candidates, references);
  if (candidates.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) hit += candidates[i] == references[i];
  return static_cast<double>(hit) / static_cast<double>(candidates.size());
}

}  // namespace intrus
