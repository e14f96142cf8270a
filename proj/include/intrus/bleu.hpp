#pragma once

#include <vector>

#include "intrus/vocab.hpp"

namespace intrus {

// Corpus-level BLEU in [0, 100]: geometric mean of clipped n-gram precisions
// times the brevity penalty. Orders above 1 with zero matches use add-one
// smoothing, (0 + 1) / (count + 1); zero unigram matches give 0.
double corpus_bleu(const std::vector<TokenSeq>& candidates, const std::vector<TokenSeq>& references,
                   int max_n = 4);

double sequence_accuracy(const std::vector<TokenSeq>& candidates,
                         const std::vector<TokenSeq>& references);

}  // namespace intrus
