#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "intrus/vocab.hpp"

namespace intrus {

enum class TaskKind { Copy, Reverse, Sort, MapShuffle, Branching };

TaskKind parse_task_kind(const std::string& name);
std::string to_string(TaskKind kind);

// A synthetic seq2seq task. `content_tokens` is the number of non-reserved
// content symbols; `min_len`/`max_len` bound the source length.
struct TaskSpec {
  TaskKind kind = TaskKind::Copy;
  int content_tokens = 20;
  int min_len = 1;
  int max_len = 10;
  std::uint64_t seed = 1;
};

struct Example {
  TokenSeq src;
  TokenSeq tgt;
};

Vocab make_task_vocab(const TaskSpec& spec);

// Pair number `index` of the task stream; a pure function of (spec, index).
Example generate_example(const TaskSpec& spec, const Vocab& vocab, std::uint64_t index);
std::vector<Example> generate(const TaskSpec& spec, const Vocab& vocab, std::size_t n,
                              std::uint64_t first_index = 0);

// Branching layout of content tokens: source token 0 is the head, then tokens
// alternate right/left of it. Returns source indices in target order.
std::vector<std::size_t> branching_order(std::size_t n);

// Fraction of consecutive aligned content tokens whose source indices increase.
double monotone_fraction(const std::vector<std::size_t>& aligned_source_indices);

// TSV: source tokens TAB target tokens, space-separated, one pair per line.
void write_tsv(const std::string& path, const std::vector<Example>& pairs, const Vocab& vocab);
std::vector<Example> read_tsv(const std::string& path, const Vocab& vocab);

}  // namespace intrus
