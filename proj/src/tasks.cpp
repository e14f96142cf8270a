#include "intrus/tasks.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <stdexcept>

#include "intrus/rng.hpp"

namespace intrus {
namespace {

constexpr const char* kLeftSep = "<";
constexpr const char* kRightSep = ">";
constexpr const char* kOpen = "(";
constexpr const char* kClose = ")";

// Seeded bijection over content ids, shared by every map_shuffle example.
std::vector<Token> content_bijection(const TaskSpec& spec) {
  std::vector<Token> perm(static_cast<std::size_t>(spec.content_tokens));
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<Token>(i);
  Rng rng = Rng::derive({spec.seed, 0xb1ec7ULL});
  rng.shuffle(perm);
  return perm;
}

}  // namespace

TaskKind parse_task_kind(const std::string& name) {
  if (name == "copy") return TaskKind::Copy;
  if (name == "reverse") return TaskKind::Reverse;
  if (name == "sort") return TaskKind::Sort;
  if (name == "map_shuffle") return TaskKind::MapShuffle;
  if (name == "branching") return TaskKind::Branching;
  throw std::invalid_argument("unknown task '" + name +
                              "' (expected copy, reverse, sort, map_shuffle, branching)");
}

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Copy:
      return "copy";
    case TaskKind::Reverse:
      return "reverse";
    case TaskKind::Sort:
      return "sort";
    case TaskKind::MapShuffle:
      return "map_shuffle";
    case TaskKind::Branching:
      return "branching";
  }
  return "?";
}

Vocab make_task_vocab(const TaskSpec& spec) {
  if (spec.content_tokens < 1) throw std::invalid_argument("content_tokens must be >= 1");
  Vocab v;
  if (spec.kind == TaskKind::Branching) {
    for (int i = 0; i < spec.content_tokens; ++i) v.add("w" + std::to_string(i), "content");
    v.add(kOpen, "function");
    v.add(kClose, "function");
    v.add(kLeftSep, "function");
    v.add(kRightSep, "function");
  } else {
    for (int i = 0; i < spec.content_tokens; ++i) v.add(std::to_string(i), "content");
  }
  return v;
}

std::vector<std::size_t> branching_order(std::size_t n) {
  std::deque<std::size_t> order;
  for (std::size_t i = 0; i < n; ++i) {
    if (i == 0 || i % 2 == 1) {
      order.push_back(i);
    } else {
      order.push_front(i);
    }
  }
  return {order.begin(), order.end()};
}

double monotone_fraction(const std::vector<std::size_t>& aligned) {
  if (aligned.size() < 2) return 1.0;
  std::size_t up = 0;
  for (std::size_t i = 1; i < aligned.size(); ++i) up += aligned[i] > aligned[i - 1];
  return static_cast<double>(up) / static_cast<double>(aligned.size() - 1);
}

Example generate_example(const TaskSpec& spec, const Vocab& vocab, std::uint64_t index) {
  if (spec.min_len < 1 || spec.max_len < spec.min_len) {
    throw std::invalid_argument("invalid task length range");
  }
  Rng rng = Rng::derive({spec.seed, index, static_cast<std::uint64_t>(spec.kind)});
  const auto span = static_cast<std::uint64_t>(spec.max_len - spec.min_len + 1);
  const std::size_t len = static_cast<std::size_t>(spec.min_len) + rng.uniform_int(span);
  const Token first = reserved::kCount;
  Example ex;
  ex.src.resize(len);
  for (auto& t : ex.src) {
    t = first +
        static_cast<Token>(rng.uniform_int(static_cast<std::uint64_t>(spec.content_tokens)));
  }
  switch (spec.kind) {
    case TaskKind::Copy:
      ex.tgt = ex.src;
      break;
    case TaskKind::Reverse:
      ex.tgt.assign(ex.src.rbegin(), ex.src.rend());
      break;
    case TaskKind::Sort:
      ex.tgt = ex.src;
      std::sort(ex.tgt.begin(), ex.tgt.end());
      break;
    case TaskKind::MapShuffle: {
      const auto perm = content_bijection(spec);
      ex.tgt.reserve(len);
      for (Token t : ex.src) ex.tgt.push_back(first + perm[static_cast<std::size_t>(t - first)]);
      for (std::size_t i = 0; i + 1 < len; i += 2) std::swap(ex.tgt[i], ex.tgt[i + 1]);
      break;
    }
    case TaskKind::Branching: {
      const Token open = vocab.id(kOpen), close = vocab.id(kClose);
      const Token left = vocab.id(kLeftSep), right = vocab.id(kRightSep);
      const auto order = branching_order(len);
      const auto head_at = static_cast<std::size_t>(
          std::find(order.begin(), order.end(), std::size_t{0}) - order.begin());
      ex.tgt.push_back(open);
      for (std::size_t i = 0; i < order.size(); ++i) {
        if (i > 0) ex.tgt.push_back(i <= head_at ? left : right);
        ex.tgt.push_back(ex.src[order[i]]);
      }
      ex.tgt.push_back(close);
      break;
    }
  }
  return ex;
}

std::vector<Example> generate(const TaskSpec& spec, const Vocab& vocab, std::size_t n,
                              std::uint64_t first_index) {
  if (n < 1) throw std::invalid_argument("generate: n must be >= 1");
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_example(spec, vocab, first_index + i));
  return out;
}

void write_tsv(const std::string& path, const std::vector<Example>& pairs, const Vocab& vocab) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset: " + path);
  for (const auto& ex : pairs) out << vocab.join(ex.src) << '\t' << vocab.join(ex.tgt) << '\n';
}

std::vector<Example> read_tsv(const std::string& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read dataset: " + path);
  std::vector<Example> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string where = path + ":" + std::to_string(lineno) + ": ";
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw std::runtime_error(where + "expected exactly one TAB separating source and target");
    }
    Example ex;
    try {
      ex.src = vocab.parse(std::string_view(line).substr(0, tab));
      ex.tgt = vocab.parse(std::string_view(line).substr(tab + 1));
    } catch (const VocabError& e) {
      throw std::runtime_error(where + e.what());
    }
    if (ex.tgt.empty()) throw std::runtime_error(where + "empty target");
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace intrus
