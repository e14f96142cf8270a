#pragma once

#include <string>
#include <vector>

#include "intrus/model.hpp"
#include "intrus/tasks.hpp"

namespace intrus {

enum class LengthNorm { Off, BySteps };

LengthNorm parse_length_norm(const std::string& name);

struct DecodeOptions {
  int beam = 4;
  int max_steps = 0;  // 0 selects 2 * max_len
  LengthNorm length_norm = LengthNorm::BySteps;
  // When >= 0 the output length is forced: termination is disallowed before
  // and further insertion after this many tokens. Used for timing runs.
  int exact_length = -1;
};

struct Hypothesis {
  TokenSeq partial;
  Trajectory trajectory;
  double logp = 0.0;
  int steps = 0;  // insertions made
  bool finished = false;
  int finished_round = -1;
};

struct DecodeResult {
  TokenSeq output;
  Trajectory trajectory;
  double score = 0.0;  // logp after length normalization
  double logp = 0.0;
  bool truncated = false;
  std::vector<Hypothesis> finished;  // every hypothesis that terminated
};

double normalized_score(double logp, int steps, LengthNorm norm);

// Beam search over insertion events (insertion models) or next tokens
// (left-to-right models). Finished hypotheses compete on normalized score.
DecodeResult beam_decode(const Model& model, const TokenSeq& src, const DecodeOptions& options);
DecodeResult greedy_decode(const Model& model, const TokenSeq& src, int max_steps = 0,
                           LengthNorm norm = LengthNorm::BySteps);

// Decodes every source; parallel over `workers` threads with ordered output.
std::vector<DecodeResult> decode_all(const Model& model, const std::vector<TokenSeq>& sources,
                                     const DecodeOptions& options, int workers = 1);

// Inputs for which two or more finished hypotheses share an output sequence.
std::size_t count_duplicate_outputs(const std::vector<DecodeResult>& results);

// Decode output line: output tokens TAB trajectory TAB score.
std::string format_decode_line(const DecodeResult& r, const Vocab& vocab);

struct TimingRow {
  int length_bin = 0;
  std::string model;
  double mean_ms = 0.0;
  int n = 0;
};

struct BenchReport {
  std::vector<TimingRow> rows;
  double insertion_slope = 0.0;  // log-log slope of mean time vs length
  double baseline_slope = 0.0;
  double slope_ci = 0.0;       // 95% half-width of the slope difference
  double mean_slowdown = 0.0;  // mean over lengths of insertion / baseline time
};

// Wall-clock decode time per output length for both models; outputs are
// forced to the reference length so every length bin is populated.
BenchReport bench_decode(const Model& insertion, const Model& baseline,
                         const std::vector<Example>& data, int beam, int repeats = 1);
std::string bench_csv(const BenchReport& report);

// Least-squares slope of log(y) against log(x).
struct SlopeFit {
  double slope = 0.0;
  double std_error = 0.0;
};
SlopeFit loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace intrus
