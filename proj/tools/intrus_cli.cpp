// intrus: data generation, training, decoding, evaluation, order analysis,
// timing and oracle verification from one binary.
//
// Exit codes: 0 success, 1 usage or runtime error, 2 verification failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "CLI11.hpp"
#include "intrus/analysis.hpp"
#include "intrus/bleu.hpp"
#include "intrus/inference.hpp"
#include "intrus/tasks.hpp"
#include "intrus/training.hpp"
#include "intrus/verify.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace intrus;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

ordered_json preset(const std::string& name) {
  TrainConfig t;
  ModelConfig m;
  if (name == "desk") {
    t = TrainConfig::desk();
    m = ModelConfig::desk(0);
  } else if (name == "transformer-base") {
    t = TrainConfig::transformer_base();
    m = ModelConfig::transformer_base(0);
  } else {
    throw UsageError("unknown preset '" + name + "' (valid: desk, transformer-base)");
  }
  ordered_json j;
  j["mode"] = to_string(t.mode);
  j["seed"] = t.seed;
  j["pretrain-steps"] = t.pretrain_steps;
  j["total-steps"] = t.total_steps;
  j["base-lr"] = t.base_lr;
  j["warmup-steps"] = t.warmup_steps;
  j["batch-tokens"] = t.batch_tokens;
  j["beam-for-argmax"] = t.beam_for_argmax;
  j["clip-norm"] = t.clip_norm;
  j["eval-every"] = t.eval_every;
  j["val-beam"] = t.val_beam;
  j["max-val-examples"] = t.max_val_examples;
  j["checkpoint-every"] = t.checkpoint_every;
  j["target-val-accuracy"] = t.target_val_accuracy;
  j["model-dim"] = m.model_dim;
  j["num-heads"] = m.num_heads;
  j["encoder-layers"] = m.num_encoder_layers;
  j["decoder-layers"] = m.num_decoder_layers;
  j["ffn-dim"] = m.ffn_dim;
  j["max-len"] = m.max_len;
  j["dropout"] = m.dropout;
  return j;
}

// Sets key from text, keeping the type of the preset value.
void assign(ordered_json& cfg, const std::string& key, const ordered_json& value) {
  if (!cfg.contains(key)) throw UsageError("unknown config key '" + key + "'");
  ordered_json& slot = cfg[key];
  if (value.is_string() && !slot.is_string()) {
    const std::string s = value.get<std::string>();
    try {
      if (slot.is_number_float()) {
        slot = std::stod(s);
      } else {
        slot = std::stoll(s);
      }
    } catch (const std::exception&) {
      throw UsageError("config key '" + key + "' expects a number, got '" + s + "'");
    }
  } else if (slot.is_string() != value.is_string()) {
    throw UsageError("config key '" + key + "' has the wrong type");
  } else {
    slot = value;
  }
}

TrainConfig train_config(const ordered_json& j) {
  TrainConfig t;
  t.mode = parse_train_mode(j["mode"].get<std::string>());
  t.seed = j["seed"].get<std::uint64_t>();
  t.pretrain_steps = j["pretrain-steps"].get<int>();
  t.total_steps = j["total-steps"].get<int>();
  t.base_lr = j["base-lr"].get<double>();
  t.warmup_steps = j["warmup-steps"].get<int>();
  t.batch_tokens = j["batch-tokens"].get<int>();
  t.beam_for_argmax = j["beam-for-argmax"].get<int>();
  t.clip_norm = j["clip-norm"].get<double>();
  t.eval_every = j["eval-every"].get<int>();
  t.val_beam = j["val-beam"].get<int>();
  t.max_val_examples = j["max-val-examples"].get<int>();
  t.checkpoint_every = j["checkpoint-every"].get<int>();
  t.target_val_accuracy = j["target-val-accuracy"].get<double>();
  t.validate();
  return t;
}

ModelConfig model_config(const ordered_json& j, int vocab_size) {
  ModelConfig m;
  m.vocab_size = vocab_size;
  m.model_dim = j["model-dim"].get<int>();
  m.num_heads = j["num-heads"].get<int>();
  m.num_encoder_layers = j["encoder-layers"].get<int>();
  m.num_decoder_layers = j["decoder-layers"].get<int>();
  m.ffn_dim = j["ffn-dim"].get<int>();
  m.max_len = j["max-len"].get<int>();
  m.dropout = j["dropout"].get<double>();
  m.validate();
  return m;
}

std::vector<std::string> field_lines(const std::string& path, int field) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    std::size_t start = 0;
    for (int f = 0; f < field; ++f) {
      const auto tab = line.find('\t', start);
      if (tab == std::string::npos) {
        start = std::string::npos;
        break;
      }
      start = tab + 1;
    }
    if (start == std::string::npos) {
      out.push_back(field == 1 ? line : std::string());
      continue;
    }
    const auto end = line.find('\t', start);
    out.push_back(line.substr(start, end == std::string::npos ? std::string::npos : end - start));
  }
  return out;
}

std::vector<TokenSeq> intern(const std::vector<std::string>& lines,
                             std::unordered_map<std::string, Token>& table) {
  std::vector<TokenSeq> out;
  for (const auto& line : lines) {
    TokenSeq seq;
    for (auto w : split_whitespace(line)) {
      auto [it, fresh] = table.emplace(std::string(w), static_cast<Token>(table.size()));
      seq.push_back(it->second);
    }
    out.push_back(std::move(seq));
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string vocab_for(const std::string& explicit_path, const std::string& data_path) {
  if (!explicit_path.empty()) return explicit_path;
  return (fs::path(data_path).parent_path() / "vocab.txt").string();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Insertion-based sequence generation toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Write train/valid TSV files and a vocabulary");
  std::string task = "copy", gen_out;
  std::size_t gen_n = 1000, gen_valid = 200;
  std::uint64_t gen_seed = 1;
  int content_tokens = 20, min_len = 1, max_len = 10, gen_workers = 1;
  gen->add_option("--task", task, "copy, reverse, sort, map_shuffle or branching");
  gen->add_option("--n", gen_n, "Training pairs");
  gen->add_option("--valid-n", gen_valid, "Validation pairs");
  gen->add_option("--seed", gen_seed);
  gen->add_option("--content-tokens", content_tokens);
  gen->add_option("--min-len", min_len);
  gen->add_option("--max-len", max_len);
  gen->add_option("--workers", gen_workers);
  gen->add_option("--out", gen_out, "Output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train an insertion or left-to-right model");
  std::string tr_data, tr_out, tr_config, tr_preset = "desk";
  tr->add_option("--data", tr_data, "Directory with train.tsv, valid.tsv, vocab.txt")->required();
  tr->add_option("--out", tr_out, "Output directory")->required();
  tr->add_option("--config", tr_config, "JSON file with flat keys named like the flags");
  tr->add_option("--preset", tr_preset, "desk or transformer-base");
  std::map<std::string, std::string> overrides;
  std::vector<std::pair<std::string, CLI::Option*>> override_opts;
  const ordered_json defaults = preset("desk");
  for (const auto& item : defaults.items()) {
    const std::string key = item.key();
    override_opts.emplace_back(key, tr->add_option("--" + key, overrides[key]));
  }

  // decode
  auto* dec = app.add_subcommand("decode", "Beam-decode the sources of a TSV file");
  std::string dec_ckpt, dec_data, dec_out, dec_vocab, dec_norm = "steps";
  int dec_beam = 4, dec_max_steps = 0, dec_workers = 1;
  dec->add_option("--ckpt", dec_ckpt)->required();
  dec->add_option("--data", dec_data, "TSV; only the source column is read")->required();
  dec->add_option("--vocab", dec_vocab, "Defaults to vocab.txt beside the data");
  dec->add_option("--beam", dec_beam);
  dec->add_option("--max-steps", dec_max_steps);
  dec->add_option("--length-norm", dec_norm, "off or steps");
  dec->add_option("--workers", dec_workers);
  dec->add_option("--out", dec_out)->required();

  // eval
  auto* ev = app.add_subcommand("eval", "Sequence accuracy and BLEU of a decode file");
  std::string ev_hyp, ev_ref;
  ev->add_option("--hyp", ev_hyp, "Decode file or one output per line")->required();
  ev->add_option("--ref", ev_ref, "TSV (target column) or one reference per line")->required();

  // analyze
  auto* an = app.add_subcommand("analyze", "Generation-order statistics of decoded trajectories");
  std::string an_decodes, an_vocab, an_out;
  an->add_option("--decodes", an_decodes)->required();
  an->add_option("--vocab", an_vocab)->required();
  an->add_option("--out", an_out, "Output directory")->required();

  // bench
  auto* be = app.add_subcommand("bench", "Decode time per output length for both models");
  std::string be_ins, be_base, be_data, be_vocab, be_out;
  int be_beam = 4, be_repeats = 1;
  be->add_option("--ckpt-intrus", be_ins)->required();
  be->add_option("--ckpt-baseline", be_base)->required();
  be->add_option("--data", be_data)->required();
  be->add_option("--vocab", be_vocab);
  be->add_option("--beam", be_beam);
  be->add_option("--repeats", be_repeats);
  be->add_option("--out", be_out, "CSV path; stdout when empty");

  // verify
  auto* ve = app.add_subcommand("verify", "Run oracle property suites");
  std::string suite = "oracles";
  std::uint64_t ve_seed = 1;
  ve->add_option("--suite", suite,
                 "gradients, enumeration, bounds, normalization, search, oracles");
  ve->add_option("--seed", ve_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      TaskSpec spec;
      spec.kind = parse_task_kind(task);
      spec.content_tokens = content_tokens;
      spec.min_len = min_len;
      spec.max_len = max_len;
      spec.seed = gen_seed;
      const Vocab vocab = make_task_vocab(spec);
      auto produce = [&](std::size_t n, std::uint64_t first) {
        std::vector<Example> out(n);
        const auto w = static_cast<std::size_t>(std::max(gen_workers, 1));
        std::vector<std::thread> threads;
        for (std::size_t t = 0; t < w; ++t) {
          threads.emplace_back([&, t] {
            for (std::size_t i = t; i < n; i += w)
              out[i] = generate_example(spec, vocab, first + i);
          });
        }
        for (auto& th : threads) th.join();
        return out;
      };
      fs::create_directories(gen_out);
      write_tsv((fs::path(gen_out) / "train.tsv").string(), produce(gen_n, 0), vocab);
      write_tsv((fs::path(gen_out) / "valid.tsv").string(), produce(gen_valid, gen_n), vocab);
      vocab.save((fs::path(gen_out) / "vocab.txt").string());
      return 0;
    }

    if (*tr) {
      ordered_json cfg = preset(tr_preset);
      if (!tr_config.empty()) {
        std::ifstream in(tr_config);
        if (!in) throw UsageError("cannot open config " + tr_config);
        ordered_json file;
        try {
          file = ordered_json::parse(in);
        } catch (const std::exception& e) {
          throw UsageError("malformed config " + tr_config + ": " + e.what());
        }
        for (const auto& [k, v] : file.items()) assign(cfg, k, v);
      }
      for (const auto& [key, opt] : override_opts) {
        if (opt->count() > 0) assign(cfg, key, ordered_json(overrides[key]));
      }
      TrainConfig tcfg;
      try {
        tcfg = train_config(cfg);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      const fs::path data(tr_data), out(tr_out);
      const Vocab vocab = Vocab::load((data / "vocab.txt").string());
      const auto train_set = read_tsv((data / "train.tsv").string(), vocab);
      const auto valid_set = fs::exists(data / "valid.tsv")
                                 ? read_tsv((data / "valid.tsv").string(), vocab)
                                 : std::vector<Example>{};
      const ModelConfig mcfg = model_config(cfg, vocab.size());
      fs::create_directories(out);
      write_text(out / "config.json", cfg.dump(2) + "\n");
      const ModelKind kind =
          tcfg.mode == TrainMode::BaselineL2R ? ModelKind::LeftToRight : ModelKind::Insertion;
      Model model(kind, mcfg, tcfg.seed);
      std::ofstream metrics(out / "metrics.jsonl", std::ios::binary);
      TrainOutputs outputs;
      outputs.metrics = &metrics;
      outputs.checkpoint_dir = out.string();
      const TrainResult r = train(model, train_set, valid_set, tcfg, outputs);
      std::printf("steps %d  val_accuracy %.4f  val_bleu %.2f\n", r.steps, r.val_accuracy,
                  r.val_bleu);
      return 0;
    }

    if (*dec) {
      const Model model = load_model(dec_ckpt);
      const Vocab vocab = Vocab::load(vocab_for(dec_vocab, dec_data));
      std::vector<TokenSeq> sources;
      for (const auto& ex : read_tsv(dec_data, vocab)) sources.push_back(ex.src);
      DecodeOptions opt;
      opt.beam = dec_beam;
      opt.max_steps = dec_max_steps;
      opt.length_norm = parse_length_norm(dec_norm);
      const auto results = decode_all(model, sources, opt, dec_workers);
      std::ostringstream os;
      for (const auto& r : results) os << format_decode_line(r, vocab) << '\n';
      write_text(dec_out, os.str());
      std::size_t truncated = 0;
      for (const auto& r : results) truncated += r.truncated ? 1 : 0;
      std::printf("decoded %zu  truncated %zu  duplicate-output inputs %zu\n", results.size(),
                  truncated, count_duplicate_outputs(results));
      return 0;
    }

    if (*ev) {
      std::unordered_map<std::string, Token> table;
      const auto hyps = intern(field_lines(ev_hyp, 0), table);
      auto ref_lines = field_lines(ev_ref, 1);
      const auto refs = intern(ref_lines, table);
      if (hyps.size() != refs.size()) {
        throw UsageError("hypothesis and reference line counts differ: " +
                         std::to_string(hyps.size()) + " vs " + std::to_string(refs.size()));
      }
      std::printf("accuracy %.4f\nbleu %.2f\n", sequence_accuracy(hyps, refs),
                  corpus_bleu(hyps, refs));
      return 0;
    }

    if (*an) {
      const Vocab vocab = Vocab::load(an_vocab);
      const auto trajs = read_decode_trajectories(an_decodes, vocab);
      const OrderStats stats = relative_order_stats(trajs, vocab);
      fs::create_directories(an_out);
      write_text(fs::path(an_out) / "order_stats.csv", order_stats_csv(stats));
      std::ostringstream dirs;
      dirs << "direction,count\n";
      for (const auto& [label, n] : order_direction_profile(trajs))
        dirs << label << ',' << n << '\n';
      write_text(fs::path(an_out) / "directions.csv", dirs.str());
      for (const auto& [cls, s] : stats) {
        std::printf("%s mean_relative_index %.4f tokens %zu\n", cls.c_str(), s.mean, s.count);
      }
      return 0;
    }

    if (*be) {
      const Model ins = load_model(be_ins);
      const Model base = load_model(be_base);
      if (ins.kind() != ModelKind::Insertion || base.kind() != ModelKind::LeftToRight) {
        throw UsageError("bench needs an insertion checkpoint and a left-to-right checkpoint");
      }
      const Vocab vocab = Vocab::load(vocab_for(be_vocab, be_data));
      const BenchReport rep =
          bench_decode(ins, base, read_tsv(be_data, vocab), be_beam, be_repeats);
      const std::string csv = bench_csv(rep);
      if (be_out.empty()) {
        std::cout << csv;
      } else {
        write_text(be_out, csv);
      }
      std::fprintf(
          stderr,
          "slope insertion %.3f baseline %.3f difference %.3f +- %.3f  mean slowdown %.2fx\n",
          rep.insertion_slope, rep.baseline_slope, rep.insertion_slope - rep.baseline_slope,
          rep.slope_ci, rep.mean_slowdown);
      return 0;
    }

    if (*ve) {
      std::vector<CheckResult> results;
      try {
        results = run_suite(suite, ve_seed);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      bool ok = true;
      for (const auto& r : results) {
        std::printf("%s  %-26s %s  (%.1fs)\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                    r.detail.c_str(), r.seconds);
        ok = ok && r.passed;
      }
      return ok ? 0 : 2;
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
