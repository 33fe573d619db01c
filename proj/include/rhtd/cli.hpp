#pragma once

// Command-line driver: extract-lexicon, preprocess, train, generate, evaluate.
// Exit codes: 0 ok, 1 usage or configuration error, 2 data or format error,
// 3 incompatible checkpoint.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rhtd/corpus.hpp"
#include "rhtd/errors.hpp"
#include "rhtd/eval.hpp"
#include "rhtd/lexicon.hpp"
#include "rhtd/log.hpp"
#include "rhtd/model.hpp"
#include "rhtd/training.hpp"
#include "rhtd/typed_decoders.hpp"

namespace rhtd {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitIncompatible = 3 };

namespace cli_detail {

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T v{};
  in >> v;
  if (!in || !in.eof() || value.empty() || (std::is_unsigned_v<T> && value.front() == '-')) {
    throw ConfigError("bad value '" + value + "' for " + key);
  }
  return v;
}

// Keys accepted by the train config file; on the command line each is a flag
// with '_' spelled '-'.
struct TrainKey {
  std::string key;
  std::string help;
};

inline const std::vector<TrainKey>& train_keys() {
  static const std::vector<TrainKey> keys = {
      {"mode", "seq2seq, pgnet, std, htd or rhtd"},
      {"emb_size", "Word embedding size"},
      {"hidden_size", "LSTM hidden size"},
      {"lstm_layers", "LSTM layers (only 1 is supported)"},
      {"lr", "Adagrad learning rate"},
      {"lambda", "Type loss weight (htd)"},
      {"tau", "Gumbel-Softmax temperature (htd)"},
      {"clip", "Global gradient norm limit"},
      {"epochs", "Training epochs"},
      {"batch_size", "Examples per update"},
      {"seed", "Random seed"},
      {"max_len", "Decode length for ROUGE model selection"},
      {"select_by", "Checkpoint selection: loss or rouge"},
      {"embeddings", "Pretrained vectors (word v1 v2 ...), frozen except <unk>"}};
  return keys;
}

inline std::string flag_name(const std::string& key) {
  std::string flag = "--" + key;
  for (char& c : flag) c = c == '_' ? '-' : c;
  return flag;
}

inline void set_train_key(TrainConfig& c, const std::string& key, const std::string& v) {
  if (key == "mode") c.mode = parse_mode(v);
  else if (key == "emb_size") c.emb_size = parse_number<std::size_t>(key, v);
  else if (key == "hidden_size") c.hidden_size = parse_number<std::size_t>(key, v);
  else if (key == "lstm_layers") c.lstm_layers = parse_number<std::size_t>(key, v);
  else if (key == "lr") c.lr = parse_number<double>(key, v);
  else if (key == "lambda") c.lambda = parse_number<double>(key, v);
  else if (key == "tau") c.tau = parse_number<double>(key, v);
  else if (key == "clip") c.clip = parse_number<double>(key, v);
  else if (key == "epochs") c.epochs = parse_number<std::size_t>(key, v);
  else if (key == "batch_size") c.batch_size = parse_number<std::size_t>(key, v);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "max_len") c.max_len = parse_number<std::size_t>(key, v);
  else if (key == "embeddings") c.embeddings = v;
  else if (key == "select_by") {
    if (v != "loss" && v != "rouge") throw ConfigError("select_by must be loss or rouge, got '" + v + "'");
    c.select_by_rouge = v == "rouge";
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

// Flat key=value lines; '#' starts a comment line.
inline std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::vector<std::pair<std::string, std::string>> entries;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return std::string();
    return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
    entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return entries;
}

inline std::string path_join(const std::string& dir, const std::string& file) {
  return (std::filesystem::path(dir) / file).string();
}

inline std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  return out;
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"Aspect/opinion-aware review summarization with typed decoders", "rhtd"};
  app.require_subcommand(1);

  // extract-lexicon
  std::string parses, seeds, lexicon_out;
  auto* ex = app.add_subcommand("extract-lexicon", "Mine aspect/opinion words from dependency parses");
  ex->add_option("--parses", parses, "Dependency-parsed corpus (5 tab-separated columns)")->required();
  ex->add_option("--seed-opinions", seeds, "Seed opinion words, one per line")->required();
  ex->add_option("--out", lexicon_out, "Output lexicon (word<TAB>A|O)")->required();

  // preprocess
  std::string pairs_path, out_dir;
  LengthFilter bounds;
  std::size_t vocab_size = 50000;
  std::uint64_t split_seed = 1;
  auto* pre = app.add_subcommand("preprocess", "Filter, split, build the vocabulary and encode review/summary pairs");
  pre->add_option("--pairs", pairs_path, "JSONL with review and summary fields")->required();
  pre->add_option("--out-dir", out_dir, "Output directory")->required();
  pre->add_option("--min-src", bounds.min_src, "Minimum review length in tokens")->capture_default_str();
  pre->add_option("--max-src", bounds.max_src, "Maximum review length in tokens")->capture_default_str();
  pre->add_option("--min-tgt", bounds.min_tgt, "Minimum summary length in tokens")->capture_default_str();
  pre->add_option("--max-tgt", bounds.max_tgt, "Maximum summary length in tokens")->capture_default_str();
  pre->add_option("--vocab-size", vocab_size, "Vocabulary size including 4 reserved tokens")->capture_default_str();
  pre->add_option("--seed", split_seed, "Split seed")->capture_default_str();

  // train
  std::string data_dir, train_lexicon, ckpt_out, init_from, config_path, log_path;
  std::map<std::string, std::string> train_flags;
  auto* tr = app.add_subcommand("train", "Train a summarizer");
  tr->add_option("--data", data_dir, "Directory written by preprocess")->required();
  tr->add_option("--lexicon", train_lexicon, "Lexicon file (required for std, htd, rhtd)");
  tr->add_option("--out", ckpt_out, "Output checkpoint (best dev epoch)")->required();
  tr->add_option("--init-from", init_from, "Checkpoint to start from (a trained htd model for rhtd)");
  tr->add_option("--config", config_path, "key=value config file; flags take precedence");
  tr->add_option("--log", log_path, "Per-epoch training log (TSV)");
  TrainConfig defaults;
  const auto default_kv = defaults.to_kv();
  for (const auto& [key, help] : train_keys()) {
    auto* opt = tr->add_option(flag_name(key), train_flags[key], help);
    opt->type_name(key == "mode" || key == "select_by" || key == "embeddings" ? "TEXT" : "NUM");
    if (default_kv.count(key)) opt->default_str(default_kv.at(key));
  }

  // generate
  std::string gen_ckpt, gen_input, gen_out;
  std::size_t gen_max_len = 30;
  auto* gen = app.add_subcommand("generate", "Greedy-decode summaries for reviews");
  gen->add_option("--ckpt", gen_ckpt, "Trained checkpoint")->required();
  gen->add_option("--input", gen_input, "JSONL with a review field")->required();
  gen->add_option("--out", gen_out, "Output summaries, one per line")->required();
  gen->add_option("--max-len", gen_max_len, "Maximum summary length")->capture_default_str();

  // evaluate
  std::string cand_path, ref_path, report_path;
  auto* ev = app.add_subcommand("evaluate", "ROUGE-1/2/L of candidate summaries");
  ev->add_option("--candidates", cand_path, "Candidate summaries, one per line")->required();
  ev->add_option("--references", ref_path, "Reference summaries, one per line")->required();
  ev->add_option("--out", report_path, "Also write the report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, e2;
    const int code = app.exit(e, o, e2);
    out << o.str();
    err << e2.str();
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*ex) {
      const auto corpus = load_parsed_corpus(parses);
      const auto result = run_double_propagation(corpus, load_seed_opinions(seeds));
      save_lexicon(lexicon_out, result.lexicon);
      log_info("lexicon: " + std::to_string(result.lexicon.aspects.size()) + " aspects, " +
               std::to_string(result.lexicon.opinions.size()) + " opinions after " + std::to_string(result.passes) +
               " passes");
    } else if (*pre) {
      const auto all = load_pairs(pairs_path);
      const auto kept = filter_pairs(all, bounds);
      const auto split = split_dataset(kept, split_seed);
      const Vocabulary vocab = build_vocab(split.train, vocab_size);
      std::filesystem::create_directories(out_dir);
      save_vocab(path_join(out_dir, "vocab.txt"), vocab);
      const std::pair<const char*, const std::vector<ReviewPair>*> parts[] = {
          {"train", &split.train}, {"dev", &split.dev}, {"test", &split.test}};
      for (const auto& [name, data] : parts) {
        std::vector<EncodedPair> enc;
        for (const auto& p : *data) enc.push_back(encode_pair(p, vocab));
        auto ids = open_output(path_join(out_dir, std::string(name) + ".ids"));
        write_encoded(ids, enc);
        auto jsonl = open_output(path_join(out_dir, std::string(name) + ".jsonl"));
        write_pairs(jsonl, *data);
        auto refs = open_output(path_join(out_dir, std::string(name) + ".summary.txt"));
        for (const auto& p : *data) refs << join(p.summary) << '\n';
      }
      log_info("kept " + std::to_string(kept.size()) + " of " + std::to_string(all.size()) + " pairs; vocabulary " +
               std::to_string(vocab.size()));
    } else if (*tr) {
      TrainConfig cfg;
      if (!config_path.empty()) {
        for (const auto& [k, v] : read_config_file(config_path)) set_train_key(cfg, k, v);
      }
      for (const auto& [key, help] : train_keys()) {
        if (tr->count(flag_name(key))) set_train_key(cfg, key, train_flags[key]);
      }
      cfg.init_from = init_from;
      cfg.validate();
      if (cfg.mode == Mode::RHTD && init_from.empty()) {
        throw ConfigError("rhtd training requires --init-from with a trained htd checkpoint");
      }
      if (is_typed(cfg.mode) && train_lexicon.empty()) {
        throw ConfigError(std::string(mode_name(cfg.mode)) + " training requires --lexicon");
      }
      TrainData data;
      data.vocab = load_vocab(path_join(data_dir, "vocab.txt"));
      data.train = load_encoded(path_join(data_dir, "train.ids"), data.vocab);
      data.dev = load_encoded(path_join(data_dir, "dev.ids"), data.vocab);
      if (!train_lexicon.empty()) data.lexicon = load_lexicon(train_lexicon);
      std::optional<Checkpoint> init;
      if (!init_from.empty()) init = load_checkpoint(init_from);
      const TrainResult result = train(data, cfg, init ? &*init : nullptr);
      save_checkpoint(ckpt_out, result.best);
      if (!log_path.empty()) {
        auto log = open_output(log_path);
        write_train_log(log, result.log);
      }
    } else if (*gen) {
      const LoadedModel model = load_model(load_checkpoint(gen_ckpt));
      auto in = detail::open_input(gen_input);
      const auto reviews = parse_pairs(in, false);
      auto o = open_output(gen_out);
      for (const auto& r : reviews) {
        o << join(greedy_decode(r.review, model.vocab, model.params, model.mode, gen_max_len,
                                model.types ? &*model.types : nullptr))
          << '\n';
      }
    } else if (*ev) {
      const RougeReport report = corpus_rouge(load_summaries(cand_path), load_summaries(ref_path));
      write_report(out, report);
      if (!report_path.empty()) {
        auto o = open_output(report_path);
        write_report(o, report);
      }
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IncompatibleError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIncompatible;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitOk;
}

}  // namespace rhtd
