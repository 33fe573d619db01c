#pragma once

// Adagrad training loops for all five decoder variants, HTD -> RHTD
// initialization, and binary checkpoints.

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rhtd/corpus.hpp"
#include "rhtd/errors.hpp"
#include "rhtd/eval.hpp"
#include "rhtd/lexicon.hpp"
#include "rhtd/log.hpp"
#include "rhtd/model.hpp"
#include "rhtd/numerics.hpp"
#include "rhtd/random.hpp"
#include "rhtd/typed_decoders.hpp"

namespace rhtd {

inline constexpr double kAdagradEpsilon = 1e-10;

struct TrainConfig {
  Mode mode = Mode::PGNet;
  std::size_t emb_size = 128;
  std::size_t hidden_size = 128;
  std::size_t lstm_layers = 1;
  double lr = 0.05;
  double lambda = 1.0;
  double tau = 1.0;
  double clip = 2.0;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
  std::size_t max_len = 30;      // greedy decode length for ROUGE selection
  bool select_by_rouge = false;  // default: best dev loss
  std::string embeddings;        // optional pretrained vectors
  std::string init_from;         // checkpoint path (required for rhtd)

  void validate() const {
    if (emb_size == 0 || hidden_size == 0 || batch_size == 0 || max_len == 0) {
      throw ConfigError("emb-size, hidden-size, batch-size and max-len must be positive");
    }
    if (lstm_layers != 1) throw ConfigError("only one LSTM layer is supported");
    if (!(lr > 0) || !(tau > 0) || !(clip > 0)) throw ConfigError("lr, tau and clip must be positive");
    if (!(lambda >= 0)) throw ConfigError("lambda must be nonnegative");
  }

  std::map<std::string, std::string> to_kv() const {
    auto num = [](double v) {
      char buf[32];
      const auto r = std::to_chars(buf, buf + sizeof buf, v);
      return std::string(buf, r.ptr);
    };
    return {{"mode", mode_name(mode)},
            {"emb_size", std::to_string(emb_size)},
            {"hidden_size", std::to_string(hidden_size)},
            {"lstm_layers", std::to_string(lstm_layers)},
            {"lr", num(lr)},
            {"lambda", num(lambda)},
            {"tau", num(tau)},
            {"clip", num(clip)},
            {"epochs", std::to_string(epochs)},
            {"batch_size", std::to_string(batch_size)},
            {"seed", std::to_string(seed)},
            {"max_len", std::to_string(max_len)},
            {"select_by", select_by_rouge ? "rouge" : "loss"}};
  }
};

// acc += g^2; theta -= lr g / sqrt(acc + eps)
inline void adagrad_step(ParameterSet& params, const GradientMap& grads, ParameterSet& accumulators, double lr) {
  for (const auto& [name, g] : grads) {
    Tensor& theta = params.at(name);
    if (!accumulators.contains(name)) accumulators.add(name, Tensor(theta.shape()));
    Tensor& acc = accumulators.at(name);
    if (theta.shape() != g.shape() || acc.shape() != g.shape()) {
      throw DimensionError("adagrad: parameter " + name + " " + shape_str(theta.shape()) + ", gradient " +
                           shape_str(g.shape()) + ", accumulator " + shape_str(acc.shape()));
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      acc[i] += g[i] * g[i];
      theta[i] -= lr * g[i] / std::sqrt(acc[i] + kAdagradEpsilon);
    }
  }
}

inline ParameterSet zero_accumulators(const ParameterSet& params) {
  ParameterSet acc;
  for (const auto& [name, t] : params) acc.add(name, Tensor(t.shape()));
  return acc;
}

// Rescales in place so the global L2 norm is at most `max_norm`. Returns the
// norm before clipping.
inline double clip_global_norm(GradientMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, g] : grads) {
    for (double v : g.values()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& [_, g] : grads) {
      for (double& v : g.values()) v *= f;
    }
  }
  return norm;
}

inline void accumulate(GradientMap& into, GradientMap&& g) {
  if (into.empty()) {
    into = std::move(g);
    return;
  }
  for (auto& [name, t] : g) {
    Tensor& dst = into.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) dst[i] += t[i];
  }
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "RHTD" | u32 version | u32 length + config text (key=value lines)
//   | u32 tensor count | per tensor: u32 name length, name, u32 rank,
//     rank x u64 dims, little-endian IEEE-754 doubles
// Parameters are stored under their own names, Adagrad accumulators under
// "adagrad/<name>".
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'R', 'H', 'T', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline const std::string kAccumulatorPrefix = "adagrad/";

struct Checkpoint {
  std::map<std::string, std::string> config;  // config echo, vocabulary, lexicon, epoch, rng state
  ParameterSet params;
  ParameterSet accumulators;

  const std::string& get(const std::string& key) const {
    auto it = config.find(key);
    if (it == config.end()) throw FormatError("checkpoint lacks config key '" + key + "'");
    return it->second;
  }
  Mode mode() const { return parse_mode(get("mode")); }
  std::size_t epoch() const { return config.count("epoch") ? std::stoull(config.at("epoch")) : 0; }
};

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& b) : buf_(b) {}
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw TruncationError("checkpoint is truncated at byte " + std::to_string(buf_.size()));
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() { return raw(u32()); }
  bool done() const { return pos_ == buf_.size(); }

 private:
  const std::string& buf_;
  std::size_t pos_ = 0;
};

inline void write_tensor(ByteWriter& w, const std::string& name, const Tensor& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u64(d);
  for (double v : t.values()) w.f64(v);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  std::string text;
  for (const auto& [k, v] : ck.config) {
    if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos || v.find('\n') != std::string::npos) {
      throw ConfigError("config entry '" + k + "' cannot be stored as key=value text");
    }
    text += k + "=" + v + "\n";
  }
  w.str(text);
  w.u32(static_cast<std::uint32_t>(ck.params.size() + ck.accumulators.size()));
  for (const auto& [name, t] : ck.params) detail::write_tensor(w, name, t);
  for (const auto& [name, t] : ck.accumulators) detail::write_tensor(w, kAccumulatorPrefix + name, t);
  return w.take();
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 4) throw TruncationError("checkpoint shorter than its magic header");
  if (r.raw(4) != std::string(kCheckpointMagic, 4)) throw FormatError("not a checkpoint (bad magic bytes)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
  }
  Checkpoint ck;
  std::istringstream text(r.str());
  std::string line;
  while (std::getline(text, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("bad config line in checkpoint: '" + line + "'");
    ck.config[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError("tensor '" + name + "' has invalid rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint64_t d = r.u64();
      if (d == 0 || d > (std::uint64_t{1} << 32)) throw FormatError("tensor '" + name + "' has invalid dimension");
      shape.push_back(static_cast<std::size_t>(d));
      n *= d;
    }
    r.need(static_cast<std::size_t>(n) * 8);
    std::vector<double> data(static_cast<std::size_t>(n));
    for (double& v : data) v = r.f64();
    Tensor t(shape, std::move(data));
    if (name.rfind(kAccumulatorPrefix, 0) == 0) {
      ck.accumulators.add(name.substr(kAccumulatorPrefix.size()), std::move(t));
    } else {
      ck.params.add(name, std::move(t));
    }
  }
  if (!r.done()) throw FormatError("trailing bytes after the last tensor");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  const std::string bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

// Everything needed to run a trained model, recovered from a checkpoint.
struct LoadedModel {
  Mode mode = Mode::PGNet;
  ParameterSet params;
  Vocabulary vocab;
  std::optional<TypeTable> types;
};

inline void store_vocab_and_lexicon(Checkpoint& ck, const Vocabulary& vocab, const std::optional<Lexicon>& lex) {
  ck.config["vocab"] = join(vocab.words());
  if (lex) {
    ck.config["aspects"] = join(Tokens(lex->aspects.begin(), lex->aspects.end()));
    ck.config["opinions"] = join(Tokens(lex->opinions.begin(), lex->opinions.end()));
  }
}

inline Vocabulary checkpoint_vocab(const Checkpoint& ck) { return Vocabulary::from_words(split_whitespace(ck.get("vocab"))); }

inline std::optional<Lexicon> checkpoint_lexicon(const Checkpoint& ck) {
  if (!ck.config.count("aspects") || !ck.config.count("opinions")) return std::nullopt;
  Lexicon lex;
  for (auto& w : split_whitespace(ck.config.at("aspects"))) lex.aspects.insert(w);
  for (auto& w : split_whitespace(ck.config.at("opinions"))) lex.opinions.insert(w);
  return lex;
}

inline LoadedModel load_model(const Checkpoint& ck) {
  LoadedModel m;
  m.mode = ck.mode();
  m.params = ck.params;
  m.vocab = checkpoint_vocab(ck);
  if (is_typed(m.mode)) {
    auto lex = checkpoint_lexicon(ck);
    if (!lex) throw FormatError("typed checkpoint lacks its lexicon");
    m.types = make_type_table(m.vocab, *lex);
  }
  return m;
}

// Copies every parameter of a trained HTD checkpoint; Adagrad restarts from zero.
inline ParameterSet init_rhtd_from_htd(const Checkpoint& htd, const TrainConfig& cfg, const Vocabulary& vocab) {
  std::vector<std::string> diffs;
  const std::string mode = htd.config.count("mode") ? htd.config.at("mode") : "?";
  if (mode != "htd") diffs.push_back("mode (checkpoint " + mode + ", expected htd)");
  auto cmp = [&](const char* key, std::size_t want) {
    const std::string have = htd.config.count(key) ? htd.config.at(key) : "?";
    if (have != std::to_string(want)) diffs.push_back(std::string(key) + " (checkpoint " + have + ", config " + std::to_string(want) + ")");
  };
  cmp("emb_size", cfg.emb_size);
  cmp("hidden_size", cfg.hidden_size);
  if (!htd.config.count("vocab")) {
    diffs.push_back("vocab (missing from checkpoint)");
  } else {
    const Tokens words = split_whitespace(htd.config.at("vocab"));
    if (words.size() != vocab.size()) {
      diffs.push_back("vocab size (checkpoint " + std::to_string(words.size()) + ", data " + std::to_string(vocab.size()) + ")");
    } else if (words != vocab.words()) {
      diffs.push_back("vocab contents");
    }
  }
  if (diffs.empty()) {
    ModelShape want{vocab.size(), cfg.emb_size, cfg.hidden_size, Mode::RHTD};
    Rng scratch(0);
    for (const auto& [name, t] : init_params(want, scratch)) {
      if (!htd.params.contains(name)) {
        diffs.push_back("parameter " + name + " (missing)");
      } else if (htd.params.at(name).shape() != t.shape()) {
        diffs.push_back("parameter " + name + " shape (checkpoint " + shape_str(htd.params.at(name).shape()) + ", expected " + shape_str(t.shape()) + ")");
      }
    }
  }
  if (!diffs.empty()) {
    std::string msg = "checkpoint is not compatible with rhtd training:";
    for (const auto& d : diffs) msg += "\n  " + d;
    throw IncompatibleError(msg);
  }
  return htd.params;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainData {
  Vocabulary vocab;
  std::vector<EncodedPair> train;
  std::vector<EncodedPair> dev;
  std::optional<Lexicon> lexicon;
};

struct EpochLog {
  std::size_t epoch = 0;
  Mode mode = Mode::PGNet;
  double train_loss = 0.0;  // mean per token; htd includes the lambda-weighted type term
  std::optional<double> dev_loss;
  std::optional<double> mean_reward;  // rhtd only
  std::optional<double> dev_rouge_l;
};

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  std::size_t best_epoch = 0;
  std::vector<EpochLog> log;
  std::size_t clamped = 0;  // reference words whose probability hit the 1e-12 floor
};

// Mean per-token NLL of the references under the inference-time distribution
// (argmax type masks, no noise).
inline double evaluate_loss(const ParameterSet& params, Mode mode, const std::vector<EncodedPair>& data,
                            const TypeTable* types) {
  if (data.empty()) throw InputError("evaluation over an empty dataset");
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : data) {
    Tape tape;
    Binding bind(tape, params);
    ExampleResult r = teacher_forced(bind, mode, ex, types, {});
    nll += r.word_nll;
    tokens += r.tokens;
  }
  return nll / static_cast<double>(tokens);
}

inline std::vector<Tokens> decode_dataset(const ParameterSet& params, Mode mode, const std::vector<EncodedPair>& data,
                                          const Vocabulary& vocab, const TypeTable* types, std::size_t max_len) {
  std::vector<Tokens> out;
  for (const auto& ex : data) {
    DecodeTrace t = greedy_decode_ids(params, mode, ex.source, ex.oov.size(), max_len, types, ex.oov);
    out.push_back(decode_ids(t.ids, vocab, ex.oov));
  }
  return out;
}

inline std::vector<Tokens> reference_summaries(const std::vector<EncodedPair>& data, const Vocabulary& vocab) {
  std::vector<Tokens> out;
  for (const auto& ex : data) out.push_back(decode_ids(ex.target, vocab, ex.oov));
  return out;
}

inline std::vector<std::size_t> frozen_rows_for(const std::vector<std::size_t>& pretrained) {
  std::vector<std::size_t> rows;
  for (std::size_t r : pretrained) {
    if (r != static_cast<std::size_t>(Vocabulary::kUnk)) rows.push_back(r);
  }
  return rows;
}

inline TrainResult train(const TrainData& data, const TrainConfig& cfg, const Checkpoint* init = nullptr) {
  cfg.validate();
  const Mode mode = cfg.mode;
  if (is_typed(mode) && !data.lexicon) throw ConfigError(std::string(mode_name(mode)) + " training needs a lexicon");
  if (mode == Mode::RHTD && !init) throw ConfigError("rhtd training must be initialized from a trained htd checkpoint");

  std::optional<TypeTable> types;
  if (is_typed(mode)) {
    types = make_type_table(data.vocab, *data.lexicon);
    const auto counts = type_counts(types->vocab);
    if (mode != Mode::STD) {
      for (std::size_t c = 0; c < kNumTypes; ++c) {
        if (counts[c] == 0) {
          throw ConfigError(std::string("lexicon leaves no ") + type_name(static_cast<WordType>(c)) +
                            " words in the vocabulary; hard typed decoding needs all three types");
        }
      }
    }
  }
  const TypeTable* type_ptr = types ? &*types : nullptr;

  ParameterSet params;
  ParameterSet acc;
  if (mode == Mode::RHTD) {
    params = init_rhtd_from_htd(*init, cfg, data.vocab);
    acc = zero_accumulators(params);
  } else if (init) {
    if (init->mode() != mode) {
      throw IncompatibleError(std::string("cannot resume ") + mode_name(mode) + " training from a " + init->get("mode") + " checkpoint");
    }
    if (checkpoint_vocab(*init).words() != data.vocab.words()) throw IncompatibleError("checkpoint vocabulary differs from the data vocabulary");
    params = init->params;
    acc = init->accumulators.size() ? init->accumulators : zero_accumulators(params);
  } else {
    Rng init_rng(derive_seed(cfg.seed, 1));
    params = init_params({data.vocab.size(), cfg.emb_size, cfg.hidden_size, mode}, init_rng);
    acc = zero_accumulators(params);
  }
  std::vector<std::size_t> frozen;
  if (!cfg.embeddings.empty()) frozen = frozen_rows_for(load_pretrained_embeddings(cfg.embeddings, data.vocab, params));

  Rng order_rng(derive_seed(cfg.seed, 2));
  std::vector<std::size_t> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  auto snapshot = [&](std::size_t epoch) {
    Checkpoint ck;
    ck.config = cfg.to_kv();
    store_vocab_and_lexicon(ck, data.vocab, data.lexicon);
    ck.config["epoch"] = std::to_string(epoch);
    std::ostringstream rs;
    rs << order_rng;
    ck.config["rng_state"] = rs.str();
    ck.params = params;
    ck.accumulators = acc;
    return ck;
  };

  TrainResult result;
  result.best = snapshot(0);
  std::optional<double> best_score;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(order, order_rng);
    double loss_sum = 0.0, reward_sum = 0.0;
    std::size_t token_sum = 0, reward_count = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      GradientMap grads;
      std::size_t batch_tokens = 0;
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t idx = order[b];
        Rng ex_rng(derive_seed(cfg.seed, epoch, idx + 3));
        Tape tape;
        Binding bind(tape, params);
        ForwardOptions opt;
        opt.training = true;
        opt.lambda = cfg.lambda;
        opt.tau = cfg.tau;
        opt.rng = &ex_rng;
        ExampleResult r = teacher_forced(bind, mode, data.train[idx], type_ptr, opt);
        accumulate(grads, bind.gradients(backward(r.objective)));
        loss_sum += mode == Mode::HTD ? r.objective.item() : r.word_nll;
        batch_tokens += r.tokens;
        result.clamped += r.clamped;
        for (const auto& rec : r.rewards) {
          reward_sum += rec.reward;
          ++reward_count;
        }
      }
      token_sum += batch_tokens;
      const double inv = 1.0 / static_cast<double>(batch_tokens);
      for (auto& [_, g] : grads) {
        for (double& v : g.values()) v *= inv;
      }
      if (!frozen.empty()) {
        Tensor& ge = grads.at(param::kEmbedding);
        for (std::size_t r : frozen) {
          for (std::size_t j = 0; j < ge.cols(); ++j) ge.at(r, j) = 0.0;
        }
      }
      clip_global_norm(grads, cfg.clip);
      adagrad_step(params, grads, acc, cfg.lr);
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.mode = mode;
    entry.train_loss = token_sum ? loss_sum / static_cast<double>(token_sum) : 0.0;
    if (mode == Mode::RHTD && reward_count) entry.mean_reward = reward_sum / static_cast<double>(reward_count);
    std::optional<double> score;
    if (!data.dev.empty()) {
      entry.dev_loss = evaluate_loss(params, mode, data.dev, type_ptr);
      score = -*entry.dev_loss;
      if (cfg.select_by_rouge) {
        auto cands = decode_dataset(params, mode, data.dev, data.vocab, type_ptr, cfg.max_len);
        entry.dev_rouge_l = corpus_rouge(cands, reference_summaries(data.dev, data.vocab)).rougeL.f1;
        score = *entry.dev_rouge_l;
      }
    }
    log_info("epoch " + std::to_string(epoch) + " " + mode_name(mode) + " train_loss=" + std::to_string(entry.train_loss) +
             (entry.dev_loss ? " dev_loss=" + std::to_string(*entry.dev_loss) : "") +
             (entry.mean_reward ? " reward=" + std::to_string(*entry.mean_reward) : ""));
    result.log.push_back(entry);

    // Without a dev set the latest epoch is kept.
    if (!score || !best_score || *score > *best_score) {
      best_score = score;
      result.best = snapshot(epoch);
      result.best_epoch = epoch;
    }
  }
  result.last = snapshot(cfg.epochs);
  if (result.clamped) log_info(std::to_string(result.clamped) + " reference probabilities clamped at 1e-12");
  return result;
}

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// "epoch<TAB>mode<TAB>train_loss<TAB>dev_loss<TAB>mean_reward" with a header
// row; missing values are left empty.
inline void write_train_log(std::ostream& out, const std::vector<EpochLog>& log) {
  out << "epoch\tmode\ttrain_loss\tdev_loss\tmean_reward\n";
  for (const auto& e : log) {
    out << e.epoch << '\t' << mode_name(e.mode) << '\t' << format_number(e.train_loss) << '\t'
        << (e.dev_loss ? format_number(*e.dev_loss) : "") << '\t' << (e.mean_reward ? format_number(*e.mean_reward) : "")
        << '\n';
  }
}

}  // namespace rhtd
