#pragma once

// One-layer LSTM encoder-decoder with additive attention and the
// pointer-generator output layer.

#include <cstddef>
#include <algorithm>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rhtd/corpus.hpp"
#include "rhtd/errors.hpp"
#include "rhtd/numerics.hpp"
#include "rhtd/random.hpp"

namespace rhtd {

enum class Mode { Seq2Seq, PGNet, STD, HTD, RHTD };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::Seq2Seq: return "seq2seq";
    case Mode::PGNet: return "pgnet";
    case Mode::STD: return "std";
    case Mode::HTD: return "htd";
    case Mode::RHTD: return "rhtd";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  for (Mode m : {Mode::Seq2Seq, Mode::PGNet, Mode::STD, Mode::HTD, Mode::RHTD}) {
    if (s == mode_name(m)) return m;
  }
  throw ConfigError("unknown mode '" + s + "' (expected seq2seq, pgnet, std, htd or rhtd)");
}

inline bool is_typed(Mode m) { return m == Mode::STD || m == Mode::HTD || m == Mode::RHTD; }
inline bool uses_pointer(Mode m) { return m != Mode::Seq2Seq; }

struct ModelShape {
  std::size_t vocab_size = 0;
  std::size_t emb = 128;
  std::size_t hidden = 128;
  Mode mode = Mode::PGNet;
};

// Parameter names. "type.*" is the type predictor; everything else is shared
// or word-generating.
namespace param {
inline const std::string kEmbedding = "embedding";
inline const std::string kEncFwd = "enc_fwd";
inline const std::string kEncBwd = "enc_bwd";
inline const std::string kDecoder = "dec";
inline const std::string kOut = "out";
inline const std::string kTypedOut[3] = {"out_aspect", "out_opinion", "out_context"};
inline const std::string kTypePrefix = "type.";
}  // namespace param

inline bool is_type_predictor_param(const std::string& name) { return name.rfind(param::kTypePrefix, 0) == 0; }

// Weights uniform in (-0.1, 0.1), biases zero. Creation order is fixed so a
// seed determines the parameters exactly.
inline ParameterSet init_params(const ModelShape& shape, Rng& rng) {
  if (shape.vocab_size <= Vocabulary::kReserved || shape.emb == 0 || shape.hidden == 0) {
    throw ConfigError("model needs a vocabulary larger than the reserved tokens and positive sizes");
  }
  const std::size_t v = shape.vocab_size, e = shape.emb, d = shape.hidden;
  ParameterSet p;
  auto weight = [&](const std::string& name, std::size_t r, std::size_t c) {
    Tensor t({r, c});
    for (double& x : t.values()) x = uniform(rng, -0.1, 0.1);
    p.add(name, std::move(t));
  };
  auto bias = [&](const std::string& name, std::size_t c) { p.add(name, Tensor({1, c})); };

  weight(param::kEmbedding, v, e);
  for (const auto& lstm : {param::kEncFwd, param::kEncBwd}) {
    weight(lstm + ".W", e + d, 4 * d);
    bias(lstm + ".b", 4 * d);
  }
  weight("enc_proj.W", 2 * d, d);
  bias("enc_proj.b", d);
  weight("init_h.W", 2 * d, d);
  bias("init_h.b", d);
  weight("init_c.W", 2 * d, d);
  bias("init_c.b", d);
  weight(param::kDecoder + ".W", e + d, 4 * d);
  bias(param::kDecoder + ".b", 4 * d);
  weight("att.W_h", d, d);
  weight("att.W_s", d, d);
  bias("att.b", d);
  weight("att.v", d, 1);

  if (is_typed(shape.mode)) {
    weight("type.W", 2 * d, 3);
    bias("type.b", 3);
    for (const auto& name : param::kTypedOut) {
      weight(name + ".W", 2 * d, v);
      bias(name + ".b", v);
    }
  } else {
    weight(param::kOut + ".W", 2 * d, v);
    bias(param::kOut + ".b", v);
  }
  if (uses_pointer(shape.mode)) {
    weight("ptr.w_h", d, 1);
    weight("ptr.w_s", d, 1);
    weight("ptr.w_x", e, 1);
    bias("ptr.b", 1);
  }
  return p;
}

inline ModelShape infer_shape(const ParameterSet& p, Mode mode) {
  const Tensor& emb = p.at(param::kEmbedding);
  return {emb.shape()[0], emb.shape()[1], p.at("att.W_h").shape()[0], mode};
}

struct LstmState {
  Var h;
  Var c;
};

inline LstmState zero_state(Tape& tape, std::size_t hidden) {
  return {tape.constant(Tensor({1, hidden})), tape.constant(Tensor({1, hidden}))};
}

inline LstmState lstm_step(Binding& p, const std::string& prefix, const Var& x, const LstmState& prev) {
  const std::size_t d = prev.h.shape()[1];
  Var gates = matmul(concat({x, prev.h}, 1), p(prefix + ".W")) + p(prefix + ".b");
  Var in = sigmoid(slice(gates, 1, 0, d));
  Var forget = sigmoid(slice(gates, 1, d, 2 * d));
  Var cand = tanh(slice(gates, 1, 2 * d, 3 * d));
  Var out = sigmoid(slice(gates, 1, 3 * d, 4 * d));
  Var c = forget * prev.c + in * cand;
  return {out * tanh(c), c};
}

// Ids of the extended vocabulary are looked up as UNK.
inline std::size_t embedding_row(int id, std::size_t vocab_size) {
  return static_cast<std::size_t>(id) < vocab_size ? static_cast<std::size_t>(id) : Vocabulary::kUnk;
}

inline Var embed(Binding& p, int id) {
  Var table = p(param::kEmbedding);
  return embedding(table, {embedding_row(id, table.shape()[0])});
}

// Adds a 1 x n row to every row of an m x n matrix (via a ones column).
inline Var add_row(const Var& matrix, const Var& row) {
  Tape& tape = *matrix.tape();
  Var ones = tape.constant(Tensor({matrix.shape()[0], 1}, 1.0));
  return matrix + matmul(ones, row);
}

struct EncoderOutput {
  Var states;  // m x d; row k is h_k
  Var keys;    // m x d; states . W_h, reused by every attention step
  LstmState init;

  std::size_t length() const { return states.shape()[0]; }
};

inline EncoderOutput with_attention_keys(Binding& p, const Var& states, const LstmState& init) {
  return {states, matmul(states, p("att.W_h")), init};
}

// Bidirectional LSTM; h_k is the projection of both directions' states to d.
inline EncoderOutput encode(Binding& p, std::span<const int> source) {
  if (source.empty()) throw InputError("cannot encode an empty source");
  Var table = p(param::kEmbedding);
  const std::size_t m = source.size();
  const std::size_t d = p.params().at("att.W_h").shape()[0];
  std::vector<std::size_t> rows;
  for (int id : source) rows.push_back(embedding_row(id, table.shape()[0]));
  Var emb = embedding(table, rows);

  std::vector<LstmState> fwd(m), bwd(m);
  LstmState s = zero_state(p.tape(), d);
  for (std::size_t k = 0; k < m; ++k) fwd[k] = s = lstm_step(p, param::kEncFwd, slice(emb, 0, k, k + 1), s);
  s = zero_state(p.tape(), d);
  for (std::size_t k = m; k-- > 0;) bwd[k] = s = lstm_step(p, param::kEncBwd, slice(emb, 0, k, k + 1), s);

  std::vector<Var> both;
  for (std::size_t k = 0; k < m; ++k) both.push_back(concat({fwd[k].h, bwd[k].h}, 1));
  Var states = add_row(matmul(concat(both, 0), p("enc_proj.W")), p("enc_proj.b"));

  LstmState init{tanh(matmul(concat({fwd[m - 1].h, bwd[0].h}, 1), p("init_h.W")) + p("init_h.b")),
                 matmul(concat({fwd[m - 1].c, bwd[0].c}, 1), p("init_c.W")) + p("init_c.b")};
  return with_attention_keys(p, states, init);
}

struct Attention {
  Var weights;  // 1 x m, sums to 1
  Var context;  // 1 x d
};

// score_k = v . tanh(W_h h_k + W_s s_t + b)
inline Attention attend(Binding& p, const Var& state, const EncoderOutput& enc) {
  Var query = matmul(state, p("att.W_s")) + p("att.b");
  Var scores = matmul(tanh(add_row(enc.keys, query)), p("att.v"));
  Var weights = softmax(reshape(scores, {1, enc.length()}));
  return {weights, matmul(weights, enc.states)};
}

// softmax(W^T [s_t, h*_t] + b) over V. `prefix` picks the projection.
inline Var vocab_dist(Binding& p, const Var& state, const Var& context, const std::string& prefix = param::kOut) {
  return softmax(matmul(concat({state, context}, 1), p(prefix + ".W")) + p(prefix + ".b"));
}

inline Var gen_prob(Binding& p, const Var& context, const Var& state, const Var& input) {
  return sigmoid(matmul(context, p("ptr.w_h")) + matmul(state, p("ptr.w_s")) + matmul(input, p("ptr.w_x")) +
                 p("ptr.b"));
}

// Constant m x |ext| matrix routing attention mass of source position k to
// the id of the k-th source token.
struct CopyMap {
  Var scatter;
  std::vector<int> source;
  std::size_t vocab_size = 0;
  std::size_t extended_size = 0;
};

inline CopyMap make_copy_map(Tape& tape, std::span<const int> source, std::size_t vocab_size, std::size_t extended_size) {
  Tensor s({source.size(), extended_size});
  for (std::size_t k = 0; k < source.size(); ++k) {
    const auto id = static_cast<std::size_t>(source[k]);
    if (id >= extended_size) throw DimensionError("source id " + std::to_string(id) + " outside the extended vocabulary");
    s.at(k, id) = 1.0;
  }
  return {tape.constant(std::move(s)), {source.begin(), source.end()}, vocab_size, extended_size};
}

// Zero-pads a 1 x |V| distribution to the extended size.
inline Var pad_to_extended(const Var& dist, const CopyMap& copy) {
  const std::size_t extra = copy.extended_size - dist.shape()[1];
  if (extra == 0) return dist;
  return concat({dist, dist.tape()->constant(Tensor({1, extra}))}, 1);
}

inline Var one_minus(const Var& x) { return x.tape()->constant(Tensor::scalar(1.0)) - x; }

// p_gen P_vocab(w) + (1 - p_gen) sum_{k: x_k = w} a_k, over the extended vocabulary.
inline Var pgnet_final_dist(const Var& vocab, const Var& attention, const Var& p_gen, const CopyMap& copy) {
  return p_gen * pad_to_extended(vocab, copy) + one_minus(p_gen) * matmul(attention, copy.scatter);
}

// Pretrained vectors: "token v1 ... ve" per line. Returns the vocabulary rows
// that were filled; tokens missing from the file keep their random init.
inline std::vector<std::size_t> load_pretrained_embeddings(const std::string& path, const Vocabulary& vocab,
                                                           ParameterSet& params) {
  Tensor& table = params.at(param::kEmbedding);
  const std::size_t e = table.shape()[1];
  auto in = detail::open_input(path);
  std::vector<std::size_t> filled;
  std::vector<bool> seen(vocab.size(), false);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    Tokens cols = split_whitespace(line);
    if (cols.empty()) continue;
    if (cols.size() != e + 1) {
      throw ParseError("expected a token and " + std::to_string(e) + " values, got " + std::to_string(cols.size() - 1), lineno);
    }
    const int id = vocab.find(cols[0]);
    if (id < 0 || seen[static_cast<std::size_t>(id)]) continue;
    for (std::size_t j = 0; j < e; ++j) {
      try {
        table.at(static_cast<std::size_t>(id), j) = std::stod(cols[j + 1]);
      } catch (const std::exception&) {
        throw ParseError("bad number '" + cols[j + 1] + "'", lineno);
      }
    }
    seen[static_cast<std::size_t>(id)] = true;
    filled.push_back(static_cast<std::size_t>(id));
  }
  std::sort(filled.begin(), filled.end());
  return filled;
}

}  // namespace rhtd
