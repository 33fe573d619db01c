#pragma once

// Typed decoding on top of the pointer-generator: word-type prediction,
// type-specific word distributions, and the three ways of combining them.
//
//   STD   soft mixture of the three distributions, weighted by type probs.
//   HTD   Gumbel-Softmax mask over types during training, argmax at inference.
//   RHTD  a type is sampled from the type distribution; the word generator
//         learns under the sampled hard mask while the type predictor is
//         trained by REINFORCE with rewards 1.0 (type matches the reference
//         word's type) and 0.3 (it does not).

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rhtd/corpus.hpp"
#include "rhtd/errors.hpp"
#include "rhtd/lexicon.hpp"
#include "rhtd/model.hpp"
#include "rhtd/numerics.hpp"
#include "rhtd/random.hpp"

namespace rhtd {

using TypeProbs = std::array<double, kNumTypes>;

inline constexpr double kMatchReward = 1.0;
inline constexpr double kMismatchReward = 0.3;
inline constexpr double kProbFloor = 1e-12;

// Word types of the vocabulary, plus the lexicon for typing out-of-vocabulary
// source words.
struct TypeTable {
  std::vector<WordType> vocab;
  Lexicon lexicon;

  std::vector<WordType> extended(const Tokens& oov) const {
    std::vector<WordType> out = vocab;
    for (const auto& w : oov) out.push_back(word_type(w, lexicon));
    return out;
  }
};

inline TypeTable make_type_table(const Vocabulary& vocab, const Lexicon& lex) {
  return {assign_word_types(vocab, lex), lex};
}

// P(tp = c_i | w_<t, X) from [s_t, h*_t]. With `detach` the input is copied
// as a constant so only the type projection receives gradient.
inline Var type_dist(Binding& p, const Var& state, const Var& context, bool detach = false) {
  Var input = concat({state, context}, 1);
  if (detach) input = p.tape().constant(input.value());
  return softmax(matmul(input, p("type.W")) + p("type.b"));
}

inline std::array<Var, kNumTypes> typed_vocab_dists(Binding& p, const Var& state, const Var& context) {
  std::array<Var, kNumTypes> out;
  for (std::size_t c = 0; c < kNumTypes; ++c) out[c] = vocab_dist(p, state, context, param::kTypedOut[c]);
  return out;
}

inline Var type_weight(const Var& weights, std::size_t c) { return slice(weights, 1, c, c + 1); }

// Before pointer mixing: sum_i P(tp = c_i) P(w | tp = c_i).
inline Var std_mixture(const Var& type_probs, const std::array<Var, kNumTypes>& typed) {
  Var mix = type_weight(type_probs, 0) * typed[0];
  for (std::size_t c = 1; c < kNumTypes; ++c) mix = mix + type_weight(type_probs, c) * typed[c];
  return mix;
}

inline Var std_final_dist(const Var& type_probs, const std::array<Var, kNumTypes>& typed, const Var& attention,
                          const Var& p_gen, const CopyMap& copy) {
  return pgnet_final_dist(std_mixture(type_probs, typed), attention, p_gen, copy);
}

inline double sample_gumbel(Rng& rng) { return -std::log(-std::log(uniform_open01(rng))); }

inline std::array<double, kNumTypes> sample_gumbel_noise(Rng& rng) {
  std::array<double, kNumTypes> g{};
  for (double& x : g) x = sample_gumbel(rng);
  return g;
}

// GS_i = exp((log p_i + g_i) / tau) / sum_j exp((log p_j + g_j) / tau), on the tape.
inline Var gumbel_softmax(const Var& probs, double tau, const std::array<double, kNumTypes>& noise) {
  if (!(tau > 0)) throw DomainError("Gumbel-Softmax temperature must be positive");
  Var g = probs.tape()->constant(Tensor(probs.shape(), std::vector<double>(noise.begin(), noise.end())));
  return softmax(scale(log(probs) + g, 1.0 / tau));
}

// Same relaxation on plain values.
inline std::array<double, kNumTypes> gumbel_softmax(const TypeProbs& p, double tau, const std::array<double, kNumTypes>& noise) {
  if (!(tau > 0)) throw DomainError("Gumbel-Softmax temperature must be positive");
  std::array<double, kNumTypes> z{};
  for (std::size_t i = 0; i < kNumTypes; ++i) {
    if (!(p[i] > 0)) throw DomainError("Gumbel-Softmax needs strictly positive probabilities (component " + std::to_string(i) + ")");
    z[i] = (std::log(p[i]) + noise[i]) / tau;
  }
  const double mx = *std::max_element(z.begin(), z.end());
  double total = 0;
  for (double& v : z) total += (v = std::exp(v - mx));
  for (double& v : z) v /= total;
  return z;
}

// Constant indicator matrices for the types of the vocabulary and of each
// source position.
struct TypeLayout {
  Var vocab_onehot;                           // 3 x |V|
  std::array<Var, kNumTypes> vocab_rows;      // 1 x |V| each
  Var source_onehot;                          // 3 x m
  std::vector<WordType> types;                // over the extended vocabulary
  std::vector<WordType> source_types;
};

inline TypeLayout make_type_layout(Tape& tape, std::span<const int> source, const std::vector<WordType>& extended_types,
                                   std::size_t vocab_size) {
  TypeLayout layout;
  layout.types = extended_types;
  Tensor onehot({kNumTypes, vocab_size});
  for (std::size_t w = 0; w < vocab_size; ++w) onehot.at(static_cast<std::size_t>(extended_types.at(w)), w) = 1.0;
  for (std::size_t c = 0; c < kNumTypes; ++c) {
    Tensor row({1, vocab_size});
    for (std::size_t w = 0; w < vocab_size; ++w) row[w] = onehot.at(c, w);
    layout.vocab_rows[c] = tape.constant(std::move(row));
  }
  layout.vocab_onehot = tape.constant(std::move(onehot));
  Tensor src({kNumTypes, source.size()});
  for (std::size_t k = 0; k < source.size(); ++k) {
    const WordType t = extended_types.at(static_cast<std::size_t>(source[k]));
    layout.source_types.push_back(t);
    src.at(static_cast<std::size_t>(t), k) = 1.0;
  }
  layout.source_onehot = tape.constant(std::move(src));
  return layout;
}

inline Var divide_by(const Var& x, const Var& total) { return x * exp(neg(log(total))); }

// Masked pointer-generator distribution. `mask` holds the three type weights
// (Gumbel-Softmax output or a one-hot); word w is weighted by mask[type(w)].
//   P'_vocab(w) ~ P(w | tp = type(w)) mask[type(w)], normalized over V
//   beta_k     ~ a_k mask[type(x_k)], normalized over source positions
//   P(w) = p_gen P'_vocab(w) + (1 - p_gen) sum_{k: x_k = w} beta_k
// When a hard mask leaves one side without mass, the other side takes all of it.
inline Var htd_final_dist(const std::array<Var, kNumTypes>& typed, const Var& mask, const Var& attention,
                          const Var& p_gen, const CopyMap& copy, const TypeLayout& layout) {
  Var selected = typed[0] * layout.vocab_rows[0];
  for (std::size_t c = 1; c < kNumTypes; ++c) selected = selected + typed[c] * layout.vocab_rows[c];
  Var vocab_part = selected * matmul(mask, layout.vocab_onehot);
  Var vocab_mass = sum(vocab_part);
  Var copy_part = attention * matmul(mask, layout.source_onehot);
  Var copy_mass = sum(copy_part);

  const bool has_vocab = vocab_mass.item() > 0, has_copy = copy_mass.item() > 0;
  if (!has_vocab && !has_copy) throw NumericError("type mask leaves no probability mass on any word");
  if (!has_copy) return pad_to_extended(divide_by(vocab_part, vocab_mass), copy);
  if (!has_vocab) return matmul(divide_by(copy_part, copy_mass), copy.scatter);
  return pgnet_final_dist(divide_by(vocab_part, vocab_mass), divide_by(copy_part, copy_mass), p_gen, copy);
}

inline Var one_hot_mask(Tape& tape, std::size_t type) {
  Tensor m({1, kNumTypes});
  m[type] = 1.0;
  return tape.constant(std::move(m));
}

inline TypeProbs probs_of(const Var& v) {
  TypeProbs p{};
  for (std::size_t i = 0; i < kNumTypes; ++i) p[i] = v[i];
  return p;
}

inline std::size_t argmax_type(const TypeProbs& p) {
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

// Categorical draw from the type distribution.
inline std::size_t rhtd_sample_type(const TypeProbs& p, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < kNumTypes; ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  // Remaining mass (and rounding slack) goes to the last type with nonzero probability.
  for (std::size_t i = kNumTypes; i-- > 0;) {
    if (p[i] > 0) return i;
  }
  return kNumTypes - 1;
}

inline double rhtd_reward(WordType sampled, WordType reference) {
  return sampled == reference ? kMatchReward : kMismatchReward;
}

struct RewardRecord {
  std::size_t step = 0;
  WordType sampled = WordType::Context;
  WordType reference = WordType::Context;
  double reward = 0.0;
};

// -log max(p[index], 1e-12). Clamped terms are constants (no gradient) and
// are counted in `clamped`.
inline Var nll_term(const Var& dist, std::size_t index, std::size_t& clamped) {
  if (dist[index] < kProbFloor) {
    ++clamped;
    return dist.tape()->constant(Tensor::scalar(-std::log(kProbFloor)));
  }
  return neg(log(slice(dist, dist.shape().size() - 1, index, index + 1)));
}

// How HTD/RHTD steps build their type mask.
enum class MaskPolicy {
  Argmax,   // hard one-hot on the most probable type (inference)
  Gumbel,   // Gumbel-Softmax relaxation (HTD training)
  Sampled,  // hard one-hot on a sampled type (RHTD training)
};

// Picks a type given the step's type probabilities and the reference type.
using TypeSampler = std::function<std::size_t(const TypeProbs&, WordType reference)>;

inline TypeSampler rng_sampler(Rng& rng) {
  return [&rng](const TypeProbs& p, WordType) { return rhtd_sample_type(p, rng); };
}

struct DecoderStep {
  LstmState lstm;
  Var input;        // x_t
  Attention attention;
  Var p_gen;        // invalid for seq2seq
  Var type_probs;   // typed modes only
  std::array<Var, kNumTypes> typed;
  Var mask;         // htd/rhtd only
  std::size_t chosen_type = kNumTypes;  // argmax or sampled type, htd/rhtd
  Var final_dist;   // over the extended vocabulary (|V| for seq2seq)
};

struct StepOptions {
  MaskPolicy policy = MaskPolicy::Argmax;
  double tau = 1.0;
  Rng* rng = nullptr;         // Gumbel noise
  TypeSampler sampler;        // Sampled policy
  WordType reference = WordType::Context;
  bool detach_type_input = false;
};

// Per-example decoding state on one tape.
class ExampleDecoder {
 public:
  ExampleDecoder(Binding& p, Mode mode, std::span<const int> source, std::size_t n_oov,
                 const std::vector<WordType>* extended_types = nullptr)
      : p_(p), mode_(mode) {
    vocab_size_ = p.params().at(param::kEmbedding).shape()[0];
    enc_ = encode(p, source);
    copy_ = make_copy_map(p.tape(), source, vocab_size_, vocab_size_ + n_oov);
    if (mode == Mode::HTD || mode == Mode::RHTD) {
      if (!extended_types) throw ConfigError(std::string(mode_name(mode)) + " decoding needs word types");
      layout_ = make_type_layout(p.tape(), source, *extended_types, vocab_size_);
    }
    state_ = enc_.init;
  }

  const EncoderOutput& encoder() const { return enc_; }
  const CopyMap& copy_map() const { return copy_; }
  const TypeLayout& layout() const { return layout_; }
  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t output_size() const { return mode_ == Mode::Seq2Seq ? vocab_size_ : copy_.extended_size; }

  // Feeds `input_id` and produces the next output distribution.
  DecoderStep step(int input_id, const StepOptions& opt = {}) {
    DecoderStep s;
    s.input = embed(p_, input_id);
    s.lstm = state_ = lstm_step(p_, param::kDecoder, s.input, state_);
    s.attention = attend(p_, s.lstm.h, enc_);
    const Var& st = s.lstm.h;
    const Var& ctx = s.attention.context;
    switch (mode_) {
      case Mode::Seq2Seq:
        s.final_dist = vocab_dist(p_, st, ctx);
        break;
      case Mode::PGNet:
        s.p_gen = gen_prob(p_, ctx, st, s.input);
        s.final_dist = pgnet_final_dist(vocab_dist(p_, st, ctx), s.attention.weights, s.p_gen, copy_);
        break;
      case Mode::STD:
        s.type_probs = type_dist(p_, st, ctx);
        s.typed = typed_vocab_dists(p_, st, ctx);
        s.p_gen = gen_prob(p_, ctx, st, s.input);
        s.final_dist = std_final_dist(s.type_probs, s.typed, s.attention.weights, s.p_gen, copy_);
        break;
      case Mode::HTD:
      case Mode::RHTD: {
        s.type_probs = type_dist(p_, st, ctx, opt.detach_type_input);
        s.typed = typed_vocab_dists(p_, st, ctx);
        s.p_gen = gen_prob(p_, ctx, st, s.input);
        const TypeProbs probs = probs_of(s.type_probs);
        switch (opt.policy) {
          case MaskPolicy::Argmax:
            s.chosen_type = argmax_type(probs);
            s.mask = one_hot_mask(p_.tape(), s.chosen_type);
            break;
          case MaskPolicy::Gumbel:
            if (!opt.rng) throw ConfigError("Gumbel mask needs a random generator");
            s.chosen_type = argmax_type(probs);
            s.mask = gumbel_softmax(s.type_probs, opt.tau, sample_gumbel_noise(*opt.rng));
            break;
          case MaskPolicy::Sampled:
            if (!opt.sampler) throw ConfigError("sampled mask needs a type sampler");
            s.chosen_type = opt.sampler(probs, opt.reference);
            if (s.chosen_type >= kNumTypes) throw DomainError("sampler returned an invalid type");
            s.mask = one_hot_mask(p_.tape(), s.chosen_type);
            break;
        }
        s.final_dist = htd_final_dist(s.typed, s.mask, s.attention.weights, s.p_gen, copy_, layout_);
        break;
      }
    }
    return s;
  }

 private:
  Binding& p_;
  Mode mode_;
  std::size_t vocab_size_ = 0;
  EncoderOutput enc_;
  CopyMap copy_;
  TypeLayout layout_;
  LstmState state_;
};

// Teacher-forced target: reference ids followed by EOS. Seq2seq cannot emit
// extended ids, so those targets become UNK.
inline std::vector<int> decoder_targets(const EncodedPair& ex, Mode mode, std::size_t vocab_size) {
  std::vector<int> t = ex.target;
  if (mode == Mode::Seq2Seq) {
    for (int& id : t) {
      if (static_cast<std::size_t>(id) >= vocab_size) id = Vocabulary::kUnk;
    }
  }
  t.push_back(Vocabulary::kEos);
  return t;
}

// Sum over t of -(log P(w*_t) + lambda log P(tp = c(w*_t))).
inline Var htd_loss(const std::vector<Var>& step_dists, const std::vector<int>& targets,
                    const std::vector<Var>& type_probs, const std::vector<WordType>& reference_types, double lambda,
                    std::size_t& clamped) {
  if (!(lambda >= 0)) throw DomainError("type-loss weight must be nonnegative");
  if (step_dists.empty() || step_dists.size() != targets.size() || type_probs.size() != targets.size() ||
      reference_types.size() != targets.size()) {
    throw DimensionError("htd_loss: per-step inputs disagree in length");
  }
  Var total;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    Var term = nll_term(step_dists[t], static_cast<std::size_t>(targets[t]), clamped);
    if (lambda > 0) {
      term = term + scale(nll_term(type_probs[t], static_cast<std::size_t>(reference_types[t]), clamped), lambda);
    }
    total = total.valid() ? total + term : term;
  }
  return total;
}

struct ForwardOptions {
  bool training = false;  // false: deterministic argmax masks, objective = word NLL
  double lambda = 1.0;
  double tau = 1.0;
  Rng* rng = nullptr;     // Gumbel noise (htd) / type sampling (rhtd)
  TypeSampler sampler;    // overrides rng sampling in rhtd
};

struct ExampleResult {
  Var objective;               // scalar to differentiate
  double word_nll = 0.0;       // sum over steps of -log P(w*_t), clamped
  double type_nll = 0.0;       // sum over steps of -log P(tp = c(w*_t)), typed modes
  std::size_t tokens = 0;
  std::size_t clamped = 0;
  std::vector<RewardRecord> rewards;  // rhtd training only
};

// Teacher-forced pass over one example.
//   seq2seq, pgnet, std: word NLL
//   htd training:        word NLL + lambda * type NLL under a Gumbel mask
//   rhtd training:       word NLL under the sampled hard mask, plus
//                        v_t * -log P(sampled type) on a detached input, so
//                        the first term trains only the generator and the
//                        second only the type predictor
//   evaluation (any mode): word NLL under the inference-time distribution
inline ExampleResult teacher_forced(Binding& p, Mode mode, const EncodedPair& ex, const TypeTable* types,
                                    const ForwardOptions& opt) {
  const std::size_t vocab_size = p.params().at(param::kEmbedding).shape()[0];
  std::vector<WordType> ext_types;
  if (is_typed(mode)) {
    if (!types) throw ConfigError(std::string(mode_name(mode)) + " needs word types from a lexicon");
    ext_types = types->extended(ex.oov);
  }
  ExampleDecoder dec(p, mode, ex.source, ex.oov.size(), is_typed(mode) ? &ext_types : nullptr);
  const std::vector<int> targets = decoder_targets(ex, mode, vocab_size);

  StepOptions step_opt;
  if (opt.training && mode == Mode::HTD) {
    step_opt.policy = MaskPolicy::Gumbel;
    step_opt.tau = opt.tau;
    step_opt.rng = opt.rng;
  } else if (opt.training && mode == Mode::RHTD) {
    step_opt.policy = MaskPolicy::Sampled;
    step_opt.detach_type_input = true;
    if (opt.sampler) {
      step_opt.sampler = opt.sampler;
    } else if (opt.rng) {
      step_opt.sampler = rng_sampler(*opt.rng);
    }
  }

  ExampleResult r;
  Var total;
  auto accumulate = [&](const Var& term) { total = total.valid() ? total + term : term; };
  int input = Vocabulary::kBos;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto target = static_cast<std::size_t>(targets[t]);
    const WordType ref_type = is_typed(mode) ? ext_types.at(target) : WordType::Context;
    step_opt.reference = ref_type;
    DecoderStep s = dec.step(input, step_opt);

    Var word = nll_term(s.final_dist, target, r.clamped);
    r.word_nll += word.item();
    if (is_typed(mode)) r.type_nll += -std::log(std::max(s.type_probs[static_cast<std::size_t>(ref_type)], kProbFloor));

    if (opt.training && mode == Mode::HTD) {
      accumulate(word);
      if (opt.lambda > 0) accumulate(scale(nll_term(s.type_probs, static_cast<std::size_t>(ref_type), r.clamped), opt.lambda));
    } else if (opt.training && mode == Mode::RHTD) {
      accumulate(word);
      const auto sampled = static_cast<WordType>(s.chosen_type);
      const double v = rhtd_reward(sampled, ref_type);
      r.rewards.push_back({t, sampled, ref_type, v});
      std::size_t unused = 0;
      accumulate(scale(nll_term(s.type_probs, s.chosen_type, unused), v));
    } else {
      accumulate(word);
    }
    input = targets[t];
  }
  r.tokens = targets.size();
  r.objective = total;
  return r;
}

// (stage-1 gradient over the type predictor, stage-2 gradient over all other
// parameters, per-step rewards) for one example.
struct RhtdGradients {
  GradientMap type_predictor;
  GradientMap generator;
  std::vector<RewardRecord> rewards;
  double word_nll = 0.0;
  std::size_t tokens = 0;
};

inline void split_gradients(GradientMap&& all, GradientMap& type_predictor, GradientMap& generator) {
  for (auto& [name, g] : all) {
    (is_type_predictor_param(name) ? type_predictor : generator).emplace(name, std::move(g));
  }
}

inline RhtdGradients rhtd_step_gradients(const EncodedPair& ex, const ParameterSet& params, const TypeTable& types,
                                         Rng& rng, const TypeSampler& sampler = {}) {
  if (!params.contains("type.W") || !params.contains(param::kTypedOut[0] + ".W") || !params.contains("ptr.w_h")) {
    throw ConfigError("rhtd gradients need typed-decoder parameters initialized from an htd model");
  }
  Tape tape;
  Binding bind(tape, params);
  ForwardOptions opt;
  opt.training = true;
  opt.rng = &rng;
  opt.sampler = sampler;
  ExampleResult r = teacher_forced(bind, Mode::RHTD, ex, &types, opt);
  RhtdGradients out;
  split_gradients(bind.gradients(backward(r.objective)), out.type_predictor, out.generator);
  out.rewards = std::move(r.rewards);
  out.word_nll = r.word_nll;
  out.tokens = r.tokens;
  return out;
}

struct DecodeTrace {
  std::vector<int> ids;                 // emitted ids, EOS excluded
  std::vector<std::size_t> step_types;  // argmax type per emitted step (htd/rhtd)
};

// Greedy decoding from BOS until EOS or `max_len` tokens. Typed hard modes
// use the argmax type with a one-hot mask and no noise.
inline DecodeTrace greedy_decode_ids(const ParameterSet& params, Mode mode, std::span<const int> source,
                                     std::size_t n_oov, std::size_t max_len, const TypeTable* types = nullptr,
                                     const Tokens& oov = {}) {
  DecodeTrace trace;
  if (max_len == 0) return trace;
  Tape tape;
  Binding bind(tape, params);
  std::vector<WordType> ext_types;
  if (is_typed(mode)) {
    if (!types) throw ConfigError(std::string(mode_name(mode)) + " decoding needs word types from a lexicon");
    ext_types = types->extended(oov);
    ext_types.resize(types->vocab.size() + n_oov, WordType::Context);
  }
  ExampleDecoder dec(bind, mode, source, n_oov, is_typed(mode) ? &ext_types : nullptr);
  int input = Vocabulary::kBos;
  for (std::size_t t = 0; t < max_len; ++t) {
    DecoderStep s = dec.step(input);
    const auto& dist = s.final_dist.value().values();
    const int best = static_cast<int>(std::max_element(dist.begin(), dist.end()) - dist.begin());
    if (best == Vocabulary::kEos) break;
    trace.ids.push_back(best);
    if (mode == Mode::HTD || mode == Mode::RHTD) trace.step_types.push_back(s.chosen_type);
    input = best;
  }
  return trace;
}

inline Tokens greedy_decode(const Tokens& review, const Vocabulary& vocab, const ParameterSet& params, Mode mode,
                            std::size_t max_len, const TypeTable* types = nullptr) {
  if (review.empty()) throw InputError("cannot summarize an empty review");
  EncodedPair enc = encode_pair({review, {}}, vocab);
  DecodeTrace trace = greedy_decode_ids(params, mode, enc.source, enc.oov.size(), max_len, types, enc.oov);
  return decode_ids(trace.ids, vocab, enc.oov);
}

}  // namespace rhtd
