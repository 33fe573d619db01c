#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rhtd/rhtd.hpp"

namespace rhtd::testing {

inline std::string fixture(const std::string& name) { return std::string(RHTD_FIXTURES) + "/" + name; }

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (double& v : t.values()) v = uniform(rng, lo, hi);
  return t;
}

// Reduces any output to a scalar with fixed random weights, so every output
// coordinate carries a distinct gradient.
inline Var weighted_sum(Tape& tape, const Var& out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(out * tape.constant(random_tensor(out.shape(), rng)));
}

struct OpCheck {
  std::string name;
  std::function<double(Rng&)> trial;  // one random instance, returns grad_check error
};

inline std::vector<OpCheck> op_checks(double h = 1e-6) {
  auto dims = [](Rng& rng) { return static_cast<std::size_t>(1 + uniform_below(rng, 4)); };
  auto run = [h](std::vector<Tensor> inputs, std::function<Var(Tape&, const std::vector<Var>&)> f) {
    return grad_check(f, inputs, h);
  };
  std::vector<OpCheck> checks;
  checks.push_back({"matmul", [=](Rng& rng) {
                      const auto m = dims(rng), k = dims(rng), n = dims(rng);
                      const auto s = rng();
                      return run({random_tensor({m, k}, rng), random_tensor({k, n}, rng)},
                                 [s](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, matmul(v[0], v[1]), s); });
                    }});
  checks.push_back({"add", [=](Rng& rng) {
                      const Shape sh{dims(rng), dims(rng)};
                      const auto s = rng();
                      return run({random_tensor(sh, rng), random_tensor(sh, rng)},
                                 [s](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, v[0] + v[1], s); });
                    }});
  checks.push_back({"add (scalar broadcast)", [=](Rng& rng) {
                      const Shape sh{dims(rng), dims(rng)};
                      const auto s = rng();
                      return run({random_tensor(sh, rng), random_tensor({1}, rng)},
                                 [s](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, v[0] + v[1], s); });
                    }});
  checks.push_back({"mul", [=](Rng& rng) {
                      const Shape sh{dims(rng), dims(rng)};
                      const auto s = rng();
                      return run({random_tensor(sh, rng), random_tensor(sh, rng)},
                                 [s](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, v[0] * v[1], s); });
                    }});
  checks.push_back({"mul (scalar broadcast)", [=](Rng& rng) {
                      const Shape sh{dims(rng), dims(rng)};
                      const auto s = rng();
                      return run({random_tensor({1}, rng), random_tensor(sh, rng)},
                                 [s](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, v[0] * v[1], s); });
                    }});
  checks.push_back({"concat", [=](Rng& rng) {
                      const std::size_t axis = uniform_below(rng, 2);
                      const auto r = dims(rng), c = dims(rng), extra = dims(rng);
                      const Shape a{r, c};
                      const Shape b = axis == 0 ? Shape{extra, c} : Shape{r, extra};
                      const auto s = rng();
                      return run({random_tensor(a, rng), random_tensor(b, rng)}, [s, axis](Tape& t, const std::vector<Var>& v) {
                        return weighted_sum(t, concat({v[0], v[1], v[0]}, axis), s);
                      });
                    }});
  checks.push_back({"slice", [=](Rng& rng) {
                      const std::size_t axis = uniform_below(rng, 2);
                      const Shape sh{dims(rng) + 1, dims(rng) + 1};
                      const std::size_t b = uniform_below(rng, sh[axis] - 1);
                      const std::size_t e = b + 1 + uniform_below(rng, sh[axis] - b - 1);
                      const auto s = rng();
                      return run({random_tensor(sh, rng)}, [=](Tape& t, const std::vector<Var>& v) {
                        return weighted_sum(t, slice(v[0], axis, b, e), s);
                      });
                    }});
  checks.push_back({"embedding", [=](Rng& rng) {
                      const auto rows = dims(rng) + 1, cols = dims(rng);
                      std::vector<std::size_t> idx;
                      for (std::size_t i = 0, n = dims(rng) + 1; i < n; ++i) idx.push_back(uniform_below(rng, rows));
                      const auto s = rng();
                      return run({random_tensor({rows, cols}, rng)}, [=](Tape& t, const std::vector<Var>& v) {
                        return weighted_sum(t, embedding(v[0], idx), s);
                      });
                    }});
  checks.push_back({"softmax", [=](Rng& rng) {
                      const Shape sh{1, dims(rng) + 1};
                      const auto s = rng();
                      return run({random_tensor(sh, rng, -3, 3)},
                                 [s](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, softmax(v[0]), s); });
                    }});
  const std::pair<const char*, Unary> unaries[] = {
      {"sigmoid", Unary::Sigmoid}, {"tanh", Unary::Tanh}, {"exp", Unary::Exp}, {"log", Unary::Log}, {"neg", Unary::Neg}};
  for (const auto& [name, kind] : unaries) {
    checks.push_back({name, [=, kind = kind](Rng& rng) {
                        const Shape sh{dims(rng), dims(rng)};
                        const double lo = kind == Unary::Log ? 0.2 : -2.0;
                        const auto s = rng();
                        return run({random_tensor(sh, rng, lo, 2.0)}, [=](Tape& t, const std::vector<Var>& v) {
                          return weighted_sum(t, apply_unary(v[0], kind), s);
                        });
                      }});
  }
  checks.push_back({"sum", [=](Rng& rng) {
                      const Shape sh{dims(rng), dims(rng)};
                      return run({random_tensor(sh, rng)}, [](Tape&, const std::vector<Var>& v) { return sum(v[0] * v[0]); });
                    }});
  checks.push_back({"scale", [=](Rng& rng) {
                      const Shape sh{dims(rng), dims(rng)};
                      const double f = uniform(rng, -3, 3);
                      const auto s = rng();
                      return run({random_tensor(sh, rng)},
                                 [=](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, scale(v[0], f), s); });
                    }});
  checks.push_back({"reshape", [=](Rng& rng) {
                      const auto r = dims(rng), c = dims(rng);
                      const auto s = rng();
                      return run({random_tensor({r, c}, rng)},
                                 [=](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, reshape(v[0], {c, r}), s); });
                    }});
  return checks;
}

// |V| = 8: the four reserved tokens, two aspects, two opinions. The source
// holds one out-of-vocabulary word that the summary copies.
struct Toy {
  Vocabulary vocab;
  Lexicon lexicon;
  TypeTable types;
  EncodedPair example;
};

inline Toy make_toy() {
  Toy t;
  t.vocab = Vocabulary::from_words({"<pad>", "<unk>", "<s>", "</s>", "battery", "screen", "great", "cheap"});
  t.lexicon.aspects = {"battery", "screen", "zyxel"};
  t.lexicon.opinions = {"great", "cheap"};
  t.types = make_type_table(t.vocab, t.lexicon);
  t.example = encode_pair({{"the", "battery", "is", "great", "zyxel"}, {"great", "zyxel", "battery"}}, t.vocab);
  return t;
}

inline ParameterSet toy_params(const Toy& t, Mode mode, std::uint64_t seed, std::size_t e = 4, std::size_t d = 4,
                               double spread = 1.0) {
  Rng rng(seed);
  ParameterSet p = init_params({t.vocab.size(), e, d, mode}, rng);
  // Wider than the training init so the checks exercise nonlinear regimes.
  for (auto& [name, tensor] : p) {
    for (double& v : tensor.values()) v = v * 5.0 * spread + uniform(rng, -0.05, 0.05);
  }
  return p;
}

struct SyntheticData {
  std::vector<ReviewPair> pairs;
  Vocabulary vocab;
  std::vector<EncodedPair> encoded;
  Lexicon lexicon;
};

// The 32-pair overfit fixture with a full vocabulary and the lexicon mined
// from its parses.
inline SyntheticData load_overfit() {
  SyntheticData s;
  s.pairs = load_pairs(fixture("overfit_pairs.jsonl"));
  s.vocab = build_vocab(s.pairs, 1000);
  for (const auto& p : s.pairs) s.encoded.push_back(encode_pair(p, s.vocab));
  s.lexicon = run_double_propagation(load_parsed_corpus(fixture("overfit_parses.conll")),
                                     load_seed_opinions(fixture("overfit_seeds.txt")))
                  .lexicon;
  return s;
}

inline std::vector<Tokens> summaries_of(const std::vector<ReviewPair>& pairs) {
  std::vector<Tokens> out;
  for (const auto& p : pairs) out.push_back(p.summary);
  return out;
}

inline std::vector<Tokens> decode_all(const std::vector<ReviewPair>& pairs, const Vocabulary& vocab,
                                      const ParameterSet& params, Mode mode, const TypeTable* types,
                                      std::size_t max_len = 30) {
  std::vector<Tokens> out;
  for (const auto& p : pairs) out.push_back(greedy_decode(p.review, vocab, params, mode, max_len, types));
  return out;
}

inline const Mode kAllModes[] = {Mode::Seq2Seq, Mode::PGNet, Mode::STD, Mode::HTD, Mode::RHTD};

}  // namespace rhtd::testing
