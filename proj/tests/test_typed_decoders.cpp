#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "helpers.hpp"
#include "reinforce_toy.hpp"

using namespace rhtd;
using rhtd::testing::make_toy;
using rhtd::testing::random_tensor;
using rhtd::testing::toy_params;

namespace {

double total_of(const Var& v) {
  double s = 0;
  for (double x : v.value().values()) s += x;
  return s;
}

std::vector<double> hand_softmax(const std::vector<double>& z) {
  double total = 0;
  std::vector<double> out;
  for (double v : z) total += std::exp(v);
  for (double v : z) out.push_back(std::exp(v) / total);
  return out;
}

// d = 2 projection inputs for the small hand checks.
struct Inputs {
  Tape tape;
  Var state = tape.constant(Tensor::row({0.5, -1.0}));
  Var context = tape.constant(Tensor::row({0.25, 2.0}));
};

}  // namespace

TEST(TypeDist, ZeroProjectionIsUniform) {
  ParameterSet p;
  p.add("type.W", Tensor({4, 3}));
  p.add("type.b", Tensor({1, 3}));
  Inputs in;
  Binding bind(in.tape, p);
  Var d = type_dist(bind, in.state, in.context);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(d[i], 1.0 / 3, 1e-15);
}

TEST(TypeDist, HandSoftmax) {
  ParameterSet p;
  p.add("type.W", Tensor::matrix({{1, 0, -1}, {0.5, 0.5, 0}, {0, 2, 0}, {-1, 0, 1}}));
  p.add("type.b", Tensor::row({0.1, 0.2, 0.3}));
  Inputs in;
  Binding bind(in.tape, p);
  Var d = type_dist(bind, in.state, in.context);
  // x = (0.5, -1, 0.25, 2)
  const auto want = hand_softmax({0.5 - 0.5 - 2 + 0.1, -0.5 + 0.5 + 0.2, -0.5 + 2 + 0.3});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(d[i], want[i], 1e-15);
  EXPECT_EQ(argmax_type(probs_of(d)), 2u);
}

TEST(TypedVocabDists, NormalizedTiedAndHand) {
  Rng rng(3);
  ParameterSet p;
  const Tensor w = random_tensor({4, 5}, rng), b = random_tensor({1, 5}, rng);
  for (const auto& name : param::kTypedOut) {
    p.add(name + ".W", w);
    p.add(name + ".b", b);
  }
  Inputs in;
  Binding bind(in.tape, p);
  const auto d = typed_vocab_dists(bind, in.state, in.context);
  const std::vector<double> x{0.5, -1.0, 0.25, 2.0};
  std::vector<double> z(5);
  for (std::size_t j = 0; j < 5; ++j) {
    z[j] = b[j];
    for (std::size_t i = 0; i < 4; ++i) z[j] += x[i] * w.at(i, j);
  }
  const auto want = hand_softmax(z);
  for (const Var& dist : d) {
    EXPECT_NEAR(total_of(dist), 1.0, 1e-12);
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_EQ(dist[j], d[0][j]);
      EXPECT_NEAR(dist[j], want[j], 1e-14);
    }
  }
}

TEST(StdFinalDist, EndpointsAndUniformAverage) {
  Tape tape;
  const std::array<Var, 3> typed{tape.constant(Tensor::row({0.5, 0.3, 0.2})), tape.constant(Tensor::row({0.1, 0.1, 0.8})),
                                 tape.constant(Tensor::row({0.25, 0.5, 0.25}))};
  Var onehot = std_mixture(tape.constant(Tensor::row({0, 1, 0})), typed);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(onehot[i], typed[1][i]);
  Var uniform = std_mixture(tape.constant(Tensor::row({1.0 / 3, 1.0 / 3, 1.0 / 3})), typed);
  EXPECT_NEAR(uniform[0], (0.5 + 0.1 + 0.25) / 3, 1e-15);
  EXPECT_NEAR(uniform[1], (0.3 + 0.1 + 0.5) / 3, 1e-15);
  EXPECT_NEAR(uniform[2], (0.2 + 0.8 + 0.25) / 3, 1e-15);
  const std::vector<int> source{1, 3};
  const CopyMap copy = make_copy_map(tape, source, 3, 4);
  Var fin = std_final_dist(tape.constant(Tensor::row({0.2, 0.3, 0.5})), typed, tape.constant(Tensor::row({0.6, 0.4})),
                           tape.constant(Tensor::scalar(0.4)), copy);
  EXPECT_NEAR(total_of(fin), 1.0, 1e-12);
  EXPECT_NEAR(fin[3], 0.6 * 0.4, 1e-15);
}

TEST(GumbelSoftmax, ZeroNoiseIdentityAndSharpening) {
  const TypeProbs p{0.5, 0.3, 0.2};
  const auto same = gumbel_softmax(p, 1.0, {0, 0, 0});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(same[i], p[i], 1e-12);
  const auto sharp = gumbel_softmax(p, 0.01, {0, 0, 0});
  EXPECT_GT(*std::max_element(sharp.begin(), sharp.end()), 0.999);
  EXPECT_THROW(gumbel_softmax(TypeProbs{0.5, 0.5, 0.0}, 1.0, {0, 0, 0}), DomainError);
  EXPECT_THROW(gumbel_softmax(p, 0.0, {0, 0, 0}), DomainError);
}

TEST(GumbelSoftmax, RandomInputsNormalizedAndTapeAgrees) {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    TypeProbs p{uniform(rng, 0.01, 1), uniform(rng, 0.01, 1), uniform(rng, 0.01, 1)};
    const double s = p[0] + p[1] + p[2];
    for (double& x : p) x /= s;
    const double tau = uniform(rng, 0.05, 3);
    const auto g = sample_gumbel_noise(rng);
    const auto out = gumbel_softmax(p, tau, g);
    EXPECT_NEAR(out[0] + out[1] + out[2], 1.0, 1e-12);
    Tape tape;
    Var v = gumbel_softmax(tape.constant(Tensor::row({p[0], p[1], p[2]})), tau, g);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(v[i], out[i], 1e-12);
  }
}

TEST(GumbelSoftmax, GradientCheck) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const auto g = sample_gumbel_noise(rng);
    const Tensor logits = random_tensor({1, 3}, rng);
    EXPECT_LT(grad_check([&](Tape& t, Var x) { return rhtd::testing::weighted_sum(t, gumbel_softmax(softmax(x), 0.7, g), 9); },
                         logits, 1e-6),
              1e-6);
  }
}

namespace {

// |V| = 6, two words per type (A A O O C C); source ids {0, 2, 4, 5}.
struct HtdToy {
  Tape tape;
  std::vector<WordType> types{WordType::Aspect, WordType::Aspect, WordType::Opinion,
                              WordType::Opinion, WordType::Context, WordType::Context};
  std::vector<int> source{0, 2, 4, 5};
  std::array<std::vector<double>, 3> dists{std::vector<double>{0.3, 0.1, 0.2, 0.1, 0.2, 0.1},
                                           std::vector<double>{0.05, 0.05, 0.4, 0.3, 0.1, 0.1},
                                           std::vector<double>{0.1, 0.2, 0.1, 0.1, 0.3, 0.2}};
  std::vector<double> attention{0.4, 0.3, 0.2, 0.1};
  CopyMap copy = make_copy_map(tape, source, 6, 6);
  TypeLayout layout = make_type_layout(tape, source, types, 6);

  std::array<Var, 3> typed() {
    return {tape.constant(Tensor::row(dists[0])), tape.constant(Tensor::row(dists[1])), tape.constant(Tensor::row(dists[2]))};
  }
  Var run(const std::vector<double>& mask, double p_gen) {
    return htd_final_dist(typed(), tape.constant(Tensor::row(mask)), tape.constant(Tensor::row(attention)),
                          tape.constant(Tensor::scalar(p_gen)), copy, layout);
  }
};

}  // namespace

TEST(HtdFinalDist, HandRenormalizedMixture) {
  HtdToy toy;
  const std::vector<double> m{0.7, 0.2, 0.1};
  const double p_gen = 0.6;
  Var out = toy.run(m, p_gen);
  std::vector<double> vocab(6), beta(4);
  double vz = 0, bz = 0;
  for (std::size_t w = 0; w < 6; ++w) {
    const auto c = static_cast<std::size_t>(toy.types[w]);
    vz += vocab[w] = toy.dists[c][w] * m[c];
  }
  for (std::size_t k = 0; k < 4; ++k) {
    bz += beta[k] = toy.attention[k] * m[static_cast<std::size_t>(toy.types[static_cast<std::size_t>(toy.source[k])])];
  }
  std::vector<double> want(6);
  for (std::size_t w = 0; w < 6; ++w) want[w] = p_gen * vocab[w] / vz;
  for (std::size_t k = 0; k < 4; ++k) want[static_cast<std::size_t>(toy.source[k])] += (1 - p_gen) * beta[k] / bz;
  for (std::size_t w = 0; w < 6; ++w) EXPECT_NEAR(out[w], want[w], 1e-12) << w;
  EXPECT_NEAR(total_of(out), 1.0, 1e-9);
  // vz = 0.7*0.4 + 0.2*0.7 + 0.1*0.5 = 0.47, bz = 0.28 + 0.06 + 0.02 + 0.01 = 0.37
  EXPECT_NEAR(vz, 0.47, 1e-15);
  EXPECT_NEAR(bz, 0.37, 1e-15);
}

TEST(HtdFinalDist, OneHotMaskSupportsOneType) {
  HtdToy toy;
  Var vocab_only = toy.run({1, 0, 0}, 1.0);
  for (std::size_t w = 2; w < 6; ++w) EXPECT_EQ(vocab_only[w], 0.0);
  EXPECT_NEAR(vocab_only[0], 0.75, 1e-15);
  Var mixed = toy.run({0, 1, 0}, 0.5);
  for (std::size_t w : {0u, 1u, 4u, 5u}) EXPECT_EQ(mixed[w], 0.0);
  EXPECT_NEAR(total_of(mixed), 1.0, 1e-12);
}

TEST(HtdFinalDist, UniformMaskOverIdenticalDistsIsIdentity) {
  HtdToy toy;
  toy.dists = {toy.dists[0], toy.dists[0], toy.dists[0]};
  Var out = toy.run({1.0 / 3, 1.0 / 3, 1.0 / 3}, 1.0);
  for (std::size_t w = 0; w < 6; ++w) EXPECT_NEAR(out[w], toy.dists[0][w], 1e-15);
}

TEST(HtdFinalDist, ZeroMassFallbacks) {
  HtdToy toy;
  // Zero attention on the only opinion position empties the copy side.
  toy.attention = {0.5, 0.0, 0.3, 0.2};
  Var out = toy.run({0, 1, 0}, 0.3);
  EXPECT_NEAR(out[2], 0.4 / 0.7, 1e-12);
  EXPECT_NEAR(out[3], 0.3 / 0.7, 1e-12);
  toy.dists[1] = {0.5, 0.5, 0, 0, 0, 0};
  EXPECT_THROW(toy.run({0, 1, 0}, 0.3), NumericError);
}

TEST(HtdLoss, BoundariesAndHandSum) {
  Tape tape;
  std::size_t clamped = 0;
  const std::vector<Var> dists{tape.constant(Tensor::row({0.5, 0.25, 0.25})), tape.constant(Tensor::row({0.1, 0.8, 0.1}))};
  const std::vector<Var> tprobs{tape.constant(Tensor::row({0.2, 0.5, 0.3})), tape.constant(Tensor::row({0.6, 0.3, 0.1}))};
  const std::vector<int> targets{0, 1};
  const std::vector<WordType> refs{WordType::Opinion, WordType::Aspect};
  EXPECT_NEAR(htd_loss(dists, targets, tprobs, refs, 0.0, clamped).item(), -std::log(0.5) - std::log(0.8), 1e-15);
  EXPECT_NEAR(htd_loss(dists, targets, tprobs, refs, 1.0, clamped).item(),
              -(std::log(0.5) + std::log(0.5)) - (std::log(0.8) + std::log(0.6)), 1e-15);
  const std::vector<Var> perfect{tape.constant(Tensor::row({1, 0, 0})), tape.constant(Tensor::row({0, 1, 0}))};
  const std::vector<Var> perfect_t{tape.constant(Tensor::row({0, 1, 0})), tape.constant(Tensor::row({1, 0, 0}))};
  EXPECT_EQ(htd_loss(perfect, targets, perfect_t, refs, 1.0, clamped).item(), 0.0);
  EXPECT_EQ(clamped, 0u);
  EXPECT_NEAR(htd_loss(perfect, {1, 1}, perfect_t, refs, 0.0, clamped).item(), -std::log(1e-12), 1e-9);
  EXPECT_EQ(clamped, 1u);
  EXPECT_THROW(htd_loss(dists, targets, tprobs, refs, -1.0, clamped), DomainError);
}

TEST(RhtdSampleType, DegenerateFrequencyAndDeterminism) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(rhtd_sample_type({1, 0, 0}, rng), 0u);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(rhtd_sample_type({0, 0, 1}, rng), 2u);
  std::array<std::size_t, 3> counts{};
  Rng freq(99);
  for (int i = 0; i < 30000; ++i) ++counts[rhtd_sample_type({1.0 / 3, 1.0 / 3, 1.0 / 3}, freq)];
  for (auto c : counts) EXPECT_NEAR(static_cast<double>(c) / 30000, 1.0 / 3, 0.02);
  Rng a(5), b(5);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(rhtd_sample_type({0.2, 0.5, 0.3}, a), rhtd_sample_type({0.2, 0.5, 0.3}, b));
}

TEST(RhtdReward, Codomain) {
  EXPECT_EQ(rhtd_reward(WordType::Aspect, WordType::Aspect), 1.0);
  EXPECT_EQ(rhtd_reward(WordType::Aspect, WordType::Opinion), 0.3);
  std::set<double> seen;
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) seen.insert(rhtd_reward(static_cast<WordType>(a), static_cast<WordType>(b)));
  }
  EXPECT_EQ(seen, (std::set<double>{0.3, 1.0}));
}

TEST(RhtdStepGradients, PartitionAndMissingInit) {
  const auto toy = make_toy();
  const ParameterSet p = toy_params(toy, Mode::RHTD, 5);
  Rng rng(1);
  const auto g = rhtd_step_gradients(toy.example, p, toy.types, rng);
  EXPECT_EQ(g.type_predictor.size() + g.generator.size(), p.size());
  for (const auto& [name, t] : p) {
    EXPECT_NE(g.type_predictor.count(name), g.generator.count(name)) << name;
    EXPECT_EQ(g.type_predictor.count(name), is_type_predictor_param(name) ? 1u : 0u);
  }
  EXPECT_EQ(g.rewards.size(), toy.example.target.size() + 1);
  Rng rng2(1);
  const ParameterSet pg = toy_params(toy, Mode::PGNet, 5);
  EXPECT_THROW(rhtd_step_gradients(toy.example, pg, toy.types, rng2), ConfigError);
}

TEST(RhtdStepGradients, OracleSamplerGivesSupervisedTypeGradient) {
  const auto toy = make_toy();
  const ParameterSet p = toy_params(toy, Mode::RHTD, 6);
  const TypeSampler oracle = [](const TypeProbs&, WordType ref) { return static_cast<std::size_t>(ref); };
  Rng rng(1);
  const auto g = rhtd_step_gradients(toy.example, p, toy.types, rng, oracle);
  for (const auto& r : g.rewards) EXPECT_EQ(r.reward, 1.0);

  // Reference: gradient of sum_t -log P(tp = reference type) with the type
  // predictor reading a constant copy of [s_t, h*_t].
  Tape tape;
  Binding bind(tape, p);
  auto ext = toy.types.extended(toy.example.oov);
  ExampleDecoder dec(bind, Mode::RHTD, toy.example.source, toy.example.oov.size(), &ext);
  const auto targets = decoder_targets(toy.example, Mode::RHTD, toy.vocab.size());
  Var total;
  int input = Vocabulary::kBos;
  for (int target : targets) {
    StepOptions opt;
    opt.policy = MaskPolicy::Sampled;
    opt.sampler = oracle;
    opt.reference = ext[static_cast<std::size_t>(target)];
    opt.detach_type_input = true;
    DecoderStep s = dec.step(input, opt);
    Var term = neg(log(slice(s.type_probs, 1, s.chosen_type, s.chosen_type + 1)));
    total = total.valid() ? total + term : term;
    input = target;
  }
  const GradientMap want = bind.gradients(backward(total));
  for (const auto& [name, t] : g.type_predictor) {
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_NEAR(t[i], want.at(name)[i], 1e-12) << name;
  }
}

TEST(RhtdStepGradients, GeneratorGradientUnderFixedMaskPassesGradCheck) {
  const auto toy = make_toy();
  ParameterSet p = toy_params(toy, Mode::RHTD, 7);
  // A fixed type sequence stands in for one sampled draw.
  const std::vector<std::size_t> draws{1, 0, 0, 2};
  auto fixed_sampler = [&](std::size_t& t) -> TypeSampler {
    return [&](const TypeProbs&, WordType) { return draws.at(t++); };
  };
  std::size_t counter = 0;
  Rng rng(1);
  const auto g = rhtd_step_gradients(toy.example, p, toy.types, rng, fixed_sampler(counter));
  ASSERT_EQ(counter, draws.size());

  auto word_nll = [&](Binding& bind) {
    std::size_t t = 0, clamped = 0;
    auto ext = toy.types.extended(toy.example.oov);
    ExampleDecoder dec(bind, Mode::RHTD, toy.example.source, toy.example.oov.size(), &ext);
    Var total;
    int input = Vocabulary::kBos;
    for (int target : decoder_targets(toy.example, Mode::RHTD, toy.vocab.size())) {
      StepOptions opt;
      opt.policy = MaskPolicy::Sampled;
      opt.sampler = fixed_sampler(t);
      opt.detach_type_input = true;
      Var term = nll_term(dec.step(input, opt).final_dist, static_cast<std::size_t>(target), clamped);
      total = total.valid() ? total + term : term;
      input = target;
    }
    return total;
  };
  {
    Tape tape;
    Binding bind(tape, p);
    const GradientMap want = bind.gradients(backward(word_nll(bind)));
    for (const auto& [name, t] : g.generator) {
      for (std::size_t i = 0; i < t.size(); ++i) EXPECT_NEAR(t[i], want.at(name)[i], 1e-12) << name;
    }
  }
  EXPECT_LT(grad_check(word_nll, p, 1e-6), 1e-5);
}

TEST(RhtdStepGradients, MonteCarloMatchesExactExpectation) {
  const auto toy = rhtd::testing::make_reinforce_toy();
  EXPECT_NEAR(toy.probs[2], 0.7, 0.05);
  const auto check = rhtd::testing::check_reinforce(toy, 10000, 2024);
  EXPECT_LT(check.max_relative_error, 0.05);
}

TEST(StdTiedProjections, EqualsPgnet) {
  const auto toy = make_toy();
  ParameterSet p = toy_params(toy, Mode::STD, 8);
  for (std::size_t c = 1; c < 3; ++c) {
    p.at(param::kTypedOut[c] + ".W") = p.at(param::kTypedOut[0] + ".W");
    p.at(param::kTypedOut[c] + ".b") = p.at(param::kTypedOut[0] + ".b");
  }
  ParameterSet pg = p;
  pg.add(param::kOut + ".W", p.at(param::kTypedOut[0] + ".W"));
  pg.add(param::kOut + ".b", p.at(param::kTypedOut[0] + ".b"));
  Tape tape;
  Binding bs(tape, p), bp(tape, pg);
  ExampleDecoder ds(bs, Mode::STD, toy.example.source, toy.example.oov.size());
  ExampleDecoder dp(bp, Mode::PGNet, toy.example.source, toy.example.oov.size());
  int input = Vocabulary::kBos;
  for (int target : toy.example.target) {
    DecoderStep a = ds.step(input), b = dp.step(input);
    Var pre = std_mixture(a.type_probs, a.typed);
    Var single = vocab_dist(bp, b.lstm.h, b.attention.context);
    for (std::size_t w = 0; w < toy.vocab.size(); ++w) EXPECT_NEAR(pre[w], single[w], 1e-12);
    for (std::size_t w = 0; w < a.final_dist.shape()[1]; ++w) EXPECT_NEAR(a.final_dist[w], b.final_dist[w], 1e-12);
    input = target;
  }
}

TEST(GreedyDecode, EmptyBudgetAndHtdTypeSupport) {
  const auto toy = make_toy();
  const ParameterSet p = toy_params(toy, Mode::HTD, 9);
  EXPECT_TRUE(greedy_decode_ids(p, Mode::HTD, toy.example.source, toy.example.oov.size(), 0, &toy.types, toy.example.oov).ids.empty());
  const auto ext = toy.types.extended(toy.example.oov);
  std::size_t emitted = 0;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const ParameterSet q = toy_params(toy, Mode::HTD, seed);
    const auto trace = greedy_decode_ids(q, Mode::HTD, toy.example.source, toy.example.oov.size(), 6, &toy.types, toy.example.oov);
    ASSERT_EQ(trace.ids.size(), trace.step_types.size());
    for (std::size_t t = 0; t < trace.ids.size(); ++t) {
      EXPECT_EQ(static_cast<std::size_t>(ext[static_cast<std::size_t>(trace.ids[t])]), trace.step_types[t]);
      ++emitted;
    }
  }
  EXPECT_GT(emitted, 0u);
  EXPECT_THROW(greedy_decode({}, toy.vocab, p, Mode::HTD, 5, &toy.types), InputError);
}

TEST(TeacherForced, TypedModesNeedTypes) {
  const auto toy = make_toy();
  const ParameterSet p = toy_params(toy, Mode::HTD, 1);
  Tape tape;
  Binding bind(tape, p);
  EXPECT_THROW(teacher_forced(bind, Mode::HTD, toy.example, nullptr, {}), ConfigError);
}

TEST(TeacherForced, OneStepLossGradients) {
  const auto toy = make_toy();
  for (Mode mode : {Mode::PGNet, Mode::STD, Mode::HTD}) {
    ParameterSet p = toy_params(toy, mode, 31);
    const double err = grad_check(
        [&](Binding& bind) {
          Rng rng(17);  // same Gumbel noise on every evaluation
          ForwardOptions opt;
          opt.training = true;
          opt.rng = &rng;
          return teacher_forced(bind, mode, toy.example, &toy.types, opt).objective;
        },
        p, 1e-6);
    EXPECT_LT(err, 1e-5) << mode_name(mode);
  }
}
