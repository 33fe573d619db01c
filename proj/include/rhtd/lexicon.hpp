#pragma once

// Aspect/opinion lexicon mining by Double Propagation over dependency parses,
// and the aspect/opinion/context partition of the vocabulary.

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rhtd/corpus.hpp"
#include "rhtd/errors.hpp"

namespace rhtd {

struct ParsedToken {
  std::string form;
  std::string pos;
  std::size_t head = 0;  // 1-based index of the governor; 0 is the root
  std::string deprel;
};

using ParsedSentence = std::vector<ParsedToken>;

using WordSet = std::set<std::string>;

struct Lexicon {
  WordSet aspects;
  WordSet opinions;

  bool operator==(const Lexicon&) const = default;
};

enum class WordType : int { Aspect = 0, Opinion = 1, Context = 2 };
inline constexpr std::size_t kNumTypes = 3;

inline const char* type_name(WordType t) {
  switch (t) {
    case WordType::Aspect: return "aspect";
    case WordType::Opinion: return "opinion";
    case WordType::Context: return "context";
  }
  return "?";
}

inline std::string lowercase(std::string s) {
  for (char& c : s) {
    if (static_cast<unsigned char>(c) < 0x80) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return s;
}

// Tab-separated token lines: index, form, POS, head, deprel. A blank line ends
// a sentence.
inline std::vector<ParsedSentence> parse_conll(std::istream& in) {
  std::vector<ParsedSentence> corpus;
  ParsedSentence sent;
  std::vector<std::size_t> head_lines;
  std::size_t sent_start = 0;

  auto close = [&] {
    if (sent.empty()) return;
    for (std::size_t i = 0; i < sent.size(); ++i) {
      if (sent[i].head > sent.size()) {
        throw ParseError("head " + std::to_string(sent[i].head) + " outside a sentence of " +
                             std::to_string(sent.size()) + " tokens",
                         head_lines[i]);
      }
    }
    corpus.push_back(std::move(sent));
    sent.clear();
    head_lines.clear();
  };

  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      close();
      continue;
    }
    if (sent.empty()) sent_start = lineno;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cols.size() != 5) throw ParseError("expected 5 columns, got " + std::to_string(cols.size()), lineno);
    auto number = [&](const std::string& s, const char* what) {
      if (s.empty() || !std::all_of(s.begin(), s.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
        throw ParseError(std::string("bad ") + what + " '" + s + "'", lineno);
      }
      return static_cast<std::size_t>(std::stoull(s));
    };
    const std::size_t index = number(cols[0], "token index");
    if (index != sent.size() + 1) {
      throw ParseError("token index " + cols[0] + " out of sequence (sentence starting at line " +
                           std::to_string(sent_start) + ")",
                       lineno);
    }
    if (cols[1].empty() || cols[2].empty()) throw ParseError("empty form or POS tag", lineno);
    sent.push_back({cols[1], cols[2], number(cols[3], "head index"), cols[4]});
    head_lines.push_back(lineno);
  }
  close();
  return corpus;
}

inline std::vector<ParsedSentence> load_parsed_corpus(const std::string& path) {
  auto in = detail::open_input(path);
  return parse_conll(in);
}

// One word per line; lines starting with ';' are comments.
inline WordSet read_seed_opinions(std::istream& in) {
  WordSet words;
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == ';') continue;
    const auto last = line.find_last_not_of(" \t\r");
    words.insert(lowercase(line.substr(first, last - first + 1)));
  }
  return words;
}

inline WordSet load_seed_opinions(const std::string& path) {
  auto in = detail::open_input(path);
  return read_seed_opinions(in);
}

inline bool is_noun_tag(const std::string& pos) { return pos == "NN" || pos == "NNS"; }
inline bool is_adj_tag(const std::string& pos) { return pos == "JJ" || pos == "JJS" || pos == "JJR"; }

struct Expansion {
  WordSet aspects;
  WordSet opinions;

  bool empty() const { return aspects.empty() && opinions.empty(); }
};

// One pass of the four rules over every dependency edge, reading only the
// lexicon as it stood before the pass. Edges match on relation and the
// unordered pair of endpoint POS roles; head direction is ignored.
//   nn    NN-NN  aspect spreads to aspect
//   conj  JJ-JJ  opinion spreads to opinion
//   nsubj NN-JJ  opinion -> aspect, aspect -> opinion
//   amod  JJ-NN  opinion -> aspect, aspect -> opinion
inline Expansion propagate_step(const std::vector<ParsedSentence>& corpus, const Lexicon& lex) {
  Expansion found;
  auto add_aspect = [&](const std::string& w) {
    if (!lex.aspects.count(w)) found.aspects.insert(w);
  };
  auto add_opinion = [&](const std::string& w) {
    if (!lex.opinions.count(w)) found.opinions.insert(w);
  };

  for (const auto& sent : corpus) {
    for (const auto& dep : sent) {
      if (dep.head == 0) continue;
      const ParsedToken& gov = sent[dep.head - 1];
      const std::string a = lowercase(dep.form), b = lowercase(gov.form);
      const bool a_nn = is_noun_tag(dep.pos), b_nn = is_noun_tag(gov.pos);
      const bool a_jj = is_adj_tag(dep.pos), b_jj = is_adj_tag(gov.pos);

      if (dep.deprel == "nn" && a_nn && b_nn) {
        if (lex.aspects.count(a)) add_aspect(b);
        if (lex.aspects.count(b)) add_aspect(a);
      } else if (dep.deprel == "conj" && a_jj && b_jj) {
        if (lex.opinions.count(a)) add_opinion(b);
        if (lex.opinions.count(b)) add_opinion(a);
      } else if ((dep.deprel == "nsubj" || dep.deprel == "amod") && ((a_nn && b_jj) || (a_jj && b_nn))) {
        const std::string& noun = a_nn ? a : b;
        const std::string& adj = a_nn ? b : a;
        if (lex.opinions.count(adj)) add_aspect(noun);
        if (lex.aspects.count(noun)) add_opinion(adj);
      }
    }
  }
  return found;
}

struct PropagationResult {
  Lexicon lexicon;
  std::size_t passes = 0;  // passes run, including the final one that added nothing
};

// Seeds the opinion list with the seed words that occur in the corpus, then
// repeats propagate_step to a fixpoint. Words extracted as both types are
// kept as opinions only.
inline PropagationResult run_double_propagation(const std::vector<ParsedSentence>& corpus, const WordSet& seeds) {
  PropagationResult r;
  for (const auto& sent : corpus) {
    for (const auto& tok : sent) {
      const std::string w = lowercase(tok.form);
      if (seeds.count(w)) r.lexicon.opinions.insert(w);
    }
  }
  // Every rule needs a known word on one side, so an empty start is already a fixpoint.
  while (!r.lexicon.opinions.empty()) {
    ++r.passes;
    Expansion step = propagate_step(corpus, r.lexicon);
    if (step.empty()) break;
    r.lexicon.aspects.merge(step.aspects);
    r.lexicon.opinions.merge(step.opinions);
  }
  for (const auto& w : r.lexicon.opinions) r.lexicon.aspects.erase(w);
  return r;
}

// "word<TAB>A|O" lines sorted by word.
inline void write_lexicon(std::ostream& out, const Lexicon& lex) {
  std::vector<std::pair<std::string, char>> rows;
  for (const auto& w : lex.aspects) rows.emplace_back(w, 'A');
  for (const auto& w : lex.opinions) rows.emplace_back(w, 'O');
  std::sort(rows.begin(), rows.end());
  for (const auto& [w, t] : rows) out << w << '\t' << t << '\n';
}

inline Lexicon read_lexicon(std::istream& in) {
  Lexicon lex;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || line.find('\t', tab + 1) != std::string::npos) {
      throw ParseError("expected word<TAB>A|O", lineno);
    }
    const std::string word = lowercase(line.substr(0, tab));
    const std::string tag = line.substr(tab + 1);
    if (tag == "A") {
      lex.aspects.insert(word);
    } else if (tag == "O") {
      lex.opinions.insert(word);
    } else {
      throw ParseError("unknown word type '" + tag + "'", lineno);
    }
  }
  for (const auto& w : lex.opinions) lex.aspects.erase(w);
  return lex;
}

inline Lexicon load_lexicon(const std::string& path) {
  auto in = detail::open_input(path);
  return read_lexicon(in);
}

inline void save_lexicon(const std::string& path, const Lexicon& lex) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  write_lexicon(out, lex);
}

// Opinion wins over aspect; everything else, reserved tokens included, is context.
inline WordType word_type(const std::string& word, const Lexicon& lex) {
  const std::string w = lowercase(word);
  if (lex.opinions.count(w)) return WordType::Opinion;
  if (lex.aspects.count(w)) return WordType::Aspect;
  return WordType::Context;
}

inline std::vector<WordType> assign_word_types(const Vocabulary& vocab, const Lexicon& lex) {
  std::vector<WordType> types(vocab.size(), WordType::Context);
  for (std::size_t i = Vocabulary::kReserved; i < vocab.size(); ++i) types[i] = word_type(vocab.word(i), lex);
  return types;
}

inline std::array<std::size_t, kNumTypes> type_counts(const std::vector<WordType>& types) {
  std::array<std::size_t, kNumTypes> n{};
  for (WordType t : types) ++n[static_cast<std::size_t>(t)];
  return n;
}

}  // namespace rhtd
