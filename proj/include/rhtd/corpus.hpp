#pragma once

// Review/summary pairs: loading, length filtering, splitting, vocabulary
// construction and encoding over the per-example extended vocabulary.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rhtd/errors.hpp"
#include "rhtd/random.hpp"

namespace rhtd {

using Tokens = std::vector<std::string>;

struct ReviewPair {
  Tokens review;
  Tokens summary;

  bool operator==(const ReviewPair&) const = default;
};

// Lowercases ASCII letters and splits on whitespace; every ASCII punctuation
// character becomes a token of its own.
inline Tokens tokenize(std::string_view text) {
  Tokens out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

inline std::string join(const Tokens& tokens, std::string_view sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += sep;
    out += tokens[i];
  }
  return out;
}

inline Tokens split_whitespace(std::string_view line) {
  Tokens out;
  std::string cur;
  for (char ch : line) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace detail {

inline std::string string_field(const nlohmann::json& record, const char* key, std::size_t line) {
  auto it = record.find(key);
  if (it == record.end()) throw SchemaError(std::string("missing field \"") + key + "\"", line);
  if (!it->is_string()) throw SchemaError(std::string("field \"") + key + "\" is not a string", line);
  return it->get<std::string>();
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  return in;
}

}  // namespace detail

// Parses one JSON object per line with string fields "review" and, when
// `need_summary` is set, "summary". Blank lines are skipped.
inline std::vector<ReviewPair> parse_pairs(std::istream& in, bool need_summary = true) {
  std::vector<ReviewPair> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("malformed record: ") + e.what(), lineno);
    }
    if (!record.is_object()) throw ParseError("record is not a JSON object", lineno);
    ReviewPair p;
    p.review = tokenize(detail::string_field(record, "review", lineno));
    if (need_summary || record.contains("summary")) {
      p.summary = tokenize(detail::string_field(record, "summary", lineno));
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

inline std::vector<ReviewPair> load_pairs(const std::string& path) {
  auto in = detail::open_input(path);
  return parse_pairs(in);
}

// Writes records back out with tokens joined by single spaces.
inline void write_pairs(std::ostream& out, const std::vector<ReviewPair>& pairs) {
  for (const auto& p : pairs) {
    nlohmann::json record = {{"review", join(p.review)}, {"summary", join(p.summary)}};
    out << record.dump() << '\n';
  }
}

struct LengthFilter {
  std::size_t min_src = 10;
  std::size_t max_src = 200;
  std::size_t min_tgt = 2;
  std::size_t max_tgt = 20;

  void validate() const {
    if (min_src == 0 || min_tgt == 0 || min_src > max_src || min_tgt > max_tgt) {
      throw ConfigError("length bounds must satisfy 0 < min <= max (source " + std::to_string(min_src) + ".." +
                        std::to_string(max_src) + ", target " + std::to_string(min_tgt) + ".." +
                        std::to_string(max_tgt) + ")");
    }
  }
};

inline std::vector<ReviewPair> filter_pairs(const std::vector<ReviewPair>& pairs, const LengthFilter& bounds) {
  bounds.validate();
  std::vector<ReviewPair> kept;
  for (const auto& p : pairs) {
    const std::size_t m = p.review.size(), n = p.summary.size();
    if (m >= bounds.min_src && m <= bounds.max_src && n >= bounds.min_tgt && n <= bounds.max_tgt) kept.push_back(p);
  }
  return kept;
}

struct DatasetSplit {
  std::vector<ReviewPair> train, dev, test;
};

// Seeded shuffle, then floor(70%) / floor(10%) / remainder.
inline DatasetSplit split_dataset(const std::vector<ReviewPair>& pairs, std::uint64_t seed) {
  const std::size_t n = pairs.size();
  if (n < 10) throw SizeError("need at least 10 pairs to split, got " + std::to_string(n));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  shuffle(order, rng);
  const std::size_t n_train = 7 * n / 10, n_dev = n / 10;
  DatasetSplit split;
  for (std::size_t i = 0; i < n; ++i) {
    auto& bucket = i < n_train ? split.train : (i < n_train + n_dev ? split.dev : split.test);
    bucket.push_back(pairs[order[i]]);
  }
  return split;
}

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr std::size_t kReserved = 4;

  Vocabulary() : words_{"<pad>", "<unk>", "<s>", "</s>"}, counts_(kReserved, 0) { reindex(); }

  // Builds from an id-ordered word list; the first four must be the reserved tokens.
  static Vocabulary from_words(std::vector<std::string> words, std::vector<std::size_t> counts = {}) {
    Vocabulary v;
    if (words.size() < kReserved) throw FormatError("vocabulary must start with the four reserved tokens");
    for (std::size_t i = 0; i < kReserved; ++i) {
      if (words[i] != v.words_[i]) throw FormatError("vocabulary id " + std::to_string(i) + " must be " + v.words_[i]);
    }
    if (counts.empty()) counts.assign(words.size(), 0);
    v.words_ = std::move(words);
    v.counts_ = std::move(counts);
    v.reindex();
    if (v.index_.size() != v.words_.size()) throw FormatError("vocabulary contains duplicate tokens");
    return v;
  }

  std::size_t size() const noexcept { return words_.size(); }
  const std::string& word(std::size_t id) const { return words_.at(id); }
  const std::vector<std::string>& words() const noexcept { return words_; }
  std::size_t count(std::size_t id) const { return counts_.at(id); }

  // Id of `w`, or -1 when absent.
  int find(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? -1 : it->second;
  }
  int id(const std::string& w) const {
    const int i = find(w);
    return i < 0 ? kUnk : i;
  }

  bool operator==(const Vocabulary& o) const { return words_ == o.words_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], static_cast<int>(i));
  }

  std::vector<std::string> words_;
  std::vector<std::size_t> counts_;
  std::unordered_map<std::string, int> index_;
};

// Reserved tokens, then the most frequent training tokens (reviews and
// summaries pooled), ties broken lexicographically.
inline Vocabulary build_vocab(const std::vector<ReviewPair>& train, std::size_t max_size) {
  if (max_size <= Vocabulary::kReserved) throw ConfigError("vocabulary size must exceed 4");
  std::map<std::string, std::size_t> freq;
  for (const auto& p : train) {
    for (const auto& t : p.review) ++freq[t];
    for (const auto& t : p.summary) ++freq[t];
  }
  Vocabulary reserved;
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [w, c] : freq) {
    if (reserved.find(w) < 0) ranked.emplace_back(w, c);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > max_size - Vocabulary::kReserved) ranked.resize(max_size - Vocabulary::kReserved);
  std::vector<std::string> words = reserved.words();
  std::vector<std::size_t> counts(Vocabulary::kReserved, 0);
  for (auto& [w, c] : ranked) {
    words.push_back(w);
    counts.push_back(c);
  }
  return Vocabulary::from_words(std::move(words), std::move(counts));
}

inline void save_vocab(const std::string& path, const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  for (const auto& w : vocab.words()) out << w << '\n';
}

inline Vocabulary load_vocab(const std::string& path) {
  auto in = detail::open_input(path);
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    words.push_back(line);
  }
  return Vocabulary::from_words(std::move(words));
}

// Source and target over the extended vocabulary. Ids >= |V| index `oov`:
// id |V| + i names oov[i].
struct EncodedPair {
  std::vector<int> source;
  std::vector<int> target;
  Tokens oov;

  bool operator==(const EncodedPair&) const = default;
};

inline EncodedPair encode_pair(const ReviewPair& pair, const Vocabulary& vocab) {
  EncodedPair e;
  const int base = static_cast<int>(vocab.size());
  std::unordered_map<std::string, int> ext;
  for (const auto& t : pair.review) {
    int id = vocab.find(t);
    if (id < 0) {
      auto [it, fresh] = ext.emplace(t, base + static_cast<int>(e.oov.size()));
      if (fresh) e.oov.push_back(t);
      id = it->second;
    }
    e.source.push_back(id);
  }
  for (const auto& t : pair.summary) {
    int id = vocab.find(t);
    if (id < 0) {
      auto it = ext.find(t);
      id = it == ext.end() ? Vocabulary::kUnk : it->second;
    }
    e.target.push_back(id);
  }
  return e;
}

inline std::string id_to_word(int id, const Vocabulary& vocab, const Tokens& oov) {
  const auto v = static_cast<std::size_t>(id);
  if (v < vocab.size()) return vocab.word(v);
  if (v - vocab.size() < oov.size()) return oov[v - vocab.size()];
  throw InputError("id " + std::to_string(id) + " outside the extended vocabulary");
}

inline Tokens decode_ids(const std::vector<int>& ids, const Vocabulary& vocab, const Tokens& oov) {
  Tokens out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(id_to_word(id, vocab, oov));
  return out;
}

// Encoded dataset format, one example per line:
//   <source ids><TAB><target ids><TAB><oov words>
// Each field is space-separated; the third may be empty. Targets carry no EOS.
inline void write_encoded(std::ostream& out, const std::vector<EncodedPair>& data) {
  auto ids = [](const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) s += ' ';
      s += std::to_string(v[i]);
    }
    return s;
  };
  for (const auto& e : data) out << ids(e.source) << '\t' << ids(e.target) << '\t' << join(e.oov) << '\n';
}

inline std::vector<EncodedPair> read_encoded(std::istream& in, const Vocabulary& vocab) {
  std::vector<EncodedPair> data;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 3) throw ParseError("expected 3 tab-separated fields, got " + std::to_string(fields.size()), lineno);
    EncodedPair e;
    e.oov = split_whitespace(fields[2]);
    const long limit = static_cast<long>(vocab.size() + e.oov.size());
    auto parse_ids = [&](const std::string& field, std::vector<int>& dst) {
      for (const auto& tok : split_whitespace(field)) {
        long v = 0;
        try {
          std::size_t used = 0;
          v = std::stol(tok, &used);
          if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
          throw ParseError("bad id '" + tok + "'", lineno);
        }
        if (v < 0 || v >= limit) throw ParseError("id " + tok + " outside the extended vocabulary", lineno);
        dst.push_back(static_cast<int>(v));
      }
    };
    parse_ids(fields[0], e.source);
    parse_ids(fields[1], e.target);
    if (e.source.empty() || e.target.empty()) throw ParseError("empty source or target", lineno);
    data.push_back(std::move(e));
  }
  return data;
}

inline std::vector<EncodedPair> load_encoded(const std::string& path, const Vocabulary& vocab) {
  auto in = detail::open_input(path);
  return read_encoded(in, vocab);
}

}  // namespace rhtd
