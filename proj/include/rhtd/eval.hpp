#pragma once

// ROUGE-1/2 (clipped n-gram overlap) and ROUGE-L (longest common
// subsequence), per pair and macro-averaged over a corpus.

#include <algorithm>
#include <cstdio>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "rhtd/corpus.hpp"
#include "rhtd/errors.hpp"
#include "rhtd/lexicon.hpp"

namespace rhtd {

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline RougeScore make_score(double precision, double recall) {
  const double pr = precision + recall;
  return {precision, recall, pr > 0 ? 2.0 * precision * recall / pr : 0.0};
}

namespace detail {

inline Tokens lowered(const Tokens& t) {
  Tokens out;
  out.reserve(t.size());
  for (const auto& w : t) out.push_back(lowercase(w));
  return out;
}

inline std::map<Tokens, std::size_t> ngram_counts(const Tokens& t, std::size_t n) {
  std::map<Tokens, std::size_t> counts;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++counts[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

}  // namespace detail

inline RougeScore rouge_n(const Tokens& candidate, const Tokens& reference, std::size_t n) {
  if (n == 0) throw DomainError("ROUGE-N needs n >= 1");
  const auto cand = detail::ngram_counts(detail::lowered(candidate), n);
  const auto ref = detail::ngram_counts(detail::lowered(reference), n);
  std::size_t n_cand = 0, n_ref = 0, overlap = 0;
  for (const auto& [g, c] : cand) n_cand += c;
  for (const auto& [g, c] : ref) {
    n_ref += c;
    auto it = cand.find(g);
    if (it != cand.end()) overlap += std::min(c, it->second);
  }
  if (n_cand == 0 || n_ref == 0) return {};
  return make_score(static_cast<double>(overlap) / static_cast<double>(n_cand),
                    static_cast<double>(overlap) / static_cast<double>(n_ref));
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline RougeScore rouge_l(const Tokens& candidate, const Tokens& reference) {
  if (candidate.empty() || reference.empty()) return {};
  const auto l = static_cast<double>(lcs_length(detail::lowered(candidate), detail::lowered(reference)));
  return make_score(l / static_cast<double>(candidate.size()), l / static_cast<double>(reference.size()));
}

struct RougeReport {
  RougeScore rouge1, rouge2, rougeL;
  std::size_t pairs = 0;
};

// Unweighted mean of per-pair precision, recall and F1.
inline RougeReport corpus_rouge(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references) {
  if (candidates.empty()) throw InputError("ROUGE over an empty corpus");
  if (candidates.size() != references.size()) {
    throw InputError("candidate and reference counts differ (" + std::to_string(candidates.size()) + " vs " +
                     std::to_string(references.size()) + ")");
  }
  RougeReport r;
  auto add = [](RougeScore& acc, const RougeScore& s) {
    acc.precision += s.precision;
    acc.recall += s.recall;
    acc.f1 += s.f1;
  };
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    add(r.rouge1, rouge_n(candidates[i], references[i], 1));
    add(r.rouge2, rouge_n(candidates[i], references[i], 2));
    add(r.rougeL, rouge_l(candidates[i], references[i]));
  }
  const auto n = static_cast<double>(candidates.size());
  for (RougeScore* s : {&r.rouge1, &r.rouge2, &r.rougeL}) {
    s->precision /= n;
    s->recall /= n;
    s->f1 /= n;
  }
  r.pairs = candidates.size();
  return r;
}

// "metric<TAB>precision<TAB>recall<TAB>f1", one line per metric.
inline void write_report(std::ostream& out, const RougeReport& r) {
  auto line = [&](const char* name, const RougeScore& s) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s\t%.6f\t%.6f\t%.6f\n", name, s.precision, s.recall, s.f1);
    out << buf;
  };
  line("ROUGE-1", r.rouge1);
  line("ROUGE-2", r.rouge2);
  line("ROUGE-L", r.rougeL);
}

// One whitespace-tokenized summary per line; blank lines are empty summaries.
inline std::vector<Tokens> load_summaries(const std::string& path) {
  auto in = detail::open_input(path);
  std::vector<Tokens> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(split_whitespace(line));
  return out;
}

}  // namespace rhtd
