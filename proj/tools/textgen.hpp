#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "define/rng.hpp"

// Deterministic synthetic word-level corpus. Pseudo-words are drawn from a
// Zipfian unigram distribution and each word prefers a small set of successor
// words, so the text has bigram structure a language model can learn. Same
// spec, same bytes, on any platform.

namespace textgen {

struct CorpusSpec {
  std::uint64_t seed = 1;         // fixes the language: words and successors
  std::uint64_t sample_seed = 1;  // fixes the token stream drawn from it
  std::size_t target_bytes = 1 << 20;
  std::size_t word_types = 6000;
};

namespace detail {

inline std::vector<std::string> make_words(std::size_t count, define::Rng& rng) {
  static const std::vector<std::string> onsets{
      "b", "c",  "d",  "f",  "g",  "h",  "j",  "k",  "l",  "m",
      "n", "p",  "r",  "s",  "t",  "v",  "w",  "z",  "br", "ch",
      "cl", "dr", "fl", "gr", "pl", "pr", "sh", "sl", "st", "tr"};
  static const std::vector<std::string> vowels{"a",  "e",  "i",  "o",  "u",
                                               "ai", "ea", "ie", "oo", "ou"};
  static const std::vector<std::string> codas{"",  "",  "",  "n",  "r",  "s",
                                              "t", "l", "m", "nd", "st", "ck"};
  std::set<std::string> seen;
  std::vector<std::string> words;
  words.reserve(count);
  while (words.size() < count) {
    const std::size_t syllables = 1 + rng.next_below(3);
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
      w += onsets[rng.next_below(onsets.size())];
      w += vowels[rng.next_below(vowels.size())];
    }
    w += codas[rng.next_below(codas.size())];
    if (seen.insert(w).second) words.push_back(std::move(w));
  }
  return words;
}

// Binary search over a cumulative weight table.
struct ZipfSampler {
  std::vector<double> cum;
  explicit ZipfSampler(std::size_t n, double exponent = 1.05) {
    cum.resize(n);
    double total = 0;
    for (std::size_t r = 0; r < n; ++r) {
      total += 1.0 / std::pow(static_cast<double>(r + 2), exponent);
      cum[r] = total;
    }
    for (double& c : cum) c /= total;
  }
  std::size_t sample(define::Rng& rng) const {
    const double u = rng.next_double();
    return std::lower_bound(cum.begin(), cum.end(), u) - cum.begin();
  }
};

}  // namespace detail

inline std::string generate(const CorpusSpec& spec) {
  define::Rng model_rng(spec.seed);
  const auto words = detail::make_words(spec.word_types, model_rng);
  const detail::ZipfSampler unigram(spec.word_types);

  // every word keeps a handful of preferred successors
  const std::size_t partners = 24;
  std::vector<std::uint32_t> successor(spec.word_types * partners);
  for (auto& s : successor)
    s = static_cast<std::uint32_t>(unigram.sample(model_rng));
  const detail::ZipfSampler partner_pick(partners, 1.0);

  define::Rng rng = define::Rng(spec.seed).fork(spec.sample_seed);
  std::string out;
  out.reserve(spec.target_bytes + 256);
  std::size_t prev = unigram.sample(rng);
  while (out.size() < spec.target_bytes) {
    const std::size_t len = 6 + rng.next_below(10) + rng.next_below(10);
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t word =
          rng.next_double() < 0.6
              ? successor[prev * partners + partner_pick.sample(rng)]
              : unigram.sample(rng);
      out += words[word];
      out += i + 1 == len ? '\n' : ' ';
      prev = word;
    }
  }
  return out;
}

}  // namespace textgen
