#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "vtlm/bpe.hpp"
#include "vtlm/error.hpp"

namespace vtlm {

struct BleuResult {
  double bleu = 0;  // 0..100
  double brevity_penalty = 0;
  std::array<double, 4> precisions{};  // fractions in [0, 1]
  std::array<long, 4> matches{};
  std::array<long, 4> totals{};
  long hyp_len = 0;
  long ref_len = 0;
};

/// Corpus-level BLEU-4 with one reference per hypothesis, whitespace
/// tokenisation and no smoothing: a zero n-gram precision gives 0.
inline BleuResult corpus_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  if (hyps.empty()) throw UsageError("corpus_bleu: empty corpus");
  if (hyps.size() != refs.size()) throw UsageError("corpus_bleu: hypothesis and reference counts differ");
  BleuResult r;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto h = split_words(hyps[s]);
    const auto f = split_words(refs[s]);
    r.hyp_len += static_cast<long>(h.size());
    r.ref_len += static_cast<long>(f.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<std::vector<std::string>, long> ref_counts;
      for (std::size_t i = 0; i + n <= f.size(); ++i) ++ref_counts[{f.begin() + static_cast<std::ptrdiff_t>(i), f.begin() + static_cast<std::ptrdiff_t>(i + n)}];
      std::map<std::vector<std::string>, long> hyp_counts;
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[{h.begin() + static_cast<std::ptrdiff_t>(i), h.begin() + static_cast<std::ptrdiff_t>(i + n)}];
      for (const auto& [gram, c] : hyp_counts) {
        const auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) r.matches[n - 1] += std::min(c, it->second);
        r.totals[n - 1] += c;
      }
    }
  }
  double log_sum = 0;
  bool zero = false;
  for (std::size_t n = 0; n < 4; ++n) {
    r.precisions[n] = r.totals[n] > 0 ? static_cast<double>(r.matches[n]) / static_cast<double>(r.totals[n]) : 0.0;
    if (r.matches[n] == 0) {
      zero = true;
    } else {
      log_sum += 0.25 * std::log(r.precisions[n]);
    }
  }
  if (r.hyp_len == 0) {
    r.brevity_penalty = 0;
  } else {
    r.brevity_penalty = r.hyp_len >= r.ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(r.ref_len) / static_cast<double>(r.hyp_len));
  }
  r.bleu = zero ? 0.0 : 100.0 * r.brevity_penalty * std::exp(log_sum);
  return r;
}

}  // namespace vtlm
