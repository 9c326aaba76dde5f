#pragma once

#include <array>
#include <map>
#include <vector>

#include "cel/cohort.hpp"
#include "cel/rng.hpp"
#include "cel/tbehrt/config.hpp"

namespace cel::tbehrt {

/// Same-category replacement candidates. Specials, protected tokens and any
/// excluded token (e.g. a withheld confounder group) are never candidates.
class ReplacementPools {
 public:
  ReplacementPools(const Vocabulary& vocab, const std::vector<bool>& excluded = {});

  /// Candidates for replacing `code`; empty when none exist.
  const std::vector<int>& candidates(int code) const;

 private:
  std::vector<TokenCategory> category_of_;
  std::map<TokenCategory, std::vector<int>> pools_;
  std::vector<int> empty_;
};

struct MaskedSequence {
  EncodedSequence seq;
  /// Original code at perturbed temporal slots, kNoLabel elsewhere.
  std::vector<int> labels;
  /// Original value of each masked static, kNoLabel when not masked.
  std::array<int, kNumStatics> static_labels{kNoLabel, kNoLabel, kNoLabel};

  std::vector<int> labeled_slots() const;
};

/// Each temporal slot is perturbed with probability cfg.mask_budget(): MASK
/// with probability mem_mask_fraction, a uniform same-category replacement
/// with mem_replace_fraction, unchanged otherwise. Observed statics are
/// masked with static_mask_prob. Withheld statics stay unlabeled.
MaskedSequence mask_encounters(const EncodedSequence& seq, const ReplacementPools& pools, const ModelConfig& cfg,
                               Rng& rng);
MaskedSequence mask_encounters(const EncodedSequence& seq, const Vocabulary& vocab, const ModelConfig& cfg, Rng& rng,
                               const std::vector<bool>& excluded = {});

}  // namespace cel::tbehrt
