#include "cel/tbehrt/masking.hpp"

namespace cel::tbehrt {

ReplacementPools::ReplacementPools(const Vocabulary& vocab, const std::vector<bool>& excluded) {
  category_of_.reserve(vocab.size());
  for (const Token& tok : vocab.tokens()) {
    category_of_.push_back(tok.category);
    if (tok.category == TokenCategory::special || vocab.is_protected(tok.id)) continue;
    const auto id = static_cast<std::size_t>(tok.id);
    if (id < excluded.size() && excluded[id]) continue;
    pools_[tok.category].push_back(tok.id);
  }
}

const std::vector<int>& ReplacementPools::candidates(int code) const {
  if (code < 0 || static_cast<std::size_t>(code) >= category_of_.size()) return empty_;
  const auto it = pools_.find(category_of_[static_cast<std::size_t>(code)]);
  return it == pools_.end() ? empty_ : it->second;
}

std::vector<int> MaskedSequence::labeled_slots() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != kNoLabel) out.push_back(static_cast<int>(i));
  }
  return out;
}

MaskedSequence mask_encounters(const EncodedSequence& seq, const ReplacementPools& pools, const ModelConfig& cfg,
                               Rng& rng) {
  MaskedSequence m;
  m.seq = seq;
  m.labels.assign(seq.length(), kNoLabel);
  const double mask_p = cfg.mem_mask_fraction;
  const double replace_p = mask_p + cfg.mem_replace_fraction;
  const double budget = cfg.mask_budget();
  for (std::size_t i = 1; i < seq.static_offset(); ++i) {
    const double u = rng.uniform();
    if (u >= budget) continue;
    const int original = seq.codes[i];
    m.labels[i] = original;
    if (u < mask_p) {
      m.seq.codes[i] = special_tokens::kMask;
    } else if (u < replace_p) {
      const auto& pool = pools.candidates(original);
      // Without a candidate the slot falls back to a mask.
      m.seq.codes[i] = pool.empty() ? special_tokens::kMask : pool[rng.index(pool.size())];
    }
  }
  for (std::size_t v = 0; v < kNumStatics; ++v) {
    const bool draw = rng.bernoulli(cfg.static_mask_prob);
    if (draw && seq.statics[v] != kMaskedStatic) {
      m.static_labels[v] = seq.statics[v];
      m.seq.statics[v] = kMaskedStatic;
    }
  }
  return m;
}

MaskedSequence mask_encounters(const EncodedSequence& seq, const Vocabulary& vocab, const ModelConfig& cfg, Rng& rng,
                               const std::vector<bool>& excluded) {
  return mask_encounters(seq, ReplacementPools(vocab, excluded), cfg, rng);
}

}  // namespace cel::tbehrt
