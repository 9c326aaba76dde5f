#include "cel/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_set>

#include "cel/errors.hpp"

namespace cel {

std::string_view to_string(TokenCategory c) {
  switch (c) {
    case TokenCategory::diagnosis:
      return "diagnosis";
    case TokenCategory::medication:
      return "medication";
    case TokenCategory::bp_bucket:
      return "bp-bucket";
    case TokenCategory::special:
      return "special";
  }
  return "special";
}

TokenCategory parse_token_category(std::string_view s) {
  if (s == "diagnosis") return TokenCategory::diagnosis;
  if (s == "medication") return TokenCategory::medication;
  if (s == "bp-bucket") return TokenCategory::bp_bucket;
  if (s == "special") return TokenCategory::special;
  throw ValidationError("unknown token category '" + std::string(s) + "'");
}

Vocabulary Vocabulary::with_specials() {
  Vocabulary v;
  v.add_token("[PAD]", TokenCategory::special);
  v.add_token("[UNK]", TokenCategory::special);
  v.add_token("[MASK]", TokenCategory::special);
  v.add_token("[CLS]", TokenCategory::special);
  v.add_token("[SEP]", TokenCategory::special);
  return v;
}

int Vocabulary::add_token(std::string label, TokenCategory category) {
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(Token{id, std::move(label), category});
  return id;
}

void Vocabulary::assign_group(int token, const std::string& group) {
  if (!contains(token)) throw ValidationError("group member " + std::to_string(token) + " not in vocabulary");
  if (group_of(token) >= 0) {
    throw ValidationError("token " + std::to_string(token) + " already belongs to a group");
  }
  auto& members = groups_[group];
  members.insert(std::upper_bound(members.begin(), members.end(), token), token);
}

void Vocabulary::add_protected(int token) {
  if (!contains(token)) throw ValidationError("protected token " + std::to_string(token) + " not in vocabulary");
  protected_.insert(token);
}

const Token& Vocabulary::token(int id) const {
  if (!contains(id)) throw ValidationError("token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<int> Vocabulary::find(std::string_view label) const {
  for (const auto& t : tokens_) {
    if (t.label == label) return t.id;
  }
  return std::nullopt;
}

std::vector<std::string> Vocabulary::group_names() const {
  std::vector<std::string> names;
  names.reserve(groups_.size());
  for (const auto& [name, _] : groups_) names.push_back(name);
  return names;
}

int Vocabulary::group_of(int token) const {
  int gid = 0;
  for (const auto& [name, members] : groups_) {
    if (std::binary_search(members.begin(), members.end(), token)) return gid;
    ++gid;
  }
  return -1;
}

int Vocabulary::group_id(std::string_view name) const {
  int gid = 0;
  for (const auto& [n, _] : groups_) {
    if (n == name) return gid;
    ++gid;
  }
  return -1;
}

const std::vector<int>& Vocabulary::group_members(std::string_view name) const {
  auto it = groups_.find(std::string(name));
  if (it == groups_.end()) throw ValidationError("unknown group '" + std::string(name) + "'");
  return it->second;
}

std::vector<int> Vocabulary::tokens_in_category(TokenCategory c) const {
  std::vector<int> out;
  for (const auto& t : tokens_) {
    if (t.category == c) out.push_back(t.id);
  }
  return out;
}

int Vocabulary::bp_token(int bucket_index) const {
  auto id = find(bp_bucket_label(bucket_index));
  if (!id) throw ValidationError("vocabulary has no token for BP bucket " + std::to_string(bucket_index));
  return *id;
}

void Vocabulary::validate() const {
  if (tokens_.size() < static_cast<std::size_t>(special_tokens::kCount)) {
    throw ValidationError("vocabulary is missing special tokens");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].id != static_cast<int>(i)) throw ValidationError("token ids are not dense");
  }
  if (tokens_[special_tokens::kPad].label != "[PAD]") throw ValidationError("PAD must have id 0");
  for (int p : protected_) {
    if (!contains(p)) throw ValidationError("protected token outside vocabulary");
  }
  std::unordered_set<int> seen;
  for (const auto& [name, members] : groups_) {
    for (int m : members) {
      if (!contains(m)) throw ValidationError("group '" + name + "' has unknown member");
      if (!seen.insert(m).second) throw ValidationError("token in more than one group");
    }
  }
}

void validate_patient(const PatientRecord& p, const Vocabulary& vocab) {
  auto fail = [&](const std::string& msg) { throw ValidationError("patient '" + p.id + "': " + msg); };
  if (p.id.empty()) fail("empty id");
  if (p.t != 0 && p.t != 1) fail("exposure must be 0 or 1");
  if (p.y != 0 && p.y != 1) fail("outcome must be 0 or 1");
  if (p.statics.sex != 0 && p.statics.sex != 1) fail("sex must be 0 or 1");
  if (p.statics.smoking != 0 && p.statics.smoking != 1) fail("smoking must be 0 or 1");
  if (p.statics.region < 0) fail("region must be non-negative");
  if (p.potential_outcomes) {
    const auto [y0, y1] = *p.potential_outcomes;
    if ((y0 != 0 && y0 != 1) || (y1 != 0 && y1 != 1)) fail("potential outcomes must be binary");
    if (p.y != (p.t == 1 ? y1 : y0)) fail("factual outcome disagrees with potential outcomes");
  }
  if (p.lambda && !(*p.lambda >= 0.0 && *p.lambda <= 1.0)) fail("lambda outside [0,1]");
  for (std::size_t j = 0; j < p.encounters.size(); ++j) {
    const auto& e = p.encounters[j];
    if (!vocab.contains(e.code)) fail("code " + std::to_string(e.code) + " not in vocabulary");
    if (e.age < 0) fail("negative age");
    if (j > 0) {
      const auto& prev = p.encounters[j - 1];
      if (e.position <= prev.position) fail("positions must strictly increase");
      if (e.age < prev.age) fail("ages must be non-decreasing");
    }
  }
}

void Cohort::validate() const {
  vocabulary.validate();
  std::unordered_set<std::string> ids;
  for (const auto& p : patients) {
    validate_patient(p, vocabulary);
    if (!ids.insert(p.id).second) throw ValidationError("duplicate patient id '" + p.id + "'");
  }
}

int bp_bucket_index(double systolic) {
  if (!std::isfinite(systolic)) throw ValidationError("systolic value must be finite");
  if (systolic < 116.0) return 0;
  if (systolic >= 186.0) return kNumBpBuckets - 1;
  return 1 + static_cast<int>(std::floor((systolic - 116.0) / 5.0));
}

int bucket_bp(double systolic, const Vocabulary& vocab) {
  return vocab.bp_token(bp_bucket_index(systolic));
}

std::string bp_bucket_label(int bucket_index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "BP_%02d", bucket_index);
  return buf;
}

PatientRecord truncate_history(const PatientRecord& p, std::size_t max_encounters) {
  PatientRecord out = p;
  if (out.encounters.size() > max_encounters) {
    out.encounters.erase(out.encounters.begin(),
                         out.encounters.end() - static_cast<std::ptrdiff_t>(max_encounters));
  }
  for (std::size_t j = 0; j < out.encounters.size(); ++j) out.encounters[j].position = static_cast<int>(j);
  return out;
}

EncodedSequence encode_patient(const PatientRecord& p, const Vocabulary& vocab, std::size_t max_len,
                               EncodeDiagnostics* diagnostics, const EncodeOptions& options) {
  if (max_len < 1 + kNumStatics) {
    throw ValidationError("max_len must leave room for CLS and static slots");
  }
  EncodeDiagnostics local;
  EncodeDiagnostics& diag = diagnostics ? *diagnostics : local;

  std::vector<const Encounter*> kept;
  kept.reserve(p.encounters.size());
  for (const auto& e : p.encounters) {
    if (vocab.contains(e.code) && static_cast<std::size_t>(e.code) < options.drop_codes.size() &&
        options.drop_codes[static_cast<std::size_t>(e.code)]) {
      ++diag.dropped_codes;
      continue;
    }
    kept.push_back(&e);
  }
  const std::size_t capacity = max_len - 1 - kNumStatics;
  std::size_t first = 0;
  if (kept.size() > capacity) {
    first = kept.size() - capacity;
    diag.truncated_encounters += first;
  }

  EncodedSequence seq;
  const std::size_t k = kept.size() - first;
  const std::size_t len = 1 + k + kNumStatics;
  seq.codes.reserve(len);
  seq.ages.reserve(len);
  seq.years.reserve(len);
  seq.positions.reserve(len);

  // CLS carries the timestamp of the earliest kept encounter.
  const Encounter* head = k > 0 ? kept[first] : nullptr;
  seq.codes.push_back(special_tokens::kCls);
  seq.ages.push_back(head ? head->age : 0);
  seq.years.push_back(head ? head->year : 0);
  seq.positions.push_back(0);

  for (std::size_t j = first; j < kept.size(); ++j) {
    const Encounter& e = *kept[j];
    int code = e.code;
    if (!vocab.contains(code)) {
      code = special_tokens::kUnk;
      ++diag.unknown_codes;
    }
    seq.codes.push_back(code);
    seq.ages.push_back(e.age);
    seq.years.push_back(e.year);
    seq.positions.push_back(static_cast<int>(j - first + 1));
  }
  // Static slots repeat the last timestamp and continue the position count so
  // the whole array stays monotone; embeddings ignore these fields there.
  const int tail_age = seq.ages.back();
  const int tail_year = seq.years.back();
  for (std::size_t s = 0; s < kNumStatics; ++s) {
    seq.codes.push_back(special_tokens::kPad);
    seq.ages.push_back(tail_age);
    seq.years.push_back(tail_year);
    seq.positions.push_back(static_cast<int>(k + 1 + s));
  }
  seq.statics = {p.statics.sex, p.statics.region, p.statics.smoking};
  for (std::size_t s = 0; s < kNumStatics; ++s) {
    if (options.withhold_statics[s]) seq.statics[s] = kMaskedStatic;
  }
  return seq;
}

}  // namespace cel
