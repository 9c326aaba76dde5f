#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cel {

enum class TokenCategory { diagnosis, medication, bp_bucket, special };

std::string_view to_string(TokenCategory c);
TokenCategory parse_token_category(std::string_view s);

namespace special_tokens {
inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kMask = 2;
inline constexpr int kCls = 3;
inline constexpr int kSep = 4;
inline constexpr int kCount = 5;
}  // namespace special_tokens

struct Token {
  int id = 0;
  std::string label;
  TokenCategory category = TokenCategory::special;

  bool operator==(const Token&) const = default;
};

/// Dense token table with group memberships and the protected (exposure /
/// outcome defining) set. Group ids are the rank of the group name in
/// lexicographic order, so they are stable under serialization.
class Vocabulary {
 public:
  /// Vocabulary holding only PAD, UNK, MASK, CLS, SEP at ids 0..4.
  static Vocabulary with_specials();

  int add_token(std::string label, TokenCategory category);
  /// Assigns `token` to `group`, creating the group if needed. A token belongs
  /// to at most one group.
  void assign_group(int token, const std::string& group);
  void add_protected(int token);

  std::size_t size() const { return tokens_.size(); }
  const Token& token(int id) const;
  const std::vector<Token>& tokens() const { return tokens_; }
  bool contains(int id) const { return id >= 0 && static_cast<std::size_t>(id) < tokens_.size(); }
  std::optional<int> find(std::string_view label) const;

  bool is_protected(int id) const { return protected_.count(id) > 0; }
  const std::set<int>& protected_set() const { return protected_; }

  const std::map<std::string, std::vector<int>>& groups() const { return groups_; }
  std::vector<std::string> group_names() const;
  /// Group id of `token`, or -1 when the token has no group.
  int group_of(int token) const;
  int group_id(std::string_view name) const;
  const std::vector<int>& group_members(std::string_view name) const;

  std::vector<int> tokens_in_category(TokenCategory c) const;
  /// Bucket token for bucket index 0..15, looked up by its canonical label.
  int bp_token(int bucket_index) const;

  void validate() const;

  bool operator==(const Vocabulary& other) const {
    return tokens_ == other.tokens_ && protected_ == other.protected_ && groups_ == other.groups_;
  }

 private:
  std::vector<Token> tokens_;
  std::set<int> protected_;
  std::map<std::string, std::vector<int>> groups_;
};

struct Encounter {
  int code = 0;
  int age = 0;
  int year = 0;
  int position = 0;

  bool operator==(const Encounter&) const = default;
};

struct StaticVars {
  int sex = 0;
  int region = 0;
  int smoking = 0;

  bool operator==(const StaticVars&) const = default;
};

inline constexpr std::size_t kNumStatics = 3;
enum class StaticVar : std::size_t { sex = 0, region = 1, smoking = 2 };

struct PatientRecord {
  std::string id;
  StaticVars statics;
  std::vector<Encounter> encounters;
  int t = 0;
  int y = 0;
  /// (y0, y1), synthetic cohorts only.
  std::optional<std::pair<int, int>> potential_outcomes;
  std::optional<double> lambda;

  bool operator==(const PatientRecord&) const = default;
};

struct Cohort {
  Vocabulary vocabulary;
  std::vector<PatientRecord> patients;
  std::string provenance = "ingested";

  /// Throws ValidationError naming the first offending patient.
  void validate() const;

  bool operator==(const Cohort&) const = default;
};

/// Checks one patient against `vocab`; throws ValidationError with the id.
void validate_patient(const PatientRecord& p, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Blood pressure bucketing

inline constexpr int kNumBpBuckets = 16;

/// Bucket index in [0, 16): [.., 116) -> 0, [116,121) -> 1, ..., [181,186) -> 14,
/// >= 186 -> 15. Values below 90 clamp into bucket 0.
int bp_bucket_index(double systolic);

/// Token id of the bucket for `systolic` in `vocab`.
int bucket_bp(double systolic, const Vocabulary& vocab);

std::string bp_bucket_label(int bucket_index);

// ---------------------------------------------------------------------------
// Sequence encoding

/// Static slot value meaning "not observed" (masked or withheld).
inline constexpr int kMaskedStatic = -1;
/// Label meaning "slot not perturbed".
inline constexpr int kNoLabel = -1;

/// Parallel arrays for one patient. Layout: [CLS, e_1 .. e_K, sex, region,
/// smoking]. Static slots carry PAD in `codes`; their values live in `statics`.
struct EncodedSequence {
  std::vector<int> codes;
  std::vector<int> ages;
  std::vector<int> years;
  std::vector<int> positions;
  std::array<int, kNumStatics> statics{};

  std::size_t length() const { return codes.size(); }
  /// Number of encounter slots K (CLS and statics excluded).
  std::size_t num_encounters() const { return codes.size() - 1 - kNumStatics; }
  std::size_t static_offset() const { return codes.size() - kNumStatics; }
  bool is_temporal_slot(std::size_t i) const { return i >= 1 && i < static_offset(); }

  bool operator==(const EncodedSequence&) const = default;
};

struct EncodeOptions {
  /// Codes stripped from the sequence before truncation (e.g. a withheld
  /// confounder's code group). Indexed by token id; empty means none.
  std::vector<bool> drop_codes;
  /// Statics forced to kMaskedStatic.
  std::array<bool, kNumStatics> withhold_statics{};
};

struct EncodeDiagnostics {
  std::size_t unknown_codes = 0;
  std::size_t dropped_codes = 0;
  std::size_t truncated_encounters = 0;
};

/// Encodes `p` into the CLS-first, statics-last layout with total length at
/// most `max_len`. Longer histories keep their most recent encounters.
EncodedSequence encode_patient(const PatientRecord& p, const Vocabulary& vocab, std::size_t max_len,
                               EncodeDiagnostics* diagnostics = nullptr,
                               const EncodeOptions& options = {});

/// Truncates a history to its most recent `max_encounters` encounters,
/// renumbering positions. Exposure and outcome fields are untouched.
PatientRecord truncate_history(const PatientRecord& p, std::size_t max_encounters);

}  // namespace cel
