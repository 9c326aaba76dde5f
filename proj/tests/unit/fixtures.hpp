#pragma once

#include <string>

#include "cel/cohort.hpp"

namespace fixtures {

// Tiny hand-built vocabulary: two disease groups, one medication group, one
// protected exposure code.
inline cel::Vocabulary small_vocab() {
  auto v = cel::Vocabulary::with_specials();
  v.assign_group(v.add_token("D/a0", cel::TokenCategory::diagnosis), "dis_a");  // 5
  v.assign_group(v.add_token("D/a1", cel::TokenCategory::diagnosis), "dis_a");  // 6
  v.assign_group(v.add_token("D/b0", cel::TokenCategory::diagnosis), "dis_b");  // 7
  v.assign_group(v.add_token("M/c0", cel::TokenCategory::medication), "med_c");  // 8
  v.add_protected(v.add_token("EXPOSURE/x", cel::TokenCategory::medication));   // 9
  return v;
}

inline cel::PatientRecord patient(const std::string& id, std::initializer_list<int> codes, int t = 0, int y = 0) {
  cel::PatientRecord p;
  p.id = id;
  p.statics = {1, 2, 0};
  int pos = 0;
  for (int c : codes) {
    p.encounters.push_back({c, 40 + pos, 2000 + pos, pos});
    ++pos;
  }
  p.t = t;
  p.y = y;
  return p;
}

}  // namespace fixtures
