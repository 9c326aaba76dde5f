#include <doctest.h>

#include <map>

#include "cel/errors.hpp"
#include "cel/folds.hpp"

using namespace cel;

TEST_SUITE("folds") {
  TEST_CASE("balanced ten patients give pairs with one treated each") {
    std::vector<int> t = {1, 0, 1, 0, 1, 0, 1, 0, 1, 0};
    const auto f = kfold_split(t, 5, 3);
    std::map<int, std::pair<int, int>> count;
    for (std::size_t i = 0; i < t.size(); ++i) {
      count[f[i]].first += 1;
      count[f[i]].second += t[i];
    }
    REQUIRE(count.size() == 5);
    for (auto& [fold, c] : count) {
      CHECK(c.first == 2);
      CHECK(c.second == 1);
    }
  }

  TEST_CASE("deterministic per seed") {
    std::vector<int> t(100);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = (i * 7 % 3 == 0) ? 1 : 0;
    CHECK(kfold_split(t, 5, 1) == kfold_split(t, 5, 1));
    CHECK(kfold_split(t, 5, 1) != kfold_split(t, 5, 2));
  }

  TEST_CASE("remainder arithmetic and stratification") {
    std::vector<int> t(1003);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = (i % 3 == 0) ? 1 : 0;
    const auto f = kfold_split(t, 5, 9);
    std::vector<int> size(5), treated(5);
    for (std::size_t i = 0; i < t.size(); ++i) {
      REQUIRE(f[i] >= 0);
      REQUIRE(f[i] < 5);
      size[f[i]] += 1;
      treated[f[i]] += t[i];
    }
    for (int k = 0; k < 5; ++k) {
      CHECK((size[k] == 200 || size[k] == 201));
      CHECK(std::abs(treated[k] - treated[0]) <= 1);
    }
  }

  TEST_CASE("errors") {
    CHECK_THROWS_AS(kfold_split(std::vector<int>{1, 0, 1}, 5, 0), ValidationError);
    CHECK_THROWS_AS(kfold_split(std::vector<int>{1, 0, 0, 0}, 2, 0), ValidationError);
    CHECK_THROWS_AS(kfold_split(std::vector<int>{1, 0, 1, 0}, 1, 0), ValidationError);
  }
}
