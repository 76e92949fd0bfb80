#include <cmath>
#include <cstring>

#include "doctest.h"
#include "metadetr/encodings.hpp"

using namespace metadetr;

TEST_CASE("background row is exactly zero") {
  TaskEncodingTable t = build_table(5, 16);
  for (int j = 0; j < 16; ++j) CHECK(t.rows.at(0, j) == 0.0);
}

TEST_CASE("the position-0 pattern [0,1,0,1,...] never appears") {
  TaskEncodingTable t = build_table(8, 12);
  for (int i = 0; i <= 8; ++i) {
    bool is_pos0 = true;
    for (int k = 0; k < 6; ++k)
      if (t.rows.at(i, 2 * k) != 0.0 || t.rows.at(i, 2 * k + 1) != 1.0) is_pos0 = false;
    CHECK_FALSE(is_pos0);
  }
}

TEST_CASE("d=4 position 1 matches the sinusoid formula") {
  TaskEncodingTable t = build_table(2, 4);
  CHECK(t.rows.at(1, 0) == doctest::Approx(0.84147).epsilon(1e-5));
  CHECK(t.rows.at(1, 1) == doctest::Approx(0.54030).epsilon(1e-5));
  CHECK(t.rows.at(1, 2) == doctest::Approx(0.01000).epsilon(1e-4));
  CHECK(t.rows.at(1, 3) == doctest::Approx(0.99995).epsilon(1e-5));
}

TEST_CASE("entries stay in [-1, 1] and build is bitwise pure") {
  TaskEncodingTable a = build_table(16, 32);
  TaskEncodingTable b = build_table(16, 32);
  for (double v : a.rows.data()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  CHECK(std::memcmp(a.rows.data().data(), b.rows.data().data(),
                    a.rows.size() * sizeof(double)) == 0);
}

TEST_CASE("rows are pairwise distinct with margin for d >= 16") {
  for (int d : {16, 32, 64}) {
    TaskEncodingTable t = build_table(16, d);
    for (int i = 1; i <= 16; ++i)
      for (int j = i + 1; j <= 16; ++j) {
        double dist = 0.0;
        for (int k = 0; k < d; ++k) {
          double diff = t.rows.at(i, k) - t.rows.at(j, k);
          dist += diff * diff;
        }
        CHECK(std::sqrt(dist) > 0.1);
      }
  }
}

TEST_CASE("chi is the identity on valid slots and rejects the rest") {
  CHECK(chi(1, 5) == 1);
  CHECK(chi(5, 5) == 5);
  CHECK_THROWS_AS(chi(0, 5), std::invalid_argument);
  CHECK_THROWS_AS(chi(6, 5), std::invalid_argument);
}

TEST_CASE("odd dimension is rejected") {
  CHECK_THROWS_AS(build_table(4, 7), std::invalid_argument);
  CHECK_THROWS_AS(build_table(0, 8), std::invalid_argument);
}
