#include "metadetr/encodings.hpp"

#include <cmath>

#include "metadetr/ops.hpp"

namespace metadetr {

Value TaskEncodingTable::row(int slot) const {
  check(slot >= 0 && slot <= c_max, "task encoding slot out of range: " + std::to_string(slot));
  return slice_rows(rows, slot, 1);
}

TaskEncodingTable build_table(int c_max, int d) {
  check(c_max >= 1, "build_table: C_max must be at least 1");
  check(d % 2 == 0, "build_table: dimension must be even, got " + std::to_string(d));
  TaskEncodingTable t;
  t.c_max = c_max;
  t.dim = d;
  t.rows = Value::zeros(c_max + 1, d);
  for (int i = 1; i <= c_max; ++i) {
    for (int k = 0; k < d / 2; ++k) {
      double freq = std::pow(10000.0, 2.0 * k / d);
      t.rows.at(i, 2 * k) = std::sin(i / freq);
      t.rows.at(i, 2 * k + 1) = std::cos(i / freq);
    }
  }
  return t;
}

int chi(int support_slot, int c) {
  check(support_slot >= 1 && support_slot <= c,
        "chi: support slot " + std::to_string(support_slot) + " outside 1.." + std::to_string(c) +
            " (0 is reserved for background)");
  return support_slot;
}

}  // namespace metadetr
