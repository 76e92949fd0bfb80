#pragma once
#include "metadetr/value.hpp"

namespace metadetr {

// Fixed sinusoidal vectors standing in for support-class identity, so the
// predictor can stay class-agnostic. Row 0 is the background encoding and
// is exactly zero; rows 1..C_max are the encodings handed to support slots.
struct TaskEncodingTable {
  int c_max = 0;
  int dim = 0;
  Value rows;  // (C_max + 1) x d, constant

  Value row(int slot) const;
};

// Row i (i >= 1) interleaves sin(i / 10000^(2k/d)), cos(i / 10000^(2k/d)).
// Positions start at 1 so the [0,1,0,1,...] pattern of position 0 never
// appears in the table.
TaskEncodingTable build_table(int c_max, int d);

// Support slot -> encoding label. Label 0 is reserved for background.
int chi(int support_slot, int c);

inline constexpr int kNoObject = 0;

}  // namespace metadetr
