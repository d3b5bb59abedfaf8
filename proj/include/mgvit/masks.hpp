// Patch-mask and salience-map value types, shared by the model and the
// mask-generation pipeline.
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mgvit/common.hpp"

namespace mgvit::mask {

enum class MaskKind { discrete, continued };

inline const char* to_string(MaskKind k) {
  return k == MaskKind::discrete ? "discrete" : "continued";
}

inline MaskKind mask_kind_from_string(const std::string& s) {
  if (s == "discrete") return MaskKind::discrete;
  if (s == "continued") return MaskKind::continued;
  throw InputError("unknown mask kind: " + s);
}

// Binary per-patch mask in patch row-major order. `k` is the top-k budget of
// the discrete source; a continued mask's popcount may exceed it.
struct MaskSpec {
  std::vector<double> bits;
  MaskKind kind = MaskKind::discrete;
  std::size_t k = 0;

  static MaskSpec all_ones(std::size_t n) {
    MaskSpec m;
    m.bits.assign(n, 1.0);
    m.kind = MaskKind::discrete;
    m.k = n;
    return m;
  }

  std::size_t popcount() const {
    std::size_t c = 0;
    for (double b : bits) c += (b == 1.0);
    return c;
  }

  void validate_binary() const {
    for (double b : bits) {
      if (b != 0.0 && b != 1.0) throw InputError("mask entries must be 0 or 1");
    }
  }
};

// Per-patch importance scores, one per patch, absolute-gradient sums.
struct SalienceMap {
  std::vector<double> values;
  int sample_id = -1;
  int label = -1;
};

}  // namespace mgvit::mask
