#include "kinesim/action_codec.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace kinesim {

namespace {

int bin_index(double value, double lo, double hi, double span) {
  const double clamped = std::clamp(value, lo, hi);
  int idx = static_cast<int>(std::floor((clamped - lo) * kActionBins / span));
  return std::clamp(idx, 0, kActionBins - 1);
}

}  // namespace

ActionToken token_from_flat(int flat) {
  if (flat < 0 || flat >= kVocabSize) {
    throw std::out_of_range("token_from_flat: flat index out of range");
  }
  return ActionToken{flat / kActionBins, flat % kActionBins};
}

ActionToken quantize(const ControlAction& u) {
  if (!std::isfinite(u.a) || !std::isfinite(u.w)) {
    throw std::invalid_argument("quantize: non-finite action");
  }
  return ActionToken{
      bin_index(u.a, kAccelMin, kAccelMax, kAccelMax - kAccelMin),
      bin_index(u.w, kYawRateMin, kYawRateMax, kYawRateMax - kYawRateMin)};
}

ControlAction dequantize(const ActionToken& t) {
  if (t.ia < 0 || t.ia >= kActionBins || t.iw < 0 || t.iw >= kActionBins) {
    throw std::out_of_range("dequantize: bin index out of range");
  }
  // Integer-centered form: bin 31 maps to exactly 0 for both axes.
  ControlAction u;
  u.a = static_cast<double>(2 * t.ia + 1 - kActionBins) * kAccelMax / kActionBins;
  u.w = static_cast<double>(2 * t.iw + 1 - kActionBins) * kYawRateMax / kActionBins;
  return u;
}

}  // namespace kinesim
