#pragma once

#include "kinesim/kinematics.hpp"

namespace kinesim {

inline constexpr int kActionBins = 63;
inline constexpr int kVocabSize = kActionBins * kActionBins;  // 3969
inline constexpr double kAccelMin = -5.0;
inline constexpr double kAccelMax = 5.0;
inline constexpr double kYawRateMin = -1.5;
inline constexpr double kYawRateMax = 1.5;
inline constexpr double kAccelBinWidth = (kAccelMax - kAccelMin) / kActionBins;
inline constexpr double kYawRateBinWidth = (kYawRateMax - kYawRateMin) / kActionBins;

/// Index into the 63x63 discrete action codebook. The flat index is
/// acceleration-major: flat = ia * 63 + iw, the class index used by the
/// model head.
struct ActionToken {
  int ia{0};  // acceleration bin, 0..62
  int iw{0};  // yaw-rate bin, 0..62

  int flat() const { return ia * kActionBins + iw; }
  bool operator==(const ActionToken&) const = default;
};

/// Rebuilds a token from its flat index. Throws on out-of-range input.
ActionToken token_from_flat(int flat);

/// Bins a continuous action. Out-of-range values clamp into the boundary bins
/// (logged data may exceed the normal driving range). Throws on non-finite
/// input.
ActionToken quantize(const ControlAction& u);

/// Bin-center representative of a token. The odd bin count makes the zero
/// action exactly representable, so stationary agents stay drift-free.
/// Throws on out-of-range indices.
ControlAction dequantize(const ActionToken& t);

}  // namespace kinesim
