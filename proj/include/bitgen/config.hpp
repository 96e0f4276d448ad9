#pragma once

#include <cstdint>

// The element type is fixed per build. The default library is 32-bit; the
// gradient-check build defines BITGEN_DOUBLE. Each configuration lives in its
// own inline namespace so both can be linked into the same executable.
#ifdef BITGEN_DOUBLE
#define BITGEN_ABI f64
#else
#define BITGEN_ABI f32
#endif

#define BITGEN_NAMESPACE_BEGIN \
  namespace bitgen {           \
  inline namespace BITGEN_ABI {
#define BITGEN_NAMESPACE_END \
  }                          \
  }

BITGEN_NAMESPACE_BEGIN

#ifdef BITGEN_DOUBLE
using real = double;
#else
using real = float;
#endif

inline constexpr bool kDoublePrecision = sizeof(real) == 8;

BITGEN_NAMESPACE_END
