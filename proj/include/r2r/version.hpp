#pragma once

namespace r2r {

inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace r2r
