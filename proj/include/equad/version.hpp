#pragma once

namespace equad {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace equad
