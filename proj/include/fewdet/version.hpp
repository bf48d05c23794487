#pragma once

namespace fewdet {

inline constexpr const char* kFewdetVersion = "fewdet 0.1.0";

}  // namespace fewdet
