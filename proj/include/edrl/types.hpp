// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace edrl {

inline constexpr std::size_t kModalities = 2;

enum class Modality : std::size_t { m1 = 0, m2 = 1 };

inline constexpr std::array<Modality, kModalities> kAllModalities{Modality::m1, Modality::m2};

inline std::size_t index(Modality m) { return static_cast<std::size_t>(m); }

inline Modality other(Modality m) { return m == Modality::m1 ? Modality::m2 : Modality::m1; }

inline std::string to_string(Modality m) { return m == Modality::m1 ? "M1" : "M2"; }

inline Modality parse_modality(std::string_view text) {
  if (text == "M1" || text == "m1") return Modality::m1;
  if (text == "M2" || text == "m2") return Modality::m2;
  throw std::invalid_argument("unknown modality '" + std::string(text) + "' (expected M1 or M2)");
}

}  // namespace edrl
