#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dbs {

// Model size ladder shared by the backbone and the aggregators.
enum class Variant { kTiny, kS, kM, kL };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::kTiny: return "tiny";
    case Variant::kS: return "S";
    case Variant::kM: return "M";
    case Variant::kL: return "L";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "tiny") return Variant::kTiny;
  if (s == "S" || s == "s") return Variant::kS;
  if (s == "M" || s == "m") return Variant::kM;
  if (s == "L" || s == "l") return Variant::kL;
  throw std::invalid_argument("unknown variant '" + std::string(s) + "' (expected tiny, S, M or L)");
}

struct VariantDefaults {
  int c4;                // quarter-resolution feature channels
  int groups;            // correlation groups
  int blocks_per_stage;  // spatial/disparity pairs per encoder/decoder scale
};

inline VariantDefaults defaults_for(Variant v) {
  switch (v) {
    case Variant::kTiny: return {32, 8, 1};
    case Variant::kS: return {48, 8, 1};
    case Variant::kM: return {64, 16, 2};
    case Variant::kL: return {96, 16, 3};
  }
  throw std::logic_error("bad variant");
}

}  // namespace dbs
