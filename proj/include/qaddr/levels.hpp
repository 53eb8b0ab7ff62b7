#pragma once

#include <array>
#include <cstddef>
#include <string_view>

namespace qaddr {

/// Cs ground hyperfine sublevels |F, m_F> that take part in addressing.
/// Storage basis is {F3M0, F4M0}; computational basis is {F3P1, F4P1}.
enum class Level : std::size_t { F3M0 = 0, F4M0 = 1, F3P1 = 2, F4P1 = 3, F3M1 = 4 };

inline constexpr std::size_t kLevelCount = 5;

constexpr std::size_t idx(Level l) { return static_cast<std::size_t>(l); }

constexpr bool is_f3(Level l) {
  return l == Level::F3M0 || l == Level::F3P1 || l == Level::F3M1;
}

std::string_view level_name(Level l);

/// Energy shift of every level in rad/s (interaction picture w.r.t. bare levels).
using LevelShifts = std::array<double, kLevelCount>;

/// Microwave transitions, ordered (lower, upper) by bare energy.
enum class Transition { Clock, TransferA, TransferB, Computational, Scan };

inline constexpr std::array<Transition, 5> kAllTransitions = {
    Transition::Clock, Transition::TransferA, Transition::TransferB,
    Transition::Computational, Transition::Scan};

struct LevelPair {
  Level lower;
  Level upper;
};

constexpr LevelPair levels_of(Transition t) {
  switch (t) {
    case Transition::Clock: return {Level::F3M0, Level::F4M0};
    case Transition::TransferA: return {Level::F3P1, Level::F4M0};
    case Transition::TransferB: return {Level::F3M0, Level::F4P1};
    case Transition::Computational: return {Level::F3P1, Level::F4P1};
    case Transition::Scan: return {Level::F3M1, Level::F4M0};
  }
  return {Level::F3M0, Level::F4M0};
}

/// Shift of a transition frequency given level shifts: upper minus lower.
constexpr double transition_shift(const LevelShifts& s, Transition t) {
  const auto p = levels_of(t);
  return s[idx(p.upper)] - s[idx(p.lower)];
}

std::string_view transition_name(Transition t);

}  // namespace qaddr
