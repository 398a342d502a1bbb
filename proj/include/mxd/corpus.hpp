#pragma once

// Deterministic English-like text for training the toy LM.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mxd/error.hpp"
#include "mxd/rng.hpp"

namespace mxd {

namespace detail {

inline constexpr std::array<std::string_view, 24> kNouns = {
    "cat",    "dog",   "bird",   "house", "river",  "garden", "teacher", "child",
    "window", "road",  "market", "boat",  "forest", "letter", "engine",  "city",
    "farmer", "horse", "book",   "table", "lamp",   "storm",  "bridge",  "song"};
inline constexpr std::array<std::string_view, 16> kVerbs = {
    "sees", "finds", "likes", "carries", "follows", "paints", "builds", "opens",
    "reads", "hears", "watches", "keeps", "moves", "shows", "takes", "fixes"};
inline constexpr std::array<std::string_view, 16> kAdjectives = {
    "old", "red", "quiet", "small", "bright", "cold", "green", "heavy",
    "happy", "dark", "long", "soft", "warm", "empty", "tall", "brave"};
inline constexpr std::array<std::string_view, 8> kNames = {"anna", "ben", "clara", "david", "emma", "felix", "grace", "henry"};
inline constexpr std::array<std::string_view, 8> kPlaces = {"the hill", "the shore", "the town", "the field",
                                                            "the valley", "the station", "the square", "the harbor"};
inline constexpr std::array<std::string_view, 6> kTimes = {"in the morning", "at night", "every day",
                                                           "on sunday", "after lunch", "before the rain"};

/// Zipf-like index: low indices are more frequent.
inline std::size_t zipf_index(Rng& rng, std::size_t n) {
    const std::size_t a = rng.index(n), b = rng.index(n);
    return a < b ? a : b;
}

template <std::size_t N>
std::string_view pick(Rng& rng, const std::array<std::string_view, N>& words) {
    return words[zipf_index(rng, N)];
}

inline std::string noun_phrase(Rng& rng) {
    std::string s = rng.uniform() < 0.5 ? "the " : "a ";
    if (rng.uniform() < 0.4) {
        s += pick(rng, kAdjectives);
        s += ' ';
    }
    s += pick(rng, kNouns);
    return s;
}

inline std::string sentence(Rng& rng) {
    std::string s;
    switch (rng.index(5)) {
    case 0:
        s = noun_phrase(rng) + " " + std::string(pick(rng, kVerbs)) + " " + noun_phrase(rng);
        break;
    case 1:
        s = std::string(pick(rng, kNames)) + " " + std::string(pick(rng, kVerbs)) + " " + noun_phrase(rng) + " near " +
            std::string(pick(rng, kPlaces));
        break;
    case 2:
        s = std::string(pick(rng, kTimes)) + " " + noun_phrase(rng) + " " + std::string(pick(rng, kVerbs)) + " " +
            std::string(pick(rng, kNames));
        break;
    case 3:
        s = noun_phrase(rng) + " is " + std::string(pick(rng, kAdjectives)) + " and " +
            std::string(pick(rng, kAdjectives));
        break;
    default:
        s = std::string(pick(rng, kNames)) + " counts " + std::to_string(1 + rng.index(12)) + " " +
            std::string(pick(rng, kNouns)) + "s";
        break;
    }
    s[0] = static_cast<char>(s[0] - 'a' + 'A');
    s += rng.uniform() < 0.85 ? ". " : "? ";
    return s;
}

} // namespace detail

/// At least `bytes` bytes of printable ASCII text, fully determined by `seed`.
inline std::vector<std::uint8_t> synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
    if (bytes == 0) throw DomainError("synthetic_corpus: size must be >= 1");
    Rng rng(seed);
    std::vector<std::uint8_t> out;
    out.reserve(bytes + 128);
    std::size_t in_paragraph = 0;
    while (out.size() < bytes) {
        for (char ch : detail::sentence(rng)) out.push_back(static_cast<std::uint8_t>(ch));
        if (++in_paragraph >= 4 + rng.index(4)) {
            out.back() = '\n';
            in_paragraph = 0;
        }
    }
    out.resize(bytes);
    return out;
}

} // namespace mxd
