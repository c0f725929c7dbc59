#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace hierdoc {

// Rule-based sentence splitter: breaks after sentence-final . ! ? followed
// by whitespace and a capital/digit, and at blank lines. A short
// abbreviation guard list ("Inc.", "Mr.", ...) suppresses false breaks.
// Empty fragments are dropped; empty input yields an empty list.
std::vector<std::string> split_sentences(std::string_view raw_text);

}  // namespace hierdoc
