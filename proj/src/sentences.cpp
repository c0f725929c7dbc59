#include "hierdoc/sentences.hpp"

#include <array>
#include <cctype>

namespace hierdoc {

namespace {

constexpr std::array kAbbreviations = {
    "Inc.",  "Ltd.",  "Corp.", "Co.",   "Mr.",  "Mrs.", "Ms.",  "Dr.",
    "No.",   "Nos.",  "vs.",   "etc.",  "e.g.", "i.e.", "cf.",  "St.",
    "Jan.",  "Feb.",  "Mar.",  "Apr.",  "Jun.", "Jul.", "Aug.", "Sep.",
    "Sept.", "Oct.",  "Nov.",  "Dec.",  "approx.",      "dept.",
};

bool ends_with_abbreviation(std::string_view text, size_t dot_pos) {
  // word containing the '.' at dot_pos, including the dot
  size_t start = dot_pos;
  while (start > 0 &&
         !std::isspace(static_cast<unsigned char>(text[start - 1])))
    --start;
  std::string_view word = text.substr(start, dot_pos - start + 1);
  for (std::string_view abbr : kAbbreviations)
    if (word == abbr) return true;
  return false;
}

void flush(std::vector<std::string>& out, std::string& cur) {
  size_t b = 0, e = cur.size();
  while (b < e && std::isspace(static_cast<unsigned char>(cur[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(cur[e - 1]))) --e;
  if (e > b) out.push_back(cur.substr(b, e - b));
  cur.clear();
}

}  // namespace

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  size_t i = 0;
  const size_t n = text.size();
  while (i < n) {
    const char c = text[i];

    // blank line = paragraph break
    if (c == '\n') {
      size_t j = i + 1;
      bool blank = false;
      while (j < n && (text[j] == ' ' || text[j] == '\t' || text[j] == '\r'))
        ++j;
      if (j < n && text[j] == '\n') blank = true;
      if (blank || j >= n) {
        flush(out, cur);
        i = j;
        continue;
      }
      cur += ' ';  // soft line break inside a sentence
      ++i;
      continue;
    }

    cur += c;
    if (c == '.' || c == '!' || c == '?') {
      // absorb a run of closing punctuation (e.g. ."), !)
      size_t j = i + 1;
      while (j < n && (text[j] == '"' || text[j] == '\'' || text[j] == ')')) {
        cur += text[j];
        ++j;
      }
      const bool at_end = j >= n;
      bool ws = false;
      size_t k = j;
      while (k < n && (text[k] == ' ' || text[k] == '\t' || text[k] == '\r' ||
                       text[k] == '\n')) {
        ws = true;
        ++k;
      }
      const bool capital_next =
          k < n && (std::isupper(static_cast<unsigned char>(text[k])) ||
                    std::isdigit(static_cast<unsigned char>(text[k])) ||
                    text[k] == '"' || text[k] == '(');
      const bool guard = c == '.' && ends_with_abbreviation(text, i);
      if (at_end || (ws && capital_next && !guard)) {
        flush(out, cur);
        i = k;
        continue;
      }
      i = j;
      continue;
    }
    ++i;
  }
  flush(out, cur);
  return out;
}

}  // namespace hierdoc
