#include "hierdoc/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <unordered_map>

#include "hierdoc/errors.hpp"

namespace hierdoc {

Vocab::Vocab() {
  token_strings_.resize(kNumSpecials + 256);
  for (int b = 0; b < 256; ++b)
    token_strings_[kByteBase + b] = std::string(1, static_cast<char>(b));
}

const std::string& Vocab::token_bytes(int id) const {
  if (id < 0 || id >= size())
    throw ContractError("Vocab: token id " + std::to_string(id) +
                        " outside [0, " + std::to_string(size()) + ")");
  return token_strings_[id];
}

void Vocab::add_merge(int left, int right) {
  const int id = size();
  if (left < kByteBase || right < kByteBase || left >= id || right >= id)
    throw ContractError("Vocab: merge rule references invalid token ids");
  merge_rank_[{left, right}] = static_cast<int>(merges_.size());
  merges_.emplace_back(left, right);
  token_strings_.push_back(token_strings_[left] + token_strings_[right]);
}

std::vector<std::string> Vocab::pretokenize(std::string_view text) {
  std::vector<std::string> chunks;
  size_t i = 0;
  while (i < text.size()) {
    size_t start = i;
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i])))
      ++i;
    while (i < text.size() &&
           !std::isspace(static_cast<unsigned char>(text[i])))
      ++i;
    chunks.emplace_back(text.substr(start, i - start));
  }
  return chunks;
}

std::vector<int> Vocab::encode(std::string_view text) const {
  std::vector<int> out;
  for (const std::string& chunk : pretokenize(text)) {
    std::vector<int> ids;
    ids.reserve(chunk.size());
    for (unsigned char b : chunk) ids.push_back(kByteBase + b);
    // repeatedly apply the lowest-ranked applicable merge
    while (ids.size() >= 2) {
      int best_rank = std::numeric_limits<int>::max();
      size_t best_pos = 0;
      for (size_t j = 0; j + 1 < ids.size(); ++j) {
        auto it = merge_rank_.find({ids[j], ids[j + 1]});
        if (it != merge_rank_.end() && it->second < best_rank) {
          best_rank = it->second;
          best_pos = j;
        }
      }
      if (best_rank == std::numeric_limits<int>::max()) break;
      const int merged = kNumSpecials + 256 + best_rank;
      std::vector<int> next;
      next.reserve(ids.size() - 1);
      size_t j = 0;
      while (j < ids.size()) {
        if (j + 1 < ids.size() && ids[j] == merges_[best_rank].first &&
            ids[j + 1] == merges_[best_rank].second) {
          next.push_back(merged);
          j += 2;
        } else {
          next.push_back(ids[j]);
          ++j;
        }
      }
      ids = std::move(next);
    }
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) out += token_bytes(id);
  return out;
}

namespace {

// Escape for the one-rule-per-line vocab file: keep it valid UTF-8/ASCII.
std::string escape_bytes(const std::string& s) {
  std::string out;
  for (unsigned char c : s) {
    if (c == '\\') {
      out += "\\\\";
    } else if (c > 0x20 && c < 0x7f) {
      out += static_cast<char>(c);
    } else {
      char buf[8];
      std::snprintf(buf, sizeof buf, "\\x%02x", c);
      out += buf;
    }
  }
  return out;
}

}  // namespace

void Vocab::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write vocab file " + path);
  f << "hierdoc-vocab v1\n";
  f << "special PAD 0\nspecial BOS 1\nspecial EOS 2\nspecial MASK 3\n"
       "special UNK 4\n";
  f << "bytes " << kByteBase << " 256\n";
  for (size_t i = 0; i < merges_.size(); ++i) {
    f << "merge " << merges_[i].first << " " << merges_[i].second << " # "
      << escape_bytes(token_strings_[kNumSpecials + 256 + i]) << "\n";
  }
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open vocab file " + path);
  std::string line;
  if (!std::getline(f, line) || line != "hierdoc-vocab v1")
    throw DataError("bad vocab file header in " + path);
  Vocab v;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string kind;
    is >> kind;
    if (kind == "special" || kind == "bytes") continue;  // fixed layout
    if (kind == "merge") {
      int l = -1, r = -1;
      if (!(is >> l >> r))
        throw DataError(path + ":" + std::to_string(lineno) +
                        ": malformed merge rule");
      v.add_merge(l, r);
    } else {
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": unknown record '" + kind + "'");
    }
  }
  return v;
}

Vocab train_bpe(const std::vector<std::string>& corpus, int vocab_size) {
  if (corpus.empty()) throw DataError("train_bpe: empty corpus");
  if (vocab_size <= Vocab::kNumSpecials + 256)
    throw ContractError("train_bpe: vocab_size must exceed " +
                        std::to_string(Vocab::kNumSpecials + 256));

  // unique chunks with frequencies, in first-seen order for determinism
  std::unordered_map<std::string, size_t> chunk_index;
  std::vector<std::vector<int>> words;
  std::vector<int64_t> freq;
  bool any = false;
  for (const std::string& line : corpus) {
    for (const std::string& chunk : Vocab::pretokenize(line)) {
      if (chunk.empty()) continue;
      any = true;
      auto it = chunk_index.find(chunk);
      if (it == chunk_index.end()) {
        chunk_index.emplace(chunk, words.size());
        std::vector<int> ids;
        ids.reserve(chunk.size());
        for (unsigned char b : chunk) ids.push_back(Vocab::kByteBase + b);
        words.push_back(std::move(ids));
        freq.push_back(1);
      } else {
        ++freq[it->second];
      }
    }
  }
  if (!any) throw DataError("train_bpe: corpus has no content");

  using Pair = std::pair<int, int>;
  std::map<Pair, int64_t> counts;
  std::map<Pair, std::set<size_t>> where;
  auto count_word = [&](size_t w, int64_t sign) {
    const auto& ids = words[w];
    for (size_t j = 0; j + 1 < ids.size(); ++j) {
      Pair p{ids[j], ids[j + 1]};
      counts[p] += sign * freq[w];
      if (sign > 0)
        where[p].insert(w);
    }
  };
  for (size_t w = 0; w < words.size(); ++w) count_word(w, +1);

  Vocab vocab;
  while (vocab.size() < vocab_size) {
    Pair best{-1, -1};
    int64_t best_count = 1;  // a pair must repeat to be worth merging
    for (const auto& [p, c] : counts) {
      if (c > best_count || (c == best_count && best.first >= 0 && p < best)) {
        best = p;
        best_count = c;
      }
    }
    if (best.first < 0) break;
    const int merged = vocab.size();
    vocab.add_merge(best.first, best.second);

    auto hit = where.find(best);
    std::vector<size_t> touched(hit->second.begin(), hit->second.end());
    for (size_t w : touched) {
      count_word(w, -1);
      for (size_t j = 0; j + 1 < words[w].size(); ++j) {
        Pair p{words[w][j], words[w][j + 1]};
        where[p].erase(w);
      }
      auto& ids = words[w];
      std::vector<int> next;
      next.reserve(ids.size());
      size_t j = 0;
      while (j < ids.size()) {
        if (j + 1 < ids.size() && ids[j] == best.first &&
            ids[j + 1] == best.second) {
          next.push_back(merged);
          j += 2;
        } else {
          next.push_back(ids[j]);
          ++j;
        }
      }
      ids = std::move(next);
      count_word(w, +1);
    }
    // drop exhausted entries so the scan stays tight
    for (auto it = counts.begin(); it != counts.end();) {
      if (it->second <= 0) {
        where.erase(it->first);
        it = counts.erase(it);
      } else {
        ++it;
      }
    }
  }
  return vocab;
}

}  // namespace hierdoc
