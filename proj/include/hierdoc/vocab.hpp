#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace hierdoc {

// Byte-level BPE vocabulary. Id layout: specials [0,5), raw bytes [5,261),
// merged tokens after that in merge order. Byte coverage means any input
// encodes without UNK and decodes back exactly.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kMask = 3;
  static constexpr int kUnk = 4;
  static constexpr int kNumSpecials = 5;
  static constexpr int kByteBase = kNumSpecials;  // byte b -> id kByteBase + b

  Vocab();

  int size() const { return kNumSpecials + 256 + static_cast<int>(merges_.size()); }
  const std::vector<std::pair<int, int>>& merges() const { return merges_; }

  // Byte string a token expands to (empty for specials).
  const std::string& token_bytes(int id) const;

  void add_merge(int left, int right);

  // BPE-encode raw text to content token ids (no BOS/EOS, no specials).
  std::vector<int> encode(std::string_view text) const;

  // Concatenate token byte strings; special ids contribute nothing.
  std::string decode(const std::vector<int>& ids) const;

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

  // Whitespace attaches to the following chunk so that concatenation of
  // chunks reproduces the input exactly. Exposed for the trainer and tests.
  static std::vector<std::string> pretokenize(std::string_view text);

 private:
  std::vector<std::pair<int, int>> merges_;
  std::vector<std::string> token_strings_;          // id -> bytes
  std::map<std::pair<int, int>, int> merge_rank_;   // pair -> merge index
};

// Greedy pair-merge training over byte sequences: the highest-count adjacent
// pair merges each round (ties to the numerically smallest pair) until the
// budget is reached or no pair occurs twice.
Vocab train_bpe(const std::vector<std::string>& corpus, int vocab_size);

}  // namespace hierdoc
