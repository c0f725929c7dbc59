#pragma once

#include <string>
#include <vector>

#include "hierdoc/date.hpp"
#include "hierdoc/vocab.hpp"

namespace hierdoc {

struct Limits {
  int max_sentence_len = 128;  // token ids per sentence, BOS/EOS included
  int max_sentences = 512;
};

// BOS ... EOS, length in [2, max_sentence_len].
struct TokenizedSentence {
  std::vector<int> ids;
  int length() const { return static_cast<int>(ids.size()); }
};

struct DocMeta {
  std::string doc_id;
  std::string ticker;
  Date filing_date;
  std::string doc_type;  // e.g. "news_release", "mda"
};

struct Document {
  DocMeta meta;
  std::vector<TokenizedSentence> sentences;
  int size() const { return static_cast<int>(sentences.size()); }
};

// Raw corpus record as stored in the JSON-lines corpus file; either `text`
// or pre-tokenized `sentences` is populated.
struct RawDoc {
  DocMeta meta;
  std::string text;
  std::vector<std::vector<int>> pretokenized;
  bool has_pretokenized = false;
};

// BPE-encode one sentence and frame it with BOS/EOS. Sentences beyond the
// length cap keep their first max_len-2 content tokens.
TokenizedSentence encode_sentence(const std::string& text, const Vocab& vocab,
                                  int max_sentence_len = 128);

std::string decode_sentence(const TokenizedSentence& s, const Vocab& vocab);

// Encode sentences in order; documents beyond the cap keep the first
// max_sentences sentences. Throws DataError when nothing usable remains.
Document build_document(const DocMeta& meta,
                        const std::vector<std::string>& sentence_texts,
                        const Vocab& vocab, Limits limits = {});

Document document_from_raw(const RawDoc& raw, const Vocab& vocab,
                           Limits limits = {});

// JSON-lines corpus IO:
// {"doc_id","ticker","filing_date","doc_type","text"} or {..., "sentences"}.
std::vector<RawDoc> load_corpus_jsonl(const std::string& path);
void save_corpus_jsonl(const std::string& path,
                       const std::vector<RawDoc>& docs);

}  // namespace hierdoc
