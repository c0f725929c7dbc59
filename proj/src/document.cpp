#include "hierdoc/document.hpp"

#include <fstream>

#include "hierdoc/errors.hpp"
#include "hierdoc/sentences.hpp"
#include "json.hpp"

namespace hierdoc {

TokenizedSentence encode_sentence(const std::string& text, const Vocab& vocab,
                                  int max_sentence_len) {
  size_t b = text.find_first_not_of(" \t\r\n");
  if (b == std::string::npos)
    throw DataError("encode_sentence: empty sentence");
  std::vector<int> content = vocab.encode(text);
  const int max_content = max_sentence_len - 2;
  if (static_cast<int>(content.size()) > max_content)
    content.resize(max_content);
  TokenizedSentence s;
  s.ids.reserve(content.size() + 2);
  s.ids.push_back(Vocab::kBos);
  s.ids.insert(s.ids.end(), content.begin(), content.end());
  s.ids.push_back(Vocab::kEos);
  return s;
}

std::string decode_sentence(const TokenizedSentence& s, const Vocab& vocab) {
  return vocab.decode(s.ids);
}

Document build_document(const DocMeta& meta,
                        const std::vector<std::string>& sentence_texts,
                        const Vocab& vocab, Limits limits) {
  Document doc;
  doc.meta = meta;
  for (const std::string& text : sentence_texts) {
    if (doc.size() >= limits.max_sentences) break;
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    doc.sentences.push_back(
        encode_sentence(text, vocab, limits.max_sentence_len));
  }
  if (doc.sentences.empty())
    throw DataError("build_document: no usable sentences in " + meta.doc_id);
  return doc;
}

Document document_from_raw(const RawDoc& raw, const Vocab& vocab,
                           Limits limits) {
  if (raw.has_pretokenized) {
    Document doc;
    doc.meta = raw.meta;
    for (const auto& ids : raw.pretokenized) {
      if (doc.size() >= limits.max_sentences) break;
      if (ids.size() < 2 ||
          static_cast<int>(ids.size()) > limits.max_sentence_len ||
          ids.front() != Vocab::kBos || ids.back() != Vocab::kEos)
        throw DataError("document_from_raw: malformed pretokenized sentence in " +
                        raw.meta.doc_id);
      doc.sentences.push_back({ids});
    }
    if (doc.sentences.empty())
      throw DataError("document_from_raw: no sentences in " + raw.meta.doc_id);
    return doc;
  }
  return build_document(raw.meta, split_sentences(raw.text), vocab, limits);
}

std::vector<RawDoc> load_corpus_jsonl(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open corpus file " + path);
  std::vector<RawDoc> docs;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": bad JSON: " +
                      e.what());
    }
    RawDoc d;
    try {
      d.meta.doc_id = j.at("doc_id").get<std::string>();
      d.meta.ticker = j.at("ticker").get<std::string>();
      d.meta.filing_date = Date::parse(j.at("filing_date").get<std::string>());
      d.meta.doc_type = j.value("doc_type", std::string("news_release"));
      if (j.contains("sentences")) {
        d.pretokenized = j.at("sentences").get<std::vector<std::vector<int>>>();
        d.has_pretokenized = true;
      } else {
        d.text = j.at("text").get<std::string>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": missing/invalid field: " + e.what());
    }
    docs.push_back(std::move(d));
  }
  return docs;
}

void save_corpus_jsonl(const std::string& path,
                       const std::vector<RawDoc>& docs) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write corpus file " + path);
  for (const RawDoc& d : docs) {
    nlohmann::json j;
    j["doc_id"] = d.meta.doc_id;
    j["ticker"] = d.meta.ticker;
    j["filing_date"] = d.meta.filing_date.str();
    j["doc_type"] = d.meta.doc_type;
    if (d.has_pretokenized)
      j["sentences"] = d.pretokenized;
    else
      j["text"] = d.text;
    f << j.dump() << "\n";
  }
}

}  // namespace hierdoc
