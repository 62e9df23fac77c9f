#pragma once

// Lexical (BM25) retrieval over a local plain-text knowledge corpus.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "epiagent/error.hpp"

namespace epiagent {

// Lowercased maximal runs of ASCII alphanumerics.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

struct CorpusDocument {
  std::string doc_id;
  std::string text;
  std::map<std::string, std::size_t> term_counts;
  std::size_t length = 0;

  static CorpusDocument make(std::string doc_id, std::string text) {
    CorpusDocument d{std::move(doc_id), std::move(text), {}, 0};
    for (auto& tok : tokenize(d.text)) {
      ++d.term_counts[tok];
      ++d.length;
    }
    return d;
  }
};

// doc_id is the file name; files are read in name order.
inline std::vector<CorpusDocument> load_corpus(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error("corpus directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file()) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<CorpusDocument> corpus;
  for (const auto& f : files) {
    std::ifstream in(f);
    std::stringstream ss;
    ss << in.rdbuf();
    corpus.push_back(CorpusDocument::make(f.filename().string(), ss.str()));
  }
  return corpus;
}

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;
};

struct RankedDocument {
  std::string doc_id;
  double score = 0.0;
};

// Okapi BM25 with the nonnegative idf ln(1 + (N - n + 0.5) / (n + 0.5)).
// Repeated query terms count once. Ties break on ascending doc_id.
inline std::vector<RankedDocument> retrieve(const std::string& query, const std::vector<CorpusDocument>& corpus,
                                            std::size_t k, Bm25Params params = {}) {
  if (k == 0) throw Error("retrieve: k must be positive");
  if (corpus.empty()) return {};
  const auto terms_vec = tokenize(query);
  const std::set<std::string> terms(terms_vec.begin(), terms_vec.end());
  const double n_docs = static_cast<double>(corpus.size());
  double avgdl = 0.0;
  for (const auto& d : corpus) avgdl += static_cast<double>(d.length);
  avgdl /= n_docs;

  std::map<std::string, double> idf;
  for (const auto& t : terms) {
    double df = 0.0;
    for (const auto& d : corpus) df += d.term_counts.count(t) ? 1.0 : 0.0;
    idf[t] = std::log(1.0 + (n_docs - df + 0.5) / (df + 0.5));
  }

  std::vector<RankedDocument> ranked;
  ranked.reserve(corpus.size());
  for (const auto& d : corpus) {
    double score = 0.0;
    const double norm = avgdl > 0.0 ? static_cast<double>(d.length) / avgdl : 0.0;
    for (const auto& t : terms) {
      auto it = d.term_counts.find(t);
      if (it == d.term_counts.end()) continue;
      const double tf = static_cast<double>(it->second);
      score += idf[t] * tf * (params.k1 + 1.0) / (tf + params.k1 * (1.0 - params.b + params.b * norm));
    }
    ranked.push_back({d.doc_id, score});
  }
  std::sort(ranked.begin(), ranked.end(), [](const RankedDocument& a, const RankedDocument& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.doc_id < b.doc_id;
  });
  ranked.resize(std::min(k, ranked.size()));
  return ranked;
}

}  // namespace epiagent
