// SPDX-License-Identifier: Apache-2.0
//
// Corpus ingestion, sampling, and sequence packing.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "adaptkit/tokenizer.hpp"

namespace adaptkit::data {

struct CorpusSpec {
  std::string source;  // local path or http(s):// URL
  std::string language;
  std::size_t sample_count = 0;  // 0: keep every document
  std::uint64_t seed = 0;
  std::filesystem::path cache_dir = ".adaptkit-cache";
};

// Byte offset of the first invalid UTF-8 sequence, if any.
std::optional<std::size_t> first_invalid_utf8(std::string_view bytes);

// CRLF -> LF, then one document per line. A trailing newline does not start
// an extra document; interior empty lines are kept as empty documents.
std::vector<std::string> split_documents(std::string_view bytes);

// Single GET, cached under cache_dir by content SHA-256. A URL already in the
// cache index whose content file still matches its hash is served locally.
std::string fetch_http(const std::string& url, const std::filesystem::path& cache_dir);

// Reads (or fetches) the source, validates UTF-8, splits, then samples
// spec.sample_count documents when non-zero.
std::vector<std::string> load_corpus(const CorpusSpec& spec);

// Uniform sample without replacement in draw order.
std::vector<std::string> sample_documents(const std::vector<std::string>& docs, std::size_t n, std::uint64_t seed);

// Encodes on up to `workers` threads; output order follows `docs`.
std::vector<std::vector<int>> tokenize_documents(const bpe::TokenizerModel& tok, const std::vector<std::string>& docs,
                                                 int workers = 1);

struct Batch {
  std::vector<std::vector<int>> tokens;  // [batch][seq_len]
  std::vector<std::vector<bool>> real;   // false at pad positions
};

// Documents joined with a separator after each one and cut into seq_len
// chunks; the last chunk is padded. batch(i) takes chunks i*B .. i*B+B-1,
// wrapping around the chunk list, so the stream never runs dry.
class PackedStream {
 public:
  PackedStream() = default;  // empty stream
  PackedStream(std::vector<std::vector<int>> chunks, std::vector<std::vector<bool>> real, int batch_size, int pad_id);

  std::size_t chunk_count() const { return chunks_.size(); }
  std::size_t batches_per_epoch() const;
  int seq_len() const;
  int batch_size() const { return batch_size_; }
  int pad_id() const { return pad_id_; }
  const std::vector<std::vector<int>>& chunks() const { return chunks_; }
  const std::vector<std::vector<bool>>& real() const { return real_; }
  std::size_t real_token_count() const;
  Batch batch(std::size_t index) const;

 private:
  std::vector<std::vector<int>> chunks_;
  std::vector<std::vector<bool>> real_;
  int batch_size_ = 1;
  int pad_id_ = 0;
};

PackedStream pack_sequences(const std::vector<std::vector<int>>& docs, int seq_len, int batch_size, int pad_id,
                            int separator_id);

struct ParallelCorpus {
  std::vector<std::pair<std::string, std::string>> pairs;  // (new language, pivot)
  ParallelCorpus head(std::size_t n) const;
};

inline constexpr std::size_t kDefaultRetrievalPairs = 200;

// Two tab-separated columns per line, both non-empty.
ParallelCorpus load_parallel(const std::filesystem::path& path);
ParallelCorpus parse_parallel(std::string_view text, const std::string& origin = "<memory>");

}  // namespace adaptkit::data
