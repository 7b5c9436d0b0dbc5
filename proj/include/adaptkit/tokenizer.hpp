// SPDX-License-Identifier: Apache-2.0
//
// Byte-level BPE. Ids 0..255 are the raw bytes, merges follow in priority
// order, and the two specials (pad, end-of-document) close the id range.
// Any byte sequence encodes, so there is no unknown token.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace adaptkit::bpe {

struct Merge {
  int left;
  int right;
  int id;
  bool operator==(const Merge&) const = default;
};

class TokenizerModel {
 public:
  static constexpr int kByteVocab = 256;
  static constexpr int kSpecialCount = 2;

  // Pure byte vocabulary plus the two specials.
  TokenizerModel();
  explicit TokenizerModel(std::vector<Merge> merges);

  int vocab_size() const { return kByteVocab + static_cast<int>(merges_.size()) + kSpecialCount; }
  const std::vector<Merge>& merges() const { return merges_; }
  int pad_id() const { return kByteVocab + static_cast<int>(merges_.size()); }
  int eod_id() const { return pad_id() + 1; }
  bool is_special(int id) const { return id >= pad_id() && id < vocab_size(); }

  std::vector<int> encode(std::string_view text) const;
  // Throws std::out_of_range naming the offending id for unknown or special ids.
  std::string decode(std::span<const int> ids) const;
  // Raw bytes of a non-special id.
  const std::string& piece(int id) const;

  // `bbpe-v1 <vocab_size>` header, then one `left right id` line per merge.
  std::string serialize() const;
  static TokenizerModel parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static TokenizerModel load(const std::filesystem::path& path);

  bool operator==(const TokenizerModel& other) const { return merges_ == other.merges_; }

 private:
  std::vector<Merge> merges_;
  std::vector<std::string> pieces_;
  std::unordered_map<std::uint64_t, int> rank_;  // packed (left,right) -> merge index
};

// Greedy most-frequent-pair merging until `target_vocab` (bytes + merges,
// specials excluded) is reached or no pair occurs at least twice. Equal counts
// resolve to the lexicographically smallest (left, right). Training is fully
// determined by the corpus; `seed` is accepted for interface symmetry with the
// other trainers and does not alter the result.
TokenizerModel train_bpe(const std::vector<std::string>& corpus, int target_vocab, std::uint64_t seed = 0);

std::size_t count_tokens(const TokenizerModel& model, const std::vector<std::string>& documents);

}  // namespace adaptkit::bpe
