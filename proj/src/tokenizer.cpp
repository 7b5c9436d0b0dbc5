// SPDX-License-Identifier: Apache-2.0

#include "adaptkit/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace adaptkit::bpe {

namespace {

std::uint64_t pack(int left, int right) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(left)) << 32) | static_cast<std::uint32_t>(right);
}

}  // namespace

TokenizerModel::TokenizerModel() : TokenizerModel(std::vector<Merge>{}) {}

TokenizerModel::TokenizerModel(std::vector<Merge> merges) : merges_(std::move(merges)) {
  pieces_.reserve(kByteVocab + merges_.size());
  for (int b = 0; b < kByteVocab; ++b) pieces_.emplace_back(1, static_cast<char>(b));
  for (std::size_t i = 0; i < merges_.size(); ++i) {
    const auto& m = merges_[i];
    const int next = kByteVocab + static_cast<int>(i);
    if (m.id != next)
      throw std::invalid_argument("tokenizer: merge " + std::to_string(i) + " has id " + std::to_string(m.id) +
                                  ", expected dense id " + std::to_string(next));
    if (m.left < 0 || m.left >= next || m.right < 0 || m.right >= next)
      throw std::invalid_argument("tokenizer: merge " + std::to_string(i) + " references an undefined id");
    pieces_.push_back(pieces_[m.left] + pieces_[m.right]);
    rank_.emplace(pack(m.left, m.right), static_cast<int>(i));
  }
}

std::vector<int> TokenizerModel::encode(std::string_view text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(c);
  if (rank_.empty()) return ids;

  // Repeatedly apply the highest-priority merge present anywhere in the sequence.
  while (ids.size() >= 2) {
    int best = std::numeric_limits<int>::max();
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      auto it = rank_.find(pack(ids[i], ids[i + 1]));
      if (it != rank_.end() && it->second < best) best = it->second;
    }
    if (best == std::numeric_limits<int>::max()) break;
    const Merge& m = merges_[best];
    std::size_t out = 0;
    for (std::size_t i = 0; i < ids.size();) {
      if (i + 1 < ids.size() && ids[i] == m.left && ids[i + 1] == m.right) {
        ids[out++] = m.id;
        i += 2;
      } else {
        ids[out++] = ids[i++];
      }
    }
    ids.resize(out);
  }
  return ids;
}

const std::string& TokenizerModel::piece(int id) const {
  if (id < 0 || id >= vocab_size()) throw std::out_of_range("tokenizer: unknown id " + std::to_string(id));
  if (is_special(id)) throw std::out_of_range("tokenizer: special id " + std::to_string(id) + " has no bytes");
  return pieces_[static_cast<std::size_t>(id)];
}

std::string TokenizerModel::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) out += piece(id);
  return out;
}

std::string TokenizerModel::serialize() const {
  std::ostringstream os;
  os << "bbpe-v1 " << vocab_size() << '\n';
  for (const auto& m : merges_) os << m.left << ' ' << m.right << ' ' << m.id << '\n';
  return os.str();
}

TokenizerModel TokenizerModel::parse(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string magic;
  long long vocab = 0;
  if (!(is >> magic >> vocab) || magic != "bbpe-v1")
    throw std::runtime_error("tokenizer: missing `bbpe-v1 <vocab_size>` header");
  std::vector<Merge> merges;
  Merge m{};
  while (is >> m.left >> m.right >> m.id) merges.push_back(m);
  if (!is.eof()) throw std::runtime_error("tokenizer: malformed merge line after " + std::to_string(merges.size()) + " merges");
  TokenizerModel model(std::move(merges));
  if (model.vocab_size() != vocab)
    throw std::runtime_error("tokenizer: header declares " + std::to_string(vocab) + " ids but merges define " +
                             std::to_string(model.vocab_size()));
  return model;
}

void TokenizerModel::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("tokenizer: cannot write " + path.string());
  os << serialize();
}

TokenizerModel TokenizerModel::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("tokenizer: cannot read " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse(buf.str());
}

TokenizerModel train_bpe(const std::vector<std::string>& corpus, int target_vocab, std::uint64_t /*seed*/) {
  if (target_vocab < TokenizerModel::kByteVocab)
    throw std::invalid_argument("train_bpe: target_vocab " + std::to_string(target_vocab) + " is below 256");
  if (corpus.empty()) throw std::invalid_argument("train_bpe: empty corpus");

  std::vector<std::vector<int>> seqs;
  seqs.reserve(corpus.size());
  for (const auto& doc : corpus) {
    std::vector<int> s;
    s.reserve(doc.size());
    for (unsigned char c : doc) s.push_back(c);
    seqs.push_back(std::move(s));
  }

  std::unordered_map<std::uint64_t, long long> counts;
  auto tally = [&](const std::vector<int>& s, long long sign) {
    for (std::size_t i = 0; i + 1 < s.size(); ++i) counts[pack(s[i], s[i + 1])] += sign;
  };
  for (const auto& s : seqs) tally(s, +1);

  std::vector<Merge> merges;
  int next_id = TokenizerModel::kByteVocab;
  while (next_id < target_vocab) {
    // Highest count wins; equal counts go to the smallest packed (left, right).
    std::uint64_t best = 0;
    long long best_count = 1;
    for (auto it = counts.begin(); it != counts.end();) {
      if (it->second <= 0) {
        it = counts.erase(it);
        continue;
      }
      if (it->second > best_count || (it->second == best_count && best_count > 1 && it->first < best)) {
        best_count = it->second;
        best = it->first;
      }
      ++it;
    }
    if (best_count < 2) break;  // no pair occurs twice

    const Merge m{static_cast<int>(best >> 32), static_cast<int>(best & 0xffffffffU), next_id++};
    merges.push_back(m);
    for (auto& s : seqs) {
      bool present = false;
      for (std::size_t i = 0; i + 1 < s.size() && !present; ++i) present = s[i] == m.left && s[i + 1] == m.right;
      if (!present) continue;
      tally(s, -1);
      std::size_t out = 0;
      for (std::size_t i = 0; i < s.size();) {
        if (i + 1 < s.size() && s[i] == m.left && s[i + 1] == m.right) {
          s[out++] = m.id;
          i += 2;
        } else {
          s[out++] = s[i++];
        }
      }
      s.resize(out);
      tally(s, +1);
    }
  }
  return TokenizerModel(std::move(merges));
}

std::size_t count_tokens(const TokenizerModel& model, const std::vector<std::string>& documents) {
  std::size_t total = 0;
  for (const auto& d : documents) total += model.encode(d).size();
  return total;
}

}  // namespace adaptkit::bpe
