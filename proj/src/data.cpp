// SPDX-License-Identifier: Apache-2.0

#include "adaptkit/data.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <regex>
#include <sstream>
#include <stdexcept>
#include <thread>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "adaptkit/hashing.hpp"
#include "httplib.h"

namespace adaptkit::data {

namespace fs = std::filesystem;

std::optional<std::size_t> first_invalid_utf8(std::string_view s) {
  std::size_t i = 0;
  const auto n = s.size();
  auto cont = [&](std::size_t k) { return k < n && (static_cast<unsigned char>(s[k]) & 0xC0) == 0x80; };
  while (i < n) {
    const auto c = static_cast<unsigned char>(s[i]);
    if (c < 0x80) {
      ++i;
      continue;
    }
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (c >= 0xC2 && c <= 0xDF) {
      len = 2;
      cp = c & 0x1F;
    } else if (c >= 0xE0 && c <= 0xEF) {
      len = 3;
      cp = c & 0x0F;
    } else if (c >= 0xF0 && c <= 0xF4) {
      len = 4;
      cp = c & 0x07;
    } else {
      return i;
    }
    for (std::size_t k = 1; k < len; ++k) {
      if (!cont(i + k)) return i;
      cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
    }
    // Overlong forms, surrogates, and code points past U+10FFFF.
    if ((len == 3 && cp < 0x800) || (len == 4 && (cp < 0x10000 || cp > 0x10FFFF)) || (cp >= 0xD800 && cp <= 0xDFFF))
      return i;
    i += len;
  }
  return std::nullopt;
}

std::vector<std::string> split_documents(std::string_view bytes) {
  std::string text;
  text.reserve(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    if (bytes[i] == '\r' && i + 1 < bytes.size() && bytes[i + 1] == '\n') continue;
    text.push_back(bytes[i]);
  }
  std::vector<std::string> docs;
  std::size_t start = 0;
  while (start < text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string::npos) nl = text.size();
    docs.emplace_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  return docs;
}

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, std::string_view bytes) {
  fs::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  fs::rename(tmp, path);
}

bool is_url(const std::string& s) { return s.starts_with("http://") || s.starts_with("https://"); }

}  // namespace

std::string fetch_http(const std::string& url, const fs::path& cache_dir) {
  const auto index = cache_dir / "index" / sha256_hex(url);
  if (fs::exists(index)) {
    const auto digest = read_file(index);
    const auto object = cache_dir / "objects" / digest;
    if (fs::exists(object)) {
      auto bytes = read_file(object);
      if (sha256_hex(bytes) == digest) return bytes;
    }
  }

  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw std::runtime_error("malformed URL: " + url);
  httplib::Client client(m[1].str());
  client.set_follow_location(true);
  client.set_connection_timeout(10);
  client.set_read_timeout(60);
  const std::string path = m[2].matched ? m[2].str() : "/";
  auto res = client.Get(path);
  if (!res) throw std::runtime_error("GET " + url + " failed: " + httplib::to_string(res.error()));
  if (res->status != 200) throw std::runtime_error("GET " + url + " returned HTTP " + std::to_string(res->status));
  const auto digest = sha256_hex(res->body);
  write_file(cache_dir / "objects" / digest, res->body);
  write_file(index, digest);
  return res->body;
}

std::vector<std::string> load_corpus(const CorpusSpec& spec) {
  const std::string bytes = is_url(spec.source) ? fetch_http(spec.source, spec.cache_dir) : read_file(spec.source);
  if (auto bad = first_invalid_utf8(bytes))
    throw std::runtime_error(spec.source + ": invalid UTF-8 at byte offset " + std::to_string(*bad));
  auto docs = split_documents(bytes);
  if (spec.sample_count == 0) return docs;
  return sample_documents(docs, spec.sample_count, spec.seed);
}

std::vector<std::string> sample_documents(const std::vector<std::string>& docs, std::size_t n, std::uint64_t seed) {
  if (n > docs.size())
    throw std::invalid_argument("sample_documents: requested " + std::to_string(n) + " documents but only " +
                                std::to_string(docs.size()) + " are available");
  std::vector<std::size_t> order(docs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::vector<std::string> out;
  out.reserve(n);
  // Partial Fisher-Yates: position i receives a uniform pick from the remainder.
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
    std::swap(order[i], order[pick(rng)]);
    out.push_back(docs[order[i]]);
  }
  return out;
}

std::vector<std::vector<int>> tokenize_documents(const bpe::TokenizerModel& tok, const std::vector<std::string>& docs,
                                                 int workers) {
  std::vector<std::vector<int>> out(docs.size());
  const auto w = static_cast<std::size_t>(std::clamp(workers, 1, 64));
  if (w == 1 || docs.size() < 2 * w) {
    for (std::size_t i = 0; i < docs.size(); ++i) out[i] = tok.encode(docs[i]);
    return out;
  }
  std::vector<std::thread> pool;
  const std::size_t per = (docs.size() + w - 1) / w;
  for (std::size_t t = 0; t < w; ++t) {
    const std::size_t lo = t * per, hi = std::min(docs.size(), lo + per);
    pool.emplace_back([&, lo, hi] {
      for (std::size_t i = lo; i < hi; ++i) out[i] = tok.encode(docs[i]);
    });
  }
  for (auto& th : pool) th.join();
  return out;
}

PackedStream::PackedStream(std::vector<std::vector<int>> chunks, std::vector<std::vector<bool>> real, int batch_size,
                           int pad_id)
    : chunks_(std::move(chunks)), real_(std::move(real)), batch_size_(batch_size), pad_id_(pad_id) {
  if (batch_size_ < 1) throw std::invalid_argument("PackedStream: batch_size must be positive");
  if (chunks_.size() != real_.size()) throw std::invalid_argument("PackedStream: chunk/mask count mismatch");
}

std::size_t PackedStream::batches_per_epoch() const {
  return (chunks_.size() + static_cast<std::size_t>(batch_size_) - 1) / static_cast<std::size_t>(batch_size_);
}

int PackedStream::seq_len() const { return chunks_.empty() ? 0 : static_cast<int>(chunks_.front().size()); }

std::size_t PackedStream::real_token_count() const {
  std::size_t n = 0;
  for (const auto& r : real_) n += static_cast<std::size_t>(std::count(r.begin(), r.end(), true));
  return n;
}

Batch PackedStream::batch(std::size_t index) const {
  if (chunks_.empty()) throw std::runtime_error("PackedStream: empty stream");
  Batch b;
  for (int i = 0; i < batch_size_; ++i) {
    const auto c = (index * static_cast<std::size_t>(batch_size_) + static_cast<std::size_t>(i)) % chunks_.size();
    b.tokens.push_back(chunks_[c]);
    b.real.push_back(real_[c]);
  }
  return b;
}

PackedStream pack_sequences(const std::vector<std::vector<int>>& docs, int seq_len, int batch_size, int pad_id,
                            int separator_id) {
  if (seq_len < 2) throw std::invalid_argument("pack_sequences: seq_len must be at least 2");
  std::vector<int> flat;
  for (const auto& d : docs) {
    flat.insert(flat.end(), d.begin(), d.end());
    flat.push_back(separator_id);
  }
  std::vector<std::vector<int>> chunks;
  std::vector<std::vector<bool>> real;
  const auto T = static_cast<std::size_t>(seq_len);
  for (std::size_t start = 0; start < flat.size(); start += T) {
    const auto n = std::min(T, flat.size() - start);
    std::vector<int> chunk(flat.begin() + static_cast<std::ptrdiff_t>(start),
                           flat.begin() + static_cast<std::ptrdiff_t>(start + n));
    std::vector<bool> mask(n, true);
    chunk.resize(T, pad_id);
    mask.resize(T, false);
    chunks.push_back(std::move(chunk));
    real.push_back(std::move(mask));
  }
  return PackedStream(std::move(chunks), std::move(real), batch_size, pad_id);
}

ParallelCorpus ParallelCorpus::head(std::size_t n) const {
  ParallelCorpus out;
  out.pairs.assign(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(std::min(n, pairs.size())));
  return out;
}

ParallelCorpus parse_parallel(std::string_view text, const std::string& origin) {
  if (auto bad = first_invalid_utf8(text))
    throw std::runtime_error(origin + ": invalid UTF-8 at byte offset " + std::to_string(*bad));
  ParallelCorpus out;
  const auto lines = split_documents(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& line = lines[i];
    const auto where = origin + ":" + std::to_string(i + 1) + ": ";
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
      throw std::runtime_error(where + "expected exactly two tab-separated columns");
    auto a = line.substr(0, tab), b = line.substr(tab + 1);
    if (a.empty() || b.empty()) throw std::runtime_error(where + "empty side in parallel pair");
    out.pairs.emplace_back(std::move(a), std::move(b));
  }
  return out;
}

ParallelCorpus load_parallel(const fs::path& path) { return parse_parallel(read_file(path), path.string()); }

}  // namespace adaptkit::data
