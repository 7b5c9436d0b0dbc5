// SPDX-License-Identifier: Apache-2.0

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "adaptkit/hashing.hpp"
#include "adaptkit/model.hpp"

namespace adaptkit::model {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

void append_tensor(std::string& out, const std::string& name, const ad::Tensor& t) {
  out += name;
  out += " f64 ";
  out += std::to_string(t.dim());
  for (auto d : t.shape()) out += " " + std::to_string(d);
  out += '\n';
  auto data = t.data();
  out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(double));
  out += '\n';
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view line() {
    auto nl = bytes_.find('\n', pos_);
    if (nl == std::string_view::npos) throw std::runtime_error("checkpoint: truncated at byte " + std::to_string(pos_));
    auto out = bytes_.substr(pos_, nl - pos_);
    pos_ = nl + 1;
    return out;
  }

  std::string_view take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw std::runtime_error("checkpoint: truncated tensor data at byte " + std::to_string(pos_));
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header = {
      {"format_version", ckpt.format_version}, {"spec", to_json(ckpt.spec)}, {"metadata", ckpt.metadata}};
  std::string out = std::string(kCheckpointFormat) + "\n";
  out += header.dump();
  out += '\n';
  out += std::to_string(ckpt.tensors.size()) + "\n";
  for (const auto& [name, t] : ckpt.tensors) append_tensor(out, name, t);
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.line() != kCheckpointFormat) throw std::runtime_error("checkpoint: missing ckpt-v1 header");
  auto header = nlohmann::json::parse(r.line());
  Checkpoint ckpt;
  ckpt.format_version = header.at("format_version").get<std::string>();
  ckpt.spec = model_spec_from_json(header.at("spec"));
  ckpt.metadata = header.at("metadata");
  const auto count = std::stoull(std::string(r.line()));
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream rec{std::string(r.line())};
    std::string name, dtype;
    std::size_t ndim = 0;
    rec >> name >> dtype >> ndim;
    if (!rec || dtype != "f64") throw std::runtime_error("checkpoint: bad tensor record " + name);
    if (!names::is_canonical(name)) throw std::runtime_error("checkpoint: non-canonical tensor name " + name);
    ad::Shape shape(ndim);
    for (auto& d : shape) rec >> d;
    if (!rec) throw std::runtime_error("checkpoint: bad shape for " + name);
    const auto n = ad::shape_numel(shape);
    auto raw = r.take(n * sizeof(double));
    std::vector<double> values(n);
    std::memcpy(values.data(), raw.data(), raw.size());
    if (r.take(1) != "\n") throw std::runtime_error("checkpoint: missing record terminator after " + name);
    if (!ckpt.tensors.emplace(name, ad::Tensor::from(shape, std::move(values))).second)
      throw std::runtime_error("checkpoint: duplicate tensor " + name);
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path.string());
  const auto bytes = serialize_checkpoint(ckpt);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot read " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

std::string tensor_checksum(const Checkpoint& ckpt, bool include_adapters) {
  std::string buf;
  for (const auto& [name, t] : ckpt.tensors) {
    if (!include_adapters && name.starts_with("adapter.")) continue;
    append_tensor(buf, name, t);
  }
  return sha256_hex(buf);
}

}  // namespace adaptkit::model
