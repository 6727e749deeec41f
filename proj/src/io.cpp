// SPDX-License-Identifier: Apache-2.0
#include "slategen/io.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace slategen {

namespace {

constexpr char kMagic[8] = {'S', 'L', 'G', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  Reader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}

  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw DataError("checkpoint " + path_ + ": truncated");
  }
  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string str() {
    const auto n = static_cast<std::size_t>(uint(4));
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  const std::string& buf_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + tmp + "'");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw DataError("short write to '" + tmp + "'");
  }
  std::filesystem::rename(tmp, p);
}

bool file_exists(const std::string& path) { return std::filesystem::exists(path); }

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (line.find_first_not_of(" \t\r") != std::string::npos) lines.push_back(line);
  return lines;
}

const StoredTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

Checkpoint make_checkpoint(std::string kind, std::string config, const nn::ParamList& params) {
  Checkpoint c;
  c.kind = std::move(kind);
  c.config = std::move(config);
  for (const auto& p : params) {
    StoredTensor t{p.name, p.tensor.shape(), {}};
    t.data.reserve(p.tensor.size());
    for (double v : p.tensor.values()) t.data.push_back(static_cast<float>(v));
    c.tensors.push_back(std::move(t));
  }
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, ckpt.version);
  put_str(out, ckpt.kind);
  put_str(out, ckpt.config);
  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    put_str(out, t.name);
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put_u64(out, d);
    for (float f : t.data) {
      std::uint32_t bits = 0;
      std::memcpy(&bits, &f, sizeof bits);
      put_u32(out, bits);
    }
  }
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  if (!file_exists(path)) throw DataError("checkpoint not found: " + path);
  const std::string buf = read_file(path);
  Reader r(buf, path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw DataError("checkpoint " + path + ": bad magic");
  Checkpoint c;
  c.version = static_cast<std::uint32_t>(r.uint(4));
  if (c.version != kCheckpointVersion)
    throw DataError("checkpoint " + path + ": unsupported version " + std::to_string(c.version));
  c.kind = r.str();
  c.config = r.str();
  const auto count = r.uint(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.str();
    const auto ndim = r.uint(4);
    std::size_t n = 1;
    for (std::uint64_t d = 0; d < ndim; ++d) {
      t.shape.push_back(static_cast<std::size_t>(r.uint(8)));
      n *= t.shape.back();
    }
    r.need(n * 4);
    t.data.resize(n);
    for (auto& f : t.data) {
      const auto bits = static_cast<std::uint32_t>(r.uint(4));
      std::memcpy(&f, &bits, sizeof f);
    }
    c.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw DataError("checkpoint " + path + ": trailing bytes");
  return c;
}

void restore_params(const Checkpoint& ckpt, const nn::ParamList& params) {
  for (const auto& p : params) {
    const StoredTensor* t = ckpt.find(p.name);
    if (t == nullptr) throw DataError("checkpoint lacks tensor '" + p.name + "'");
    if (t->shape != p.tensor.shape())
      throw DataError("checkpoint tensor '" + p.name + "' has shape " + shape_string(t->shape) + ", model expects " +
                      shape_string(p.tensor.shape()));
    Tensor dst = p.tensor;
    auto v = dst.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(t->data[i]);
  }
}

}  // namespace slategen
