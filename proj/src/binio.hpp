#pragma once

// Little-endian binary helpers shared by the checkpoint and dataset formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "se2gnn/errors.hpp"

namespace se2gnn::binio {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void f32(float v) { bytes(&v, 4); }
  void str(const std::string& s) { bytes(s.data(), s.size()); }
  const std::vector<char>& buffer() const { return buf_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw Error("write failed for " + path.string());
  }

 private:
  std::vector<char> buf_;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorruptFile("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Bounds-checked cursor; every short read is a CorruptFile naming the file.
class Reader {
 public:
  Reader(std::vector<char> data, std::string name) : data_(std::move(data)), name_(std::move(name)) {}

  void bytes(void* p, std::size_t n) {
    if (n > data_.size() - pos_) {
      throw CorruptFile(name_ + ": truncated at byte " + std::to_string(pos_));
    }
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  float f32() {
    float v;
    bytes(&v, 4);
    return v;
  }
  std::string str(std::size_t n) {
    check(n);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void check(std::size_t n) const {
    if (n > data_.size() - pos_) {
      throw CorruptFile(name_ + ": truncated at byte " + std::to_string(pos_));
    }
  }
  bool at_end() const { return pos_ == data_.size(); }
  const std::string& name() const { return name_; }

 private:
  std::vector<char> data_;
  std::string name_;
  std::size_t pos_ = 0;
};

}  // namespace se2gnn::binio
