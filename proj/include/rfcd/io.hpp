/*
   Copyright 2026 The rfcd Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/

#pragma once

// Locale-independent CSV, atomic file writes and the little-endian binary
// matrix layout ("RFCD" magic, u32 version, u64 rows, u64 cols, row-major
// float64 payload).

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <Eigen/Dense>
#include <unistd.h>

#include "rfcd/errors.hpp"

namespace rfcd {

// Fixed 17 significant digits, independent of the global locale.
inline std::string format_double(double value) {
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), value, std::chars_format::general, 17);
  return std::string(buf.data(), res.ptr);
}

inline void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  const auto tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ResourceError("cli-runner", "cannot open " + tmp + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw ResourceError("cli-runner", "write to " + tmp + " failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw ResourceError("cli-runner", "cannot move output into place at " + path.string());
  }
}

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : width_(header.size()) { append_row(header); }

  CsvTable& row() {
    if (!current_.empty()) flush();
    return *this;
  }

  CsvTable& cell(double v) { return push(format_double(v)); }
  CsvTable& cell(std::int64_t v) { return push(std::to_string(v)); }
  CsvTable& cell(int v) { return push(std::to_string(v)); }
  CsvTable& cell(std::string_view v) { return push(std::string(v)); }

  std::string str() {
    if (!current_.empty()) flush();
    return text_;
  }

 private:
  CsvTable& push(std::string v) {
    current_.push_back(std::move(v));
    return *this;
  }

  void flush() {
    if (current_.size() != width_) throw DomainError("cli-runner", "CSV row has the wrong number of cells");
    append_row(current_);
    current_.clear();
  }

  void append_row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) text_ += ',';
      text_ += cells[i];
    }
    text_ += '\n';
  }

  std::size_t width_;
  std::vector<std::string> current_;
  std::string text_;
};

inline constexpr std::array<char, 4> kBinaryMagic{'R', 'F', 'C', 'D'};
inline constexpr std::uint32_t kBinaryVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  auto bits = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bits.begin(), bits.end());
  out.append(reinterpret_cast<const char*>(bits.data()), bits.size());
}

template <typename T>
T get_le(std::string_view& in) {
  if (in.size() < sizeof(T)) throw DomainError("cd-operators", "truncated binary matrix");
  std::array<unsigned char, sizeof(T)> bits{};
  std::memcpy(bits.data(), in.data(), sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bits.begin(), bits.end());
  in.remove_prefix(sizeof(T));
  return std::bit_cast<T>(bits);
}

}  // namespace detail

inline std::string encode_binary_matrix(const Eigen::MatrixXd& m) {
  std::string out(kBinaryMagic.data(), kBinaryMagic.size());
  detail::put_le(out, kBinaryVersion);
  detail::put_le(out, static_cast<std::uint64_t>(m.rows()));
  detail::put_le(out, static_cast<std::uint64_t>(m.cols()));
  out.reserve(out.size() + static_cast<std::size_t>(m.size()) * 8);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) detail::put_le(out, m(i, j));
  return out;
}

inline Eigen::MatrixXd decode_binary_matrix(std::string_view in) {
  if (in.size() < 4 || std::memcmp(in.data(), kBinaryMagic.data(), 4) != 0)
    throw DomainError("cd-operators", "binary matrix has a bad magic number");
  in.remove_prefix(4);
  if (detail::get_le<std::uint32_t>(in) != kBinaryVersion)
    throw DomainError("cd-operators", "unsupported binary matrix version");
  const auto rows = detail::get_le<std::uint64_t>(in);
  const auto cols = detail::get_le<std::uint64_t>(in);
  if (in.size() != rows * cols * 8) throw DomainError("cd-operators", "binary matrix payload has the wrong size");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = detail::get_le<double>(in);
  return m;
}

inline void write_binary_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& m) {
  write_file_atomic(path, encode_binary_matrix(m));
}

inline Eigen::MatrixXd read_binary_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DomainError("cd-operators", "cannot open " + path.string());
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_binary_matrix(data);
}

}  // namespace rfcd
