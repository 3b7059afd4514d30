#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace tuap::io {

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size);

// Little-endian binary container writer. `finish()` appends the FNV-1a
// checksum of every preceding byte.
class ByteWriter {
 public:
  void u8(std::uint8_t v);
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void bytes(std::string_view s);
  void str(std::string_view s);  // u16 length prefix
  std::vector<std::uint8_t> finish() const;

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  // Verifies the trailing checksum before any field is readable.
  explicit ByteReader(std::vector<std::uint8_t> data, std::string_view what);

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string bytes(std::size_t n);
  std::string str();
  bool at_end() const { return pos_ == end_; }

 private:
  void need(std::size_t n);
  std::vector<std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
  std::string what_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

// Writes to a sibling temporary and renames, so readers never observe a
// partially written file.
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& data);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

// Shortest decimal representation that parses back to the same double.
std::string format_double(double v);
double parse_double(std::string_view s);

std::vector<std::string> split(std::string_view line, char sep);
std::string trim(std::string_view s);

// Deterministic seed derivation (splitmix64 finaliser over the pair).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt);

}  // namespace tuap::io
