// SPDX-License-Identifier: Apache-2.0
#include "bt/io.hpp"

#include "bt/error.hpp"

#include <bit>
#include <cstring>
#include <sstream>

namespace bt {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

BinaryWriter::BinaryWriter(const std::filesystem::path& path)
    : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot open for writing: " + path.string());
}

void BinaryWriter::bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out_) throw IoError("write failed: " + path_.string());
}

void BinaryWriter::u32(std::uint32_t v) { bytes(&v, sizeof v); }
void BinaryWriter::u64(std::uint64_t v) { bytes(&v, sizeof v); }
void BinaryWriter::f32(float v) { bytes(&v, sizeof v); }
void BinaryWriter::f64(double v) { bytes(&v, sizeof v); }

void BinaryWriter::str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
}

void BinaryWriter::close() {
    out_.flush();
    if (!out_) throw IoError("write failed: " + path_.string());
    out_.close();
}

BinaryReader::BinaryReader(const std::filesystem::path& path) : path_(path) {
    if (!std::filesystem::exists(path)) throw MissingFileError("no such file: " + path.string());
    in_.open(path, std::ios::binary);
    if (!in_) throw IoError("cannot open for reading: " + path.string());
}

void BinaryReader::bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n))
        throw FormatError("truncated file: " + path_.string());
}

std::string BinaryReader::string(std::size_t n) {
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
}

std::uint32_t BinaryReader::u32() {
    std::uint32_t v;
    bytes(&v, sizeof v);
    return v;
}

std::uint64_t BinaryReader::u64() {
    std::uint64_t v;
    bytes(&v, sizeof v);
    return v;
}

float BinaryReader::f32() {
    float v;
    bytes(&v, sizeof v);
    return v;
}

double BinaryReader::f64() {
    double v;
    bytes(&v, sizeof v);
    return v;
}

std::string BinaryReader::str() {
    const auto n = u32();
    if (n > (1u << 28)) throw FormatError("implausible string length in " + path_.string());
    return string(n);
}

bool BinaryReader::at_end() { return in_.peek() == std::char_traits<char>::eof(); }

std::string read_text_file(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw MissingFileError("no such file: " + path.string());
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << text;
    out.flush();
    if (!out) throw IoError("write failed: " + path.string());
}

} // namespace bt
