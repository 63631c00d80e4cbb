// SPDX-License-Identifier: Apache-2.0
//
// Little-endian binary streams and whole-file text helpers. Failures raise
// IoError subclasses carrying the offending path.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

namespace bt {

class BinaryWriter {
public:
    explicit BinaryWriter(const std::filesystem::path& path);
    void bytes(const void* data, std::size_t n);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f32(float v);
    void f64(double v);
    void str(const std::string& s); // u32 length prefix
    // Flushes and reports write failures.
    void close();

private:
    std::filesystem::path path_;
    std::ofstream out_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::filesystem::path& path);
    void bytes(void* data, std::size_t n);
    std::string string(std::size_t n);
    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    double f64();
    std::string str();
    bool at_end();

private:
    std::filesystem::path path_;
    std::ifstream in_;
};

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

} // namespace bt
