#pragma once

// Little-endian primitive encoding shared by every on-disk format.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace remap::binary {

class Writer {
public:
    void bytes(std::string_view raw) { buffer_.insert(buffer_.end(), raw.begin(), raw.end()); }

    void u32(std::uint32_t value) {
        for (int shift = 0; shift < 32; shift += 8) {
            buffer_.push_back(static_cast<char>((value >> shift) & 0xFFu));
        }
    }

    void f32(float value) { u32(std::bit_cast<std::uint32_t>(value)); }

    void f32s(std::span<const float> values) {
        buffer_.reserve(buffer_.size() + values.size() * 4);
        for (float v : values) f32(v);
    }

    const std::vector<char>& data() const { return buffer_; }

    /// Writes the buffer to `path`, throwing IoError on failure.
    void save(const std::filesystem::path& path) const;

private:
    std::vector<char> buffer_;
};

class Reader {
public:
    /// Reads all of `path`; throws IoError when the file cannot be opened.
    static Reader open(const std::filesystem::path& path);

    explicit Reader(std::vector<char> data, std::string origin)
        : data_(std::move(data)), origin_(std::move(origin)) {}

    std::size_t remaining() const { return data_.size() - pos_; }
    std::size_t size() const { return data_.size(); }
    const std::string& origin() const { return origin_; }

    std::string bytes(std::size_t count);
    std::uint32_t u32();
    float f32() { return std::bit_cast<float>(u32()); }

private:
    void require(std::size_t count) const;

    std::vector<char> data_;
    std::string origin_;
    std::size_t pos_ = 0;
};

}  // namespace remap::binary
