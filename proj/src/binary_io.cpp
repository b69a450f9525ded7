#include "remap/binary_io.hpp"

#include <fstream>
#include <iterator>

#include "remap/error.hpp"

namespace remap::binary {

void Writer::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(buffer_.data(), static_cast<std::streamsize>(buffer_.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

Reader Reader::open(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return Reader(std::move(data), path.string());
}

void Reader::require(std::size_t count) const {
    if (remaining() < count) {
        throw CorruptionError(origin_ + ": unexpected end of file (need " + std::to_string(count) +
                              " bytes at offset " + std::to_string(pos_) + ")");
    }
}

std::string Reader::bytes(std::size_t count) {
    require(count);
    std::string out(data_.data() + pos_, count);
    pos_ += count;
    return out;
}

std::uint32_t Reader::u32() {
    require(4);
    std::uint32_t value = 0;
    for (int i = 0; i < 4; ++i) {
        value |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return value;
}

}  // namespace remap::binary
