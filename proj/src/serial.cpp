#include "serial.hpp"

#include <array>

namespace ernn::serial {

namespace {

std::array<uint32_t, 256> make_crc_table() {
    std::array<uint32_t, 256> table{};
    for (uint32_t i = 0; i < 256; ++i) {
        uint32_t c = i;
        for (int k = 0; k < 8; ++k) {
            c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
        }
        table[i] = c;
    }
    return table;
}

const std::array<uint32_t, 256>& crc_table() {
    static const auto table = make_crc_table();
    return table;
}

}  // namespace

uint32_t crc32(uint32_t crc, const void* data, size_t len) {
    const auto& table = crc_table();
    const auto* p = static_cast<const uint8_t*>(data);
    uint32_t c = crc ^ 0xffffffffu;
    for (size_t i = 0; i < len; ++i) {
        c = table[(c ^ p[i]) & 0xffu] ^ (c >> 8);
    }
    return c ^ 0xffffffffu;
}

Writer::Writer(const std::string& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) {
        fail(ErrorKind::io, strformat("cannot open '%s' for writing", path.c_str()));
    }
}

void Writer::write(const void* data, size_t len) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
    if (!out_) {
        fail(ErrorKind::io, strformat("write failed on '%s'", path_.c_str()));
    }
    crc_ = crc32(crc_, data, len);
    bytes_ += len;
}

void Writer::finish() {
    uint32_t crc = crc_;
    out_.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
    bytes_ += sizeof(crc);
    out_.close();
    if (!out_) {
        fail(ErrorKind::io, strformat("failed to finish writing '%s'", path_.c_str()));
    }
    finished_ = true;
}

Reader::Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) {
        fail(ErrorKind::io, strformat("cannot open '%s'", path.c_str()));
    }
    in_.seekg(0, std::ios::end);
    size_ = static_cast<uint64_t>(in_.tellg());
    in_.seekg(0);
}

void Reader::read(void* data, size_t len) {
    if (pos_ + len > size_) {
        fail(ErrorKind::format,
             strformat("'%s' truncated: need %zu bytes at offset %llu, file has %llu",
                       path_.c_str(), len, static_cast<unsigned long long>(pos_),
                       static_cast<unsigned long long>(size_)));
    }
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(len));
    if (!in_) {
        fail(ErrorKind::io, strformat("read failed on '%s'", path_.c_str()));
    }
    pos_ += len;
}

std::string Reader::read_string(size_t max_len) {
    auto len = read_pod<uint32_t>();
    if (len > max_len) {
        fail(ErrorKind::format,
             strformat("'%s': string length %u exceeds limit %zu", path_.c_str(), len, max_len));
    }
    std::string s(len, '\0');
    read(s.data(), len);
    return s;
}

void Reader::verify_checksum() {
    if (size_ < 4) {
        fail(ErrorKind::format, strformat("'%s' too short for a checksum", path_.c_str()));
    }
    auto saved_pos = in_.tellg();
    in_.seekg(0);
    uint32_t crc = 0;
    std::vector<char> buf(1 << 16);
    uint64_t left = size_ - 4;
    while (left > 0) {
        size_t chunk = static_cast<size_t>(std::min<uint64_t>(left, buf.size()));
        in_.read(buf.data(), static_cast<std::streamsize>(chunk));
        if (!in_) {
            fail(ErrorKind::io, strformat("read failed on '%s'", path_.c_str()));
        }
        crc = crc32(crc, buf.data(), chunk);
        left -= chunk;
    }
    uint32_t stored;
    in_.read(reinterpret_cast<char*>(&stored), sizeof(stored));
    if (!in_ || stored != crc) {
        fail(ErrorKind::checksum,
             strformat("'%s': checksum mismatch (stored %08x, computed %08x)", path_.c_str(),
                       stored, crc));
    }
    in_.clear();
    in_.seekg(saved_pos);
}

}  // namespace ernn::serial
