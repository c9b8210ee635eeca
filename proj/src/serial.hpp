#pragma once

#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"

// Little-endian binary I/O with a running CRC-32, shared by the model and
// stats file formats.
namespace ernn::serial {

uint32_t crc32(uint32_t crc, const void* data, size_t len);

class Writer {
public:
    explicit Writer(const std::string& path);
    void write(const void* data, size_t len);

    template <typename T>
    void write_pod(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        write(&v, sizeof(v));
    }

    void write_string(const std::string& s) {
        write_pod<uint32_t>(static_cast<uint32_t>(s.size()));
        write(s.data(), s.size());
    }

    // writes the accumulated CRC and closes; throws on I/O failure
    void finish();

    uint64_t bytes_written() const { return bytes_; }

private:
    std::ofstream out_;
    std::string path_;
    uint32_t crc_ = 0;
    uint64_t bytes_ = 0;
    bool finished_ = false;
};

class Reader {
public:
    explicit Reader(const std::string& path);

    void read(void* data, size_t len);

    template <typename T>
    T read_pod() {
        T v;
        read(&v, sizeof(v));
        return v;
    }

    std::string read_string(size_t max_len = 1 << 20);

    uint64_t remaining() const { return size_ - pos_; }
    uint64_t size() const { return size_; }

    // verifies the trailing CRC-32 against all preceding bytes
    void verify_checksum();

private:
    std::ifstream in_;
    std::string path_;
    uint64_t size_ = 0;
    uint64_t pos_ = 0;
};

}  // namespace ernn::serial
