#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dap/nn/tensor.hpp"

namespace dap::nn {

// CRC-32 (reflected, polynomial 0xEDB88320), the zlib/PNG variant.
inline std::uint32_t crc32(const std::uint8_t* data, std::size_t len,
                           std::uint32_t crc = 0) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    crc ^= 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(std::uint8_t(v & 0xFF));
    out.push_back(std::uint8_t(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::vector<std::uint8_t>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    const std::uint8_t* p;
    const std::uint8_t* end;

    void need(std::size_t n) const {
        if (std::size_t(end - p) < n) throw std::runtime_error("checkpoint truncated");
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = std::uint16_t(p[0]) | std::uint16_t(p[1]) << 8;
        p += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
        p += 4;
        return v;
    }
    std::uint8_t u8() {
        need(1);
        return *p++;
    }
    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(p), n);
        p += n;
        return s;
    }
};

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;
using NamedTensorRefs = std::vector<std::pair<std::string, const Tensor*>>;

// Layout: magic "DAPC", version u32, then per tensor
// (name_len u16, name, rank u8, dims u32 x rank, f32 payload); CRC-32 of all
// preceding bytes closes the file. No entry count: parse to EOF - 4.
inline std::vector<std::uint8_t> serialize_checkpoint(const NamedTensorRefs& entries) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), {'D', 'A', 'P', 'C'});
    detail::put_u32(out, kCheckpointVersion);
    for (const auto& [name, tensor] : entries) {
        if (name.size() > 0xFFFF)
            throw std::invalid_argument("checkpoint tensor name too long: " + name);
        detail::put_u16(out, std::uint16_t(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(2);  // rank
        detail::put_u32(out, std::uint32_t(tensor->rows));
        detail::put_u32(out, std::uint32_t(tensor->cols));
        for (float v : tensor->data) detail::put_f32(out, v);
    }
    detail::put_u32(out, crc32(out.data(), out.size()));
    return out;
}

inline NamedTensors parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 12) throw std::runtime_error("checkpoint truncated");
    detail::Reader r{bytes.data(), bytes.data() + bytes.size() - 4};
    std::uint32_t stored_crc = 0;
    for (int i = 0; i < 4; ++i)
        stored_crc |= std::uint32_t(bytes[bytes.size() - 4 + i]) << (8 * i);
    if (crc32(bytes.data(), bytes.size() - 4) != stored_crc)
        throw std::runtime_error("checkpoint CRC mismatch");
    if (r.str(4) != "DAPC") throw std::runtime_error("checkpoint magic mismatch");
    std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    NamedTensors entries;
    while (r.p < r.end) {
        std::uint16_t name_len = r.u16();
        std::string name = r.str(name_len);
        std::uint8_t rank = r.u8();
        if (rank == 0 || rank > 2)
            throw std::runtime_error("unsupported tensor rank in checkpoint");
        std::size_t rows = 1, cols = 1;
        if (rank == 1) {
            cols = r.u32();
        } else {
            rows = r.u32();
            cols = r.u32();
        }
        Tensor t(rows, cols);
        for (auto& v : t.data) v = r.f32();
        entries.emplace_back(std::move(name), std::move(t));
    }
    return entries;
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

inline void save_checkpoint(const std::string& path, const NamedTensorRefs& entries) {
    write_file_bytes(path, serialize_checkpoint(entries));
}

inline NamedTensors load_checkpoint(const std::string& path) {
    return parse_checkpoint(read_file_bytes(path));
}

// Copy loaded tensors into an existing parameter list, by exact name match.
inline void restore_params(const NamedTensors& loaded,
                           const std::vector<std::pair<std::string, Tensor*>>& params) {
    for (const auto& [name, dst] : params) {
        const Tensor* src = nullptr;
        for (const auto& [n, t] : loaded)
            if (n == name) {
                src = &t;
                break;
            }
        if (!src) throw std::runtime_error("checkpoint missing tensor: " + name);
        if (!src->same_shape(*dst))
            throw std::runtime_error("checkpoint shape mismatch for " + name + ": " +
                                     src->shape_str() + " vs " + dst->shape_str());
        dst->data = src->data;
    }
}

}  // namespace dap::nn
