#include "trace_diag/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "trace_diag/errors.hpp"

namespace trace_diag {

namespace {

constexpr char kMagic[4] = {'T', 'R', 'C', 'F'};
constexpr std::uint8_t kDtypeFloat32 = 0;

static_assert(std::endian::native == std::endian::little,
              "trcf reader/writer assumes a little-endian host");

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void validate_shape(const tensor& t) {
    if (t.shape.empty()) throw validation_error("tensor shape must have rank >= 1");
    if (t.shape.size() > 255) throw validation_error("tensor rank exceeds 255");
    std::size_t n = 1;
    for (auto d : t.shape) {
        if (d == 0) throw validation_error("tensor shape dimensions must be nonzero");
        n *= d;
    }
    if (t.data.size() != n)
        throw validation_error("tensor payload length " + std::to_string(t.data.size()) +
                               " does not match shape product " + std::to_string(n));
}

}  // namespace

void write_tensor(const std::filesystem::path& path, const tensor& t) {
    validate_shape(t);
    std::string header;
    header.append(kMagic, 4);
    put_u16(header, kTensorFormatVersion);
    header.push_back(static_cast<char>(kDtypeFloat32));
    header.push_back(static_cast<char>(t.shape.size()));
    for (auto d : t.shape) put_u32(header, d);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw validation_error("cannot open tensor file for writing: " + path.string());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!out) throw validation_error("write failed: " + path.string());
}

tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw validation_error("cannot open tensor file: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    const std::string name = path.string();
    auto need = [&](std::size_t offset, std::size_t count, const char* what) {
        if (bytes.size() < offset + count)
            throw format_error(name + ": truncated while reading " + std::string(what), offset);
    };

    need(0, 4, "magic");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw format_error(name + ": bad magic", 0);
    need(4, 2, "version");
    const std::uint16_t version = static_cast<std::uint8_t>(bytes[4]) |
                                  (static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes[5])) << 8);
    if (version != kTensorFormatVersion)
        throw format_error(name + ": unsupported version " + std::to_string(version), 4);
    need(6, 1, "dtype");
    if (static_cast<std::uint8_t>(bytes[6]) != kDtypeFloat32)
        throw format_error(name + ": unsupported dtype code " +
                               std::to_string(static_cast<std::uint8_t>(bytes[6])),
                           6);
    need(7, 1, "rank");
    const std::size_t rank = static_cast<std::uint8_t>(bytes[7]);
    if (rank == 0) throw format_error(name + ": rank 0 is not allowed", 7);

    tensor t;
    t.shape.resize(rank);
    std::size_t offset = 8;
    std::size_t count = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        need(offset, 4, "shape");
        std::uint32_t d = 0;
        for (int b = 0; b < 4; ++b)
            d |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[offset + b])) << (8 * b);
        if (d == 0) throw format_error(name + ": zero dimension in shape", offset);
        t.shape[i] = d;
        count *= d;
        offset += 4;
    }

    const std::size_t payload = count * sizeof(float);
    if (bytes.size() < offset + payload)
        throw format_error(name + ": truncated payload, expected " + std::to_string(payload) +
                               " bytes but file holds " + std::to_string(bytes.size() - offset),
                           offset + (bytes.size() - offset));
    if (bytes.size() > offset + payload)
        throw format_error(name + ": " + std::to_string(bytes.size() - offset - payload) +
                               " trailing bytes after payload",
                           offset + payload);
    t.data.resize(count);
    std::memcpy(t.data.data(), bytes.data() + offset, payload);
    return t;
}

}  // namespace trace_diag
