#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace trace_diag {

// .trcf container: "TRCF" magic, u16 version, u8 dtype (0 = float32),
// u8 rank, rank x u32 shape, then row-major float32 payload. All integers
// and floats little-endian. Round trips are bit-exact.
struct tensor {
    std::vector<std::uint32_t> shape;
    std::vector<float> data;  // row-major

    std::size_t element_count() const {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

    static tensor matrix(std::size_t rows, std::size_t cols) {
        tensor t;
        t.shape = {static_cast<std::uint32_t>(rows), static_cast<std::uint32_t>(cols)};
        t.data.assign(rows * cols, 0.0f);
        return t;
    }

    float& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    float at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }
};

inline constexpr std::uint16_t kTensorFormatVersion = 1;

void write_tensor(const std::filesystem::path& path, const tensor& t);
tensor read_tensor(const std::filesystem::path& path);

}  // namespace trace_diag
