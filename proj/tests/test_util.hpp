#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "trace_diag/errors.hpp"

namespace test_util {

// Fresh per-test scratch directory under the system temp root.
inline std::filesystem::path temp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("trace_diag_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw trace_diag::validation_error("test_util: cannot read " + p.string());
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& content) {
    std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << content;
    if (!out) throw trace_diag::validation_error("test_util: cannot write " + p.string());
}

}  // namespace test_util
