#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "trace_diag/tensor_file.hpp"

namespace trace_diag {

enum class stage { pre, post };
enum class token_group { text, query, vision, other };
enum class feature_view { mixed, text, query };

std::string to_string(stage s);
stage stage_from_string(const std::string& s);
std::string to_string(token_group g);
token_group token_group_from_string(const std::string& s);
std::string to_string(feature_view v);
feature_view view_from_string(const std::string& s);

struct example_features {
    std::string example_id;
    stage feature_stage = stage::pre;
    tensor tokens;                         // T x d
    std::vector<token_group> groups;       // length T
    std::optional<std::vector<float>> pooled;  // length d, mean of tokens when present

    std::size_t token_count() const { return tokens.shape.empty() ? 0 : tokens.shape[0]; }
    std::size_t dim() const { return tokens.shape.size() < 2 ? 0 : tokens.shape[1]; }
};

// Rows whose group tag matches the view, original order preserved.
// mixed = text + query + vision ("other" rows are never selected).
tensor select_view(const example_features& ef, feature_view view);

// Group tags of the selected rows, aligned with select_view output.
std::vector<token_group> select_view_groups(const example_features& ef, feature_view view);

// Unweighted per-dimension mean. The only supported method.
std::vector<float> pool_tokens(const tensor& tokens);

// One manifest record binds an example/stage pair to its files on disk.
struct manifest_entry {
    std::string example_id;
    stage feature_stage = stage::pre;
    std::string tensor_path;       // relative to the manifest directory
    std::string token_group_path;  // one tag per line
    std::string pooled_path;       // optional
    std::string pooling = "mean";
};

std::vector<manifest_entry> read_manifest(const std::filesystem::path& manifest_file);
void write_manifest(const std::filesystem::path& manifest_file,
                    const std::vector<manifest_entry>& entries);

example_features load_example(const std::filesystem::path& base_dir, const manifest_entry& entry);

// Writes tokens + groups (+ pooled) under base_dir and returns the entry.
manifest_entry store_example(const std::filesystem::path& base_dir, const example_features& ef,
                             bool with_pooled = true);

struct feature_set {
    std::vector<example_features> examples;
    std::map<std::string, std::size_t> index_pre;   // example_id -> position
    std::map<std::string, std::size_t> index_post;

    const example_features* find(const std::string& example_id, stage st) const;
};

// Loads every manifest entry and validates shapes, tags, and pooled vectors
// (declared pooling reproduced within 1e-6).
feature_set load_feature_set(const std::filesystem::path& manifest_file);

// Indexes in-memory examples into a set; duplicate (id, stage) pairs error.
feature_set make_feature_set(std::vector<example_features> examples);

}  // namespace trace_diag
