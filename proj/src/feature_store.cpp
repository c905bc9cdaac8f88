#include "trace_diag/feature_store.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"
#include "trace_diag/errors.hpp"

namespace trace_diag {

std::string to_string(stage s) {
    return s == stage::pre ? "pre" : "post";
}

stage stage_from_string(const std::string& s) {
    if (s == "pre") return stage::pre;
    if (s == "post") return stage::post;
    throw validation_error("unknown stage: '" + s + "'");
}

std::string to_string(token_group g) {
    switch (g) {
        case token_group::text: return "text";
        case token_group::query: return "query";
        case token_group::vision: return "vision";
        case token_group::other: return "other";
    }
    throw validation_error("invalid token group value");
}

token_group token_group_from_string(const std::string& s) {
    if (s == "text") return token_group::text;
    if (s == "query") return token_group::query;
    if (s == "vision") return token_group::vision;
    if (s == "other") return token_group::other;
    throw validation_error("unknown token group: '" + s + "'");
}

std::string to_string(feature_view v) {
    switch (v) {
        case feature_view::mixed: return "mixed";
        case feature_view::text: return "text";
        case feature_view::query: return "query";
    }
    throw validation_error("invalid feature view value");
}

feature_view view_from_string(const std::string& s) {
    if (s == "mixed") return feature_view::mixed;
    if (s == "text") return feature_view::text;
    if (s == "query") return feature_view::query;
    throw validation_error("unknown feature view: '" + s + "'");
}

namespace {

bool group_in_view(token_group g, feature_view v) {
    switch (v) {
        case feature_view::mixed:
            return g == token_group::text || g == token_group::query || g == token_group::vision;
        case feature_view::text: return g == token_group::text;
        case feature_view::query: return g == token_group::query;
    }
    return false;
}

}  // namespace

tensor select_view(const example_features& ef, feature_view view) {
    if (ef.tokens.shape.size() != 2)
        throw validation_error("token tensor for " + ef.example_id + " is not a matrix");
    const std::size_t t = ef.token_count();
    const std::size_t d = ef.dim();
    if (ef.groups.size() != t)
        throw validation_error("token group count " + std::to_string(ef.groups.size()) +
                               " does not match token count " + std::to_string(t) + " for " +
                               ef.example_id);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < t; ++i)
        if (group_in_view(ef.groups[i], view)) rows.push_back(i);
    if (rows.empty())
        throw computation_error("view '" + to_string(view) + "' selects no tokens for " +
                                ef.example_id);
    tensor out = tensor::matrix(rows.size(), d);
    for (std::size_t r = 0; r < rows.size(); ++r)
        std::copy(ef.tokens.data.begin() + static_cast<std::ptrdiff_t>(rows[r] * d),
                  ef.tokens.data.begin() + static_cast<std::ptrdiff_t>((rows[r] + 1) * d),
                  out.data.begin() + static_cast<std::ptrdiff_t>(r * d));
    return out;
}

std::vector<token_group> select_view_groups(const example_features& ef, feature_view view) {
    std::vector<token_group> out;
    for (token_group g : ef.groups)
        if (group_in_view(g, view)) out.push_back(g);
    return out;
}

std::vector<float> pool_tokens(const tensor& tokens) {
    if (tokens.shape.size() != 2) throw validation_error("pooling expects a T x d matrix");
    const std::size_t t = tokens.shape[0];
    const std::size_t d = tokens.shape[1];
    if (t == 0) throw validation_error("cannot pool an empty token matrix");
    std::vector<double> acc(d, 0.0);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < d; ++j) acc[j] += tokens.data[i * d + j];
    std::vector<float> out(d);
    for (std::size_t j = 0; j < d; ++j)
        out[j] = static_cast<float>(acc[j] / static_cast<double>(t));
    return out;
}

std::vector<manifest_entry> read_manifest(const std::filesystem::path& manifest_file) {
    std::ifstream in(manifest_file, std::ios::binary);
    if (!in) throw validation_error("cannot open manifest: " + manifest_file.string());
    std::vector<manifest_entry> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw validation_error(manifest_file.string() + ":" + std::to_string(lineno) +
                                   ": invalid JSON record");
        try {
            manifest_entry e;
            e.example_id = j.at("example_id").get<std::string>();
            e.feature_stage = stage_from_string(j.at("stage").get<std::string>());
            e.tensor_path = j.at("tensor").get<std::string>();
            e.token_group_path = j.at("token_groups").get<std::string>();
            if (j.contains("pooled")) e.pooled_path = j["pooled"].get<std::string>();
            if (j.contains("pooling")) e.pooling = j["pooling"].get<std::string>();
            out.push_back(std::move(e));
        } catch (const nlohmann::json::exception& ex) {
            throw validation_error(manifest_file.string() + ":" + std::to_string(lineno) +
                                   ": missing or mistyped field: " + ex.what());
        }
    }
    return out;
}

void write_manifest(const std::filesystem::path& manifest_file,
                    const std::vector<manifest_entry>& entries) {
    std::ofstream out(manifest_file, std::ios::binary);
    if (!out) throw validation_error("cannot write manifest: " + manifest_file.string());
    for (const auto& e : entries) {
        nlohmann::json j = {{"example_id", e.example_id},
                            {"stage", to_string(e.feature_stage)},
                            {"tensor", e.tensor_path},
                            {"token_groups", e.token_group_path},
                            {"pooling", e.pooling}};
        if (!e.pooled_path.empty()) j["pooled"] = e.pooled_path;
        out << j.dump() << '\n';
    }
}

example_features load_example(const std::filesystem::path& base_dir, const manifest_entry& entry) {
    example_features ef;
    ef.example_id = entry.example_id;
    ef.feature_stage = entry.feature_stage;
    ef.tokens = read_tensor(base_dir / entry.tensor_path);
    if (ef.tokens.shape.size() != 2)
        throw validation_error("feature tensor " + entry.tensor_path + " must be rank 2, got rank " +
                               std::to_string(ef.tokens.shape.size()));

    std::ifstream gin(base_dir / entry.token_group_path);
    if (!gin)
        throw validation_error("cannot open token group file: " +
                               (base_dir / entry.token_group_path).string());
    std::string tag;
    while (std::getline(gin, tag)) {
        if (tag.empty()) continue;
        ef.groups.push_back(token_group_from_string(tag));
    }
    if (ef.groups.size() != ef.token_count())
        throw validation_error("token group file " + entry.token_group_path + " lists " +
                               std::to_string(ef.groups.size()) + " tags for " +
                               std::to_string(ef.token_count()) + " tokens");

    if (!entry.pooled_path.empty()) {
        if (entry.pooling != "mean")
            throw validation_error("unsupported pooling method '" + entry.pooling + "' for " +
                                   entry.example_id);
        tensor p = read_tensor(base_dir / entry.pooled_path);
        if (p.shape.size() != 1 || p.shape[0] != ef.dim())
            throw validation_error("pooled tensor " + entry.pooled_path +
                                   " must be a length-d vector");
        const std::vector<float> expect = pool_tokens(ef.tokens);
        for (std::size_t j = 0; j < expect.size(); ++j)
            if (std::fabs(expect[j] - p.data[j]) > 1e-6f)
                throw validation_error("pooled vector for " + entry.example_id +
                                       " does not match mean pooling at dim " + std::to_string(j));
        ef.pooled = std::move(p.data);
    }
    return ef;
}

manifest_entry store_example(const std::filesystem::path& base_dir, const example_features& ef,
                             bool with_pooled) {
    namespace fs = std::filesystem;
    if (ef.tokens.shape.size() != 2)
        throw validation_error("feature tensor for " + ef.example_id + " must be rank 2");
    if (ef.groups.size() != ef.token_count())
        throw validation_error("token group count mismatch for " + ef.example_id);

    const std::string stem = ef.example_id + "_" + to_string(ef.feature_stage);
    fs::create_directories(base_dir / "tensors");
    manifest_entry e;
    e.example_id = ef.example_id;
    e.feature_stage = ef.feature_stage;
    e.tensor_path = "tensors/" + stem + ".trcf";
    e.token_group_path = "tensors/" + stem + ".groups.txt";
    write_tensor(base_dir / e.tensor_path, ef.tokens);
    {
        std::ofstream out(base_dir / e.token_group_path, std::ios::binary);
        for (token_group g : ef.groups) out << to_string(g) << '\n';
    }
    if (with_pooled) {
        tensor p;
        p.shape = {static_cast<std::uint32_t>(ef.dim())};
        p.data = ef.pooled ? *ef.pooled : pool_tokens(ef.tokens);
        e.pooled_path = "tensors/" + stem + ".pooled.trcf";
        write_tensor(base_dir / e.pooled_path, p);
    }
    return e;
}

const example_features* feature_set::find(const std::string& example_id, stage st) const {
    const auto& idx = st == stage::pre ? index_pre : index_post;
    auto it = idx.find(example_id);
    return it == idx.end() ? nullptr : &examples[it->second];
}

feature_set load_feature_set(const std::filesystem::path& manifest_file) {
    const auto base_dir = manifest_file.parent_path();
    feature_set set;
    for (const auto& entry : read_manifest(manifest_file)) {
        example_features ef = load_example(base_dir, entry);
        auto& idx = entry.feature_stage == stage::pre ? set.index_pre : set.index_post;
        if (idx.count(entry.example_id))
            throw validation_error("duplicate manifest entry for " + entry.example_id + " stage " +
                                   to_string(entry.feature_stage));
        idx[entry.example_id] = set.examples.size();
        set.examples.push_back(std::move(ef));
    }
    return set;
}

feature_set make_feature_set(std::vector<example_features> examples) {
    feature_set set;
    set.examples = std::move(examples);
    for (std::size_t i = 0; i < set.examples.size(); ++i) {
        const auto& ef = set.examples[i];
        auto& idx = ef.feature_stage == stage::pre ? set.index_pre : set.index_post;
        if (idx.count(ef.example_id))
            throw validation_error("duplicate example " + ef.example_id + " stage " +
                                   to_string(ef.feature_stage));
        idx[ef.example_id] = i;
    }
    return set;
}

}  // namespace trace_diag
