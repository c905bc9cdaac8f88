#include <cstring>
#include <fstream>

#include "doctest.h"
#include "test_util.hpp"
#include "trace_diag/errors.hpp"
#include "trace_diag/feature_store.hpp"

using namespace trace_diag;

namespace {

example_features sample_features(const std::string& id, stage st) {
    example_features ef;
    ef.example_id = id;
    ef.feature_stage = st;
    ef.tokens = tensor::matrix(4, 3);
    float v = 1.0f;
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 3; ++c) ef.tokens.at(r, c) = v++;
    ef.groups = {token_group::text, token_group::query, token_group::vision, token_group::other};
    ef.pooled = pool_tokens(ef.tokens);
    return ef;
}

}  // namespace

TEST_CASE("stage, group, and view names round trip") {
    CHECK(stage_from_string(to_string(stage::pre)) == stage::pre);
    CHECK(stage_from_string(to_string(stage::post)) == stage::post);
    CHECK_THROWS_AS(stage_from_string("mid"), validation_error);

    for (token_group g :
         {token_group::text, token_group::query, token_group::vision, token_group::other})
        CHECK(token_group_from_string(to_string(g)) == g);
    CHECK_THROWS_AS(token_group_from_string("audio"), validation_error);

    for (feature_view v : {feature_view::mixed, feature_view::text, feature_view::query})
        CHECK(view_from_string(to_string(v)) == v);
    CHECK_THROWS_AS(view_from_string("vision"), validation_error);
}

TEST_CASE("pool_tokens is the exact per-dimension mean") {
    tensor t = tensor::matrix(2, 3);
    t.at(0, 0) = 1;
    t.at(0, 1) = 2;
    t.at(0, 2) = 3;
    t.at(1, 0) = 3;
    t.at(1, 1) = 6;
    t.at(1, 2) = 9;
    const auto pooled = pool_tokens(t);
    REQUIRE(pooled.size() == 3);
    CHECK(pooled[0] == 2.0f);
    CHECK(pooled[1] == 4.0f);
    CHECK(pooled[2] == 6.0f);
}

TEST_CASE("select_view filters rows by group tag in order") {
    const example_features ef = sample_features("e1", stage::pre);

    const tensor mixed = select_view(ef, feature_view::mixed);
    REQUIRE(mixed.shape[0] == 3);  // text, query, vision; never "other"
    CHECK(mixed.at(0, 0) == ef.tokens.at(0, 0));
    CHECK(mixed.at(1, 0) == ef.tokens.at(1, 0));
    CHECK(mixed.at(2, 0) == ef.tokens.at(2, 0));
    const auto mixed_groups = select_view_groups(ef, feature_view::mixed);
    REQUIRE(mixed_groups.size() == 3);
    CHECK(mixed_groups[0] == token_group::text);
    CHECK(mixed_groups[1] == token_group::query);
    CHECK(mixed_groups[2] == token_group::vision);

    const tensor text = select_view(ef, feature_view::text);
    REQUIRE(text.shape[0] == 1);
    CHECK(text.at(0, 2) == ef.tokens.at(0, 2));

    const tensor query = select_view(ef, feature_view::query);
    REQUIRE(query.shape[0] == 1);
    CHECK(query.at(0, 0) == ef.tokens.at(1, 0));
}

TEST_CASE("store and load round trip an example bit-exactly") {
    const auto dir = test_util::temp_dir("feature_store");
    const example_features ef = sample_features("ex01", stage::pre);
    const manifest_entry entry = store_example(dir, ef);
    CHECK(entry.example_id == "ex01");
    CHECK(entry.pooling == "mean");
    CHECK_FALSE(entry.pooled_path.empty());

    const example_features back = load_example(dir, entry);
    CHECK(back.example_id == ef.example_id);
    CHECK(back.feature_stage == ef.feature_stage);
    REQUIRE(back.tokens.shape == ef.tokens.shape);
    CHECK(std::memcmp(back.tokens.data.data(), ef.tokens.data.data(),
                      ef.tokens.data.size() * sizeof(float)) == 0);
    CHECK(back.groups == ef.groups);
    REQUIRE(back.pooled.has_value());
    CHECK(*back.pooled == *ef.pooled);

    const manifest_entry lean = store_example(dir, sample_features("ex02", stage::post), false);
    CHECK(lean.pooled_path.empty());
    CHECK_FALSE(load_example(dir, lean).pooled.has_value());
}

TEST_CASE("manifest files round trip") {
    const auto dir = test_util::temp_dir("manifest_roundtrip");
    std::vector<manifest_entry> entries;
    entries.push_back(store_example(dir, sample_features("a", stage::pre)));
    entries.push_back(store_example(dir, sample_features("a", stage::post)));
    write_manifest(dir / "manifest.jsonl", entries);

    const auto back = read_manifest(dir / "manifest.jsonl");
    REQUIRE(back.size() == 2);
    CHECK(back[0].example_id == "a");
    CHECK(back[0].feature_stage == stage::pre);
    CHECK(back[1].feature_stage == stage::post);
    CHECK(back[0].tensor_path == entries[0].tensor_path);
    CHECK(back[1].token_group_path == entries[1].token_group_path);
}

TEST_CASE("load_feature_set validates shapes, tags, and pooled vectors") {
    const auto dir = test_util::temp_dir("feature_set");
    std::vector<manifest_entry> entries;
    entries.push_back(store_example(dir, sample_features("a", stage::pre)));
    entries.push_back(store_example(dir, sample_features("a", stage::post)));
    entries.push_back(store_example(dir, sample_features("b", stage::pre)));
    write_manifest(dir / "manifest.jsonl", entries);

    const feature_set fs = load_feature_set(dir / "manifest.jsonl");
    CHECK(fs.examples.size() == 3);
    CHECK(fs.find("a", stage::pre) != nullptr);
    CHECK(fs.find("a", stage::post) != nullptr);
    CHECK(fs.find("b", stage::post) == nullptr);
    CHECK(fs.find("a", stage::pre)->tokens.at(1, 1) == 5.0f);

    // A pooled vector that disagrees with the declared mean pooling is rejected.
    {
        std::ofstream out(dir / entries[0].pooled_path, std::ios::binary | std::ios::trunc);
        const float wrong[3] = {9.0f, 9.0f, 9.0f};
        out.write(reinterpret_cast<const char*>(wrong), sizeof wrong);
    }
    CHECK_THROWS_AS(load_feature_set(dir / "manifest.jsonl"), validation_error);
}

TEST_CASE("duplicate example and stage pairs are rejected") {
    const auto dir = test_util::temp_dir("feature_dupe");
    std::vector<manifest_entry> entries;
    entries.push_back(store_example(dir, sample_features("a", stage::pre)));
    entries.push_back(entries.front());
    write_manifest(dir / "manifest.jsonl", entries);
    CHECK_THROWS_AS(load_feature_set(dir / "manifest.jsonl"), validation_error);

    std::vector<example_features> mem{sample_features("a", stage::pre),
                                      sample_features("a", stage::pre)};
    CHECK_THROWS_AS(make_feature_set(std::move(mem)), validation_error);

    std::vector<example_features> ok{sample_features("a", stage::pre),
                                     sample_features("a", stage::post),
                                     sample_features("b", stage::pre)};
    const feature_set fs = make_feature_set(std::move(ok));
    CHECK(fs.index_pre.size() == 2);
    CHECK(fs.index_post.size() == 1);
    CHECK(fs.find("b", stage::pre)->example_id == "b");
}
