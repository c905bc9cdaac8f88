#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "trace_diag/pools.hpp"

namespace trace_diag {

// ---- slots ----------------------------------------------------------------

// Short keys in memory; long names ("top-left", ...) on disk and in text.
enum class slot : int { tl = 0, tr = 1, bl = 2, br = 3 };

inline constexpr slot kSlots[] = {slot::tl, slot::tr, slot::bl, slot::br};

std::string slot_name(slot s);  // "top-left" etc.
slot slot_from_name(const std::string& name);

// ---- atomic specs ----------------------------------------------------------

enum class verification { unverified, pass, fail };

struct atomic_spec {
    std::string id;             // unique within a dataset
    std::string object;
    attribute_type attribute;
    std::string value;          // from the pool of `attribute`
    std::string prompt;         // generation prompt
    verification verified = verification::unverified;
    std::string video_path;     // placeholder for the clip payload
};

// `count` random draws; each picks an attribute type, a value from that
// type's pool, and an object. Deterministic under `seed`; ids unique.
std::vector<atomic_spec> sample_atomics(const pools& p, int count, std::uint64_t seed);

// "transparent-glass vase" / "toy car moving left to right": color and
// material values render as hyphenated appearance modifiers, actions as
// trailing motion phrases.
std::string render_atomic_description(const atomic_spec& spec);

// One of the three wrapper templates, template_index in {0,1,2}.
std::string render_atomic_prompt(const atomic_spec& spec, int template_index);

// Two-question checklist asking for a strict-JSON reply.
std::string render_verifier_prompt(const atomic_spec& spec);

struct verifier_check {
    int id = 0;
    std::string question;
    std::string answer;
    std::string reason;
};

struct verifier_verdict {
    bool parse_ok = false;      // false => excluded (fail closed)
    bool all_pass = false;
    std::vector<verifier_check> checks;
    std::string error;          // parse failure reason when !parse_ok
};

// Strict JSON parse of a verifier reply. Malformed input or a missing
// `all_pass` yields a fail-closed verdict, never a crash.
verifier_verdict parse_verifier_reply(const std::string& json_text);

// ---- grid scenes and relation examples -------------------------------------

struct grid_cell {
    std::string atomic_id;
    std::string object;
    std::string value;
};

struct grid_scene {
    std::string scene_id;
    std::array<grid_cell, 4> cells;  // ordered tl, tr, bl, br
    attribute_type attribute;        // shared across the four cells
    slot edited_slot;
    slot reference_slot;             // != edited_slot
    std::string split_group_id;      // stable hash of the unordered atomic-id set
};

// Lexicographically sorts the four atomic ids, joins with '|', FNV-1a 64,
// hex-encoded. Invariant under slot permutations of the same atomics.
std::string split_group_hash(std::array<std::string, 4> atomic_ids);

// Composes one scene from the verified subset of `pool`. Draws an attribute
// type with >= 4 distinct verified values (uniformly among eligible types,
// or `forced_attribute` when given), four distinct values, one verified
// atomic per value, a random slot assignment, and a random ordered
// (edited, reference) slot pair.
grid_scene compose_grid(const std::vector<atomic_spec>& pool, std::uint64_t seed,
                        std::optional<attribute_type> forced_attribute = std::nullopt,
                        std::string scene_id = {});

enum class direction { forward, inverted };
enum class split_label { train, val, test };

std::string to_string(direction d);
std::string to_string(split_label s);
split_label split_from_string(const std::string& s);

struct relation_example {
    std::string example_id;
    std::string scene_id;
    attribute_type attribute;
    slot edited_slot;
    slot reference_slot;
    std::string source_value;       // value at edited_slot before the edit
    std::string target_value;       // value at reference_slot
    std::string edited_object_name;
    std::string reference_object_name;
    direction direction_tag = direction::forward;
    std::string instruction;
    std::string eval_query_answer;  // == target_value
    std::string split_group_id;
    std::optional<split_label> split;
};

// Forward (s_e -> s_r) and inverted (s_r -> s_e) instructions for one scene.
std::pair<relation_example, relation_example> derive_relation_pair(const grid_scene& scene);

// Match template for color/material, motion-trajectory template for action,
// each followed by the evaluation query.
std::string render_instruction(const relation_example& ex);

// Shuffles the distinct group ids and cuts them at llround(ratio * count)
// boundaries. Requires >= 3 distinct groups; every split gets >= 1 group.
std::map<std::string, split_label> split_groups(const std::vector<std::string>& group_ids,
                                                std::array<double, 3> ratios, std::uint64_t seed);

// Per-group split assignment: no split_group_id ever spans two splits.
void assign_splits(std::vector<relation_example>& examples, std::array<double, 3> ratios,
                   std::uint64_t seed);

// ---- dataset assembly -------------------------------------------------------

struct composed_dataset {
    std::vector<atomic_spec> atomics;
    std::vector<grid_scene> scenes;
    std::vector<relation_example> examples;  // 2 per scene, splits assigned
};

struct compose_options {
    int scenes = 0;
    int atomics = 0;  // 0 => derived from `scenes`
    std::array<double, 3> split_ratios{0.7, 0.15, 0.15};
    std::uint64_t seed = 0;
    // With no verifier replies available, admit sampled atomics directly.
    // When false, atomics stay unverified and composition fails.
    bool assume_verified = true;
};

composed_dataset compose_dataset(const pools& p, const compose_options& opt);

// JSON-lines metadata, one record per relation example, plus prompt text
// files under <dir>/prompts/.
void write_dataset(const std::filesystem::path& dir, const composed_dataset& ds);

std::vector<relation_example> read_metadata_jsonl(const std::filesystem::path& file);

// scene_id -> embedded scene_spec record, for rows that carry one.
std::map<std::string, grid_scene> read_scene_specs(const std::filesystem::path& file);
void write_metadata_jsonl(const std::filesystem::path& file,
                          const std::vector<relation_example>& examples);

// Scene description used by the output-audit prompts: one clause per slot.
std::string render_scene_text(const grid_scene& scene);

}  // namespace trace_diag
