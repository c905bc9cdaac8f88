#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "trace_diag/compose.hpp"

namespace trace_diag {

// Ternary judge answer. Unknown enum strings normalize to null with a warning.
using ternary = std::optional<bool>;

enum class activation_failure {
    no_visible_change,
    partial_or_non_target_change,
    object_missing_or_unreadable,
};

std::string to_string(activation_failure f);

struct activation_verdict {
    ternary edit_activation_sufficient;
    std::optional<activation_failure> failure_type;
    std::string confidence;  // high / medium / low ("" when absent or unknown)
    std::string reason_brief;
    bool inconsistent = false;  // sufficient=true paired with a failure type
    std::vector<std::string> warnings;
};

struct structural_verdict {
    ternary slot_correct;
    ternary edited_object_correct;
    ternary reference_binding_correct;
    ternary targeted_edit_sufficient;
    ternary target_correct;
    bool under_edit_flag = false;  // optional pseudocode flag, default false
    std::string confidence;
    std::string reason_brief;
    bool inconsistent = false;  // target judged while sufficiency is not true
    std::vector<std::string> warnings;
};

enum class failure_label {
    pass,
    no_visible_change,
    partial_or_non_target_change,
    object_missing_or_unreadable,
    under_edit,
    wrong_slot,
    wrong_object_or_binding,
    wrong_target_value,
    undetermined,
};

inline constexpr failure_label kFailureLabels[] = {
    failure_label::pass,
    failure_label::no_visible_change,
    failure_label::partial_or_non_target_change,
    failure_label::object_missing_or_unreadable,
    failure_label::under_edit,
    failure_label::wrong_slot,
    failure_label::wrong_object_or_binding,
    failure_label::wrong_target_value,
    failure_label::undetermined,
};

std::string to_string(failure_label l);
failure_label failure_label_from_string(const std::string& s);

// Variables available to the judge prompt templates.
struct judge_context {
    std::string scene_text;
    std::string instruction;
    std::string layout = "2x2_grid";
    std::string attribute;
    std::string edited_side;
    std::string edited_position;
    std::string reference_side;
    std::string reference_position;
    std::string edited_object_name;
    std::string reference_object_name;
    std::string source_value;
    std::string target_value;
};

judge_context make_judge_context(const relation_example& ex, const std::string& scene_text);

// Position phrase for a slot name ("upper-left cell of the 2x2 grid").
std::string slot_position(slot s);

std::string render_stage1_prompt(const judge_context& ctx);
std::string render_stage2_prompt(const judge_context& ctx);
std::string render_stage1_prompt(const relation_example& ex, const std::string& scene_text);
std::string render_stage2_prompt(const relation_example& ex, const std::string& scene_text);

// Recovers the "Target edit information" key/value block from a rendered
// prompt. Side fields are stripped of their position parenthetical.
std::map<std::string, std::string> parse_prompt_metadata(const std::string& prompt_text);

// Strict JSON parsing. Unparsable input returns nullopt: the output is
// excluded from evaluation rather than labeled.
std::optional<activation_verdict> parse_stage1_verdict(const std::string& json_text);
std::optional<structural_verdict> parse_stage2_verdict(const std::string& json_text);

// Combined parse. nullopt = excluded from evaluation (stage 1 unparsable, or
// stage 2 present but unparsable). Stage 2 is optional.
std::optional<std::pair<activation_verdict, std::optional<structural_verdict>>> parse_verdicts(
    const std::string& stage1_json, const std::optional<std::string>& stage2_json);

// The priority machine over raw verdict values.
failure_label derive_failure_label(const activation_verdict& a,
                                   const std::optional<structural_verdict>& s);

struct audit_report {
    std::int64_t n_eval = 0;
    std::int64_t n_excluded = 0;  // unparsable judge outputs, outside n_eval
    std::int64_t n_pass = 0;
    std::int64_t n_under_family = 0;  // 3 activation subtypes + under_edit
    std::int64_t n_wrong_slot = 0;
    std::int64_t n_wrong_object_or_binding = 0;
    std::int64_t n_wrong_target_value = 0;
    std::int64_t n_undetermined = 0;
    std::int64_t count[9] = {0};  // indexed by failure_label

    double pass_rate = 0.0;    // n_pass / n_eval
    double struct_err = 0.0;   // (wrong_slot + wrong_object_or_binding) / n_eval
    double under_edit = 0.0;   // under family / n_eval
};

audit_report compute_rates(const std::vector<failure_label>& labels, std::int64_t n_excluded = 0);

// File-level flow: prompts out, verdicts in.
// Verdict files: <dir>/<example_id>.stage1.json and .stage2.json.
struct audited_example {
    std::string example_id;
    std::optional<failure_label> label;  // nullopt = excluded
    std::vector<std::string> warnings;
};

struct audit_run {
    std::vector<audited_example> examples;
    audit_report report;
};

void emit_judge_prompts(const std::filesystem::path& dir,
                        const std::vector<relation_example>& examples,
                        const std::vector<std::string>& scene_texts);

audit_run audit_verdict_dir(const std::filesystem::path& dir,
                            const std::vector<std::string>& example_ids);

}  // namespace trace_diag
