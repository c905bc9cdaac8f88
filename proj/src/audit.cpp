#include "trace_diag/audit.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "trace_diag/errors.hpp"

namespace trace_diag {

std::string to_string(activation_failure f) {
    switch (f) {
        case activation_failure::no_visible_change: return "no_visible_change";
        case activation_failure::partial_or_non_target_change:
            return "partial_or_non_target_change";
        case activation_failure::object_missing_or_unreadable:
            return "object_missing_or_unreadable";
    }
    throw validation_error("invalid activation failure value");
}

std::string to_string(failure_label l) {
    switch (l) {
        case failure_label::pass: return "pass";
        case failure_label::no_visible_change: return "no_visible_change";
        case failure_label::partial_or_non_target_change: return "partial_or_non_target_change";
        case failure_label::object_missing_or_unreadable: return "object_missing_or_unreadable";
        case failure_label::under_edit: return "under_edit";
        case failure_label::wrong_slot: return "wrong_slot";
        case failure_label::wrong_object_or_binding: return "wrong_object_or_binding";
        case failure_label::wrong_target_value: return "wrong_target_value";
        case failure_label::undetermined: return "undetermined";
    }
    throw validation_error("invalid failure label value");
}

failure_label failure_label_from_string(const std::string& s) {
    for (failure_label l : kFailureLabels)
        if (to_string(l) == s) return l;
    throw validation_error("unknown failure label: '" + s + "'");
}

std::string slot_position(slot s) {
    switch (s) {
        case slot::tl: return "upper-left cell of the 2x2 grid";
        case slot::tr: return "upper-right cell of the 2x2 grid";
        case slot::bl: return "lower-left cell of the 2x2 grid";
        case slot::br: return "lower-right cell of the 2x2 grid";
    }
    throw validation_error("invalid slot value");
}

judge_context make_judge_context(const relation_example& ex, const std::string& scene_text) {
    judge_context ctx;
    ctx.scene_text = scene_text;
    ctx.instruction = ex.instruction;
    ctx.attribute = to_string(ex.attribute);
    ctx.edited_side = slot_name(ex.edited_slot);
    ctx.edited_position = slot_position(ex.edited_slot);
    ctx.reference_side = slot_name(ex.reference_slot);
    ctx.reference_position = slot_position(ex.reference_slot);
    ctx.edited_object_name = ex.edited_object_name;
    ctx.reference_object_name = ex.reference_object_name;
    ctx.source_value = ex.source_value;
    ctx.target_value = ex.target_value;
    return ctx;
}

namespace {

void require_field(const std::string& value, const char* name) {
    if (value.empty())
        throw validation_error(std::string("judge prompt variable '") + name + "' is empty");
}

void require_context(const judge_context& ctx) {
    require_field(ctx.scene_text, "scene_text");
    require_field(ctx.instruction, "instruction");
    require_field(ctx.layout, "layout");
    require_field(ctx.attribute, "attribute_type");
    require_field(ctx.edited_side, "edited_side");
    require_field(ctx.edited_position, "edited_position");
    require_field(ctx.reference_side, "reference_side");
    require_field(ctx.reference_position, "reference_position");
    require_field(ctx.edited_object_name, "edited_object_name");
    require_field(ctx.reference_object_name, "reference_object_name");
    require_field(ctx.source_value, "source_value");
    require_field(ctx.target_value, "target_value");
}

std::string edit_info_block(const judge_context& ctx) {
    std::ostringstream out;
    out << "Original scene information:\n"
        << ctx.scene_text << "\n\n"
        << "Target edit information:\n"
        << "- instruction: " << ctx.instruction << "\n"
        << "- layout_type: " << ctx.layout << "\n"
        << "- attribute_type: " << ctx.attribute << "\n"
        << "- edited_side: " << ctx.edited_side << " (" << ctx.edited_position << ")\n"
        << "- reference_side: " << ctx.reference_side << " (" << ctx.reference_position << ")\n"
        << "- edited_object_name: " << ctx.edited_object_name << "\n"
        << "- reference_object_name: " << ctx.reference_object_name << "\n"
        << "- source_value: " << ctx.source_value << "\n"
        << "- target_value: " << ctx.target_value << "\n";
    return out.str();
}

}  // namespace

std::string render_stage1_prompt(const judge_context& ctx) {
    require_context(ctx);
    std::ostringstream out;
    out << "You will see two videos in the following fixed order:\n"
           "- Video 1: the original video before editing.\n"
           "- Video 2: the edited/generated result.\n"
           "\n"
           "Compare the two videos and, using the provided original-scene information and target "
           "edit request, judge only whether a sufficiently visible edit has occurred.\n"
           "\n"
           "Task background:\n"
           "- This is a video-editing result verification task.\n"
           "- In this stage, judge only whether Video 2 contains an obvious, readable, and "
           "edit-related change compared with Video 1.\n"
           "- Do not require the visible change to be in the correct slot, on the correct object, "
           "or with the correct target value.\n"
           "- If a clear change occurs, even if the slot, object, binding, or target value is "
           "wrong, output edit_activation_sufficient = true.\n"
           "- Output edit_activation_sufficient = false only when the overall change is still "
           "insufficient. In that case, choose an activation_failure_type.\n"
           "\n";
    out << edit_info_block(ctx);
    out << "\n"
           "If edit_activation_sufficient = false, activation_failure_type must be one of:\n"
           "1. no_visible_change: Video 2 is almost unchanged from Video 1; the target object or "
           "target region barely changes.\n"
           "2. partial_or_non_target_change: some change is visible, but it is mainly weak, "
           "local, on a non-target attribute, on a non-target object, or not sufficient to count "
           "as real edit activation.\n"
           "3. object_missing_or_unreadable: after editing, the target region/object disappears, "
           "becomes severely blurred, is covered by the background, or cannot be read.\n"
           "\n"
           "Output rules:\n"
           "- If edit_activation_sufficient = true, activation_failure_type must be null.\n"
           "- If edit_activation_sufficient = false, activation_failure_type must be one of the "
           "three categories above.\n"
           "- If the case is genuinely impossible to judge, output null for both fields.\n"
           "\n"
           "Strictly output JSON only:\n"
           "{\n"
           "  \"edit_activation_sufficient\": true/false/null,\n"
           "  \"activation_failure_type\": "
           "\"no_visible_change/partial_or_non_target_change/object_missing_or_unreadable/"
           "null\",\n"
           "  \"confidence\": \"high/medium/low\",\n"
           "  \"reason_brief\": \"one sentence explaining whether Video 2 shows a visible edit "
           "relative to Video 1 and, if insufficient, which activation-failure type applies\"\n"
           "}\n";
    return out.str();
}

std::string render_stage2_prompt(const judge_context& ctx) {
    require_context(ctx);
    std::ostringstream out;
    out << "You will see two videos in the following fixed order:\n"
           "- Video 1: the original video before editing.\n"
           "- Video 2: the edited/generated result.\n"
           "\n"
           "Compare the two videos and, using the provided original-scene information and target "
           "edit request, judge whether the main edit location is correct and whether the target "
           "edit is sufficiently clear to determine the final attribute value.\n"
           "\n"
           "Task background:\n"
           "- The previous stage only checked whether Video 2 likely contains a visible edit "
           "relative to Video 1.\n"
           "- This stage checks whether the visible change mainly occurs in the correct slot, on "
           "the correct edited object, and under the correct reference binding.\n"
           "- A video may contain a clear change while still editing the wrong slot or object, "
           "using the wrong reference, or changing the target too weakly to read the final "
           "attribute value.\n"
           "- Therefore, also judge targeted_edit_sufficient. Only when the edit on the correct "
           "target object is clear, sufficient, and readable should target_correct be judged.\n"
           "- If targeted_edit_sufficient = false, target_correct must be null.\n"
           "- If the main problem is slot_correct = false, edited_object_correct = false, or "
           "reference_binding_correct = false, then targeted_edit_sufficient and target_correct "
           "should preferably be null instead of forced.\n"
           "- If the evidence is insufficient for a reliable decision, output null.\n"
           "\n";
    out << edit_info_block(ctx);
    out << "\n"
           "Answer the following five structured questions:\n"
           "1. slot_correct: relative to Video 1, does the main edit change in Video 2 occur at "
           "the correct edited_side?\n"
           "2. edited_object_correct: is the object that mainly changed the expected "
           "edited_object_name?\n"
           "3. reference_binding_correct: is the reference object and reference relation "
           "understood correctly, without confusing the reference object or binding?\n"
           "4. targeted_edit_sufficient: if the change is in the correct slot and on the target "
           "object, is the edit clear, sufficient, and stable enough to reliably judge the final "
           "attribute value? If the change is too weak, too local, occluded, or unreadable, "
           "output false. If the previous fields already indicate a wrong slot, object, or "
           "binding, output null.\n"
           "5. target_correct: only judge this when targeted_edit_sufficient = true. In that "
           "case, has the target object in the correct slot changed to target_value for the "
           "requested attribute_type? If targeted_edit_sufficient is not true, output null.\n"
           "\n"
           "Strictly output JSON only:\n"
           "{\n"
           "  \"slot_correct\": true/false/null,\n"
           "  \"edited_object_correct\": true/false/null,\n"
           "  \"reference_binding_correct\": true/false/null,\n"
           "  \"targeted_edit_sufficient\": true/false/null,\n"
           "  \"target_correct\": true/false/null,\n"
           "  \"confidence\": \"high/medium/low\",\n"
           "  \"reason_brief\": \"one sentence explaining whether the edit is correct or whether "
           "it fails on slot/object/binding/target sufficiency/target value\"\n"
           "}\n";
    return out.str();
}

std::string render_stage1_prompt(const relation_example& ex, const std::string& scene_text) {
    return render_stage1_prompt(make_judge_context(ex, scene_text));
}

std::string render_stage2_prompt(const relation_example& ex, const std::string& scene_text) {
    return render_stage2_prompt(make_judge_context(ex, scene_text));
}

std::map<std::string, std::string> parse_prompt_metadata(const std::string& prompt_text) {
    const std::string marker = "Target edit information:\n";
    const auto start = prompt_text.find(marker);
    if (start == std::string::npos)
        throw validation_error("prompt has no target edit information block");
    std::map<std::string, std::string> out;
    std::istringstream lines(prompt_text.substr(start + marker.size()));
    std::string line;
    while (std::getline(lines, line)) {
        if (line.rfind("- ", 0) != 0) break;
        const auto sep = line.find(": ");
        if (sep == std::string::npos)
            throw format_error("malformed prompt metadata line: '" + line + "'", 0);
        std::string key = line.substr(2, sep - 2);
        std::string value = line.substr(sep + 2);
        if (key == "edited_side" || key == "reference_side") {
            const auto paren = value.find(" (");
            if (paren != std::string::npos) value.resize(paren);
        }
        out[key] = value;
    }
    if (out.empty()) throw validation_error("prompt metadata block is empty");
    return out;
}

namespace {

// true/false/null as booleans, JSON null, or their quoted spellings.
// Anything else normalizes to null with a warning.
ternary parse_ternary(const nlohmann::json& j, const char* field,
                      std::vector<std::string>& warnings) {
    if (!j.contains(field)) {
        warnings.push_back(std::string("missing field '") + field + "', treated as null");
        return std::nullopt;
    }
    const auto& v = j[field];
    if (v.is_boolean()) return v.get<bool>();
    if (v.is_null()) return std::nullopt;
    if (v.is_string()) {
        const std::string s = v.get<std::string>();
        if (s == "true") return true;
        if (s == "false") return false;
        if (s == "null") return std::nullopt;
        warnings.push_back(std::string("unknown value '") + s + "' for '" + field +
                           "', treated as null");
        return std::nullopt;
    }
    warnings.push_back(std::string("non-ternary value for '") + field + "', treated as null");
    return std::nullopt;
}

std::string parse_confidence(const nlohmann::json& j, std::vector<std::string>& warnings) {
    if (!j.contains("confidence") || !j["confidence"].is_string()) return "";
    const std::string c = j["confidence"].get<std::string>();
    if (c == "high" || c == "medium" || c == "low") return c;
    warnings.push_back("unknown confidence '" + c + "', dropped");
    return "";
}

std::string parse_reason(const nlohmann::json& j) {
    if (j.contains("reason_brief") && j["reason_brief"].is_string())
        return j["reason_brief"].get<std::string>();
    return "";
}

}  // namespace

std::optional<activation_verdict> parse_stage1_verdict(const std::string& json_text) {
    nlohmann::json j = nlohmann::json::parse(json_text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return std::nullopt;

    activation_verdict v;
    v.edit_activation_sufficient = parse_ternary(j, "edit_activation_sufficient", v.warnings);
    if (j.contains("activation_failure_type") && !j["activation_failure_type"].is_null()) {
        if (j["activation_failure_type"].is_string()) {
            const std::string t = j["activation_failure_type"].get<std::string>();
            if (t == "no_visible_change")
                v.failure_type = activation_failure::no_visible_change;
            else if (t == "partial_or_non_target_change")
                v.failure_type = activation_failure::partial_or_non_target_change;
            else if (t == "object_missing_or_unreadable")
                v.failure_type = activation_failure::object_missing_or_unreadable;
            else if (t != "null")
                v.warnings.push_back("unknown activation_failure_type '" + t +
                                     "', treated as null");
        } else {
            v.warnings.push_back("non-string activation_failure_type, treated as null");
        }
    }
    v.confidence = parse_confidence(j, v.warnings);
    v.reason_brief = parse_reason(j);
    if (v.edit_activation_sufficient == ternary{true} && v.failure_type) {
        v.inconsistent = true;
        v.warnings.push_back(
            "edit_activation_sufficient=true paired with a failure type; verdict flagged");
    }
    return v;
}

std::optional<structural_verdict> parse_stage2_verdict(const std::string& json_text) {
    nlohmann::json j = nlohmann::json::parse(json_text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return std::nullopt;

    structural_verdict v;
    v.slot_correct = parse_ternary(j, "slot_correct", v.warnings);
    v.edited_object_correct = parse_ternary(j, "edited_object_correct", v.warnings);
    v.reference_binding_correct = parse_ternary(j, "reference_binding_correct", v.warnings);
    v.targeted_edit_sufficient = parse_ternary(j, "targeted_edit_sufficient", v.warnings);
    v.target_correct = parse_ternary(j, "target_correct", v.warnings);
    if (j.contains("under_edit") && j["under_edit"].is_boolean())
        v.under_edit_flag = j["under_edit"].get<bool>();
    v.confidence = parse_confidence(j, v.warnings);
    v.reason_brief = parse_reason(j);
    if (v.target_correct.has_value() && v.targeted_edit_sufficient != ternary{true}) {
        v.inconsistent = true;
        v.warnings.push_back(
            "target_correct judged while targeted_edit_sufficient is not true; verdict flagged");
    }
    return v;
}

std::optional<std::pair<activation_verdict, std::optional<structural_verdict>>> parse_verdicts(
    const std::string& stage1_json, const std::optional<std::string>& stage2_json) {
    auto a = parse_stage1_verdict(stage1_json);
    if (!a) return std::nullopt;
    std::optional<structural_verdict> s;
    if (stage2_json) {
        s = parse_stage2_verdict(*stage2_json);
        if (!s) return std::nullopt;
    }
    return std::make_pair(std::move(*a), std::move(s));
}

failure_label derive_failure_label(const activation_verdict& a,
                                   const std::optional<structural_verdict>& s) {
    if (a.edit_activation_sufficient == ternary{false}) {
        if (a.failure_type) {
            switch (*a.failure_type) {
                case activation_failure::no_visible_change:
                    return failure_label::no_visible_change;
                case activation_failure::partial_or_non_target_change:
                    return failure_label::partial_or_non_target_change;
                case activation_failure::object_missing_or_unreadable:
                    return failure_label::object_missing_or_unreadable;
            }
        }
        return failure_label::under_edit;
    }
    if (s) {
        if (s->slot_correct == ternary{false}) return failure_label::wrong_slot;
        if (s->edited_object_correct == ternary{false} ||
            s->reference_binding_correct == ternary{false})
            return failure_label::wrong_object_or_binding;
        if (s->targeted_edit_sufficient == ternary{false} || s->under_edit_flag)
            return failure_label::under_edit;
        if (s->target_correct == ternary{false}) return failure_label::wrong_target_value;
        if (a.edit_activation_sufficient == ternary{true} && s->slot_correct == ternary{true} &&
            s->edited_object_correct == ternary{true} &&
            s->reference_binding_correct == ternary{true} &&
            s->targeted_edit_sufficient == ternary{true} && s->target_correct == ternary{true})
            return failure_label::pass;
    }
    return failure_label::undetermined;
}

audit_report compute_rates(const std::vector<failure_label>& labels, std::int64_t n_excluded) {
    if (labels.empty()) throw validation_error("rate computation needs at least one label");
    audit_report rep;
    rep.n_eval = static_cast<std::int64_t>(labels.size());
    rep.n_excluded = n_excluded;
    for (failure_label l : labels) ++rep.count[static_cast<int>(l)];
    rep.n_pass = rep.count[static_cast<int>(failure_label::pass)];
    rep.n_under_family = rep.count[static_cast<int>(failure_label::no_visible_change)] +
                         rep.count[static_cast<int>(failure_label::partial_or_non_target_change)] +
                         rep.count[static_cast<int>(failure_label::object_missing_or_unreadable)] +
                         rep.count[static_cast<int>(failure_label::under_edit)];
    rep.n_wrong_slot = rep.count[static_cast<int>(failure_label::wrong_slot)];
    rep.n_wrong_object_or_binding =
        rep.count[static_cast<int>(failure_label::wrong_object_or_binding)];
    rep.n_wrong_target_value = rep.count[static_cast<int>(failure_label::wrong_target_value)];
    rep.n_undetermined = rep.count[static_cast<int>(failure_label::undetermined)];

    const auto n = static_cast<double>(rep.n_eval);
    rep.pass_rate = static_cast<double>(rep.n_pass) / n;
    rep.struct_err =
        static_cast<double>(rep.n_wrong_slot + rep.n_wrong_object_or_binding) / n;
    rep.under_edit = static_cast<double>(rep.n_under_family) / n;
    return rep;
}

void emit_judge_prompts(const std::filesystem::path& dir,
                        const std::vector<relation_example>& examples,
                        const std::vector<std::string>& scene_texts) {
    if (examples.size() != scene_texts.size())
        throw validation_error("examples and scene texts must align");
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const judge_context ctx = make_judge_context(examples[i], scene_texts[i]);
        {
            std::ofstream out(dir / (examples[i].example_id + ".stage1.txt"), std::ios::binary);
            if (!out) throw validation_error("cannot write prompt under " + dir.string());
            out << render_stage1_prompt(ctx);
        }
        {
            std::ofstream out(dir / (examples[i].example_id + ".stage2.txt"), std::ios::binary);
            out << render_stage2_prompt(ctx);
        }
    }
}

namespace {

std::optional<std::string> read_text(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) return std::nullopt;
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

audit_run audit_verdict_dir(const std::filesystem::path& dir,
                            const std::vector<std::string>& example_ids) {
    if (example_ids.empty()) throw validation_error("audit needs at least one example id");
    audit_run run;
    std::vector<failure_label> labels;
    std::int64_t excluded = 0;

    for (const auto& id : example_ids) {
        audited_example ae;
        ae.example_id = id;
        const auto stage1_text = read_text(dir / (id + ".stage1.json"));
        if (!stage1_text) {
            ae.warnings.push_back("stage-1 verdict file missing; excluded");
            ++excluded;
            run.examples.push_back(std::move(ae));
            continue;
        }
        const auto a = parse_stage1_verdict(*stage1_text);
        if (!a) {
            ae.warnings.push_back("stage-1 verdict unparsable; excluded");
            ++excluded;
            run.examples.push_back(std::move(ae));
            continue;
        }
        ae.warnings.insert(ae.warnings.end(), a->warnings.begin(), a->warnings.end());

        std::optional<structural_verdict> s;
        if (a->edit_activation_sufficient != ternary{false}) {
            const auto stage2_text = read_text(dir / (id + ".stage2.json"));
            if (stage2_text) {
                s = parse_stage2_verdict(*stage2_text);
                if (!s) {
                    ae.warnings.push_back("stage-2 verdict unparsable; excluded");
                    ++excluded;
                    run.examples.push_back(std::move(ae));
                    continue;
                }
                ae.warnings.insert(ae.warnings.end(), s->warnings.begin(), s->warnings.end());
            }
        }
        const failure_label label = derive_failure_label(*a, s);
        ae.label = label;
        labels.push_back(label);
        run.examples.push_back(std::move(ae));
    }

    if (labels.empty())
        throw computation_error("no judgeable outputs: every verdict was missing or unparsable");
    run.report = compute_rates(labels, excluded);
    return run;
}

}  // namespace trace_diag
