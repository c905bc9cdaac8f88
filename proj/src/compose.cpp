#include "trace_diag/compose.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "trace_diag/errors.hpp"
#include "trace_diag/rng.hpp"

namespace trace_diag {

namespace {

std::string zero_pad(std::uint64_t n, int width) {
    std::string s = std::to_string(n);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

std::string hyphenate(const std::string& value) {
    std::string out = value;
    for (char& c : out)
        if (c == ' ') c = '-';
    return out;
}

}  // namespace

std::string slot_name(slot s) {
    switch (s) {
        case slot::tl: return "top-left";
        case slot::tr: return "top-right";
        case slot::bl: return "bottom-left";
        case slot::br: return "bottom-right";
    }
    throw validation_error("invalid slot value");
}

slot slot_from_name(const std::string& name) {
    for (slot s : kSlots)
        if (slot_name(s) == name) return s;
    throw validation_error("unknown slot name: '" + name + "'");
}

std::vector<atomic_spec> sample_atomics(const pools& p, int count, std::uint64_t seed) {
    if (count < 0) throw validation_error("atomic count must be >= 0");
    p.validate();
    std::vector<atomic_spec> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        rng r(derive_seed(seed, "sample_atomics", static_cast<std::uint64_t>(i)));
        atomic_spec spec;
        spec.id = "atom_" + zero_pad(static_cast<std::uint64_t>(i), 6);
        spec.attribute = kAttributeTypes[r.index(3)];
        const auto& values = p.values_for(spec.attribute);
        spec.value = values[r.index(values.size())];
        spec.object = p.objects[r.index(p.objects.size())];
        spec.prompt = render_atomic_prompt(spec, static_cast<int>(r.index(3)));
        spec.verified = verification::unverified;
        spec.video_path = "videos/" + spec.id + ".mp4";
        out.push_back(std::move(spec));
    }
    return out;
}

std::string render_atomic_description(const atomic_spec& spec) {
    if (spec.object.empty()) throw validation_error("atomic spec has empty object name");
    if (spec.value.empty()) throw validation_error("atomic spec has empty value");
    if (spec.attribute == attribute_type::action) return spec.object + " " + spec.value;
    return hyphenate(spec.value) + " " + spec.object;
}

std::string render_atomic_prompt(const atomic_spec& spec, int template_index) {
    const std::string desc = render_atomic_description(spec);
    switch (template_index) {
        case 0:
            return "The center of the frame contains only one " + desc +
                   "; the subject is clear, the background is simple, and the camera remains "
                   "stable.";
        case 1:
            return "One " + desc +
                   " is located at the center of the frame; the background is clean and the "
                   "overall motion is natural and stable.";
        case 2:
            return "The video contains only one " + desc +
                   "; the subject is complete and clear, and the scene is simple and stable.";
        default:
            throw validation_error("atomic prompt template index must be 0, 1, or 2 (got " +
                                   std::to_string(template_index) + ")");
    }
}

std::string render_verifier_prompt(const atomic_spec& spec) {
    if (spec.object.empty()) throw validation_error("atomic spec has empty object name");
    if (spec.value.empty()) throw validation_error("atomic spec has empty value");
    const std::string label = to_string(spec.attribute);
    std::ostringstream out;
    out << "Please carefully watch this video and answer each question below. For each item, "
           "answer \"yes\" or \"no\" and briefly explain the reason. Finally, provide an overall "
           "judgment.\n\n";
    out << "1. Does the video contain a unique central subject " << spec.object << "?\n";
    out << "2. Is the " << label << " of " << spec.object << " equal to " << spec.value << "?\n\n";
    out << "Please strictly output JSON only:\n";
    out << "{\"checks\": [{\"id\": 1, \"question\": \"...\", \"answer\": \"yes/no\", \"reason\": "
           "\"...\"}, ...], \"all_pass\": true/false}";
    return out.str();
}

verifier_verdict parse_verifier_reply(const std::string& json_text) {
    verifier_verdict v;
    nlohmann::json j = nlohmann::json::parse(json_text, nullptr, false);
    if (j.is_discarded()) {
        v.error = "reply is not valid JSON";
        return v;
    }
    if (!j.is_object() || !j.contains("all_pass") || !j["all_pass"].is_boolean()) {
        v.error = "reply has no boolean all_pass field";
        return v;
    }
    v.parse_ok = true;
    v.all_pass = j["all_pass"].get<bool>();
    if (j.contains("checks") && j["checks"].is_array()) {
        for (const auto& c : j["checks"]) {
            verifier_check chk;
            if (c.contains("id") && c["id"].is_number_integer()) chk.id = c["id"].get<int>();
            if (c.contains("question") && c["question"].is_string())
                chk.question = c["question"].get<std::string>();
            if (c.contains("answer") && c["answer"].is_string())
                chk.answer = c["answer"].get<std::string>();
            if (c.contains("reason") && c["reason"].is_string())
                chk.reason = c["reason"].get<std::string>();
            v.checks.push_back(std::move(chk));
        }
    }
    return v;
}

std::string split_group_hash(std::array<std::string, 4> atomic_ids) {
    std::sort(atomic_ids.begin(), atomic_ids.end());
    std::string joined;
    for (const auto& id : atomic_ids) {
        if (!joined.empty()) joined += '|';
        joined += id;
    }
    const std::uint64_t h = fnv1a64(joined);
    static const char* hex = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 0; i < 16; ++i) out[15 - i] = hex[(h >> (4 * i)) & 0xf];
    return out;
}

grid_scene compose_grid(const std::vector<atomic_spec>& pool, std::uint64_t seed,
                        std::optional<attribute_type> forced_attribute, std::string scene_id) {
    // Verified atoms, bucketed per (attribute, value).
    std::map<attribute_type, std::map<std::string, std::vector<const atomic_spec*>>> buckets;
    for (const auto& spec : pool)
        if (spec.verified == verification::pass) buckets[spec.attribute][spec.value].push_back(&spec);

    rng r(derive_seed(seed, "compose_grid"));

    std::vector<attribute_type> eligible;
    for (attribute_type a : kAttributeTypes)
        if (buckets.count(a) && buckets[a].size() >= 4) eligible.push_back(a);

    attribute_type a;
    if (forced_attribute) {
        a = *forced_attribute;
        if (!buckets.count(a) || buckets[a].size() < 4)
            throw computation_error("cannot compose grid: attribute '" + to_string(a) +
                                    "' has fewer than 4 distinct verified values");
    } else {
        if (eligible.empty())
            throw computation_error(
                "cannot compose grid: no attribute type has 4 distinct verified values");
        a = eligible[r.index(eligible.size())];
    }

    std::vector<std::string> values;
    for (const auto& [v, atoms] : buckets[a]) values.push_back(v);
    r.shuffle(values);
    values.resize(4);

    std::array<grid_cell, 4> cells;
    for (int i = 0; i < 4; ++i) {
        const auto& atoms = buckets[a][values[static_cast<std::size_t>(i)]];
        const atomic_spec* pick = atoms[r.index(atoms.size())];
        cells[static_cast<std::size_t>(i)] = {pick->id, pick->object, pick->value};
    }

    // Random slot assignment for the four picks.
    std::vector<int> order = {0, 1, 2, 3};
    r.shuffle(order);
    std::array<grid_cell, 4> slotted;
    for (int i = 0; i < 4; ++i)
        slotted[static_cast<std::size_t>(i)] = cells[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];

    // Ordered (edited, reference) pair, uniform over the 12 ordered pairs.
    const std::size_t se = r.index(4);
    std::size_t sr = r.index(3);
    if (sr >= se) ++sr;

    grid_scene scene;
    scene.scene_id = scene_id.empty() ? "scene_" + zero_pad(seed, 6) : std::move(scene_id);
    scene.cells = slotted;
    scene.attribute = a;
    scene.edited_slot = kSlots[se];
    scene.reference_slot = kSlots[sr];
    scene.split_group_id = split_group_hash(
        {slotted[0].atomic_id, slotted[1].atomic_id, slotted[2].atomic_id, slotted[3].atomic_id});
    return scene;
}

std::string to_string(direction d) {
    return d == direction::forward ? "forward" : "inverted";
}

std::string to_string(split_label s) {
    switch (s) {
        case split_label::train: return "train";
        case split_label::val: return "val";
        case split_label::test: return "test";
    }
    throw validation_error("invalid split label");
}

split_label split_from_string(const std::string& s) {
    if (s == "train") return split_label::train;
    if (s == "val") return split_label::val;
    if (s == "test") return split_label::test;
    throw validation_error("unknown split label: '" + s + "'");
}

namespace {

const grid_cell& cell_at(const grid_scene& scene, slot s) {
    return scene.cells[static_cast<std::size_t>(s)];
}

relation_example make_example(const grid_scene& scene, slot edited, slot reference, direction d) {
    relation_example ex;
    ex.example_id = scene.scene_id + "_" + to_string(d);
    ex.scene_id = scene.scene_id;
    ex.attribute = scene.attribute;
    ex.edited_slot = edited;
    ex.reference_slot = reference;
    ex.source_value = cell_at(scene, edited).value;
    ex.target_value = cell_at(scene, reference).value;
    ex.edited_object_name = cell_at(scene, edited).object;
    ex.reference_object_name = cell_at(scene, reference).object;
    ex.direction_tag = d;
    ex.instruction = render_instruction(ex);
    ex.eval_query_answer = ex.target_value;
    ex.split_group_id = scene.split_group_id;
    return ex;
}

}  // namespace

std::pair<relation_example, relation_example> derive_relation_pair(const grid_scene& scene) {
    if (scene.edited_slot == scene.reference_slot)
        throw validation_error("scene has identical edited and reference slots");
    return {make_example(scene, scene.edited_slot, scene.reference_slot, direction::forward),
            make_example(scene, scene.reference_slot, scene.edited_slot, direction::inverted)};
}

std::string render_instruction(const relation_example& ex) {
    const std::string es = slot_name(ex.edited_slot);
    const std::string rs = slot_name(ex.reference_slot);
    if (ex.attribute == attribute_type::action) {
        return "Make the motion trajectory of the object at " + es +
               " consistent with the object at " + rs +
               ". After editing, what is the motion trajectory of the object at " + es + "?";
    }
    const std::string label = to_string(ex.attribute);
    return "Change the " + label + " of the object at " + es + " to match the object at " + rs +
           ". After editing, what is the " + label + " of the object at " + es + "?";
}

std::map<std::string, split_label> split_groups(const std::vector<std::string>& group_ids,
                                                std::array<double, 3> ratios, std::uint64_t seed) {
    const double sum = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(sum - 1.0) > 1e-9) throw validation_error("split ratios must sum to 1");

    std::set<std::string> group_set(group_ids.begin(), group_ids.end());
    if (group_set.size() < 3)
        throw validation_error("need at least 3 distinct split groups, got " +
                               std::to_string(group_set.size()));

    std::vector<std::string> groups(group_set.begin(), group_set.end());
    rng r(derive_seed(seed, "assign_splits"));
    r.shuffle(groups);

    const auto g = static_cast<double>(groups.size());
    auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * g));
    auto n_val = static_cast<std::size_t>(std::llround(ratios[1] * g));
    // Remainder goes to test; every split keeps at least one group.
    if (n_train == 0) n_train = 1;
    if (n_val == 0) n_val = 1;
    if (n_train + n_val >= groups.size()) {
        n_train = groups.size() - 2;
        n_val = 1;
    }

    std::map<std::string, split_label> assignment;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        split_label lab = i < n_train                ? split_label::train
                          : i < n_train + n_val      ? split_label::val
                                                     : split_label::test;
        assignment[groups[i]] = lab;
    }
    return assignment;
}

void assign_splits(std::vector<relation_example>& examples, std::array<double, 3> ratios,
                   std::uint64_t seed) {
    std::vector<std::string> ids;
    ids.reserve(examples.size());
    for (const auto& ex : examples) {
        if (ex.split_group_id.empty())
            throw validation_error("example " + ex.example_id + " has no split_group_id");
        ids.push_back(ex.split_group_id);
    }
    const auto assignment = split_groups(ids, ratios, seed);
    for (auto& ex : examples) ex.split = assignment.at(ex.split_group_id);
}

composed_dataset compose_dataset(const pools& p, const compose_options& opt) {
    if (opt.scenes < 1) throw validation_error("scene count must be >= 1");
    composed_dataset ds;
    const int n_atomics = opt.atomics > 0 ? opt.atomics : std::max(60, opt.scenes);
    ds.atomics = sample_atomics(p, n_atomics, derive_seed(opt.seed, "atomics"));
    if (opt.assume_verified)
        for (auto& a : ds.atomics) a.verified = verification::pass;

    ds.scenes.reserve(static_cast<std::size_t>(opt.scenes));
    ds.examples.reserve(static_cast<std::size_t>(opt.scenes) * 2);
    for (int i = 0; i < opt.scenes; ++i) {
        grid_scene scene =
            compose_grid(ds.atomics, derive_seed(opt.seed, "scene", static_cast<std::uint64_t>(i)),
                         std::nullopt, "scene_" + zero_pad(static_cast<std::uint64_t>(i), 6));
        auto [fwd, inv] = derive_relation_pair(scene);
        ds.scenes.push_back(std::move(scene));
        ds.examples.push_back(std::move(fwd));
        ds.examples.push_back(std::move(inv));
    }
    assign_splits(ds.examples, opt.split_ratios, derive_seed(opt.seed, "splits"));
    return ds;
}

namespace {

nlohmann::json scene_spec_json(const grid_scene& scene) {
    nlohmann::json slots = nlohmann::json::object();
    for (slot s : kSlots) {
        const grid_cell& c = scene.cells[static_cast<std::size_t>(s)];
        slots[slot_name(s)] = {{"atomic_id", c.atomic_id}, {"object", c.object}, {"value", c.value}};
    }
    return {{"scene_id", scene.scene_id},
            {"attribute_type", to_string(scene.attribute)},
            {"slots", slots},
            {"edited_slot", slot_name(scene.edited_slot)},
            {"reference_slot", slot_name(scene.reference_slot)},
            {"split_group_id", scene.split_group_id}};
}

nlohmann::json example_json(const relation_example& ex, const grid_scene* scene) {
    nlohmann::json j = {{"example_id", ex.example_id},
                        {"scene_id", ex.scene_id},
                        {"attribute_type", to_string(ex.attribute)},
                        {"edited_slot", slot_name(ex.edited_slot)},
                        {"reference_slot", slot_name(ex.reference_slot)},
                        {"source_value", ex.source_value},
                        {"target_value", ex.target_value},
                        {"edited_object_name", ex.edited_object_name},
                        {"reference_object_name", ex.reference_object_name},
                        {"direction_tag", to_string(ex.direction_tag)},
                        {"instruction", ex.instruction},
                        {"eval_query_answer", ex.eval_query_answer},
                        {"split_group_id", ex.split_group_id}};
    if (ex.split) j["split"] = to_string(*ex.split);
    if (scene) j["scene_spec"] = scene_spec_json(*scene);
    return j;
}

}  // namespace

void write_metadata_jsonl(const std::filesystem::path& file,
                          const std::vector<relation_example>& examples) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw validation_error("cannot open for writing: " + file.string());
    for (const auto& ex : examples) out << example_json(ex, nullptr).dump() << '\n';
}

std::vector<relation_example> read_metadata_jsonl(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw validation_error("cannot open metadata file: " + file.string());
    std::vector<relation_example> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw validation_error(file.string() + ":" + std::to_string(lineno) +
                                   ": invalid JSON record");
        try {
            relation_example ex;
            ex.example_id = j.at("example_id").get<std::string>();
            ex.scene_id = j.at("scene_id").get<std::string>();
            ex.attribute = attribute_from_string(j.at("attribute_type").get<std::string>());
            ex.edited_slot = slot_from_name(j.at("edited_slot").get<std::string>());
            ex.reference_slot = slot_from_name(j.at("reference_slot").get<std::string>());
            ex.source_value = j.at("source_value").get<std::string>();
            ex.target_value = j.at("target_value").get<std::string>();
            ex.edited_object_name = j.at("edited_object_name").get<std::string>();
            ex.reference_object_name = j.at("reference_object_name").get<std::string>();
            ex.direction_tag = j.at("direction_tag").get<std::string>() == "inverted"
                                   ? direction::inverted
                                   : direction::forward;
            ex.instruction = j.at("instruction").get<std::string>();
            ex.eval_query_answer = j.at("eval_query_answer").get<std::string>();
            ex.split_group_id = j.at("split_group_id").get<std::string>();
            if (j.contains("split")) ex.split = split_from_string(j["split"].get<std::string>());
            out.push_back(std::move(ex));
        } catch (const nlohmann::json::exception& e) {
            throw validation_error(file.string() + ":" + std::to_string(lineno) +
                                   ": missing or mistyped field: " + e.what());
        }
    }
    return out;
}

std::map<std::string, grid_scene> read_scene_specs(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw validation_error("cannot open metadata file: " + file.string());
    std::map<std::string, grid_scene> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw validation_error(file.string() + ":" + std::to_string(lineno) +
                                   ": invalid JSON record");
        if (!j.contains("scene_spec")) continue;
        try {
            const auto& sj = j.at("scene_spec");
            grid_scene scene;
            scene.scene_id = sj.at("scene_id").get<std::string>();
            scene.attribute = attribute_from_string(sj.at("attribute_type").get<std::string>());
            for (slot s : kSlots) {
                const auto& cj = sj.at("slots").at(slot_name(s));
                grid_cell& c = scene.cells[static_cast<std::size_t>(s)];
                c.atomic_id = cj.at("atomic_id").get<std::string>();
                c.object = cj.at("object").get<std::string>();
                c.value = cj.at("value").get<std::string>();
            }
            scene.edited_slot = slot_from_name(sj.at("edited_slot").get<std::string>());
            scene.reference_slot = slot_from_name(sj.at("reference_slot").get<std::string>());
            scene.split_group_id = sj.at("split_group_id").get<std::string>();
            out[scene.scene_id] = std::move(scene);
        } catch (const nlohmann::json::exception& e) {
            throw validation_error(file.string() + ":" + std::to_string(lineno) +
                                   ": malformed scene_spec: " + e.what());
        }
    }
    return out;
}

void write_dataset(const std::filesystem::path& dir, const composed_dataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "prompts" / "atomic");
    fs::create_directories(dir / "prompts" / "relation");

    std::map<std::string, const grid_scene*> scene_by_id;
    for (const auto& s : ds.scenes) scene_by_id[s.scene_id] = &s;

    {
        std::ofstream out(dir / "metadata.jsonl", std::ios::binary);
        if (!out) throw validation_error("cannot write metadata.jsonl under " + dir.string());
        for (const auto& ex : ds.examples) {
            auto it = scene_by_id.find(ex.scene_id);
            out << example_json(ex, it == scene_by_id.end() ? nullptr : it->second).dump() << '\n';
        }
    }
    {
        std::ofstream out(dir / "atomics.jsonl", std::ios::binary);
        for (const auto& a : ds.atomics) {
            nlohmann::json j = {{"atomic_id", a.id},
                                {"object", a.object},
                                {"attribute_type", to_string(a.attribute)},
                                {"value", a.value},
                                {"prompt", a.prompt},
                                {"verified", a.verified == verification::pass      ? "pass"
                                             : a.verified == verification::fail    ? "fail"
                                                                                   : "unverified"},
                                {"video_path", a.video_path}};
            out << j.dump() << '\n';
        }
    }
    for (const auto& a : ds.atomics) {
        std::ofstream out(dir / "prompts" / "atomic" / (a.id + ".txt"), std::ios::binary);
        out << a.prompt << '\n';
        std::ofstream vout(dir / "prompts" / "atomic" / (a.id + "_verify.txt"), std::ios::binary);
        vout << render_verifier_prompt(a) << '\n';
    }
    for (const auto& ex : ds.examples) {
        std::ofstream out(dir / "prompts" / "relation" / (ex.example_id + ".txt"),
                          std::ios::binary);
        out << ex.instruction << '\n';
    }
}

std::string render_scene_text(const grid_scene& scene) {
    std::ostringstream out;
    bool first = true;
    for (slot s : kSlots) {
        const grid_cell& c = scene.cells[static_cast<std::size_t>(s)];
        if (!first) out << "; ";
        first = false;
        atomic_spec spec;
        spec.object = c.object;
        spec.attribute = scene.attribute;
        spec.value = c.value;
        out << slot_name(s) << ": " << render_atomic_description(spec);
    }
    return out.str();
}

}  // namespace trace_diag
