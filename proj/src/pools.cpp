#include "trace_diag/pools.hpp"

#include <fstream>
#include <set>

#include "json.hpp"
#include "trace_diag/errors.hpp"

namespace trace_diag {

std::string to_string(attribute_type a) {
    switch (a) {
        case attribute_type::color: return "color";
        case attribute_type::material: return "material";
        case attribute_type::action: return "action";
    }
    throw validation_error("invalid attribute_type value");
}

attribute_type attribute_from_string(const std::string& s) {
    if (s == "color") return attribute_type::color;
    if (s == "material") return attribute_type::material;
    if (s == "action") return attribute_type::action;
    throw validation_error("unknown attribute type: '" + s + "'");
}

const std::vector<std::string>& pools::values_for(attribute_type a) const {
    switch (a) {
        case attribute_type::color: return colors;
        case attribute_type::material: return materials;
        case attribute_type::action: return actions;
    }
    throw validation_error("invalid attribute_type value");
}

int pools::value_index(attribute_type a, const std::string& value) const {
    const auto& vs = values_for(a);
    for (std::size_t i = 0; i < vs.size(); ++i)
        if (vs[i] == value) return static_cast<int>(i);
    return -1;
}

int pools::object_index(const std::string& object) const {
    for (std::size_t i = 0; i < objects.size(); ++i)
        if (objects[i] == object) return static_cast<int>(i);
    return -1;
}

void pools::validate() const {
    auto check = [](const std::vector<std::string>& v, const char* name) {
        if (v.empty()) throw validation_error(std::string("empty pool: ") + name);
        std::set<std::string> seen;
        for (const auto& s : v) {
            if (s.empty()) throw validation_error(std::string("empty entry in pool: ") + name);
            if (!seen.insert(s).second)
                throw validation_error("duplicate entry '" + s + "' in pool " + name);
        }
    };
    check(objects, "objects");
    check(colors, "colors");
    check(materials, "materials");
    check(actions, "actions");
}

pools pools::builtin() {
    pools p;
    p.objects = {"cup",       "vase",     "chair",     "table lamp",    "backpack",
                 "box",       "bottle",   "shoe",      "watch",         "teapot",
                 "sculpture", "toy car",  "pen holder", "picture frame", "headphones"};
    p.colors = {"deep red", "blue",  "dark green", "yellow", "warm orange",
                "white",    "black", "silver gray", "teal"};
    p.materials = {"brushed metal", "natural wood", "transparent glass", "leather", "ceramic",
                   "canvas",        "rubber",       "stone",             "woven bamboo", "wool"};
    p.actions = {"static",
                 "moving left to right",
                 "moving right to left",
                 "falling from top to bottom",
                 "floating upward from bottom to top",
                 "moving from upper-left to lower-right",
                 "moving from lower-right to upper-left",
                 "moving from lower-left to upper-right",
                 "moving from upper-right to lower-left"};
    return p;
}

pools pools::from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw validation_error("cannot open pools file: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw validation_error("pools file " + path.string() + " is not valid JSON: " + e.what());
    }
    pools p;
    auto read_list = [&](const char* key, std::vector<std::string>& out) {
        if (!j.contains(key) || !j[key].is_array())
            throw validation_error("pools file " + path.string() + " missing array field '" + key + "'");
        for (const auto& v : j[key]) out.push_back(v.get<std::string>());
    };
    read_list("objects", p.objects);
    read_list("colors", p.colors);
    read_list("materials", p.materials);
    read_list("actions", p.actions);
    p.validate();
    return p;
}

}  // namespace trace_diag
