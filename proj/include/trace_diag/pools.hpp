#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace trace_diag {

enum class attribute_type { color, material, action };

std::string to_string(attribute_type a);
attribute_type attribute_from_string(const std::string& s);

inline constexpr attribute_type kAttributeTypes[] = {attribute_type::color, attribute_type::material,
                                                     attribute_type::action};

// Object and attribute-value pools. The built-in instantiation has 15
// objects, 9 colors, 10 materials, and 9 actions.
struct pools {
    std::vector<std::string> objects;
    std::vector<std::string> colors;
    std::vector<std::string> materials;
    std::vector<std::string> actions;

    const std::vector<std::string>& values_for(attribute_type a) const;

    // Index of `value` in the pool of `a`, or -1.
    int value_index(attribute_type a, const std::string& value) const;
    int object_index(const std::string& object) const;

    void validate() const;  // throws validation_error on empty pools / duplicates

    static pools builtin();
    static pools from_json_file(const std::filesystem::path& path);
};

}  // namespace trace_diag
