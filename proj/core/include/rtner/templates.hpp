#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace rtner::prompt {

namespace detail {
struct EmbeddedTemplate {
    std::string_view name;
    std::string_view text;
};
// Defined in the generated templates_data.cpp.
const std::vector<EmbeddedTemplate>& embedded_templates();
}  // namespace detail

/// Instruction template with `{{name}}` placeholders.
struct Template {
    std::string name;
    std::string text;
    /// sha256 of the template bytes.
    std::string hash;

    /// Substitutes every placeholder in one pass. Substituted values are not
    /// rescanned. Throws ConfigError for a placeholder without a value.
    std::string render(const std::map<std::string, std::string>& values) const;
    /// Distinct names, in order of first appearance.
    std::vector<std::string> placeholders() const;
};

Template make_template(std::string name, std::string text);

class TemplateStore {
public:
    /// Templates compiled into the library.
    static const TemplateStore& embedded();
    /// Every "*.txt" in `dir`; names not present there fall back to the
    /// embedded copies.
    static TemplateStore from_directory(const std::filesystem::path& dir);

    const Template& get(std::string_view name) const;
    bool contains(std::string_view name) const;
    std::vector<std::string> names() const;

private:
    std::map<std::string, Template, std::less<>> templates_;
};

}  // namespace rtner::prompt
