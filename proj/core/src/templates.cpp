#include "rtner/templates.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "rtner/error.hpp"
#include "rtner/hash.hpp"

namespace rtner::prompt {

Template make_template(std::string name, std::string text) {
    Template t{std::move(name), std::move(text), {}};
    t.hash = sha256_hex(t.text);
    return t;
}

std::string Template::render(const std::map<std::string, std::string>& values) const {
    std::string out;
    out.reserve(text.size());
    std::size_t i = 0;
    while (i < text.size()) {
        const auto open = text.find("{{", i);
        if (open == std::string::npos) {
            out.append(text, i, std::string::npos);
            break;
        }
        const auto close = text.find("}}", open + 2);
        if (close == std::string::npos) {
            out.append(text, i, std::string::npos);
            break;
        }
        out.append(text, i, open - i);
        const std::string key = text.substr(open + 2, close - open - 2);
        auto it = values.find(key);
        if (it == values.end()) throw ConfigError("template '" + name + "' needs a value for {{" + key + "}}");
        out += it->second;
        i = close + 2;
    }
    return out;
}

std::vector<std::string> Template::placeholders() const {
    std::vector<std::string> out;
    std::size_t i = 0;
    while ((i = text.find("{{", i)) != std::string::npos) {
        const auto close = text.find("}}", i + 2);
        if (close == std::string::npos) break;
        auto name = text.substr(i + 2, close - i - 2);
        if (std::find(out.begin(), out.end(), name) == out.end()) out.push_back(std::move(name));
        i = close + 2;
    }
    return out;
}

const TemplateStore& TemplateStore::embedded() {
    static const TemplateStore store = [] {
        TemplateStore s;
        for (const auto& e : detail::embedded_templates()) {
            s.templates_.emplace(std::string(e.name), make_template(std::string(e.name), std::string(e.text)));
        }
        return s;
    }();
    return store;
}

TemplateStore TemplateStore::from_directory(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw ConfigError("template directory not found: " + dir.string());
    TemplateStore s = embedded();
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (!e.is_regular_file() || e.path().extension() != ".txt") continue;
        std::ifstream in(e.path(), std::ios::binary);
        std::ostringstream buf;
        buf << in.rdbuf();
        const auto name = e.path().stem().string();
        s.templates_.insert_or_assign(name, make_template(name, buf.str()));
    }
    return s;
}

const Template& TemplateStore::get(std::string_view name) const {
    auto it = templates_.find(name);
    if (it == templates_.end()) throw ConfigError("no template named '" + std::string(name) + "'");
    return it->second;
}

bool TemplateStore::contains(std::string_view name) const { return templates_.find(name) != templates_.end(); }

std::vector<std::string> TemplateStore::names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : templates_) out.push_back(k);
    return out;
}

}  // namespace rtner::prompt
