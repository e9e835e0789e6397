#include "detail/http.hpp"

#include <httplib.h>

#include "rtner/error.hpp"

namespace rtner::detail {

namespace {

struct SplitUrl {
    std::string origin;
    std::string prefix;
};

SplitUrl split_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("endpoint URL needs a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, ""};
    std::string prefix = url.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    return {url.substr(0, path_start), prefix};
}

}  // namespace

HttpResponse post_json(const std::string& base_url, const std::string& path, const std::string& body,
                       const std::string& api_key, std::chrono::seconds timeout) {
    const auto url = split_url(base_url);
    httplib::Client client(url.origin);
    if (!client.is_valid()) throw ConfigError("unsupported endpoint URL: " + base_url);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    if (!api_key.empty()) client.set_bearer_token_auth(api_key);
    auto res = client.Post(url.prefix + path, body, "application/json");
    if (!res) {
        throw BackendError("request to " + base_url + path + " failed: " + httplib::to_string(res.error()), 0, true);
    }
    return {res->status, res->body};
}

}  // namespace rtner::detail
