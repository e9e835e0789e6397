#pragma once

#include <chrono>
#include <string>

namespace rtner::detail {

struct HttpResponse {
    int status = 0;
    std::string body;
};

/// POSTs a JSON body to `base_url` + `path` with bearer auth. `base_url` may
/// carry a path prefix ("https://host/v1"). Transport failures throw a
/// retryable BackendError with status 0; HTTP statuses are returned as is.
HttpResponse post_json(const std::string& base_url, const std::string& path, const std::string& body,
                       const std::string& api_key, std::chrono::seconds timeout);

}  // namespace rtner::detail
