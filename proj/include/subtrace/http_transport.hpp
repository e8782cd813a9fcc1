#pragma once

// cpp-httplib transport for GenClient. Split from genclient.hpp so tests
// with injected transports do not pay for the httplib include.

#include <cstdlib>
#include <string>

#include <httplib.h>

// resolv.h (pulled in transitively) leaves a `_res` macro behind, which
// breaks unrelated headers (e.g. Eigen) that use `_res` as an identifier.
#ifdef _res
#undef _res
#endif

#include "subtrace/genclient.hpp"

namespace subtrace {

// API key read from SUBTRACE_API_KEY; sent as a bearer token when present.
inline Transport make_http_transport() {
  return [](const std::string& url_base, const std::string& path,
            const std::string& body) -> TransportResult {
    httplib::Client client(url_base);
    client.set_connection_timeout(30);
    client.set_read_timeout(120);
    httplib::Headers headers;
    if (const char* key = std::getenv("SUBTRACE_API_KEY")) {
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    auto res = client.Post(path, headers, body, "application/json");
    TransportResult out;
    if (!res) return out;
    out.transport_ok = true;
    out.status = res->status;
    out.body = res->body;
    return out;
  };
}

}  // namespace subtrace
