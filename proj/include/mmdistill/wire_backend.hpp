#pragma once

#include "mmdistill/backends.hpp"

#include <functional>
#include <string>

namespace mmdistill {

struct WireConfig {
  // Full URL of the chat-completions endpoint, e.g. http://host:8000/v1/chat/completions
  std::string endpoint;
  std::string model;
  // Name of the environment variable holding the bearer token; empty = no auth.
  std::string api_key_env;
  std::uint32_t timeout_ms = 120000;
  // 0 derives max_tokens from the request's max_output_chars.
  std::uint32_t max_tokens = 0;
  RetryPolicy retry;
};

WireConfig wire_config_from_json(const json& j);

// Builds the request body of the multi-modal chat-completions wire contract.
// Local image files are inlined as base64 data URLs; remote locators and
// data URLs pass through unchanged.
json build_wire_body(const ChatRequest& request, const WireConfig& config);

// Reads choices[0].message.content (string or array of text parts).
std::string parse_wire_response(const std::string& body);

class WireBackend : public Backend {
 public:
  using Sleeper = std::function<void(std::uint32_t ms)>;

  explicit WireBackend(WireConfig config, Sleeper sleeper = {});
  std::string describe() const override;

 protected:
  BackendResponse do_complete(const ChatRequest& request) override;

 private:
  WireConfig config_;
  Sleeper sleep_;
  std::string scheme_host_;
  std::string path_;
};

}  // namespace mmdistill
