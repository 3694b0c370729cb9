#include "mmdistill/wire_backend.hpp"

#include "mmdistill/util.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <thread>

namespace mmdistill {
namespace {

std::string mime_for(const std::filesystem::path& p) {
  auto ext = to_lower_ascii(p.extension().string());
  if (ext == ".png") return "image/png";
  if (ext == ".gif") return "image/gif";
  if (ext == ".webp") return "image/webp";
  return "image/jpeg";
}

std::string image_url(const ImageRef& image) {
  const auto& uri = image.uri;
  const bool file_uri = uri.rfind("file://", 0) == 0;
  if (uri.rfind("data:", 0) == 0 || (!file_uri && uri.find("://") != std::string::npos)) return uri;
  std::filesystem::path path = file_uri ? uri.substr(7) : uri;
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const Error&) {
    throw BackendError(BackendErrorKind::permanent, "image not readable: " + uri);
  }
  return "data:" + mime_for(path) + ";base64," + base64_encode(bytes);
}

struct Failure {
  std::optional<ErrorClass> cls;  // nullopt = not retryable
  std::string message;
};

Failure classify_transport(httplib::Error err) {
  switch (err) {
    case httplib::Error::Connection:
    case httplib::Error::SSLConnection:
    case httplib::Error::ProxyConnection:
      return {ErrorClass::connection, "connection failed: " + httplib::to_string(err)};
    case httplib::Error::ConnectionTimeout:
    case httplib::Error::Read:
    case httplib::Error::Write:
      return {ErrorClass::timeout, "transport error: " + httplib::to_string(err)};
    default:
      return {std::nullopt, "transport error: " + httplib::to_string(err)};
  }
}

Failure classify_status(int status, const std::string& body) {
  const auto msg = "HTTP " + std::to_string(status) + ": " + body.substr(0, 200);
  if (status == 429) return {ErrorClass::rate_limited, msg};
  if (status == 408) return {ErrorClass::timeout, msg};
  if (status >= 500) return {ErrorClass::server_error, msg};
  return {std::nullopt, msg};
}

}  // namespace

WireConfig wire_config_from_json(const json& j) {
  WireConfig c;
  c.endpoint = j.at("endpoint").get<std::string>();
  c.model = j.value("model", "");
  c.api_key_env = j.value("api_key_env", "");
  c.timeout_ms = j.value("timeout_ms", c.timeout_ms);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  if (j.contains("retry")) {
    const auto& r = j.at("retry");
    c.retry.max_attempts = r.value("max_attempts", c.retry.max_attempts);
    c.retry.backoff_base_ms = r.value("backoff_base_ms", c.retry.backoff_base_ms);
    c.retry.max_backoff_ms = r.value("max_backoff_ms", c.retry.max_backoff_ms);
    if (r.contains("retry_on")) {
      c.retry.retry_on.clear();
      for (const auto& name : r.at("retry_on")) {
        const auto s = name.get<std::string>();
        if (s == "connection") c.retry.retry_on.insert(ErrorClass::connection);
        else if (s == "timeout") c.retry.retry_on.insert(ErrorClass::timeout);
        else if (s == "rate_limited") c.retry.retry_on.insert(ErrorClass::rate_limited);
        else if (s == "server_error") c.retry.retry_on.insert(ErrorClass::server_error);
        else throw ValidationError("unknown retry class: " + s);
      }
    }
  }
  c.retry.validate();
  return c;
}

json build_wire_body(const ChatRequest& request, const WireConfig& config) {
  json messages = json::array();
  bool image_attached = false;
  for (const auto& m : request.messages) {
    json content = json::array();
    content.push_back({{"type", "text"}, {"text", m.text}});
    if (request.image && !image_attached && m.speaker == Speaker::user) {
      content.push_back({{"type", "image_url"}, {"image_url", {{"url", image_url(*request.image)}}}});
      image_attached = true;
    }
    messages.push_back({{"role", to_string(m.speaker)}, {"content", std::move(content)}});
  }
  const auto max_tokens = config.max_tokens != 0
                              ? config.max_tokens
                              : static_cast<std::uint32_t>((request.max_output_chars + 3) / 4);
  return json{{"model", config.model},
              {"messages", std::move(messages)},
              {"temperature", request.temperature},
              {"max_tokens", max_tokens}};
}

std::string parse_wire_response(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    throw BackendError(BackendErrorKind::permanent, std::string("malformed response body: ") + e.what());
  }
  try {
    const auto& content = j.at("choices").at(0).at("message").at("content");
    if (content.is_null()) return {};
    if (content.is_string()) return content.get<std::string>();
    std::string text;
    for (const auto& part : content) {
      if (part.value("type", "") == "text") text += part.value("text", "");
    }
    return text;
  } catch (const json::exception& e) {
    throw BackendError(BackendErrorKind::permanent, std::string("unexpected response shape: ") + e.what());
  }
}

WireBackend::WireBackend(WireConfig config, Sleeper sleeper) : config_(std::move(config)), sleep_(std::move(sleeper)) {
  config_.retry.validate();
  const auto scheme_end = config_.endpoint.find("://");
  if (scheme_end == std::string::npos) throw ValidationError("endpoint must be an absolute URL: " + config_.endpoint);
  const auto path_start = config_.endpoint.find('/', scheme_end + 3);
  scheme_host_ = config_.endpoint.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : config_.endpoint.substr(path_start);
  if (!sleep_) {
    sleep_ = [](std::uint32_t ms) { std::this_thread::sleep_for(std::chrono::milliseconds(ms)); };
  }
}

std::string WireBackend::describe() const { return "wire(" + config_.endpoint + ")"; }

BackendResponse WireBackend::do_complete(const ChatRequest& request) {
  const auto body = build_wire_body(request, config_).dump();
  httplib::Headers headers;
  if (!config_.api_key_env.empty()) {
    const char* key = std::getenv(config_.api_key_env.c_str());
    if (key == nullptr || *key == '\0') {
      throw BackendError(BackendErrorKind::permanent, "environment variable " + config_.api_key_env + " is not set");
    }
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }

  const auto t0 = std::chrono::steady_clock::now();
  Failure last;
  std::uint32_t attempt = 0;
  while (attempt < config_.retry.max_attempts) {
    ++attempt;
    httplib::Client client(scheme_host_);
    const auto timeout = std::chrono::milliseconds(config_.timeout_ms);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    auto res = client.Post(path_, headers, body, "application/json");
    if (!res) {
      last = classify_transport(res.error());
    } else if (res->status >= 200 && res->status < 300) {
      BackendResponse out;
      out.text = parse_wire_response(res->body);
      out.attempts = attempt;
      out.latency_ms = static_cast<std::uint64_t>(
          std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count());
      if (trim(out.text).empty()) {
        throw BackendError(BackendErrorKind::empty_response, describe() + ": empty completion", attempt);
      }
      return out;
    } else {
      last = classify_status(res->status, res->body);
    }
    const bool retryable = last.cls && config_.retry.retry_on.count(*last.cls) != 0;
    if (!retryable) {
      throw BackendError(BackendErrorKind::permanent, describe() + ": " + last.message, attempt);
    }
    if (attempt < config_.retry.max_attempts) {
      spdlog::debug("{}: attempt {} failed ({}), retrying", describe(), attempt, last.message);
      sleep_(config_.retry.backoff_ms(attempt));
    }
  }
  throw BackendError(BackendErrorKind::transient,
                     describe() + ": retries exhausted after " + std::to_string(attempt) + " attempts: " + last.message,
                     attempt);
}

}  // namespace mmdistill
