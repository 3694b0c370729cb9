#include "mmdistill/backends.hpp"

#include "mmdistill/util.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>

namespace mmdistill {

std::string_view to_string(Role r) noexcept {
  switch (r) {
    case Role::teacher: return "teacher";
    case Role::student: return "student";
    case Role::assessor: return "assessor";
    case Role::augmentor: return "augmentor";
  }
  return "teacher";
}

Role role_from_string(std::string_view s) {
  for (Role r : kAllRoles) {
    if (to_string(r) == s) return r;
  }
  throw ValidationError("unknown role: " + std::string(s));
}

std::string_view to_string(Speaker s) noexcept {
  switch (s) {
    case Speaker::system: return "system";
    case Speaker::user: return "user";
    case Speaker::assistant: return "assistant";
  }
  return "user";
}

std::string_view to_string(BackendErrorKind k) noexcept {
  switch (k) {
    case BackendErrorKind::transient: return "transient";
    case BackendErrorKind::permanent: return "permanent";
    case BackendErrorKind::empty_response: return "empty_response";
  }
  return "permanent";
}

void ChatRequest::validate() const {
  if (messages.empty()) throw ValidationError("chat request has no messages");
  if (!(temperature >= 0.0 && temperature <= 2.0)) throw ValidationError("temperature out of [0,2]");
  if (max_output_chars == 0) throw ValidationError("max_output_chars must be positive");
  if (image) image->validate();
}

void RetryPolicy::validate() const {
  if (max_attempts < 1) throw ValidationError("retry max_attempts must be >= 1");
  if (backoff_base_ms < 1) throw ValidationError("retry backoff_base_ms must be positive");
}

std::uint32_t RetryPolicy::backoff_ms(std::uint32_t failed_attempts) const {
  std::uint64_t delay = backoff_base_ms;
  for (std::uint32_t i = 1; i < failed_attempts && delay < max_backoff_ms; ++i) delay *= 2;
  return static_cast<std::uint32_t>(std::min<std::uint64_t>(delay, max_backoff_ms));
}

std::string truncate_utf8(std::string text, std::size_t max_chars, bool& truncated) {
  truncated = false;
  if (text.size() <= max_chars) return text;
  truncated = true;
  std::size_t cut = max_chars;
  // Back off continuation bytes so the cut lands on a code point boundary.
  while (cut > 0 && (static_cast<unsigned char>(text[cut]) & 0xC0) == 0x80) --cut;
  text.resize(cut);
  return text;
}

BackendResponse Backend::complete(const ChatRequest& request) {
  request.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto response = do_complete(request);
  if (response.latency_ms == 0) {
    response.latency_ms = static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count());
  }
  if (trim(response.text).empty()) {
    throw BackendError(BackendErrorKind::empty_response,
                       describe() + ": empty response for " + std::string(to_string(request.role)),
                       response.attempts);
  }
  bool truncated = false;
  response.text = truncate_utf8(std::move(response.text), request.max_output_chars, truncated);
  if (truncated) {
    response.truncated = true;
    spdlog::warn("{}: {} output truncated to {} chars", describe(), to_string(request.role),
                 request.max_output_chars);
  }
  return response;
}

Backend& BackendSet::get(Role role) const {
  const auto& b = by_role_[static_cast<std::size_t>(role)];
  if (!b) throw ValidationError("no backend configured for role " + std::string(to_string(role)));
  return *b;
}

std::vector<BatchItem> complete_batch(Backend& backend, const std::vector<ChatRequest>& requests,
                                      std::size_t max_in_flight) {
  if (max_in_flight < 1) throw ValidationError("max_in_flight must be >= 1");
  std::vector<BatchItem> out(requests.size());
  parallel_for_bounded(requests.size(), max_in_flight, [&](std::size_t i) {
    try {
      out[i].response = backend.complete(requests[i]);
    } catch (const BackendError& e) {
      out[i].error = e.kind();
      out[i].error_message = e.what();
    } catch (const std::exception& e) {
      out[i].error = BackendErrorKind::permanent;
      out[i].error_message = e.what();
    }
  });
  return out;
}

json request_to_json(const ChatRequest& request) {
  json messages = json::array();
  for (const auto& m : request.messages) {
    messages.push_back({{"speaker", to_string(m.speaker)}, {"text", m.text}});
  }
  json j = {{"role", to_string(request.role)},
            {"messages", std::move(messages)},
            {"temperature", request.temperature},
            {"max_output_chars", request.max_output_chars},
            {"sample_index", request.sample_index}};
  j["image"] = request.image ? json(*request.image) : json(nullptr);
  return j;
}

std::string request_fingerprint(const ChatRequest& request) {
  const auto canonical = request_to_json(request).dump();
  // Two independent 64-bit digests keep accidental collisions out of reach.
  return to_hex(fnv1a64(canonical)) + to_hex(hash_parts({"fp", canonical}));
}

}  // namespace mmdistill
