#pragma once

// Chat-completion abstraction shared by the teacher, student, assessor and
// augmentor roles.

#include "mmdistill/core.hpp"
#include "mmdistill/error.hpp"

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace mmdistill {

enum class Role { teacher, student, assessor, augmentor };
inline constexpr std::array<Role, 4> kAllRoles = {Role::teacher, Role::student, Role::assessor,
                                                  Role::augmentor};
std::string_view to_string(Role r) noexcept;
Role role_from_string(std::string_view s);

enum class Speaker { system, user, assistant };
std::string_view to_string(Speaker s) noexcept;

struct Message {
  Speaker speaker = Speaker::user;
  std::string text;
  friend bool operator==(const Message&, const Message&) = default;
};

struct ChatRequest {
  Role role = Role::teacher;
  std::optional<ImageRef> image;
  std::vector<Message> messages;
  double temperature = 0.5;
  std::size_t max_output_chars = 4096;
  // Distinguishes repeated draws for the same prompt (e.g. re-asking a judge
  // after an unparseable reply). Remote backends ignore it.
  std::uint32_t sample_index = 0;

  void validate() const;
};

struct BackendResponse {
  std::string text;
  std::uint64_t latency_ms = 0;
  std::uint32_t attempts = 1;
  bool truncated = false;
};

enum class BackendErrorKind { transient, permanent, empty_response };
std::string_view to_string(BackendErrorKind k) noexcept;

class BackendError : public Error {
 public:
  BackendError(BackendErrorKind kind, const std::string& what, std::uint32_t attempts = 1)
      : Error(what), kind_(kind), attempts_(attempts) {}

  BackendErrorKind kind() const noexcept { return kind_; }
  std::uint32_t attempts() const noexcept { return attempts_; }

 private:
  BackendErrorKind kind_;
  std::uint32_t attempts_;
};

// Failure classes a retry policy may choose to retry.
enum class ErrorClass { connection, timeout, rate_limited, server_error };

struct RetryPolicy {
  std::uint32_t max_attempts = 3;
  std::uint32_t backoff_base_ms = 500;
  std::uint32_t max_backoff_ms = 8000;
  std::set<ErrorClass> retry_on = {ErrorClass::connection, ErrorClass::timeout, ErrorClass::rate_limited,
                                   ErrorClass::server_error};

  void validate() const;
  // Delay before attempt n+1, after n failed attempts (n >= 1).
  std::uint32_t backoff_ms(std::uint32_t failed_attempts) const;
};

class Backend {
 public:
  virtual ~Backend() = default;

  // Validates the request, calls the model, truncates over-long output to
  // max_output_chars and rejects empty output.
  BackendResponse complete(const ChatRequest& request);

  virtual std::string describe() const = 0;

  // Mutable model state that must survive checkpoints (synthetic student
  // skills). Stateless backends return null.
  virtual json save_state() const { return nullptr; }
  virtual void load_state(const json& /*state*/) {}

 protected:
  virtual BackendResponse do_complete(const ChatRequest& request) = 0;
};

using BackendPtr = std::shared_ptr<Backend>;

// Backend per role. Roles may share one backend object.
class BackendSet {
 public:
  BackendSet() = default;
  void set(Role role, BackendPtr backend) { by_role_[static_cast<std::size_t>(role)] = std::move(backend); }
  Backend& get(Role role) const;
  BackendPtr ptr(Role role) const { return by_role_[static_cast<std::size_t>(role)]; }
  bool has(Role role) const { return by_role_[static_cast<std::size_t>(role)] != nullptr; }

 private:
  std::array<BackendPtr, 4> by_role_{};
};

struct BatchItem {
  std::optional<BackendResponse> response;
  std::optional<BackendErrorKind> error;
  std::string error_message;

  bool ok() const noexcept { return response.has_value(); }
};

// Positionally aligned results. Never more than max_in_flight requests are
// outstanding; one failure does not abort the rest.
std::vector<BatchItem> complete_batch(Backend& backend, const std::vector<ChatRequest>& requests,
                                      std::size_t max_in_flight);

// Stable digest of every request field that can influence a response.
std::string request_fingerprint(const ChatRequest& request);
json request_to_json(const ChatRequest& request);

// Cuts text to at most max_chars bytes without splitting a UTF-8 sequence.
std::string truncate_utf8(std::string text, std::size_t max_chars, bool& truncated);

}  // namespace mmdistill
