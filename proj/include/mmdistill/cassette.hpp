#pragma once

// Record/replay of backend traffic. The cassette file is line-delimited JSON
// of {request_fingerprint, response_text}. A fingerprint may occur several
// times (a learning student answers the same question differently in later
// iterations); replay returns its responses in recorded order and repeats
// the last one once they run out.

#include "mmdistill/backends.hpp"

#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <vector>

namespace mmdistill {

enum class CassetteMode { record, replay };

class CassetteBackend : public Backend {
 public:
  // Record mode forwards every request to inner and appends the response.
  // Replay mode needs no inner backend and fails on unrecorded requests.
  CassetteBackend(CassetteMode mode, std::filesystem::path path, BackendPtr inner = nullptr);

  std::string describe() const override;
  json save_state() const override;
  void load_state(const json& state) override;

  std::size_t size() const;
  const BackendPtr& inner() const { return inner_; }

 protected:
  BackendResponse do_complete(const ChatRequest& request) override;

 private:
  CassetteMode mode_;
  std::filesystem::path path_;
  BackendPtr inner_;
  mutable std::mutex mu_;
  std::map<std::string, std::vector<std::string>> entries_;
  std::map<std::string, std::size_t> cursor_;
};

}  // namespace mmdistill
