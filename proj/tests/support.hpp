#pragma once

#include "mmdistill/backends.hpp"
#include "mmdistill/core.hpp"
#include "mmdistill/util.hpp"

#include <atomic>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <unistd.h>

namespace mmdistill::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("mmdistill-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// Backend driven by a lambda.
class FnBackend : public Backend {
 public:
  using Fn = std::function<std::string(const ChatRequest&)>;
  explicit FnBackend(Fn fn, std::string name = "fn") : fn_(std::move(fn)), name_(std::move(name)) {}
  std::string describe() const override { return name_; }

 protected:
  BackendResponse do_complete(const ChatRequest& request) override {
    BackendResponse r;
    r.text = fn_(request);
    return r;
  }

 private:
  Fn fn_;
  std::string name_;
};

inline std::string last_user(const ChatRequest& r) {
  for (auto it = r.messages.rbegin(); it != r.messages.rend(); ++it) {
    if (it->speaker == Speaker::user) return it->text;
  }
  return {};
}

inline InstructionRecord make_record(const std::string& id, const std::string& uri, const std::string& question,
                                     TaskType type = TaskType::conversation) {
  InstructionRecord r;
  r.id = id;
  r.image.uri = uri;
  r.question = question;
  r.task_type = type;
  return r;
}

inline std::vector<InstructionRecord> make_records(std::size_t n, const std::string& prefix = "r",
                                                   std::size_t images = 0) {
  std::vector<InstructionRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto uri = "img://" + std::to_string(images == 0 ? i : i % images);
    out.push_back(make_record(prefix + std::to_string(1000 + i), uri,
                              "Question number " + std::to_string(i) + " about " + prefix + "?"));
  }
  return out;
}

}  // namespace mmdistill::testing
