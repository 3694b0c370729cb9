#include "mmdistill/cassette.hpp"

#include "mmdistill/jsonl.hpp"

#include <fstream>

namespace mmdistill {

CassetteBackend::CassetteBackend(CassetteMode mode, std::filesystem::path path, BackendPtr inner)
    : mode_(mode), path_(std::move(path)), inner_(std::move(inner)) {
  if (mode_ == CassetteMode::record && !inner_) {
    throw ValidationError("cassette record mode needs an inner backend");
  }
  if (std::filesystem::exists(path_)) {
    for (const auto& entry : jsonl::parse_values(read_file(path_), path_.string())) {
      entries_[entry.at("request_fingerprint").get<std::string>()].push_back(
          entry.at("response_text").get<std::string>());
    }
  } else if (mode_ == CassetteMode::replay) {
    throw ValidationError("cassette not found: " + path_.string());
  }
}

std::string CassetteBackend::describe() const {
  return std::string(mode_ == CassetteMode::record ? "cassette-record(" : "cassette-replay(") + path_.string() + ")";
}

json CassetteBackend::save_state() const {
  std::lock_guard lock(mu_);
  return json{{"inner", inner_ ? inner_->save_state() : json(nullptr)}, {"cursor", cursor_}};
}

void CassetteBackend::load_state(const json& state) {
  if (state.is_null()) return;
  if (inner_) inner_->load_state(state.value("inner", json(nullptr)));
  std::lock_guard lock(mu_);
  cursor_ = state.value("cursor", json::object()).get<std::map<std::string, std::size_t>>();
}

std::size_t CassetteBackend::size() const {
  std::lock_guard lock(mu_);
  std::size_t n = 0;
  for (const auto& [_, v] : entries_) n += v.size();
  return n;
}

BackendResponse CassetteBackend::do_complete(const ChatRequest& request) {
  const auto fp = request_fingerprint(request);
  if (mode_ == CassetteMode::replay) {
    std::lock_guard lock(mu_);
    const auto it = entries_.find(fp);
    if (it == entries_.end()) {
      throw BackendError(BackendErrorKind::permanent, describe() + ": unrecorded request " + fp);
    }
    auto& next = cursor_[fp];
    BackendResponse out;
    out.text = it->second[std::min(next, it->second.size() - 1)];
    ++next;
    return out;
  }
  auto response = inner_->complete(request);
  std::lock_guard lock(mu_);
  entries_[fp].push_back(response.text);
  ++cursor_[fp];
  std::ofstream out(path_, std::ios::app | std::ios::binary);
  out << json{{"request_fingerprint", fp}, {"response_text", response.text}}.dump() << '\n';
  if (!out) throw Error("cannot append to cassette " + path_.string());
  return response;
}

}  // namespace mmdistill
