#include "mmdistill/backends.hpp"
#include "mmdistill/cassette.hpp"
#include "mmdistill/synthetic.hpp"
#include "mmdistill/wire_backend.hpp"

#include "support.hpp"

#include <httplib.h>
#include <gtest/gtest.h>

#include <atomic>
#include <mutex>
#include <thread>

using namespace mmdistill;
using mmdistill::testing::FnBackend;
using mmdistill::testing::last_user;
using mmdistill::testing::TempDir;

namespace {

ChatRequest ask(const std::string& text, Role role = Role::teacher) {
  ChatRequest r;
  r.role = role;
  r.image = ImageRef{"img://1", std::nullopt};
  r.messages = {{Speaker::user, text}};
  return r;
}

std::string completion_body(const std::string& text) {
  return json{{"choices", {{{"index", 0}, {"message", {{"role", "assistant"}, {"content", text}}}}}}}.dump();
}

// Chat-completions stub on an ephemeral localhost port.
class StubServer {
 public:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;
  explicit StubServer(Handler handler) {
    server_.Post("/v1/chat/completions", [this, handler](const httplib::Request& req, httplib::Response& res) {
      {
        std::lock_guard lock(mu_);
        bodies_.push_back(req.body);
      }
      handler(req, res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }
  std::vector<std::string> bodies() {
    std::lock_guard lock(mu_);
    return bodies_;
  }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::mutex mu_;
  std::vector<std::string> bodies_;
};

WireConfig wire_config(const std::string& endpoint) {
  WireConfig c;
  c.endpoint = endpoint;
  c.model = "stub-model";
  c.timeout_ms = 5000;
  c.retry.backoff_base_ms = 1;
  c.retry.max_backoff_ms = 4;
  return c;
}

}  // namespace

TEST(Backend, RejectsInvalidRequests) {
  FnBackend b([](const ChatRequest&) { return std::string("x"); });
  auto r = ask("hi");
  r.temperature = 3.0;
  EXPECT_THROW(b.complete(r), ValidationError);
  r = ask("hi");
  r.messages.clear();
  EXPECT_THROW(b.complete(r), ValidationError);
}

TEST(Backend, EmptyOutputIsAnError) {
  FnBackend b([](const ChatRequest&) { return std::string("   "); });
  try {
    b.complete(ask("hi"));
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_EQ(e.kind(), BackendErrorKind::empty_response);
  }
}

TEST(Backend, TruncatesOnCodepointBoundary) {
  FnBackend b([](const ChatRequest&) { return std::string("ab\xC3\xA9\xC3\xA9"); });
  auto r = ask("hi");
  r.max_output_chars = 3;
  const auto out = b.complete(r);
  EXPECT_EQ(out.text, "ab");
  EXPECT_TRUE(out.truncated);
}

TEST(RetryPolicy, ExponentialBackoffIsCapped) {
  RetryPolicy p;
  p.backoff_base_ms = 100;
  p.max_backoff_ms = 500;
  EXPECT_EQ(p.backoff_ms(1), 100u);
  EXPECT_EQ(p.backoff_ms(2), 200u);
  EXPECT_EQ(p.backoff_ms(3), 400u);
  EXPECT_EQ(p.backoff_ms(4), 500u);
  p.max_attempts = 0;
  EXPECT_THROW(p.validate(), ValidationError);
}

TEST(Batch, ParallelismDoesNotChangeResults) {
  FnBackend b([](const ChatRequest& r) { return "echo: " + last_user(r); });
  std::vector<ChatRequest> reqs;
  for (int i = 0; i < 10; ++i) reqs.push_back(ask("q" + std::to_string(i)));
  const auto serial = complete_batch(b, reqs, 1);
  const auto wide = complete_batch(b, reqs, 8);
  ASSERT_EQ(serial.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    ASSERT_TRUE(serial[i].ok());
    EXPECT_EQ(serial[i].response->text, wide[i].response->text);
    EXPECT_EQ(serial[i].response->text, "echo: q" + std::to_string(i));
  }
  EXPECT_TRUE(complete_batch(b, {}, 4).empty());
}

TEST(Batch, NeverExceedsMaxInFlight) {
  std::atomic<int> in_flight{0}, peak{0};
  FnBackend b([&](const ChatRequest&) {
    const int now = ++in_flight;
    int seen = peak.load();
    while (now > seen && !peak.compare_exchange_weak(seen, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
    --in_flight;
    return std::string("ok");
  });
  std::vector<ChatRequest> reqs(40, ask("q"));
  complete_batch(b, reqs, 3);
  EXPECT_LE(peak.load(), 3);
  EXPECT_GE(peak.load(), 1);
}

TEST(Batch, PositionalFailure) {
  FnBackend b([](const ChatRequest& r) -> std::string {
    if (last_user(r) == "q3") throw BackendError(BackendErrorKind::permanent, "boom");
    return "fine";
  });
  std::vector<ChatRequest> reqs;
  for (int i = 0; i < 10; ++i) reqs.push_back(ask("q" + std::to_string(i)));
  const auto out = complete_batch(b, reqs, 4);
  std::size_t ok = 0;
  for (const auto& item : out) ok += item.ok() ? 1 : 0;
  EXPECT_EQ(ok, 9u);
  EXPECT_FALSE(out[3].ok());
  EXPECT_EQ(out[3].error, BackendErrorKind::permanent);
}

TEST(Fingerprint, SensitiveToEveryField) {
  const auto base = ask("hello");
  auto other = base;
  other.temperature = 0.7;
  EXPECT_NE(request_fingerprint(base), request_fingerprint(other));
  other = base;
  other.sample_index = 1;
  EXPECT_NE(request_fingerprint(base), request_fingerprint(other));
  other = base;
  other.image = ImageRef{"img://2", std::nullopt};
  EXPECT_NE(request_fingerprint(base), request_fingerprint(other));
  other = base;
  other.role = Role::student;
  EXPECT_NE(request_fingerprint(base), request_fingerprint(other));
  EXPECT_EQ(request_fingerprint(base), request_fingerprint(ask("hello")));
}

TEST(Wire, BodyShape) {
  auto r = ask("what is here?");
  r.messages.insert(r.messages.begin(), Message{Speaker::system, "be brief"});
  r.image = ImageRef{"https://example.org/a.jpg", std::nullopt};
  const auto body = build_wire_body(r, wire_config("http://x/v1/chat/completions"));
  EXPECT_EQ(body["model"], "stub-model");
  EXPECT_EQ(body["messages"][0]["role"], "system");
  EXPECT_EQ(body["messages"][1]["content"][1]["image_url"]["url"], "https://example.org/a.jpg");
  EXPECT_EQ(body["messages"][0]["content"].size(), 1u);
}

TEST(Wire, LocalImageBecomesDataUrl) {
  TempDir dir;
  write_file_atomic(dir / "a.png", "PNGDATA");
  auto r = ask("q");
  r.image = ImageRef{(dir / "a.png").string(), std::nullopt};
  const auto body = build_wire_body(r, wire_config("http://x/y"));
  const auto url = body["messages"][0]["content"][1]["image_url"]["url"].get<std::string>();
  EXPECT_EQ(url.rfind("data:image/png;base64,", 0), 0u);
  EXPECT_NE(url.find(base64_encode("PNGDATA")), std::string::npos);
}

TEST(Wire, ParsesStringAndPartContent) {
  EXPECT_EQ(parse_wire_response(completion_body("hi there")), "hi there");
  const auto parts = json{{"choices", {{{"message", {{"content", {{{"type", "text"}, {"text", "a"}},
                                                                   {{"type", "text"}, {"text", "b"}}}}}}}}}};
  EXPECT_EQ(parse_wire_response(parts.dump()), "ab");
  EXPECT_THROW(parse_wire_response("{}"), BackendError);
  EXPECT_THROW(parse_wire_response("not json"), BackendError);
}

TEST(Wire, FixedBodySingleAttempt) {
  StubServer stub([](const httplib::Request&, httplib::Response& res) {
    res.set_content(completion_body("stub answer"), "application/json");
  });
  WireBackend backend(wire_config(stub.endpoint()));
  const auto out = backend.complete(ask("question?"));
  EXPECT_EQ(out.text, "stub answer");
  EXPECT_EQ(out.attempts, 1u);
  ASSERT_EQ(stub.bodies().size(), 1u);
  EXPECT_EQ(json::parse(stub.bodies()[0])["messages"][0]["content"][0]["text"], "question?");
}

TEST(Wire, RetriesTransientFailures) {
  std::atomic<int> calls{0};
  StubServer stub([&](const httplib::Request&, httplib::Response& res) {
    if (++calls <= 2) {
      res.status = 503;
      res.set_content("busy", "text/plain");
      return;
    }
    res.set_content(completion_body("third time"), "application/json");
  });
  std::vector<std::uint32_t> sleeps;
  WireBackend backend(wire_config(stub.endpoint()), [&](std::uint32_t ms) { sleeps.push_back(ms); });
  const auto out = backend.complete(ask("q"));
  EXPECT_EQ(out.text, "third time");
  EXPECT_EQ(out.attempts, 3u);
  EXPECT_EQ(stub.bodies().size(), 3u);
  EXPECT_EQ(sleeps, (std::vector<std::uint32_t>{1, 2}));
}

TEST(Wire, ExhaustedRetriesAreTransient) {
  StubServer stub([](const httplib::Request&, httplib::Response& res) {
    res.status = 429;
    res.set_content("slow down", "text/plain");
  });
  WireBackend backend(wire_config(stub.endpoint()), [](std::uint32_t) {});
  try {
    backend.complete(ask("q"));
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_EQ(e.kind(), BackendErrorKind::transient);
    EXPECT_EQ(e.attempts(), 3u);
  }
}

TEST(Wire, ClientErrorsAreNotRetried) {
  StubServer stub([](const httplib::Request&, httplib::Response& res) {
    res.status = 400;
    res.set_content("bad request", "text/plain");
  });
  WireBackend backend(wire_config(stub.endpoint()), [](std::uint32_t) {});
  try {
    backend.complete(ask("q"));
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_EQ(e.kind(), BackendErrorKind::permanent);
    EXPECT_EQ(e.attempts(), 1u);
  }
  EXPECT_EQ(stub.bodies().size(), 1u);
}

TEST(Wire, MissingCredentialIsPermanent) {
  auto cfg = wire_config("http://127.0.0.1:9/v1/chat/completions");
  cfg.api_key_env = "MMDISTILL_TEST_UNSET_KEY_VARIABLE";
  WireBackend backend(cfg);
  EXPECT_THROW(backend.complete(ask("q")), BackendError);
}

TEST(Cassette, RecordThenReplay) {
  TempDir dir;
  std::atomic<int> calls{0};
  auto inner = std::make_shared<FnBackend>([&](const ChatRequest& r) {
    ++calls;
    return "live " + last_user(r) + " #" + std::to_string(calls.load());
  });
  {
    CassetteBackend rec(CassetteMode::record, dir / "c.jsonl", inner);
    EXPECT_EQ(rec.complete(ask("a")).text, "live a #1");
    EXPECT_EQ(rec.complete(ask("b")).text, "live b #2");
    EXPECT_EQ(rec.complete(ask("a")).text, "live a #3");
    EXPECT_EQ(rec.size(), 3u);
  }
  CassetteBackend replay(CassetteMode::replay, dir / "c.jsonl");
  EXPECT_EQ(replay.complete(ask("a")).text, "live a #1");
  EXPECT_EQ(replay.complete(ask("a")).text, "live a #3");
  EXPECT_EQ(replay.complete(ask("a")).text, "live a #3");
  EXPECT_EQ(replay.complete(ask("b")).text, "live b #2");
  EXPECT_THROW(replay.complete(ask("never recorded")), BackendError);
  EXPECT_EQ(calls.load(), 3);
}

TEST(Cassette, CursorSurvivesStateRoundTrip) {
  TempDir dir;
  auto inner = std::make_shared<FnBackend>([n = 0](const ChatRequest&) mutable { return "r" + std::to_string(++n); });
  {
    CassetteBackend rec(CassetteMode::record, dir / "c.jsonl", inner);
    rec.complete(ask("x"));
    rec.complete(ask("x"));
  }
  CassetteBackend first(CassetteMode::replay, dir / "c.jsonl");
  EXPECT_EQ(first.complete(ask("x")).text, "r1");
  CassetteBackend second(CassetteMode::replay, dir / "c.jsonl");
  second.load_state(first.save_state());
  EXPECT_EQ(second.complete(ask("x")).text, "r2");
}

TEST(Cassette, ReplayNeedsAFile) {
  TempDir dir;
  EXPECT_THROW(CassetteBackend(CassetteMode::replay, dir / "missing.jsonl"), ValidationError);
  EXPECT_THROW(CassetteBackend(CassetteMode::record, dir / "c.jsonl"), ValidationError);
}
