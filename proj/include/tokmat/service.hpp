#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <thread>

#include <json.hpp>

#include "tokmat/backbone.hpp"
#include "tokmat/embedding_space.hpp"
#include "tokmat/maturation.hpp"

namespace httplib {
class Server;
}

namespace tokmat {

inline constexpr const char* kApiHeader = "tm-api";
inline constexpr const char* kApiVersion = "1";
inline constexpr std::size_t kDefaultTopK = 8;

struct ServiceResponse {
  int status = 200;
  nlohmann::json body;
};

/// Session store and request router, independent of the transport. Model and
/// table are shared read-only; each session has its own lock, and a request
/// that finds it held gets 409 instead of waiting.
class SessionService {
 public:
  SessionService(std::shared_ptr<const Predictor> predictor,
                 std::shared_ptr<const EmbeddingTable> table, MaturationConfig defaults,
                 std::size_t top_k = kDefaultTopK);

  ServiceResponse handle(const std::string& method, const std::string& path,
                         const std::string& body);

  std::size_t session_count() const;
  /// Runs `f` while holding the named session's lock, as a request would.
  /// For tests of the 409 path. Returns false if the session does not exist.
  bool with_session_locked(const std::string& id, const std::function<void()>& f);

 private:
  struct Entry {
    std::mutex lock;
    GenerationSession session;
    std::string id;
    std::string created_at;
    std::string updated_at;
    nlohmann::json last_intervention;
    Entry(GenerationSession s) : session(std::move(s)) {}
  };

  ServiceResponse create(const nlohmann::json& body);
  ServiceResponse step(Entry& e, const nlohmann::json& body);
  ServiceResponse intervene(Entry& e, const nlohmann::json& body);
  ServiceResponse guidance(Entry& e, const nlohmann::json& body);
  ServiceResponse remove(const std::string& id);
  nlohmann::json state_view(const Entry& e) const;
  std::shared_ptr<Entry> find(const std::string& id) const;

  std::shared_ptr<const Predictor> predictor_;
  std::shared_ptr<const EmbeddingTable> table_;
  MaturationConfig defaults_;
  std::size_t top_k_;
  mutable std::shared_mutex sessions_lock_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::atomic<std::uint64_t> next_id_{1};
};

/// HTTP transport over a SessionService.
class HttpServer {
 public:
  explicit HttpServer(SessionService& service);
  ~HttpServer();

  /// Binds host:port (port 0 picks a free one) and serves on a background
  /// thread. Returns the bound port, or throws when binding fails.
  int start(const std::string& host, int port);
  /// Binds and serves on the calling thread until stop().
  void run(const std::string& host, int port);
  void stop();

 private:
  SessionService& service_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

class BindError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tokmat
