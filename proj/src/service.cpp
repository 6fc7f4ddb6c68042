#include "tokmat/service.hpp"

#include <cmath>
#include <ctime>
#include <functional>
#include <sstream>

#include <httplib.h>

#include "tokmat/corpus_io.hpp"

namespace tokmat {

namespace {

using nlohmann::json;

struct RequestError {
  int status;
  std::string code;
  std::string message;
  std::string field;
};

ServiceResponse error_response(const RequestError& e) {
  json err{{"code", e.code}, {"message", e.message}};
  if (!e.field.empty()) err["field"] = e.field;
  return {e.status, json{{"error", err}}};
}

[[noreturn]] void invalid(const std::string& field, const std::string& message) {
  throw RequestError{422, "invalid_parameter", field + ": " + message, field};
}

void reject_unknown(const json& body, std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : body.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) invalid(key, "unknown field");
  }
}

std::optional<Scalar> number_field(const json& body, const char* name) {
  if (!body.contains(name)) return std::nullopt;
  const auto& v = body.at(name);
  if (!v.is_number()) invalid(name, "expected a number");
  const auto x = v.get<Scalar>();
  if (!std::isfinite(x)) invalid(name, "must be finite");
  return x;
}

std::optional<std::uint64_t> integer_field(const json& body, const char* name) {
  if (!body.contains(name)) return std::nullopt;
  const auto& v = body.at(name);
  if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
    invalid(name, "expected a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

std::string now_iso() {
  const auto now = std::chrono::system_clock::now();
  const auto secs = std::chrono::system_clock::to_time_t(now);
  const auto ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

std::string token_text(TokenId id) {
  switch (id) {
    case vocab::kBos: return "<bos>";
    case vocab::kEos: return "<eos>";
    case vocab::kPad: return "<pad>";
    default: return std::string(1, static_cast<char>(id));
  }
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : path) {
    if (c == '/') {
      if (!cur.empty()) parts.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) parts.push_back(std::move(cur));
  return parts;
}

}  // namespace

SessionService::SessionService(std::shared_ptr<const Predictor> predictor,
                               std::shared_ptr<const EmbeddingTable> table,
                               MaturationConfig defaults, std::size_t top_k)
    : predictor_(std::move(predictor)),
      table_(std::move(table)),
      defaults_(defaults),
      top_k_(std::min(top_k, table_->vocab_size())) {
  defaults_.validate();
}

std::size_t SessionService::session_count() const {
  std::shared_lock lock(sessions_lock_);
  return sessions_.size();
}

std::shared_ptr<SessionService::Entry> SessionService::find(const std::string& id) const {
  std::shared_lock lock(sessions_lock_);
  const auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

bool SessionService::with_session_locked(const std::string& id, const std::function<void()>& f) {
  const auto e = find(id);
  if (!e) return false;
  std::lock_guard lock(e->lock);
  f();
  return true;
}

ServiceResponse SessionService::handle(const std::string& method, const std::string& path,
                                       const std::string& body_text) {
  try {
    json body = json::object();
    if (method == "POST") {
      if (!body_text.empty()) {
        try {
          body = json::parse(body_text);
        } catch (const json::parse_error& e) {
          throw RequestError{400, "bad_json", std::string("request body: ") + e.what(), ""};
        }
      }
      if (!body.is_object()) throw RequestError{400, "bad_json", "request body must be an object", ""};
    }

    const auto parts = split_path(path);
    if (parts.empty() || parts[0] != "sessions" || parts.size() > 3) {
      throw RequestError{404, "not_found", "no route for " + path, ""};
    }
    if (parts.size() == 1) {
      if (method != "POST") throw RequestError{405, "method_not_allowed", method + " " + path, ""};
      return create(body);
    }

    const std::string& id = parts[1];
    if (parts.size() == 2 && method == "DELETE") return remove(id);

    const auto entry = find(id);
    if (!entry) throw RequestError{404, "unknown_session", "no session " + id, "id"};
    std::unique_lock lock(entry->lock, std::try_to_lock);
    if (!lock.owns_lock()) {
      throw RequestError{409, "session_busy", "session " + id + " is handling another request", ""};
    }

    if (parts.size() == 2) {
      if (method != "GET") throw RequestError{405, "method_not_allowed", method + " " + path, ""};
      return {200, state_view(*entry)};
    }
    if (method != "POST") throw RequestError{405, "method_not_allowed", method + " " + path, ""};
    const std::string& action = parts[2];
    if (action == "step") return step(*entry, body);
    if (action == "intervene") return intervene(*entry, body);
    if (action == "guidance") return guidance(*entry, body);
    throw RequestError{404, "not_found", "no route for " + path, ""};
  } catch (const RequestError& e) {
    return error_response(e);
  } catch (const std::exception& e) {
    return error_response({500, "internal", e.what(), ""});
  }
}

ServiceResponse SessionService::create(const json& body) {
  reject_unknown(body, {"prompt", "k", "guidance", "seed", "max_tokens", "alpha_max"});
  if (!body.contains("prompt") || !body.at("prompt").is_string()) {
    invalid("prompt", "required string");
  }
  const auto prompt = encode(body.at("prompt").get<std::string>());
  if (prompt.empty()) invalid("prompt", "must be non-empty");

  MaturationConfig cfg = defaults_;
  if (const auto k = integer_field(body, "k")) {
    if (*k < 1 || *k > predictor_->max_tail()) {
      invalid("k", "must be in [1, " + std::to_string(predictor_->max_tail()) + "]");
    }
    cfg.tail_len = *k;
  }
  if (const auto s = number_field(body, "guidance")) {
    if (*s < 0.0) invalid("guidance", "must be >= 0");
    cfg.guidance = *s;
  }
  if (const auto a = number_field(body, "alpha_max")) {
    if (!(*a > 0.0 && *a <= 1.0)) invalid("alpha_max", "must be in (0, 1]");
    cfg.alpha_max = *a;
  }
  if (const auto m = integer_field(body, "max_tokens")) cfg.max_tokens = *m;
  const std::uint64_t seed = integer_field(body, "seed").value_or(0);
  if (cfg.tail_len > predictor_->max_tail()) {
    invalid("k", "default tail length exceeds the model maximum");
  }

  auto entry = std::make_shared<Entry>(GenerationSession(prompt, cfg, *table_, seed));
  entry->id = "s" + std::to_string(next_id_.fetch_add(1));
  entry->created_at = now_iso();
  entry->updated_at = entry->created_at;
  entry->last_intervention = nullptr;
  entry->session.record_history(false);
  {
    std::unique_lock lock(sessions_lock_);
    sessions_.emplace(entry->id, entry);
  }
  std::lock_guard lock(entry->lock);
  return {201, state_view(*entry)};
}

ServiceResponse SessionService::step(Entry& e, const json& body) {
  reject_unknown(body, {"count"});
  const std::uint64_t count = integer_field(body, "count").value_or(1);
  if (count < 1 || count > 4096) invalid("count", "must be in [1, 4096]");
  auto& s = e.session;
  if (s.terminated()) invalid("count", "session has committed its stop token");
  const std::size_t remaining = s.config().max_tokens - s.generated_count();
  if (count > remaining) {
    invalid("count", "only " + std::to_string(remaining) + " tokens left before max_tokens");
  }
  for (std::uint64_t i = 0; i < count && !s.terminated(); ++i) step_once(s, *predictor_, *table_);
  e.updated_at = now_iso();
  return {200, state_view(e)};
}

ServiceResponse SessionService::intervene(Entry& e, const json& body) {
  reject_unknown(body, {"kind", "magnitude", "coefficient", "positions"});
  if (!body.contains("kind") || !body.at("kind").is_string()) invalid("kind", "required string");
  const auto kind = body.at("kind").get<std::string>();
  const std::size_t K = e.session.tail().size();
  std::vector<std::size_t> positions;
  if (body.contains("positions")) {
    const auto& p = body.at("positions");
    if (!p.is_array()) invalid("positions", "expected an array of tail indices");
    for (const auto& v : p) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
        invalid("positions", "expected non-negative integers");
      }
      const auto i = v.get<std::uint64_t>();
      if (i >= K) invalid("positions", "index " + std::to_string(i) + " outside tail of " +
                                           std::to_string(K));
      positions.push_back(i);
    }
  } else {
    for (std::size_t j = 0; j < K; ++j) positions.push_back(j);
  }

  json echo{{"kind", kind}, {"positions", positions}};
  if (kind == "noise") {
    if (body.contains("coefficient")) invalid("coefficient", "not used by noise");
    const auto m = number_field(body, "magnitude");
    if (!m) invalid("magnitude", "required for noise");
    if (*m < 0.0) invalid("magnitude", "must be >= 0");
    intervene_noise(e.session, *m, positions);
    echo["magnitude"] = *m;
  } else if (kind == "ema") {
    if (body.contains("magnitude")) invalid("magnitude", "not used by ema");
    if (body.contains("positions")) invalid("positions", "ema always covers the whole tail");
    const auto c = number_field(body, "coefficient");
    if (!c) invalid("coefficient", "required for ema");
    if (!(*c >= 0.0 && *c <= 1.0)) invalid("coefficient", "must be in [0, 1]");
    if (K < 2) invalid("kind", "ema needs a tail of at least 2");
    intervene_ema(e.session, *c);
    echo["coefficient"] = *c;
  } else {
    invalid("kind", "expected noise or ema");
  }
  e.last_intervention = echo;
  e.updated_at = now_iso();
  return {200, state_view(e)};
}

ServiceResponse SessionService::guidance(Entry& e, const json& body) {
  reject_unknown(body, {"s"});
  const auto s = number_field(body, "s");
  if (!s) invalid("s", "required number");
  if (*s < 0.0) invalid("s", "must be >= 0");
  e.session.set_guidance(*s);
  e.updated_at = now_iso();
  return {200, state_view(e)};
}

ServiceResponse SessionService::remove(const std::string& id) {
  std::unique_lock lock(sessions_lock_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw RequestError{404, "unknown_session", "no session " + id, "id"};
  std::unique_lock busy(it->second->lock, std::try_to_lock);
  if (!busy.owns_lock()) {
    throw RequestError{409, "session_busy", "session " + id + " is handling another request", ""};
  }
  busy.unlock();
  sessions_.erase(it);
  return {200, json{{"deleted", id}}};
}

json SessionService::state_view(const Entry& e) const {
  const auto& s = e.session;
  const auto& tail = s.tail();
  json alphas = json::array(), entropies = json::array(), norms = json::array(),
       candidates = json::array(), top1 = json::array();
  for (std::size_t j = 0; j < tail.size(); ++j) {
    const auto z = tail.vectors.row(j);
    alphas.push_back(tail.alphas[j]);
    entropies.push_back(implicit_entropy(z, *table_));
    norms.push_back(norm(z));
    const auto ranking = top_k_candidates(z, *table_, top_k_);
    json list = json::array();
    for (std::size_t i = 0; i < ranking.token_ids.size(); ++i) {
      list.push_back({{"id", ranking.token_ids[i]},
                      {"text", token_text(ranking.token_ids[i])},
                      {"score", ranking.scores[i]}});
    }
    top1.push_back(ranking.token_ids.front());
    candidates.push_back(list);
  }
  const auto& ids = s.committed_ids();
  const std::vector<TokenId> generated = s.generated();
  return {{"session_id", e.id},
          {"created_at", e.created_at},
          {"updated_at", e.updated_at},
          {"step", s.step_count()},
          {"k", tail.size()},
          {"guidance", s.config().guidance},
          {"alpha_max", s.config().alpha_max},
          {"max_tokens", s.config().max_tokens},
          {"seed", s.seed()},
          {"prompt_length", s.prompt_length()},
          {"committed_ids", ids},
          {"committed_text", decode(ids)},
          {"generated_text", decode(generated)},
          {"finished", s.finished()},
          {"top_k", top_k_},
          {"tail",
           {{"alphas", alphas},
            {"entropies", entropies},
            {"norms", norms},
            {"top1", top1},
            {"candidates", candidates}}},
          {"max_entropy", std::log(static_cast<Scalar>(table_->vocab_size()))},
          {"last_intervention", e.last_intervention}};
}

// --- HTTP ---------------------------------------------------------------------

HttpServer::HttpServer(SessionService& service)
    : service_(service), server_(std::make_unique<httplib::Server>()) {
  server_->set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
  });
  server_->set_default_headers({{kApiHeader, kApiVersion},
                                {"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Headers", "Content-Type, tm-api"},
                                {"Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"}});
  auto dispatch = [this](const httplib::Request& req, httplib::Response& res) {
    ServiceResponse r;
    if (req.has_header(kApiHeader) && req.get_header_value(kApiHeader) != kApiVersion) {
      r = {400, json{{"error",
                      {{"code", "api_version"},
                       {"message", "unsupported tm-api " + req.get_header_value(kApiHeader)}}}}};
    } else {
      r = service_.handle(req.method, req.path, req.body);
    }
    res.status = r.status;
    res.set_content(r.body.dump(-1, ' ', false, json::error_handler_t::replace),
                    "application/json");
  };
  server_->Get(".*", dispatch);
  server_->Post(".*", dispatch);
  server_->Delete(".*", dispatch);
  server_->Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = server_->bind_to_any_port(host);
    if (bound < 0) throw BindError("cannot bind " + host + ":0");
  } else if (!server_->bind_to_port(host, port)) {
    throw BindError("cannot bind " + host + ":" + std::to_string(port));
  }
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return bound;
}

void HttpServer::run(const std::string& host, int port) {
  if (!server_->bind_to_port(host, port)) {
    throw BindError("cannot bind " + host + ":" + std::to_string(port));
  }
  server_->listen_after_bind();
}

void HttpServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace tokmat
