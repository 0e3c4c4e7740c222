#include "lenskit/http_api.hpp"

#include <httplib.h>

#include <chrono>
#include <cstdio>

#include "lenskit/error.hpp"

namespace lenskit::http {

namespace {

int http_status(const Error& e) {
  if (dynamic_cast<const NotFoundError*>(&e)) return 404;
  if (dynamic_cast<const StateError*>(&e)) return 409;
  if (dynamic_cast<const BusyError*>(&e)) return 423;
  if (dynamic_cast<const DataError*>(&e)) return 422;
  if (dynamic_cast<const NumericalError*>(&e)) return 500;
  return 400;
}

void send(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_header(kApiVersionHeader, kApiVersion);
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code,
                const std::string& message, json details = json::object()) {
  send(res, status, {{"code", code}, {"message", message}, {"details", std::move(details)}});
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::parse_error& e) {
    throw UsageError(std::string("request body is not valid JSON: ") + e.what());
  }
}

std::uint32_t parse_dim(const std::string& s) {
  try {
    std::size_t pos = 0;
    const unsigned long v = std::stoul(s, &pos);
    if (pos == s.size() && v <= 0xffffffffUL) return static_cast<std::uint32_t>(v);
  } catch (const std::exception&) {
  }
  throw UsageError("dimension must be a non-negative integer, got '" + s + "'");
}

using Body = std::function<void(const httplib::Request&, httplib::Response&)>;

// Version check and error mapping shared by every route.
httplib::Server::Handler guarded(Body body) {
  return [body = std::move(body)](const httplib::Request& req, httplib::Response& res) {
    if (!req.has_header(kApiVersionHeader)) {
      send_error(res, 400, "unsupported_api_version",
                 std::string("missing ") + kApiVersionHeader + " header",
                 {{"supported", kApiVersion}});
      return;
    }
    if (req.get_header_value(kApiVersionHeader) != kApiVersion) {
      send_error(res, 400, "unsupported_api_version",
                 "API version " + req.get_header_value(kApiVersionHeader) + " is not supported",
                 {{"supported", kApiVersion}});
      return;
    }
    try {
      body(req, res);
    } catch (const Error& e) {
      send_error(res, http_status(e), e.code(), e.what());
    } catch (const json::exception& e) {
      send_error(res, 400, "invalid_argument", e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal_error", e.what());
    }
  };
}

}  // namespace

ApiServer::ApiServer(session::SessionStore& store)
    : store_(store), server_(std::make_unique<httplib::Server>()) {
  routes();
  worker_ = std::thread([this] { worker_loop(); });
}

ApiServer::~ApiServer() {
  stop();
  {
    std::lock_guard<std::mutex> lk(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  if (worker_.joinable()) worker_.join();
}

int ApiServer::bind(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = server_->bind_to_any_port(host);
    if (bound < 0) throw UsageError("cannot bind " + host);
  } else if (!server_->bind_to_port(host, port)) {
    throw UsageError("cannot bind " + host + ":" + std::to_string(port));
  }
  // Sessions left in training (for example by a restart) are resumed.
  for (const auto& id : store_.list()) {
    const auto s = store_.load(id);
    if (s.status == session::Status::training && !s.current().error) enqueue_training(id);
  }
  return bound;
}

void ApiServer::listen() { server_->listen_after_bind(); }

void ApiServer::stop() {
  if (server_) server_->stop();
}

void ApiServer::wait_idle() {
  std::unique_lock<std::mutex> lk(mu_);
  cv_.wait(lk, [this] { return jobs_.empty() && !busy_; });
}

void ApiServer::enqueue_training(const std::string& id) {
  {
    std::lock_guard<std::mutex> lk(mu_);
    jobs_.push_back(id);
  }
  cv_.notify_all();
}

void ApiServer::worker_loop() {
  for (;;) {
    std::string id;
    {
      std::unique_lock<std::mutex> lk(mu_);
      cv_.wait(lk, [this] { return stopping_ || !jobs_.empty(); });
      if (stopping_) return;
      id = jobs_.front();
      jobs_.pop_front();
      busy_ = true;
    }
    for (int attempt = 0; attempt < 50; ++attempt) {
      try {
        store_.train(id);
        break;
      } catch (const BusyError&) {
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
      } catch (const std::exception& e) {
        // The store has recorded the failure on the iteration.
        std::fprintf(stderr, "training %s failed: %s\n", id.c_str(), e.what());
        break;
      }
    }
    {
      std::lock_guard<std::mutex> lk(mu_);
      busy_ = false;
    }
    cv_.notify_all();
  }
}

void ApiServer::routes() {
  auto& srv = *server_;
  const std::string id = "/sessions/([A-Za-z0-9_-]+)";

  srv.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req);
    if (!body.contains("kind") || !body["kind"].is_string()) throw UsageError("'kind' is required");
    if (!body.contains("data_ref") || !body["data_ref"].is_string()) {
      throw UsageError("'data_ref' is required");
    }
    const ModelKind kind = model_kind_from_string(body["kind"].get<std::string>());
    const auto cfg =
        session::SessionConfig::from_json(kind, body.value("config", json::object()));
    const auto s = store_.create(kind, body["data_ref"].get<std::string>(), cfg);
    enqueue_training(s.id);
    send(res, 201, {{"session_id", s.id}, {"status", session::to_string(s.status)}});
  }));

  srv.Get(id, guarded([this](const httplib::Request& req, httplib::Response& res) {
    send(res, 200, session::session_summary(store_, store_.load(req.matches[1])));
  }));

  srv.Get(id + "/dims", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const std::string sid = req.matches[1];
    json cards = store_.cards(sid);
    json drafts = json::array();
    for (const auto& [dim, jd] : store_.draft_judgments(sid)) drafts.push_back(judgment_to_json(dim, jd));
    cards["drafts"] = drafts;
    send(res, 200, cards);
  }));

  srv.Post(id + "/dims/([0-9A-Za-z_-]+)/judgment",
           guarded([this](const httplib::Request& req, httplib::Response& res) {
             const std::uint32_t dim = parse_dim(req.matches[2]);
             const auto judgment = judgment_from_json(parse_body(req));
             store_.record_judgment(req.matches[1], dim, judgment);
             send(res, 200, {{"draft", judgment_to_json(dim, judgment)}});
           }));

  srv.Post(id + "/review/complete", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req);
    std::optional<double> tau;
    if (body.contains("threshold") && !body["threshold"].is_null()) {
      if (!body["threshold"].is_number()) throw UsageError("'threshold' must be a number");
      tau = body["threshold"].get<double>();
    }
    const auto s = store_.complete_review(req.matches[1], tau);
    send(res, 200, session::session_summary(store_, s));
  }));

  srv.Post(id + "/iterate", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const auto s = store_.next_iteration(req.matches[1]);
    enqueue_training(s.id);
    send(res, 202, session::session_summary(store_, s));
  }));

  srv.Post(id + "/finalize", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const auto s = store_.finalize(req.matches[1]);
    send(res, 200, session::session_summary(store_, s));
  }));

  srv.Get(id + "/report", guarded([this](const httplib::Request& req, httplib::Response& res) {
    send(res, 200, store_.report(req.matches[1]));
  }));

  srv.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.status == 404 && res.body.empty()) {
      send_error(res, 404, "not_found", "no such route");
    }
  });
}

}  // namespace lenskit::http
