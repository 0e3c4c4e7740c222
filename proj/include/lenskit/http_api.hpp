#pragma once

#include <condition_variable>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "lenskit/session.hpp"

namespace httplib {
class Server;
}

namespace lenskit::http {

inline constexpr const char* kApiVersionHeader = "X-Lenskit-Api-Version";
inline constexpr const char* kApiVersion = "1";

// JSON API over a SessionStore. Training runs on one background worker;
// clients poll GET /sessions/{id} for progress.
class ApiServer {
 public:
  explicit ApiServer(session::SessionStore& store);
  ~ApiServer();
  ApiServer(const ApiServer&) = delete;
  ApiServer& operator=(const ApiServer&) = delete;

  // Returns the bound port (an ephemeral one when port is 0).
  int bind(const std::string& host, int port);
  // Blocks until stop().
  void listen();
  void stop();

  // Blocks until every queued training job has finished.
  void wait_idle();

 private:
  void routes();
  void enqueue_training(const std::string& id);
  void worker_loop();

  session::SessionStore& store_;
  std::unique_ptr<httplib::Server> server_;

  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::string> jobs_;
  bool busy_ = false;
  bool stopping_ = false;
  std::thread worker_;
};

}  // namespace lenskit::http
