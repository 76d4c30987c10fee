#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>

#include "r2r/dataset.hpp"

// HTTP front end for a run directory: read-only bundle access plus the single
// label-submission endpoint.
namespace r2r::server {

class ServerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Reply {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

// Request handling without sockets. Label writes are serialized.
class Handlers {
 public:
  explicit Handlers(std::filesystem::path run_dir);

  Reply index() const;                       // GET /api/index
  Reply file(const std::string& rel) const;  // GET /files/<rel>, relative to bundle/
  Reply post_labels(const std::string& body);  // POST /api/labels

 private:
  std::filesystem::path root_;
  std::mutex write_mutex_;
  std::optional<data::Dataset> dataset_;  // loaded on first POST
};

std::string content_type_for(const std::filesystem::path& file);

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0: any free port
  std::filesystem::path static_dir;  // optional UI files mounted at /
};

class Server {
 public:
  Server(std::filesystem::path run_dir, ServerOptions options);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds the socket and returns the port. Throws ServerError when the port
  // is taken or the bundle has not been exported.
  int bind();
  // Blocks until stop(). Requires bind().
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace r2r::server
