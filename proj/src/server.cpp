#include "r2r/server.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "r2r/bench.hpp"
#include "r2r/labels.hpp"
#include "r2r/lifecycle.hpp"

// Last: <resolv.h> defines a _res macro that collides with Eigen.
#include "httplib.h"

namespace r2r::server {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Reply error(int status, const std::string& message) {
  return {status, "application/json", json{{"error", message}}.dump() + "\n"};
}

std::optional<std::string> slurp(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

bool safe_relative(const fs::path& p) {
  if (p.empty() || p.is_absolute() || p.has_root_name()) return false;
  for (const auto& part : p) {
    if (part == ".." || part == "." || part.empty()) return false;
  }
  return true;
}

}  // namespace

std::string content_type_for(const fs::path& file) {
  const std::string ext = file.extension().string();
  if (ext == ".json") return "application/json";
  if (ext == ".png") return "image/png";
  if (ext == ".csv") return "text/csv";
  if (ext == ".md") return "text/markdown";
  if (ext == ".html") return "text/html";
  if (ext == ".js") return "text/javascript";
  if (ext == ".css") return "text/css";
  return "application/octet-stream";
}

Handlers::Handlers(fs::path run_dir) : root_(std::move(run_dir)) {}

Reply Handlers::index() const {
  const auto body = slurp(lifecycle::RunPaths{root_}.bundle() / "index.json");
  if (!body) return error(404, "no bundle exported for this run");
  return {200, "application/json", *body};
}

Reply Handlers::file(const std::string& rel) const {
  const fs::path p(rel);
  if (!safe_relative(p)) return error(400, "invalid file path: " + rel);
  const fs::path full = lifecycle::RunPaths{root_}.bundle() / p;
  if (!fs::is_regular_file(full)) return error(404, "not found: " + rel);
  const auto body = slurp(full);
  if (!body) return error(404, "not found: " + rel);
  return {200, content_type_for(full), *body};
}

Reply Handlers::post_labels(const std::string& body) {
  const json j = json::parse(body, nullptr, false);
  if (j.is_discarded()) return error(400, "request body is not valid JSON");
  labels::ArtifactLabelSet set;
  try {
    set = labels::from_json(j);
  } catch (const labels::LabelError& e) {
    return error(400, e.what());
  }

  const std::lock_guard lock(write_mutex_);
  const lifecycle::RunPaths paths{root_};
  try {
    if (!dataset_) dataset_ = bench::load_image_folder(paths.dataset());
    labels::check_ids(set, *dataset_);
    if (const auto m = lifecycle::load_manifest(root_); m && m->label_set(set.artifact_name)) {
      return error(400, "artifact '" + set.artifact_name + "' is already labeled in this run");
    }
    if (fs::exists(paths.pending_labels())) {
      const auto pending = labels::load(paths.pending_labels());
      if (pending.artifact_name != set.artifact_name) {
        return error(400, "label set '" + pending.artifact_name +
                              "' is still pending; resume the lifecycle before submitting another");
      }
    }
    labels::write_atomic(paths.pending_labels(), labels::serialize(set));
  } catch (const labels::LabelError& e) {
    return error(400, e.what());
  } catch (const std::exception& e) {
    return error(500, e.what());
  }
  return {201, "application/json",
          json{{"artifact_name", set.artifact_name},
               {"sample_count", set.sample_ids.size()},
               {"path", "labels.json"}}
                  .dump() +
              "\n"};
}

struct Server::Impl {
  fs::path root;
  ServerOptions options;
  Handlers handlers;
  httplib::Server http;
  int port = -1;

  Impl(fs::path r, ServerOptions o) : root(r), options(std::move(o)), handlers(std::move(r)) {}
};

Server::Server(fs::path run_dir, ServerOptions options)
    : impl_(std::make_unique<Impl>(std::move(run_dir), std::move(options))) {
  auto send = [](httplib::Response& res, const Reply& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  Impl& s = *impl_;
  // SO_REUSEADDR only: the library default adds SO_REUSEPORT, which lets a
  // second server share a busy port.
  s.http.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });
  s.http.Get("/api/index", [&s, send](const httplib::Request&, httplib::Response& res) {
    send(res, s.handlers.index());
  });
  s.http.Get(R"(/files/(.+))", [&s, send](const httplib::Request& req, httplib::Response& res) {
    send(res, s.handlers.file(req.matches[1].str()));
  });
  s.http.Post("/api/labels", [&s, send](const httplib::Request& req, httplib::Response& res) {
    send(res, s.handlers.post_labels(req.body));
  });
}

Server::~Server() { stop(); }

int Server::bind() {
  Impl& s = *impl_;
  if (!fs::exists(lifecycle::RunPaths{s.root}.bundle() / "index.json")) {
    throw ServerError("no bundle in " + s.root.string() + " (run export-bundle first)");
  }
  if (!s.options.static_dir.empty() && !s.http.set_mount_point("/", s.options.static_dir.string())) {
    throw ServerError("static directory not found: " + s.options.static_dir.string());
  }
  if (s.options.port == 0) {
    s.port = s.http.bind_to_any_port(s.options.host);
  } else if (s.http.bind_to_port(s.options.host, s.options.port)) {
    s.port = s.options.port;
  }
  if (s.port <= 0) {
    throw ServerError("cannot bind " + s.options.host + ":" + std::to_string(s.options.port) +
                      " (port busy?)");
  }
  return s.port;
}

void Server::run() {
  if (impl_->port <= 0) throw ServerError("run() before bind()");
  impl_->http.listen_after_bind();
}

void Server::stop() {
  if (impl_ && impl_->http.is_running()) impl_->http.stop();
}

}  // namespace r2r::server
