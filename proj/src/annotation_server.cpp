#include "spurious/annotation_server.hpp"

#include <cstdlib>

#include <httplib.h>

namespace spurious::annotation {

using nlohmann::json;

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

int http_status(SubmitStatus status) {
  switch (status) {
    case SubmitStatus::kAccepted: return 201;
    case SubmitStatus::kRejected: return 422;
    case SubmitStatus::kHitComplete: return 409;
    case SubmitStatus::kUnqualified: return 403;
    case SubmitStatus::kUnknownHit: return 404;
  }
  return 500;
}

json hit_payload(const Hit& hit, HitStatus status) {
  json j = to_json(hit);
  j["status"] = to_string(status);
  for (auto& asset : j["assets"]) asset["url"] = "/assets/" + asset["path"].get<std::string>();
  return j;
}

}  // namespace

AnnotationServer::AnnotationServer(AnnotationStore& store, std::filesystem::path asset_root,
                                   std::filesystem::path static_root)
    : store_(store),
      asset_root_(std::move(asset_root)),
      static_root_(std::move(static_root)),
      server_(std::make_unique<httplib::Server>()) {
  routes();
}

AnnotationServer::~AnnotationServer() { stop(); }

void AnnotationServer::routes() {
  auto& s = *server_;
  s.Get("/hits/next", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string worker = req.get_param_value("worker");
    if (worker.empty()) return send_error(res, 400, "worker is required");
    Study study;
    try {
      study = parse_study(req.has_param("study") ? req.get_param_value("study") : "discovery");
    } catch (const InvalidInput& e) {
      return send_error(res, 400, e.what());
    }
    const auto hit = store_.next_hit(study, worker);
    if (!hit) return send_error(res, 404, "no open HITs for this worker");
    send_json(res, 200, hit_payload(*hit, store_.hit_status(hit->id)));
  });

  s.Get(R"(/hits/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const auto hit = store_.hit(req.matches[1]);
    if (!hit) return send_error(res, 404, "no HIT with id " + std::string(req.matches[1]));
    send_json(res, 200, hit_payload(*hit, store_.hit_status(hit->id)));
  });

  s.Post(R"(/hits/([^/]+)/responses)", [this](const httplib::Request& req, httplib::Response& res) {
    AnnotationRecord record;
    try {
      record = record_from_json(json::parse(req.body));
    } catch (const json::parse_error& e) {
      return send_error(res, 400, std::string("invalid JSON: ") + e.what());
    } catch (const MalformedRecord& e) {
      return send_error(res, 400, e.what());
    }
    record.hit_id = req.matches[1];
    try {
      const Receipt receipt = store_.submit(record);
      send_json(res, http_status(receipt.status), to_json(receipt));
    } catch (const MalformedRecord& e) {
      send_error(res, 400, e.what());
    }
  });

  s.Get("/verdicts", [this](const httplib::Request& req, httplib::Response& res) {
    json list = json::array();
    const std::string study = req.get_param_value("study");
    for (const auto& v : store_.verdicts()) {
      if (study.empty() || to_string(v.study) == study) list.push_back(to_json(v));
    }
    send_json(res, 200, {{"verdicts", list}});
  });

  s.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, to_json(store_.stats()));
  });

  if (!asset_root_.empty()) s.set_mount_point("/assets", asset_root_.string());
  if (!static_root_.empty()) s.set_mount_point("/", static_root_.string());
}

int AnnotationServer::start(const std::string& host, int port) {
  const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw std::runtime_error("annotation server: cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return bound;
}

void AnnotationServer::run(const std::string& host, int port) {
  if (!server_->listen(host, port)) {
    throw std::runtime_error("annotation server: cannot listen on " + host + ":" + std::to_string(port));
  }
}

void AnnotationServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

std::pair<std::string, int> bind_address_from_env(const std::string& fallback) {
  const char* env = std::getenv("SPURIOUS_ANNOTATION_ADDR");
  const std::string text = env && *env ? env : fallback;
  const auto colon = text.rfind(':');
  if (colon == std::string::npos) throw InvalidInput("bind address '" + text + "' is not host:port");
  try {
    return {text.substr(0, colon), std::stoi(text.substr(colon + 1))};
  } catch (const std::exception&) {
    throw InvalidInput("bind address '" + text + "' has an invalid port");
  }
}

}  // namespace spurious::annotation
