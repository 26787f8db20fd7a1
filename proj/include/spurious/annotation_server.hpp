#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <thread>

#include "spurious/annotation.hpp"

namespace httplib {
class Server;
}

namespace spurious::annotation {

/// HTTP JSON front end of an AnnotationStore. See docs/annotation_api.md.
class AnnotationServer {
 public:
  AnnotationServer(AnnotationStore& store, std::filesystem::path asset_root,
                   std::filesystem::path static_root = {});
  ~AnnotationServer();

  /// Binds and serves on a background thread. Port 0 picks a free port.
  /// Returns the bound port.
  int start(const std::string& host, int port);
  /// Binds and serves on the calling thread until stop().
  void run(const std::string& host, int port);
  void stop();

 private:
  void routes();

  AnnotationStore& store_;
  std::filesystem::path asset_root_;
  std::filesystem::path static_root_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

/// "host:port" from the environment variable SPURIOUS_ANNOTATION_ADDR, or
/// the given default.
std::pair<std::string, int> bind_address_from_env(const std::string& fallback = "127.0.0.1:8080");

}  // namespace spurious::annotation
