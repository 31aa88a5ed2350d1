#pragma once

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "reportpilot/corpus.hpp"
#include "reportpilot/imaging.hpp"

namespace testutil {

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace reportpilot;

inline fs::path temp_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  auto dir = fs::temp_directory_path() /
             ("rp-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Two box-shaped kidneys in a 48x24x24 grid of 4 mm voxels (0.064 cm3 each).
// Left 16x12x14 voxels = 172.032 cm3, right 16x12x15 = 184.32 cm3.
struct KidneyStudy {
  imaging::VoxelVolume volume;
  imaging::LabelMask mask;
};

inline KidneyStudy kidney_study(int right_depth = 15) {
  KidneyStudy s;
  const imaging::Dims dims{48, 24, 24};
  s.volume.dims = dims;
  s.volume.spacing = {4.0, 4.0, 4.0};
  s.volume.data.assign(dims.count(), -100.0f);
  s.mask.dims = dims;
  s.mask.spacing = {4.0, 4.0, 4.0};
  s.mask.labels.assign(dims.count(), 0);
  s.mask.label_table = {{1, "kidney_left"}, {2, "kidney_right"}};
  for (int z = 0; z < 24; ++z)
    for (int y = 0; y < 24; ++y)
      for (int x = 0; x < 48; ++x) {
        const auto i = dims.index(x, y, z);
        if (x >= 4 && x < 20 && y >= 6 && y < 18 && z >= 5 && z < 19) {
          s.mask.labels[i] = 1;
          s.volume.data[i] = static_cast<float>(30 + (x + y + z) % 7);
        }
        if (x >= 28 && x < 44 && y >= 6 && y < 18 && z >= 4 && z < 4 + right_depth) {
          s.mask.labels[i] = 2;
          s.volume.data[i] = static_cast<float>(32 + (x * y + z) % 5);
        }
      }
  return s;
}

inline std::string bytes_str(const std::vector<std::byte>& b) {
  return std::string(reinterpret_cast<const char*>(b.data()), b.size());
}

// ---------------------------------------------------------------------------
// Server-sent events

struct SseEvent {
  std::string event;
  json data;
};

inline std::vector<SseEvent> parse_sse(const std::string& body) {
  std::vector<SseEvent> out;
  std::size_t pos = 0;
  while (pos < body.size()) {
    auto end = body.find("\n\n", pos);
    if (end == std::string::npos) end = body.size();
    const auto block = body.substr(pos, end - pos);
    pos = end + 2;
    SseEvent e;
    std::string data;
    std::size_t lp = 0;
    while (lp < block.size()) {
      auto nl = block.find('\n', lp);
      if (nl == std::string::npos) nl = block.size();
      const auto line = block.substr(lp, nl - lp);
      lp = nl + 1;
      if (line.rfind("event: ", 0) == 0) e.event = line.substr(7);
      if (line.rfind("data: ", 0) == 0) data += line.substr(6);
    }
    if (e.event.empty() && data.empty()) continue;
    e.data = data.empty() ? json() : json::parse(data);
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mock chat-completions server. Behaviour is selected by the request's model.

class MockChatServer {
 public:
  MockChatServer() {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      {
        std::lock_guard lock(mu_);
        last_body_ = req.body;
        last_auth_ = req.get_header_value("Authorization");
        ++requests_;
      }
      const auto body = json::parse(req.body);
      const auto model = body.value("model", std::string());
      auto chunk = [](const std::string& content) {
        return "data: " + json{{"choices", {{{"index", 0}, {"delta", {{"content", content}}}}}}}.dump() + "\n\n";
      };
      auto stream = [&res](std::vector<std::string> pieces, int delay_ms) {
        res.set_chunked_content_provider("text/event-stream", [pieces, delay_ms](std::size_t, httplib::DataSink& sink) {
          for (const auto& p : pieces) {
            if (delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
            if (!sink.write(p.data(), p.size())) return false;
          }
          sink.done();
          return true;
        });
      };
      if (model == "ok") {
        stream({": keep-alive\n\n", "data: {\"choices\":[{\"delta\":{\"role\":\"assistant\"}}]}\n\n",
                chunk("Normal "), chunk("kidneys."), "data: [DONE]\n\n"},
               0);
      } else if (model == "split") {
        // One event split across writes, CRLF line endings.
        const auto c = chunk("Normal ");
        stream({c.substr(0, 10), c.substr(10), "data: {\"choices\":[{\"delta\":{\"content\":\"kidneys.\"}}]}\r\n\r\n",
                "data: [DONE]\r\n\r\n"},
               5);
      } else if (model == "bad-json") {
        stream({chunk("Normal "), "data: {not json\n\n", "data: [DONE]\n\n"}, 0);
      } else if (model == "no-done") {
        stream({chunk("Normal "), chunk("kidneys.")}, 0);
      } else if (model == "error-object") {
        stream({"data: {\"error\":{\"message\":\"overloaded\"}}\n\n"}, 0);
      } else if (model == "http500") {
        res.status = 500;
        res.set_content("boom", "text/plain");
      } else if (model == "slow") {
        std::this_thread::sleep_for(std::chrono::milliseconds(1500));
        stream({chunk("late"), "data: [DONE]\n\n"}, 0);
      } else if (model == "many") {
        std::vector<std::string> pieces;
        for (int i = 0; i < 40; ++i) pieces.push_back(chunk(i == 0 ? "w0" : " w" + std::to_string(i)));
        pieces.push_back("data: [DONE]\n\n");
        stream(pieces, 10);
      } else {
        res.status = 404;
        res.set_content("unknown model", "text/plain");
      }
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~MockChatServer() {
    server_.stop();
    thread_.join();
  }

  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  std::string last_body() const {
    std::lock_guard lock(mu_);
    return last_body_;
  }
  std::string last_auth() const {
    std::lock_guard lock(mu_);
    return last_auth_;
  }
  int requests() const {
    std::lock_guard lock(mu_);
    return requests_;
  }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  mutable std::mutex mu_;
  std::string last_body_, last_auth_;
  int requests_ = 0;
};

// ---------------------------------------------------------------------------
// Subprocesses

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

inline pid_t spawn(const std::vector<std::string>& args, const fs::path& out_file, const fs::path& err_file) {
  const pid_t pid = ::fork();
  if (pid == 0) {
    const int out = ::open(out_file.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    const int err = ::open(err_file.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    ::dup2(out, 1);
    ::dup2(err, 2);
    std::vector<char*> argv;
    for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);
    ::execv(argv[0], argv.data());
    ::_exit(127);
  }
  return pid;
}

inline RunResult run(std::vector<std::string> args) {
  args.insert(args.begin(), REPORTPILOT_CLI);
  const auto dir = temp_dir("run");
  const pid_t pid = spawn(args, dir / "out", dir / "err");
  int status = 0;
  ::waitpid(pid, &status, 0);
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = corpus::read_file(dir / "out");
  r.err = corpus::read_file(dir / "err");
  fs::remove_all(dir);
  return r;
}

inline int free_port() {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  socklen_t len = sizeof addr;
  int port = -1;
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0 &&
      ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) == 0)
    port = ntohs(addr.sin_port);
  ::close(fd);
  return port;
}

// `reportpilot serve` child process.
class ServeProcess {
 public:
  ServeProcess(const fs::path& config, const fs::path& log_dir) {
    pid_ = spawn({REPORTPILOT_CLI, "serve", "--config", config.string()}, log_dir / "serve.out",
                 log_dir / "serve.err");
  }
  ~ServeProcess() { kill(SIGKILL); }

  // Polls /health until it answers or the deadline passes.
  bool wait_ready(int port, std::chrono::milliseconds deadline = std::chrono::seconds(10)) const {
    const auto until = std::chrono::steady_clock::now() + deadline;
    while (std::chrono::steady_clock::now() < until) {
      httplib::Client c("127.0.0.1", port);
      c.set_connection_timeout(0, 200000);
      if (auto r = c.Get("/health"); r && r->status == 200) return true;
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    return false;
  }

  void kill(int sig) {
    if (pid_ <= 0) return;
    ::kill(pid_, sig);
    int status = 0;
    ::waitpid(pid_, &status, 0);
    pid_ = -1;
  }

  // Exit code once the process ends on its own.
  int wait() {
    int status = 0;
    ::waitpid(pid_, &status, 0);
    pid_ = -1;
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

 private:
  pid_t pid_ = -1;
};

// Multipart upload of a study in NIfTI form.
inline httplib::Result upload_study(httplib::Client& c, const KidneyStudy& s,
                                    const std::string& descriptor =
                                        R"({"modality":"CT","body_region":"abdomen","hint_keywords":["kidney"]})") {
  httplib::MultipartFormDataItems items = {
      {"image", bytes_str(imaging::serialize_nifti(s.volume, imaging::DType::I16)), "image.nii",
       "application/octet-stream"},
      {"mask", bytes_str(imaging::serialize_nifti(s.mask, imaging::DType::U8)), "mask.nii",
       "application/octet-stream"},
      {"labels", R"({"1":"kidney_left","2":"kidney_right"})", "", "application/json"},
      {"descriptor", descriptor, "", "application/json"},
  };
  return c.Post("/studies", items);
}

}  // namespace testutil
