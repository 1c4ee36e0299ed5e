#include <filesystem>
#include <fstream>
#include <sstream>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "itrack/service.hpp"

namespace itrack {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

std::unique_ptr<AlignerBackend> make_backend(const std::string& name, const CameraModel& cam) {
  if (name == "rule") {
    RuleConfig rc;
    rc.camera = cam;
    return std::make_unique<RuleBackend>(rc);
  }
  if (name == "remote") return std::make_unique<RemoteBackend>(RemoteConfig::from_env());
  throw std::invalid_argument("unknown backend '" + name + "'");
}

std::string mime_type(const std::string& path) {
  const std::string ext = std::filesystem::path(path).extension().string();
  if (ext == ".html" || ext == ".htm") return "text/html; charset=utf-8";
  if (ext == ".js" || ext == ".mjs") return "text/javascript; charset=utf-8";
  if (ext == ".css") return "text/css; charset=utf-8";
  if (ext == ".json" || ext == ".map") return "application/json";
  if (ext == ".svg") return "image/svg+xml";
  if (ext == ".png") return "image/png";
  if (ext == ".ico") return "image/x-icon";
  if (ext == ".txt") return "text/plain; charset=utf-8";
  if (ext == ".wasm") return "application/wasm";
  return "application/octet-stream";
}

std::optional<std::string> resolve_static(const std::string& root, const std::string& target) {
  if (root.empty() || target.empty() || target.front() != '/') return std::nullopt;
  std::string path = target.substr(0, target.find_first_of("?#"));
  if (path.find('\0') != std::string::npos || path.find('\\') != std::string::npos) {
    return std::nullopt;
  }
  std::filesystem::path rel;
  std::istringstream parts(path);
  std::string seg;
  while (std::getline(parts, seg, '/')) {
    if (seg.empty() || seg == ".") continue;
    if (seg == "..") return std::nullopt;
    rel /= seg;
  }
  if (path.back() == '/') rel /= "index.html";
  return (std::filesystem::path(root) / rel).string();
}

struct Server::Impl {
  ServerConfig cfg;
  MemoryBank bank;
  net::io_context ioc{1};
  tcp::acceptor acceptor{ioc};
  std::thread thread;

  explicit Impl(ServerConfig c)
      : cfg(std::move(c)),
        bank(cfg.memory_path.empty() ? MemoryBank::seeded(cfg.session.camera)
                                     : MemoryBank::load(cfg.memory_path)) {
    cfg.session.validate();
    make_backend(cfg.backend, cfg.session.camera);
  }

  void accept();
};

namespace {

class WsConnection : public std::enable_shared_from_this<WsConnection> {
 public:
  WsConnection(tcp::socket&& socket, Server::Impl& srv)
      : ws_(std::move(socket)), timer_(ws_.get_executor()), srv_(srv) {}

  ~WsConnection() {
    if (session_) session_->stop();
  }

  void run(http::request<http::string_body> req) {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.text(true);
    ws_.async_accept(req, [self = shared_from_this()](beast::error_code ec) {
      if (ec) return;
      self->on_accept();
    });
  }

 private:
  void on_accept() {
    try {
      session_ = std::make_unique<Session>(
          srv_.cfg.session, make_backend(srv_.cfg.backend, srv_.cfg.session.camera), srv_.bank);
    } catch (const std::exception& e) {
      out_ = error_message(std::nullopt, e.what()).dump();
      ws_.async_write(net::buffer(out_), [self = shared_from_this()](beast::error_code, std::size_t) {
        self->ws_.async_close(websocket::close_code::internal_error,
                              [self](beast::error_code) {});
      });
      return;
    }
    session_->start();
    read();
    pump();
  }

  void read() {
    ws_.async_read(buf_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->close();
      self->session_->submit(beast::buffers_to_string(self->buf_.data()));
      self->buf_.consume(self->buf_.size());
      self->read();
    });
  }

  // A single writer drains the session queue; idle polls back off briefly.
  void pump() {
    if (closed_) return;
    if (auto m = session_->next_outbound(std::chrono::milliseconds(0))) {
      out_ = std::move(*m);
      ws_.async_write(net::buffer(out_), [self = shared_from_this()](beast::error_code ec, std::size_t) {
        if (ec) return self->close();
        self->pump();
      });
      return;
    }
    timer_.expires_after(std::chrono::milliseconds(2));
    timer_.async_wait([self = shared_from_this()](beast::error_code ec) {
      if (!ec) self->pump();
    });
  }

  void close() {
    if (closed_) return;
    closed_ = true;
    timer_.cancel();
    if (session_) session_->stop();
  }

  websocket::stream<beast::tcp_stream> ws_;
  net::steady_timer timer_;
  Server::Impl& srv_;
  beast::flat_buffer buf_;
  std::string out_;
  std::unique_ptr<Session> session_;
  bool closed_ = false;
};

class HttpConnection : public std::enable_shared_from_this<HttpConnection> {
 public:
  HttpConnection(tcp::socket&& socket, Server::Impl& srv) : stream_(std::move(socket)), srv_(srv) {}

  void run() { read(); }

 private:
  void read() {
    req_ = {};
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buf_, req_,
                     [self = shared_from_this()](beast::error_code ec, std::size_t) {
                       if (ec) return self->shutdown();
                       self->on_request();
                     });
  }

  void on_request() {
    if (websocket::is_upgrade(req_)) {
      const std::string target(req_.target());
      if (target.substr(0, target.find('?')) == "/session") {
        stream_.expires_never();
        std::make_shared<WsConnection>(stream_.release_socket(), srv_)->run(std::move(req_));
        return;
      }
      return respond(text_response(http::status::not_found, "no such websocket endpoint\n"));
    }
    if (req_.method() != http::verb::get && req_.method() != http::verb::head) {
      return respond(text_response(http::status::method_not_allowed, "method not allowed\n"));
    }
    const auto path = resolve_static(srv_.cfg.static_dir, std::string(req_.target()));
    if (!path || !std::filesystem::is_regular_file(*path)) {
      return respond(text_response(http::status::not_found, "not found\n"));
    }
    std::ifstream in(*path, std::ios::binary);
    std::ostringstream body;
    body << in.rdbuf();
    http::response<http::string_body> res{http::status::ok, req_.version()};
    res.set(http::field::content_type, mime_type(*path));
    res.body() = req_.method() == http::verb::head ? std::string() : body.str();
    res.content_length(body.str().size());
    respond(std::move(res));
  }

  http::response<http::string_body> text_response(http::status status, const std::string& text) {
    http::response<http::string_body> res{status, req_.version()};
    res.set(http::field::content_type, "text/plain; charset=utf-8");
    res.body() = text;
    res.prepare_payload();
    return res;
  }

  void respond(http::response<http::string_body> res) {
    res.keep_alive(req_.keep_alive());
    res_ = std::make_shared<http::response<http::string_body>>(std::move(res));
    http::async_write(stream_, *res_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec || !self->res_->keep_alive()) return self->shutdown();
      self->read();
    });
  }

  void shutdown() {
    beast::error_code ec;
    stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
  }

  beast::tcp_stream stream_;
  Server::Impl& srv_;
  beast::flat_buffer buf_;
  http::request<http::string_body> req_;
  std::shared_ptr<http::response<http::string_body>> res_;
};

}  // namespace

void Server::Impl::accept() {
  acceptor.async_accept(net::make_strand(ioc), [this](beast::error_code ec, tcp::socket socket) {
    if (!ec) std::make_shared<HttpConnection>(std::move(socket), *this)->run();
    if (acceptor.is_open()) accept();
  });
}

Server::Server(ServerConfig cfg) : impl_(std::make_unique<Impl>(std::move(cfg))) {}

Server::~Server() { stop(); }

unsigned short Server::start() {
  const tcp::endpoint ep(net::ip::make_address(impl_->cfg.address), impl_->cfg.port);
  impl_->acceptor.open(ep.protocol());
  impl_->acceptor.set_option(net::socket_base::reuse_address(true));
  impl_->acceptor.bind(ep);
  impl_->acceptor.listen(net::socket_base::max_listen_connections);
  impl_->accept();
  impl_->thread = std::thread([this] { impl_->ioc.run(); });
  return impl_->acceptor.local_endpoint().port();
}

void Server::run() {
  start();
  if (impl_->thread.joinable()) impl_->thread.join();
}

void Server::stop() {
  if (!impl_) return;
  net::post(impl_->ioc, [this] {
    beast::error_code ec;
    impl_->acceptor.close(ec);
  });
  impl_->ioc.stop();
  if (impl_->thread.joinable() && impl_->thread.get_id() != std::this_thread::get_id()) {
    impl_->thread.join();
  }
}

}  // namespace itrack
