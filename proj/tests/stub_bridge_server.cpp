// Echo model server speaking trace-bridge/1, used by the bridge tests.
//
//   predict: log-odds = UTF-8 byte length of the text - 5
//   latent:  v[i] = (bytes * (i + 1)) mod 7 + spaces / (i + 1)
//
// Options:
//   --latent-dim N     handshake latent_dim (0 announces null); default 4
//   --tcp PORT         listen on 127.0.0.1:PORT (0 picks one) and print the
//                      port on stdout; otherwise serve stdin/stdout
//   --mode M           normal | garbage (answer requests with non-JSON) |
//                      wrong-id | short (one value too few) |
//                      bad-handshake | exit-after=N (exit after N requests)

#include <cstdio>
#include <cstring>
#include <iostream>
#include <string>

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <json.hpp>

namespace {

struct Options {
  int latent_dim = 4;
  int tcp_port = -1;
  std::string mode = "normal";
  long exit_after = -1;
};

std::vector<double> echo_latent(const std::string& text, int dim) {
  double spaces = 0;
  for (char c : text) spaces += c == ' ' ? 1 : 0;
  std::vector<double> v(static_cast<std::size_t>(dim));
  for (int i = 0; i < dim; ++i) {
    v[static_cast<std::size_t>(i)] =
        static_cast<double>((text.size() * static_cast<std::size_t>(i + 1)) % 7) + spaces / (i + 1);
  }
  return v;
}

bool read_line(std::FILE* in, std::string& line) {
  line.clear();
  int c;
  while ((c = std::fgetc(in)) != EOF) {
    if (c == '\n') return true;
    line += static_cast<char>(c);
  }
  return !line.empty();
}

void send(std::FILE* out, const std::string& s) {
  std::fputs(s.c_str(), out);
  std::fputc('\n', out);
  std::fflush(out);
}

// Returns false when the process should exit.
bool serve(std::FILE* in, std::FILE* out, const Options& opt, long& served) {
  if (opt.mode == "bad-handshake") {
    send(out, R"({"protocol":"something-else/9"})");
    return false;
  }
  nlohmann::json hello{{"protocol", "trace-bridge/1"}};
  hello["latent_dim"] = opt.latent_dim > 0 ? nlohmann::json(opt.latent_dim) : nlohmann::json(nullptr);
  send(out, hello.dump());
  std::string line;
  while (read_line(in, line)) {
    if (opt.exit_after >= 0 && served >= opt.exit_after) return false;
    ++served;
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      send(out, R"({"id":null,"error":"protocol error: request is not JSON"})");
      continue;
    }
    if (!req.is_object() || !req.contains("id") || !req.contains("texts") || !req["texts"].is_array()) {
      send(out, nlohmann::json{{"id", req.value("id", nlohmann::json(nullptr))},
                               {"error", "protocol error: request needs id and texts"}}
                    .dump());
      continue;
    }
    if (opt.mode == "garbage") {
      send(out, "this is not json");
      continue;
    }
    nlohmann::json resp;
    resp["id"] = opt.mode == "wrong-id" ? req["id"].get<long>() + 100 : req["id"].get<long>();
    const auto kind = req.value("kind", std::string("predict"));
    const auto texts = req["texts"].get<std::vector<std::string>>();
    if (kind == "predict") {
      auto lo = nlohmann::json::array();
      for (const auto& t : texts) lo.push_back(static_cast<double>(t.size()) - 5.0);
      if (opt.mode == "short" && !lo.empty()) lo.erase(lo.size() - 1);
      resp["log_odds"] = lo;
    } else if (kind == "latent" && opt.latent_dim > 0) {
      auto vs = nlohmann::json::array();
      for (const auto& t : texts) vs.push_back(echo_latent(t, opt.latent_dim));
      resp["vectors"] = vs;
    } else {
      resp["error"] = "unsupported kind '" + kind + "'";
    }
    send(out, resp.dump());
  }
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--latent-dim" && i + 1 < argc) {
      opt.latent_dim = std::stoi(argv[++i]);
    } else if (a == "--tcp" && i + 1 < argc) {
      opt.tcp_port = std::stoi(argv[++i]);
    } else if (a == "--mode" && i + 1 < argc) {
      opt.mode = argv[++i];
      if (opt.mode.rfind("exit-after=", 0) == 0) opt.exit_after = std::stol(opt.mode.substr(11));
    } else {
      std::cerr << "unknown argument " << a << "\n";
      return 2;
    }
  }
  long served = 0;
  if (opt.tcp_port < 0) {
    serve(stdin, stdout, opt, served);
    return 0;
  }
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<uint16_t>(opt.tcp_port));
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd, 4) != 0) {
    std::perror("bind");
    return 1;
  }
  socklen_t len = sizeof addr;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  std::printf("%d\n", ntohs(addr.sin_port));
  std::fflush(stdout);
  for (;;) {
    const int conn = ::accept(fd, nullptr, nullptr);
    if (conn < 0) continue;
    std::FILE* in = ::fdopen(conn, "r");
    std::FILE* out = ::fdopen(::dup(conn), "w");
    const bool keep = serve(in, out, opt, served);
    std::fclose(in);
    std::fclose(out);
    if (!keep) return 0;
  }
}
