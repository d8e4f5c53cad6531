#pragma once

// Read-only HTTP API over one run directory, plus live interventions.

#include <cmath>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "attnrules/eval.hpp"
#include "attnrules/pipeline.hpp"

namespace attnrules {

inline constexpr int kApiSchema = 1;

struct ApiResponse {
  int status = 200;
  ojson body;
};

struct ServerOptions {
  std::size_t default_sample = 10;
  std::size_t max_repeats = 8;
  std::size_t exemplar_limit = 10;
};

/// Everything the API serves, loaded once; request handling never writes.
class ApiSession {
 public:
  explicit ApiSession(const fs::path& root, ServerOptions opt = {}) : opt_(opt) {
    if (!fs::exists(root / "manifest.json")) throw ConfigError(root.string() + " is not a run directory");
    const auto manifest = load_manifest(root);
    if (latest_stage(manifest, "extract")) run_ = load_extracted(root);
    if (auto ev = latest_stage(manifest, "eval")) {
      const fs::path dir = root / ev->at("dir").get<std::string>();
      const auto metrics = read_json(dir / "metrics.json");
      for (const auto& r : metrics.at("rows")) metrics_.push_back(r);
      for (const char* g : {"layer", "head"})
        aggregates_[g] = ojson::parse(atrw::read_file(dir / "reports" / (std::string("aggregate_") + g + ".json")));
    }
  }

  ApiResponse handle(const std::string& method, const std::string& path, const std::map<std::string, std::string>& query,
                     const std::string& body = "") const {
    try {
      static const std::regex feature_re(R"(^/api/v1/features/(\d+)(/exemplars|/intervene)?$)");
      std::smatch m;
      if (method == "GET" && path == "/healthz") return ok({{"status", "ok"}});
      if (method == "GET" && path == "/api/v1/features") return features();
      if (method == "GET" && path == "/api/v1/reports/aggregate") return aggregate(param(query, "group", "layer"));
      if (std::regex_match(path, m, feature_re)) {
        const auto id = static_cast<std::uint32_t>(std::stoul(m[1].str()));
        const std::string sub = m[2].str();
        const std::string head = param(query, "head", "");
        if (method == "GET" && sub.empty()) return detail(id, head);
        if (method == "GET" && sub == "/exemplars") return exemplars(id, head, param(query, "split", "test"));
        if (method == "POST" && sub == "/intervene") return intervene(id, head, body);
        return error(405, "method not allowed");
      }
      return error(404, "no such endpoint");
    } catch (const NotFoundError& e) {
      return error(404, e.what());
    } catch (const ConfigError& e) {
      return error(400, e.what());
    } catch (const nlohmann::json::exception& e) {
      return error(400, std::string("bad request body: ") + e.what());
    } catch (const std::exception& e) {
      return error(500, e.what());
    }
  }

  static ApiResponse error(int status, const std::string& message) {
    ojson j;
    j["schema_version"] = kApiSchema;
    j["error"] = {{"status", status}, {"message", message}};
    return {status, j};
  }

 private:
  static ApiResponse ok(ojson payload) {
    ojson j;
    j["schema_version"] = kApiSchema;
    for (auto& [k, v] : payload.items()) j[k] = v;
    return {200, j};
  }

  static std::string param(const std::map<std::string, std::string>& q, const std::string& k, const std::string& def) {
    auto it = q.find(k);
    return it == q.end() ? def : it->second;
  }

  const ExtractedHead& head_of(const std::string& name) const {
    if (!run_ || run_->heads.empty()) throw NotFoundError("run has no extracted features");
    return name.empty() ? run_->heads.front() : run_->head(name);
  }

  const ExtractedFeature& feature_of(const ExtractedHead& h, std::uint32_t id) const {
    const auto* f = h.find(id);
    if (!f || !f->rules) throw NotFoundError("feature " + std::to_string(id) + " has no rules");
    return *f;
  }

  ApiResponse features() const {
    std::vector<ojson> list;
    if (run_) {
      for (const auto& h : run_->heads)
        for (const auto& f : h.features) {
          if (!f.rules) continue;
          list.push_back({{"feature", f.feature},
                          {"layer", h.sel.layer},
                          {"head", h.sel.head},
                          {"active_sequence_count", f.active_sequences},
                          {"has_absence", f.rules->absence.has_value()},
                          {"has_counting", f.rules->counting.has_value()}});
        }
    }
    std::sort(list.begin(), list.end(), [](const ojson& a, const ojson& b) {
      return std::make_tuple(a["layer"].get<int>(), a["head"].get<int>(), a["feature"].get<std::uint32_t>()) <
             std::make_tuple(b["layer"].get<int>(), b["head"].get<int>(), b["feature"].get<std::uint32_t>());
    });
    return ok({{"features", list}});
  }

  /// Per-token activation and DFA for one exemplar; `scaled` is filled later.
  ojson exemplar_json(const ExtractedHead& h, const ExtractedFeature& f, const Exemplar& e, bool positive) const {
    const auto& seq = run_->corpus.at(e.seq);
    const TensorF32 x = embed(run_->model, seq);
    const auto& head = run_->model.head(h.sel.layer, h.sel.head).weights;
    const TensorF32 y = attention_forward(head, x).y;
    const auto d = dfa(head, h.sae_out.encoder.row(f.feature), x, e.pos);
    ojson tokens = ojson::array();
    for (std::size_t p = 0; p < seq.size(); ++p) {
      tokens.push_back({{"token", run_->model.token(seq.ids[p])},
                        {"activation", encode(h.sae_out, y.row(p))[f.feature]},
                        {"scaled", 0},
                        {"dfa", p <= e.pos ? d[p] : 0.0}});
    }
    return {{"seq", e.seq},
            {"target", e.pos},
            {"label", positive ? "positive" : "negative"},
            {"split", to_string(e.split)},
            {"activation", e.activation},
            {"tokens", tokens}};
  }

  /// scaled = round(100 * activation / max activation over the payload).
  static void scale(ojson& exemplars) {
    double mx = 0.0;
    for (const auto& ex : exemplars)
      for (const auto& t : ex["tokens"]) mx = std::max(mx, t["activation"].get<double>());
    for (auto& ex : exemplars)
      for (auto& t : ex["tokens"])
        t["scaled"] = mx > 0.0 ? static_cast<int>(std::lround(100.0 * t["activation"].get<double>() / mx)) : 0;
  }

  ApiResponse detail(std::uint32_t id, const std::string& head) const {
    const auto& h = head_of(head);
    const auto& f = feature_of(h, id);
    ojson metrics = ojson::array();
    for (const auto& r : metrics_)
      if (r["feature"] == id && r["layer"] == h.sel.layer && r["head"] == h.sel.head) metrics.push_back(r);
    ojson ex = ojson::array();
    if (f.dataset)
      for (std::size_t i = 0; i < std::min(opt_.exemplar_limit, f.dataset->positives.size()); ++i)
        ex.push_back(exemplar_json(h, f, f.dataset->positives[i], true));
    scale(ex);
    return ok({{"feature", id},
               {"layer", h.sel.layer},
               {"head", h.sel.head},
               {"active_sequence_count", f.active_sequences},
               {"ruleset", ruleset_to_json(*f.rules)},
               {"metrics", metrics},
               {"exemplars", ex}});
  }

  ApiResponse exemplars(std::uint32_t id, const std::string& head, const std::string& split) const {
    const auto& h = head_of(head);
    const auto& f = feature_of(h, id);
    const Split s = split_from_string(split);
    ojson ex = ojson::array();
    if (f.dataset) {
      for (const auto& e : f.dataset->positives)
        if (e.split == s) ex.push_back(exemplar_json(h, f, e, true));
      for (const auto& e : f.dataset->negatives)
        if (e.split == s) ex.push_back(exemplar_json(h, f, e, false));
    }
    scale(ex);
    return ok({{"feature", id}, {"split", split}, {"exemplars", ex}});
  }

  ApiResponse intervene(std::uint32_t id, const std::string& head, const std::string& body) const {
    const auto& h = head_of(head);
    const auto& f = feature_of(h, id);
    const auto req = body.empty() ? nlohmann::json::object() : nlohmann::json::parse(body);
    const std::size_t repeats = req.value("repeats", std::size_t{4});
    const std::size_t sample = req.value("sample", opt_.default_sample);
    if (repeats > opt_.max_repeats) {
      throw ConfigError("repeats " + std::to_string(repeats) + " exceeds the cap of " + std::to_string(opt_.max_repeats));
    }
    if (!f.dataset) throw NotFoundError("feature " + std::to_string(id) + " has no exemplars");
    const TokenId token = intervention_token(*run_, f, req.value("token", std::string()));
    const auto res = intervention_sweep(run_->model, h.sel, h.sae_out, *f.dataset, run_->corpus, token, repeats, sample);
    ojson seqs = ojson::array();
    for (std::size_t i = 0; i < res.seqs.size(); ++i) seqs.push_back({{"seq", res.seqs[i]}, {"activations", res.activations[i]}});
    return ok({{"feature", id},
               {"token", run_->model.token(token)},
               {"repeats", repeats},
               {"baseline", res.mean.at(0)},
               {"activations", res.mean},
               {"sequences", seqs}});
  }

  ApiResponse aggregate(const std::string& group) const {
    grouping_from_string(group);
    auto it = aggregates_.find(group);
    if (it == aggregates_.end()) throw NotFoundError("no evaluation reports in this run");
    ojson j = it->second;
    j["schema_version"] = kApiSchema;
    return {200, j};
  }

  ServerOptions opt_;
  std::optional<ExtractedRun> run_;
  std::vector<ojson> metrics_;
  std::map<std::string, ojson> aggregates_;
};

/// httplib front end for an ApiSession.
class ApiServer {
 public:
  explicit ApiServer(const ApiSession& session) : session_(session) {
    auto route = [this](const httplib::Request& req, httplib::Response& res) {
      std::map<std::string, std::string> q;
      for (const auto& [k, v] : req.params) q[k] = v;
      const auto r = session_.handle(req.method, req.path, q, req.body);
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json; charset=utf-8");
      spdlog::debug("{} {} -> {}", req.method, req.path, r.status);
    };
    server_.Get(".*", route);
    server_.Post(".*", route);
  }

  ~ApiServer() { stop(); }

  /// Binds and serves on a background thread; returns the bound port.
  int start(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return bound;
  }

  void wait() {
    if (thread_.joinable()) thread_.join();
  }

  void stop() {
    server_.stop();
    wait();
  }

 private:
  const ApiSession& session_;
  httplib::Server server_;
  std::thread thread_;
};

inline void cmd_serve(const RunConfig& cfg) {
  ServerOptions opt;
  opt.default_sample = cfg.count("server.sample");
  opt.max_repeats = cfg.count("server.max_repeats");
  const ApiSession session(cfg.run_dir(), opt);
  ApiServer server(session);
  const int port = server.start(cfg.str("server.host"), static_cast<int>(cfg.count("server.port")));
  spdlog::info("serving {} on http://{}:{}", cfg.run_dir().string(), cfg.str("server.host"), port);
  server.wait();
}

}  // namespace attnrules
