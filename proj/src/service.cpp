#include "sheetcoder/service.hpp"

#include <chrono>
#include <csignal>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include <httplib.h>

#include "sheetcoder/predict.hpp"

namespace sheetcoder {

using nlohmann::json;

void ServiceConfig::validate() const {
    if (beam < 1) throw std::invalid_argument("beam must be at least 1");
    if (top_k < 1 || top_k > beam) {
        throw std::invalid_argument("top_k (" + std::to_string(top_k) + ") must lie in [1, beam=" +
                                    std::to_string(beam) + "]");
    }
    if (port < 0 || port > 65535) throw std::invalid_argument("port out of range");
    if (max_body_bytes == 0) throw std::invalid_argument("max_body_bytes must be positive");
    if (max_in_flight < 1) throw std::invalid_argument("max_in_flight must be at least 1");
    if (threads < 1) throw std::invalid_argument("threads must be at least 1");
}

std::pair<std::string, int> parse_bind_address(std::string_view text) {
    auto colon = text.rfind(':');
    if (colon == std::string_view::npos) throw std::invalid_argument("bind address must be host:port");
    std::string host(text.substr(0, colon));
    std::string port_text(text.substr(colon + 1));
    if (host.empty()) host = "127.0.0.1";
    size_t used = 0;
    int port = -1;
    try {
        port = std::stoi(port_text, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != port_text.size() || port_text.empty() || port < 0 || port > 65535) {
        throw std::invalid_argument("bad port in bind address '" + std::string(text) + "'");
    }
    return {host, port};
}

void ServiceConfig::apply_env() {
    if (const char* bind = std::getenv("SHEETCODER_BIND"); bind && *bind) {
        std::tie(host, port) = parse_bind_address(bind);
    }
    if (const char* ckpt = std::getenv("SHEETCODER_CHECKPOINT"); ckpt && *ckpt) checkpoint = ckpt;
}

json ServiceConfig::to_json() const {
    return {{"host", host},          {"port", port},
            {"checkpoint", checkpoint.string()}, {"beam", beam},
            {"top_k", top_k},        {"max_body_bytes", max_body_bytes},
            {"max_in_flight", max_in_flight}, {"threads", threads}};
}

namespace {

std::string hex64(uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

Reply error_reply(int status, const std::string& request_id, const std::string& code, const std::string& message) {
    json body = {{"error", {{"code", code}, {"message", message}}}};
    if (!request_id.empty()) body["request_id"] = request_id;
    return {status, std::move(body)};
}

struct BadRequest : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace

PredictionService::PredictionService(std::shared_ptr<const Model> model, ServiceConfig config)
    : model_(std::move(model)), config_(std::move(config)) {
    if (!model_) throw std::invalid_argument("service needs a model");
    config_.validate();
    instance_tag_ = std::random_device{}();
}

std::optional<PredictionService::Slot> PredictionService::try_acquire() {
    int current = in_flight_.load();
    while (current < config_.max_in_flight) {
        if (in_flight_.compare_exchange_weak(current, current + 1)) return Slot(&in_flight_);
    }
    return std::nullopt;
}

std::string PredictionService::next_request_id() {
    return "req-" + hex64(instance_tag_).substr(8) + "-" + std::to_string(++request_counter_);
}

Reply PredictionService::payload_too_large() const {
    return error_reply(413, "", "payload_too_large",
                       "request body exceeds " + std::to_string(config_.max_body_bytes) + " bytes");
}

Reply PredictionService::predict(std::string_view body, std::string_view header_request_id) {
    auto started = std::chrono::steady_clock::now();
    if (body.size() > config_.max_body_bytes) return payload_too_large();
    auto slot = try_acquire();
    std::string request_id(header_request_id);
    if (!slot) {
        if (request_id.empty()) request_id = next_request_id();
        return error_reply(503, request_id, "busy", "too many requests in flight; retry later");
    }
    try {
        json request;
        try {
            request = json::parse(body);
        } catch (const json::parse_error& e) {
            if (request_id.empty()) request_id = next_request_id();
            return error_reply(400, request_id, "malformed_request", std::string("request body is not JSON: ") + e.what());
        }
        if (request.is_object()) {
            if (auto it = request.find("request_id"); it != request.end() && it->is_string() &&
                                                      !it->get<std::string>().empty()) {
                request_id = it->get<std::string>().substr(0, 128);
            }
        }
        if (request_id.empty()) request_id = next_request_id();

        try {
            if (!request.is_object()) throw BadRequest("request body must be a JSON object");
            auto grid_it = request.find("grid");
            if (grid_it == request.end()) throw BadRequest("request needs a 'grid' document");
            std::vector<Sheet> sheets;
            try {
                sheets = parse_grid_document(grid_it->is_string() ? grid_it->get<std::string>() : grid_it->dump());
            } catch (const ParseError& e) {
                throw BadRequest(std::string("malformed grid: ") + e.what());
            }
            if (sheets.empty()) throw BadRequest("malformed grid: document has no sheets");
            const Sheet* sheet = &sheets.front();
            if (auto it = request.find("sheet"); it != request.end() && !it->is_null()) {
                if (!it->is_string()) throw BadRequest("'sheet' must be a string");
                auto name = it->get<std::string>();
                sheet = nullptr;
                for (const auto& s : sheets) {
                    if (s.name() == name) sheet = &s;
                }
                if (!sheet) throw BadRequest("unknown sheet '" + name + "'");
            }
            auto target_it = request.find("target");
            if (target_it == request.end() || !target_it->is_string()) {
                throw BadRequest("request needs a 'target' A1 cell address");
            }
            auto target_text = target_it->get<std::string>();
            CellAddr target;
            try {
                target = parse_cell_addr(target_text);
            } catch (const std::exception&) {
                throw BadRequest("malformed target '" + target_text + "'");
            }
            int top_k = config_.top_k;
            if (auto it = request.find("top_k"); it != request.end() && !it->is_null()) {
                if (!it->is_number_integer()) throw BadRequest("'top_k' must be an integer");
                top_k = it->get<int>();
            }
            if (top_k < 1 || top_k > config_.beam) {
                throw BadRequest("top_k must lie in [1, " + std::to_string(config_.beam) + "], got " +
                                 std::to_string(top_k));
            }
            if (!sheet->contains(target)) {
                throw BadRequest("target " + target_text + " is outside the bounds of sheet '" + sheet->name() +
                                 "' (" + std::to_string(sheet->max_row()) + " rows x " +
                                 std::to_string(sheet->max_col()) + " cols)");
            }

            auto out = sheetcoder::predict(*model_, *sheet, target, top_k, config_.beam);
            json suggestions = json::array();
            for (const auto& s : out.suggestions) suggestions.push_back(s.to_json());
            double latency_ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
            json diagnostics = {{"dropped_off_sheet", out.dropped_off_sheet},
                                {"latency_ms", latency_ms},
                                {"beam", config_.beam},
                                {"top_k", top_k}};
            if (!out.diagnostic.empty()) diagnostics["note"] = out.diagnostic;
            return {200, {{"request_id", request_id}, {"suggestions", std::move(suggestions)},
                          {"diagnostics", std::move(diagnostics)}}};
        } catch (const BadRequest& e) {
            return error_reply(400, request_id, "bad_request", e.what());
        }
    } catch (const std::exception& e) {
        auto error_id = "err-" + hex64(std::random_device{}() ^ (uint64_t(std::random_device{}()) << 32));
        std::cerr << "[serve] " << error_id << " request " << request_id << ": " << e.what() << "\n";
        return error_reply(500, request_id, "internal", "internal error; reference " + error_id);
    }
}

Reply PredictionService::health() const {
    return {200, {{"status", "ok"}, {"in_flight", in_flight_.load()}}};
}

Reply PredictionService::config() const {
    const auto& mc = model_->config();
    return {200,
            {{"radius", mc.radius},
             {"beam", config_.beam},
             {"top_k_default", config_.top_k},
             {"top_k_max", config_.beam},
             {"max_body_bytes", config_.max_body_bytes},
             {"max_in_flight", config_.max_in_flight},
             {"rows_per_bundle", mc.rows_per_bundle},
             {"two_stage", mc.two_stage},
             {"use_context", mc.use_context}}};
}

// ---------------------------------------------------------------------------

struct HttpServer::Impl {
    PredictionService& service;
    httplib::Server server;

    explicit Impl(PredictionService& s) : service(s) {}

    static void send(httplib::Response& res, const Reply& reply) {
        res.status = reply.status;
        res.set_content(reply.body.dump(), "application/json");
    }
};

HttpServer::HttpServer(PredictionService& service) : impl_(std::make_unique<Impl>(service)) {
    auto& srv = impl_->server;
    auto& svc = impl_->service;
    const auto& cfg = svc.settings();
    int threads = cfg.threads;
    srv.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<size_t>(threads)); };
    srv.set_payload_max_length(cfg.max_body_bytes);
    srv.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                             {"Access-Control-Allow-Headers", "Content-Type, X-Request-Id"},
                             {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    srv.Post("/v1/predict", [&svc](const httplib::Request& req, httplib::Response& res) {
        Impl::send(res, svc.predict(req.body, req.get_header_value("X-Request-Id")));
    });
    srv.Get("/v1/health", [&svc](const httplib::Request&, httplib::Response& res) { Impl::send(res, svc.health()); });
    srv.Get("/v1/config", [&svc](const httplib::Request&, httplib::Response& res) { Impl::send(res, svc.config()); });
    srv.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    srv.set_error_handler([&svc](const httplib::Request&, httplib::Response& res) {
        if (!res.body.empty()) return;
        if (res.status == 413) {
            Impl::send(res, svc.payload_too_large());
        } else {
            res.set_content(json{{"error", {{"code", "http_" + std::to_string(res.status)},
                                            {"message", httplib::status_message(res.status)}}}}
                                .dump(),
                            "application/json");
        }
    });
    srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr) {
        res.status = 500;
        res.set_content(R"({"error":{"code":"internal","message":"internal error"}})", "application/json");
    });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
    int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    return bound;
}

bool HttpServer::listen() { return impl_->server.listen_after_bind(); }

void HttpServer::stop() {
    if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

void HttpServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

namespace {
HttpServer* g_running = nullptr;
extern "C" void on_signal(int) {
    if (g_running) g_running->stop();
}
}  // namespace

int run_server(ServiceConfig config, std::ostream& log) {
    config.apply_env();
    config.validate();
    if (config.checkpoint.empty()) throw std::invalid_argument("serve needs a checkpoint (--checkpoint or SHEETCODER_CHECKPOINT)");
    auto model = std::make_shared<const Model>(Model::load(config.checkpoint));
    PredictionService service(model, config);
    HttpServer server(service);
    int port = server.bind(config.host, config.port);
    log << "serving " << config.checkpoint.string() << " on http://" << config.host << ":" << port
        << " (beam " << config.beam << ", radius " << model->config().radius << ")" << std::endl;
    g_running = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    bool ok = server.listen();
    g_running = nullptr;
    return ok ? 0 : 1;
}

}  // namespace sheetcoder
