#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "sheetcoder/model.hpp"

namespace sheetcoder {

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::filesystem::path checkpoint;
    int beam = 64;
    int top_k = 5;  // default when a request omits top_k
    size_t max_body_bytes = 4u << 20;
    int max_in_flight = 8;
    int threads = 8;

    /// Throws std::invalid_argument on inconsistent settings (e.g. top_k > beam).
    void validate() const;
    /// SHEETCODER_BIND=host:port and SHEETCODER_CHECKPOINT=path take precedence.
    void apply_env();
    nlohmann::json to_json() const;
};

/// Parses "host:port" (or ":port"); throws std::invalid_argument.
std::pair<std::string, int> parse_bind_address(std::string_view text);

struct Reply {
    int status = 200;
    nlohmann::json body;
};

/// Request handling over a shared read-only model. Thread-safe; the only
/// mutable state is the in-flight counter.
class PredictionService {
public:
    PredictionService(std::shared_ptr<const Model> model, ServiceConfig config);

    /// RAII in-flight slot.
    class Slot {
    public:
        explicit Slot(std::atomic<int>* counter) : counter_(counter) {}
        Slot(Slot&& other) noexcept : counter_(std::exchange(other.counter_, nullptr)) {}
        Slot(const Slot&) = delete;
        Slot& operator=(const Slot&) = delete;
        Slot& operator=(Slot&&) = delete;
        ~Slot() {
            if (counter_) counter_->fetch_sub(1);
        }

    private:
        std::atomic<int>* counter_;
    };
    std::optional<Slot> try_acquire();

    /// POST /v1/predict. `header_request_id` is used when the body has none.
    Reply predict(std::string_view body, std::string_view header_request_id = {});
    Reply health() const;
    Reply config() const;
    /// Reply for an oversize body rejected before reaching predict().
    Reply payload_too_large() const;

    const ServiceConfig& settings() const { return config_; }
    const Model& model() const { return *model_; }

private:
    std::string next_request_id();

    std::shared_ptr<const Model> model_;
    ServiceConfig config_;
    std::atomic<int> in_flight_{0};
    std::atomic<uint64_t> request_counter_{0};
    uint64_t instance_tag_;
};

/// HTTP front end. bind() then listen() (blocking) from one thread, stop()
/// from any other.
class HttpServer {
public:
    explicit HttpServer(PredictionService& service);
    ~HttpServer();
    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    /// Returns the bound port; port 0 picks a free one. Throws on failure.
    int bind(const std::string& host, int port);
    /// Blocks until stop(). Returns false if the listener failed.
    bool listen();
    void stop();
    void wait_until_ready() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// Loads the checkpoint, binds and serves until the process is interrupted.
int run_server(ServiceConfig config, std::ostream& log);

}  // namespace sheetcoder
