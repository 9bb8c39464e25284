#include <doctest.h>

#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "sheetcoder/service.hpp"
#include "support/toy_model.hpp"

using namespace sheetcoder;
using namespace sheetcoder::testing;
using nlohmann::json;

namespace {

std::shared_ptr<const Model> shared_model() {
    static auto model = [] {
        auto records = tiny_records();
        return std::make_shared<const Model>(tiny_config(), build_vocab(records, 1, 2));
    }();
    return model;
}

ServiceConfig small_service() {
    ServiceConfig c;
    c.beam = 8;
    c.top_k = 3;
    c.max_body_bytes = 64 * 1024;
    c.max_in_flight = 4;
    c.threads = 4;
    return c;
}

json grid_json() {
    std::mt19937_64 rng(11);
    auto sheet = col_aggregate_sheet("Scores", "Total", "SUM", 3, rng);
    return json::parse(serialize_grid_document({sheet}));
}

json request(const std::string& target, int top_k = 3) {
    return {{"grid", grid_json()}, {"sheet", "Scores"}, {"target", target}, {"top_k", top_k}};
}

json without_volatile(json body) {
    body.erase("request_id");
    body["diagnostics"].erase("latency_ms");
    return body;
}

}  // namespace

TEST_CASE("service config validation and environment overrides") {
    auto c = small_service();
    c.top_k = 9;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    CHECK(parse_bind_address("0.0.0.0:9000") == std::pair<std::string, int>{"0.0.0.0", 9000});
    CHECK(parse_bind_address(":81").first == "127.0.0.1");
    CHECK_THROWS(parse_bind_address("localhost"));
    CHECK_THROWS(parse_bind_address("h:70000"));

    setenv("SHEETCODER_BIND", "10.0.0.1:1234", 1);
    setenv("SHEETCODER_CHECKPOINT", "/tmp/x.ckpt", 1);
    ServiceConfig e;
    e.apply_env();
    CHECK(e.host == "10.0.0.1");
    CHECK(e.port == 1234);
    CHECK(e.checkpoint == "/tmp/x.ckpt");
    unsetenv("SHEETCODER_BIND");
    unsetenv("SHEETCODER_CHECKPOINT");
}

TEST_CASE("valid request returns ranked suggestions that re-parse to their streams") {
    PredictionService svc(shared_model(), small_service());
    auto body = request("B5");
    body["request_id"] = "abc-1";
    auto reply = svc.predict(body.dump());
    REQUIRE(reply.status == 200);
    CHECK(reply.body["request_id"] == "abc-1");
    const auto& sugg = reply.body["suggestions"];
    CHECK(sugg.size() <= 3);
    CHECK(reply.body["diagnostics"].contains("dropped_off_sheet"));
    CHECK(reply.body["diagnostics"].contains("latency_ms"));
    double prev = 0.0;
    for (size_t i = 0; i < sugg.size(); ++i) {
        double lp = sugg[i]["log_prob"];
        if (i) CHECK(lp <= prev);
        prev = lp;
        CHECK(sugg[i]["rank"] == i + 1);
        auto ir = ir_from_text(sugg[i]["stream"].get<std::string>());
        auto formula = sugg[i]["formula"].get<std::string>();
        CHECK_MESSAGE(to_ir(parse_formula(formula), CellAddr{5, 2}, 2) == ir, formula);
        CHECK(sugg[i]["ranges"].size() == ir.ranges.size());
    }
}

TEST_CASE("bad requests get 400 with a message") {
    PredictionService svc(shared_model(), small_service());
    auto outside = svc.predict(request("Z99").dump());
    CHECK(outside.status == 400);
    CHECK(outside.body["error"]["message"].get<std::string>().find("Z99") != std::string::npos);
    CHECK(outside.body.contains("request_id"));

    CHECK(svc.predict("{not json").status == 400);
    CHECK(svc.predict("[1,2]").status == 400);
    CHECK(svc.predict(R"({"grid":{"sheets":"x"},"target":"A1"})").status == 400);
    CHECK(svc.predict(request("B").dump()).status == 400);
    CHECK(svc.predict(request("B5", 0).dump()).status == 400);
    CHECK(svc.predict(request("B5", 9).dump()).status == 400);
    auto wrong_sheet = request("B5");
    wrong_sheet["sheet"] = "Nope";
    auto r = svc.predict(wrong_sheet.dump());
    CHECK(r.status == 400);
    CHECK(r.body["error"]["message"].get<std::string>().find("Nope") != std::string::npos);
}

TEST_CASE("an empty grid with an explicit extent is answered") {
    PredictionService svc(shared_model(), small_service());
    json req = {{"grid", {{"sheets", {{{"name", "S"}, {"frozen_rows", 1}, {"max_row", 50}, {"max_col", 26},
                                       {"cells", json::array()}}}}}},
                {"target", "C3"}};
    auto reply = svc.predict(req.dump());
    CHECK(reply.status == 200);
    CHECK(reply.body["suggestions"].size() <= 3);
}

TEST_CASE("oversize bodies get 413 and saturation gets 503") {
    auto cfg = small_service();
    cfg.max_body_bytes = 100;
    cfg.max_in_flight = 1;
    PredictionService svc(shared_model(), cfg);
    CHECK(svc.predict(std::string(101, ' ')).status == 413);

    auto held = svc.try_acquire();
    REQUIRE(held.has_value());
    CHECK_FALSE(svc.try_acquire().has_value());
    CHECK(svc.predict(R"({"target":"A1"})").status == 503);
    held.reset();
    CHECK(svc.predict(R"({"target":"A1"})").status == 400);
}

TEST_CASE("requests do not change the model") {
    auto model = shared_model();
    auto before = model->params().all().begin()->second.value;
    PredictionService svc(model, small_service());
    auto first = svc.predict(request("B5").dump());
    for (int i = 0; i < 3; ++i) svc.predict(request("B5").dump());
    auto last = svc.predict(request("B5").dump());
    CHECK(without_volatile(first.body) == without_volatile(last.body));
    CHECK(model->params().all().begin()->second.value == before);
}

TEST_CASE("live HTTP server: endpoints and concurrent identical requests") {
    PredictionService svc(shared_model(), small_service());
    HttpServer server(svc);
    int port = server.bind("127.0.0.1", 0);
    std::thread listener([&] { server.listen(); });
    server.wait_until_ready();

    httplib::Client client("127.0.0.1", port);
    auto health = client.Get("/v1/health");
    REQUIRE(health);
    CHECK(health->status == 200);
    CHECK(json::parse(health->body)["status"] == "ok");

    auto config = client.Get("/v1/config");
    REQUIRE(config);
    auto cj = json::parse(config->body);
    CHECK(cj["radius"] == 2);
    CHECK(cj["beam"] == 8);
    CHECK(cj["top_k_max"] == 8);

    const auto payload = request("B5").dump();
    std::vector<json> bodies(4);
    std::vector<int> statuses(4, 0);
    std::vector<std::thread> workers;
    for (int i = 0; i < 4; ++i) {
        workers.emplace_back([&, i] {
            httplib::Client c("127.0.0.1", port);
            auto res = c.Post("/v1/predict", payload, "application/json");
            if (!res) return;
            statuses[i] = res->status;
            bodies[i] = json::parse(res->body);
        });
    }
    for (auto& w : workers) w.join();
    for (int i = 0; i < 4; ++i) {
        CHECK(statuses[i] == 200);
        CHECK(without_volatile(bodies[i]) == without_volatile(bodies[0]));
    }
    std::set<std::string> ids;
    for (const auto& b : bodies) ids.insert(b["request_id"].get<std::string>());
    CHECK(ids.size() == 4);

    httplib::Headers headers{{"X-Request-Id", "hdr-7"}};
    auto echoed = client.Post("/v1/predict", headers, payload, "application/json");
    REQUIRE(echoed);
    CHECK(json::parse(echoed->body)["request_id"] == "hdr-7");

    auto outside = client.Post("/v1/predict", request("Z99").dump(), "application/json");
    REQUIRE(outside);
    CHECK(outside->status == 400);

    auto huge = client.Post("/v1/predict", std::string(70 * 1024, 'x'), "application/json");
    REQUIRE(huge);
    CHECK(huge->status == 413);

    auto missing = client.Get("/v1/nothing");
    REQUIRE(missing);
    CHECK(missing->status == 404);

    server.stop();
    listener.join();
}
