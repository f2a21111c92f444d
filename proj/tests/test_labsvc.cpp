#include <atomic>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "ignitrace/labsvc.hpp"
#include "ignitrace/synthgen.hpp"
#include "json.hpp"
#include "support.hpp"

using namespace ignitrace;
using namespace ignitrace::labsvc;
using json = nlohmann::json;

namespace {

struct Fixture {
  testing::TempDir dir{"labsvc"};
  std::vector<ManifestRow> rows;

  Fixture() {
    synth::Census c;
    c[{Atmosphere::AIR20, SizeClass::A}] = 2;
    c[{Atmosphere::OXY30, SizeClass::B}] = 1;
    rows = synth::gen_dataset(synth::ConditionTable::calibrated(), c, 7, dir / "data");
  }

  ServiceConfig config() const {
    ServiceConfig cfg;
    cfg.dataset_dir = dir / "data";
    cfg.labels_path = dir / "labels.jsonl";
    cfg.clock = [] { return std::int64_t{1700000000000}; };
    return cfg;
  }
};

HttpResponse get(LabelService& s, const std::string& path, std::map<std::string, std::string> q = {}) {
  return s.handle("GET", path, q, "");
}

HttpResponse post_label(LabelService& s, const std::string& id, const std::string& body) {
  return s.handle("POST", "/events/" + id + "/label", {}, body);
}

}  // namespace

TEST_SUITE("labsvc") {
  TEST_CASE("percentile interpolates order statistics") {
    CHECK(percentile({10, 20, 30, 40, 50}, 0) == 10);
    CHECK(percentile({10, 20, 30, 40, 50}, 100) == 50);
    CHECK(percentile({10, 20, 30, 40, 50}, 50) == 30);
    CHECK(percentile({50, 10, 40, 20, 30}, 12.5) == doctest::Approx(15));
    CHECK(percentile({7}, 33) == 7);
    CHECK_THROWS(percentile({}, 50));
    CHECK_THROWS(percentile({1, 2}, 101));
  }

  TEST_CASE("render_gray maps the percentile range onto 0..255") {
    Frame f(4, 1, std::vector<std::uint16_t>{100, 200, 300, 400});
    const auto g = render_gray(f, {0, 100});
    CHECK(g.at(0, 0) == 0);
    CHECK(g.at(3, 0) == 255);
    CHECK(g.at(1, 0) == 85);
    CHECK(g.at(2, 0) == 170);

    const auto flat = render_gray(Frame(3, 3, 500));
    for (auto v : flat.data()) CHECK(v == 128);

    Frame spike(10, 10, 100);
    spike.at(5, 5) = 60000;
    const auto s = render_gray(spike, {0, 100});
    CHECK(s.at(5, 5) == 255);
    CHECK(s.at(0, 0) == 0);
    CHECK(render_gray(spike, {0, 50}).at(5, 5) == 128);  // both percentiles hit the background
    CHECK_THROWS(render_gray(f, {60, 40}));
  }

  TEST_CASE("png encoding") {
    Image<std::uint8_t> img(5, 3, 77);
    const auto png = encode_png(img);
    REQUIRE(png.size() > 8);
    CHECK(png.substr(0, 8) == std::string("\x89PNG\r\n\x1a\n", 8));
    CHECK(png.find("IHDR") != std::string::npos);
    CHECK(png.find("IEND") != std::string::npos);
    CHECK(encode_png(img) == png);
    img.at(1, 1) = 3;
    CHECK(encode_png(img) != png);
  }

  TEST_CASE("label store replays and keeps the last write") {
    testing::TempDir dir("store");
    {
      LabelStore s(dir / "l.jsonl");
      CHECK(s.log_size() == 0);
      s.append({"e1", 10, "ann", 1});
      s.append({"e2", std::nullopt, "ann", 2});
      s.append({"e1", 12, "bob", 3});
      CHECK(s.current("e1")->ignition_frame == 12);
      CHECK(s.current().size() == 2);
    }
    LabelStore again(dir / "l.jsonl");
    CHECK(again.log_size() == 3);
    CHECK(again.current("e1")->labeler == "bob");
    CHECK_FALSE(again.current("e2")->ignition_frame.has_value());
    CHECK_FALSE(again.current("e3").has_value());
    const auto text = testing::slurp(dir / "l.jsonl");
    CHECK(std::count(text.begin(), text.end(), '\n') == 3);
  }

  TEST_CASE("concurrent appends are all logged") {
    testing::TempDir dir("store_mt");
    LabelStore s(dir / "l.jsonl");
    std::vector<std::thread> ts;
    for (int t = 0; t < 4; ++t) {
      ts.emplace_back([&s, t] {
        for (int i = 0; i < 50; ++i) s.append({"e" + std::to_string(i % 5), i, "t" + std::to_string(t), i});
      });
    }
    for (auto& t : ts) t.join();
    CHECK(s.log_size() == 200);
    CHECK(LabelStore(dir / "l.jsonl").log_size() == 200);
    CHECK(read_labels(dir / "l.jsonl").size() == 200);
  }

  TEST_CASE("service routes") {
    Fixture fx;
    LabelService svc(fx.config());
    const auto& id = fx.rows[0].event_id;

    auto ev = get(svc, "/events");
    REQUIRE(ev.status == 200);
    const auto list = json::parse(ev.body);
    CHECK(list.size() == 3);
    CHECK(list[0]["labeled"] == false);

    auto meta = get(svc, "/events/" + id + "/meta");
    REQUIRE(meta.status == 200);
    const auto mj = json::parse(meta.body);
    CHECK(mj["n_frames"] == fx.rows[0].n_frames);
    CHECK(mj["label"].is_null());
    CHECK(mj["track"]["n_entries"] == fx.rows[0].n_frames);

    auto png = get(svc, "/events/" + id + "/frames/3.png");
    CHECK(png.status == 200);
    CHECK(png.content_type == "image/png");
    CHECK(png.body.substr(1, 3) == "PNG");
    CHECK(get(svc, "/events/" + id + "/frames/3.png", {{"plo", "5"}, {"phi", "95"}}).body != png.body);
    CHECK(get(svc, "/events/" + id + "/frames/3.png", {{"plo", "90"}, {"phi", "10"}}).status == 422);
    CHECK(get(svc, "/events/" + id + "/frames/99999.png").status == 422);

    auto track = get(svc, "/events/" + id + "/track");
    REQUIRE(track.status == 200);
    CHECK(json::parse(track.body).size() == static_cast<std::size_t>(fx.rows[0].n_frames));

    CHECK(get(svc, "/events/nope/meta").status == 404);
    CHECK(get(svc, "/nowhere").status == 404);
    CHECK(svc.handle("DELETE", "/events", {}, "").status == 404);
  }

  TEST_CASE("label posting") {
    Fixture fx;
    LabelService svc(fx.config());
    const auto& id = fx.rows[0].event_id;

    CHECK(post_label(svc, id, "not json").status == 422);
    CHECK(post_label(svc, id, R"({"ignition_frame": 3})").status == 422);
    CHECK(post_label(svc, id, R"({"ignition_frame": 3, "labeler": ""})").status == 422);
    CHECK(post_label(svc, id, R"({"ignition_frame": 2.5, "labeler": "a"})").status == 422);
    CHECK(post_label(svc, id, R"({"ignition_frame": -1, "labeler": "a"})").status == 422);
    CHECK(post_label(svc, id, R"({"ignition_frame": 100000, "labeler": "a"})").status == 422);
    CHECK(post_label(svc, "nope", R"({"ignition_frame": 3, "labeler": "a"})").status == 404);
    CHECK(svc.store().log_size() == 0);

    auto r = post_label(svc, id, R"({"ignition_frame": 31, "labeler": "ann"})");
    REQUIRE(r.status == 200);
    const auto j = json::parse(r.body);
    CHECK(j["ignition_frame"] == 31);
    CHECK(j["unix_ms"] == 1700000000000);
    CHECK(post_label(svc, fx.rows[1].event_id, R"({"ignition_frame": null, "labeler": "ann"})").status == 200);
    CHECK(post_label(svc, id, R"({"ignition_frame": 33, "labeler": "bob"})").status == 200);

    const auto prog = json::parse(get(svc, "/progress").body);
    CHECK(prog["labeled"] == 2);
    CHECK(prog["total"] == 3);
    CHECK(json::parse(get(svc, "/events/" + id + "/meta").body)["label"]["ignition_frame"] == 33);

    const auto labels = get(svc, "/labels");
    CHECK(labels.content_type == "application/x-ndjson");
    CHECK(std::count(labels.body.begin(), labels.body.end(), '\n') == 3);
  }

  TEST_CASE("labels persist across restarts") {
    Fixture fx;
    const auto& id = fx.rows[2].event_id;
    {
      LabelService svc(fx.config());
      CHECK(post_label(svc, id, R"({"ignition_frame": 20, "labeler": "ann"})").status == 200);
    }
    LabelService again(fx.config());
    CHECK(again.store().current(id)->ignition_frame == 20);
    const auto list = json::parse(get(again, "/events").body);
    int labeled = 0;
    for (const auto& e : list) labeled += e["labeled"].get<bool>() ? 1 : 0;
    CHECK(labeled == 1);
  }

  TEST_CASE("missing dataset is an error") {
    testing::TempDir dir("nodata");
    ServiceConfig cfg;
    cfg.dataset_dir = dir / "absent";
    cfg.labels_path = dir / "l.jsonl";
    cfg.clock = [] { return std::int64_t{0}; };
    CHECK_THROWS(LabelService(cfg));
  }

  TEST_CASE("real HTTP round trip") {
    Fixture fx;
    LabelService svc(fx.config());
    HttpServer server(svc);
    const int port = server.bind("127.0.0.1", 0);
    REQUIRE(port > 0);
    std::thread th([&] { server.listen(); });

    httplib::Client cli("127.0.0.1", port);
    cli.set_connection_timeout(5);
    const auto& id = fx.rows[0].event_id;

    auto ev = cli.Get("/events");
    REQUIRE(ev);
    CHECK(ev->status == 200);
    CHECK(ev->get_header_value("Access-Control-Allow-Origin") == "*");
    CHECK(json::parse(ev->body).size() == 3);

    auto png = cli.Get(("/events/" + id + "/frames/0.png?plo=2&phi=98").c_str());
    REQUIRE(png);
    CHECK(png->status == 200);
    CHECK(png->get_header_value("Content-Type") == "image/png");

    auto bad = cli.Get(("/events/" + id + "/frames/0.png?plo=50&phi=10").c_str());
    REQUIRE(bad);
    CHECK(bad->status == 422);

    auto post = cli.Post(("/events/" + id + "/label").c_str(), R"({"ignition_frame": 12, "labeler": "ann"})",
                         "application/json");
    REQUIRE(post);
    CHECK(post->status == 200);

    auto pre = cli.Options(("/events/" + id + "/label").c_str());
    REQUIRE(pre);
    CHECK(pre->status == 204);
    CHECK(pre->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);

    auto missing = cli.Get("/events/zzz/track");
    REQUIRE(missing);
    CHECK(missing->status == 404);

    server.stop();
    th.join();

    LabelStore replay(fx.config().labels_path);
    CHECK(replay.current(id)->ignition_frame == 12);
  }
}
