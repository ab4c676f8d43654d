#include "doctest.h"

#include "magic/digest.hpp"
#include "magic/service.hpp"
#include "support/fixtures.hpp"
#include "support/tempdir.hpp"

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <thread>

using namespace magic;
using magic::test::TempDir;
using nlohmann::json;

namespace {

// Checkpoints and corpora on disk, shared by every test in this file.
struct Assets {
  TempDir dir{"magic-service"};
  std::filesystem::path guided = dir / "guided";
  std::filesystem::path unguided = dir / "unguided";
  std::filesystem::path style = dir / "style";
  std::filesystem::path content_png = dir / "content.png";
  std::filesystem::path big_content_png = dir / "big.png";

  Assets() {
    magic::test::write_trained_checkpoint(guided, magic::test::tiny_train_config(true));
    magic::test::write_trained_checkpoint(unguided, magic::test::tiny_train_config(false));
    magic::test::write_corpus(style, magic::test::two_texture_corpus(48, 16));
    write_png(content_png, magic::test::gradient_corpus(16, 16).images[0]);
    write_png(big_content_png, crop(magic::test::gradient_corpus(40, 16).images[1], 0, 0, 40, 36));
  }
};

const Assets& assets() {
  static const Assets a;
  return a;
}

// Steppable clock for eviction tests.
struct FakeClock {
  std::shared_ptr<std::atomic<long>> minutes = std::make_shared<std::atomic<long>>(0);
  Clock::time_point now() const { return Clock::time_point(std::chrono::minutes(minutes->load())); }
};

ServiceOptions options(bool with_assets = true) {
  ServiceOptions o;
  if (with_assets) {
    o.checkpoints = {{"guided", assets().guided}, {"unguided", assets().unguided}};
    o.corpora = {{"textures", assets().style}};
  }
  return o;
}

// A running service plus a client bound to it.
struct Server {
  Service service;
  int port;
  httplib::Client client;

  explicit Server(ServiceOptions o = options())
      : service(std::move(o)), port(service.bind("127.0.0.1", 0)), client("127.0.0.1", port) {
    service.start();
  }
};

json parse(const httplib::Result& r) {
  REQUIRE(r);
  return json::parse(r->body);
}

json create(httplib::Client& c, const std::string& checkpoint, int k, int seed) {
  auto r = c.Post("/sessions", json{{"checkpoint", checkpoint}, {"corpus", "textures"}, {"k", k}, {"seed", seed}}.dump(),
                  "application/json");
  REQUIRE(r);
  REQUIRE(r->status == 201);
  return json::parse(r->body);
}

std::string file_text(const std::filesystem::path& p) {
  const auto bytes = read_file(p);
  return {bytes.begin(), bytes.end()};
}

httplib::Result put_content(httplib::Client& c, const std::string& id, const std::string& bytes) {
  httplib::MultipartFormDataItems items = {{"content", bytes, "content.png", "image/png"}};
  return c.Put("/sessions/" + id + "/content", items);
}

json infer(httplib::Client& c, const std::string& id) {
  auto r = c.Post("/sessions/" + id + "/infer");
  REQUIRE(r);
  CAPTURE(r->body.substr(0, 300));
  REQUIRE(r->status == 200);
  return json::parse(r->body);
}

Tensor4<float> image_field(const json& j, const std::string& name) {
  return decode_image(base64_decode(j.at("images").at(name).get<std::string>()));
}

void check_error(const httplib::Result& r, int status, const std::string& code) {
  REQUIRE(r);
  CHECK(r->status == status);
  const auto j = json::parse(r->body);
  CHECK(j.at("code") == code);
  CHECK(j.at("message").is_string());
}

double sum(const json& usage) {
  double s = 0;
  for (const auto& u : usage) s += u.get<double>();
  return s;
}

}  // namespace

TEST_CASE("service: empty registry lists nothing") {
  Server s(options(false));
  const auto r = s.client.Get("/assets");
  REQUIRE(r);
  CHECK(r->status == 200);
  const auto j = json::parse(r->body);
  CHECK(j.at("checkpoints").empty());
  CHECK(j.at("corpora").empty());
}

TEST_CASE("service: assets carry metadata and a stable hash") {
  Server s;
  const auto a = parse(s.client.Get("/assets"));
  const auto b = parse(s.client.Get("/assets"));
  CHECK(a == b);
  CHECK(a.at("hash").get<std::string>().size() == 64);
  REQUIRE(a.at("checkpoints").size() == 2);
  const auto& g = a.at("checkpoints")[0];
  CHECK(g.at("id") == "guided");
  CHECK(g.at("guided") == true);
  CHECK(g.at("patch_height") == 16);
  CHECK(g.at("depth") == 1);
  CHECK(g.at("iteration") == 2);
  CHECK(g.at("loss_weights").at("entropy").is_number());
  CHECK(a.at("checkpoints")[1].at("guided") == false);
  REQUIRE(a.at("corpora").size() == 1);
  CHECK(a.at("corpora")[0].at("images") == 2);
  CHECK(a.at("corpora")[0].at("thumbnails").size() == 2);
}

TEST_CASE("service: session creation") {
  Server s;
  const auto j = create(s.client, "guided", 3, 11);
  CHECK(j.at("k") == 3);
  REQUIRE(j.at("templates").size() == 3);
  const auto thumb = decode_image(base64_decode(j.at("templates")[0].at("thumbnail").get<std::string>()));
  CHECK(thumb.h() == 64);
  CHECK(j.at("lineage").size() == 1);
  CHECK(j.at("lineage")[0].at("op") == "create");
  CHECK(j.at("content").is_null());

  const auto again = create(s.client, "guided", 3, 11);
  CHECK(again.at("id") != j.at("id"));
  CHECK(again.at("provenance") == j.at("provenance"));
  CHECK(create(s.client, "guided", 3, 12).at("provenance") != j.at("provenance"));

  const auto fetched = parse(s.client.Get("/sessions/" + j.at("id").get<std::string>()));
  CHECK(fetched.at("provenance") == j.at("provenance"));
}

TEST_CASE("service: request errors are JSON") {
  Server s;
  auto post = [&](const json& body) { return s.client.Post("/sessions", body.dump(), "application/json"); };
  check_error(post({{"checkpoint", "nope"}, {"corpus", "textures"}, {"k", 2}}), 404, "not_found");
  check_error(post({{"checkpoint", "guided"}, {"corpus", "nope"}, {"k", 2}}), 404, "not_found");
  check_error(post({{"checkpoint", "guided"}, {"corpus", "textures"}, {"k", 0}}), 400, "validation");
  check_error(post({{"checkpoint", "guided"}}), 400, "validation");
  check_error(s.client.Post("/sessions", "{not json", "application/json"), 400, "bad_request");
  check_error(s.client.Get("/sessions/s999"), 404, "not_found");
  check_error(s.client.Post("/sessions/s999/infer"), 404, "not_found");
  check_error(s.client.Get("/no/such/route"), 404, "not_found");
}

TEST_CASE("service: resampling replaces exactly the chosen templates") {
  Server s;
  const auto j = create(s.client, "guided", 3, 5);
  const std::string id = j.at("id");
  const auto before = j.at("provenance");
  auto resample = [&](const json& body) {
    return s.client.Post("/sessions/" + id + "/resample", body.dump(), "application/json");
  };

  const auto same = parse(resample({{"indices", json::array()}}));
  CHECK(same.at("provenance") == before);
  CHECK(same.at("lineage").size() == 1);

  const auto one = parse(resample({{"indices", {0}}, {"seed", 77}}));
  CHECK(one.at("provenance")[0] != before[0]);
  CHECK(one.at("provenance")[1] == before[1]);
  CHECK(one.at("provenance")[2] == before[2]);
  CHECK(one.at("templates")[1].at("thumbnail") == j.at("templates")[1].at("thumbnail"));
  REQUIRE(one.at("lineage").size() == 2);
  CHECK(one.at("lineage")[1].at("seed") == 77);
  CHECK(one.at("lineage")[1].at("indices") == json{0});

  const auto all = parse(resample({{"indices", "all"}}));
  for (int i = 0; i < 3; ++i) CHECK(all.at("provenance")[i] != one.at("provenance")[i]);

  check_error(resample({{"indices", {3}}}), 400, "validation");
  check_error(resample({{"indices", {-1}}}), 400, "validation");
  check_error(resample({{"indices", "some"}}), 400, "validation");
  CHECK(parse(s.client.Get("/sessions/" + id)).at("provenance") == all.at("provenance"));

  // The lineage alone reproduces the memory set.
  std::vector<LineageStep> lineage;
  for (const auto& step : all.at("lineage")) {
    LineageStep l{step.at("op"), step.at("seed"), {}};
    if (step.contains("indices")) l.indices = step.at("indices").get<std::vector<Index>>();
    lineage.push_back(l);
  }
  const auto corpus = load_corpus(assets().style, 16, 16);
  CHECK(json(SessionStore::replay_lineage(corpus, 3, 16, 16, lineage)) == all.at("provenance"));
}

TEST_CASE("service: guided inference at patch size") {
  Server s;
  const std::string id = create(s.client, "guided", 3, 9).at("id");
  check_error(s.client.Post("/sessions/" + id + "/infer"), 400, "validation");

  const auto up = put_content(s.client, id, file_text(assets().content_png));
  REQUIRE(up);
  CHECK(up->status == 200);
  CHECK(json::parse(up->body).at("content").at("sha256") == sha256_file(assets().content_png));

  const auto out = infer(s.client, id);
  CHECK(out.at("height") == 16);
  CHECK(out.at("width") == 16);
  for (const char* name : {"refined", "collage", "weights"}) {
    CHECK(image_field(out, name).shape() == Shape4{1, 3, 16, 16});
  }
  REQUIRE(out.at("usage").size() == 3);
  CHECK(std::abs(sum(out.at("usage")) - 1.0) <= 1e-4);
  CHECK(out.at("lineage").size() == 1);
  CHECK(parse(s.client.Get("/sessions/" + id)).at("usage") == out.at("usage"));

  // Identical state, identical bytes.
  CHECK(infer(s.client, id).at("bundle_sha256") == out.at("bundle_sha256"));

  // Resampling one template regenerates the bundle.
  s.client.Post("/sessions/" + id + "/resample", json{{"indices", {1}}, {"seed", 4}}.dump(), "application/json");
  const auto after = infer(s.client, id);
  CHECK(after.at("bundle_sha256") != out.at("bundle_sha256"));
  CHECK(after.at("usage")[0] != out.at("usage")[0]);
  CHECK(std::abs(sum(after.at("usage")) - 1.0) <= 1e-4);
}

TEST_CASE("service: a singleton set reproduces its template") {
  Server s;
  const std::string id = create(s.client, "guided", 1, 2).at("id");
  REQUIRE(put_content(s.client, id, file_text(assets().content_png))->status == 200);
  const auto out = infer(s.client, id);
  CHECK(out.at("usage")[0].get<double>() == doctest::Approx(1.0).epsilon(1e-6));
  const auto corpus = load_corpus(assets().style, 16, 16);
  const auto tmpl = crop_from_provenance(corpus, out.at("provenance")[0]);
  const auto collage = image_field(out, "collage");
  REQUIRE(collage.shape() == tmpl.shape());
  for (Index i = 0; i < tmpl.size(); ++i) CHECK(std::abs(int(to_byte(collage[i])) - int(to_byte(tmpl[i]))) <= 1);
}

TEST_CASE("service: content larger than the patch is tiled") {
  Server s;
  const std::string id = create(s.client, "guided", 2, 3).at("id");
  REQUIRE(put_content(s.client, id, file_text(assets().big_content_png))->status == 200);
  const auto out = infer(s.client, id);
  CHECK(out.at("height") == 40);
  CHECK(out.at("width") == 36);
  CHECK(image_field(out, "refined").shape() == Shape4{1, 3, 40, 36});
  CHECK(std::abs(sum(out.at("usage")) - 1.0) <= 1e-4);
}

TEST_CASE("service: content validation") {
  Server s;
  const std::string id = create(s.client, "guided", 2, 3).at("id");
  check_error(put_content(s.client, id, "not an image"), 400, "validation");
  TempDir tmp;
  write_png(tmp / "small.png", magic::test::gradient_corpus(8, 8).images[0]);
  check_error(put_content(s.client, id, file_text(tmp / "small.png")), 400, "validation");
  check_error(s.client.Put("/sessions/" + id + "/content", "raw", "image/png"), 400, "validation");

  const std::string unguided = create(s.client, "unguided", 2, 3).at("id");
  check_error(put_content(s.client, unguided, file_text(assets().content_png)), 400, "validation");
  const auto out = infer(s.client, unguided);
  CHECK(out.at("height") == 16);
  CHECK(std::abs(sum(out.at("usage")) - 1.0) <= 1e-4);
}

TEST_CASE("service: multipart session creation with content") {
  Server s;
  httplib::MultipartFormDataItems items = {
      {"checkpoint", "guided", "", ""},
      {"corpus", "textures", "", ""},
      {"k", "2", "", ""},
      {"seed", "8", "", ""},
      {"content", file_text(assets().content_png), "content.png", "image/png"},
  };
  const auto r = s.client.Post("/sessions", items);
  REQUIRE(r);
  CHECK(r->status == 201);
  const auto j = json::parse(r->body);
  CHECK(j.at("seed") == 8);
  CHECK(j.at("content").at("height") == 16);
  CHECK(j.at("provenance") == create(s.client, "guided", 2, 8).at("provenance"));
}

TEST_CASE("service: sessions are isolated") {
  Server s;
  const std::string a = create(s.client, "guided", 3, 1).at("id");
  const std::string b = create(s.client, "guided", 3, 1).at("id");
  const auto b_before = parse(s.client.Get("/sessions/" + b));
  for (int i = 0; i < 3; ++i) {
    s.client.Post("/sessions/" + a + "/resample", json{{"indices", {i}}}.dump(), "application/json");
    put_content(s.client, a, file_text(assets().content_png));
    CHECK(parse(s.client.Get("/sessions/" + b)) == b_before);
  }
  CHECK(parse(s.client.Get("/sessions/" + a)).at("provenance") != b_before.at("provenance"));
}

TEST_CASE("service: concurrent inference on identical sessions returns identical bytes") {
  Server s;
  std::vector<std::string> ids;
  for (int i = 0; i < 4; ++i) {
    ids.push_back(create(s.client, "guided", 3, 21).at("id"));
    put_content(s.client, ids.back(), file_text(assets().content_png));
  }
  std::vector<std::string> hashes(ids.size());
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    threads.emplace_back([&, i] {
      httplib::Client c("127.0.0.1", s.port);
      const auto r = c.Post("/sessions/" + ids[i] + "/infer");
      if (r && r->status == 200) hashes[i] = json::parse(r->body).at("bundle_sha256");
    });
  }
  for (auto& t : threads) t.join();
  CHECK_FALSE(hashes[0].empty());
  for (const auto& h : hashes) CHECK(h == hashes[0]);
}

TEST_CASE("service: idle sessions are evicted") {
  FakeClock clock;
  auto o = options();
  o.clock = [clock] { return clock.now(); };
  Server s(std::move(o));
  const std::string idle = create(s.client, "guided", 2, 1).at("id");
  const std::string busy = create(s.client, "guided", 2, 1).at("id");
  *clock.minutes = 20;
  CHECK(parse(s.client.Get("/sessions/" + busy)).at("id") == busy);
  *clock.minutes = 31;
  CHECK(s.service.store().session_count() == 2);
  check_error(s.client.Get("/sessions/" + idle), 404, "not_found");
  CHECK(parse(s.client.Get("/sessions/" + busy)).at("id") == busy);
  *clock.minutes = 62;
  CHECK(s.service.store().evict_idle() == 1);
  CHECK(s.service.store().session_count() == 0);
}
