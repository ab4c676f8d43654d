#include "magic/service.hpp"

#include "magic/digest.hpp"
#include "magic/generator.hpp"
#include "magic/image_io.hpp"
#include "magic/rollout.hpp"

#include <httplib.h>

#include <algorithm>
#include <charconv>

namespace magic {

using nlohmann::json;

namespace {

ServiceError not_found(const std::string& what) { return {404, "not_found", what}; }
ServiceError invalid(const std::string& what) { return {400, "validation", what}; }

std::string png_base64(const Tensor4<float>& image) { return base64_encode(encode_png(image)); }

Tensor4<float> thumbnail(const Tensor4<float>& image, Index size) {
  const Index h = size;
  const Index w = std::max<Index>(1, (image.w() * size + image.h() / 2) / image.h());
  return resize_bilinear(image, h, w);
}

json weights_json(const LossWeights& w) {
  return {{"content", w.content}, {"tv", w.tv}, {"entropy", w.entropy}, {"max_usage", w.max_usage}};
}

// Draws fresh templates for `indices` from one seeded stream, in ascending index order.
void apply_step(const Corpus& corpus, Index K, Index h, Index w, const LineageStep& step,
                std::vector<std::string>& provenance) {
  Rng rng(derive_seed(step.seed, 0));
  if (step.op == "create") {
    provenance = sample_memory_set(corpus, K, h, w, rng).source_ids;
    return;
  }
  for (Index i : step.indices) provenance[std::size_t(i)] = sample_patch(corpus, h, w, rng).provenance;
}

}  // namespace

SessionStore::SessionStore(ServiceOptions options) : options_(std::move(options)) {
  Index patch = 0;
  for (const auto& [id, path] : options_.checkpoints) {
    if (checkpoints_.count(id)) throw ConfigError("duplicate checkpoint id " + id);
    auto loaded = load_checkpoint(path);
    patch = std::max({patch, loaded.config.patch_h, loaded.config.patch_w});
    checkpoints_.emplace(id, RegisteredCheckpoint{id, path, loaded.config, loaded.state.iteration,
                                                  std::move(loaded.state.generator)});
  }
  if (patch == 0) patch = 64;
  for (const auto& [id, path] : options_.corpora) {
    if (corpora_.count(id)) throw ConfigError("duplicate corpus id " + id);
    corpora_.emplace(id, RegisteredCorpus{id, path, load_corpus(path, patch, patch)});
  }
}

const RegisteredCheckpoint& SessionStore::checkpoint(const std::string& id) const {
  const auto it = checkpoints_.find(id);
  if (it == checkpoints_.end()) throw not_found("unknown checkpoint '" + id + "'");
  return it->second;
}

const RegisteredCorpus& SessionStore::corpus(const std::string& id) const {
  const auto it = corpora_.find(id);
  if (it == corpora_.end()) throw not_found("unknown corpus '" + id + "'");
  return it->second;
}

json SessionStore::list_assets() const {
  json out = {{"checkpoints", json::array()}, {"corpora", json::array()}};
  for (const auto& [id, c] : checkpoints_) {
    const auto& g = c.config.generator;
    out["checkpoints"].push_back({{"id", id},
                                  {"patch_height", c.config.patch_h},
                                  {"patch_width", c.config.patch_w},
                                  {"depth", g.blend.depth},
                                  {"guided", g.guided},
                                  {"warping", g.warping},
                                  {"iteration", c.iteration},
                                  {"k_range", {c.config.k_range.min, c.config.k_range.max}},
                                  {"loss_weights", weights_json(c.config.weights)}});
  }
  for (const auto& [id, c] : corpora_) {
    json thumbs = json::array();
    for (const auto& img : c.corpus.images) thumbs.push_back(png_base64(thumbnail(img, options_.thumbnail_size)));
    out["corpora"].push_back({{"id", id}, {"images", c.corpus.size()}, {"names", c.corpus.ids}, {"thumbnails", thumbs}});
  }
  out["hash"] = sha256_hex(std::string_view(out.dump()));
  return out;
}

std::vector<std::string> SessionStore::replay_lineage(const Corpus& corpus, Index K, Index h, Index w,
                                                      const std::vector<LineageStep>& lineage) {
  std::vector<std::string> provenance;
  for (const auto& step : lineage) apply_step(corpus, K, h, w, step, provenance);
  return provenance;
}

json SessionStore::describe(const Session& s) const {
  const auto& c = corpus(s.corpus);
  json lineage = json::array();
  for (const auto& step : s.lineage) {
    json j = {{"op", step.op}, {"seed", step.seed}};
    if (step.op == "resample") j["indices"] = step.indices;
    lineage.push_back(std::move(j));
  }
  json templates = json::array();
  for (std::size_t i = 0; i < s.provenance.size(); ++i) {
    const auto img = crop_from_provenance(c.corpus, s.provenance[i]);
    templates.push_back({{"index", i},
                         {"provenance", s.provenance[i]},
                         {"thumbnail", png_base64(thumbnail(img, options_.thumbnail_size))}});
  }
  json out = {{"id", s.id},     {"checkpoint", s.checkpoint}, {"corpus", s.corpus},
              {"k", s.K},       {"seed", s.seed},             {"lineage", lineage},
              {"provenance", s.provenance}, {"templates", templates}};
  out["content"] = s.content ? json{{"height", s.content->h()}, {"width", s.content->w()}, {"sha256", s.content_sha256}}
                             : json(nullptr);
  out["usage"] = s.usage ? json(*s.usage) : json(nullptr);
  return out;
}

void SessionStore::apply_content(Session& s, const std::vector<std::uint8_t>& bytes) const {
  const auto& ck = checkpoint(s.checkpoint);
  if (!ck.config.generator.guided) throw invalid("checkpoint '" + ck.id + "' is unguided and takes no content");
  Tensor4<float> img;
  try {
    img = decode_image(bytes);
  } catch (const IoError& e) {
    throw invalid(std::string("content is not a readable PNG/JPEG: ") + e.what());
  }
  if (img.h() < ck.config.patch_h || img.w() < ck.config.patch_w) {
    throw invalid("content " + std::to_string(img.h()) + "x" + std::to_string(img.w()) +
                  " is smaller than the checkpoint patch " + std::to_string(ck.config.patch_h) + "x" +
                  std::to_string(ck.config.patch_w));
  }
  s.content = std::move(img);
  s.content_sha256 = sha256_hex(bytes);
  s.usage.reset();
}

std::size_t SessionStore::evict_idle() {
  const auto now = options_.clock();
  std::lock_guard lock(sessions_mutex_);
  std::size_t removed = 0;
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    std::unique_lock session_lock(it->second->mutex, std::try_to_lock);
    if (session_lock.owns_lock() && now - it->second->last_used > options_.idle_timeout) {
      session_lock.unlock();
      it = sessions_.erase(it);
      ++removed;
    } else {
      ++it;
    }
  }
  return removed;
}

std::size_t SessionStore::session_count() const {
  std::lock_guard lock(sessions_mutex_);
  return sessions_.size();
}

std::shared_ptr<Session> SessionStore::find(const std::string& id) {
  evict_idle();
  std::lock_guard lock(sessions_mutex_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw not_found("unknown session '" + id + "'");
  return it->second;
}

json SessionStore::create_session(const std::string& checkpoint_id, const std::string& corpus_id, Index K,
                                  std::uint64_t seed, const std::vector<std::uint8_t>* content) {
  evict_idle();
  const auto& ck = checkpoint(checkpoint_id);
  const auto& c = corpus(corpus_id);
  if (K < 1) throw invalid("k must be at least 1");
  auto s = std::make_shared<Session>();
  s->checkpoint = checkpoint_id;
  s->corpus = corpus_id;
  s->K = K;
  s->seed = seed;
  s->lineage.push_back({"create", seed, {}});
  s->provenance = replay_lineage(c.corpus, K, ck.config.patch_h, ck.config.patch_w, s->lineage);
  if (content) apply_content(*s, *content);
  s->last_used = options_.clock();
  std::lock_guard lock(sessions_mutex_);
  s->id = "s" + std::to_string(next_id_++);
  sessions_.emplace(s->id, s);
  return describe(*s);
}

json SessionStore::get_session(const std::string& id) {
  auto s = find(id);
  std::lock_guard lock(s->mutex);
  s->last_used = options_.clock();
  return describe(*s);
}

json SessionStore::resample(const std::string& id, const std::vector<Index>& indices, bool all,
                            std::optional<std::uint64_t> seed) {
  auto s = find(id);
  std::lock_guard lock(s->mutex);
  s->last_used = options_.clock();
  std::vector<Index> chosen;
  if (all) {
    for (Index i = 0; i < s->K; ++i) chosen.push_back(i);
  } else {
    for (Index i : indices) {
      if (i < 0 || i >= s->K) throw invalid("template index " + std::to_string(i) + " out of range for k=" + std::to_string(s->K));
    }
    chosen = indices;
    std::sort(chosen.begin(), chosen.end());
    chosen.erase(std::unique(chosen.begin(), chosen.end()), chosen.end());
  }
  if (chosen.empty()) return describe(*s);
  const auto& ck = checkpoint(s->checkpoint);
  LineageStep step{"resample", seed.value_or(derive_seed(s->seed, s->lineage.size())), std::move(chosen)};
  apply_step(corpus(s->corpus).corpus, s->K, ck.config.patch_h, ck.config.patch_w, step, s->provenance);
  s->lineage.push_back(std::move(step));
  s->usage.reset();
  return describe(*s);
}

json SessionStore::set_content(const std::string& id, const std::vector<std::uint8_t>& image_bytes) {
  auto s = find(id);
  std::lock_guard lock(s->mutex);
  s->last_used = options_.clock();
  apply_content(*s, image_bytes);
  return describe(*s);
}

json SessionStore::infer(const std::string& id) {
  auto s = find(id);
  std::lock_guard lock(s->mutex);
  s->last_used = options_.clock();
  const auto& ck = checkpoint(s->checkpoint);
  const auto& cfg = ck.config.generator;
  const auto& c = corpus(s->corpus).corpus;
  if (cfg.guided && !s->content) throw invalid("guided checkpoint needs content; PUT /sessions/" + id + "/content");

  Tensor4<float> refined, collage, weights;
  std::vector<double> usage;
  const Index ph = ck.config.patch_h, pw = ck.config.patch_w;
  if (!s->content || (s->content->h() == ph && s->content->w() == pw)) {
    const auto memory = memory_set_from_provenance(c, s->provenance);
    const auto g = generate(ck.generator, cfg, memory.templates, s->content ? &*s->content : nullptr);
    refined = g.refined;
    collage = g.collage;
    weights = colorize_weights(g.weights, element_palette(s->K, s->seed));
    usage = usage_fractions(g.weights);
  } else {
    if (ph != pw) throw invalid("tiled inference needs a square patch size");
    const Index overlap = std::min(options_.tile_overlap, ph / 2);
    const auto plan = plan_tiles(s->content->h(), s->content->w(), ph, overlap);
    auto r = render_tiled(ck.generator, cfg, plan, &*s->content, c, s->K, MemoryPolicy::shared, s->seed, s->provenance);
    refined = std::move(r.refined);
    collage = std::move(r.collage);
    weights = std::move(r.weights);
    usage = std::move(r.usage);
  }
  s->usage = usage;

  const auto refined_png = encode_png(refined), collage_png = encode_png(collage), weights_png = encode_png(weights);
  std::vector<std::uint8_t> bundle;
  for (const auto* p : {&refined_png, &collage_png, &weights_png}) bundle.insert(bundle.end(), p->begin(), p->end());
  json out = describe(*s);
  out["height"] = refined.h();
  out["width"] = refined.w();
  out["images"] = {{"refined", base64_encode(refined_png)},
                   {"collage", base64_encode(collage_png)},
                   {"weights", base64_encode(weights_png)}};
  out["bundle_sha256"] = sha256_hex(bundle);
  return out;
}

// HTTP

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  send_json(res, status, {{"code", code}, {"message", message}});
}

template <typename F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const ServiceError& e) {
      send_error(res, e.status(), e.code(), e.what());
    } catch (const json::exception& e) {
      send_error(res, 400, "bad_request", std::string("malformed JSON: ") + e.what());
    } catch (const ConfigError& e) {
      send_error(res, 400, "validation", e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal", e.what());
    }
  };
}

json body_json(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  auto j = json::parse(req.body);
  if (!j.is_object()) throw ServiceError(400, "bad_request", "request body must be a JSON object");
  return j;
}

std::uint64_t parse_u64(const std::string& text, const std::string& field) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc() || r.ptr != text.data() + text.size()) throw invalid(field + " must be a non-negative integer");
  return v;
}

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

Service::Service(ServiceOptions options) : store_(std::move(options)), server_(std::make_unique<httplib::Server>()) {
  routes();
}

Service::~Service() { stop(); }

void Service::routes() {
  auto& svr = *server_;
  svr.Get("/assets", guarded([this](const httplib::Request&, httplib::Response& res) {
            send_json(res, 200, store_.list_assets());
          }));

  svr.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
             std::string checkpoint, corpus;
             Index k = 0;
             std::uint64_t seed = 0;
             std::optional<std::vector<std::uint8_t>> content;
             if (req.is_multipart_form_data()) {
               auto field = [&](const std::string& key) {
                 if (!req.has_file(key)) throw invalid("missing form field '" + key + "'");
                 return req.get_file_value(key).content;
               };
               checkpoint = field("checkpoint");
               corpus = field("corpus");
               k = Index(parse_u64(field("k"), "k"));
               if (req.has_file("seed")) seed = parse_u64(field("seed"), "seed");
               if (req.has_file("content")) content = bytes_of(req.get_file_value("content").content);
             } else {
               const auto j = body_json(req);
               if (!j.contains("checkpoint") || !j.contains("corpus") || !j.contains("k")) {
                 throw invalid("checkpoint, corpus and k are required");
               }
               checkpoint = j.at("checkpoint").get<std::string>();
               corpus = j.at("corpus").get<std::string>();
               k = j.at("k").get<Index>();
               seed = j.value("seed", std::uint64_t(0));
             }
             send_json(res, 201, store_.create_session(checkpoint, corpus, k, seed, content ? &*content : nullptr));
           }));

  svr.Get(R"(/sessions/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            send_json(res, 200, store_.get_session(req.matches[1]));
          }));

  svr.Post(R"(/sessions/([^/]+)/resample)", guarded([this](const httplib::Request& req, httplib::Response& res) {
             const auto j = body_json(req);
             std::vector<Index> indices;
             bool all = false;
             if (j.contains("indices")) {
               const auto& v = j.at("indices");
               if (v.is_string()) {
                 if (v.get<std::string>() != "all") throw invalid("indices must be a list or \"all\"");
                 all = true;
               } else {
                 indices = v.get<std::vector<Index>>();
               }
             }
             std::optional<std::uint64_t> seed;
             if (j.contains("seed")) seed = j.at("seed").get<std::uint64_t>();
             send_json(res, 200, store_.resample(req.matches[1], indices, all, seed));
           }));

  svr.Put(R"(/sessions/([^/]+)/content)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            if (!req.is_multipart_form_data() || !req.has_file("content")) {
              throw invalid("expected multipart form data with a 'content' file");
            }
            send_json(res, 200, store_.set_content(req.matches[1], bytes_of(req.get_file_value("content").content)));
          }));

  svr.Post(R"(/sessions/([^/]+)/infer)", guarded([this](const httplib::Request& req, httplib::Response& res) {
             send_json(res, 200, store_.infer(req.matches[1]));
           }));

  svr.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      send_error(res, res.status, res.status == 404 ? "not_found" : "http_error", httplib::status_message(res.status));
    }
  });
}

int Service::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = server_->bind_to_any_port(host);
    if (p < 0) throw IoError("cannot bind " + host);
    return p;
  }
  if (!server_->bind_to_port(host, port)) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void Service::listen() {
  if (!server_->listen_after_bind()) throw IoError("server stopped with an error");
}

void Service::start() {
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

void Service::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace magic
