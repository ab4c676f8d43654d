#include "magic/cli.hpp"

#include "magic/checkpoint.hpp"
#include "magic/digest.hpp"
#include "magic/image_io.hpp"
#include "magic/rollout.hpp"
#include "magic/service.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace magic {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--out", c.out_dir, "Output directory (default $MAGIC_OUT_DIR or .)");
  cmd->add_option("--seed", c.seed, "Random seed");
}

void add_config(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_file, "Key/value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "Override one config key, key=value (repeatable)");
}

fs::path out_dir(const Common& c) {
  if (!c.out_dir.empty()) return c.out_dir;
  if (const char* env = std::getenv("MAGIC_OUT_DIR"); env != nullptr && *env != '\0') return env;
  return ".";
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Config file, then --set overrides; dedicated flags are applied afterwards by the caller.
TrainConfig layered_config(TrainConfig base, const Common& c) {
  if (!c.config_file.empty()) base = apply_key_values(base, parse_key_value_text(read_text(c.config_file)));
  KeyValues kv;
  for (const auto& o : c.overrides) {
    auto [key, value] = parse_override(o);
    kv.insert_or_assign(std::move(key), std::move(value));
  }
  return apply_key_values(base, kv);
}

/// Artifact hashes keyed by path relative to the output directory.
class Manifest {
 public:
  Manifest(std::string command, const std::vector<std::string>& args, fs::path dir)
      : dir_(std::move(dir)), doc_{{"command", std::move(command)}, {"args", args}} {}

  json& doc() { return doc_; }

  void add(const fs::path& file) { doc_["artifacts"][fs::relative(file, dir_).generic_string()] = sha256_file(file); }

  void add_tree(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) add(f);
  }

  void write() const {
    const auto text = doc_.dump(2) + "\n";
    write_file(dir_ / "run.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

 private:
  fs::path dir_;
  json doc_;
};

json config_json(const TrainConfig& cfg) {
  json j = json::object();
  for (const auto& [k, v] : to_key_values(cfg)) j[k] = v;
  return j;
}

void save_png(Manifest& m, const fs::path& path, const Tensor4<float>& img) {
  write_png(path, img);
  m.add(path);
}

/// Collage outputs shared by infer and rollout.
void save_outputs(Manifest& m, const fs::path& dir, const Tensor4<float>& refined, const Tensor4<float>& collage,
                  const Tensor4<float>& weights) {
  save_png(m, dir / "refined.png", refined);
  save_png(m, dir / "collage.png", collage);
  save_png(m, dir / "weights.png", weights);
}

struct ModelArgs {
  std::string checkpoint;
  std::string style_dir;
  std::string content;
  Index k = 0;
  std::vector<std::string> templates;
};

void add_model_args(CLI::App* cmd, ModelArgs& a) {
  cmd->add_option("--checkpoint", a.checkpoint, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  cmd->add_option("--style-dir", a.style_dir, "Style corpus directory")->required()->check(CLI::ExistingDirectory);
  cmd->add_option("--content", a.content, "Content image (guided checkpoints)")->check(CLI::ExistingFile);
  cmd->add_option("--k", a.k, "Memory set size (default: lower end of the trained range)");
  cmd->add_option("--template", a.templates, "Pin the memory set to these provenance ids (repeatable)");
}

Index resolve_k(const ModelArgs& a, const TrainConfig& cfg) {
  if (!a.templates.empty()) {
    if (a.k != 0 && a.k != Index(a.templates.size())) throw ConfigError("--k disagrees with the number of --template ids");
    return Index(a.templates.size());
  }
  return a.k != 0 ? a.k : cfg.k_range.min;
}

std::optional<Tensor4<float>> load_content(const ModelArgs& a, const TrainConfig& cfg) {
  if (cfg.generator.guided && a.content.empty()) throw ConfigError("guided checkpoint needs --content");
  if (!cfg.generator.guided && !a.content.empty()) throw ConfigError("unguided checkpoint takes no --content");
  if (a.content.empty()) return std::nullopt;
  return read_image(a.content);
}

int cmd_train(const std::vector<std::string>& args, const Common& c, const std::string& style_dir,
              const std::string& content_dir, std::optional<long> iters, std::optional<Index> size,
              const std::string& preset, const std::string& resume, std::ostream& out) {
  const bool guided = !content_dir.empty();
  TrainConfig base = preset == "smoke" ? smoke_config() : default_config(guided);
  TrainConfig cfg = layered_config(base, c);
  cfg.generator.guided = guided;
  if (iters) cfg.iterations = *iters;
  if (size) cfg.patch_h = cfg.patch_w = *size;
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();

  const fs::path dir = out_dir(c);
  fs::create_directories(dir);
  std::vector<std::string> warnings;
  const Corpus style = load_corpus(style_dir, cfg.patch_h, cfg.patch_w, &warnings);
  std::optional<Corpus> content;
  if (guided) content = load_corpus(content_dir, cfg.patch_h, cfg.patch_w, &warnings);
  for (const auto& w : warnings) out << "warning: " << w << "\n";

  std::optional<ModelState> start;
  if (!resume.empty()) {
    auto loaded = load_checkpoint(resume);
    // Only the iteration budget may change on resume.
    auto a = to_key_values(loaded.config), b = to_key_values(cfg);
    a.erase("train.iterations");
    b.erase("train.iterations");
    if (a != b) throw ConfigError("resumed checkpoint was trained with a different configuration");
    start = std::move(loaded.state);
  }

  const fs::path metrics_path = dir / "metrics.csv";
  if (!start) fs::remove(metrics_path);
  MetricsWriter metrics(metrics_path);
  TrainHooks hooks;
  hooks.on_step = [&](const ModelState& s, const LossReport& r, double ms) {
    metrics.write(s.iteration, r, ms);
    if (s.iteration % 50 == 0 || s.iteration == cfg.iterations) {
      out << "iter " << s.iteration << " adv_d " << r.adv_d << " adv_g " << r.adv_g << " content " << r.content
          << " max_usage " << r.max_usage << "\n";
    }
  };
  hooks.on_checkpoint = [&](const ModelState& s) {
    if (s.iteration == cfg.iterations) return;
    std::ostringstream name;
    name << "iter-" << std::setw(6) << std::setfill('0') << s.iteration;
    save_checkpoint(s, cfg, dir / "checkpoints" / name.str());
  };
  const ModelState final_state = train(cfg, style, content ? &*content : nullptr, hooks, std::move(start));
  save_checkpoint(final_state, cfg, dir / "checkpoint");

  Manifest m("train", args, dir);
  m.doc()["seed"] = cfg.seed;
  m.doc()["config"] = config_json(cfg);
  m.doc()["style_dir"] = style_dir;
  m.doc()["content_dir"] = content_dir;
  m.add_tree(dir / "checkpoint");
  if (fs::exists(dir / "checkpoints")) m.add_tree(dir / "checkpoints");
  m.add(metrics_path);
  m.write();
  out << "checkpoint written to " << (dir / "checkpoint").string() << "\n";
  return kExitOk;
}

int cmd_infer(const std::vector<std::string>& args, const Common& c, const ModelArgs& a, std::ostream& out) {
  const auto loaded = load_checkpoint(a.checkpoint);
  const auto& cfg = loaded.config;
  const Index K = resolve_k(a, cfg);
  const std::uint64_t seed = c.seed.value_or(0);
  const auto content = load_content(a, cfg);
  if (content && (content->h() != cfg.patch_h || content->w() != cfg.patch_w)) {
    throw ConfigError("infer needs a " + std::to_string(cfg.patch_h) + "x" + std::to_string(cfg.patch_w) +
                      " content image; use rollout for other sizes");
  }
  const Corpus style = load_corpus(a.style_dir, cfg.patch_h, cfg.patch_w);
  MemorySet memory;
  if (!a.templates.empty()) {
    memory = memory_set_from_provenance(style, a.templates);
  } else {
    Rng rng(derive_seed(seed, 0));
    memory = sample_memory_set(style, K, cfg.patch_h, cfg.patch_w, rng);
  }
  const auto g = generate(loaded.state.generator, cfg.generator, memory.templates, content ? &*content : nullptr);

  const fs::path dir = out_dir(c);
  fs::create_directories(dir);
  Manifest m("infer", args, dir);
  save_outputs(m, dir, g.refined, g.collage, colorize_weights(g.weights, element_palette(K, seed)));
  m.doc()["seed"] = seed;
  m.doc()["k"] = K;
  m.doc()["checkpoint"] = a.checkpoint;
  m.doc()["config"] = config_json(cfg);
  m.doc()["provenance"] = memory.source_ids;
  m.doc()["usage"] = usage_fractions(g.weights);
  m.write();
  out << "wrote refined.png, collage.png, weights.png to " << dir.string() << "\n";
  return kExitOk;
}

struct RolloutArgs {
  Index tile = 384;
  Index overlap = 64;
  Index height = 0, width = 0;
  std::string policy = "shared";
};

int cmd_rollout(const std::vector<std::string>& args, const Common& c, const ModelArgs& a, const RolloutArgs& r,
                std::ostream& out) {
  const auto loaded = load_checkpoint(a.checkpoint);
  const auto& cfg = loaded.config;
  const Index K = resolve_k(a, cfg);
  const std::uint64_t seed = c.seed.value_or(0);
  const auto policy = parse_memory_policy(r.policy);
  const auto content = load_content(a, cfg);
  Index H = r.height, W = r.width;
  if (content) {
    if ((H != 0 && H != content->h()) || (W != 0 && W != content->w())) {
      throw ConfigError("--height/--width must match the content image");
    }
    H = content->h();
    W = content->w();
  }
  if (H == 0 || W == 0) throw ConfigError("unguided rollout needs --height and --width");
  const auto plan = plan_tiles(H, W, r.tile, r.overlap);
  const Index load_patch = policy == MemoryPolicy::canvas ? std::max(H, W) : r.tile;
  const Corpus style = load_corpus(a.style_dir, load_patch, load_patch);
  const auto result = render_tiled(loaded.state.generator, cfg.generator, plan, content ? &*content : nullptr, style,
                                   K, policy, seed, a.templates);

  const fs::path dir = out_dir(c);
  fs::create_directories(dir);
  Manifest m("rollout", args, dir);
  save_outputs(m, dir, result.refined, result.collage, result.weights);
  m.doc()["seed"] = seed;
  m.doc()["k"] = K;
  m.doc()["checkpoint"] = a.checkpoint;
  m.doc()["config"] = config_json(cfg);
  m.doc()["plan"] = {{"height", H}, {"width", W}, {"tile", r.tile}, {"overlap", r.overlap},
                     {"rows", plan.rows}, {"cols", plan.cols}, {"policy", to_string(policy)}};
  m.doc()["provenance"] = result.provenance;
  m.doc()["usage"] = result.usage;
  m.write();
  out << plan.rows << "x" << plan.cols << " tiles, wrote " << H << "x" << W << " images to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_sample(const std::vector<std::string>& args, const Common& c, const std::string& style_dir, Index K,
               Index size, std::ostream& out) {
  if (K < 1) throw ConfigError("--k must be at least 1");
  if (size < 1) throw ConfigError("--size must be positive");
  const std::uint64_t seed = c.seed.value_or(0);
  const Corpus style = load_corpus(style_dir, size, size);
  Rng rng(derive_seed(seed, 0));
  const auto memory = sample_memory_set(style, K, size, size, rng);
  const fs::path dir = out_dir(c);
  fs::create_directories(dir);
  Manifest m("sample", args, dir);
  for (Index k = 0; k < K; ++k) {
    save_png(m, dir / ("template_" + std::to_string(k) + ".png"),
             crop_from_provenance(style, memory.source_ids[std::size_t(k)]));
  }
  m.doc()["seed"] = seed;
  m.doc()["k"] = K;
  m.doc()["size"] = size;
  m.doc()["provenance"] = memory.source_ids;
  m.write();
  for (const auto& id : memory.source_ids) out << id << "\n";
  return kExitOk;
}

std::pair<std::string, fs::path> named_path(const std::string& arg) {
  const auto eq = arg.find('=');
  if (eq == std::string::npos) {
    fs::path p(arg);
    return {(p.has_filename() ? p : p.parent_path()).filename().string(), p};
  }
  return {arg.substr(0, eq), arg.substr(eq + 1)};
}

int cmd_serve(const std::vector<std::string>& checkpoints, const std::vector<std::string>& corpora,
              const std::string& listen, long idle_minutes, std::ostream& out) {
  ServiceOptions opts;
  for (const auto& s : checkpoints) opts.checkpoints.push_back(named_path(s));
  for (const auto& s : corpora) opts.corpora.push_back(named_path(s));
  opts.idle_timeout = std::chrono::minutes(idle_minutes);
  const auto colon = listen.rfind(':');
  if (colon == std::string::npos) throw ConfigError("--listen expects host:port");
  const std::string host = listen.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(listen.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("--listen expects host:port");
  }
  Service service(std::move(opts));
  const int bound = service.bind(host, port);
  out << "listening on " << host << ":" << bound << std::endl;
  service.listen();
  return kExitOk;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Set-attention collage GAN: training, inference, tiled roll-out and serving", "magic"};
  app.require_subcommand(1);
  Common common;

  auto* train = app.add_subcommand("train", "Train a model (guided when --content-dir is given)");
  std::string style_dir, content_dir, preset = "full", resume;
  std::optional<long> iters;
  std::optional<Index> size;
  train->add_option("--style-dir", style_dir, "Style corpus directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--content-dir", content_dir, "Content corpus directory")->check(CLI::ExistingDirectory);
  train->add_option("--iters", iters, "Iterations");
  train->add_option("--size", size, "Square patch size");
  train->add_option("--preset", preset, "Base configuration")->check(CLI::IsMember({"full", "smoke"}));
  train->add_option("--resume", resume, "Continue from a checkpoint directory")->check(CLI::ExistingDirectory);
  add_config(train, common);
  add_common(train, common);

  ModelArgs model;
  auto* infer = app.add_subcommand("infer", "One patch-sized collage from a checkpoint");
  add_model_args(infer, model);
  add_common(infer, common);

  RolloutArgs roll;
  auto* rollout = app.add_subcommand("rollout", "Large image by overlapping tiles");
  add_model_args(rollout, model);
  rollout->add_option("--tile", roll.tile, "Tile side T")->capture_default_str();
  rollout->add_option("--overlap", roll.overlap, "Tile overlap V")->capture_default_str();
  rollout->add_option("--height", roll.height, "Output height (unguided)");
  rollout->add_option("--width", roll.width, "Output width (unguided)");
  rollout->add_option("--policy", roll.policy, "Memory set policy: shared, per-tile, canvas")->capture_default_str();
  add_common(rollout, common);

  Index sample_k = 4, sample_size = 64;
  std::string sample_style;
  auto* sample = app.add_subcommand("sample", "Write a sampled memory set as PNGs");
  sample->add_option("--style-dir", sample_style, "Style corpus directory")->required()->check(CLI::ExistingDirectory);
  sample->add_option("--k", sample_k, "Memory set size")->capture_default_str();
  sample->add_option("--size", sample_size, "Template side")->capture_default_str();
  add_common(sample, common);

  std::vector<std::string> serve_checkpoints, serve_corpora;
  std::string listen = "127.0.0.1:8080";
  long idle_minutes = 30;
  auto* serve = app.add_subcommand("serve", "Start the HTTP service");
  const CLI::Validator named_dir(
      [](std::string& s) { return fs::is_directory(named_path(s).second) ? std::string() : "not a directory: " + s; },
      "[ID=]DIR");
  serve->add_option("--checkpoint", serve_checkpoints, "Checkpoint to register (repeatable)")->check(named_dir);
  serve->add_option("--style-dir", serve_corpora, "Corpus to register (repeatable)")->check(named_dir);
  serve->add_option("--listen", listen, "host:port")->capture_default_str();
  serve->add_option("--idle-minutes", idle_minutes, "Session idle eviction")->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    err << app.help();
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(args, common, style_dir, content_dir, iters, size, preset, resume, out);
    if (*infer) return cmd_infer(args, common, model, out);
    if (*rollout) return cmd_rollout(args, common, model, roll, out);
    if (*sample) return cmd_sample(args, common, sample_style, sample_k, sample_size, out);
    if (*serve) return cmd_serve(serve_checkpoints, serve_corpora, listen, idle_minutes, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const CheckpointError& e) {
    err << "error: checkpoint (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace magic
