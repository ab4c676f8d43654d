#include "magic/config.hpp"

#include <charconv>
#include <cmath>
#include <functional>
#include <sstream>
#include <vector>

namespace magic {

void TrainConfig::validate() const {
  if (patch_h < 1 || patch_w < 1) throw ConfigError("patch size must be positive");
  if (batch < 1) throw ConfigError("batch must be at least 1");
  if (k_range.min < 1 || k_range.max < k_range.min) throw ConfigError("K range must satisfy 1 <= min <= max");
  generator.validate();
  discriminator.validate();
  weights.validate();
  const Index align = std::max(generator.alignment(), discriminator.alignment());
  if (patch_h % align != 0 || patch_w % align != 0) {
    throw ConfigError("patch size must be divisible by 2^depth = " + std::to_string(align));
  }
  if (content_levels < 0) throw ConfigError("content_levels must be non-negative");
  if (!(adam.lr >= 0) || !(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1) ||
      !(adam.eps > 0)) {
    throw ConfigError("invalid Adam hyper-parameters");
  }
  if (!(grad_clip >= 0)) throw ConfigError("grad_clip must be non-negative");
  if (iterations < 0) throw ConfigError("iterations must be non-negative");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
}

TrainConfig default_config(bool guided) {
  TrainConfig cfg;
  cfg.generator.guided = guided;
  cfg.batch = guided ? 6 : 12;
  cfg.discriminator.depth = guided ? 6 : 7;
  return cfg;
}

TrainConfig smoke_config() {
  TrainConfig cfg;
  cfg.patch_h = cfg.patch_w = 64;
  cfg.batch = 2;
  cfg.k_range = {2, 4};
  cfg.generator.blend.depth = 2;
  cfg.generator.blend.base_channels = 8;
  cfg.generator.blend.heads = 2;
  cfg.generator.refine.depth = 2;
  cfg.generator.refine.base_channels = 8;
  cfg.generator.guided = true;
  cfg.discriminator.depth = 3;
  cfg.discriminator.base_channels = 16;
  cfg.iterations = 300;
  return cfg;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

template <typename I>
std::string fmt_int(I v) {
  return std::to_string(v);
}

[[noreturn]] void bad(const std::string& key, const std::string& value) {
  throw ConfigError("invalid value '" + value + "' for " + key);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(out)) bad(key, v);
  return out;
}

template <typename I>
I parse_int(const std::string& key, const std::string& v) {
  I out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad(key, v);
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad(key, v);
}

struct Field {
  std::string key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

#define MAGIC_FIELD_D(KEY, EXPR) \
  Field { KEY, [](const TrainConfig& c) { return fmt(c.EXPR); }, [](TrainConfig& c, const std::string& v) { c.EXPR = parse_double(KEY, v); } }
#define MAGIC_FIELD_I(KEY, EXPR)                                                          \
  Field {                                                                                 \
    KEY, [](const TrainConfig& c) { return fmt_int(c.EXPR); },                            \
        [](TrainConfig& c, const std::string& v) { c.EXPR = parse_int<decltype(c.EXPR)>(KEY, v); } \
  }
#define MAGIC_FIELD_B(KEY, EXPR) \
  Field { KEY, [](const TrainConfig& c) { return std::string(c.EXPR ? "true" : "false"); }, [](TrainConfig& c, const std::string& v) { c.EXPR = parse_bool(KEY, v); } }

void unet_fields(std::vector<Field>& out, const std::string& p, UNetConfig GeneratorConfig::*net) {
  auto add_i = [&](const std::string& name, auto member) {
    out.push_back({p + name, [net, member](const TrainConfig& c) { return fmt_int(c.generator.*net.*member); },
                   [net, member, key = p + name](TrainConfig& c, const std::string& v) {
                     c.generator.*net.*member = parse_int<std::remove_reference_t<decltype(c.generator.*net.*member)>>(key, v);
                   }});
  };
  add_i("depth", &UNetConfig::depth);
  add_i("base_channels", &UNetConfig::base_channels);
  add_i("heads", &UNetConfig::heads);
  add_i("attention_min_level", &UNetConfig::attention_min_level);
  out.push_back({p + "normalize",
                 [net](const TrainConfig& c) { return std::string((c.generator.*net).normalize ? "true" : "false"); },
                 [net, key = p + "normalize"](TrainConfig& c, const std::string& v) {
                   (c.generator.*net).normalize = parse_bool(key, v);
                 }});
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f{
        MAGIC_FIELD_I("patch.height", patch_h),
        MAGIC_FIELD_I("patch.width", patch_w),
        MAGIC_FIELD_I("train.batch", batch),
        MAGIC_FIELD_I("train.k_min", k_range.min),
        MAGIC_FIELD_I("train.k_max", k_range.max),
        MAGIC_FIELD_I("train.iterations", iterations),
        MAGIC_FIELD_I("train.seed", seed),
        MAGIC_FIELD_I("train.checkpoint_every", checkpoint_every),
        MAGIC_FIELD_D("train.grad_clip", grad_clip),
        MAGIC_FIELD_D("adam.lr", adam.lr),
        MAGIC_FIELD_D("adam.beta1", adam.beta1),
        MAGIC_FIELD_D("adam.beta2", adam.beta2),
        MAGIC_FIELD_D("adam.eps", adam.eps),
        MAGIC_FIELD_D("loss.content", weights.content),
        MAGIC_FIELD_D("loss.tv", weights.tv),
        MAGIC_FIELD_D("loss.entropy", weights.entropy),
        MAGIC_FIELD_D("loss.max_usage", weights.max_usage),
        MAGIC_FIELD_I("loss.content_levels", content_levels),
        MAGIC_FIELD_B("generator.guided", generator.guided),
        MAGIC_FIELD_B("generator.warping", generator.warping),
        MAGIC_FIELD_I("discriminator.depth", discriminator.depth),
        MAGIC_FIELD_I("discriminator.base_channels", discriminator.base_channels),
        MAGIC_FIELD_B("discriminator.leaky", discriminator.leaky),
        MAGIC_FIELD_D("discriminator.leaky_slope", discriminator.leaky_slope),
        MAGIC_FIELD_B("discriminator.normalize", discriminator.normalize),
    };
    unet_fields(f, "generator.blend.", &GeneratorConfig::blend);
    unet_fields(f, "generator.refine.", &GeneratorConfig::refine);
    return f;
  }();
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValues to_key_values(const TrainConfig& cfg) {
  KeyValues kv;
  for (const auto& f : fields()) kv[f.key] = f.get(cfg);
  return kv;
}

TrainConfig apply_key_values(TrainConfig base, const KeyValues& kv) {
  for (const auto& [key, value] : kv) {
    bool found = false;
    for (const auto& f : fields()) {
      if (f.key == key) {
        f.set(base, value);
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("unknown configuration key: " + key);
  }
  // Attention placement is fixed by the architecture, not configurable.
  base.generator.blend.set_attention = true;
  base.generator.refine.set_attention = false;
  return base;
}

KeyValues parse_key_value_text(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    kv[section.empty() ? key : section + "." + key] = trim(line.substr(eq + 1));
  }
  return kv;
}

std::string format_key_value_text(const KeyValues& kv) {
  std::ostringstream os;
  for (const auto& [key, value] : kv) os << key << " = " << value << '\n';
  return os.str();
}

std::pair<std::string, std::string> parse_override(const std::string& arg) {
  const auto eq = arg.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + arg);
  return {trim(arg.substr(0, eq)), trim(arg.substr(eq + 1))};
}

}  // namespace magic
