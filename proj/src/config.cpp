#include "tokmat/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace tokmat {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end || v.empty()) {
    throw ConfigError(std::string(key), "config: " + std::string(key) + ": cannot parse '" +
                                            std::string(v) + "' as a number");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(std::string(key),
                    "config: " + std::string(key) + ": expected true or false, got '" +
                        std::string(v) + "'");
}

std::string format_double(Scalar v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

struct Field {
  ConfigKey key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Get>
Field size_field(std::string name, std::string doc, Get member) {
  return {{name, "int", std::move(doc)},
          [name, member](RunConfig& c, std::string_view v) {
            member(c) = parse_number<std::size_t>(name, v);
          },
          [member](const RunConfig& c) {
            return std::to_string(member(const_cast<RunConfig&>(c)));
          }};
}

template <typename Get>
Field float_field(std::string name, std::string doc, Get member) {
  return {{name, "float", std::move(doc)},
          [name, member](RunConfig& c, std::string_view v) {
            member(c) = parse_number<Scalar>(name, v);
          },
          [member](const RunConfig& c) { return format_double(member(const_cast<RunConfig&>(c))); }};
}

template <typename Get>
Field bool_field(std::string name, std::string doc, Get member) {
  return {{name, "bool", std::move(doc)},
          [name, member](RunConfig& c, std::string_view v) { member(c) = parse_bool(name, v); },
          [member](const RunConfig& c) {
            return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false");
          }};
}

template <typename Get>
Field string_field(std::string name, std::string doc, Get member) {
  return {{name, "string", std::move(doc)},
          [member](RunConfig& c, std::string_view v) { member(c) = std::string(v); },
          [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); }};
}

#define TM_REF(expr) [](RunConfig& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back(size_field("seed", "master seed for init, batching and sampling", TM_REF(seed)));
    f.push_back(float_field("radius", "embedding sphere radius R", TM_REF(radius)));
    f.push_back(string_field("corpus", "training corpus file or directory", TM_REF(corpus)));
    f.push_back(string_field("out_dir", "directory for checkpoints and logs", TM_REF(out_dir)));

    f.push_back(size_field("backbone.dim", "embedding dimension d", TM_REF(backbone.dim)));
    f.push_back(size_field("backbone.hidden", "transformer width", TM_REF(backbone.hidden)));
    f.push_back(size_field("backbone.layers", "transformer blocks", TM_REF(backbone.layers)));
    f.push_back(size_field("backbone.heads", "attention heads", TM_REF(backbone.heads)));
    f.push_back(size_field("backbone.max_seq_len", "context window", TM_REF(backbone.max_seq_len)));
    f.push_back(size_field("backbone.max_tail", "largest supported K", TM_REF(backbone.max_tail)));
    f.push_back(size_field("backbone.alpha_freqs", "sinusoidal bands for alpha",
                           TM_REF(backbone.alpha_freqs)));
    f.push_back(size_field("backbone.ffn_mult", "feed-forward expansion", TM_REF(backbone.ffn_mult)));

    f.push_back(size_field("maturation.tail_len", "liquid tail length K", TM_REF(maturation.tail_len)));
    f.push_back(float_field("maturation.alpha_max", "front-of-tail step size",
                            TM_REF(maturation.alpha_max)));
    f.push_back(float_field("maturation.embryo_fraction", "embryo norm as a fraction of R",
                            TM_REF(maturation.embryo_fraction)));
    f.push_back(float_field("maturation.guidance", "guidance scale s", TM_REF(maturation.guidance)));
    f.push_back(size_field("maturation.max_tokens", "tokens to generate",
                           TM_REF(maturation.max_tokens)));
    f.push_back({{"maturation.stop_token", "token", "token id ending generation, or none"},
                 [](RunConfig& c, std::string_view v) {
                   if (v == "none" || v.empty()) {
                     c.maturation.stop_token.reset();
                   } else {
                     c.maturation.stop_token = parse_number<TokenId>("maturation.stop_token", v);
                   }
                 },
                 [](const RunConfig& c) {
                   return c.maturation.stop_token ? std::to_string(*c.maturation.stop_token)
                                                  : std::string("none");
                 }});

    f.push_back(float_field("loss.lambda", "contrastive weight", TM_REF(loss.lambda)));
    f.push_back(float_field("loss.tau", "contrastive temperature", TM_REF(loss.tau)));
    f.push_back(float_field("loss.logit_scale", "cosine logit multiplier", TM_REF(loss.logit_scale)));
    f.push_back(size_field("loss.negatives", "negatives per position", TM_REF(loss.negatives)));
    f.push_back(bool_field("loss.loss_weighting", "(1 - alpha) position weights",
                           TM_REF(loss.loss_weighting)));

    f.push_back(size_field("train.steps", "optimizer steps", TM_REF(train.steps)));
    f.push_back(size_field("train.batch_size", "rows per micro-batch", TM_REF(train.batch_size)));
    f.push_back(size_field("train.grad_accum", "micro-batches per step", TM_REF(train.grad_accum)));
    f.push_back(float_field("train.lr", "peak learning rate", TM_REF(train.lr)));
    f.push_back(float_field("train.lr_min", "cosine floor", TM_REF(train.lr_min)));
    f.push_back(size_field("train.warmup_steps", "linear warmup", TM_REF(train.warmup_steps)));
    f.push_back(float_field("train.weight_decay", "decoupled decay on weight matrices",
                            TM_REF(train.weight_decay)));
    f.push_back(float_field("train.grad_clip", "global norm clip, 0 disables", TM_REF(train.grad_clip)));
    f.push_back(float_field("train.beta1", "Adam beta1", TM_REF(train.beta1)));
    f.push_back(float_field("train.beta2", "Adam beta2", TM_REF(train.beta2)));
    f.push_back(size_field("train.checkpoint_every", "steps between checkpoints, 0 final only",
                           TM_REF(train.checkpoint_every)));
    f.push_back(size_field("train.log_every", "steps between log lines", TM_REF(train.log_every)));
    f.push_back(bool_field("train.finetune_embeddings", "also train the embedding table",
                           TM_REF(train.finetune_embeddings)));
    f.push_back(float_field("train.tail_only_fraction", "rows trained with the tail-only mask",
                            TM_REF(train.tail_only_fraction)));
    f.push_back(float_field("train.alpha_max_lo", "lower bound of sampled alpha_max",
                            TM_REF(train.alpha_max_lo)));
    f.push_back(float_field("train.alpha_max_hi", "upper bound of sampled alpha_max",
                            TM_REF(train.alpha_max_hi)));
    f.push_back(float_field("train.noise_fraction", "corruption noise c", TM_REF(train.noise_fraction)));
    f.push_back(bool_field("train.random_lengths", "crop windows to random lengths",
                           TM_REF(train.random_lengths)));
    return f;
  }();
  return all;
}

#undef TM_REF

const Field& find_field(std::string_view key) {
  for (const auto& f : fields()) {
    if (f.key.name == key) return f;
  }
  throw ConfigError(std::string(key), "config: unknown key '" + std::string(key) + "'");
}

}  // namespace

void RunConfig::validate() const {
  auto wrap = [](const char* section, auto&& fn) {
    try {
      fn();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(section, std::string("config: ") + e.what());
    }
  };
  wrap("backbone", [&] { backbone.validate(); });
  wrap("maturation", [&] { maturation.validate(); });
  wrap("loss", [&] { loss.validate(); });
  wrap("train", [&] { train.validate(); });
  if (!(radius > 0.0)) throw ConfigError("radius", "config: radius must be > 0");
  if (maturation.tail_len > backbone.max_tail) {
    throw ConfigError("maturation.tail_len", "config: maturation.tail_len " +
                                                 std::to_string(maturation.tail_len) +
                                                 " exceeds backbone.max_tail " +
                                                 std::to_string(backbone.max_tail));
  }
  if (maturation.tail_len + 1 > backbone.max_seq_len) {
    throw ConfigError("maturation.tail_len",
                      "config: maturation.tail_len must be below backbone.max_seq_len");
  }
}

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value) {
  find_field(key).set(cfg, trim(value));
  if (key == "seed") cfg.train.seed = cfg.seed;
}

std::string get_config_value(const RunConfig& cfg, std::string_view key) {
  return find_field(key).get(cfg);
}

RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view l = line;
    if (const auto hash = l.find('#'); hash != std::string_view::npos) l = l.substr(0, hash);
    l = trim(l);
    if (l.empty()) continue;
    const auto eq = l.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("", "config: line " + std::to_string(line_no) + ": expected key = value");
    }
    const auto key = trim(l.substr(0, eq));
    try {
      set_config_value(cfg, key, l.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(e.key(), "config: line " + std::to_string(line_no) + ": " +
                                     std::string(e.what()).substr(8));
    }
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "config: cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return parse_config(s.str());
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) {
    out += "# " + f.key.doc + "\n" + f.key.name + " = " + f.get(cfg) + "\n";
  }
  return out;
}

nlohmann::json config_to_json(const RunConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : fields()) j[f.key.name] = f.get(cfg);
  return j;
}

RunConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("", "config: snapshot is not a JSON object");
  RunConfig cfg;
  for (const auto& [key, value] : j.items()) {
    set_config_value(cfg, key, value.is_string() ? value.get<std::string>() : value.dump());
  }
  return cfg;
}

}  // namespace tokmat
