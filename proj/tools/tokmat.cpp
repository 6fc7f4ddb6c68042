#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <pthread.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "tokmat/config.hpp"
#include "tokmat/corpus_io.hpp"
#include "tokmat/maturation.hpp"
#include "tokmat/metrics.hpp"
#include "tokmat/model_io.hpp"
#include "tokmat/service.hpp"
#include "tokmat/training.hpp"

namespace fs = std::filesystem;
using namespace tokmat;
using nlohmann::json;

namespace {

enum Exit : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kBadConfig = 3,
  kBadCheckpoint = 4,
  kBindFailed = 5,
  kBadInput = 6,
  kTrainingDiverged = 7,
};

struct CliError {
  Exit code;
  std::string kind;
  std::string message;
};

[[noreturn]] void fail(Exit code, std::string kind, std::string message) {
  throw CliError{code, std::move(kind), std::move(message)};
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

std::string read_text(const fs::path& p, const char* what) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(kBadInput, "input", std::string("cannot read ") + what + " " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> read_lines(const fs::path& p, const char* what) {
  std::istringstream in(read_text(p, what));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out || !(out << text)) fail(kBadInput, "output", "cannot write " + p.string());
}

Model open_model(const std::string& path) {
  if (path.empty()) fail(kUsage, "usage", "--checkpoint is required");
  if (!fs::exists(path)) fail(kBadCheckpoint, "checkpoint", "no checkpoint at " + path);
  try {
    return load_model(path);
  } catch (const CheckpointError& e) {
    fail(kBadCheckpoint, "checkpoint", std::string(to_string(e.kind())) + ": " + e.what());
  }
}

std::vector<TokenId> prompt_ids(const std::string& text) {
  auto ids = encode(text);
  if (ids.empty()) fail(kUsage, "usage", "--prompt must be non-empty");
  return ids;
}

struct GenFlags {
  std::optional<std::size_t> k;
  std::optional<double> guidance;
  std::optional<std::size_t> max_tokens;
  std::optional<std::uint64_t> seed;
};

MaturationConfig generation_config(const Model& m, const GenFlags& f) {
  MaturationConfig cfg = m.config.maturation;
  if (f.k) cfg.tail_len = *f.k;
  if (f.guidance) cfg.guidance = *f.guidance;
  if (f.max_tokens) cfg.max_tokens = *f.max_tokens;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    fail(kUsage, "usage", e.what());
  }
  if (cfg.tail_len > m.backbone.max_tail()) {
    fail(kUsage, "usage", "--k " + std::to_string(cfg.tail_len) + " exceeds the model maximum " +
                              std::to_string(m.backbone.max_tail()));
  }
  return cfg;
}

void add_gen_flags(CLI::App* cmd, GenFlags& f) {
  cmd->add_option("--k", f.k, "liquid tail length K (default from checkpoint)");
  cmd->add_option("--guidance", f.guidance, "guidance scale s (default from checkpoint)");
  cmd->add_option("--max-tokens", f.max_tokens, "tokens to generate (default from checkpoint)");
  cmd->add_option("--seed", f.seed, "sampling seed (default 0)");
}

// --- train -----------------------------------------------------------------

struct TrainFlags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> k, negatives, steps;
  std::optional<double> lambda, logit_scale;
  std::string corpus, out_dir;
};

RunConfig resolve_train_config(const TrainFlags& f) {
  RunConfig cfg;
  try {
    if (!f.config.empty()) {
      if (!fs::exists(f.config)) fail(kBadConfig, "config", "no config file at " + f.config);
      cfg = load_config(f.config);
    }
    for (const auto& s : f.sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) fail(kBadConfig, "config", "--set expects key=value, got " + s);
      set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    if (f.seed) set_config_value(cfg, "seed", std::to_string(*f.seed));
    if (f.k) cfg.maturation.tail_len = *f.k;
    if (f.negatives) cfg.loss.negatives = *f.negatives;
    if (f.steps) cfg.train.steps = *f.steps;
    if (f.lambda) cfg.loss.lambda = *f.lambda;
    if (f.logit_scale) cfg.loss.logit_scale = *f.logit_scale;
    if (!f.corpus.empty()) cfg.corpus = f.corpus;
    if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
    cfg.validate();
  } catch (const ConfigError& e) {
    fail(kBadConfig, "config", e.what());
  }
  if (cfg.corpus.empty()) fail(kBadConfig, "config", "corpus is not set");
  return cfg;
}

int cmd_train(const TrainFlags& f) {
  const RunConfig cfg = resolve_train_config(f);
  std::vector<TokenId> corpus;
  try {
    corpus = load_corpus(cfg.corpus);
  } catch (const std::exception& e) {
    fail(kBadInput, "corpus", e.what());
  }
  if (corpus.size() < cfg.maturation.tail_len + 1) {
    fail(kBadInput, "corpus", "corpus has only " + std::to_string(corpus.size()) + " tokens");
  }
  const fs::path out = cfg.out_dir;
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) fail(kBadInput, "output", "cannot create " + out.string() + ": " + ec.message());
  write_text(out / "config.txt", format_config(cfg));

  Model init = init_model(cfg);
  save_model(out / "init.tmck", cfg, init.backbone, init.table, 0);

  std::ofstream log_file(out / "train.log");
  struct Tee : std::streambuf {
    std::streambuf *a, *b;
    int overflow(int c) override {
      if (traits_type::eq_int_type(c, traits_type::eof())) return traits_type::not_eof(c);
      a->sputc(static_cast<char>(c));
      b->sputc(static_cast<char>(c));
      return c;
    }
    int sync() override { return a->pubsync() | b->pubsync(); }
  } tee;
  tee.a = std::cout.rdbuf();
  tee.b = log_file.rdbuf();
  std::ostream log(&tee);

  TrainHooks hooks;
  hooks.log = &log;
  hooks.checkpoint = [&](std::size_t step, const Backbone& b, const EmbeddingTable& t) {
    const fs::path p = step == cfg.train.steps ? out / "model.tmck"
                                                : out / ("step-" + std::to_string(step) + ".tmck");
    save_model(p, cfg, b, t, step);
  };
  TrainConfig tcfg = cfg.train;
  tcfg.seed = cfg.seed;
  try {
    train(corpus, init.backbone, init.table, cfg.maturation.tail_len, tcfg, cfg.loss, hooks);
  } catch (const TrainingError& e) {
    fail(kTrainingDiverged, "training", e.what());
  }
  std::cout << "checkpoint=" << (out / "model.tmck").string() << '\n';
  return kOk;
}

// --- generate --------------------------------------------------------------

int cmd_generate(const std::string& ckpt, const std::string& prompt, const GenFlags& f,
                 const std::string& trace_out) {
  const Model m = open_model(ckpt);
  const MaturationConfig cfg = generation_config(m, f);
  GenerationSession session(prompt_ids(prompt), cfg, m.table, f.seed.value_or(0));
  session.record_history(!trace_out.empty());
  const auto ids = generate(session, m.backbone, m.table);
  std::cout << decode(ids) << '\n';

  if (!trace_out.empty()) {
    json steps = json::array();
    for (const auto& snap : session.history()) {
      json ent = json::array(), top = json::array(), vecs = json::array();
      for (std::size_t j = 0; j < snap.vectors.rows(); ++j) {
        const auto z = snap.vectors.row(j);
        ent.push_back(implicit_entropy(z, m.table));
        top.push_back(commit(z, m.table));
        vecs.push_back(std::vector<Scalar>(z.begin(), z.end()));
      }
      steps.push_back({{"step", snap.step},
                       {"front_position", snap.front_position},
                       {"updated", snap.updated},
                       {"entropies", ent},
                       {"top1", top},
                       {"vectors", vecs}});
    }
    json trajectories = json::array();
    for (std::size_t p = session.prompt_length(); p < session.committed_ids().size(); ++p) {
      trajectories.push_back(to_json(entropy_trajectory(session.history(), p, m.table)));
    }
    const json trace{{"prompt_ids", encode(prompt)},
                     {"generated_ids", ids},
                     {"config", cfg},
                     {"seed", f.seed.value_or(0)},
                     {"steps", steps},
                     {"trajectories", trajectories}};
    write_text(trace_out, trace.dump(-1, ' ', false, json::error_handler_t::replace) + "\n");
  }
  return kOk;
}

// --- eval ------------------------------------------------------------------

int cmd_eval(const std::string& ckpt, const std::string& prompts, const std::string& sequences,
             const GenFlags& f, const std::string& format) {
  std::vector<std::vector<TokenId>> gens;
  if (!sequences.empty()) {
    if (!ckpt.empty() || !prompts.empty()) {
      fail(kUsage, "usage", "--sequences scores text as given; drop --checkpoint and --prompts");
    }
    for (const auto& line : read_lines(sequences, "sequences file")) gens.push_back(encode(line));
  } else {
    if (prompts.empty()) fail(kUsage, "usage", "--prompts or --sequences is required");
    const auto lines = read_lines(prompts, "prompts file");
    const Model m = open_model(ckpt);
    const MaturationConfig cfg = generation_config(m, f);
    for (const auto& line : lines) {
      GenerationSession session(prompt_ids(line), cfg, m.table, f.seed.value_or(0));
      gens.push_back(generate(session, m.backbone, m.table));
    }
  }
  const RepetitionReport r = repetition_report(gens);
  if (format == "text") {
    std::cout << to_text(r);
  } else {
    std::cout << to_json(r).dump(2) << '\n';
  }
  return kOk;
}

// --- sweep -----------------------------------------------------------------

std::vector<std::size_t> parse_k_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, ',')) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(part, &used);
      if (used != part.size() || v == 0) throw std::invalid_argument(part);
      out.push_back(v);
    } catch (const std::exception&) {
      fail(kUsage, "usage", "--k expects a comma-separated list of positive integers, got " + s);
    }
  }
  if (out.empty()) fail(kUsage, "usage", "--k list is empty");
  return out;
}

int cmd_sweep(const std::string& ckpt, const std::string& prompt, const std::string& k_list,
              std::size_t seeds, const GenFlags& f, const std::string& format) {
  const Model m = open_model(ckpt);
  const auto ks = parse_k_list(k_list);
  for (std::size_t k : ks) {
    if (k > m.backbone.max_tail()) {
      fail(kUsage, "usage", "K=" + std::to_string(k) + " exceeds the model maximum " +
                                std::to_string(m.backbone.max_tail()));
    }
  }
  if (seeds == 0) fail(kUsage, "usage", "--seeds must be >= 1");
  GenFlags base = f;
  base.k.reset();
  const MaturationConfig cfg = generation_config(m, base);
  std::vector<std::uint64_t> seed_list;
  for (std::size_t i = 0; i < seeds; ++i) seed_list.push_back(f.seed.value_or(0) + i);
  const auto rows = diversity_sweep(prompt_ids(prompt), seed_list, ks, m.backbone, m.table, cfg);
  if (format == "json") {
    std::cout << sweep_json(rows).dump(2) << '\n';
  } else if (format == "text") {
    std::cout << sweep_text(rows);
  } else {
    std::cout << sweep_csv(rows);
  }
  return kOk;
}

// --- drift -----------------------------------------------------------------

int cmd_drift(const std::string& init, const std::string& learned, std::size_t top_k,
              const std::string& format) {
  const Model a = open_model(init);
  const Model b = open_model(learned);
  if (!a.table.vectors().same_shape(b.table.vectors())) {
    fail(kBadCheckpoint, "checkpoint", "embedding tables differ in shape");
  }
  const DriftReport r = embedding_drift(a.table.vectors(), b.table.vectors(), top_k);
  if (format == "text") {
    std::cout << to_text(r);
  } else {
    std::cout << to_json(r).dump(2) << '\n';
  }
  return kOk;
}

// --- serve -----------------------------------------------------------------

int cmd_serve(const std::string& ckpt, const std::string& bind, const GenFlags& f) {
  const Model m = open_model(ckpt);
  const MaturationConfig cfg = generation_config(m, f);
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos) fail(kUsage, "usage", "--bind expects host:port, got " + bind);
  int port = 0;
  try {
    port = std::stoi(bind.substr(colon + 1));
  } catch (const std::exception&) {
    fail(kUsage, "usage", "--bind has a bad port: " + bind);
  }
  if (port < 0 || port > 65535) fail(kUsage, "usage", "--bind port out of range: " + bind);
  const std::string host = bind.substr(0, colon);

  auto backbone = std::make_shared<const Backbone>(m.backbone);
  auto table = std::make_shared<const EmbeddingTable>(m.table);
  SessionService service(backbone, table, cfg);
  HttpServer server(service);
  sigset_t stop_signals;
  sigemptyset(&stop_signals);
  sigaddset(&stop_signals, SIGINT);
  sigaddset(&stop_signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);
  int bound = 0;
  try {
    bound = server.start(host, port);
  } catch (const BindError& e) {
    fail(kBindFailed, "bind", e.what());
  }
  std::cout << "listening=" << host << ':' << bound << std::endl;
  int sig = 0;
  sigwait(&stop_signals, &sig);
  server.stop();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token maturation: train, generate and inspect liquid-tail models"};
  app.require_subcommand(1);

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "train a model from a corpus");
  train->add_option("--config", tf.config, "key = value run configuration");
  train->add_option("--set", tf.sets, "override one config key, key=value (repeatable)");
  train->add_option("--seed", tf.seed, "master seed");
  train->add_option("--k", tf.k, "tail length K");
  train->add_option("--negatives", tf.negatives, "contrastive negatives per position");
  train->add_option("--lambda", tf.lambda, "contrastive loss weight");
  train->add_option("--logit-scale", tf.logit_scale, "cosine logit multiplier");
  train->add_option("--steps", tf.steps, "optimizer steps");
  train->add_option("--corpus", tf.corpus, "corpus file or directory");
  train->add_option("--out-dir", tf.out_dir, "output directory");

  std::string ckpt, prompt, trace_out, prompts, sequences, format, k_list, bind = "127.0.0.1:8080";
  std::string init_ckpt, learned_ckpt;
  std::size_t seeds = 8, top_k = 20;
  GenFlags gen_flags, eval_flags, sweep_flags, serve_flags;

  auto* gen = app.add_subcommand("generate", "generate a continuation");
  gen->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  gen->add_option("--prompt", prompt, "prompt text")->required();
  add_gen_flags(gen, gen_flags);
  gen->add_option("--trace-out", trace_out, "write per-step tail snapshots as JSON");

  auto* eval = app.add_subcommand("eval", "repetition metrics for generations or given text");
  eval->add_option("--checkpoint", ckpt, "model checkpoint");
  eval->add_option("--prompts", prompts, "file with one prompt per line");
  eval->add_option("--sequences", sequences, "score each line of this file instead of generating");
  add_gen_flags(eval, eval_flags);
  eval->add_option("--format", format, "json or text")->check(CLI::IsMember({"json", "text"}));

  auto* sweep = app.add_subcommand("sweep", "diversity across tail lengths and seeds");
  sweep->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  sweep->add_option("--prompt", prompt, "prompt text")->required();
  sweep->add_option("--k", k_list, "comma-separated tail lengths")->required();
  sweep->add_option("--seeds", seeds, "seeds per K, counting up from --seed");
  sweep->add_option("--seed", sweep_flags.seed, "first seed (default 0)");
  sweep->add_option("--guidance", sweep_flags.guidance, "guidance scale s");
  sweep->add_option("--max-tokens", sweep_flags.max_tokens, "tokens per generation");
  sweep->add_option("--format", format, "csv, json or text")
      ->check(CLI::IsMember({"csv", "json", "text"}));

  auto* drift = app.add_subcommand("drift", "embedding drift between two checkpoints");
  drift->add_option("--init", init_ckpt, "checkpoint before training")->required();
  drift->add_option("--learned", learned_ckpt, "checkpoint after training")->required();
  drift->add_option("--top-k", top_k, "most-drifted tokens to list");
  drift->add_option("--format", format, "json or text")->check(CLI::IsMember({"json", "text"}));

  auto* serve = app.add_subcommand("serve", "run the session HTTP service");
  serve->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  serve->add_option("--bind", bind, "host:port, port 0 picks a free one");
  serve->add_option("--k", serve_flags.k, "default tail length for new sessions");
  serve->add_option("--guidance", serve_flags.guidance, "default guidance for new sessions");
  serve->add_option("--max-tokens", serve_flags.max_tokens, "default token budget per session");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error kind=usage exit=" << kUsage << " message=\"" << one_line(e.what())
              << "\"\n";
    return kUsage;
  }

  try {
    if (*train) return cmd_train(tf);
    if (*gen) return cmd_generate(ckpt, prompt, gen_flags, trace_out);
    if (*eval) return cmd_eval(ckpt, prompts, sequences, eval_flags, format);
    if (*sweep) return cmd_sweep(ckpt, prompt, k_list, seeds, sweep_flags, format);
    if (*drift) return cmd_drift(init_ckpt, learned_ckpt, top_k, format);
    if (*serve) return cmd_serve(ckpt, bind, serve_flags);
  } catch (const CliError& e) {
    std::cerr << "error kind=" << e.kind << " exit=" << e.code << " message=\""
              << one_line(e.message) << "\"\n";
    return e.code;
  } catch (const CheckpointError& e) {
    std::cerr << "error kind=checkpoint exit=" << kBadCheckpoint << " message=\""
              << one_line(e.what()) << "\"\n";
    return kBadCheckpoint;
  } catch (const std::exception& e) {
    std::cerr << "error kind=internal exit=" << kFailure << " message=\"" << one_line(e.what())
              << "\"\n";
    return kFailure;
  }
  return kFailure;
}
