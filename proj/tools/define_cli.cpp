#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "define/define.hpp"

namespace fs = std::filesystem;
using namespace define;

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
};

RunConfig resolve_config(const std::string& path, const Overrides& ov) {
  RunConfig cfg = RunConfig::load(path);
  if (ov.seed) cfg.train.seed = *ov.seed;
  if (ov.variant) cfg.model.variant = variant_from_string(*ov.variant);
  return cfg;
}

std::string one_line(std::string msg) {
  for (std::size_t i = 0; i < msg.size(); ++i)
    if (msg[i] == '\n') msg[i] = ';';
  return msg;
}

nlohmann::json metrics_json(const EpochMetrics& m) {
  nlohmann::json j;
  j["epoch"] = m.epoch;
  j["train_ppl"] = m.train_ppl;
  if (std::isnan(m.val_ppl)) j["val_ppl"] = nullptr;
  else j["val_ppl"] = m.val_ppl;
  return j;
}

// LSTM stack cost for the parameter tables; first layer reads the unit output.
std::uint64_t context_params(const DefineConfig& model, std::size_t hidden,
                             std::size_t layers) {
  const std::size_t emb = model.use_reduce ? model.out_dim : model.expand_dim;
  std::uint64_t total = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = l == 0 ? emb : hidden;
    total += 4ull * (in * hidden + hidden * hidden + hidden);
  }
  return total;
}

int cmd_train(const std::string& config_path, const Overrides& ov,
              const std::string& out_dir) {
  RunConfig cfg = resolve_config(config_path, ov);
  cfg.validate(true);

  Vocab vocab = Vocab::build(read_text_file(cfg.train_path), cfg.min_count);
  BatchStream train_stream(vocab.encode(read_text_file(cfg.train_path)),
                           cfg.train.batch_size, cfg.train.bptt_len);
  std::optional<BatchStream> val_stream;
  if (!cfg.valid_path.empty())
    val_stream.emplace(vocab.encode(read_text_file(cfg.valid_path)),
                       cfg.train.batch_size, cfg.train.bptt_len);

  cfg.model.vocab_size = vocab.size();
  LanguageModel model(cfg.model, vocab, cfg.hidden_dim, cfg.lstm_layers,
                      cfg.train.seed);

  fs::create_directories(out_dir);
  write_text_file(out_dir + "/config.json", cfg.to_json().dump(2) + "\n");
  write_text_file(out_dir + "/vocab.txt", vocab.dump());

  std::ofstream metrics(out_dir + "/metrics.jsonl", std::ios::binary);
  if (!metrics) throw std::runtime_error("cannot open " + out_dir + "/metrics.jsonl");
  train(model, train_stream, val_stream ? &*val_stream : nullptr, cfg.train,
        [&](const EpochMetrics& m) {
          metrics << metrics_json(m).dump() << "\n";
          metrics.flush();
          nlohmann::json line = metrics_json(m);
          line["seconds"] = m.seconds;
          std::cout << line.dump() << "\n" << std::flush;
        });
  save_model(model, out_dir + "/checkpoint.bin");
  std::cout << "wrote " << out_dir << "/checkpoint.bin (V=" << vocab.size()
            << ", params=" << model.parameter_count() << ")\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& corpus,
             const std::string& cache_path, std::size_t batch, std::size_t bptt) {
  LanguageModel model = load_model(checkpoint);
  BatchStream stream(model.vocab().encode(read_text_file(corpus)), batch, bptt);
  std::optional<EmbeddingCache> cache;
  if (!cache_path.empty()) cache.emplace(load_cache(cache_path));
  const double ppl = evaluate(model, stream, cache ? &*cache : nullptr);
  std::printf("perplexity %.6f\n", ppl);
  return 0;
}

int cmd_export_cache(const std::string& checkpoint, const std::string& out) {
  LanguageModel model = load_model(checkpoint);
  EmbeddingCache cache = export_cache(model.unit());
  save_cache(cache, out);
  std::cout << "wrote " << out << " (V=" << cache.vocab_size
            << ", m=" << cache.dim << ")\n";
  return 0;
}

int cmd_param_count(const std::string& config_path, const Overrides& ov,
                    std::vector<std::string> variants) {
  RunConfig cfg = resolve_config(config_path, ov);
  if (cfg.model.vocab_size == 0) {
    if (cfg.train_path.empty())
      throw std::invalid_argument(
          "param-count needs model.V or corpus.train to size the map table");
    cfg.model.vocab_size =
        Vocab::build(read_text_file(cfg.train_path), cfg.min_count).size();
  }
  if (variants.empty()) variants.push_back(variant_name(cfg.model.variant));
  if (variants.size() == 1 && variants[0] == "all")
    variants = {"LT", "GLT", "GLT_SHUFFLE", "HGT", "HGT_RESIDUAL",
                "DEFINE", "DEFINE_NO_MIXER"};

  for (const auto& name : variants) {
    DefineConfig m = cfg.model;
    m.variant = variant_from_string(name);
    const ParamBreakdown b = define_param_count(m);
    const std::uint64_t context = context_params(m, cfg.hidden_dim, cfg.lstm_layers);
    const std::uint64_t classifier =
        static_cast<std::uint64_t>(cfg.hidden_dim) * m.map_dim;
    std::printf(
        "variant=%s map=%llu expansion=%llu reduce=%llu total=%llu "
        "context=%llu classifier=%llu model_total=%llu\n",
        name.c_str(), (unsigned long long)b.map, (unsigned long long)b.expansion,
        (unsigned long long)b.reduce, (unsigned long long)b.total,
        (unsigned long long)context, (unsigned long long)classifier,
        (unsigned long long)(b.total + context + classifier));
  }
  return 0;
}

int cmd_corr_map(const std::string& checkpoint, const std::string& stage,
                 const std::string& out_dir) {
  LanguageModel model = load_model(checkpoint);
  Tensor table = effective_embedding_table(model.unit(), stage);
  CorrelationMap map = correlation_map(table);
  fs::create_directories(out_dir + "/maps");
  const std::string csv = out_dir + "/maps/" + stage + ".csv";
  const std::string pgm = out_dir + "/maps/" + stage + ".pgm";
  write_map_csv(map, csv);
  write_map_pgm(map, pgm);
  std::cout << "wrote " << csv << " and " << pgm << " (" << map.dim << "x"
            << map.dim << ")\n";
  return 0;
}

int cmd_grad_check(const std::string& config_path, const Overrides& ov,
                   double tolerance) {
  RunConfig cfg = resolve_config(config_path, ov);
  // The check exercises the configured architecture on a synthetic
  // vocabulary. model.V can enlarge it, but with many vocabulary rows the
  // rare-token gradients through the softmax drop below what central
  // differences can resolve, so the default stays small.
  const std::size_t v = cfg.model.vocab_size ? cfg.model.vocab_size : 16;
  std::string dump = "<unk>\t0\t0\n<eos>\t1\t0\n";
  for (std::size_t id = 2; id < v; ++id)
    dump += detail::str("w", id, "\t", id, "\t1\n");
  Vocab vocab = Vocab::parse_dump(dump);
  LanguageModel model(cfg.model, vocab, cfg.hidden_dim, cfg.lstm_layers,
                      cfg.train.seed);
  // condition the check point: finite differences at h=1e-5 cannot resolve
  // the near-zero gradients a freshly initialized model produces
  for (double& v : model.unit().map_table().values()) v *= 20.0;
  for (double& v : model.classifier().projection.values()) v *= 4.0;
  for (auto& l : model.lstm_layers())
    for (double& v : l.weights.values()) v *= 2.0;

  const std::size_t batch = 2, bptt = 3;
  Rng data_rng(cfg.train.seed + 1);
  BatchStream::Window window;
  for (std::size_t i = 0; i < batch * bptt; ++i) {
    window.inputs.push_back(
        static_cast<std::int32_t>(data_rng.next_below(vocab.size())));
    window.targets.push_back(
        static_cast<std::int32_t>(data_rng.next_below(vocab.size())));
  }
  // a random initial state keeps the hidden-to-hidden weight rows live from
  // the first step, where a zero state would leave their gradients below the
  // finite-difference noise floor
  auto initial = model.zero_state(batch);
  for (auto& t : initial.h)
    for (double& x : t.values()) x = data_rng.uniform(-0.5, 0.5);
  for (auto& t : initial.c)
    for (double& x : t.values()) x = data_rng.uniform(-0.5, 0.5);
  auto report = grad_check(
      [&] {
        auto state = initial;
        return model.window_loss(window, batch, bptt, state);
      },
      model.parameters(), tolerance);
  std::cout << report.summary();
  return report.pass ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deep factorized token embeddings with an LSTM LM harness"};
  app.require_subcommand(1);

  Overrides ov;
  std::optional<std::uint64_t> seed_flag;
  std::optional<std::string> variant_flag;

  std::string config_path, out_dir = "run", checkpoint, corpus, cache_path;
  std::string stage, cache_out;
  std::vector<std::string> variants;
  std::size_t eval_batch = 20, eval_bptt = 32;
  double tolerance = 1e-4;

  auto* train_cmd = app.add_subcommand("train", "train a model into a run directory");
  train_cmd->add_option("--config", config_path, "JSON config")->required();
  train_cmd->add_option("--out", out_dir, "run directory (default: run)");
  train_cmd->add_option("--seed", seed_flag, "override train.seed");
  train_cmd->add_option("--variant", variant_flag, "override model.variant");

  auto* eval_cmd = app.add_subcommand("eval", "perplexity of a checkpoint on a corpus");
  eval_cmd->add_option("checkpoint", checkpoint)->required();
  eval_cmd->add_option("corpus", corpus)->required();
  eval_cmd->add_option("--cache", cache_path, "evaluate with a .defc embedding cache");
  eval_cmd->add_option("--batch", eval_batch, "evaluation batch size");
  eval_cmd->add_option("--bptt", eval_bptt, "evaluation window length");

  auto* export_cmd = app.add_subcommand("export-cache", "write the embedding cache of a checkpoint");
  export_cmd->add_option("checkpoint", checkpoint)->required();
  export_cmd->add_option("out", cache_out)->required();

  auto* param_cmd = app.add_subcommand("param-count", "parameter breakdown per variant");
  param_cmd->add_option("--config", config_path, "JSON config")->required();
  param_cmd->add_option("--variant", variants, "variant name, repeatable, or 'all'");
  param_cmd->add_option("--seed", seed_flag, "override train.seed");

  auto* corr_cmd = app.add_subcommand("corr-map", "correlation map of a stage's embedding table");
  corr_cmd->add_option("checkpoint", checkpoint)->required();
  corr_cmd->add_option("--stage", stage, "map, layer<l> or reduce")->required();
  corr_cmd->add_option("--out", out_dir, "output directory (default: run)");

  auto* grad_cmd = app.add_subcommand("grad-check", "finite-difference gradient verification");
  grad_cmd->add_option("--config", config_path, "JSON config")->required();
  grad_cmd->add_option("--tolerance", tolerance, "max relative error (default 1e-4)");
  grad_cmd->add_option("--seed", seed_flag, "override train.seed");

  CLI11_PARSE(app, argc, argv);
  ov.seed = seed_flag;
  ov.variant = variant_flag;

  try {
    if (train_cmd->parsed()) return cmd_train(config_path, ov, out_dir);
    if (eval_cmd->parsed())
      return cmd_eval(checkpoint, corpus, cache_path, eval_batch, eval_bptt);
    if (export_cmd->parsed()) return cmd_export_cache(checkpoint, cache_out);
    if (param_cmd->parsed()) return cmd_param_count(config_path, ov, variants);
    if (corr_cmd->parsed()) return cmd_corr_map(checkpoint, stage, out_dir);
    if (grad_cmd->parsed()) return cmd_grad_check(config_path, ov, tolerance);
  } catch (const std::exception& e) {
    std::cerr << "error: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 1;
}
