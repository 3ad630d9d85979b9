#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "define/corpus.hpp"
#include "define/embedder.hpp"
#include "define/tensor.hpp"

// LSTM language model over the embedding unit. The output classifier is tied
// to the input table: a learned h->n projection is multiplied against the
// same V x n map table the embedder reads, so no V x h output matrix exists
// and both input and output representations train jointly.

namespace define {

struct LstmLayer {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  Tensor weights;  // [(input+hidden) x 4h], gate order i, f, g, o
  Tensor bias;     // [4h], forget slice starts at +1

  LstmLayer(std::size_t input, std::size_t hidden, Rng& rng)
      : input_dim(input), hidden_dim(hidden) {
    const std::size_t rows = input + hidden;
    const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
    std::vector<double> w(rows * 4 * hidden);
    for (double& v : w) v = rng.uniform(-bound, bound);
    weights = Tensor({rows, 4 * hidden}, std::move(w), true);
    std::vector<double> b(4 * hidden, 0.0);
    for (std::size_t i = hidden; i < 2 * hidden; ++i) b[i] = 1.0;
    bias = Tensor({4 * hidden}, std::move(b), true);
  }

  std::size_t parameter_count() const {
    return 4 * (input_dim * hidden_dim + hidden_dim * hidden_dim + hidden_dim);
  }

  // One timestep: c = sigmoid(f)*c_prev + sigmoid(i)*tanh(g),
  // h = sigmoid(o)*tanh(c).
  std::pair<Tensor, Tensor> step(const Tensor& x, const Tensor& h_prev,
                                 const Tensor& c_prev) const {
    if (x.cols() != input_dim || h_prev.cols() != hidden_dim ||
        c_prev.cols() != hidden_dim || x.rows() != h_prev.rows())
      throw std::invalid_argument(detail::str(
          "lstm step: shapes ", detail::shape_str(x.shape()), ", ",
          detail::shape_str(h_prev.shape()), ", ",
          detail::shape_str(c_prev.shape()), " do not fit ", input_dim, "/",
          hidden_dim));
    Tensor pre = add(matmul(concat({x, h_prev}), weights), bias);
    auto gates = split(pre, 4);
    Tensor c = add(mul(sigmoid(gates[1]), c_prev),
                   mul(sigmoid(gates[0]), tanh(gates[2])));
    Tensor h = mul(sigmoid(gates[3]), tanh(c));
    return {h, c};
  }
};

struct TiedClassifier {
  Tensor projection;  // [h x n]

  TiedClassifier() = default;
  TiedClassifier(std::size_t hidden, std::size_t map_dim, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    std::vector<double> p(hidden * map_dim);
    for (double& v : p) v = rng.uniform(-bound, bound);
    projection = Tensor({hidden, map_dim}, std::move(p), true);
  }

  // logits = (h * P) * table^T; gradient reaches both P and the shared table.
  Tensor logits(const Tensor& hidden, const Tensor& map_table) const {
    return matmul_nt(matmul(hidden, projection), map_table);
  }
};

class LanguageModel {
 public:
  LanguageModel(DefineConfig emb_cfg, Vocab vocab, std::size_t hidden_dim,
                std::size_t lstm_layers, std::uint64_t seed)
      : vocab_(std::move(vocab)), hidden_dim_(hidden_dim), seed_(seed) {
    emb_cfg.vocab_size = vocab_.size();
    Rng rng(seed);
    unit_.emplace(emb_cfg, rng);
    if (lstm_layers < 1)
      throw std::invalid_argument("LanguageModel: need at least one LSTM layer");
    for (std::size_t l = 0; l < lstm_layers; ++l)
      lstms_.emplace_back(l == 0 ? unit_->output_dim() : hidden_dim, hidden_dim,
                          rng);
    classifier_ = TiedClassifier(hidden_dim, emb_cfg.map_dim, rng);
  }

  const Vocab& vocab() const { return vocab_; }
  DefineUnit& unit() { return *unit_; }
  const DefineUnit& unit() const { return *unit_; }
  std::vector<LstmLayer>& lstm_layers() { return lstms_; }
  const std::vector<LstmLayer>& lstm_layers() const { return lstms_; }
  TiedClassifier& classifier() { return classifier_; }
  std::size_t hidden_dim() const { return hidden_dim_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> ps = unit_->parameters();
    for (const auto& l : lstms_) {
      ps.push_back(l.weights);
      ps.push_back(l.bias);
    }
    ps.push_back(classifier_.projection);
    return ps;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : parameters()) total += p.size();
    return total;
  }

  struct State {
    std::vector<Tensor> h, c;  // per layer, [B x hidden]
  };

  State zero_state(std::size_t batch) const {
    State s;
    for (std::size_t l = 0; l < lstms_.size(); ++l) {
      s.h.push_back(Tensor::zeros({batch, hidden_dim_}));
      s.c.push_back(Tensor::zeros({batch, hidden_dim_}));
    }
    return s;
  }

  // Mean NLL over one BPTT window. ids/targets are row-major [B x T]. The
  // state is advanced and detached in place. When cache is given the
  // embedding unit is skipped and rows come from the lookup table instead.
  // dropout_rng enables inverted dropout on each LSTM layer output.
  Tensor window_loss(const BatchStream::Window& window, std::size_t batch,
                     std::size_t bptt, State& state,
                     const EmbeddingCache* cache = nullptr,
                     double dropout = 0.0, Rng* dropout_rng = nullptr) const {
    // time-major flattening so step t is a contiguous row block
    std::vector<std::int32_t> ids(batch * bptt), targets(batch * bptt);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < bptt; ++t) {
        ids[t * batch + b] = window.inputs[b * bptt + t];
        targets[t * batch + b] = window.targets[b * bptt + t];
      }
    Tensor embedded = cache ? cached_embed(*cache, ids) : unit_->embed(ids);

    std::vector<Tensor> tops;
    tops.reserve(bptt);
    for (std::size_t t = 0; t < bptt; ++t) {
      Tensor x = slice_rows(embedded, t * batch, batch);
      for (std::size_t l = 0; l < lstms_.size(); ++l) {
        auto [h, c] = lstms_[l].step(x, state.h[l], state.c[l]);
        if (dropout > 0.0 && dropout_rng) h = mul(h, dropout_mask(h, dropout, *dropout_rng));
        state.h[l] = h;
        state.c[l] = c;
        x = h;
      }
      tops.push_back(x);
    }
    Tensor logits = classifier_.logits(concat_rows(tops), unit_->map_table());
    Tensor loss = softmax_cross_entropy(logits, targets);
    for (std::size_t l = 0; l < lstms_.size(); ++l) {
      state.h[l] = state.h[l].detach();
      state.c[l] = state.c[l].detach();
    }
    return loss;
  }

 private:
  static Tensor dropout_mask(const Tensor& like, double p, Rng& rng) {
    std::vector<double> m(like.size());
    const double keep = 1.0 - p;
    for (double& v : m) v = rng.next_double() < p ? 0.0 : 1.0 / keep;
    return Tensor(like.shape(), std::move(m));
  }

  Vocab vocab_;
  std::optional<DefineUnit> unit_;
  std::vector<LstmLayer> lstms_;
  TiedClassifier classifier_;
  std::size_t hidden_dim_ = 0;
  std::uint64_t seed_ = 0;
};

// ---- training ----

struct TrainConfig {
  std::size_t epochs = 1;
  double learning_rate = 1.0;
  double clip_norm = 0.25;
  double momentum = 0.0;  // used by SGD_MOMENTUM
  std::string optimizer = "SGD";  // SGD or SGD_MOMENTUM
  std::size_t batch_size = 20;
  std::size_t bptt_len = 32;
  double dropout = 0.0;
  std::uint64_t seed = 0;

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (epochs < 1) out.push_back("epochs must be >= 1");
    if (!(learning_rate > 0)) out.push_back("lr must be positive");
    if (!(clip_norm > 0)) out.push_back("clip must be positive");
    if (batch_size < 1) out.push_back("batch must be >= 1");
    if (bptt_len < 1) out.push_back("bptt must be >= 1");
    if (dropout < 0 || dropout >= 1) out.push_back("dropout must be in [0, 1)");
    if (optimizer != "SGD" && optimizer != "SGD_MOMENTUM")
      out.push_back("optimizer must be SGD or SGD_MOMENTUM");
    if (momentum < 0 || momentum >= 1) out.push_back("momentum must be in [0, 1)");
    return out;
  }

  void validate() const {
    auto issues = problems();
    if (issues.empty()) return;
    std::string msg = "invalid train config:";
    for (const auto& p : issues) msg += "\n  - " + p;
    throw std::invalid_argument(msg);
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_ppl = 0.0;
  double val_ppl = 0.0;  // NaN when no validation stream was given
  double seconds = 0.0;
};

// Perplexity over every window of the stream; free of side effects.
inline double evaluate(const LanguageModel& model, const BatchStream& stream,
                       const EmbeddingCache* cache = nullptr) {
  Tape::NoGradGuard no_grad;
  auto state = model.zero_state(stream.batch_size());
  double total_nll = 0.0;
  for (std::size_t w = 0; w < stream.window_count(); ++w) {
    auto window = stream.window(w);
    total_nll += model
                     .window_loss(window, stream.batch_size(), stream.bptt_len(),
                                  state, cache)
                     .item();
  }
  return std::exp(total_nll / static_cast<double>(stream.window_count()));
}

namespace detail {

inline void clip_gradients(const std::vector<Tensor>& params, double clip) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.has_grad())
      for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm <= clip) return;
  const double scale = clip / norm;
  for (auto p : params)
    if (p.has_grad())
      for (double& g : p.ensure_grad()) g *= scale;
}

}  // namespace detail

// Truncated-BPTT SGD. Deterministic under the config seed: the data order,
// parameter init and dropout masks are all derived from it.
inline std::vector<EpochMetrics> train(
    LanguageModel& model, const BatchStream& train_stream,
    const BatchStream* val_stream, const TrainConfig& cfg,
    const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  cfg.validate();
  auto params = model.parameters();
  std::vector<std::vector<double>> velocity;
  if (cfg.optimizer == "SGD_MOMENTUM")
    for (const auto& p : params) velocity.emplace_back(p.size(), 0.0);

  Rng dropout_rng = Rng(cfg.seed).fork(0x0d0);
  std::vector<EpochMetrics> history;
  std::size_t global_step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    auto state = model.zero_state(train_stream.batch_size());
    double epoch_nll = 0.0;
    for (std::size_t w = 0; w < train_stream.window_count(); ++w, ++global_step) {
      auto window = train_stream.window(w);
      for (auto p : params) p.zero_grad();
      Tape tape;
      Tensor loss = model.window_loss(window, train_stream.batch_size(),
                                      train_stream.bptt_len(), state, nullptr,
                                      cfg.dropout,
                                      cfg.dropout > 0 ? &dropout_rng : nullptr);
      const double loss_value = loss.item();
      if (std::isnan(loss_value))
        throw std::runtime_error(detail::str(
            "NaN loss at step ", global_step, " (epoch ", epoch, ", window ", w,
            "), lr=", cfg.learning_rate));
      epoch_nll += loss_value;
      backward(loss);
      detail::clip_gradients(params, cfg.clip_norm);
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].has_grad()) continue;
        auto& vals = params[i].values();
        const auto& grad = params[i].grad();
        if (velocity.empty()) {
          for (std::size_t j = 0; j < vals.size(); ++j)
            vals[j] -= cfg.learning_rate * grad[j];
        } else {
          for (std::size_t j = 0; j < vals.size(); ++j) {
            velocity[i][j] = cfg.momentum * velocity[i][j] + grad[j];
            vals[j] -= cfg.learning_rate * velocity[i][j];
          }
        }
      }
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_ppl =
        std::exp(epoch_nll / static_cast<double>(train_stream.window_count()));
    m.val_ppl = val_stream ? evaluate(model, *val_stream)
                           : std::numeric_limits<double>::quiet_NaN();
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                              started)
                    .count();
    history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return history;
}

// ---- checkpoint serialization ----
//
// Single blob, little-endian:
//   "DEFM" | u32 version=1 | header fields | vocab dump | u64 count | f64...
// Parameter arrays follow declaration order: map table, expansion layers
// (group matrices then bias, layer by layer), reduce, per-LSTM weights and
// bias, classifier projection.

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t& off) {
  if (off + 8 > in.size())
    throw std::runtime_error(detail::str("checkpoint truncated at offset ", off));
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  off += 8;
  return v;
}

}  // namespace detail

inline std::string serialize_model(const LanguageModel& model) {
  const DefineConfig& cfg = model.unit().config();
  std::string out = "DEFM";
  detail::put_u32(out, 1);
  detail::put_u64(out, cfg.vocab_size);
  detail::put_u64(out, cfg.map_dim);
  detail::put_u64(out, cfg.expand_dim);
  detail::put_u64(out, cfg.out_dim);
  detail::put_u64(out, cfg.depth);
  detail::put_u64(out, cfg.max_groups);
  detail::put_u64(out, model.hidden_dim());
  detail::put_u64(out, model.lstm_layers().size());
  detail::put_u64(out, model.seed());
  out.push_back(static_cast<char>(cfg.variant));
  out.push_back(cfg.use_reduce ? 1 : 0);
  out.push_back(cfg.use_bias ? 1 : 0);
  out.push_back(cfg.use_activation ? 1 : 0);
  const auto dims = cfg.resolved_dims();
  detail::put_u32(out, static_cast<std::uint32_t>(dims.size()));
  for (std::size_t d : dims) detail::put_u64(out, d);
  const std::string vocab_dump = model.vocab().dump();
  detail::put_u64(out, vocab_dump.size());
  out += vocab_dump;
  detail::put_u64(out, model.parameter_count());
  for (const auto& p : model.parameters())
    for (double v : p.values())
      detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline LanguageModel parse_model(const std::string& bytes) {
  if (bytes.size() < 8 || bytes.compare(0, 4, "DEFM") != 0)
    throw std::runtime_error("checkpoint format error at offset 0: bad magic");
  if (detail::get_u32(bytes, 4) != 1)
    throw std::runtime_error("checkpoint format error at offset 4: unsupported version");
  std::size_t off = 8;
  DefineConfig cfg;
  cfg.vocab_size = detail::get_u64(bytes, off);
  cfg.map_dim = detail::get_u64(bytes, off);
  cfg.expand_dim = detail::get_u64(bytes, off);
  cfg.out_dim = detail::get_u64(bytes, off);
  cfg.depth = detail::get_u64(bytes, off);
  cfg.max_groups = detail::get_u64(bytes, off);
  const std::size_t hidden = detail::get_u64(bytes, off);
  const std::size_t layers = detail::get_u64(bytes, off);
  const std::uint64_t seed = detail::get_u64(bytes, off);
  if (off + 4 > bytes.size())
    throw std::runtime_error(detail::str("checkpoint truncated at offset ", off));
  cfg.variant = static_cast<Variant>(bytes[off++]);
  cfg.use_reduce = bytes[off++] != 0;
  cfg.use_bias = bytes[off++] != 0;
  cfg.use_activation = bytes[off++] != 0;
  const std::uint32_t dims_count = detail::get_u32(bytes, off);
  off += 4;
  cfg.dims.clear();
  for (std::uint32_t i = 0; i < dims_count; ++i)
    cfg.dims.push_back(detail::get_u64(bytes, off));
  const std::uint64_t vocab_len = detail::get_u64(bytes, off);
  if (off + vocab_len > bytes.size())
    throw std::runtime_error(detail::str("checkpoint truncated at offset ", off));
  Vocab vocab = Vocab::parse_dump(bytes.substr(off, vocab_len));
  off += vocab_len;

  LanguageModel model(cfg, std::move(vocab), hidden, layers, seed);
  const std::uint64_t count = detail::get_u64(bytes, off);
  if (count != model.parameter_count())
    throw std::runtime_error(detail::str(
        "checkpoint holds ", count, " parameters but the config implies ",
        model.parameter_count()));
  for (auto p : model.parameters())
    for (double& v : p.values())
      v = std::bit_cast<double>(detail::get_u64(bytes, off));
  if (off != bytes.size())
    throw std::runtime_error(detail::str(
        "checkpoint has ", bytes.size() - off, " trailing bytes at offset ", off));
  return model;
}

inline void save_model(const LanguageModel& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  const std::string bytes = serialize_model(model);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline LanguageModel load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  return parse_model(bytes);
}

}  // namespace define
