#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <string>

#include "define/lm.hpp"
#include "support/oracles.hpp"

using namespace define;

namespace {

DefineConfig tiny_embed_config() {
  DefineConfig cfg;
  cfg.map_dim = 4;
  cfg.expand_dim = 8;
  cfg.out_dim = 4;
  cfg.depth = 2;
  cfg.max_groups = 2;
  cfg.variant = Variant::DEFINE;
  return cfg;
}

LanguageModel tiny_model(std::uint64_t seed = 21, std::size_t hidden = 8) {
  Vocab vocab = Vocab::build("a b c d e f\na b c\n", 1);  // V = 8
  return LanguageModel(tiny_embed_config(), vocab, hidden, 1, seed);
}

// Plain scalar-loop LSTM step, kept independent of the Tensor path.
void scalar_lstm_step(const LstmLayer& layer, const std::vector<double>& x,
                      const std::vector<double>& h_prev,
                      const std::vector<double>& c_prev,
                      std::vector<double>& h_out, std::vector<double>& c_out) {
  const std::size_t in = layer.input_dim, hid = layer.hidden_dim;
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  h_out.resize(hid);
  c_out.resize(hid);
  for (std::size_t j = 0; j < hid; ++j) {
    double pre[4];
    for (int gate = 0; gate < 4; ++gate) {
      const std::size_t col = gate * hid + j;
      double s = layer.bias.at(col);
      for (std::size_t r = 0; r < in; ++r) s += x[r] * layer.weights.at(r, col);
      for (std::size_t r = 0; r < hid; ++r)
        s += h_prev[r] * layer.weights.at(in + r, col);
      pre[gate] = s;
    }
    c_out[j] = sig(pre[1]) * c_prev[j] + sig(pre[0]) * std::tanh(pre[2]);
    h_out[j] = sig(pre[3]) * std::tanh(c_out[j]);
  }
}

}  // namespace

TEST_CASE("lstm step with zero weights emits zeros", "[lm]") {
  Rng rng(1);
  LstmLayer layer(3, 4, rng);
  std::fill(layer.weights.values().begin(), layer.weights.values().end(), 0.0);
  std::fill(layer.bias.values().begin(), layer.bias.values().end(), 0.0);
  auto [h, c] = layer.step(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}),
                           Tensor::zeros({2, 4}));
  for (double v : h.values()) CHECK(v == 0.0);
  for (double v : c.values()) CHECK(v == 0.0);
}

TEST_CASE("lstm parameter count follows 4(mh + hh + h)", "[lm]") {
  Rng rng(2);
  LstmLayer layer(6, 10, rng);
  CHECK(layer.parameter_count() == 4 * (6 * 10 + 10 * 10 + 10));
  CHECK(layer.weights.size() + layer.bias.size() == layer.parameter_count());
}

TEST_CASE("lstm step matches a scalar-loop oracle", "[lm]") {
  Rng rng(3);
  LstmLayer layer(3, 5, rng);
  std::vector<double> x{0.3, -0.7, 1.1}, h0{0.1, -0.2, 0.4, 0.0, -0.9},
      c0{0.5, 0.25, -1.0, 0.0, 2.0};
  auto [h, c] = layer.step(Tensor({1, 3}, x), Tensor({1, 5}, h0), Tensor({1, 5}, c0));
  std::vector<double> h_ref, c_ref;
  scalar_lstm_step(layer, x, h0, c0, h_ref, c_ref);
  for (std::size_t j = 0; j < 5; ++j) {
    CHECK(std::abs(h.at(0, j) - h_ref[j]) < 1e-12);
    CHECK(std::abs(c.at(0, j) - c_ref[j]) < 1e-12);
  }

  // with no carried cell state, c reduces to sigmoid(i) * tanh(g)
  auto [h2, c2] = layer.step(Tensor({1, 3}, x), Tensor({1, 5}, h0),
                             Tensor::zeros({1, 5}));
  std::vector<double> zeros(5, 0.0);
  scalar_lstm_step(layer, x, h0, zeros, h_ref, c_ref);
  for (std::size_t j = 0; j < 5; ++j)
    CHECK(std::abs(c2.at(0, j) - c_ref[j]) < 1e-12);
}

TEST_CASE("tied logits multiply through the projection and the table", "[lm]") {
  TiedClassifier cls;
  cls.projection = Tensor({2, 2}, {1, 0, 0, 1}, true);  // identity: h*P = h
  Tensor table({2, 2}, {1, 0, 0, 1}, true);
  Tensor h({1, 2}, {3, 1});
  Tensor logits = cls.logits(h, table);
  CHECK(logits.values() == std::vector<double>{3, 1});

  // perturbing the shared table moves the logits too
  table.at(1, 0) = 5.0;
  Tensor logits2 = cls.logits(h, table);
  CHECK(logits2.values() == std::vector<double>{3, 16});
}

TEST_CASE("zero projection predicts uniformly", "[lm]") {
  LanguageModel model = tiny_model();
  auto& p = model.classifier().projection;
  std::fill(p.values().begin(), p.values().end(), 0.0);
  const std::size_t v = model.vocab().size();

  std::vector<std::int32_t> ids;
  Rng rng(5);
  for (int i = 0; i < 60; ++i)
    ids.push_back(static_cast<std::int32_t>(rng.next_below(v)));
  BatchStream stream(ids, 2, 4);
  const double ppl = evaluate(model, stream);
  CHECK(std::abs(ppl - static_cast<double>(v)) < 1e-9);
}

TEST_CASE("weight tying allocates only the h x n projection", "[lm]") {
  LanguageModel model = tiny_model(7, 8);
  const std::size_t h = 8, n = 4;
  CHECK(model.classifier().projection.size() == h * n);
  std::size_t expected = model.unit().parameter_count();
  for (const auto& l : model.lstm_layers()) expected += l.parameter_count();
  expected += h * n;
  CHECK(model.parameter_count() == expected);
  // an untied classifier would need h * V instead
  CHECK(h * n < h * model.vocab().size());
}

TEST_CASE("full tied model passes a finite-difference check", "[lm]") {
  // V=8, n=4, k=8, m=4, hidden=8, B=2, T=3
  LanguageModel model = tiny_model(11);
  // Central differences at h=1e-5 resolve gradients down to roughly 1e-6;
  // the check needs an evaluation point whose activations are O(1), so the
  // freshly initialized parameters are scaled up first.
  for (double& v : model.unit().map_table().values()) v *= 20.0;
  for (double& v : model.classifier().projection.values()) v *= 4.0;
  for (auto& l : model.lstm_layers())
    for (double& v : l.weights.values()) v *= 2.0;
  BatchStream::Window window;
  window.inputs = {0, 3, 5, 2, 7, 1};
  window.targets = {3, 5, 6, 7, 1, 4};
  const double err = testsupport::max_grad_rel_err(
      [&] {
        auto state = model.zero_state(2);
        return model.window_loss(window, 2, 3, state);
      },
      model.parameters());
  CHECK(err < 1e-4);
}

TEST_CASE("training lowers perplexity on a periodic corpus", "[lm]") {
  std::string text;
  for (int i = 0; i < 200; ++i) text += "a b\n";
  Vocab vocab = Vocab::build(text, 1);  // V = 4
  auto ids = vocab.encode(text);

  LanguageModel model(tiny_embed_config(), vocab, 8, 1, 31);
  BatchStream stream(ids, 4, 6);
  const double before = evaluate(model, stream);

  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.learning_rate = 1.0;
  cfg.batch_size = 4;
  cfg.bptt_len = 6;
  auto history = train(model, stream, &stream, cfg);
  REQUIRE(history.size() == 3);
  CHECK(history.back().val_ppl < before);
  CHECK(history.back().val_ppl < static_cast<double>(vocab.size()));
}

TEST_CASE("evaluate is free of side effects", "[lm]") {
  LanguageModel model = tiny_model(13);
  std::vector<std::int32_t> ids;
  Rng rng(6);
  for (int i = 0; i < 50; ++i)
    ids.push_back(static_cast<std::int32_t>(rng.next_below(8)));
  BatchStream stream(ids, 2, 4);
  const double a = evaluate(model, stream);
  const double b = evaluate(model, stream);
  CHECK(a == b);
}

TEST_CASE("NaN loss aborts with step and learning rate", "[lm]") {
  LanguageModel model = tiny_model(17);
  model.unit().map_table().at(0, 0) = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::int32_t> ids(40, 0);
  BatchStream stream(ids, 2, 4);
  TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.batch_size = 2;
  cfg.bptt_len = 4;
  CHECK_THROWS_WITH(train(model, stream, nullptr, cfg),
                    Catch::Matchers::ContainsSubstring("step") &&
                        Catch::Matchers::ContainsSubstring("lr=0.5"));
}

TEST_CASE("same seed reproduces the loss trajectory bit for bit", "[lm]") {
  auto run = [](double dropout) {
    std::string text;
    for (int i = 0; i < 120; ++i) text += "u v w x\n";
    Vocab vocab = Vocab::build(text, 1);
    LanguageModel model(tiny_embed_config(), vocab, 8, 1, 99);
    BatchStream stream(vocab.encode(text), 4, 5);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.learning_rate = 0.5;
    cfg.batch_size = 4;
    cfg.bptt_len = 5;
    cfg.dropout = dropout;
    cfg.seed = 99;
    std::vector<double> losses;
    for (const auto& m : train(model, stream, nullptr, cfg))
      losses.push_back(m.train_ppl);
    return std::pair{losses, serialize_model(model)};
  };
  for (double dropout : {0.0, 0.3}) {
    auto [l1, c1] = run(dropout);
    auto [l2, c2] = run(dropout);
    CHECK(std::memcmp(l1.data(), l2.data(), l1.size() * sizeof(double)) == 0);
    CHECK(c1 == c2);
  }
}

TEST_CASE("checkpoints round-trip through the binary blob", "[lm]") {
  LanguageModel model = tiny_model(23);
  std::vector<std::int32_t> ids;
  Rng rng(8);
  for (int i = 0; i < 60; ++i)
    ids.push_back(static_cast<std::int32_t>(rng.next_below(8)));
  BatchStream stream(ids, 2, 4);

  const std::string bytes = serialize_model(model);
  LanguageModel reloaded = parse_model(bytes);
  CHECK(serialize_model(reloaded) == bytes);
  CHECK(evaluate(reloaded, stream) == evaluate(model, stream));
  CHECK(reloaded.vocab().dump() == model.vocab().dump());

  std::string corrupt = bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(parse_model(corrupt), std::runtime_error);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_WITH(parse_model(bad_magic),
                    Catch::Matchers::ContainsSubstring("magic"));
}

TEST_CASE("cached evaluation matches the live unit closely", "[lm]") {
  LanguageModel model = tiny_model(29);
  std::vector<std::int32_t> ids;
  Rng rng(9);
  for (int i = 0; i < 80; ++i)
    ids.push_back(static_cast<std::int32_t>(rng.next_below(8)));
  BatchStream stream(ids, 2, 5);

  EmbeddingCache cache = parse_cache(serialize_cache(export_cache(model.unit())));
  const double live = evaluate(model, stream);
  const double cached = evaluate(model, stream, &cache);
  CHECK(std::abs(live - cached) / live < 1e-6);
}
