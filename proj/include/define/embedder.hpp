#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "define/rng.hpp"
#include "define/tensor.hpp"
#include "define/transforms.hpp"

// The map-expand-reduce embedding unit: a small lookup table (width n) is
// expanded through a group-transform stack to width k and projected down to
// the output width m. The DEFINE variants add a skip connection that feeds
// the original table row into every expansion layer: input and previous
// output are chunked per group and interleaved (the mixer), so each group
// sees both. DEFINE_NO_MIXER concatenates input and previous output first
// and chunks the result, which costs the same parameters but denies most
// groups direct access to the input.

namespace define {

struct DefineConfig {
  std::size_t vocab_size = 0;   // V
  std::size_t map_dim = 0;      // n, width of the lookup table
  std::size_t expand_dim = 0;   // k, widest expansion layer
  std::size_t out_dim = 0;      // m, embedding width handed to the context model
  std::size_t depth = 1;        // N, number of expansion layers
  std::size_t max_groups = 1;   // g_max
  Variant variant = Variant::DEFINE;
  bool use_reduce = true;       // project k -> m; otherwise the unit emits k wide
  bool use_bias = false;
  bool use_activation = false;  // tanh after every expansion layer
  std::uint64_t shuffle_seed = 0;  // GLT_SHUFFLE boundary permutations
  std::vector<std::size_t> dims;  // optional explicit widths, length depth+1

  std::vector<std::size_t> resolved_groups() const {
    switch (variant) {
      case Variant::LT: return std::vector<std::size_t>(depth, 1);
      case Variant::GLT:
      case Variant::GLT_SHUFFLE: return std::vector<std::size_t>(depth, max_groups);
      default: return group_schedule(max_groups, depth);
    }
  }

  std::vector<std::size_t> resolved_dims() const {
    if (!dims.empty()) return dims;
    if (variant == Variant::HGT_RESIDUAL) {
      std::vector<std::size_t> d(depth + 1, expand_dim / 2);
      d.front() = map_dim;
      d.back() = expand_dim;
      return d;
    }
    return dim_schedule(map_dim, expand_dim, depth, max_groups);
  }

  // Collects every violated constraint; empty means valid.
  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (vocab_size < 1) out.push_back("vocab_size must be >= 1");
    if (map_dim < 1) out.push_back("n must be >= 1");
    if (expand_dim < 1) out.push_back("k must be >= 1");
    if (depth < 1) out.push_back("N must be >= 1");
    if (max_groups < 1) out.push_back("g_max must be >= 1");
    if (map_dim > expand_dim)
      out.push_back(detail::str("n=", map_dim, " must not exceed k=", expand_dim));
    if (max_groups >= 1 && map_dim % max_groups != 0)
      out.push_back(detail::str("n=", map_dim, " must be divisible by g_max=", max_groups));
    if (max_groups >= 1 && expand_dim % max_groups != 0)
      out.push_back(detail::str("k=", expand_dim, " must be divisible by g_max=", max_groups));
    if (use_reduce && out_dim < 1) out.push_back("m must be >= 1");
    if (!use_reduce && out_dim != expand_dim)
      out.push_back(detail::str("without the reduce step m must equal k, got m=",
                                out_dim, " k=", expand_dim));
    if (variant == Variant::HGT_RESIDUAL) {
      if (expand_dim % 2 != 0)
        out.push_back(detail::str("HGT_RESIDUAL needs even k, got ", expand_dim));
      else if (depth > 1 && map_dim > expand_dim / 2)
        out.push_back(detail::str("HGT_RESIDUAL needs n <= k/2, got n=", map_dim,
                                  " k/2=", expand_dim / 2));
    }
    if (!dims.empty()) {
      if (dims.size() != depth + 1)
        out.push_back(detail::str("explicit dims must have N+1=", depth + 1,
                                  " entries, got ", dims.size()));
      else if (dims.front() != map_dim || dims.back() != expand_dim)
        out.push_back(detail::str("explicit dims must start at n=", map_dim,
                                  " and end at k=", expand_dim));
    }
    if (out.empty()) {
      const auto ds = resolved_dims();
      const auto gs = resolved_groups();
      for (std::size_t l = 0; l < depth; ++l) {
        const bool mixer_in = !is_stack_variant(variant) && l > 0;
        const std::size_t in = mixer_in ? map_dim + ds[l] : ds[l];
        if (in % gs[l] != 0 || ds[l + 1] % gs[l] != 0 ||
            (mixer_in && ds[l] % gs[l] != 0))
          out.push_back(detail::str("layer ", l + 1, ": widths ", in, "->",
                                    ds[l + 1], " not divisible by g=", gs[l]));
      }
    }
    return out;
  }

  void validate() const {
    const auto issues = problems();
    if (issues.empty()) return;
    std::string msg = "invalid embedding config:";
    for (const auto& p : issues) msg += "\n  - " + p;
    throw std::invalid_argument(msg);
  }
};

struct ParamBreakdown {
  std::uint64_t map = 0;
  std::uint64_t expansion = 0;
  std::uint64_t reduce = 0;
  std::uint64_t total = 0;
};

// Closed-form count. DEFINE layers past the first take n extra input columns
// for the skip connection; DEFINE and DEFINE_NO_MIXER cost the same.
inline ParamBreakdown define_param_count(const DefineConfig& cfg) {
  cfg.validate();
  const auto dims = cfg.resolved_dims();
  const auto groups = cfg.resolved_groups();
  ParamBreakdown b;
  b.map = static_cast<std::uint64_t>(cfg.vocab_size) * cfg.map_dim;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const bool mixer_in = !is_stack_variant(cfg.variant) && l > 0;
    const std::uint64_t in = mixer_in ? cfg.map_dim + dims[l] : dims[l];
    b.expansion += in * dims[l + 1] / groups[l];
    if (cfg.use_bias) b.expansion += dims[l + 1];
  }
  if (cfg.use_reduce)
    b.reduce = static_cast<std::uint64_t>(cfg.expand_dim) * cfg.out_dim;
  b.total = b.map + b.expansion + b.reduce;
  return b;
}

class DefineUnit {
 public:
  DefineUnit(DefineConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    dims_ = cfg_.resolved_dims();
    groups_ = cfg_.resolved_groups();

    std::vector<double> tbl(cfg_.vocab_size * cfg_.map_dim);
    for (double& v : tbl) v = rng.uniform(-0.1, 0.1);
    map_table_ = Tensor({cfg_.vocab_size, cfg_.map_dim}, std::move(tbl), true);

    if (is_stack_variant(cfg_.variant)) {
      TransformSpec spec;
      spec.variant = cfg_.variant;
      spec.depth = cfg_.depth;
      spec.dims = dims_;
      spec.groups = groups_;
      spec.fixed_g = cfg_.max_groups;
      spec.shuffle_seed = cfg_.shuffle_seed;
      spec.use_bias = cfg_.use_bias;
      spec.use_activation = cfg_.use_activation;
      stack_.emplace(spec, rng);
    } else {
      for (std::size_t l = 0; l < cfg_.depth; ++l) {
        const std::size_t in = l == 0 ? cfg_.map_dim : cfg_.map_dim + dims_[l];
        mixer_layers_.emplace_back(groups_[l], in, dims_[l + 1], rng,
                                   cfg_.use_bias);
      }
    }
    if (cfg_.use_reduce)
      reduce_.emplace(1, cfg_.expand_dim, cfg_.out_dim, rng, false);
  }

  static DefineUnit with_seed(const DefineConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    return DefineUnit(cfg, rng);
  }

  const DefineConfig& config() const { return cfg_; }
  const std::vector<std::size_t>& layer_dims() const { return dims_; }
  const std::vector<std::size_t>& layer_groups() const { return groups_; }
  Tensor& map_table() { return map_table_; }
  const Tensor& map_table() const { return map_table_; }
  GroupLinearLayer* reduce_layer() { return reduce_ ? &*reduce_ : nullptr; }

  std::vector<GroupLinearLayer>& expansion_layers() {
    return stack_ ? stack_->layers() : mixer_layers_;
  }
  const std::vector<GroupLinearLayer>& expansion_layers() const {
    return stack_ ? stack_->layers() : mixer_layers_;
  }

  // Expansion over rows of e_in [B x n]; taps receives every layer output.
  Tensor expand(const Tensor& e_in, std::vector<Tensor>* taps = nullptr) const {
    if (stack_) return stack_->forward(e_in, taps);
    Tensor prev = e_in;  // first layer sees the table row alone
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      Tensor out = l == 0 ? group_transform(prev, mixer_layers_[0])
                          : mixer_forward(e_in, prev, l);
      if (cfg_.use_activation) out = tanh(out);
      if (taps) taps->push_back(out);
      prev = out;
    }
    return prev;
  }

  Tensor reduce(const Tensor& expanded) const {
    return reduce_ ? group_transform(expanded, *reduce_) : expanded;
  }

  // Full map-expand-reduce for a batch of token ids -> [B x m].
  Tensor embed(const std::vector<std::int32_t>& ids) const {
    return reduce(expand(embedding_lookup(map_table_, ids)));
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> ps{map_table_};
    for (const auto& layer : expansion_layers())
      for (const auto& p : layer.parameters()) ps.push_back(p);
    if (reduce_) ps.push_back(reduce_->weights[0]);
    return ps;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : parameters()) total += p.size();
    return total;
  }

  std::size_t output_dim() const { return cfg_.use_reduce ? cfg_.out_dim : cfg_.expand_dim; }

 private:
  // Skip-connected layer l (l >= 1): per group j the input is
  // [chunk_j(e_in), chunk_j(prev)]. Without the mixer the two are
  // concatenated first and chunked as one vector.
  Tensor mixer_forward(const Tensor& e_in, const Tensor& prev, std::size_t l) const {
    const GroupLinearLayer& layer = mixer_layers_[l];
    const std::size_t g = layer.groups;
    if (g == 1 || cfg_.variant == Variant::DEFINE_NO_MIXER)
      return group_transform(concat({e_in, prev}), layer);
    if (e_in.cols() % g != 0 || prev.cols() % g != 0)
      throw std::invalid_argument(detail::str(
          "layer ", l + 1, ": widths ", e_in.cols(), " and ", prev.cols(),
          " not divisible by g=", g));
    auto e_chunks = split(e_in, g);
    auto p_chunks = split(prev, g);
    std::vector<Tensor> results;
    results.reserve(g);
    for (std::size_t j = 0; j < g; ++j)
      results.push_back(
          matmul(concat({e_chunks[j], p_chunks[j]}), layer.weights[j]));
    Tensor out = concat(results);
    if (layer.use_bias) out = add(out, layer.bias);
    return out;
  }

  DefineConfig cfg_;
  std::vector<std::size_t> dims_;
  std::vector<std::size_t> groups_;
  Tensor map_table_;
  std::optional<TransformStack> stack_;       // plain variants
  std::vector<GroupLinearLayer> mixer_layers_;  // DEFINE variants
  std::optional<GroupLinearLayer> reduce_;
};

// ---- embedding cache ----
//
// File layout, all little-endian:
//   "DEFC" | u32 version=1 | u32 V | u32 m | V*m f32 row-major | u32 crc
// The CRC-32 covers the V*m*4 payload bytes.

struct EmbeddingCache {
  std::size_t vocab_size = 0;
  std::size_t dim = 0;
  std::vector<double> rows;  // f64 in memory, f32 on disk

  const double* row(std::size_t v) const { return rows.data() + v * dim; }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t off) {
  if (off + 4 > in.size())
    throw std::runtime_error(str("format error: truncated at offset ", off));
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return v;
}

}  // namespace detail

// Computes every row of the cache by running the unit over the vocabulary in
// id order. Rows are independent, so fixed 256-id chunks may be evaluated by
// several workers without changing the result.
inline EmbeddingCache export_cache(const DefineUnit& unit) {
  EmbeddingCache cache;
  cache.vocab_size = unit.config().vocab_size;
  cache.dim = unit.output_dim();
  cache.rows.assign(cache.vocab_size * cache.dim, 0.0);
  Tape::NoGradGuard no_grad;
  detail::parallel_blocks(cache.vocab_size, 256, [&](std::size_t lo, std::size_t hi) {
    std::vector<std::int32_t> ids(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) ids[i - lo] = static_cast<std::int32_t>(i);
    Tensor out = unit.embed(ids);
    std::copy_n(out.values().data(), out.size(), cache.rows.data() + lo * cache.dim);
  });
  return cache;
}

inline std::string serialize_cache(const EmbeddingCache& cache) {
  std::string out = "DEFC";
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(cache.vocab_size));
  detail::put_u32(out, static_cast<std::uint32_t>(cache.dim));
  const std::size_t payload_off = out.size();
  for (double v : cache.rows)
    detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  detail::put_u32(out, detail::crc32(out.data() + payload_off, out.size() - payload_off));
  return out;
}

inline EmbeddingCache parse_cache(const std::string& bytes) {
  auto fail = [](std::size_t offset, const std::string& what) {
    throw std::runtime_error(detail::str(
        "cache format error at offset ", offset, ": ", what));
  };
  if (bytes.size() < 16) fail(bytes.size(), "file shorter than the fixed header");
  if (bytes.compare(0, 4, "DEFC") != 0) fail(0, "bad magic, expected \"DEFC\"");
  if (detail::get_u32(bytes, 4) != 1)
    fail(4, detail::str("unsupported version ", detail::get_u32(bytes, 4)));
  const std::uint64_t v = detail::get_u32(bytes, 8);
  const std::uint64_t m = detail::get_u32(bytes, 12);
  const std::uint64_t payload = v * m * 4;
  if (bytes.size() != 16 + payload + 4)
    fail(bytes.size(), detail::str("expected ", 16 + payload + 4, " bytes for V=",
                                   v, " m=", m, ", got ", bytes.size()));
  const std::uint32_t want = detail::get_u32(bytes, 16 + payload);
  const std::uint32_t got = detail::crc32(bytes.data() + 16, payload);
  if (want != got)
    fail(16 + payload, detail::str("payload CRC mismatch, stored ", want,
                                   " computed ", got));
  EmbeddingCache cache;
  cache.vocab_size = v;
  cache.dim = m;
  cache.rows.resize(v * m);
  for (std::size_t i = 0; i < cache.rows.size(); ++i)
    cache.rows[i] = static_cast<double>(
        std::bit_cast<float>(detail::get_u32(bytes, 16 + i * 4)));
  return cache;
}

inline void save_cache(const EmbeddingCache& cache, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  const std::string bytes = serialize_cache(cache);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline EmbeddingCache load_cache(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  return parse_cache(bytes);
}

// Pure table lookup, no unit computation.
inline Tensor cached_embed(const EmbeddingCache& cache,
                           const std::vector<std::int32_t>& ids) {
  Tensor out = Tensor::zeros({ids.size(), cache.dim});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= cache.vocab_size)
      throw std::out_of_range(detail::str("cached_embed: id ", ids[i],
                                          " outside vocabulary of size ",
                                          cache.vocab_size));
    std::copy_n(cache.row(static_cast<std::size_t>(ids[i])), cache.dim,
                out.values().data() + i * cache.dim);
  }
  return out;
}

}  // namespace define
