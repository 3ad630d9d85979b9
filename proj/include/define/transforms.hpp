#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "define/rng.hpp"
#include "define/tensor.hpp"

// Group linear transform stacks. A group linear layer chunks its input into g
// groups, multiplies each chunk by its own weight matrix and concatenates the
// results, which is a block-diagonal matrix product. Stacks differ in how the
// group count evolves with depth:
//
//   LT            one group everywhere (dense layers)
//   GLT           fixed group count g at every layer
//   GLT_SHUFFLE   GLT with a fixed random feature permutation between layers
//   HGT           group count halves per layer, g_max down to 1
//   HGT_RESIDUAL  HGT schedule, interior widths pinned to k/2 so equal-width
//                 neighbours can be bridged with additive skips

namespace define {

enum class Variant {
  LT,
  GLT,
  GLT_SHUFFLE,
  HGT,
  HGT_RESIDUAL,
  DEFINE,
  DEFINE_NO_MIXER,
};

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::LT: return "LT";
    case Variant::GLT: return "GLT";
    case Variant::GLT_SHUFFLE: return "GLT_SHUFFLE";
    case Variant::HGT: return "HGT";
    case Variant::HGT_RESIDUAL: return "HGT_RESIDUAL";
    case Variant::DEFINE: return "DEFINE";
    case Variant::DEFINE_NO_MIXER: return "DEFINE_NO_MIXER";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  for (Variant v : {Variant::LT, Variant::GLT, Variant::GLT_SHUFFLE,
                    Variant::HGT, Variant::HGT_RESIDUAL, Variant::DEFINE,
                    Variant::DEFINE_NO_MIXER})
    if (s == variant_name(v)) return v;
  throw std::invalid_argument(detail::str(
      "unknown variant \"", s,
      "\" (expected LT, GLT, GLT_SHUFFLE, HGT, HGT_RESIDUAL, DEFINE or "
      "DEFINE_NO_MIXER)"));
}

// True for the plain stack variants; DEFINE/DEFINE_NO_MIXER wire a skip
// connection back to the original input and live in embedder.hpp.
inline bool is_stack_variant(Variant v) {
  return v != Variant::DEFINE && v != Variant::DEFINE_NO_MIXER;
}

struct GroupLinearLayer {
  std::size_t groups = 1;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::vector<Tensor> weights;  // g matrices of (in/g) x (out/g)
  Tensor bias;                  // [out_dim], present iff use_bias
  bool use_bias = false;

  GroupLinearLayer(std::size_t g, std::size_t in, std::size_t out, Rng& rng,
                   bool with_bias = false)
      : groups(g), in_dim(in), out_dim(out), use_bias(with_bias) {
    if (g == 0 || in % g != 0 || out % g != 0)
      throw std::invalid_argument(detail::str(
          "GroupLinearLayer: dims ", in, "->", out, " not divisible by ", g,
          " groups"));
    const std::size_t gin = in / g, gout = out / g;
    const double bound = 1.0 / std::sqrt(static_cast<double>(gin));
    for (std::size_t j = 0; j < g; ++j) {
      std::vector<double> w(gin * gout);
      for (double& x : w) x = rng.uniform(-bound, bound);
      weights.emplace_back(std::vector<std::size_t>{gin, gout}, std::move(w), true);
    }
    if (use_bias) bias = Tensor::zeros({out}, true);
  }

  std::size_t parameter_count() const {
    return in_dim * out_dim / groups + (use_bias ? out_dim : 0);
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> ps(weights.begin(), weights.end());
    if (use_bias) ps.push_back(bias);
    return ps;
  }
};

// F_G: chunk, per-group product, concatenate. Equals a dense product against
// the block-diagonal assembly of the group matrices.
inline Tensor group_transform(const Tensor& x, const GroupLinearLayer& layer) {
  if (x.cols() != layer.in_dim)
    throw std::invalid_argument(detail::str(
        "group_transform: input width ", x.cols(), " does not match layer ",
        layer.in_dim, "->", layer.out_dim));
  Tensor out;
  if (layer.groups == 1) {
    out = matmul(x, layer.weights[0]);
  } else {
    std::vector<Tensor> chunks = split(x, layer.groups);
    std::vector<Tensor> results;
    results.reserve(layer.groups);
    for (std::size_t j = 0; j < layer.groups; ++j)
      results.push_back(matmul(chunks[j], layer.weights[j]));
    out = concat(results);
  }
  if (layer.use_bias) out = add(out, layer.bias);
  return out;
}

// g_l = max(floor(g_max / 2^(l-1)), 1) for l = 1..depth.
inline std::vector<std::size_t> group_schedule(std::size_t g_max, std::size_t depth) {
  if (g_max < 1 || depth < 1)
    throw std::invalid_argument("group_schedule: g_max and depth must be >= 1");
  std::vector<std::size_t> gs(depth);
  for (std::size_t l = 0; l < depth; ++l) {
    const std::size_t halvings = l < 63 ? l : 63;
    gs[l] = std::max<std::size_t>(g_max >> halvings, 1);
  }
  return gs;
}

// Linearly spaced widths from n to k, interior entries snapped to the nearest
// multiple of g_max (ties round up). Integer arithmetic throughout.
inline std::vector<std::size_t> dim_schedule(std::size_t n, std::size_t k,
                                             std::size_t depth, std::size_t g_max) {
  if (depth < 1 || g_max < 1)
    throw std::invalid_argument("dim_schedule: depth and g_max must be >= 1");
  if (n > k)
    throw std::invalid_argument(detail::str("dim_schedule: n=", n, " exceeds k=", k));
  if (n % g_max != 0 || k % g_max != 0)
    throw std::invalid_argument(detail::str(
        "dim_schedule: n=", n, " and k=", k, " must be divisible by g_max=", g_max));
  std::vector<std::size_t> dims(depth + 1);
  dims[0] = n;
  dims[depth] = k;
  for (std::size_t l = 1; l < depth; ++l) {
    const std::uint64_t num = static_cast<std::uint64_t>(n) * (depth - l) +
                              static_cast<std::uint64_t>(k) * l;  // raw = num/depth
    const std::uint64_t step = static_cast<std::uint64_t>(g_max) * depth;
    dims[l] = static_cast<std::size_t>((2 * num + step) / (2 * step)) * g_max;
  }
  return dims;
}

struct TransformSpec {
  Variant variant = Variant::HGT;
  std::size_t depth = 1;              // N
  std::vector<std::size_t> dims;      // N+1 widths
  std::vector<std::size_t> groups;    // N group counts
  std::size_t fixed_g = 1;            // GLT variants
  std::uint64_t shuffle_seed = 0;     // GLT_SHUFFLE
  bool use_bias = false;
  bool use_activation = false;        // tanh after each layer (and its skip)

  void validate() const {
    if (!is_stack_variant(variant))
      throw std::invalid_argument(detail::str(
          variant_name(variant), " is not a plain stack variant"));
    if (depth < 1 || dims.size() != depth + 1 || groups.size() != depth)
      throw std::invalid_argument(detail::str(
          "TransformSpec: depth ", depth, " needs ", depth + 1, " dims and ",
          depth, " group counts, got ", dims.size(), " and ", groups.size()));
    for (std::size_t l = 0; l < depth; ++l) {
      if (groups[l] < 1)
        throw std::invalid_argument(detail::str("TransformSpec: layer ", l + 1,
                                                " has zero groups"));
      if (dims[l] % groups[l] != 0 || dims[l + 1] % groups[l] != 0)
        throw std::invalid_argument(detail::str(
            "TransformSpec: layer ", l + 1, " dims ", dims[l], "->", dims[l + 1],
            " not divisible by g=", groups[l]));
    }
  }

  // Builds the conventional spec for a variant from the four knobs.
  static TransformSpec make(Variant v, std::size_t n, std::size_t k,
                            std::size_t depth, std::size_t g_max,
                            std::uint64_t shuffle_seed = 0, bool use_bias = false) {
    TransformSpec s;
    s.variant = v;
    s.depth = depth;
    s.shuffle_seed = shuffle_seed;
    s.use_bias = use_bias;
    switch (v) {
      case Variant::LT:
        s.dims = dim_schedule(n, k, depth, g_max);
        s.groups.assign(depth, 1);
        s.fixed_g = 1;
        break;
      case Variant::GLT:
      case Variant::GLT_SHUFFLE:
        s.dims = dim_schedule(n, k, depth, g_max);
        s.groups.assign(depth, g_max);
        s.fixed_g = g_max;
        break;
      case Variant::HGT:
        s.dims = dim_schedule(n, k, depth, g_max);
        s.groups = group_schedule(g_max, depth);
        break;
      case Variant::HGT_RESIDUAL: {
        if (k % 2 != 0)
          throw std::invalid_argument(detail::str(
              "HGT_RESIDUAL: k=", k, " must be even to pin interior widths to k/2"));
        if (depth > 1 && n > k / 2)
          throw std::invalid_argument(detail::str(
              "HGT_RESIDUAL: n=", n, " exceeds interior width k/2=", k / 2));
        s.dims.assign(depth + 1, k / 2);
        s.dims.front() = n;
        s.dims.back() = k;
        s.groups = group_schedule(g_max, depth);
        break;
      }
      default:
        throw std::invalid_argument(detail::str(
            variant_name(v), " is not a plain stack variant"));
    }
    s.validate();
    return s;
  }
};

// Closed-form weight count: sum over layers of in*out/g, plus biases when
// enabled. Exact integers; must equal the allocated scalar count.
inline std::uint64_t param_count(const TransformSpec& spec) {
  spec.validate();
  std::uint64_t total = 0;
  for (std::size_t l = 0; l < spec.depth; ++l) {
    total += static_cast<std::uint64_t>(spec.dims[l]) * spec.dims[l + 1] /
             spec.groups[l];
    if (spec.use_bias) total += spec.dims[l + 1];
  }
  return total;
}

class TransformStack {
 public:
  TransformStack(TransformSpec spec, Rng& rng) : spec_(std::move(spec)) {
    spec_.validate();
    for (std::size_t l = 0; l < spec_.depth; ++l)
      layers_.emplace_back(spec_.groups[l], spec_.dims[l], spec_.dims[l + 1],
                           rng, spec_.use_bias);
    if (spec_.variant == Variant::GLT_SHUFFLE) {
      for (std::size_t l = 1; l < spec_.depth; ++l) {
        Rng pr = Rng(spec_.shuffle_seed).fork(l);
        perms_.push_back(pr.permutation(spec_.dims[l]));
      }
    }
  }

  // taps, when given, receives each layer's output in order.
  Tensor forward(const Tensor& x, std::vector<Tensor>* taps = nullptr) const {
    if (x.cols() != spec_.dims.front())
      throw std::invalid_argument(detail::str(
          "TransformStack: input width ", x.cols(), " does not match n=",
          spec_.dims.front()));
    Tensor h = x;
    for (std::size_t l = 0; l < spec_.depth; ++l) {
      Tensor out = group_transform(h, layers_[l]);
      if (spec_.variant == Variant::HGT_RESIDUAL && l > 0 &&
          layers_[l].in_dim == layers_[l].out_dim)
        out = add(out, h);
      if (spec_.use_activation) out = tanh(out);
      if (taps) taps->push_back(out);
      if (spec_.variant == Variant::GLT_SHUFFLE && l + 1 < spec_.depth)
        out = permute_cols(out, perms_[l]);
      h = out;
    }
    return h;
  }

  const TransformSpec& spec() const { return spec_; }
  std::vector<GroupLinearLayer>& layers() { return layers_; }
  const std::vector<GroupLinearLayer>& layers() const { return layers_; }
  const std::vector<std::vector<std::size_t>>& boundary_permutations() const {
    return perms_;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> ps;
    for (const auto& layer : layers_)
      for (const auto& p : layer.parameters()) ps.push_back(p);
    return ps;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& layer : layers_)
      for (const auto& p : layer.parameters()) total += p.size();
    return total;
  }

 private:
  TransformSpec spec_;
  std::vector<GroupLinearLayer> layers_;
  std::vector<std::vector<std::size_t>> perms_;
};

}  // namespace define
