#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "define/embedder.hpp"
#include "define/tensor.hpp"

// Embedding-table analysis: correlation maps of a V x m table, per-stage
// activation tables of an embedding unit, group-wise output correlation and
// a finite-difference gradient checker.

namespace define {

struct CorrelationMap {
  std::size_t dim = 0;
  std::vector<double> values;  // row-major dim x dim, entries in [0, 1]

  double at(std::size_t r, std::size_t c) const { return values[r * dim + c]; }
};

// M = E^T E, then |M| min-max normalized to [0, 1]. A constant |M| (for
// example an all-zero table) degenerates to the all-zero map.
inline CorrelationMap correlation_map(const Tensor& table) {
  detail::require_rank2(table, "correlation_map");
  const std::size_t v = table.rows(), m = table.cols();
  CorrelationMap map;
  map.dim = m;
  map.values.assign(m * m, 0.0);
  detail::gemm(map.values.data(), table.values().data(), table.values().data(),
               m, v, m, true, false, false);
  double lo = std::abs(map.values[0]), hi = lo;
  for (double& x : map.values) {
    x = std::abs(x);
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  if (hi == lo) {
    map.values.assign(m * m, 0.0);
    return map;
  }
  for (double& x : map.values) x = (x - lo) / (hi - lo);
  return map;
}

namespace detail {

inline std::vector<std::string> stage_names(std::size_t depth) {
  std::vector<std::string> names{"map"};
  for (std::size_t l = 1; l <= depth; ++l) names.push_back(str("layer", l));
  names.push_back("reduce");
  return names;
}

// map -> 0, layer l -> l, reduce -> depth+1
inline std::size_t parse_stage(const std::string& stage, std::size_t depth) {
  if (stage == "map") return 0;
  if (stage == "reduce") return depth + 1;
  if (stage.rfind("layer", 0) == 0) {
    const std::string num = stage.substr(5);
    if (!num.empty() && num.find_first_not_of("0123456789") == std::string::npos) {
      const std::size_t l = std::stoull(num);
      if (l >= 1 && l <= depth) return l;
    }
  }
  std::string valid;
  for (const auto& n : stage_names(depth)) valid += (valid.empty() ? "" : ", ") + n;
  throw std::invalid_argument(str("unknown stage \"", stage,
                                  "\", expected one of: ", valid));
}

}  // namespace detail

// Activations of the requested stage for every token, assembled in id order.
// Chunking matches export_cache so the reduce stage reproduces its rows
// exactly.
inline Tensor effective_embedding_table(const DefineUnit& unit,
                                        const std::string& stage) {
  const std::size_t depth = unit.config().depth;
  const std::size_t idx = detail::parse_stage(stage, depth);
  if (idx == 0) return unit.map_table().detach();

  const std::size_t vocab = unit.config().vocab_size;
  const std::size_t width =
      idx == depth + 1 ? unit.output_dim() : unit.layer_dims()[idx];
  Tensor out = Tensor::zeros({vocab, width});
  Tape::NoGradGuard no_grad;
  detail::parallel_blocks(vocab, 256, [&](std::size_t lo, std::size_t hi) {
    std::vector<std::int32_t> ids(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) ids[i - lo] = static_cast<std::int32_t>(i);
    Tensor rows;
    if (idx == depth + 1) {
      rows = unit.embed(ids);
    } else {
      std::vector<Tensor> taps;
      unit.expand(embedding_lookup(unit.map_table(), ids), &taps);
      rows = taps[idx - 1];
    }
    std::copy_n(rows.values().data(), rows.size(),
                out.values().data() + lo * width);
  });
  return out;
}

// Pearson correlation between the flattened per-group activation matrices of
// one expansion layer, taken over the whole vocabulary. A zero-variance group
// reports 0 against everything, including itself.
inline std::vector<double> group_correlation(const DefineUnit& unit,
                                             std::size_t layer) {
  const std::size_t depth = unit.config().depth;
  if (layer < 1 || layer > depth)
    throw std::invalid_argument(detail::str("group_correlation: layer ", layer,
                                            " outside 1..", depth));
  const std::size_t g = unit.layer_groups()[layer - 1];
  if (g < 2)
    throw std::invalid_argument(detail::str(
        "group_correlation: layer ", layer, " has g=", g,
        ", need at least 2 groups"));

  Tensor acts = effective_embedding_table(unit, detail::str("layer", layer));
  const std::size_t vocab = acts.rows(), width = acts.cols(), cw = width / g;

  // flatten each group's [V x width/g] block and center it
  std::vector<std::vector<double>> flat(g, std::vector<double>(vocab * cw));
  for (std::size_t j = 0; j < g; ++j) {
    double mean = 0;
    for (std::size_t r = 0; r < vocab; ++r)
      for (std::size_t c = 0; c < cw; ++c) {
        flat[j][r * cw + c] = acts.at(r, j * cw + c);
        mean += flat[j][r * cw + c];
      }
    mean /= static_cast<double>(vocab * cw);
    for (double& x : flat[j]) x -= mean;
  }
  std::vector<double> norms(g);
  for (std::size_t j = 0; j < g; ++j) {
    double sq = 0;
    for (double x : flat[j]) sq += x * x;
    norms[j] = std::sqrt(sq);
  }
  std::vector<double> corr(g * g, 0.0);
  for (std::size_t a = 0; a < g; ++a)
    for (std::size_t b = 0; b < g; ++b) {
      if (norms[a] == 0.0 || norms[b] == 0.0) continue;  // degenerate -> 0
      double dot = 0;
      for (std::size_t i = 0; i < flat[a].size(); ++i) dot += flat[a][i] * flat[b][i];
      corr[a * g + b] = dot / (norms[a] * norms[b]);
    }
  return corr;
}

// ---- finite-difference gradient verification ----

struct GradCheckReport {
  double tolerance = 0;
  double step = 0;
  double max_rel_err = 0;
  bool pass = false;
  bool exhaustive = true;
  std::size_t elements_checked = 0;
  std::vector<double> per_param_max;  // worst relative error per tensor

  std::string summary() const {
    std::string out = detail::str(
        pass ? "PASS" : "FAIL", "  max rel err ", max_rel_err, " (tolerance ",
        tolerance, ", ", elements_checked, " elements, ",
        exhaustive ? "exhaustive" : "sampled", ")\n");
    for (std::size_t i = 0; i < per_param_max.size(); ++i)
      out += detail::str("  param ", i, ": max rel err ", per_param_max[i], "\n");
    return out;
  }
};

// Compares reverse-mode gradients of loss_fn against central differences.
// Exhaustive up to `exhaustive_limit` scalars, seeded sampling beyond that.
inline GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                                  const std::vector<Tensor>& params,
                                  double tolerance = 1e-4, double h = 1e-5,
                                  std::size_t exhaustive_limit = 10000,
                                  std::uint64_t sample_seed = 1) {
  GradCheckReport report;
  report.tolerance = tolerance;
  report.step = h;
  report.per_param_max.assign(params.size(), 0.0);

  for (auto p : params) p.zero_grad();
  std::vector<std::vector<double>> autodiff;
  {
    Tape tape;
    Tensor loss = loss_fn();
    backward(loss);
    for (const auto& p : params)
      autodiff.push_back(p.has_grad() ? p.grad()
                                      : std::vector<double>(p.size(), 0.0));
  }

  std::size_t total = 0;
  for (const auto& p : params) total += p.size();
  report.exhaustive = total <= exhaustive_limit;

  auto check_element = [&](std::size_t pi, std::size_t i) {
    Tensor p = params[pi];
    const double saved = p.values()[i];
    p.values()[i] = saved + h;
    const double lp = loss_fn().item();
    p.values()[i] = saved - h;
    const double lm = loss_fn().item();
    p.values()[i] = saved;
    const double fd = (lp - lm) / (2.0 * h);
    const double a = autodiff[pi][i];
    const double rel =
        std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
    report.per_param_max[pi] = std::max(report.per_param_max[pi], rel);
    report.max_rel_err = std::max(report.max_rel_err, rel);
    ++report.elements_checked;
  };

  if (report.exhaustive) {
    for (std::size_t pi = 0; pi < params.size(); ++pi)
      for (std::size_t i = 0; i < params[pi].size(); ++i) check_element(pi, i);
  } else {
    Rng rng(sample_seed);
    for (std::size_t s = 0; s < exhaustive_limit; ++s) {
      std::size_t flat = static_cast<std::size_t>(rng.next_below(total));
      std::size_t pi = 0;
      while (flat >= params[pi].size()) flat -= params[pi++].size();
      check_element(pi, flat);
    }
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

// ---- map output formats ----

// First line "m=<dim>", then one comma-separated row per line.
inline std::string map_to_csv(const CorrelationMap& map) {
  std::string out = detail::str("m=", map.dim, "\n");
  for (std::size_t r = 0; r < map.dim; ++r) {
    for (std::size_t c = 0; c < map.dim; ++c) {
      if (c) out += ",";
      out += detail::str(map.at(r, c));
    }
    out += "\n";
  }
  return out;
}

// 8-bit binary PGM (P5), value = round(255 * entry).
inline std::string map_to_pgm(const CorrelationMap& map) {
  std::string out = detail::str("P5\n", map.dim, " ", map.dim, "\n255\n");
  for (double v : map.values)
    out.push_back(static_cast<char>(
        static_cast<unsigned char>(std::lround(255.0 * v))));
  return out;
}

inline void write_map_csv(const CorrelationMap& map, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << map_to_csv(map);
}

inline void write_map_pgm(const CorrelationMap& map, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  const std::string bytes = map_to_pgm(map);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace define
