#pragma once

// Retrieval accuracy over a length x depth grid. Answers are produced by
// greedy decoding through the streaming path and scored by exact match;
// every sample is first checked against the rule-based solver.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "hsa_lab/datagen/generators.hpp"
#include "hsa_lab/datagen/solver.hpp"
#include "hsa_lab/model/model.hpp"

namespace hsa_lab {

template <std::floating_point T>
std::int32_t argmax_row(const Tensor<T>& logits, std::size_t row) {
  const std::size_t v = logits.dim(1);
  const T* r = logits.data().data() + row * v;
  return static_cast<std::int32_t>(std::max_element(r, r + v) - r);
}

/// Greedy continuation of `prefix` by `steps` tokens.
template <std::floating_point T>
data::Tokens greedy_decode(const HsaModel<T>& model, std::span<const std::int32_t> prefix, std::size_t steps) {
  NoGradGuard no_grad;
  DecodeState<T> state;
  data::Tokens out;
  if (steps == 0) return out;
  auto logits = model.forward_block(prefix, state);
  out.push_back(argmax_row(logits, logits.dim(0) - 1));
  while (out.size() < steps) {
    const std::int32_t last = out.back();
    logits = model.forward_block(std::span<const std::int32_t>(&last, 1), state);
    out.push_back(argmax_row(logits, 0));
  }
  return out;
}

/// Bytes outside printable ASCII as \xNN, so any model output is valid UTF-8.
inline std::string printable(const std::string& s) {
  static const char* hex = "0123456789abcdef";
  std::string o;
  for (unsigned char c : s) {
    if (c >= 0x20 && c < 0x7f) {
      o += static_cast<char>(c);
    } else {
      o += "\\x";
      o += hex[c >> 4];
      o += hex[c & 15];
    }
  }
  return o;
}

struct NiahRecord {
  std::string task;
  std::size_t length = 0;
  double depth = 0.0;
  std::size_t index = 0;
  std::uint64_t seed = 0;
  std::string expected;
  std::string predicted;
  bool correct = false;
};

inline json to_json(const NiahRecord& r) {
  return json{{"task", r.task},         {"length", r.length},     {"depth", r.depth},
              {"index", r.index},       {"seed", r.seed},         {"expected", r.expected},
              {"predicted", r.predicted}, {"correct", r.correct}};
}

struct AccuracyGrid {
  std::string task;
  std::vector<std::size_t> lengths;
  std::vector<double> depths;
  std::vector<std::vector<double>> accuracy;  // [length][depth]
  std::vector<std::vector<std::size_t>> n_samples;
  std::vector<std::vector<bool>> skipped;
  std::size_t in_domain_boundary = 0;  // training context length

  bool out_of_domain(std::size_t li) const { return in_domain_boundary && lengths[li] > in_domain_boundary; }

  /// Mean over the depths of one length, ignoring skipped cells; NaN if all skipped.
  double mean_at(std::size_t li) const {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t di = 0; di < depths.size(); ++di) {
      if (!skipped[li][di]) {
        s += accuracy[li][di];
        ++n;
      }
    }
    return n ? s / static_cast<double>(n) : NAN;
  }
};

struct NiahOptions {
  std::size_t samples_per_cell = 50;
  std::uint64_t seed = 0;
  std::size_t max_length = 0;  // longer cells are marked skipped; 0 = no cap
  std::size_t in_domain_boundary = 0;
  std::size_t chain_length = 4;  // vartrack
  /// Called after each sample; lets callers stream raw records.
  std::function<void(const NiahRecord&)> on_record;
};

/// One probe of `task` at (length, depth). Variable tracking scatters its
/// statements at random and ignores depth.
inline data::Sample make_probe(data::Task task, std::size_t length, double depth, data::Rng& rng,
                               std::size_t chain_length = 4) {
  switch (task) {
    case data::Task::sniah: return data::gen_sniah(length, depth, rng);
    case data::Task::mqniah: return data::gen_mqniah(length, 2, 6, rng, depth);
    case data::Task::vartrack: return data::gen_vartrack(length, chain_length, rng);
    default: throw std::invalid_argument("eval_niah: task must be sniah, mqniah or vartrack");
  }
}

/// Scores one sample: the solver must agree with the stored answer before
/// the model's greedy answer is compared with it.
template <std::floating_point T>
NiahRecord score_sample(const HsaModel<T>& model, const data::Sample& s) {
  const auto problems = data::validate(s);
  if (!problems.empty()) throw std::logic_error("generated sample failed validation: " + problems.front());
  const auto expected = s.answer_tokens();
  const auto got = greedy_decode(model, std::span<const std::int32_t>(s.tokens.data(), s.meta.answer_start),
                                 expected.size());
  NiahRecord r;
  r.task = s.meta.task;
  r.length = s.size();
  r.expected = s.meta.answer;
  r.predicted = printable(data::decode(got));
  r.correct = got == expected;
  return r;
}

template <std::floating_point T>
AccuracyGrid eval_niah(const HsaModel<T>& model, data::Task task, const std::vector<std::size_t>& lengths,
                       const std::vector<double>& depths, const NiahOptions& opt) {
  if (opt.samples_per_cell == 0) throw std::invalid_argument("samples_per_cell must be >= 1");
  AccuracyGrid g;
  g.task = data::task_name(task);
  g.lengths = lengths;
  g.depths = depths;
  g.in_domain_boundary = opt.in_domain_boundary;
  g.accuracy.assign(lengths.size(), std::vector<double>(depths.size(), 0.0));
  g.n_samples.assign(lengths.size(), std::vector<std::size_t>(depths.size(), 0));
  g.skipped.assign(lengths.size(), std::vector<bool>(depths.size(), false));
  for (std::size_t li = 0; li < lengths.size(); ++li) {
    for (std::size_t di = 0; di < depths.size(); ++di) {
      if ((opt.max_length && lengths[li] > opt.max_length) ||
          lengths[li] < data::min_length(task, opt.chain_length)) {
        g.skipped[li][di] = true;
        continue;
      }
      std::size_t correct = 0;
      for (std::size_t i = 0; i < opt.samples_per_cell; ++i) {
        const std::uint64_t seed = data::derive_seed(opt.seed, li * 1000003 + di, i);
        data::Rng rng(seed);
        const auto s = make_probe(task, lengths[li], depths[di], rng, opt.chain_length);
        auto r = score_sample(model, s);
        r.depth = depths[di];
        r.index = i;
        r.seed = seed;
        correct += r.correct;
        if (opt.on_record) opt.on_record(r);
      }
      g.n_samples[li][di] = opt.samples_per_cell;
      g.accuracy[li][di] = static_cast<double>(correct) / static_cast<double>(opt.samples_per_cell);
    }
  }
  return g;
}

/// task,length,depth,accuracy,n_samples; skipped cells carry "skipped".
inline std::string grid_csv(const AccuracyGrid& g) {
  std::ostringstream o;
  o << "task,length,depth,accuracy,n_samples\n";
  for (std::size_t li = 0; li < g.lengths.size(); ++li) {
    for (std::size_t di = 0; di < g.depths.size(); ++di) {
      o << g.task << ',' << g.lengths[li] << ',' << g.depths[di] << ',';
      if (g.skipped[li][di]) {
        o << "skipped,0\n";
      } else {
        o << std::setprecision(6) << g.accuracy[li][di] << ',' << g.n_samples[li][di] << '\n';
      }
    }
  }
  return o.str();
}

inline json to_json(const AccuracyGrid& g) {
  return json{{"task", g.task},         {"lengths", g.lengths},   {"depths", g.depths},
              {"accuracy", g.accuracy}, {"n_samples", g.n_samples}, {"skipped", g.skipped},
              {"in_domain_boundary", g.in_domain_boundary}};
}

/// Plain-text table: one row per length, one column per depth, with lengths
/// beyond the training context flagged OOD.
inline std::string grid_summary(const AccuracyGrid& g) {
  std::ostringstream o;
  o << g.task << " accuracy (rows: length, columns: depth)\n" << std::setw(10) << "length";
  for (double d : g.depths) o << std::setw(8) << std::setprecision(3) << d;
  o << std::setw(8) << "mean" << "\n";
  for (std::size_t li = 0; li < g.lengths.size(); ++li) {
    o << std::setw(10) << g.lengths[li];
    for (std::size_t di = 0; di < g.depths.size(); ++di) {
      if (g.skipped[li][di]) {
        o << std::setw(8) << "skip";
      } else {
        o << std::setw(8) << std::fixed << std::setprecision(2) << g.accuracy[li][di] << std::defaultfloat;
      }
    }
    o << std::setw(8) << std::fixed << std::setprecision(2) << g.mean_at(li) << std::defaultfloat;
    o << (g.out_of_domain(li) ? "  OOD" : "  in-domain") << "\n";
  }
  return o.str();
}

}  // namespace hsa_lab
