#pragma once

// Synthetic tasks over the byte vocabulary. Every generator is a pure
// function of its arguments and the rng state it is handed.
//
// Probe layout: <bos> haystack <query> question <answer> answer <eos>
// where the haystack is filler text with needles spliced in at requested
// depths. Depth is measured over the filler alone, so depth 0 puts a needle
// first and depth 1 puts it right before <query>.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "hsa_lab/datagen/tokenizer.hpp"
#include "hsa_lab/util/json_schema.hpp"

namespace hsa_lab::data {

using Rng = std::mt19937_64;

enum class Task { lm, sniah, mqniah, vartrack, selfcopy };

inline std::string task_name(Task t) {
  switch (t) {
    case Task::lm: return "lm";
    case Task::sniah: return "sniah";
    case Task::mqniah: return "mqniah";
    case Task::vartrack: return "vartrack";
    case Task::selfcopy: return "selfcopy";
  }
  return "?";
}

inline Task parse_task(const std::string& s) {
  for (Task t : {Task::lm, Task::sniah, Task::mqniah, Task::vartrack, Task::selfcopy}) {
    if (task_name(t) == s) return t;
  }
  throw std::invalid_argument("unknown task '" + s + "' (expected lm, sniah, mqniah, vartrack or selfcopy)");
}

struct SampleMeta {
  std::string task;
  std::vector<std::string> keys;    // needle keys, or variable names for vartrack
  std::vector<std::string> values;  // needle values, or {target, distractor} for vartrack
  std::vector<std::size_t> queried;  // indices into keys
  std::vector<double> depths;        // requested depth per needle
  std::vector<std::size_t> needle_positions;
  std::size_t answer_start = 0;
  std::size_t answer_length = 0;
  std::string answer;
  bool probe = false;  // produced by inject_probes
};

struct Sample {
  Tokens tokens;
  std::vector<std::uint8_t> loss_mask;
  SampleMeta meta;

  std::size_t size() const { return tokens.size(); }
  Tokens answer_tokens() const {
    return Tokens(tokens.begin() + static_cast<std::ptrdiff_t>(meta.answer_start),
                  tokens.begin() + static_cast<std::ptrdiff_t>(meta.answer_start + meta.answer_length));
  }
};

/// splitmix64 over a base seed and stream coordinates.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ a) ^ b);
}

namespace detail {

inline const std::vector<std::string>& words() {
  static const std::vector<std::string> w{
      "the",    "a",      "old",     "river",  "stone",   "house",  "walked", "slowly",  "under",  "bright",
      "morning", "light", "farmer",  "carried", "bread",  "to",     "market", "while",   "birds",  "sang",
      "over",   "quiet",  "fields",  "and",    "children", "played", "near",   "water",   "small",  "boat",
      "drifted", "past",  "green",   "hills",  "where",   "sheep",  "rested", "in",      "shade",  "of",
      "tall",   "trees",  "evening", "wind",   "moved",   "across", "roof",   "window",  "kept",   "warm",
      "lamp",   "burning", "long",   "after",  "village", "slept",  "road",   "turned",  "north",  "toward",
      "distant", "mountain", "cold",  "snow",   "covered", "path",   "every",  "winter",  "people", "told",
      "stories", "about",  "forest", "beyond", "wall",    "garden", "grew",   "roses",   "beside", "gate"};
  return w;
}

inline std::string filler_text(std::size_t n_bytes, Rng& rng) {
  const auto& w = words();
  std::uniform_int_distribution<std::size_t> pick(0, w.size() - 1), len(6, 14);
  std::string s;
  s.reserve(n_bytes + 64);
  while (s.size() < n_bytes) {
    const std::size_t n = len(rng);
    for (std::size_t i = 0; i < n; ++i) {
      std::string word = w[pick(rng)];
      if (i == 0) word[0] = static_cast<char>(word[0] - 'a' + 'A');
      s += word;
      s += i + 1 == n ? ". " : " ";
    }
  }
  s.resize(n_bytes);
  return s;
}

inline std::string digits(Rng& rng, std::size_t n = 6) {
  std::uniform_int_distribution<int> d(0, 9);
  std::string s(n, '0');
  for (auto& c : s) c = static_cast<char>('0' + d(rng));
  return s;
}

inline std::string letters(Rng& rng, std::size_t n = 5) {
  std::uniform_int_distribution<int> d(0, 25);
  std::string s(n, 'A');
  for (auto& c : s) c = static_cast<char>('A' + d(rng));
  return s;
}

template <class Make>
std::vector<std::string> distinct(std::size_t n, Rng& rng, Make make, std::set<std::string> taken = {}) {
  std::vector<std::string> out;
  while (out.size() < n) {
    auto s = make(rng);
    if (taken.insert(s).second) out.push_back(std::move(s));
  }
  return out;
}

inline std::string niah_needle(const std::string& key, const std::string& value) {
  return " The special magic number for " + key + " is " + value + ". ";
}

inline std::string niah_question(const std::vector<std::string>& keys) {
  if (keys.size() == 1) return "What is the special magic number for " + keys[0] + "?";
  std::string q = "What are the special magic numbers for ";
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (i) q += i + 1 == keys.size() ? " and " : ", ";
    q += keys[i];
  }
  return q + "?";
}

inline std::string join(const std::vector<std::string>& parts, const std::string& sep = " ") {
  std::string s;
  for (std::size_t i = 0; i < parts.size(); ++i) s += (i ? sep : "") + parts[i];
  return s;
}

inline std::size_t probe_overhead(const std::vector<std::string>& needles, const std::string& question,
                                  const std::string& answer) {
  std::size_t n = 4 + question.size() + answer.size();  // bos, query, answer, eos
  for (const auto& s : needles) n += s.size();
  return n;
}

/// Splices needles into filler at the given depths and appends the prompt.
inline Sample assemble_probe(std::size_t length, const std::vector<std::string>& needles,
                             const std::vector<double>& depths, const std::string& question, const std::string& answer,
                             Rng& rng, const std::string& task) {
  const std::size_t fixed = probe_overhead(needles, question, answer);
  if (length < fixed) {
    throw std::invalid_argument(task + " needs length >= " + std::to_string(fixed) + ", got " +
                                std::to_string(length));
  }
  const std::size_t filler_len = length - fixed;
  const std::string filler = filler_text(filler_len, rng);

  std::vector<std::size_t> at(needles.size()), order(needles.size());
  for (std::size_t j = 0; j < needles.size(); ++j) {
    at[j] = static_cast<std::size_t>(std::llround(std::clamp(depths[j], 0.0, 1.0) * static_cast<double>(filler_len)));
    order[j] = j;
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return at[a] < at[b]; });

  Sample s;
  s.meta.task = task;
  s.meta.depths = depths;
  s.meta.needle_positions.assign(needles.size(), 0);
  s.tokens.reserve(length);
  s.tokens.push_back(kBos);
  std::size_t cursor = 0;
  for (std::size_t j : order) {
    append(s.tokens, std::string_view(filler).substr(cursor, at[j] - cursor));
    cursor = at[j];
    s.meta.needle_positions[j] = s.tokens.size();
    append(s.tokens, needles[j]);
  }
  append(s.tokens, std::string_view(filler).substr(cursor));
  s.tokens.push_back(kQuery);
  append(s.tokens, question);
  s.tokens.push_back(kAnswer);
  s.meta.answer_start = s.tokens.size();
  s.meta.answer_length = answer.size();
  s.meta.answer = answer;
  append(s.tokens, answer);
  s.tokens.push_back(kEos);
  s.loss_mask.assign(length, 0);
  for (std::size_t i = 0; i < answer.size(); ++i) s.loss_mask[s.meta.answer_start + i] = 1;
  return s;
}

}  // namespace detail

/// Multi-key NIAH: n_kv distinct keys at distinct random depths, n_queries of
/// them asked for. With `depth` set, the first queried needle sits there.
inline Sample gen_mqniah(std::size_t length, std::size_t n_queries, std::size_t n_kv, Rng& rng,
                         std::optional<double> depth = std::nullopt) {
  if (n_queries == 0 || n_queries > n_kv) throw std::invalid_argument("mqniah needs 1 <= n_queries <= n_kv");
  const auto keys = detail::distinct(n_kv, rng, [](Rng& r) { return detail::digits(r); });
  std::vector<std::string> values(n_kv), needles(n_kv);
  for (std::size_t j = 0; j < n_kv; ++j) {
    values[j] = detail::digits(rng);
    needles[j] = detail::niah_needle(keys[j], values[j]);
  }
  std::vector<std::size_t> idx(n_kv);
  for (std::size_t j = 0; j < n_kv; ++j) idx[j] = j;
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::size_t> queried(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_queries));

  // Distinct insertion points when the filler has room for them.
  std::vector<double> depths(n_kv);
  std::vector<std::string> qkeys, answers;
  for (auto q : queried) {
    qkeys.push_back(keys[q]);
    answers.push_back(values[q]);
  }
  const std::string question = detail::niah_question(qkeys), answer = detail::join(answers);
  const std::size_t fixed = detail::probe_overhead(needles, question, answer);
  const std::size_t filler_len = length > fixed ? length - fixed : 0;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::set<long long> used;
  for (std::size_t j = 0; j < n_kv; ++j) {
    const bool pinned = depth && j == queried[0];
    for (int attempt = 0;; ++attempt) {
      depths[j] = pinned ? *depth : u(rng);
      const long long at = std::llround(depths[j] * static_cast<double>(filler_len));
      if (used.insert(at).second || pinned || filler_len + 1 < n_kv || attempt > 64) break;
    }
  }
  auto s = detail::assemble_probe(length, needles, depths, question, answer, rng, "mqniah");
  s.meta.keys = keys;
  s.meta.values = values;
  s.meta.queried = queried;
  return s;
}

/// Single-key NIAH with the needle at `depth` of the filler.
inline Sample gen_sniah(std::size_t length, double depth, Rng& rng) {
  if (depth < 0.0 || depth > 1.0) throw std::invalid_argument("depth must be in [0, 1]");
  auto s = gen_mqniah(length, 1, 1, rng, depth);
  s.meta.task = "sniah";
  return s;
}

inline std::size_t min_length(Task t, std::size_t chain_length = 4) {
  switch (t) {
    case Task::sniah: return detail::probe_overhead({detail::niah_needle("000000", "000000")},
                                                    detail::niah_question({"000000"}), "000000");
    case Task::mqniah: {
      std::vector<std::string> n(6, detail::niah_needle("000000", "000000"));
      return detail::probe_overhead(n, detail::niah_question({"000000", "000000"}), "000000 000000");
    }
    case Task::vartrack: {
      // Target chain and one distractor chain.
      const std::size_t stmt_first = std::string(" VAR AAAAA = 000000. ").size();
      const std::size_t stmt_next = std::string(" VAR AAAAA = VAR AAAAA. ").size();
      const std::size_t q = std::string("Find all variables that are assigned the value 000000.").size();
      return 4 + 2 * (stmt_first + (chain_length - 1) * stmt_next) + q + chain_length * 6 - 1;
    }
    case Task::selfcopy: return 3;
    case Task::lm: return 2;
  }
  return 0;
}

/// Variable tracking: a chain X1 = v, X2 = X1, ... plus one distractor chain
/// with a different value. The question asks for every variable equal to v;
/// the answer lists them in chain order. With `ordered` false the
/// statements land at independent random depths.
inline Sample gen_vartrack(std::size_t length, std::size_t chain_length, Rng& rng, bool ordered = true) {
  if (chain_length < 2) throw std::invalid_argument("vartrack needs chain_length >= 2");
  const auto names = detail::distinct(2 * chain_length, rng, [](Rng& r) { return detail::letters(r); });
  const auto vals = detail::distinct(2, rng, [](Rng& r) { return detail::digits(r); });
  std::vector<std::string> stmts;
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t i = 0; i < chain_length; ++i) {
      const auto& lhs = names[c * chain_length + i];
      const std::string rhs = i == 0 ? vals[c] : "VAR " + names[c * chain_length + i - 1];
      stmts.push_back(" VAR " + lhs + " = " + rhs + ". ");
    }
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> depths(stmts.size());
  for (auto& d : depths) d = u(rng);
  if (ordered) {
    for (std::size_t c = 0; c < 2; ++c) {
      auto b = depths.begin() + static_cast<std::ptrdiff_t>(c * chain_length);
      std::sort(b, b + static_cast<std::ptrdiff_t>(chain_length));
    }
  }
  std::vector<std::string> target(names.begin(), names.begin() + static_cast<std::ptrdiff_t>(chain_length));
  auto s = detail::assemble_probe(length, stmts, depths, "Find all variables that are assigned the value " + vals[0] + ".",
                                  detail::join(target), rng, "vartrack");
  s.meta.keys = names;
  s.meta.values = vals;
  for (std::size_t i = 0; i < chain_length; ++i) s.meta.queried.push_back(i);
  return s;
}

/// seq <sep> seq with loss on the second copy.
inline Sample gen_selfcopy(const Tokens& seq) {
  if (seq.empty()) throw std::invalid_argument("selfcopy needs a nonempty sequence");
  Sample s;
  s.meta.task = "selfcopy";
  s.tokens = seq;
  s.tokens.push_back(kSep);
  s.meta.answer_start = s.tokens.size();
  s.meta.answer_length = seq.size();
  s.meta.answer = bytes_of(seq, 0, seq.size());
  s.tokens.insert(s.tokens.end(), seq.begin(), seq.end());
  s.loss_mask.assign(s.tokens.size(), 0);
  for (std::size_t i = s.meta.answer_start; i < s.tokens.size(); ++i) s.loss_mask[i] = 1;
  return s;
}

/// Self-copy over random filler text, padded with a leading <bos> to reach
/// an even length.
inline Sample gen_selfcopy(std::size_t length, Rng& rng) {
  if (length < 3) throw std::invalid_argument("selfcopy needs length >= 3");
  const bool lead = length % 2 == 0;
  const std::size_t m = (length - 1 - (lead ? 1 : 0)) / 2;
  auto s = gen_selfcopy(encode(detail::filler_text(m, rng)));
  if (lead) {
    s.tokens.insert(s.tokens.begin(), kBos);
    s.loss_mask.insert(s.loss_mask.begin(), 0);
    ++s.meta.answer_start;
  }
  return s;
}

struct LmOptions {
  /// When nonzero, plant facts whose second mention sits at least this many
  /// tokens after the first, so the text carries dependencies of that span.
  std::size_t effective_span = 0;
  std::size_t facts_per_4k = 8;
};

/// Language-modelling text: loss on every position after the first.
inline Sample gen_lm(std::size_t length, Rng& rng, const LmOptions& opt = {}) {
  if (length < 2) throw std::invalid_argument("lm needs length >= 2");
  Sample s;
  s.meta.task = "lm";
  std::string text = detail::filler_text(length - 1, rng);
  if (opt.effective_span > 0) {
    const std::size_t n_facts = std::max<std::size_t>(1, opt.facts_per_4k * length / 4096);
    std::vector<std::pair<std::size_t, std::size_t>> taken;
    auto free = [&](std::size_t b, std::size_t e) {
      for (auto [tb, te] : taken) {
        if (b < te && tb < e) return false;
      }
      return true;
    };
    for (std::size_t f = 0; f < n_facts; ++f) {
      const std::string name = detail::letters(rng), code = detail::digits(rng);
      const std::string first = " Remember the code for " + name + " is " + code + ". ";
      const std::string second = " The code for " + name + " is " + code + ". ";
      if (first.size() + opt.effective_span + second.size() > text.size()) break;
      std::uniform_int_distribution<std::size_t> a(0, text.size() - first.size() - opt.effective_span - second.size());
      for (int attempt = 0; attempt < 32; ++attempt) {
        const std::size_t p = a(rng);
        std::uniform_int_distribution<std::size_t> b(p + first.size() + opt.effective_span,
                                                     text.size() - second.size());
        const std::size_t q = b(rng);
        if (!free(p, p + first.size()) || !free(q, q + second.size())) continue;
        text.replace(p, first.size(), first);
        text.replace(q, second.size(), second);
        taken.emplace_back(p, p + first.size());
        taken.emplace_back(q, q + second.size());
        s.meta.keys.push_back(name);
        s.meta.values.push_back(code);
        s.meta.needle_positions.push_back(1 + p);
        s.meta.needle_positions.push_back(1 + q);
        break;
      }
    }
  }
  s.tokens.push_back(kBos);
  append(s.tokens, text);
  s.loss_mask.assign(length, 1);
  s.loss_mask[0] = 0;
  return s;
}

/// Dispatch used by training mixtures and probes; depth is drawn uniformly.
inline Sample generate(Task t, std::size_t length, Rng& rng, std::size_t chain_length = 4) {
  switch (t) {
    case Task::lm: return gen_lm(length, rng);
    case Task::sniah: return gen_sniah(length, std::uniform_real_distribution<double>(0.0, 1.0)(rng), rng);
    case Task::mqniah: return gen_mqniah(length, 2, 6, rng);
    case Task::vartrack: return gen_vartrack(length, chain_length, rng);
    case Task::selfcopy: return gen_selfcopy(length, rng);
  }
  throw std::invalid_argument("bad task");
}

/// Converts each sample into an S-NIAH probe of the same length with the
/// given probability. Samples too short to hold a probe pass through.
inline Sample maybe_probe(Sample s, double probability, Rng& rng) {
  if (probability < 0.0 || probability > 1.0) throw std::invalid_argument("probability must be in [0, 1]");
  std::bernoulli_distribution coin(probability);
  if (!coin(rng) || s.size() < min_length(Task::sniah)) return s;
  auto p = gen_sniah(s.size(), std::uniform_real_distribution<double>(0.0, 1.0)(rng), rng);
  p.meta.probe = true;
  return p;
}

inline std::vector<Sample> inject_probes(std::vector<Sample> stream, double probability, Rng& rng) {
  for (auto& s : stream) s = maybe_probe(std::move(s), probability, rng);
  return stream;
}

inline json to_json(const Sample& s) {
  std::vector<int> mask(s.loss_mask.begin(), s.loss_mask.end());
  const auto& m = s.meta;
  return json{{"tokens", s.tokens},
              {"loss_mask", mask},
              {"meta",
               {{"task", m.task},
                {"keys", m.keys},
                {"values", m.values},
                {"queried", m.queried},
                {"depths", m.depths},
                {"needle_positions", m.needle_positions},
                {"answer_start", m.answer_start},
                {"answer_length", m.answer_length},
                {"answer", m.answer},
                {"probe", m.probe}}}};
}

inline Sample sample_from_json(const json& j) {
  JsonReader r(j, "sample");
  Sample s;
  s.tokens = r.required<Tokens>("tokens");
  for (int b : r.required<std::vector<int>>("loss_mask")) s.loss_mask.push_back(static_cast<std::uint8_t>(b != 0));
  JsonReader m(r.raw("meta"), "sample.meta");
  s.meta.task = m.required<std::string>("task");
  s.meta.keys = m.optional<std::vector<std::string>>("keys", {});
  s.meta.values = m.optional<std::vector<std::string>>("values", {});
  s.meta.queried = m.optional<std::vector<std::size_t>>("queried", {});
  s.meta.depths = m.optional<std::vector<double>>("depths", {});
  s.meta.needle_positions = m.optional<std::vector<std::size_t>>("needle_positions", {});
  s.meta.answer_start = m.optional<std::size_t>("answer_start", 0);
  s.meta.answer_length = m.optional<std::size_t>("answer_length", 0);
  s.meta.answer = m.optional<std::string>("answer", "");
  s.meta.probe = m.optional<bool>("probe", false);
  m.reject_unknown();
  r.reject_unknown();
  if (s.loss_mask.size() != s.tokens.size()) throw ConfigError("sample.loss_mask length differs from sample.tokens");
  return s;
}

}  // namespace hsa_lab::data
