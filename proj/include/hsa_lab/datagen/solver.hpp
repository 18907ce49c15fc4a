#pragma once

// Rule-based solver that reads only the token sequence of a sample. It shares
// no code with the generators beyond the tokenizer, so agreement between its
// answer and the stored answer is a real check.

#include <algorithm>
#include <cmath>
#include <map>
#include <regex>
#include <string>
#include <vector>

#include "hsa_lab/datagen/generators.hpp"

namespace hsa_lab::data {

struct Solution {
  bool ok = false;
  std::string error;
  std::string answer;
  std::size_t answer_start = 0;
  std::vector<std::size_t> needle_starts;  // token positions, ascending
  std::vector<std::size_t> needle_lengths;
};

namespace detail {

inline Solution fail(std::string why) {
  Solution s;
  s.error = std::move(why);
  return s;
}

inline std::vector<std::string> split_keys(const std::string& list) {
  std::vector<std::string> out;
  static const std::regex key(R"(\d{6})");
  for (auto it = std::sregex_iterator(list.begin(), list.end(), key); it != std::sregex_iterator(); ++it) {
    out.push_back(it->str());
  }
  return out;
}

inline Solution solve_probe(const Tokens& t, std::size_t q) {
  if (t.empty() || t[0] != kBos) return fail("probe does not start with <bos>");
  const auto a_it = std::find(t.begin() + static_cast<std::ptrdiff_t>(q), t.end(), kAnswer);
  if (a_it == t.end()) return fail("probe has no <answer> marker");
  const std::size_t a = static_cast<std::size_t>(a_it - t.begin());
  const std::string hay = bytes_of(t, 1, q), question = bytes_of(t, q + 1, a);
  if (hay.size() != q - 1) return fail("special token inside the haystack");

  Solution sol;
  sol.answer_start = a + 1;
  static const std::regex single(R"(^What is the special magic number for (\d{6})\?$)");
  static const std::regex multi(R"(^What are the special magic numbers for (.*)\?$)");
  static const std::regex track(R"(^Find all variables that are assigned the value (\d{6})\.$)");
  std::smatch m;
  if (std::regex_match(question, m, single) || std::regex_match(question, m, multi)) {
    static const std::regex needle(R"( The special magic number for (\d{6}) is (\d{6})\. )");
    std::map<std::string, std::string> kv;
    for (auto it = std::sregex_iterator(hay.begin(), hay.end(), needle); it != std::sregex_iterator(); ++it) {
      if (!kv.emplace((*it)[1].str(), (*it)[2].str()).second) return fail("key " + (*it)[1].str() + " repeated");
      sol.needle_starts.push_back(1 + static_cast<std::size_t>(it->position()));
      sol.needle_lengths.push_back(static_cast<std::size_t>(it->length()));
    }
    for (const auto& k : split_keys(m[1].str())) {
      auto f = kv.find(k);
      if (f == kv.end()) return fail("queried key " + k + " has no needle");
      sol.answer += (sol.answer.empty() ? "" : " ") + f->second;
    }
  } else if (std::regex_match(question, m, track)) {
    static const std::regex stmt(R"( VAR ([A-Z]{5}) = (\d{6}|VAR ([A-Z]{5}))\. )");
    std::map<std::string, std::string> direct, ref;
    std::vector<std::string> seen;
    for (auto it = std::sregex_iterator(hay.begin(), hay.end(), stmt); it != std::sregex_iterator(); ++it) {
      const auto& x = *it;
      (x[3].matched ? ref : direct)[x[1].str()] = x[3].matched ? x[3].str() : x[2].str();
      seen.push_back(x[1].str());
      sol.needle_starts.push_back(1 + static_cast<std::size_t>(x.position()));
      sol.needle_lengths.push_back(static_cast<std::size_t>(x.length()));
    }
    // Breadth-first from every variable bound to the value, in text order.
    std::vector<std::string> found;
    for (const auto& name : seen) {
      auto d = direct.find(name);
      if (d != direct.end() && d->second == m[1].str()) found.push_back(name);
    }
    for (std::size_t i = 0; i < found.size(); ++i) {
      for (const auto& name : seen) {
        auto r = ref.find(name);
        if (r != ref.end() && r->second == found[i] && std::find(found.begin(), found.end(), name) == found.end()) {
          found.push_back(name);
        }
      }
    }
    if (found.empty()) return fail("no variable holds the queried value");
    for (const auto& f : found) sol.answer += (sol.answer.empty() ? "" : " ") + f;
  } else {
    return fail("unrecognised question: " + question);
  }
  sol.ok = true;
  return sol;
}

}  // namespace detail

inline Solution solve(const Tokens& t) {
  const auto q = std::find(t.begin(), t.end(), kQuery);
  if (q != t.end()) return detail::solve_probe(t, static_cast<std::size_t>(q - t.begin()));
  const auto sep = std::find(t.begin(), t.end(), kSep);
  if (sep != t.end()) {
    const std::size_t begin = !t.empty() && t[0] == kBos ? 1 : 0, s = static_cast<std::size_t>(sep - t.begin());
    Solution sol;
    sol.answer = bytes_of(t, begin, s);
    sol.answer_start = s + 1;
    sol.ok = s > begin && sol.answer.size() == s - begin;
    if (!sol.ok) sol.error = "self-copy prefix is empty or contains specials";
    return sol;
  }
  return detail::fail("no question in sequence");
}

/// Depth of each needle recovered from token positions: the offset of its
/// start within the filler, as a fraction of the filler length.
inline std::vector<double> measured_depths(const Sample& s) {
  const Solution sol = solve(s.tokens);
  const auto q = static_cast<std::size_t>(std::find(s.tokens.begin(), s.tokens.end(), kQuery) - s.tokens.begin());
  std::size_t total = 0;
  for (auto n : sol.needle_lengths) total += n;
  const double filler = static_cast<double>(q - 1 - total);
  std::vector<double> by_start;
  std::size_t before = 0;
  for (std::size_t j = 0; j < sol.needle_starts.size(); ++j) {
    by_start.push_back(filler > 0 ? static_cast<double>(sol.needle_starts[j] - 1 - before) / filler : 0.0);
    before += sol.needle_lengths[j];
  }
  std::vector<double> out;
  for (auto p : s.meta.needle_positions) {
    auto it = std::find(sol.needle_starts.begin(), sol.needle_starts.end(), p);
    out.push_back(it == sol.needle_starts.end() ? NAN : by_start[static_cast<std::size_t>(it - sol.needle_starts.begin())]);
  }
  return out;
}

/// Every problem found with a sample; empty means it is consistent.
inline std::vector<std::string> validate(const Sample& s) {
  std::vector<std::string> bad;
  if (s.loss_mask.size() != s.tokens.size()) bad.push_back("loss_mask length differs from tokens");
  if (s.meta.task == "lm") {
    for (std::size_t i = 0; i < s.loss_mask.size(); ++i) {
      if (s.loss_mask[i] != (i >= 1)) {
        bad.push_back("lm loss_mask must cover every position >= 1");
        break;
      }
    }
    for (std::size_t f = 0; f < s.meta.keys.size(); ++f) {
      for (std::size_t r = 0; r < 2; ++r) {
        const std::string text = bytes_of(s.tokens, s.meta.needle_positions[2 * f + r], s.tokens.size());
        if (text.find(s.meta.keys[f] + " is " + s.meta.values[f] + ".") == std::string::npos) {
          bad.push_back("fact " + s.meta.keys[f] + " missing");
        }
      }
    }
    return bad;
  }
  const Solution sol = solve(s.tokens);
  if (!sol.ok) {
    bad.push_back("solver: " + sol.error);
    return bad;
  }
  if (sol.answer != s.meta.answer) bad.push_back("solver answer '" + sol.answer + "' != stored '" + s.meta.answer + "'");
  if (sol.answer_start != s.meta.answer_start) bad.push_back("answer span starts elsewhere");
  if (bytes_of(s.tokens, s.meta.answer_start, s.meta.answer_start + s.meta.answer_length) != s.meta.answer) {
    bad.push_back("answer tokens do not spell the stored answer");
  }
  for (std::size_t i = 0; i < s.loss_mask.size(); ++i) {
    const bool in = i >= s.meta.answer_start && i < s.meta.answer_start + s.meta.answer_length;
    if (s.loss_mask[i] != in) {
      bad.push_back("loss_mask set outside the answer span at " + std::to_string(i));
      break;
    }
  }
  if (s.meta.task != "selfcopy") {
    auto starts = s.meta.needle_positions;
    std::sort(starts.begin(), starts.end());
    if (starts != sol.needle_starts) bad.push_back("needle positions differ from those found in the tokens");
  }
  return bad;
}

}  // namespace hsa_lab::data
