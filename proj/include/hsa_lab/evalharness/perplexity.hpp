#pragma once

#include <cmath>
#include <span>
#include <stdexcept>

#include "hsa_lab/model/model.hpp"

namespace hsa_lab {

namespace detail {

template <std::floating_point T>
double row_nll(const T* logits, std::size_t v, std::int32_t target) {
  double mx = logits[0];
  for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(logits[j]));
  double z = 0.0;
  for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(logits[j]) - mx);
  return mx + std::log(z) - static_cast<double>(logits[static_cast<std::size_t>(target)]);
}

}  // namespace detail

/// exp of the mean next-token NLL over the final `last_n` tokens, with the
/// whole preceding stream as context. block == 0 runs one forward pass;
/// otherwise the stream is fed through the streaming path `block` tokens at
/// a time, building the chunk store incrementally.
template <std::floating_point T>
double eval_ppl(const HsaModel<T>& model, std::span<const std::int32_t> tokens, std::size_t last_n,
                std::size_t block = 0) {
  if (last_n == 0 || tokens.size() < last_n + 1) {
    throw std::invalid_argument("eval_ppl needs a stream longer than last_n >= 1");
  }
  NoGradGuard no_grad;
  const std::size_t n = tokens.size(), v = model.config().vocab_size, first = n - last_n;
  double nll = 0.0;
  auto score = [&](const Tensor<T>& logits, std::size_t start) {
    for (std::size_t r = 0; r < logits.dim(0); ++r) {
      const std::size_t pos = start + r;  // logits at pos predict pos + 1
      if (pos + 1 >= first && pos + 1 < n) nll += detail::row_nll(logits.data().data() + r * v, v, tokens[pos + 1]);
    }
  };
  if (block == 0) {
    score(model.forward(tokens), 0);
  } else {
    DecodeState<T> state;
    for (std::size_t s = 0; s < n; s += block) {
      const std::size_t len = std::min(block, n - s);
      score(model.forward_block(tokens.subspan(s, len), state), s);
    }
  }
  return std::exp(nll / static_cast<double>(last_n));
}

}  // namespace hsa_lab
