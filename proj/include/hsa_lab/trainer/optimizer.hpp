#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "hsa_lab/model/checkpoint.hpp"
#include "hsa_lab/numerics/parameter.hpp"

namespace hsa_lab {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.01;
  double eps = 1e-8;
  double clip_norm = 1.0;
};

struct ClipResult {
  double pre_norm = 0.0;
  double post_norm = 0.0;
};

/// Global L2 norm over every gradient, accumulated in double in canonical
/// parameter order.
template <std::floating_point T>
double global_grad_norm(const ParameterSet<T>& ps) {
  double s = 0.0;
  for (const auto& p : ps.items()) {
    for (T g : p.tensor.grad()) s += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(s);
}

/// Rescales all gradients so their global norm is at most max_norm.
template <std::floating_point T>
ClipResult clip_grad_norm(ParameterSet<T>& ps, double max_norm) {
  ClipResult r;
  r.pre_norm = global_grad_norm(ps);
  r.post_norm = r.pre_norm;
  if (max_norm > 0 && r.pre_norm > max_norm) {
    const T scale = static_cast<T>(max_norm / r.pre_norm);
    for (auto& p : ps.items()) {
      for (T& g : p.tensor.mutable_grad()) g *= scale;
    }
    r.post_norm = global_grad_norm(ps);
  }
  return r;
}

/// AdamW with decoupled weight decay applied to every parameter.
template <std::floating_point T>
class AdamW {
 public:
  AdamW(const ParameterSet<T>& ps, AdamWConfig cfg = {}) : cfg_(cfg) {
    for (const auto& p : ps.items()) {
      m_.emplace_back(p.tensor.size(), T(0));
      v_.emplace_back(p.tensor.size(), T(0));
    }
  }

  const AdamWConfig& config() const { return cfg_; }
  std::size_t steps() const { return step_; }

  void step(ParameterSet<T>& ps, double lr) {
    if (ps.size() != m_.size()) throw ShapeError("AdamW: parameter set changed size");
    ++step_;
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T bc1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(step_)));
    const T bc2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(step_)));
    const T lr_t = static_cast<T>(lr), wd = static_cast<T>(cfg_.weight_decay), eps = static_cast<T>(cfg_.eps);
    std::size_t i = 0;
    for (auto& p : ps.items()) {
      auto w = p.tensor.mutable_data();
      const auto g = p.tensor.mutable_grad();  // zeros if the parameter got no gradient
      auto& m = m_[i];
      auto& v = v_[i];
      if (m.size() != w.size()) throw ShapeError("AdamW: moment shape differs for " + p.name);
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        const T mhat = m[j] / bc1, vhat = v[j] / bc2;
        w[j] -= lr_t * (mhat / (std::sqrt(vhat) + eps) + wd * w[j]);
      }
      ++i;
    }
  }

  /// Moments as checkpoint blobs named adam.m.<param> and adam.v.<param>.
  std::vector<NamedBlob> blobs(const ParameterSet<T>& ps) const {
    std::vector<NamedBlob> out;
    std::size_t i = 0;
    for (const auto& p : ps.items()) {
      const bool f64 = sizeof(T) > sizeof(float);
      out.push_back({"adam.m." + p.name, p.tensor.shape(), std::vector<double>(m_[i].begin(), m_[i].end()), f64});
      out.push_back({"adam.v." + p.name, p.tensor.shape(), std::vector<double>(v_[i].begin(), v_[i].end()), f64});
      ++i;
    }
    return out;
  }

  void restore(const ParameterSet<T>& ps, const Checkpoint& ck, std::size_t steps) {
    std::size_t i = 0;
    for (const auto& p : ps.items()) {
      for (auto [vec, tag] : {std::pair{&m_[i], "adam.m."}, std::pair{&v_[i], "adam.v."}}) {
        const NamedBlob* b = ck.find(std::string(tag) + p.name);
        if (!b || b->data.size() != vec->size()) throw IoError("checkpoint lacks optimizer state " + std::string(tag) + p.name);
        for (std::size_t j = 0; j < vec->size(); ++j) (*vec)[j] = static_cast<T>(b->data[j]);
      }
      ++i;
    }
    step_ = steps;
  }

 private:
  AdamWConfig cfg_;
  std::size_t step_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

/// Linear warm-up to `peak`, then constant or cosine decay to
/// peak * min_ratio at total_steps.
struct LrSchedule {
  double peak = 1e-3;
  std::size_t warmup_steps = 0;
  std::string kind = "constant";
  std::size_t total_steps = 0;
  double min_ratio = 0.1;

  double at(std::size_t step) const {
    if (step < warmup_steps) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    if (kind == "cosine" && total_steps > warmup_steps) {
      const double prog = std::min(1.0, static_cast<double>(step - warmup_steps) /
                                            static_cast<double>(total_steps - warmup_steps));
      return peak * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + std::cos(std::numbers::pi * prog)));
    }
    return peak;
  }
};

}  // namespace hsa_lab
