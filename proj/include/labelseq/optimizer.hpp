#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "labelseq/tensor.hpp"

namespace labelseq {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Moment buffers for a fixed list of parameters, in the order they were
// registered. Buffers start at zero; step counts completed updates.
class AdamState {
 public:
  AdamState() = default;
  AdamState(AdamConfig config, std::span<const Tensor> params);

  const AdamConfig& config() const { return config_; }
  std::int64_t step() const { return step_; }
  const std::vector<std::vector<double>>& first_moment() const { return m_; }
  const std::vector<std::vector<double>>& second_moment() const { return v_; }

  // One bias-corrected Adam update of every parameter from its grad buffer.
  // Parameters without an accumulated grad are treated as zero-gradient.
  void apply(std::span<Tensor> params);

 private:
  AdamConfig config_;
  std::int64_t step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

inline void adam_step(std::span<Tensor> params, AdamState& state) {
  state.apply(params);
}

}  // namespace labelseq
