// SPDX-License-Identifier: Apache-2.0
//
// Objective functions: temperature softmax, cross-entropy, the distillation
// loss (teacher softened by 1/T), and the adversarial pair (discriminator
// loss + confusion loss for the segmenter).
//
// Class-axis convention: axis 0 for rank-1 tensors, axis 1 otherwise
// ([B,K], [B,K,H,W]).
#pragma once

#include <vector>

#include "sdda/tensor.hpp"

namespace sdda::losses {

struct Temperature {
  double t = 2.0;
};

inline void check_temperature(const Temperature& T) {
  if (!(T.t > 0.0)) throw Error("temperature must be > 0");
}

// Graph-connected scalar plus a per-sample breakdown (mean over samples of
// per_sample equals the scalar).
struct LossValue {
  Tensor scalar;
  std::vector<double> per_sample;
};

inline size_t class_axis(const Shape& s) { return s.size() <= 1 ? 0 : 1; }

inline Tensor softmax(Graph& g, const Tensor& logits, Temperature T) {
  check_temperature(T);
  return g.softmax(logits, class_axis(logits.shape()), 1.0 / T.t);
}

namespace detail {

// Probabilities below this are clamped before the log so saturated
// predictions cannot produce -inf.
inline constexpr double kProbFloor = 1e-12;

struct AxisDims {
  size_t batch;     // leading (sample) extent
  size_t classes;   // class-axis extent
  size_t inner;     // trailing spatial extent
  size_t positions; // batch * inner (pixels/rows entering the mean)
};

inline AxisDims ce_dims(const Shape& s) {
  const size_t axis = class_axis(s);
  AxisDims d{1, s[axis], 1, 0};
  for (size_t i = 0; i < axis; ++i) d.batch *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) d.inner *= s[i];
  d.positions = d.batch * d.inner;
  return d;
}

// -sum_k t log(max(p, floor)) accumulated per leading-batch entry, each
// entry averaged over its positions.
inline std::vector<double> per_sample_ce(const Tensor& target,
                                         const Tensor& pred) {
  const AxisDims d = ce_dims(pred.shape());
  const auto tv = target.value(), pv = pred.value();
  std::vector<double> out(d.batch, 0.0);
  for (size_t b = 0; b < d.batch; ++b) {
    double acc = 0.0;
    const size_t base = b * d.classes * d.inner;
    for (size_t k = 0; k < d.classes; ++k) {
      for (size_t i = 0; i < d.inner; ++i) {
        const size_t j = base + k * d.inner + i;
        acc -= tv[j] * std::log(std::max(pv[j], kProbFloor));
      }
    }
    out[b] = acc / static_cast<double>(d.inner);
  }
  return out;
}

}  // namespace detail

// Mean over all positions (pixels and samples) of -sum_k target_k log pred_k.
// Both arguments are probability distributions along the class axis.
inline LossValue cross_entropy(Graph& g, const Tensor& target_probs,
                               const Tensor& pred_probs) {
  if (target_probs.shape() != pred_probs.shape()) {
    throw ShapeError("cross_entropy", target_probs.shape(), pred_probs.shape());
  }
  const detail::AxisDims d = detail::ce_dims(pred_probs.shape());
  Tensor logp = g.log(g.clamp_min(pred_probs, detail::kProbFloor));
  Tensor weighted = g.mul(target_probs, logp);
  Tensor total = g.reduce_sum(weighted);
  Tensor scalar = g.mul(total, -1.0 / static_cast<double>(d.positions));
  return LossValue{scalar, detail::per_sample_ce(target_probs, pred_probs)};
}

// Eq.-style distillation objective: CE between the temperature-softened
// teacher distribution and the student distribution. By default only the
// teacher side is softened (the as-written form); soften_student enables the
// classical variant that softens both sides and rescales by T^2 so gradient
// magnitudes stay comparable across temperatures.
inline LossValue distillation_loss(Graph& g, const Tensor& teacher_logits,
                                   const Tensor& student_logits, Temperature T,
                                   bool soften_student = false) {
  if (teacher_logits.shape() != student_logits.shape()) {
    throw ShapeError("distillation_loss", teacher_logits.shape(),
                     student_logits.shape());
  }
  if (teacher_logits.requires_grad()) {
    throw GraphError("distillation_loss: teacher logits must be detached");
  }
  check_temperature(T);
  Tensor soft_targets = softmax(g, teacher_logits, T);
  Tensor student_probs =
      softmax(g, student_logits, soften_student ? T : Temperature{1.0});
  LossValue ce = cross_entropy(g, soft_targets, student_probs);
  if (soften_student) {
    const double t2 = T.t * T.t;
    ce.scalar = g.mul(ce.scalar, t2);
    for (double& v : ce.per_sample) v *= t2;
  }
  return ce;
}

struct AdversarialLosses {
  LossValue discriminator;  // CE against the true domain labels
  LossValue confusion;      // CE against the uniform distribution
};

// domain_logits: [B,2]; true_domain: 0 = source, 1 = target per row.
inline AdversarialLosses adversarial_losses(
    Graph& g, const Tensor& domain_logits,
    const std::vector<int>& true_domain) {
  if (domain_logits.rank() != 2 || domain_logits.shape()[1] != 2 ||
      domain_logits.shape()[0] != true_domain.size()) {
    throw ShapeError("adversarial_losses", domain_logits.shape(),
                     Shape{true_domain.size(), 2});
  }
  const size_t b = domain_logits.shape()[0];
  std::vector<double> onehot(b * 2, 0.0);
  for (size_t i = 0; i < b; ++i) {
    if (true_domain[i] != 0 && true_domain[i] != 1) {
      throw Error("adversarial_losses: domain labels must be 0 or 1");
    }
    onehot[i * 2 + static_cast<size_t>(true_domain[i])] = 1.0;
  }
  Tensor probs = softmax(g, domain_logits, Temperature{1.0});
  Tensor target = Tensor::leaf({b, 2}, std::move(onehot));
  Tensor uniform = Tensor::full({b, 2}, 0.5);
  return AdversarialLosses{cross_entropy(g, target, probs),
                           cross_entropy(g, uniform, probs)};
}

// Shannon entropy of a distribution (plain helper, no graph).
inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

}  // namespace sdda::losses
