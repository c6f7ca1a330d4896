#include "labelseq/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace labelseq {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using Strided = Eigen::OuterStride<>;
using StridedMap = Eigen::Map<RowMat, 0, Strided>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Strided>;

Buffer& grad_buffer(detail::Storage& s) {
  if (s.grad.empty()) s.grad.assign(s.data.size(), 0.0);
  return s.grad;
}

MapMat as_matrix(Buffer& v, std::size_t r, std::size_t c) {
  return MapMat(v.data(), static_cast<Eigen::Index>(r),
                static_cast<Eigen::Index>(c));
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " +
                         shape_str(t.shape()));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto s = std::make_shared<detail::Storage>();
  s->data.assign(shape_numel(shape), value);
  s->shape = std::move(shape);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::from(Shape shape, const std::vector<double>& values,
                    bool requires_grad) {
  return from(std::move(shape), Buffer(values.begin(), values.end()), requires_grad);
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values,
                    bool requires_grad) {
  return from(std::move(shape), Buffer(values), requires_grad);
}

Tensor Tensor::from(Shape shape, Buffer values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("Tensor::from: shape " + shape_str(shape) +
                         " does not hold " + std::to_string(values.size()) +
                         " values");
  }
  auto s = std::make_shared<detail::Storage>();
  s->shape = std::move(shape);
  s->data = std::move(values);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

std::size_t Tensor::rows() const {
  if (rank() == 0) return 1;
  return numel() / s_->shape.back();
}

std::size_t Tensor::cols() const {
  return rank() == 0 ? 1 : s_->shape.back();
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  }
  return s_->data[0];
}

std::span<const double> Tensor::grad() const {
  if (s_->grad.empty()) {
    s_->grad.assign(s_->data.size(), 0.0);
  }
  return s_->grad;
}

// ---------------------------------------------------------------------------
// Tape plumbing

Tensor Tape::make_output(Shape shape, Buffer data,
                         std::initializer_list<const Tensor*> inputs) {
  bool needs = false;
  if (recording()) {
    for (const Tensor* t : inputs) needs = needs || t->requires_grad();
  }
  return Tensor::from(std::move(shape), std::move(data), needs);
}

void Tape::record(const Tensor& out, std::function<void()> fn) {
  if (!out.requires_grad()) return;
  if (consumed_) {
    throw std::logic_error("Tape: recording on a consumed tape; call reset()");
  }
  records_.push_back({out.s_, std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) {
    throw std::logic_error("Tape::backward: tape already differentiated; "
                           "call reset() first");
  }
  if (loss.numel() != 1) {
    throw DimensionError("Tape::backward: loss must be scalar, got shape " +
                         shape_str(loss.shape()));
  }
  consumed_ = true;
  if (!loss.requires_grad()) return;
  grad_buffer(*loss.s_)[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
  }
}

void Tape::reset() {
  records_.clear();
  consumed_ = false;
}

// ---------------------------------------------------------------------------
// Ops

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ: " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Buffer out(m * n);
  as_matrix(out, m, n).noalias() =
      as_matrix(a.s_->data, m, k) * as_matrix(b.s_->data, k, n);
  Tensor c = make_output({m, n}, std::move(out), {&a, &b});
  record(c, [as = a.s_, bs = b.s_, cs = c.s_, m, k, n] {
    auto dc = as_matrix(cs->grad, m, n);
    if (as->requires_grad) {
      as_matrix(grad_buffer(*as), m, k).noalias() +=
          dc * as_matrix(bs->data, k, n).transpose();
    }
    if (bs->requires_grad) {
      as_matrix(grad_buffer(*bs), k, n).noalias() +=
          as_matrix(as->data, m, k).transpose() * dc;
    }
  });
  return c;
}

Tensor Tape::linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank2(x, "linear");
  require_rank2(w, "linear");
  const std::size_t m = x.shape()[0], k = x.shape()[1], n = w.shape()[1];
  if (w.shape()[0] != k || bias.numel() != n) {
    throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) +
                         " x " + shape_str(w.shape()) + " + " +
                         shape_str(bias.shape()));
  }
  Buffer out(m * n);
  auto o = as_matrix(out, m, n);
  o.noalias() = as_matrix(x.s_->data, m, k) * as_matrix(w.s_->data, k, n);
  o.rowwise() += as_matrix(bias.s_->data, 1, n).row(0);
  Tensor y = make_output({m, n}, std::move(out), {&x, &w, &bias});
  record(y, [xs = x.s_, ws = w.s_, bs = bias.s_, ys = y.s_, m, k, n] {
    auto dy = as_matrix(ys->grad, m, n);
    if (xs->requires_grad) {
      as_matrix(grad_buffer(*xs), m, k).noalias() +=
          dy * as_matrix(ws->data, k, n).transpose();
    }
    if (ws->requires_grad) {
      as_matrix(grad_buffer(*ws), k, n).noalias() +=
          as_matrix(xs->data, m, k).transpose() * dy;
    }
    if (bs->requires_grad) {
      as_matrix(grad_buffer(*bs), 1, n).row(0) += dy.colwise().sum();
    }
  });
  return y;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  const bool broadcast =
      !same && b.rank() == 1 && a.rank() >= 1 && b.numel() == a.cols();
  if (!same && !broadcast) {
    throw DimensionError("add: cannot broadcast " + shape_str(b.shape()) +
                         " onto " + shape_str(a.shape()));
  }
  Buffer out = a.s_->data;
  const std::size_t n = b.numel();
  const auto& bd = b.s_->data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[same ? i : i % n];
  Tensor c = make_output(a.shape(), std::move(out), {&a, &b});
  record(c, [as = a.s_, bs = b.s_, cs = c.s_, same, n] {
    const auto& dc = cs->grad;
    if (as->requires_grad) {
      auto& ga = grad_buffer(*as);
      for (std::size_t i = 0; i < dc.size(); ++i) ga[i] += dc[i];
    }
    if (bs->requires_grad) {
      auto& gb = grad_buffer(*bs);
      for (std::size_t i = 0; i < dc.size(); ++i) gb[same ? i : i % n] += dc[i];
    }
  });
  return c;
}

Tensor Tape::scale(const Tensor& a, double c) {
  Buffer out = a.s_->data;
  for (double& v : out) v *= c;
  Tensor y = make_output(a.shape(), std::move(out), {&a});
  record(y, [as = a.s_, ys = y.s_, c] {
    auto& ga = grad_buffer(*as);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * ys->grad[i];
  });
  return y;
}

Tensor Tape::relu(const Tensor& x) {
  Buffer out = x.s_->data;
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  Tensor y = make_output(x.shape(), std::move(out), {&x});
  record(y, [xs = x.s_, ys = y.s_] {
    auto& gx = grad_buffer(*xs);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (xs->data[i] > 0.0) gx[i] += ys->grad[i];
    }
  });
  return y;
}

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gain,
                        const Tensor& bias, double eps) {
  const std::size_t d = x.cols(), rows = x.rows();
  if (d < 2 || gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) +
                         " with gain " + shape_str(gain.shape()) +
                         " and bias " + shape_str(bias.shape()));
  }
  Buffer out(x.numel());
  auto xhat = std::make_shared<Buffer>(x.numel());
  auto inv_std = std::make_shared<Buffer>(rows);
  const auto& xd = x.s_->data;
  const auto& g = gain.s_->data;
  const auto& b = bias.s_->data;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = g[j] * h + b[j];
    }
  }
  Tensor y = make_output(x.shape(), std::move(out), {&x, &gain, &bias});
  record(y, [xs = x.s_, gs = gain.s_, bs = bias.s_, ys = y.s_, xhat, inv_std,
             rows, d] {
    const auto& dy = ys->grad;
    if (gs->requires_grad || bs->requires_grad) {
      auto& gg = grad_buffer(*gs);
      auto& gb = grad_buffer(*bs);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
          gg[j] += dy[r * d + j] * (*xhat)[r * d + j];
          gb[j] += dy[r * d + j];
        }
      }
    }
    if (!xs->requires_grad) return;
    auto& gx = grad_buffer(*xs);
    const auto& g = gs->data;
    const double inv_d = 1.0 / static_cast<double>(d);
    for (std::size_t r = 0; r < rows; ++r) {
      double mean_dh = 0.0, mean_dh_h = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double dh = dy[r * d + j] * g[j];
        mean_dh += dh;
        mean_dh_h += dh * (*xhat)[r * d + j];
      }
      mean_dh *= inv_d;
      mean_dh_h *= inv_d;
      for (std::size_t j = 0; j < d; ++j) {
        const double dh = dy[r * d + j] * g[j];
        gx[r * d + j] +=
            (*inv_std)[r] * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
      }
    }
  });
  return y;
}

Tensor Tape::softmax_lastdim(const Tensor& x, const std::vector<bool>* mask) {
  const std::size_t n = x.cols(), rows = x.rows();
  if (mask && mask->size() != x.numel()) {
    throw DimensionError("softmax_lastdim: mask size " +
                         std::to_string(mask->size()) + " for input " +
                         shape_str(x.shape()));
  }
  Buffer out(x.numel(), 0.0);
  const auto& xd = x.s_->data;
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && (*mask)[r * n + j]) continue;
      mx = std::max(mx, xd[r * n + j]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw std::domain_error("softmax_lastdim: row " + std::to_string(r) +
                              " has no unmasked finite entry");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && (*mask)[r * n + j]) continue;
      out[r * n + j] = std::exp(xd[r * n + j] - mx);
      z += out[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= z;
  }
  Tensor y = make_output(x.shape(), std::move(out), {&x});
  record(y, [xs = x.s_, ys = y.s_, rows, n] {
    auto& gx = grad_buffer(*xs);
    const auto& p = ys->data;
    const auto& dy = ys->grad;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += p[r * n + j] * dy[r * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        gx[r * n + j] += p[r * n + j] * (dy[r * n + j] - dot);
      }
    }
  });
  return y;
}

Tensor Tape::gather_rows(const Tensor& table, std::span<const int> indices) {
  require_rank2(table, "gather_rows");
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  Buffer out(indices.size() * d, 0.0);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int idx = indices[i];
    if (idx < 0) continue;
    if (static_cast<std::size_t>(idx) >= v) {
      throw std::out_of_range("gather_rows: index " + std::to_string(idx) +
                              " outside table of " + std::to_string(v) +
                              " rows");
    }
    std::copy_n(table.s_->data.begin() + idx * d, d, out.begin() + i * d);
  }
  Tensor y = make_output({indices.size(), d}, std::move(out), {&table});
  record(y, [ts = table.s_, ys = y.s_,
             idx = std::vector<int>(indices.begin(), indices.end()), d] {
    auto& gt = grad_buffer(*ts);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0) continue;
      for (std::size_t j = 0; j < d; ++j) gt[idx[i] * d + j] += ys->grad[i * d + j];
    }
  });
  return y;
}

Tensor Tape::cross_entropy_sum(const Tensor& logits,
                               std::span<const int> targets,
                               std::size_t class_begin,
                               std::size_t class_end) {
  const std::size_t width = logits.cols(), rows = logits.rows();
  if (class_end == 0) class_end = width;
  if (class_begin >= class_end || class_end > width) {
    throw DimensionError("cross_entropy_sum: class range [" +
                         std::to_string(class_begin) + "," +
                         std::to_string(class_end) + ") outside width " +
                         std::to_string(width));
  }
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy_sum: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(rows) + " rows");
  }
  const std::size_t n = class_end - class_begin;
  auto probs = std::make_shared<Buffer>(rows * n, 0.0);
  double total = 0.0;
  const auto& ld = logits.s_->data;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t < 0) continue;
    if (static_cast<std::size_t>(t) >= n) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) +
                              " outside " + std::to_string(n) + " classes");
    }
    const double* row = ld.data() + r * width + class_begin;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      (*probs)[r * n + j] = std::exp(row[j] - mx);
      z += (*probs)[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) (*probs)[r * n + j] /= z;
    total += -(row[t] - mx - std::log(z));
  }
  Tensor loss = make_output({}, {total}, {&logits});
  record(loss, [ls = logits.s_, out = loss.s_, probs,
                tg = std::vector<int>(targets.begin(), targets.end()), rows, n,
                width, class_begin] {
    auto& gl = grad_buffer(*ls);
    const double g = out->grad[0];
    for (std::size_t r = 0; r < rows; ++r) {
      if (tg[r] < 0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        const double onehot = static_cast<int>(j) == tg[r] ? 1.0 : 0.0;
        gl[r * width + class_begin + j] += g * ((*probs)[r * n + j] - onehot);
      }
    }
  });
  return loss;
}

Tensor Tape::cross_entropy(const Tensor& logits, int target) {
  if (logits.rank() != 1) {
    throw DimensionError("cross_entropy: expected [n_classes], got " +
                         shape_str(logits.shape()));
  }
  if (target < 0) {
    throw std::out_of_range("cross_entropy: negative target " +
                            std::to_string(target));
  }
  const int t[1] = {target};
  return cross_entropy_sum(logits, t);
}

Tensor Tape::sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.s_->data) total += v;
  Tensor y = make_output({}, {total}, {&x});
  record(y, [xs = x.s_, ys = y.s_] {
    auto& gx = grad_buffer(*xs);
    for (double& g : gx) g += ys->grad[0];
  });
  return y;
}

Tensor Tape::causal_attention(const Tensor& q, const Tensor& k,
                              const Tensor& v,
                              std::span<const Segment> segments,
                              std::size_t n_heads,
                              const AttentionHooks& hooks) {
  require_rank2(q, "causal_attention");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("causal_attention: q/k/v shapes differ: " +
                         shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                         ", " + shape_str(v.shape()));
  }
  const std::size_t rows = q.shape()[0], d = q.shape()[1];
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("causal_attention: width " + std::to_string(d) +
                         " not divisible by " + std::to_string(n_heads) +
                         " heads");
  }
  const std::size_t hd = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::size_t n_blocks = segments.size() * n_heads;
  if (!hooks.masks.empty() && hooks.masks.size() != n_blocks) {
    throw DimensionError("causal_attention: expected " +
                         std::to_string(n_blocks) + " masks, got " +
                         std::to_string(hooks.masks.size()));
  }
  for (const Segment& s : segments) {
    if (s.offset + s.length > rows || s.length == 0) {
      throw DimensionError("causal_attention: segment outside " +
                           std::to_string(rows) + " rows");
    }
  }

  // Post-softmax (pre-mask) weights per block, kept for backward.
  auto probs = std::make_shared<std::vector<RowMat>>(n_blocks);
  if (hooks.weights_pre) hooks.weights_pre->assign(n_blocks, {});
  if (hooks.weights_post) hooks.weights_post->assign(n_blocks, {});

  Buffer out(rows * d, 0.0);
  const Strided stride(static_cast<Eigen::Index>(d));
  for (std::size_t si = 0; si < segments.size(); ++si) {
    const auto len = static_cast<Eigen::Index>(segments[si].length);
    const std::size_t base = segments[si].offset * d;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t blk = si * n_heads + h;
      const auto ehd = static_cast<Eigen::Index>(hd);
      ConstStridedMap qh(q.s_->data.data() + base + h * hd, len, ehd, stride);
      ConstStridedMap kh(k.s_->data.data() + base + h * hd, len, ehd, stride);
      ConstStridedMap vh(v.s_->data.data() + base + h * hd, len, ehd, stride);
      RowMat scores = (qh * kh.transpose()) * scale;
      RowMat& p = (*probs)[blk];
      p.setZero(len, len);
      for (Eigen::Index i = 0; i < len; ++i) {
        double mx = scores(i, 0);
        for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, scores(i, j));
        double z = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          p(i, j) = std::exp(scores(i, j) - mx);
          z += p(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) p(i, j) /= z;
      }
      if (hooks.weights_pre) {
        (*hooks.weights_pre)[blk].assign(p.data(), p.data() + p.size());
      }
      StridedMap oh(out.data() + base + h * hd, len, ehd, stride);
      const bool masked = !hooks.masks.empty() && !hooks.masks[blk].empty();
      if (masked) {
        ConstMapMat m(hooks.masks[blk].data(), len, len);
        RowMat pm = p.cwiseProduct(m);
        oh.noalias() = pm * vh;
        if (hooks.weights_post) {
          (*hooks.weights_post)[blk].assign(pm.data(), pm.data() + pm.size());
        }
      } else {
        oh.noalias() = p * vh;
        if (hooks.weights_post) {
          (*hooks.weights_post)[blk].assign(p.data(), p.data() + p.size());
        }
      }
    }
  }

  Tensor y = make_output({rows, d}, std::move(out), {&q, &k, &v});
  auto masks = std::make_shared<std::vector<std::vector<double>>>(hooks.masks);
  record(y, [qs = q.s_, ks = k.s_, vs = v.s_, ys = y.s_, probs, masks,
             segs = std::vector<Segment>(segments.begin(), segments.end()),
             n_heads, d, hd, scale] {
    const Strided stride(static_cast<Eigen::Index>(d));
    const auto ehd = static_cast<Eigen::Index>(hd);
    auto& gq = grad_buffer(*qs);
    auto& gk = grad_buffer(*ks);
    auto& gv = grad_buffer(*vs);
    for (std::size_t si = 0; si < segs.size(); ++si) {
      const auto len = static_cast<Eigen::Index>(segs[si].length);
      const std::size_t base = segs[si].offset * d;
      for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t blk = si * n_heads + h;
        const std::size_t off = base + h * hd;
        ConstStridedMap qh(qs->data.data() + off, len, ehd, stride);
        ConstStridedMap kh(ks->data.data() + off, len, ehd, stride);
        ConstStridedMap vh(vs->data.data() + off, len, ehd, stride);
        ConstStridedMap doh(ys->grad.data() + off, len, ehd, stride);
        const RowMat& p = (*probs)[blk];
        const bool masked = !masks->empty() && !(*masks)[blk].empty();
        RowMat dp = doh * vh.transpose();
        StridedMap dvh(gv.data() + off, len, ehd, stride);
        if (masked) {
          ConstMapMat m((*masks)[blk].data(), len, len);
          dvh.noalias() += p.cwiseProduct(m).transpose() * doh;
          dp = dp.cwiseProduct(m);
        } else {
          dvh.noalias() += p.transpose() * doh;
        }
        // softmax backward restricted to the causal triangle
        RowMat ds = RowMat::Zero(len, len);
        for (Eigen::Index i = 0; i < len; ++i) {
          double dot = 0.0;
          for (Eigen::Index j = 0; j <= i; ++j) dot += p(i, j) * dp(i, j);
          for (Eigen::Index j = 0; j <= i; ++j) {
            ds(i, j) = p(i, j) * (dp(i, j) - dot) * scale;
          }
        }
        StridedMap dqh(gq.data() + off, len, ehd, stride);
        StridedMap dkh(gk.data() + off, len, ehd, stride);
        dqh.noalias() += ds * kh;
        dkh.noalias() += ds.transpose() * qh;
      }
    }
  });
  return y;
}

}  // namespace labelseq
