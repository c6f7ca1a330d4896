#pragma once

// Dense float64 tensors with a reverse-mode gradient tape.
//
// Storage is row-major with no views or strides. Most ops are defined for
// rank-2 tensors ([rows, cols]); rank-1 tensors are treated as a single row
// where that makes sense.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace labelseq {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// 64-byte aligned so vectorised reductions take the same path on every run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

namespace detail {
struct Storage {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until first accumulation
  bool requires_grad = false;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, const std::vector<double>& values,
                     bool requires_grad = false);
  static Tensor from(Shape shape, std::initializer_list<double> values,
                     bool requires_grad = false);
  static Tensor from(Shape shape, Buffer values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t numel() const { return s_->data.size(); }
  // Leading dimensions collapsed; the last dimension is the row width.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return s_->data; }
  // Only parameters and leaf inputs should be mutated, and only between tapes.
  std::span<double> mutable_data() { return s_->data; }
  double item() const;
  double at(std::size_t r, std::size_t c) const {
    return s_->data[r * cols() + c];
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }
  bool has_grad() const { return !s_->grad.empty(); }
  // Zero-filled view when no gradient has been accumulated yet.
  std::span<const double> grad() const;
  void zero_grad() { s_->grad.clear(); }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  friend class Tape;
  explicit Tensor(std::shared_ptr<detail::Storage> s) : s_(std::move(s)) {}
  std::shared_ptr<detail::Storage> s_;
};

// Contiguous block of rows [offset, offset + length) treated as one sequence
// by the attention op. Rows of different segments never attend to each other.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

// Post-softmax hooks for one call of causal_attention.
struct AttentionHooks {
  // masks[segment * n_heads + head]: row-major [len, len] multipliers applied
  // after softmax (no renormalisation). Empty vector / empty entry = no mask.
  std::vector<std::vector<double>> masks;
  // When set, receives post-softmax weights before and after masking,
  // indexed like masks.
  std::vector<std::vector<double>>* weights_pre = nullptr;
  std::vector<std::vector<double>>* weights_post = nullptr;
};

class Tape {
 public:
  enum class Mode { kRecord, kInference };

  explicit Tape(Mode mode = Mode::kRecord) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == Mode::kRecord; }
  std::size_t size() const { return records_.size(); }

  // a[m,k] x b[k,n]
  Tensor matmul(const Tensor& a, const Tensor& b);
  // x[m,k] x w[k,n] + bias[n]
  Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
  // Same shape, or b a vector matching the last dimension of a.
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double c);
  Tensor relu(const Tensor& x);
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                    double eps = 1e-5);
  // mask, when given, has the shape of x; true marks a masked entry.
  Tensor softmax_lastdim(const Tensor& x,
                         const std::vector<bool>* mask = nullptr);
  // Rows of table; index -1 yields a zero row.
  Tensor gather_rows(const Tensor& table, std::span<const int> indices);
  // Sum over rows r with targets[r] >= 0 of -log softmax(logits[r, cols])[t],
  // where cols = [class_begin, class_end) and t is relative to class_begin.
  Tensor cross_entropy_sum(const Tensor& logits, std::span<const int> targets,
                           std::size_t class_begin = 0,
                           std::size_t class_end = 0);
  // Single-row convenience: logits [n_classes].
  Tensor cross_entropy(const Tensor& logits, int target);
  Tensor sum(const Tensor& x);
  // Future-masked multi-head scaled dot-product attention over packed rows.
  // q, k, v: [rows, d]; heads split the columns evenly. Returns [rows, d]
  // with head outputs concatenated.
  Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                          std::span<const Segment> segments,
                          std::size_t n_heads,
                          const AttentionHooks& hooks = {});

  // Populates grads of every requires_grad tensor reachable from loss.
  // A tape can be differentiated once; call reset() before reuse.
  void backward(const Tensor& loss);
  void reset();

 private:
  struct Record {
    std::shared_ptr<detail::Storage> output;
    std::function<void()> backward;
  };

  Tensor make_output(Shape shape, Buffer data,
                     std::initializer_list<const Tensor*> inputs);
  void record(const Tensor& out, std::function<void()> fn);

  Mode mode_;
  std::vector<Record> records_;
  bool consumed_ = false;
};

}  // namespace labelseq
