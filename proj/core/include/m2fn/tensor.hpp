#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace m2fn {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

enum class Mode { kTrain, kEval };

namespace detail {
struct TensorStorage {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until a backward pass reaches it
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major tensor handle. Copies share storage, so a Tensor held by a
// model and the same Tensor handed to an optimizer refer to one buffer.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return storage_->shape; }
  std::size_t rank() const { return storage_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return storage_->values.size(); }

  std::span<const double> values() const { return storage_->values; }
  std::span<double> mutable_values() { return storage_->values; }
  double item() const;

  bool requires_grad() const { return storage_->requires_grad; }
  void set_requires_grad(bool flag) { storage_->requires_grad = flag; }
  bool has_grad() const { return !storage_->grad.empty(); }
  std::span<const double> grad() const { return storage_->grad; }
  // Allocates a zero gradient on first use.
  std::span<double> mutable_grad() const;
  void zero_grad();

  // Deep copy; the clone does not require grad.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const {
    return storage_ == other.storage_;
  }

 private:
  friend class Tape;
  std::shared_ptr<detail::TensorStorage> storage_;
};

// Records primitive applications while a Tape::Recording scope is active on
// the current thread. backward() replays them in reverse and is single-shot:
// a second call without reset() throws ContractError.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  class Recording {
   public:
    explicit Recording(Tape& tape);
    ~Recording();
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    Tape* previous_;
  };

  // Appends a node if a tape is active and any input requires grad; marks the
  // output as requiring grad in that case.
  static void record(std::string op, const std::vector<Tensor>& inputs,
                     Tensor& output, std::function<void()> backward);
  static Tape* active();

  void backward(const Tensor& loss);
  void reset();
  std::size_t size() const { return nodes_.size(); }
  // Names of recorded ops in forward order.
  std::vector<std::string> op_names() const;
  // Order in which the last backward() visited nodes (indices into forward
  // order).
  const std::vector<std::size_t>& visit_order() const { return visit_order_; }

 private:
  struct Node {
    std::string op;
    std::vector<std::shared_ptr<detail::TensorStorage>> inputs;
    std::shared_ptr<detail::TensorStorage> output;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  std::vector<std::size_t> visit_order_;
  bool consumed_ = false;
};

// Throws NumericError naming `where` when any value is NaN or infinite.
void check_finite(const Tensor& t, const std::string& where);

}  // namespace m2fn
