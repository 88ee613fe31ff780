#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "pccnn/tensor.hpp"

namespace pccnn {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int index = -1;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

/// Records primitive applications so adjoints can be replayed in reverse.
///
/// Values are stored eagerly; a backward closure is kept only when recording
/// is enabled and at least one input requires a gradient. With recording
/// disabled the tape is a plain activation arena for inference.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad && recording_, {}});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Appends the result of a primitive. `backward` is dropped unless some
  /// input needs a gradient.
  Var<T> record(Tensor<T> value, bool any_input_requires_grad, Backward backward) {
    const bool rg = recording_ && any_input_requires_grad;
    nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(backward) : Backward{}});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& value(int i) const { return nodes_.at(static_cast<std::size_t>(i)).value; }
  bool requires_grad(int i) const { return nodes_.at(static_cast<std::size_t>(i)).requires_grad; }

  /// Gradient buffer of node i, zero-initialized on first access.
  Tensor<T>& grad(int i) {
    Node& n = nodes_.at(static_cast<std::size_t>(i));
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  bool has_grad(int i) const { return !nodes_.at(static_cast<std::size_t>(i)).grad.empty(); }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Returns d(loss)/d(p) for every p in `wrt`. Parameters the loss never
  /// touched receive zero tensors.
  std::vector<Tensor<T>> gradients(Var<T> loss, std::span<const Var<T>> wrt) {
    if (loss.tape != this) throw ValidationError("gradients: loss belongs to another tape");
    if (value(loss.index).size() != 1) {
      throw ValidationError("gradients: loss must be scalar, got shape " +
                            to_string(value(loss.index).shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor<T>();
    grad(loss.index)[0] = T{1};
    for (int i = loss.index; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
    std::vector<Tensor<T>> out;
    out.reserve(wrt.size());
    for (const Var<T>& p : wrt) {
      if (has_grad(p.index)) {
        out.push_back(nodes_[static_cast<std::size_t>(p.index)].grad);
      } else {
        out.emplace_back(value(p.index).shape());
      }
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  bool recording_;
  std::deque<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(index);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape->requires_grad(index);
}

template <typename T>
std::vector<Tensor<T>> grad(Var<T> loss, std::span<const Var<T>> parameters) {
  return loss.tape->gradients(loss, parameters);
}

}  // namespace pccnn
