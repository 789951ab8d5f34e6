#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "msf/tensor.hpp"

namespace msf {

enum class OpKind {
  Conv2d,
  AvgPool,
  MaxPool,
  BilinearResize,
  BatchNorm,
  Relu,
  Concat,
  Add,
  SoftmaxCrossEntropy,
  Scale,
};

// Execution record of one differentiable op: cost metadata plus a closure
// that routes the output gradient to the op's inputs.
template <typename T>
struct TapeNode {
  OpKind kind;
  std::uint64_t macs = 0;      // multiply-accumulate count of the forward pass
  std::uint64_t aux_ops = 0;   // non-MAC per-element work (pooling, elementwise)
  std::function<void()> backward;
};

// Ordered record of executed differentiable ops. A tape and the tensors it
// references are confined to one logical thread for the duration of a
// forward/backward pass; independent tapes may run in parallel.
template <typename T>
class Tape {
 public:
  void record(OpKind kind, std::uint64_t macs, std::uint64_t aux_ops,
              std::function<void()> backward) {
    nodes_.push_back(TapeNode<T>{kind, macs, aux_ops, std::move(backward)});
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<TapeNode<T>>& nodes() const { return nodes_; }

  std::uint64_t total_macs() const {
    std::uint64_t s = 0;
    for (const auto& n : nodes_) s += n.macs;
    return s;
  }
  std::uint64_t total_aux_ops() const {
    std::uint64_t s = 0;
    for (const auto& n : nodes_) s += n.aux_ops;
    return s;
  }

  // Seeds d(loss)/d(loss) = 1 and replays the recorded ops in exact reverse
  // execution order. Each node accumulates into its inputs' grad buffers, so
  // tensors consumed by several ops receive every contribution exactly once.
  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw shape_error("Tape::backward: loss must be a scalar tensor");
    }
    loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->backward) it->backward();
    }
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<TapeNode<T>> nodes_;
};

}  // namespace msf
