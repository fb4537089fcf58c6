#pragma once

// Recording graph over the ops in ops.hpp. Forward calls append a node
// holding the computed value; when recording is enabled each node also
// keeps a backward closure. backward() replays the closures in reverse
// order, accumulating input gradients in the tape and parameter gradients
// into the parameter tensors' grad slots.

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tokfuse/ops.hpp"
#include "tokfuse/tensor.hpp"

namespace tokfuse {

struct TapeError : std::logic_error {
  using std::logic_error::logic_error;
};

// One learnable convolution: weights [k, k, Cin, Cout], bias [Cout].
template <class T>
struct BasicConv2dLayer {
  BasicTensor<T> weight;
  BasicTensor<T> bias;
  std::size_t stride = 1;

  std::size_t kernel() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(2); }
  std::size_t out_channels() const { return weight.dim(3); }
  std::size_t parameter_count() const { return weight.size() + bias.size(); }
  void zero_grad() {
    weight.zero_grad();
    bias.zero_grad();
  }
};

template <class T>
class BasicTape {
 public:
  using Var = std::size_t;
  using Tensor = BasicTensor<T>;
  using Layer = BasicConv2dLayer<T>;

  explicit BasicTape(bool recording = true) : recording_(recording) {}

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var input(Tensor value) { return push(std::move(value), {}); }

  // Frozen parameters: gradient flows to the input only.
  Var conv2d(Var x, const Layer& layer) {
    return conv2d_impl(x, layer, nullptr);
  }
  // Trainable parameters: gradients also accumulate into layer's slots.
  Var conv2d(Var x, Layer& layer) { return conv2d_impl(x, layer, &layer); }

  Var gelu(Var x) {
    check(x);
    Var id = push(ops::gelu(value(x)), {x});
    if (recording_) {
      nodes_[id].backward = [x](BasicTape& t, const Tensor& dy) {
        ops::gelu_backward(t.value(x), dy, t.grad_buffer(x));
      };
      nodes_[id].gelu_input = true;
    }
    return id;
  }

  Var concat_channels(std::span<const Var> xs) {
    std::vector<const Tensor*> ptrs;
    for (Var x : xs) {
      check(x);
      ptrs.push_back(&value(x));
    }
    Tensor joined =
        ops::concat_channels<T>(std::span<const Tensor* const>(ptrs));
    Var id = push(std::move(joined), {xs.begin(), xs.end()});
    if (recording_) {
      std::vector<Var> inputs(xs.begin(), xs.end());
      nodes_[id].backward = [inputs](BasicTape& t, const Tensor& dy) {
        std::size_t offset = 0;
        for (Var x : inputs) {
          const std::size_t width = t.value(x).dim(2);
          ops::concat_channels_backward(dy, offset, width, t.grad_buffer(x));
          offset += width;
        }
      };
    }
    return id;
  }

  Var avgpool2x2(Var x) {
    check(x);
    Var id = push(ops::avgpool2x2(value(x)), {x});
    if (recording_) {
      nodes_[id].backward = [x](BasicTape& t, const Tensor& dy) {
        ops::avgpool2x2_backward(dy, t.grad_buffer(x));
      };
    }
    return id;
  }

  Var space_to_depth(Var x, std::size_t k) {
    check(x);
    Var id = push(ops::space_to_depth(value(x), k), {x});
    if (recording_) {
      nodes_[id].backward = [x, k](BasicTape& t, const Tensor& dy) {
        ops::space_to_depth_backward(dy, k, t.grad_buffer(x));
      };
    }
    return id;
  }

  Var reshape_tokens(Var x, std::size_t fused_tokens) {
    check(x);
    Var id = push(ops::reshape_tokens(value(x), fused_tokens), {x});
    if (recording_) {
      nodes_[id].backward = [x](BasicTape& t, const Tensor& dy) {
        auto dx = t.grad_buffer(x);
        const auto g = dy.data();
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
      };
    }
    return id;
  }

  const Tensor& value(Var x) const {
    check(x);
    return nodes_[x].value;
  }

  // Gradient of the last backward() target with respect to x. Nodes that
  // received no gradient report zeros.
  Tensor grad(Var x) const {
    check(x);
    const Node& n = nodes_[x];
    if (n.grad.empty()) return Tensor(n.value.shape());
    return Tensor(n.value.shape(), n.grad);
  }

  // Smallest |pre-activation| seen by any GeLU node; +inf when there is none.
  double min_abs_gelu_input() const {
    double best = std::numeric_limits<double>::infinity();
    for (const Node& n : nodes_) {
      if (!n.gelu_input) continue;
      for (T v : value(n.inputs.front()).data()) {
        best = std::min(best, static_cast<double>(std::fabs(v)));
      }
    }
    return best;
  }

  void backward(Var output, const Tensor& grad_output) {
    if (nodes_.empty() || output >= nodes_.size()) {
      throw TapeError("backward called before forward: node " +
                      std::to_string(output) + " was never recorded");
    }
    if (!recording_) {
      throw TapeError("backward called on a tape recorded without gradients");
    }
    if (consumed_) throw TapeError("backward already ran on this tape");
    if (grad_output.shape() != nodes_[output].value.shape()) {
      throw ShapeError("backward: output gradient " +
                       shape_string(grad_output.shape()) + " vs value " +
                       shape_string(nodes_[output].value.shape()));
    }
    consumed_ = true;
    auto seed = grad_buffer(output);
    const auto g = grad_output.data();
    std::copy(g.begin(), g.end(), seed.begin());
    for (std::size_t i = output + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      const Tensor dy(n.value.shape(), n.grad);
      n.backward(*this, dy);
    }
  }

 private:
  struct Node {
    Tensor value;
    std::vector<Var> inputs;
    std::function<void(BasicTape&, const Tensor&)> backward;
    std::vector<T> grad;
    bool gelu_input = false;
  };

  Var push(Tensor value, std::vector<Var> inputs) {
    nodes_.push_back(Node{std::move(value), std::move(inputs), {}, {}, false});
    return nodes_.size() - 1;
  }

  void check(Var x) const {
    if (x >= nodes_.size()) {
      throw TapeError("tape variable " + std::to_string(x) + " out of range");
    }
  }

  std::span<T> grad_buffer(Var x) {
    Node& n = nodes_[x];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    return n.grad;
  }

  Var conv2d_impl(Var x, const Layer& layer, Layer* trainable) {
    check(x);
    Tensor y = ops::conv2d(value(x), layer.weight, layer.bias, layer.stride);
    Var id = push(std::move(y), {x});
    if (recording_) {
      nodes_[id].backward = [x, &layer, trainable](BasicTape& t,
                                                   const Tensor& dy) {
        std::span<T> gw, gb;
        if (trainable != nullptr) {
          gw = trainable->weight.grad();
          gb = trainable->bias.grad();
        }
        ops::conv2d_backward(t.value(x), layer.weight, layer.bias,
                             layer.stride, dy, t.grad_buffer(x), gw, gb);
      };
    }
    return id;
  }

  bool recording_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
};

using Conv2dLayer = BasicConv2dLayer<float>;
using Tape = BasicTape<float>;

}  // namespace tokfuse
