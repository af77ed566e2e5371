#ifndef DYNGEST_TENSOR_HPP
#define DYNGEST_TENSOR_HPP

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "dyngest/errors.hpp"

namespace dyngest {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backprop;  // reads grad, accumulates into parents

  std::size_t numel() const { return value.size(); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

// Shared-ownership handle onto a node of the autodiff graph. Copying a
// Tensor aliases the same storage.
template <typename T>
class Tensor {
public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw ConfigError("tensor shape " + shape_str(shape) + " does not match " +
                        std::to_string(data.size()) + " values");
    node_ = std::make_shared<TensorNode<T>>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), std::vector<T>(shape_numel(shape), T(0)),
                  requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    return Tensor(std::move(shape), std::vector<T>(shape_numel(shape), v),
                  requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->numel(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }

  std::vector<T>& data() { return node_->value; }
  const std::vector<T>& data() const { return node_->value; }
  std::vector<T>& grad() { return node_->grad; }
  const std::vector<T>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  T item() const {
    if (node_->numel() != 1)
      throw ConfigError("item() on tensor with " + std::to_string(node_->numel()) +
                        " elements");
    return node_->value[0];
  }

  void zero_grad() { node_->grad.clear(); }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

  // Graph construction helper used by ops: result node with given parents.
  static Tensor make_result(Shape shape, std::vector<T> value,
                            std::vector<Tensor> parents,
                            std::function<void(TensorNode<T>&)> backprop) {
    Tensor out(std::move(shape), std::move(value));
    bool needs = false;
    for (const auto& p : parents) {
      needs = needs || p.requires_grad();
      out.node_->parents.push_back(p.node_);
    }
    out.node_->requires_grad = needs;
    if (needs) out.node_->backprop = std::move(backprop);
    return out;
  }

private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Reverse-mode sweep from a scalar loss. Gradients accumulate (+=) into
// every reachable requires_grad tensor and persist until zero_grad.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw ConfigError("backward() requires a scalar loss, got shape " +
                      shape_str(loss.shape()));
  using NodeT = TensorNode<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  // Iterative post-order DFS over the requires_grad subgraph.
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  NodeT* root = loss.node().get();
  if (!root->requires_grad) return;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      NodeT* p = node->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// Binary tensor format: magic "DGRT", version u32=1, dtype u8 (1=f32, 2=f64),
// rank u8, dims u64[rank], raw row-major values. Little-endian throughout.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 1 : 2;
}

template <typename U>
void write_le(std::ostream& os, U v) {
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U read_le(std::istream& is, std::uint64_t& offset) {
  unsigned char buf[sizeof(U)];
  is.read(reinterpret_cast<char*>(buf), sizeof(U));
  if (static_cast<std::size_t>(is.gcount()) != sizeof(U))
    throw FormatError("truncated tensor data at offset " + std::to_string(offset));
  offset += sizeof(U);
  U v;
  std::memcpy(&v, buf, sizeof(U));
  return v;
}

}  // namespace detail

constexpr char kTensorMagic[4] = {'D', 'G', 'R', 'T'};
constexpr std::uint32_t kTensorFormatVersion = 1;

template <typename T>
void write_tensor(std::ostream& os, const Shape& shape, const std::vector<T>& data) {
  os.write(kTensorMagic, 4);
  detail::write_le<std::uint32_t>(os, kTensorFormatVersion);
  detail::write_le<std::uint8_t>(os, detail::dtype_code<T>());
  detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(shape.size()));
  for (auto d : shape) detail::write_le<std::uint64_t>(os, d);
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  os.write(reinterpret_cast<const char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(T)));
}

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  write_tensor(os, t.shape(), t.data());
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  std::uint64_t offset = 0;
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kTensorMagic, 4) != 0)
    throw FormatError("bad tensor magic at offset 0 (expected \"DGRT\")");
  offset = 4;
  const auto version = detail::read_le<std::uint32_t>(is, offset);
  if (version != kTensorFormatVersion)
    throw FormatError("unsupported tensor format version " + std::to_string(version) +
                      " at offset 4");
  const auto dtype = detail::read_le<std::uint8_t>(is, offset);
  if (dtype != detail::dtype_code<T>())
    throw FormatError("tensor dtype code " + std::to_string(dtype) +
                      " does not match requested element type (offset 8)");
  const auto rank = detail::read_le<std::uint8_t>(is, offset);
  Shape shape(rank);
  for (auto& d : shape) {
    d = detail::read_le<std::uint64_t>(is, offset);
    if (d == 0) throw FormatError("zero dimension at offset " + std::to_string(offset));
  }
  const std::size_t n = shape_numel(shape);
  std::vector<T> data(n);
  is.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(n * sizeof(T)));
  if (static_cast<std::size_t>(is.gcount()) != n * sizeof(T))
    throw FormatError("truncated tensor data at offset " +
                      std::to_string(offset + static_cast<std::uint64_t>(is.gcount())));
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void check_finite(const std::vector<T>& data, const char* what) {
  for (const T v : data)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
}

}  // namespace dyngest

#endif  // DYNGEST_TENSOR_HPP
