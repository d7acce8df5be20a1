#pragma once

// Minimal reverse-mode autodiff over dense row-major matrices. Every op
// records a closure that pushes its output gradient to its inputs; backward()
// walks the graph in reverse topological order.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace percept {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

namespace ag {

struct Node {
  Mat value;
  Mat grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Mat& grad_buffer() {
    if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Mat& value() const { return node_->value; }
  Mat& mutable_value() { return node_->value; }
  const Mat& grad() const { return node_->grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  double item() const { return node_->value(0, 0); }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  void zero_grad() { node_->grad.setZero(node_->value.rows(), node_->value.cols()); }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Mat value);
Var parameter(Mat value);  // leaf that accumulates gradients

// Seeds d(loss)/d(loss) = 1 and accumulates into every reachable leaf.
void backward(const Var& scalar_loss);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var add_row(const Var& a, const Var& row);  // broadcast a 1 x n row over a's rows
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var gelu(const Var& a);
Var softmax_rows(const Var& a);
Var rms_norm(const Var& a, const Var& gain, double eps = 1e-5);
Var gather_rows(const Var& table, std::span<const int> rows);
Var concat_rows(std::span<const Var> parts);
Var sum(const Var& a);

// Multi-head self-attention over a packed [Q | K | V] matrix (T x 3d). Rows
// before `prefix_len` attend bidirectionally among themselves; later rows
// attend to the whole prefix and causally to each other.
Var attention(const Var& qkv, int heads, int prefix_len);

// Mean cross-entropy over rows whose weight is nonzero.
Var cross_entropy(const Var& logits, std::span<const int> targets, std::span<const double> weights);

// Scalar node whose value and input gradient were computed outside the graph.
Var external_loss(const Var& input, double value, Mat grad);

// Shared by the training graph and the cache-based decoder so both agree.
void attention_mask_row(int row, int prefix_len, int cols, Eigen::Ref<RowVec> scores);
double gelu_value(double x);
Mat gelu_values(const Mat& x, Mat* tanh_out = nullptr);

}  // namespace ag
}  // namespace percept
