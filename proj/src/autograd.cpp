#include "percept/autograd.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_set>

#include "percept/error.hpp"

namespace percept::ag {
namespace {

Var make_node(Mat value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  for (const auto& in : inputs) {
    if (in.requires_grad()) node->requires_grad = true;
    node->parents.push_back(in.shared());
  }
  if (node->requires_grad) node->backward = std::move(backward);
  return Var(std::move(node));
}

void require_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeMismatch(std::string(op) + ": operand shapes differ");
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

}  // namespace

double gelu_value(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

// tanh via exp so Eigen vectorizes it; saturates cleanly at +-1.
Mat gelu_values(const Mat& x, Mat* tanh_out) {
  const auto inner = kGeluC * (x.array() + 0.044715 * x.array().cube());
  Mat t = (1.0 - 2.0 / ((2.0 * inner).exp() + 1.0)).matrix();
  Mat out = (0.5 * x.array() * (1.0 + t.array())).matrix();
  if (tanh_out) *tanh_out = std::move(t);
  return out;
}

void attention_mask_row(int row, int prefix_len, int cols, Eigen::Ref<RowVec> scores) {
  const int limit = row < prefix_len ? prefix_len : row + 1;
  for (int j = limit; j < cols; ++j) scores[j] = -std::numeric_limits<double>::infinity();
}

Var constant(Mat value) { return make_node(std::move(value), {}, {}); }

Var parameter(Mat value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

void backward(const Var& scalar_loss) {
  if (scalar_loss.rows() != 1 || scalar_loss.cols() != 1)
    throw ShapeMismatch("backward needs a scalar loss");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{scalar_loss.node(), 0}};
  seen.insert(scalar_loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  scalar_loss.node()->grad_buffer()(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward && (*it)->grad.size() != 0) (*it)->backward(**it);
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ShapeMismatch("matmul: inner dimensions differ");
  return make_node(a.value() * b.value(), {a, b}, [a, b](Node& self) {
    if (a.requires_grad()) a.node()->grad_buffer().noalias() += self.grad * b.value().transpose();
    if (b.requires_grad()) b.node()->grad_buffer().noalias() += a.value().transpose() * self.grad;
  });
}

Var transpose(const Var& a) {
  return make_node(a.value().transpose(), {a}, [a](Node& self) {
    a.node()->grad_buffer() += self.grad.transpose();
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  return make_node(a.value() + b.value(), {a, b}, [a, b](Node& self) {
    if (a.requires_grad()) a.node()->grad_buffer() += self.grad;
    if (b.requires_grad()) b.node()->grad_buffer() += self.grad;
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeMismatch("add_row: bias shape");
  Mat out = a.value();
  out.rowwise() += row.value().row(0);
  return make_node(std::move(out), {a, row}, [a, row](Node& self) {
    if (a.requires_grad()) a.node()->grad_buffer() += self.grad;
    if (row.requires_grad()) row.node()->grad_buffer() += self.grad.colwise().sum();
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  return make_node(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Node& self) {
    if (a.requires_grad()) a.node()->grad_buffer() += self.grad.cwiseProduct(b.value());
    if (b.requires_grad()) b.node()->grad_buffer() += self.grad.cwiseProduct(a.value());
  });
}

Var scale(const Var& a, double s) {
  return make_node(a.value() * s, {a}, [a, s](Node& self) { a.node()->grad_buffer() += self.grad * s; });
}

Var gelu(const Var& a) {
  Mat t;
  Mat out = gelu_values(a.value(), &t);
  return make_node(std::move(out), {a}, [a, t = std::move(t)](Node& self) {
    const auto x = a.value().array();
    const auto dinner = kGeluC * (1.0 + 3.0 * 0.044715 * x.square());
    const Mat d = 0.5 * (1.0 + t.array()) + 0.5 * x * (1.0 - t.array().square()) * dinner;
    a.node()->grad_buffer().array() += self.grad.array() * d.array();
  });
}

Var softmax_rows(const Var& a) {
  Mat out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return make_node(out, {a}, [a](Node& self) {
    const Mat& y = self.value;
    Mat g = self.grad.cwiseProduct(y);
    for (Eigen::Index r = 0; r < y.rows(); ++r) g.row(r) -= y.row(r) * g.row(r).sum();
    a.node()->grad_buffer() += g;
  });
}

Var rms_norm(const Var& a, const Var& gain, double eps) {
  if (gain.rows() != 1 || gain.cols() != a.cols()) throw ShapeMismatch("rms_norm: gain shape");
  const Mat& x = a.value();
  const auto n = static_cast<double>(x.cols());
  Vec inv(x.rows());
  Mat normed(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    inv[r] = 1.0 / std::sqrt(x.row(r).squaredNorm() / n + eps);
    normed.row(r) = x.row(r) * inv[r];
  }
  Mat out = normed;
  for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) = out.row(r).cwiseProduct(gain.value().row(0));
  return make_node(std::move(out), {a, gain}, [a, gain, normed, inv, n](Node& self) {
    if (gain.requires_grad()) gain.node()->grad_buffer() += self.grad.cwiseProduct(normed).colwise().sum();
    if (!a.requires_grad()) return;
    Mat& ga = a.node()->grad_buffer();
    for (Eigen::Index r = 0; r < normed.rows(); ++r) {
      const RowVec gy = self.grad.row(r).cwiseProduct(gain.value().row(0));
      const double dot = gy.dot(normed.row(r));
      ga.row(r) += inv[r] * (gy - normed.row(r) * (dot / n));
    }
  });
}

Var gather_rows(const Var& table, std::span<const int> rows) {
  Mat out(static_cast<Eigen::Index>(rows.size()), table.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= table.rows()) throw ShapeMismatch("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return make_node(std::move(out), {table}, [table, idx](Node& self) {
    Mat& g = table.node()->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Eigen::Index>(i));
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows: no inputs");
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts.front().cols()) throw ShapeMismatch("concat_rows: column counts differ");
    total += p.rows();
  }
  Mat out(total, parts.front().cols());
  Eigen::Index at = 0;
  for (const auto& p : parts) out.middleRows(at, p.rows()) = p.value(), at += p.rows();
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_node(std::move(out), inputs, [inputs](Node& self) {
    Eigen::Index at = 0;
    for (const auto& p : inputs) {
      if (p.requires_grad()) p.node()->grad_buffer() += self.grad.middleRows(at, p.rows());
      at += p.rows();
    }
  });
}

Var sum(const Var& a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return make_node(std::move(out), {a}, [a](Node& self) { a.node()->grad_buffer().array() += self.grad(0, 0); });
}

Var attention(const Var& qkv, int heads, int prefix_len) {
  const Eigen::Index t = qkv.rows();
  if (qkv.cols() % (3 * heads) != 0) throw ShapeMismatch("attention: width not divisible by 3 * heads");
  const Eigen::Index d = qkv.cols() / 3;
  const Eigen::Index hd = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const Mat& x = qkv.value();

  auto probs = std::make_shared<std::vector<Mat>>(static_cast<std::size_t>(heads));
  Mat out(t, d);
  for (int h = 0; h < heads; ++h) {
    const auto q = x.middleCols(h * hd, hd);
    const auto k = x.middleCols(d + h * hd, hd);
    const auto v = x.middleCols(2 * d + h * hd, hd);
    Mat s = (q * k.transpose()) * inv_sqrt;
    for (Eigen::Index r = 0; r < t; ++r) {
      attention_mask_row(static_cast<int>(r), prefix_len, static_cast<int>(t), s.row(r));
      const double m = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - m).exp();
      s.row(r) /= s.row(r).sum();
    }
    out.middleCols(h * hd, hd).noalias() = s * v;
    (*probs)[static_cast<std::size_t>(h)] = std::move(s);
  }
  return make_node(std::move(out), {qkv}, [qkv, probs, heads, d, hd, inv_sqrt](Node& self) {
    const Mat& x = qkv.value();
    Mat& gx = qkv.node()->grad_buffer();
    for (int h = 0; h < heads; ++h) {
      const Mat& a = (*probs)[static_cast<std::size_t>(h)];
      const auto q = x.middleCols(h * hd, hd);
      const auto k = x.middleCols(d + h * hd, hd);
      const auto v = x.middleCols(2 * d + h * hd, hd);
      const auto go = self.grad.middleCols(h * hd, hd);
      const Mat da = go * v.transpose();
      gx.middleCols(2 * d + h * hd, hd).noalias() += a.transpose() * go;
      Mat ds = a.cwiseProduct(da);
      for (Eigen::Index r = 0; r < ds.rows(); ++r) ds.row(r) -= a.row(r) * ds.row(r).sum();
      ds *= inv_sqrt;
      gx.middleCols(h * hd, hd).noalias() += ds * k;
      gx.middleCols(d + h * hd, hd).noalias() += ds.transpose() * q;
    }
  });
}

Var cross_entropy(const Var& logits, std::span<const int> targets, std::span<const double> weights) {
  const Eigen::Index t = logits.rows();
  if (static_cast<Eigen::Index>(targets.size()) != t || static_cast<Eigen::Index>(weights.size()) != t)
    throw ShapeMismatch("cross_entropy: target length differs from logits");
  const Mat& z = logits.value();
  double total_weight = 0.0;
  for (double w : weights) total_weight += w;
  Mat probs = Mat::Zero(t, z.cols());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < t; ++r) {
    const double w = weights[static_cast<std::size_t>(r)];
    if (w == 0.0) continue;
    const int target = targets[static_cast<std::size_t>(r)];
    if (target < 0 || target >= z.cols()) throw ShapeMismatch("cross_entropy: target out of range");
    const double m = z.row(r).maxCoeff();
    probs.row(r) = (z.row(r).array() - m).exp();
    const double norm = probs.row(r).sum();
    probs.row(r) /= norm;
    loss += w * (std::log(norm) + m - z(r, target));
  }
  Mat out(1, 1);
  out(0, 0) = total_weight > 0.0 ? loss / total_weight : 0.0;
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<double> wts(weights.begin(), weights.end());
  return make_node(std::move(out), {logits}, [logits, probs, tgt, wts, total_weight](Node& self) {
    if (total_weight <= 0.0) return;
    Mat& g = logits.node()->grad_buffer();
    const double scale = self.grad(0, 0) / total_weight;
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
      const double w = wts[static_cast<std::size_t>(r)];
      if (w == 0.0) continue;
      g.row(r) += (scale * w) * probs.row(r);
      g(r, tgt[static_cast<std::size_t>(r)]) -= scale * w;
    }
  });
}

Var external_loss(const Var& input, double value, Mat grad) {
  require_same_shape(input.value(), grad, "external_loss");
  Mat out(1, 1);
  out(0, 0) = value;
  return make_node(std::move(out), {input}, [input, grad = std::move(grad)](Node& self) {
    input.node()->grad_buffer() += self.grad(0, 0) * grad;
  });
}

}  // namespace percept::ag
