#include "percept/projection.hpp"

#include <cmath>

#include "percept/error.hpp"
#include "percept/rng.hpp"

namespace percept {
namespace {

Mat gaussian(Rng& rng, int rows, int cols, double stddev) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

}  // namespace

ProjectionHead::ProjectionHead(ExpertKind expert, const HeadDims& dims) : expert_(expert), dims_(dims) {
  if (dims.hidden <= 0 || dims.grid_size <= 0 || dims.patch_grid <= 0 || dims.patch_dim <= 0 || dims.slots <= 0)
    throw ShapeMismatch("projection head dimensions must be positive");
  const int dm = dims.projected();
  w_in = ag::parameter(Mat::Zero(dims.hidden, dm));
  b_in = ag::parameter(Mat::Zero(1, dm));
  queries = ag::parameter(Mat::Zero(query_count(), dm));
  w_out = ag::parameter(Mat::Zero(dm, output_cols()));
  b_out = ag::parameter(Mat::Zero(1, output_cols()));
}

int ProjectionHead::query_count() const {
  switch (expert_) {
    case ExpertKind::seg:
      return dims_.slots;
    case ExpertKind::depth:
    case ExpertKind::edge:
      return 1;
    case ExpertKind::patch:
      return dims_.patch_grid * dims_.patch_grid;
  }
  return 1;
}

int ProjectionHead::output_cols() const {
  return expert_ == ExpertKind::patch ? dims_.patch_dim : dims_.grid_size * dims_.grid_size;
}

ProjectionHead init_head(ExpertKind expert, const HeadDims& dims, std::uint64_t seed) {
  ProjectionHead head(expert, dims);
  Rng rng(derive_seed(seed, 0x4ead, static_cast<std::uint64_t>(index_of(expert))));
  const int dm = dims.projected();
  head.w_in.mutable_value() = gaussian(rng, dims.hidden, dm, 1.0 / std::sqrt(static_cast<double>(dims.hidden)));
  head.queries.mutable_value() = gaussian(rng, head.query_count(), dm, 1.0 / std::sqrt(static_cast<double>(dm)));
  head.w_out.mutable_value() = gaussian(rng, dm, head.output_cols(), 1.0 / std::sqrt(static_cast<double>(dm)));
  return head;
}

ag::Var project(const ProjectionHead& head, const ag::Var& block) {
  if (block.cols() != head.dims().hidden) throw ShapeMismatch("hidden block width differs from head input");
  if (block.rows() != head.dims().slots) throw ShapeMismatch("hidden block must hold exactly N slot states");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head.dims().projected()));
  const ag::Var projected = ag::add_row(ag::matmul(block, head.w_in), head.b_in);
  const ag::Var scores = ag::scale(ag::matmul(head.queries, ag::transpose(projected)), inv_sqrt);
  const ag::Var attended = ag::matmul(ag::softmax_rows(scores), projected);
  return ag::add_row(ag::matmul(attended, head.w_out), head.b_out);
}

Mat project(const ProjectionHead& head, const Mat& block) {
  if (!block.allFinite()) throw ShapeMismatch("hidden block has non-finite entries");
  return project(head, ag::constant(block)).value();
}

}  // namespace percept
