#pragma once

// Per-expert projection heads. A linear map lifts the N observation-slot
// hidden states into the expert space; learned queries cross-attend over the
// projected slots (keys = values = projected slots); a final linear layer
// expands each attended vector to the expert's output shape.

#include <cstdint>
#include <vector>

#include "percept/autograd.hpp"
#include "percept/kinds.hpp"

namespace percept {

struct HeadDims {
  int hidden = 128;    // d, backbone width
  int grid_size = 32;  // dense maps are grid_size^2
  int patch_grid = 4;  // P
  int patch_dim = 16;  // d_patch
  int slots = 4;       // N
  int proj_dim = 0;    // d_m; 0 means "same as hidden"

  int projected() const { return proj_dim > 0 ? proj_dim : hidden; }
  bool operator==(const HeadDims&) const = default;
};

class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(ExpertKind expert, const HeadDims& dims);

  ExpertKind expert() const { return expert_; }
  const HeadDims& dims() const { return dims_; }

  // seg: N masks; depth/edge: one map; patch: P^2 vectors.
  int query_count() const;
  int output_rows() const { return query_count(); }
  int output_cols() const;

  std::vector<ag::Var> parameters() const { return {w_in, b_in, queries, w_out, b_out}; }

  ag::Var w_in;     // d x d_m
  ag::Var b_in;     // 1 x d_m
  ag::Var queries;  // q x d_m
  ag::Var w_out;    // d_m x output_cols
  ag::Var b_out;    // 1 x output_cols

 private:
  ExpertKind expert_ = ExpertKind::seg;
  HeadDims dims_;
};

ProjectionHead init_head(ExpertKind expert, const HeadDims& dims, std::uint64_t seed);

// block: N x d hidden states taken at the observation slots.
ag::Var project(const ProjectionHead& head, const ag::Var& block);
Mat project(const ProjectionHead& head, const Mat& block);

}  // namespace percept
