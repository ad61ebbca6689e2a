#pragma once

#include "branchnet/model_tree.hpp"

#include <optional>
#include <vector>

namespace branchnet {

struct SompResult {
  std::vector<int> selected;           // selection order
  std::vector<Real> residual_history;  // Frobenius residual after each pick
};

// Greedy simultaneous orthogonal matching pursuit over the rows of w: at each
// step the unselected row u maximizing |R u^T|_2 / |u|_2 joins the basis
// (ties to the lowest index, zero-norm rows skipped), then the residual is
// re-projected against the full selected set via least_squares_fit.
SompResult somp_select(const Eigen::Ref<const Mat>& w, int d_prime);

// Parameters of one parameterized unit level (linear op plus optional norm).
struct UnitParams {
  LayerParams linear;
  std::optional<LayerParams> norm;
};

// Ordered parameters of an unbranched model: hidden units bottom-up, then one
// head per task.
struct WideStack {
  std::vector<UnitParams> hidden;
  std::vector<LayerParams> heads;
};

WideStack collect_stack(const ModelTree& unbranched);

// Layer-by-layer thin-model initialization from a wider model's parameters:
// select rows by SOMP with d' = thin width, copy the selected rows (biases and
// batch-norm state follow their row), then column-truncate the next wide
// layer to the selected inputs before descending into it. Heads are
// column-truncated only.
void somp_init_model(ModelTree& thin, const WideStack& wide);

void somp_init_from_wide(ModelTree& thin, const ModelTree& wide);

}  // namespace branchnet
