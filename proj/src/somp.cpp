#include "branchnet/somp.hpp"

#include "branchnet/linalg.hpp"

#include <algorithm>

namespace branchnet {

SompResult somp_select(const Eigen::Ref<const Mat>& w, int d_prime) {
  const int rows = static_cast<int>(w.rows());
  require(d_prime >= 1 && d_prime <= rows,
          "somp_select: d' must lie in [1, rows]");

  Vec norms(rows);
  for (int r = 0; r < rows; ++r) norms(r) = w.row(r).norm();
  require(norms.maxCoeff() > 0.0, "somp_select: degenerate weight matrix (all rows zero)");

  SompResult res;
  std::vector<bool> picked(rows, false);
  Mat residual = w;
  Mat basis(0, w.cols());

  for (int step = 0; step < d_prime; ++step) {
    int best = -1;
    Real best_score = -1.0;
    for (int u = 0; u < rows; ++u) {
      if (picked[u] || norms(u) == 0.0) continue;
      const Real score = (residual * w.row(u).transpose()).norm() / norms(u);
      if (score > best_score) {
        best_score = score;
        best = u;
      }
    }
    if (best < 0) {
      // Only zero-norm rows remain; they add nothing to the span, so take the
      // lowest unselected index to keep the count at d'.
      for (int u = 0; u < rows; ++u)
        if (!picked[u]) {
          best = u;
          break;
        }
    }
    picked[best] = true;
    res.selected.push_back(best);

    basis.conservativeResize(basis.rows() + 1, Eigen::NoChange);
    basis.row(basis.rows() - 1) = w.row(best);
    auto fit = least_squares_fit(w, basis);
    residual = w - fit.coefficients * basis;
    res.residual_history.push_back(fit.residual_frobenius);
  }
  return res;
}

WideStack collect_stack(const ModelTree& model) {
  WideStack stack;
  const int hl = model.head_level();
  for (int li = 0; li < hl; ++li) {
    require(model.levels[li].blocks.size() == 1,
            "collect_stack: model must be unbranched");
    const Block& blk = model.levels[li].blocks.front();
    if (!blk.parameterized()) continue;
    UnitParams unit;
    bool have_linear = false;
    for (const auto& st : blk.stages) {
      if (st.spec.kind == LayerKind::Dense || st.spec.kind == LayerKind::Conv2d) {
        unit.linear = st.params;
        have_linear = true;
      } else if (st.spec.kind == LayerKind::BatchNorm) {
        unit.norm = st.params;
      }
    }
    require(have_linear, "collect_stack: parameterized level without linear op");
    stack.hidden.push_back(std::move(unit));
  }
  for (const auto& head : model.levels[hl].blocks) {
    require(head.stages.size() == 1 &&
                head.stages[0].spec.kind == LayerKind::SigmoidHead,
            "collect_stack: malformed head block");
    stack.heads.push_back(head.stages[0].params);
  }
  return stack;
}

namespace {

// Keep, for every selected input index, its group of consecutive columns
// (group_size = 9 for conv inputs, H*W for a dense layer fed by feature maps,
// 1 for dense-to-dense).
Mat keep_column_groups(const Mat& w, const std::vector<int>& kept,
                       int group_size) {
  Mat out(w.rows(), static_cast<long>(kept.size()) * group_size);
  for (size_t k = 0; k < kept.size(); ++k)
    out.middleCols(static_cast<long>(k) * group_size, group_size) =
        w.middleCols(static_cast<long>(kept[k]) * group_size, group_size);
  return out;
}

std::vector<int> sorted_selection(const Mat& w, int d_prime) {
  if (d_prime == static_cast<int>(w.rows())) {
    // Full width: order-preserving identity, no pursuit needed.
    std::vector<int> all(w.rows());
    for (int i = 0; i < d_prime; ++i) all[i] = i;
    return all;
  }
  auto sel = somp_select(w, d_prime).selected;
  std::sort(sel.begin(), sel.end());
  return sel;
}

Vec take_rows(const Vec& v, const std::vector<int>& idx) {
  Vec out(static_cast<long>(idx.size()));
  for (size_t i = 0; i < idx.size(); ++i) out(static_cast<long>(i)) = v(idx[i]);
  return out;
}

}  // namespace

void somp_init_model(ModelTree& thin, const WideStack& wide) {
  const int hl = thin.head_level();
  // Walk the thin hidden levels and pair them with the wide stack.
  std::vector<int> param_levels;
  for (int li = 0; li < hl; ++li) {
    require(thin.levels[li].blocks.size() == 1,
            "somp_init_model: thin model must be unbranched");
    if (thin.levels[li].blocks.front().parameterized()) param_levels.push_back(li);
  }
  require(param_levels.size() == wide.hidden.size(),
          "somp_init_model: wide stack has " +
              std::to_string(wide.hidden.size()) + " hidden units, thin model has " +
              std::to_string(param_levels.size()));
  require(static_cast<int>(wide.heads.size()) == thin.task_count,
          "somp_init_model: head count mismatch");

  // kept[i] = wide-side input index retained for thin input i; starts as the
  // identity over the raw input.
  std::vector<int> kept;
  TensorShape shape = thin.input_shape;  // shape of the thin activations below
  bool below_is_spatial = shape.height > 1 || shape.width > 1;
  kept.resize(below_is_spatial ? shape.channels : shape.features());
  for (size_t i = 0; i < kept.size(); ++i) kept[i] = static_cast<int>(i);

  for (size_t u = 0; u < param_levels.size(); ++u) {
    Block& blk = thin.levels[param_levels[u]].blocks.front();
    const UnitParams& wunit = wide.hidden[u];

    Stage* linear = nullptr;
    Stage* norm = nullptr;
    for (auto& st : blk.stages) {
      if (st.spec.kind == LayerKind::Dense || st.spec.kind == LayerKind::Conv2d)
        linear = &st;
      else if (st.spec.kind == LayerKind::BatchNorm)
        norm = &st;
    }
    require(linear, "somp_init_model: parameterized level without linear op");

    // Track the spatial shape right below this unit to map kept channels onto
    // weight columns across the flatten boundary.
    for (int li = (u == 0 ? 0 : param_levels[u - 1] + 1); li < param_levels[u];
         ++li) {
      for (const auto& st : thin.levels[li].blocks.front().stages)
        shape = output_shape(st.spec, shape);
    }

    const bool is_conv = linear->spec.kind == LayerKind::Conv2d;
    int group_size = 1;
    if (is_conv) {
      group_size = 9;
    } else if (below_is_spatial) {
      group_size = shape.height * shape.width;  // dense fed by feature maps
    }

    Mat truncated = keep_column_groups(wunit.linear.weight, kept, group_size);
    const int d_prime = static_cast<int>(linear->params.weight.rows());
    require(d_prime <= truncated.rows(),
            "somp_init_model: thin level wider than the wide model");
    require(truncated.cols() == linear->params.weight.cols(),
            "somp_init_model: wide unit " + std::to_string(u) +
                " input width does not line up with the thin model");

    const std::vector<int> omega = sorted_selection(truncated, d_prime);
    for (int r = 0; r < d_prime; ++r)
      linear->params.weight.row(r) = truncated.row(omega[r]);
    linear->params.bias = take_rows(wunit.linear.bias, omega);
    if (norm) {
      require(wunit.norm.has_value(),
              "somp_init_model: thin unit has batch norm, wide unit does not");
      norm->params.gamma = take_rows(wunit.norm->gamma, omega);
      norm->params.beta = take_rows(wunit.norm->beta, omega);
      norm->params.running_mean = take_rows(wunit.norm->running_mean, omega);
      norm->params.running_var = take_rows(wunit.norm->running_var, omega);
    }

    kept = omega;
    below_is_spatial = is_conv;
    for (const auto& st : blk.stages) shape = output_shape(st.spec, shape);
  }

  // Levels between the top hidden unit and the heads (none in the standard
  // template, but keep the shape walk honest).
  for (int li = param_levels.back() + 1; li < hl; ++li)
    for (const auto& st : thin.levels[li].blocks.front().stages)
      shape = output_shape(st.spec, shape);

  // Heads: column truncation only.
  for (auto& head : thin.levels[hl].blocks) {
    const auto& tasks = thin.leaf_tasks.at(head.id);
    auto& hp = head.stages[0].params;
    for (size_t j = 0; j < tasks.size(); ++j) {
      const LayerParams& wh = wide.heads[tasks[j]];
      Mat trunc = keep_column_groups(wh.weight, kept, 1);
      require(trunc.cols() == hp.weight.cols(),
              "somp_init_model: head width mismatch");
      hp.weight.row(static_cast<long>(j)) = trunc.row(0);
      hp.bias(static_cast<long>(j)) = wh.bias(0);
    }
  }
}

void somp_init_from_wide(ModelTree& thin, const ModelTree& wide) {
  require(thin.task_count == wide.task_count,
          "somp_init_from_wide: task counts differ");
  require(thin.input_shape == wide.input_shape,
          "somp_init_from_wide: input shapes differ");
  somp_init_model(thin, collect_stack(wide));
}

}  // namespace branchnet
