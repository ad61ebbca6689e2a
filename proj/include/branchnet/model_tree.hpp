#pragma once

#include "branchnet/layers.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace branchnet {

// Surjective assignment of c existing branches onto d new branches.
struct GroupingFunction {
  std::vector<int> assignment;  // assignment[upper branch] = new branch index

  int branch_count() const { return static_cast<int>(assignment.size()); }
  // Number of new branches; throws unless the assignment covers 0..d-1.
  int group_count() const;
  std::vector<std::vector<int>> groups() const;  // members per new branch

  static GroupingFunction identity(int c);
  static GroupingFunction single(int c);
};

struct Stage {
  LayerSpec spec;
  LayerParams params;
};

// One network unit: a linear op optionally fused with batch norm and an
// activation (e.g. conv+bn+relu), or a lone pooling stage, or a task head.
struct Block {
  int id = -1;
  int parent = -1;  // block id one level below; -1 reads the network input
  std::vector<Stage> stages;

  bool parameterized() const;
  long param_count() const;
};

struct Level {
  std::vector<Block> blocks;
};

struct ModelTree {
  TensorShape input_shape;
  int task_count = 0;
  std::vector<Level> levels;  // ordered input -> output; last level is heads
  // Output-level block id -> sorted task ids; values partition 0..T-1.
  std::map<int, std::vector<int>> leaf_tasks;
  int active_layer = -1;  // level currently eligible for widening
  int next_block_id = 0;
  std::vector<std::string> task_names;  // defaults to task0..task{T-1}
  std::string config_echo = "{}";       // JSON object echoed into the manifest

  int head_level() const { return static_cast<int>(levels.size()) - 1; }
  const Block* find_block(int id) const;
  Block* find_block(int id);
  int level_of_block(int id) const;
  long param_count() const;
  std::vector<int> parameterized_levels() const;  // ascending, includes heads
  int first_parameterized_level() const;

  // The junction above the active layer: the lowest level above it holding
  // more than one block (the head level when none does).
  int junction_level() const;
  // Branch roots at the junction, in block order.
  std::vector<int> branch_block_ids() const;
  // Tasks served by each branch root, sorted, in block order.
  std::vector<std::vector<int>> branch_tasks() const;
  // Pooling levels strictly above the given level.
  int pools_above(int level) const;

  void check_invariants() const;
};

// Builds the unbranched thin model: conv widths min(omega, template width),
// dense widths min(2*omega, template width), batch norm + relu after every
// conv/dense, one single-unit sigmoid head per task. The template lists only
// Conv2d / MaxPool2x2 / Dense skeleton specs (widths act as caps) and ends
// before the heads.
ModelTree build_thin(const std::vector<LayerSpec>& template_specs, int omega,
                     int task_count, const TensorShape& input_shape);

// Standard desk-scale template for the given input kind.
std::vector<LayerSpec> desk_template(const TensorShape& input_shape);

void random_init(ModelTree& tree, std::uint64_t seed);

// Clones the single block at the active layer into d copies (direct copy,
// batch-norm state included), re-parents the c upper branches per the
// grouping, and moves the active layer one parameterized level down.
void widen_at(ModelTree& tree, const GroupingFunction& grouping);

struct TreeCaches {
  Mode mode = Mode::Train;
  bool consumed = false;
  std::map<int, std::vector<LayerCache>> stage_caches;
  std::map<int, Tensor> block_outputs;
  int batch = 0;
};

// Forward pass over the tree; shared blocks are evaluated once and their
// activations routed to every consumer. Returns N x T scores with columns
// ordered by task id.
Mat tree_forward(ModelTree& tree, const Tensor& input, Mode mode,
                 TreeCaches* caches = nullptr);

struct BlockGrads {
  std::vector<LayerGrads> stages;
};
using TreeGrads = std::map<int, BlockGrads>;

// Reverse pass; gradients flowing into a shared block are summed over the
// branches that consume its output.
TreeGrads tree_backward(ModelTree& tree, TreeCaches& caches,
                        const Mat& grad_scores);

void apply_sgd(ModelTree& tree, const TreeGrads& grads, Real lr, Real momentum);

struct ModelFiles {
  std::string manifest;            // structured JSON document
  std::vector<std::uint8_t> blob;  // little-endian f64 in manifest order
};

// The manifest embeds topology, specs, task assignment, active layer, task
// names, and the tree's config echo; the blob holds the weights in
// manifest-declared order. Export/import round trips are bit-exact.
ModelFiles export_model(const ModelTree& tree);

ModelTree import_model(const std::string& manifest,
                       const std::vector<std::uint8_t>& blob);

// Writes <prefix>.json and <prefix>.blob.
void save_model(const ModelTree& tree, const std::string& prefix);
ModelTree load_model(const std::string& prefix);

// Graphviz rendering with task names on the leaves.
std::string export_dot(const ModelTree& tree);

}  // namespace branchnet
