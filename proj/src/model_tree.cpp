#include "branchnet/model_tree.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace branchnet {

using nlohmann::json;

int GroupingFunction::group_count() const {
  require(!assignment.empty(), "grouping: empty assignment");
  int d = 0;
  for (int a : assignment) {
    require(a >= 0, "grouping: negative branch index");
    d = std::max(d, a + 1);
  }
  std::vector<bool> hit(d, false);
  for (int a : assignment) hit[a] = true;
  for (int g = 0; g < d; ++g)
    require(hit[g], "grouping: not surjective, new branch " + std::to_string(g) +
                        " has no members");
  return d;
}

std::vector<std::vector<int>> GroupingFunction::groups() const {
  std::vector<std::vector<int>> out(group_count());
  for (int i = 0; i < branch_count(); ++i) out[assignment[i]].push_back(i);
  return out;
}

GroupingFunction GroupingFunction::identity(int c) {
  GroupingFunction g;
  g.assignment.resize(c);
  for (int i = 0; i < c; ++i) g.assignment[i] = i;
  return g;
}

GroupingFunction GroupingFunction::single(int c) {
  GroupingFunction g;
  g.assignment.assign(c, 0);
  return g;
}

bool Block::parameterized() const {
  for (const auto& st : stages)
    if (st.spec.has_params()) return true;
  return false;
}

long Block::param_count() const {
  long total = 0;
  for (const auto& st : stages) total += st.params.param_count();
  return total;
}

const Block* ModelTree::find_block(int id) const {
  for (const auto& lvl : levels)
    for (const auto& b : lvl.blocks)
      if (b.id == id) return &b;
  return nullptr;
}

Block* ModelTree::find_block(int id) {
  return const_cast<Block*>(static_cast<const ModelTree*>(this)->find_block(id));
}

int ModelTree::level_of_block(int id) const {
  for (size_t li = 0; li < levels.size(); ++li)
    for (const auto& b : levels[li].blocks)
      if (b.id == id) return static_cast<int>(li);
  return -1;
}

long ModelTree::param_count() const {
  long total = 0;
  for (const auto& lvl : levels)
    for (const auto& b : lvl.blocks) total += b.param_count();
  return total;
}

std::vector<int> ModelTree::parameterized_levels() const {
  std::vector<int> out;
  for (size_t li = 0; li < levels.size(); ++li)
    if (!levels[li].blocks.empty() && levels[li].blocks.front().parameterized())
      out.push_back(static_cast<int>(li));
  return out;
}

int ModelTree::first_parameterized_level() const {
  auto p = parameterized_levels();
  require(!p.empty(), "model has no parameterized levels");
  return p.front();
}

int ModelTree::junction_level() const {
  for (int li = active_layer + 1; li < static_cast<int>(levels.size()); ++li)
    if (levels[li].blocks.size() > 1) return li;
  return head_level();
}

std::vector<int> ModelTree::branch_block_ids() const {
  std::vector<int> ids;
  for (const auto& b : levels[junction_level()].blocks) ids.push_back(b.id);
  return ids;
}

std::vector<std::vector<int>> ModelTree::branch_tasks() const {
  const int jl = junction_level();
  const int hl = head_level();
  std::vector<std::vector<int>> out;
  for (const auto& root : levels[jl].blocks) {
    // Tasks of every head whose ancestry passes through this root.
    std::vector<int> tasks;
    for (const auto& head : levels[hl].blocks) {
      int cur = head.id;
      int lvl = hl;
      while (lvl > jl) {
        const Block* blk = find_block(cur);
        cur = blk->parent;
        --lvl;
      }
      if (cur == root.id) {
        const auto& t = leaf_tasks.at(head.id);
        tasks.insert(tasks.end(), t.begin(), t.end());
      }
    }
    std::sort(tasks.begin(), tasks.end());
    out.push_back(std::move(tasks));
  }
  return out;
}

int ModelTree::pools_above(int level) const {
  int count = 0;
  for (int li = level + 1; li < static_cast<int>(levels.size()); ++li) {
    const auto& blocks = levels[li].blocks;
    if (!blocks.empty() && blocks.front().stages.size() == 1 &&
        blocks.front().stages[0].spec.kind == LayerKind::MaxPool2x2)
      ++count;
  }
  return count;
}

void ModelTree::check_invariants() const {
  require(!levels.empty(), "tree: no levels");
  // Parents live exactly one level below and never cross.
  for (size_t li = 0; li < levels.size(); ++li) {
    for (const auto& b : levels[li].blocks) {
      if (li == 0) {
        require(b.parent == -1, "tree: level-0 block with a parent");
      } else {
        bool found = false;
        for (const auto& p : levels[li - 1].blocks)
          if (p.id == b.parent) found = true;
        require(found, "tree: block " + std::to_string(b.id) +
                           " parent not found one level below");
      }
    }
  }
  // Identical stage shapes within a level.
  for (const auto& lvl : levels) {
    for (const auto& b : lvl.blocks) {
      require(b.stages.size() == lvl.blocks.front().stages.size(),
              "tree: stage count differs within a level");
      for (size_t si = 0; si < b.stages.size(); ++si)
        require(b.stages[si].spec == lvl.blocks.front().stages[si].spec,
                "tree: stage spec differs within a level");
    }
  }
  // No junctions below the active layer.
  for (int li = 0; li <= active_layer && li < static_cast<int>(levels.size());
       ++li)
    require(levels[li].blocks.size() == 1,
            "tree: branched level at or below the active layer");
  // leaf_tasks values partition 0..T-1 over the head blocks.
  std::set<int> seen;
  for (const auto& head : levels.back().blocks) {
    auto it = leaf_tasks.find(head.id);
    require(it != leaf_tasks.end(), "tree: head block without tasks");
    for (int t : it->second) {
      require(t >= 0 && t < task_count, "tree: task id out of range");
      require(seen.insert(t).second, "tree: task assigned to two heads");
    }
  }
  require(static_cast<int>(seen.size()) == task_count,
          "tree: leaf tasks do not cover every task");
}

ModelTree build_thin(const std::vector<LayerSpec>& template_specs, int omega,
                     int task_count, const TensorShape& input_shape) {
  require(task_count >= 1, "build_thin: task_count must be at least 1");
  require(omega >= 1, "build_thin: omega must be at least 1");
  require(!template_specs.empty(), "build_thin: empty template");
  require(input_shape.features() >= 1, "build_thin: empty input shape");

  ModelTree tree;
  tree.input_shape = input_shape;
  tree.task_count = task_count;

  TensorShape shape = input_shape;
  int parent = -1;
  int last_param_level = -1;
  for (const auto& spec : template_specs) {
    Level lvl;
    Block blk;
    blk.id = tree.next_block_id++;
    blk.parent = parent;
    switch (spec.kind) {
      case LayerKind::Conv2d: {
        require(shape.height >= 1 && shape.width >= 1,
                "build_thin: conv after flattening");
        const int out = std::min(omega, spec.out_channels);
        blk.stages.push_back({LayerSpec::conv2d(shape.channels, out), {}});
        blk.stages.push_back({LayerSpec::batch_norm(out), {}});
        blk.stages.push_back({LayerSpec::relu(), {}});
        shape = {out, shape.height, shape.width};
        break;
      }
      case LayerKind::Dense: {
        const int out = std::min(2 * omega, spec.out_width);
        blk.stages.push_back({LayerSpec::dense(shape.features(), out), {}});
        blk.stages.push_back({LayerSpec::batch_norm(out), {}});
        blk.stages.push_back({LayerSpec::relu(), {}});
        shape = {out, 1, 1};
        break;
      }
      case LayerKind::MaxPool2x2: {
        require(shape.height % 2 == 0 && shape.width % 2 == 0,
                "build_thin: pooling needs even spatial dimensions");
        blk.stages.push_back({LayerSpec::max_pool(), {}});
        shape = {shape.channels, shape.height / 2, shape.width / 2};
        break;
      }
      default:
        throw ContractViolation(
            "build_thin: template may only contain conv2d, dense, and "
            "max_pool entries");
    }
    for (auto& st : blk.stages) st.params = init_params(st.spec);
    parent = blk.id;
    if (blk.parameterized())
      last_param_level = static_cast<int>(tree.levels.size());
    lvl.blocks.push_back(std::move(blk));
    tree.levels.push_back(std::move(lvl));
  }
  require(last_param_level >= 0,
          "build_thin: template has no parameterized level");

  // Output level: one single-unit sigmoid head per task, forming the initial
  // junction with T branches.
  Level heads;
  for (int t = 0; t < task_count; ++t) {
    Block blk;
    blk.id = tree.next_block_id++;
    blk.parent = parent;
    blk.stages.push_back({LayerSpec::sigmoid_head(shape.features(), 1), {}});
    blk.stages[0].params = init_params(blk.stages[0].spec);
    tree.leaf_tasks[blk.id] = {t};
    heads.blocks.push_back(std::move(blk));
  }
  tree.levels.push_back(std::move(heads));

  tree.active_layer = last_param_level;
  for (int t = 0; t < task_count; ++t)
    tree.task_names.push_back("task" + std::to_string(t));
  tree.check_invariants();
  return tree;
}

std::vector<LayerSpec> desk_template(const TensorShape& input_shape) {
  const bool spatial = input_shape.height > 1 || input_shape.width > 1;
  if (spatial) {
    return {LayerSpec::conv2d(1, 512),  LayerSpec::max_pool(),
            LayerSpec::conv2d(1, 512),  LayerSpec::max_pool(),
            LayerSpec::dense(1, 4096),  LayerSpec::dense(1, 4096)};
  }
  return {LayerSpec::dense(1, 4096), LayerSpec::dense(1, 4096),
          LayerSpec::dense(1, 4096)};
}

void random_init(ModelTree& tree, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& lvl : tree.levels)
    for (auto& blk : lvl.blocks)
      for (auto& st : blk.stages) he_init(st.spec, st.params, rng);
}

void widen_at(ModelTree& tree, const GroupingFunction& grouping) {
  require(tree.active_layer >= 1,
          "widen_at: active layer must be at least 1");
  const int l = tree.active_layer;
  require(tree.levels[l].blocks.size() == 1,
          "widen_at: active layer is already branched");

  const int jl = tree.junction_level();
  const int c = static_cast<int>(tree.levels[jl].blocks.size());
  require(grouping.branch_count() == c,
          "widen_at: grouping covers " +
              std::to_string(grouping.branch_count()) + " branches, junction has " +
              std::to_string(c));
  const int d = grouping.group_count();
  if (d == 1) throw ContractViolation("widen_at: no-op widening requested (d == 1)");
  require(d <= c, "widen_at: more groups than branches");

  // Clone the active block into d copies; the original serves branch 0.
  auto& active_blocks = tree.levels[l].blocks;
  const Block original = active_blocks[0];
  std::vector<int> clone_ids(d);
  clone_ids[0] = original.id;
  for (int q = 1; q < d; ++q) {
    Block clone = original;  // direct copy, batch-norm state included
    clone.id = tree.next_block_id++;
    clone_ids[q] = clone.id;
    active_blocks.push_back(std::move(clone));
  }

  // Replicate the parameterless chain strictly between the active layer and
  // the junction (pooling levels) once per new branch.
  std::vector<int> top_ids = clone_ids;  // chain tops per new branch
  for (int m = l + 1; m < jl; ++m) {
    auto& blocks = tree.levels[m].blocks;
    require(blocks.size() == 1 && !blocks[0].parameterized(),
            "widen_at: unexpected structure between active layer and junction");
    const Block chain = blocks[0];
    std::vector<int> next_tops(d);
    next_tops[0] = chain.id;
    blocks[0].parent = top_ids[0];
    for (int q = 1; q < d; ++q) {
      Block copy = chain;
      copy.id = tree.next_block_id++;
      copy.parent = top_ids[q];
      next_tops[q] = copy.id;
      blocks.push_back(std::move(copy));
    }
    top_ids = std::move(next_tops);
  }

  // Re-parent each upper branch onto its group's chain.
  for (int k = 0; k < c; ++k)
    tree.levels[jl].blocks[k].parent = top_ids[grouping.assignment[k]];

  // The active layer descends to the next parameterized level below.
  int next_active = -1;
  for (int li = l - 1; li >= 0; --li) {
    if (tree.levels[li].blocks.front().parameterized()) {
      next_active = li;
      break;
    }
  }
  require(next_active >= 0, "widen_at: no parameterized level below");
  tree.active_layer = next_active;
  tree.check_invariants();
}

Mat tree_forward(ModelTree& tree, const Tensor& input, Mode mode,
                 TreeCaches* caches) {
  require(input.shape == tree.input_shape,
          "tree_forward: input shape does not match the model");
  const int n = input.batch();
  if (caches) {
    *caches = TreeCaches{};
    caches->mode = mode;
    caches->batch = n;
  }

  std::map<int, Tensor> outs;
  for (auto& lvl : tree.levels) {
    for (auto& blk : lvl.blocks) {
      const Tensor* src = blk.parent < 0 ? &input : &outs.at(blk.parent);
      std::vector<LayerCache>* bc = nullptr;
      if (caches) {
        bc = &caches->stage_caches[blk.id];
        bc->resize(blk.stages.size());
      }
      Tensor cur;
      for (size_t si = 0; si < blk.stages.size(); ++si) {
        auto& st = blk.stages[si];
        LayerCache* cptr = bc ? &(*bc)[si] : nullptr;
        Tensor next = layer_forward(st.spec, st.params, *src, mode, cptr);
        cur = std::move(next);
        src = &cur;
      }
      outs.emplace(blk.id, std::move(cur));
    }
  }

  Mat scores(n, tree.task_count);
  for (const auto& head : tree.levels.back().blocks) {
    const auto& tasks = tree.leaf_tasks.at(head.id);
    const Tensor& out = outs.at(head.id);
    require(static_cast<int>(tasks.size()) == out.shape.features(),
            "tree_forward: head width does not match its task count");
    for (size_t j = 0; j < tasks.size(); ++j)
      scores.col(tasks[j]) = out.data.col(static_cast<int>(j));
  }
  if (caches) caches->block_outputs = std::move(outs);
  return scores;
}

TreeGrads tree_backward(ModelTree& tree, TreeCaches& caches,
                        const Mat& grad_scores) {
  require(!caches.consumed, "tree_backward: caches already consumed");
  require(caches.mode == Mode::Train,
          "tree_backward: caches were captured in eval mode");
  require(grad_scores.rows() == caches.batch &&
              grad_scores.cols() == tree.task_count,
          "tree_backward: grad_scores shape mismatch");
  caches.consumed = true;

  TreeGrads grads;
  std::map<int, Mat> gbuf;

  // Seed the head gradients from the score columns.
  for (const auto& head : tree.levels.back().blocks) {
    const auto& tasks = tree.leaf_tasks.at(head.id);
    Mat g(caches.batch, static_cast<int>(tasks.size()));
    for (size_t j = 0; j < tasks.size(); ++j)
      g.col(static_cast<int>(j)) = grad_scores.col(tasks[j]);
    gbuf[head.id] = std::move(g);
  }

  for (int li = static_cast<int>(tree.levels.size()) - 1; li >= 0; --li) {
    for (auto& blk : tree.levels[li].blocks) {
      auto it = gbuf.find(blk.id);
      if (it == gbuf.end()) continue;  // block feeds nothing that was scored
      auto& stage_caches = caches.stage_caches.at(blk.id);
      BlockGrads bg;
      bg.stages.resize(blk.stages.size());
      Tensor g;
      g.data = std::move(it->second);
      g.shape = stage_caches.back().out_shape;
      for (int si = static_cast<int>(blk.stages.size()) - 1; si >= 0; --si) {
        auto [gin, sg] = layer_backward(blk.stages[si].spec,
                                        blk.stages[si].params,
                                        stage_caches[si], g);
        bg.stages[si] = std::move(sg);
        g = std::move(gin);
      }
      if (blk.parent >= 0) {
        auto parent_it = gbuf.find(blk.parent);
        if (parent_it == gbuf.end())
          gbuf[blk.parent] = std::move(g.data);
        else
          parent_it->second += g.data;
      }
      grads[blk.id] = std::move(bg);
    }
  }
  return grads;
}

void apply_sgd(ModelTree& tree, const TreeGrads& grads, Real lr, Real momentum) {
  for (size_t li = 0; li < tree.levels.size(); ++li) {
    for (auto& blk : tree.levels[li].blocks) {
      auto it = grads.find(blk.id);
      if (it == grads.end()) continue;
      for (size_t si = 0; si < blk.stages.size(); ++si) {
        auto& st = blk.stages[si];
        if (!st.spec.has_params()) continue;
        sgd_step(st.params, it->second.stages[si], lr, momentum,
                 "level " + std::to_string(li) + " block " +
                     std::to_string(blk.id) + " (" + st.spec.describe() + ")");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

json spec_to_json(const LayerSpec& s) {
  json j;
  switch (s.kind) {
    case LayerKind::Dense:
      j["kind"] = "dense";
      j["in"] = s.in_width;
      j["out"] = s.out_width;
      break;
    case LayerKind::Conv2d:
      j["kind"] = "conv2d";
      j["in"] = s.in_channels;
      j["out"] = s.out_channels;
      break;
    case LayerKind::MaxPool2x2:
      j["kind"] = "max_pool";
      break;
    case LayerKind::BatchNorm:
      j["kind"] = "batch_norm";
      j["channels"] = s.channels;
      break;
    case LayerKind::ReLU:
      j["kind"] = "relu";
      break;
    case LayerKind::SigmoidHead:
      j["kind"] = "sigmoid_head";
      j["in"] = s.in_width;
      j["tasks"] = s.out_width;
      break;
  }
  return j;
}

LayerSpec spec_from_json(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "dense")
    return LayerSpec::dense(j.at("in").get<int>(), j.at("out").get<int>());
  if (kind == "conv2d")
    return LayerSpec::conv2d(j.at("in").get<int>(), j.at("out").get<int>());
  if (kind == "max_pool") return LayerSpec::max_pool();
  if (kind == "batch_norm")
    return LayerSpec::batch_norm(j.at("channels").get<int>());
  if (kind == "relu") return LayerSpec::relu();
  if (kind == "sigmoid_head")
    return LayerSpec::sigmoid_head(j.at("in").get<int>(),
                                   j.at("tasks").get<int>());
  throw CorruptionError("manifest: unknown layer kind '" + kind + "'");
}

struct TensorRef {
  const Mat* mat = nullptr;
  const Vec* vec = nullptr;
  long rows() const { return mat ? mat->rows() : (vec ? vec->size() : 0); }
  long cols() const { return mat ? mat->cols() : (vec && vec->size() ? 1 : 0); }
};

// Tensors of a stage in blob order.
std::vector<std::pair<std::string, TensorRef>> stage_tensors(const Stage& st) {
  std::vector<std::pair<std::string, TensorRef>> out;
  switch (st.spec.kind) {
    case LayerKind::Dense:
    case LayerKind::Conv2d:
    case LayerKind::SigmoidHead:
      out.push_back({"weight", {&st.params.weight, nullptr}});
      out.push_back({"bias", {nullptr, &st.params.bias}});
      break;
    case LayerKind::BatchNorm:
      out.push_back({"gamma", {nullptr, &st.params.gamma}});
      out.push_back({"beta", {nullptr, &st.params.beta}});
      out.push_back({"running_mean", {nullptr, &st.params.running_mean}});
      out.push_back({"running_var", {nullptr, &st.params.running_var}});
      break;
    default:
      break;
  }
  return out;
}

}  // namespace

ModelFiles export_model(const ModelTree& tree) {
  json root;
  root["format"] = "branchnet-model-v1";
  root["input_shape"] = {{"channels", tree.input_shape.channels},
                         {"height", tree.input_shape.height},
                         {"width", tree.input_shape.width}};
  root["task_count"] = tree.task_count;
  root["active_layer"] = tree.active_layer;
  root["task_names"] = tree.task_names.empty()
                           ? [&] {
                               std::vector<std::string> names;
                               for (int t = 0; t < tree.task_count; ++t)
                                 names.push_back("task" + std::to_string(t));
                               return names;
                             }()
                           : tree.task_names;
  root["config"] = json::parse(tree.config_echo);

  json levels = json::array();
  json entries = json::array();
  long offset = 0;
  std::vector<Real> payload;
  for (const auto& lvl : tree.levels) {
    json jblocks = json::array();
    for (const auto& blk : lvl.blocks) {
      json jb;
      jb["id"] = blk.id;
      jb["parent"] = blk.parent;
      json stages = json::array();
      for (size_t si = 0; si < blk.stages.size(); ++si) {
        stages.push_back(spec_to_json(blk.stages[si].spec));
        for (const auto& [name, ref] : stage_tensors(blk.stages[si])) {
          json e;
          e["block"] = blk.id;
          e["stage"] = static_cast<int>(si);
          e["tensor"] = name;
          e["offset"] = offset;
          e["rows"] = ref.rows();
          e["cols"] = ref.cols();
          entries.push_back(std::move(e));
          if (ref.mat) {
            for (long r = 0; r < ref.mat->rows(); ++r)
              for (long c = 0; c < ref.mat->cols(); ++c)
                payload.push_back((*ref.mat)(r, c));
          } else if (ref.vec) {
            for (long r = 0; r < ref.vec->size(); ++r)
              payload.push_back((*ref.vec)(r));
          }
          offset = static_cast<long>(payload.size());
        }
      }
      jb["stages"] = std::move(stages);
      jblocks.push_back(std::move(jb));
    }
    levels.push_back(json{{"blocks", std::move(jblocks)}});
  }
  root["levels"] = std::move(levels);

  json leaf = json::object();
  for (const auto& [id, tasks] : tree.leaf_tasks)
    leaf[std::to_string(id)] = tasks;
  root["leaf_tasks"] = std::move(leaf);

  root["blob"] = {{"dtype", "f64le"},
                  {"count", static_cast<long>(payload.size())},
                  {"entries", std::move(entries)}};

  ModelFiles files;
  files.manifest = root.dump(2);
  files.manifest.push_back('\n');
  files.blob.resize(payload.size() * sizeof(Real));
  if (!payload.empty())
    std::memcpy(files.blob.data(), payload.data(), files.blob.size());
  return files;
}

ModelTree import_model(const std::string& manifest,
                       const std::vector<std::uint8_t>& blob) {
  json root;
  try {
    root = json::parse(manifest);
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("manifest: invalid JSON: ") + e.what());
  }
  if (root.value("format", "") != "branchnet-model-v1")
    throw CorruptionError("manifest: unsupported format tag");

  ModelTree tree;
  const auto& shp = root.at("input_shape");
  tree.input_shape = {shp.at("channels").get<int>(), shp.at("height").get<int>(),
                      shp.at("width").get<int>()};
  tree.task_count = root.at("task_count").get<int>();
  tree.active_layer = root.at("active_layer").get<int>();
  tree.task_names = root.at("task_names").get<std::vector<std::string>>();
  tree.config_echo = root.at("config").dump();

  int max_id = -1;
  for (const auto& jl : root.at("levels")) {
    Level lvl;
    for (const auto& jb : jl.at("blocks")) {
      Block blk;
      blk.id = jb.at("id").get<int>();
      blk.parent = jb.at("parent").get<int>();
      max_id = std::max(max_id, blk.id);
      for (const auto& js : jb.at("stages")) {
        Stage st;
        st.spec = spec_from_json(js);
        st.params = init_params(st.spec);
        blk.stages.push_back(std::move(st));
      }
      lvl.blocks.push_back(std::move(blk));
    }
    tree.levels.push_back(std::move(lvl));
  }
  tree.next_block_id = max_id + 1;

  for (const auto& [key, tasks] : root.at("leaf_tasks").items())
    tree.leaf_tasks[std::stoi(key)] = tasks.get<std::vector<int>>();

  const auto& jblob = root.at("blob");
  const long declared = jblob.at("count").get<long>();
  const long declared_bytes = declared * static_cast<long>(sizeof(Real));
  if (static_cast<long>(blob.size()) != declared_bytes)
    throw CorruptionError(
        "weight blob length mismatch: manifest declares " +
        std::to_string(declared_bytes) + " bytes, file has " +
        std::to_string(blob.size()) + " bytes");

  for (const auto& e : jblob.at("entries")) {
    const int bid = e.at("block").get<int>();
    const int si = e.at("stage").get<int>();
    const std::string tensor = e.at("tensor").get<std::string>();
    const long offset = e.at("offset").get<long>();
    const long rows = e.at("rows").get<long>();
    const long cols = e.at("cols").get<long>();
    if (offset < 0 || offset + rows * cols > declared)
      throw CorruptionError("weight blob entry out of range at offset " +
                            std::to_string(offset * sizeof(Real)) +
                            " bytes (blob holds " +
                            std::to_string(declared_bytes) + " bytes)");
    Block* blk = tree.find_block(bid);
    if (!blk || si < 0 || si >= static_cast<int>(blk->stages.size()))
      throw CorruptionError("manifest: blob entry references unknown block " +
                            std::to_string(bid) + " stage " +
                            std::to_string(si));
    auto& params = blk->stages[si].params;
    const Real* src =
        reinterpret_cast<const Real*>(blob.data()) + offset;
    auto read_mat = [&](Mat& m) {
      if (m.rows() != rows || m.cols() != cols)
        throw CorruptionError("manifest: tensor '" + tensor +
                              "' shape does not match block " +
                              std::to_string(bid) + " spec");
      for (long r = 0; r < rows; ++r)
        for (long c = 0; c < cols; ++c) m(r, c) = src[r * cols + c];
    };
    auto read_vec = [&](Vec& v) {
      if (v.size() != rows || (cols != 1 && rows != 0))
        throw CorruptionError("manifest: tensor '" + tensor +
                              "' shape does not match block " +
                              std::to_string(bid) + " spec");
      for (long r = 0; r < rows; ++r) v(r) = src[r];
    };
    if (tensor == "weight")
      read_mat(params.weight);
    else if (tensor == "bias")
      read_vec(params.bias);
    else if (tensor == "gamma")
      read_vec(params.gamma);
    else if (tensor == "beta")
      read_vec(params.beta);
    else if (tensor == "running_mean")
      read_vec(params.running_mean);
    else if (tensor == "running_var")
      read_vec(params.running_var);
    else
      throw CorruptionError("manifest: unknown tensor name '" + tensor + "'");
  }

  tree.check_invariants();
  return tree;
}

void save_model(const ModelTree& tree, const std::string& prefix) {
  const ModelFiles files = export_model(tree);
  {
    std::ofstream out(prefix + ".json", std::ios::binary);
    require(out.good(), "save_model: cannot open " + prefix + ".json");
    out.write(files.manifest.data(),
              static_cast<std::streamsize>(files.manifest.size()));
  }
  {
    std::ofstream out(prefix + ".blob", std::ios::binary);
    require(out.good(), "save_model: cannot open " + prefix + ".blob");
    out.write(reinterpret_cast<const char*>(files.blob.data()),
              static_cast<std::streamsize>(files.blob.size()));
  }
}

ModelTree load_model(const std::string& prefix) {
  std::ifstream mf(prefix + ".json", std::ios::binary);
  if (!mf.good())
    throw CorruptionError("load_model: cannot open " + prefix + ".json");
  std::stringstream ss;
  ss << mf.rdbuf();
  std::ifstream bf(prefix + ".blob", std::ios::binary | std::ios::ate);
  if (!bf.good())
    throw CorruptionError("load_model: cannot open " + prefix + ".blob");
  const auto size = bf.tellg();
  bf.seekg(0);
  std::vector<std::uint8_t> blob(static_cast<size_t>(size));
  bf.read(reinterpret_cast<char*>(blob.data()), size);
  return import_model(ss.str(), blob);
}

std::string export_dot(const ModelTree& tree) {
  std::vector<std::string> names = tree.task_names;
  if (names.empty())
    for (int t = 0; t < tree.task_count; ++t)
      names.push_back("task" + std::to_string(t));

  std::ostringstream out;
  out << "digraph model {\n  rankdir=BT;\n";
  out << "  input [shape=box, style=dashed, label=\"input "
      << tree.input_shape.channels << "x" << tree.input_shape.height << "x"
      << tree.input_shape.width << "\"];\n";
  std::map<int, std::string> node_of;
  for (size_t li = 0; li < tree.levels.size(); ++li) {
    const bool is_head = li + 1 == tree.levels.size();
    for (size_t bi = 0; bi < tree.levels[li].blocks.size(); ++bi) {
      const auto& blk = tree.levels[li].blocks[bi];
      const std::string node =
          "l" + std::to_string(li) + "b" + std::to_string(bi);
      node_of[blk.id] = node;
      std::string label;
      if (is_head) {
        const auto& tasks = tree.leaf_tasks.at(blk.id);
        for (size_t j = 0; j < tasks.size(); ++j)
          label += (j ? ", " : "") + names[tasks[j]];
      } else {
        label = "L" + std::to_string(li);
        for (const auto& st : blk.stages) label += " " + st.spec.describe();
      }
      out << "  " << node << " [shape=" << (is_head ? "ellipse" : "box")
          << ", label=\"" << label << "\"];\n";
    }
  }
  for (const auto& lvl : tree.levels)
    for (const auto& blk : lvl.blocks)
      out << "  " << (blk.parent < 0 ? "input" : node_of.at(blk.parent))
          << " -> " << node_of.at(blk.id) << ";\n";
  out << "}\n";
  return out.str();
}

}  // namespace branchnet
