#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ldet/autodiff.hpp"
#include "ldet/data.hpp"
#include "ldet/swin.hpp"
#include "ldet/util.hpp"

namespace ldet {

// ---- model -----------------------------------------------------------------

struct DetectorConfig {
  BackboneConfig backbone;
  std::size_t neck_channels = 32;
  std::size_t head_hidden = 128;
  std::size_t classes = 2;     // foreground classes; logits add one background slot
  std::size_t roi = 4;         // side of the axis-aligned feature crop
  std::size_t head_rank_fc1 = 8;
  std::size_t head_rank_fc2 = 8;
  double lora_stddev = 0.02;
  std::size_t max_detections = 10;

  std::size_t head_in() const { return roi * roi * neck_channels; }

  void validate() const {
    backbone.validate();
    if (neck_channels == 0 || head_hidden == 0 || classes == 0 || roi == 0)
      throw ConfigError("DetectorConfig: sizes must be positive");
    if (head_rank_fc1 < 1 || head_rank_fc1 > std::min(head_hidden, head_in()))
      throw ConfigError("DetectorConfig: head fc1 rank out of range");
    if (head_rank_fc2 < 1 || head_rank_fc2 > head_hidden)
      throw ConfigError("DetectorConfig: head fc2 rank out of range");
  }
};

// Backbone -> FPN-like neck -> RPN stand-in -> two shared FC layers ->
// classification / regression heads. Every parameter tensor has a stable
// hierarchical name (see for_each_param).
struct DetectorModel {
  DetectorConfig cfg;
  SwinBackbone backbone;
  std::vector<Matrix> lateral_w;  // per level: neckC x stage_dim (1x1 conv)
  std::vector<Matrix> lateral_b;  // per level: 1 x neckC
  std::vector<Matrix> smooth_w;   // per level: neckC x 9*neckC (3x3 conv)
  std::vector<Matrix> smooth_b;
  Matrix rpn_conv_w;  // neckC x 9*neckC, shared across levels
  Matrix rpn_conv_b;
  Matrix rpn_obj_w;  // 1 x neckC
  Matrix rpn_obj_b;  // 1 x 1
  LoraLinear head_fc1;  // hidden x (roi^2 * neckC)
  Matrix head_fc1_b;
  LoraLinear head_fc2;  // hidden x hidden
  Matrix head_fc2_b;
  Matrix cls_w;  // (classes+1) x hidden
  Matrix cls_b;
  Matrix reg_w;  // 5 x hidden
  Matrix reg_b;
};

inline DetectorModel make_detector(const DetectorConfig& cfg, Rng& rng) {
  cfg.validate();
  DetectorModel m{
      cfg,
      make_backbone(cfg.backbone, rng),
      {}, {}, {}, {},
      detail::dense_init(cfg.neck_channels, 9 * cfg.neck_channels, rng),
      Matrix(1, cfg.neck_channels),
      detail::dense_init(1, cfg.neck_channels, rng),
      Matrix(1, 1),
      LoraLinear(detail::dense_init(cfg.head_hidden, cfg.head_in(), rng),
                 cfg.head_rank_fc1, cfg.lora_stddev, rng),
      Matrix(1, cfg.head_hidden),
      LoraLinear(detail::dense_init(cfg.head_hidden, cfg.head_hidden, rng),
                 cfg.head_rank_fc2, cfg.lora_stddev, rng),
      Matrix(1, cfg.head_hidden),
      detail::dense_init(cfg.classes + 1, cfg.head_hidden, rng),
      Matrix(1, cfg.classes + 1),
      detail::dense_init(5, cfg.head_hidden, rng),
      Matrix(1, 5)};
  for (std::size_t l = 0; l < cfg.backbone.stages.size(); ++l) {
    m.lateral_w.push_back(
        detail::dense_init(cfg.neck_channels, cfg.backbone.stages[l].dim, rng));
    m.lateral_b.push_back(Matrix(1, cfg.neck_channels));
    m.smooth_w.push_back(
        detail::dense_init(cfg.neck_channels, 9 * cfg.neck_channels, rng));
    m.smooth_b.push_back(Matrix(1, cfg.neck_channels));
  }
  return m;
}

// ---- parameter registry ----------------------------------------------------

enum class ParamKind { kDense, kBias, kNorm, kLoraA, kLoraB, kBiasTable };

using ParamVisitor = std::function<void(const std::string&, Matrix*, ParamKind)>;

inline void for_each_param(DetectorModel& m, const ParamVisitor& fn) {
  fn("backbone.patch_embed.weight", &m.backbone.patch_embed_w, ParamKind::kDense);
  fn("backbone.patch_embed.bias", &m.backbone.patch_embed_b, ParamKind::kBias);
  for (std::size_t s = 0; s < m.backbone.stage_blocks.size(); ++s) {
    const std::string stage = "backbone.stage" + std::to_string(s + 1);
    if (s > 0) {
      fn(stage + ".merge.weight", &m.backbone.merge_w[s - 1], ParamKind::kDense);
      fn(stage + ".merge.bias", &m.backbone.merge_b[s - 1], ParamKind::kBias);
    }
    for (std::size_t d = 0; d < m.backbone.stage_blocks[s].size(); ++d) {
      SwinBlockWeights& b = m.backbone.stage_blocks[s][d];
      const std::string blk = stage + ".block" + std::to_string(d);
      fn(blk + ".attn.wq.weight", &b.attn.wq.mutable_w(), ParamKind::kDense);
      fn(blk + ".attn.wq.lora_A", &b.attn.wq.a(), ParamKind::kLoraA);
      fn(blk + ".attn.wq.lora_B", &b.attn.wq.b(), ParamKind::kLoraB);
      fn(blk + ".attn.wk.weight", &b.attn.wk, ParamKind::kDense);
      fn(blk + ".attn.wv.weight", &b.attn.wv.mutable_w(), ParamKind::kDense);
      fn(blk + ".attn.wv.lora_A", &b.attn.wv.a(), ParamKind::kLoraA);
      fn(blk + ".attn.wv.lora_B", &b.attn.wv.b(), ParamKind::kLoraB);
      fn(blk + ".attn.wo.weight", &b.attn.wo, ParamKind::kDense);
      fn(blk + ".attn.wo.bias", &b.attn.wo_bias, ParamKind::kBias);
      fn(blk + ".attn.rel_bias_table", &b.attn.rel_bias_table, ParamKind::kBiasTable);
      fn(blk + ".ln1.gamma", &b.ln1_g, ParamKind::kNorm);
      fn(blk + ".ln1.beta", &b.ln1_b, ParamKind::kNorm);
      fn(blk + ".ln2.gamma", &b.ln2_g, ParamKind::kNorm);
      fn(blk + ".ln2.beta", &b.ln2_b, ParamKind::kNorm);
      fn(blk + ".mlp.fc1.weight", &b.mlp_w1, ParamKind::kDense);
      fn(blk + ".mlp.fc1.bias", &b.mlp_b1, ParamKind::kBias);
      fn(blk + ".mlp.fc2.weight", &b.mlp_w2, ParamKind::kDense);
      fn(blk + ".mlp.fc2.bias", &b.mlp_b2, ParamKind::kBias);
    }
  }
  for (std::size_t l = 0; l < m.lateral_w.size(); ++l) {
    const std::string lv = std::to_string(l + 1);
    fn("neck.lateral" + lv + ".weight", &m.lateral_w[l], ParamKind::kDense);
    fn("neck.lateral" + lv + ".bias", &m.lateral_b[l], ParamKind::kBias);
    fn("neck.smooth" + lv + ".weight", &m.smooth_w[l], ParamKind::kDense);
    fn("neck.smooth" + lv + ".bias", &m.smooth_b[l], ParamKind::kBias);
  }
  fn("rpn.conv.weight", &m.rpn_conv_w, ParamKind::kDense);
  fn("rpn.conv.bias", &m.rpn_conv_b, ParamKind::kBias);
  fn("rpn.obj.weight", &m.rpn_obj_w, ParamKind::kDense);
  fn("rpn.obj.bias", &m.rpn_obj_b, ParamKind::kBias);
  fn("head.fc1.weight", &m.head_fc1.mutable_w(), ParamKind::kDense);
  fn("head.fc1.lora_A", &m.head_fc1.a(), ParamKind::kLoraA);
  fn("head.fc1.lora_B", &m.head_fc1.b(), ParamKind::kLoraB);
  fn("head.fc1.bias", &m.head_fc1_b, ParamKind::kBias);
  fn("head.fc2.weight", &m.head_fc2.mutable_w(), ParamKind::kDense);
  fn("head.fc2.lora_A", &m.head_fc2.a(), ParamKind::kLoraA);
  fn("head.fc2.lora_B", &m.head_fc2.b(), ParamKind::kLoraB);
  fn("head.fc2.bias", &m.head_fc2_b, ParamKind::kBias);
  fn("head.cls.weight", &m.cls_w, ParamKind::kDense);
  fn("head.cls.bias", &m.cls_b, ParamKind::kBias);
  fn("head.reg.weight", &m.reg_w, ParamKind::kDense);
  fn("head.reg.bias", &m.reg_b, ParamKind::kBias);
}

// Walks every LoRA-carrying layer with the name of its dense base tensor.
template <class Fn>
void for_each_lora(DetectorModel& m, Fn&& fn) {
  for (std::size_t s = 0; s < m.backbone.stage_blocks.size(); ++s)
    for (std::size_t d = 0; d < m.backbone.stage_blocks[s].size(); ++d) {
      SwinBlockWeights& b = m.backbone.stage_blocks[s][d];
      const std::string blk =
          "backbone.stage" + std::to_string(s + 1) + ".block" + std::to_string(d);
      fn(blk + ".attn.wq.weight", b.attn.wq);
      fn(blk + ".attn.wv.weight", b.attn.wv);
    }
  fn("head.fc1.weight", m.head_fc1);
  fn("head.fc2.weight", m.head_fc2);
}

// Folds every adapter delta into its dense weight and restores the pristine
// adapter state (Gaussian A, zero B). Checkpoints written after this carry
// zero deltas, so a later package applies cleanly to them.
inline void fold_and_reset_adapters(DetectorModel& m, std::uint64_t seed) {
  Rng rng(Rng::derive_seed(seed, 0xADA97E5ULL));
  for_each_lora(m, [&](const std::string&, LoraLinear& l) {
    l.mutable_w() = add(l.w(), matmul(l.b(), l.a()));
    l.a() = gaussian_matrix(l.a().rows(), l.a().cols(), m.cfg.lora_stddev, rng);
    l.b() = Matrix(l.b().rows(), l.b().cols());
  });
}

// ---- fine-tuning policies --------------------------------------------------

enum class PolicyName {
  kPretrained,
  kFullFinetune,
  kBackboneOnly,
  kHeadOnly,
  kLoraBackboneFullHead,
  kLoraDet,
  kLoraDetHybrid,
};

inline const std::vector<std::pair<std::string, PolicyName>>& policy_names() {
  static const std::vector<std::pair<std::string, PolicyName>> names = {
      {"Pretrained", PolicyName::kPretrained},
      {"FullFinetune", PolicyName::kFullFinetune},
      {"BackboneOnly", PolicyName::kBackboneOnly},
      {"HeadOnly", PolicyName::kHeadOnly},
      {"LoraBackboneFullHead", PolicyName::kLoraBackboneFullHead},
      {"LoraDet", PolicyName::kLoraDet},
      {"LoraDetHybrid", PolicyName::kLoraDetHybrid},
  };
  return names;
}

inline std::string policy_to_string(PolicyName p) {
  for (const auto& [n, v] : policy_names())
    if (v == p) return n;
  return "?";
}

inline PolicyName policy_from_name(const std::string& name) {
  for (const auto& [n, v] : policy_names())
    if (n == name) return v;
  // hyphenated aliases
  if (name == "LoRA-Det") return PolicyName::kLoraDet;
  if (name == "LoRA-Det-hybrid") return PolicyName::kLoraDetHybrid;
  if (name == "LoRA") return PolicyName::kLoraBackboneFullHead;
  std::string valid;
  for (const auto& [n, v] : policy_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown policy '" + name + "'; valid: " + valid +
                    ", LoRA, LoRA-Det, LoRA-Det-hybrid");
}

struct FinetunePolicy {
  PolicyName name;

  bool trainable(const std::string& tensor, ParamKind kind) const {
    const bool in_backbone = tensor.rfind("backbone.", 0) == 0;
    const bool in_head = tensor.rfind("head.", 0) == 0;
    const bool in_neck_or_rpn =
        tensor.rfind("neck.", 0) == 0 || tensor.rfind("rpn.", 0) == 0;
    const bool lora = kind == ParamKind::kLoraA || kind == ParamKind::kLoraB;
    const bool terminal_fc =
        tensor.rfind("head.cls.", 0) == 0 || tensor.rfind("head.reg.", 0) == 0;
    switch (name) {
      case PolicyName::kPretrained:
        return false;
      case PolicyName::kFullFinetune:
        return true;
      case PolicyName::kBackboneOnly:
        return in_backbone;
      case PolicyName::kHeadOnly:
        // the detection head proper (shared FCs + cls/reg); neck and the rpn
        // stand-in stay frozen, matching the "entire head" group of
        // LoraBackboneFullHead
        return in_head;
      case PolicyName::kLoraBackboneFullHead:
        return (in_backbone && lora) || in_head;
      case PolicyName::kLoraDet:
        return ((in_backbone || in_head) && lora) || terminal_fc;
      case PolicyName::kLoraDetHybrid:
        return ((in_backbone || in_head) && lora) || terminal_fc || in_neck_or_rpn;
    }
    return false;
  }
};

struct PolicyCounts {
  std::uint64_t trainable = 0;
  std::uint64_t total = 0;
  double ratio = 0.0;
};

struct PolicyMask {
  std::map<std::string, bool> mask;
  PolicyCounts counts;
};

inline PolicyMask apply_policy(DetectorModel& model, const FinetunePolicy& policy) {
  PolicyMask out;
  for_each_param(model, [&](const std::string& name, Matrix* m, ParamKind kind) {
    const bool t = policy.trainable(name, kind);
    out.mask[name] = t;
    out.counts.total += m->size();
    if (t) out.counts.trainable += m->size();
  });
  out.counts.ratio = out.counts.total == 0
                         ? 0.0
                         : static_cast<double>(out.counts.trainable) /
                               static_cast<double>(out.counts.total);
  return out;
}

// ---- forward ---------------------------------------------------------------

namespace detail {

// k x k neighborhood gather around every grid cell with zero padding;
// for even k the window spans offsets [-(k-1)/2, k/2].
inline std::vector<std::int64_t> neighborhood_indices(std::size_t h, std::size_t w,
                                                      std::size_t c, std::size_t k) {
  const std::int64_t lo = -static_cast<std::int64_t>((k - 1) / 2);
  std::vector<std::int64_t> idx;
  idx.reserve(h * w * k * k * c);
  for (std::int64_t y = 0; y < static_cast<std::int64_t>(h); ++y)
    for (std::int64_t x = 0; x < static_cast<std::int64_t>(w); ++x)
      for (std::int64_t dy = 0; dy < static_cast<std::int64_t>(k); ++dy)
        for (std::int64_t dx = 0; dx < static_cast<std::int64_t>(k); ++dx) {
          const std::int64_t sy = y + lo + dy;
          const std::int64_t sx = x + lo + dx;
          const bool inside = sy >= 0 && sy < static_cast<std::int64_t>(h) &&
                              sx >= 0 && sx < static_cast<std::int64_t>(w);
          for (std::size_t ch = 0; ch < c; ++ch)
            idx.push_back(inside ? (sy * static_cast<std::int64_t>(w) + sx) *
                                           static_cast<std::int64_t>(c) +
                                       static_cast<std::int64_t>(ch)
                                 : -1);
        }
  return idx;
}

inline Tape::NodeId conv_tape(Tape& t, Tape::NodeId x, std::size_t h, std::size_t w,
                              const Matrix* weight, const Matrix* bias,
                              std::size_t k) {
  const std::size_t c = t.value(x).cols();
  Tape::NodeId cols = t.gather(x, neighborhood_indices(h, w, c, k), h * w, k * k * c);
  return t.add_bias(detail::linear_t(t, cols, weight), t.param(bias));
}

inline std::vector<std::int64_t> upsample2_indices(std::size_t fine_h,
                                                   std::size_t fine_w,
                                                   std::size_t c) {
  std::vector<std::int64_t> idx;
  idx.reserve(fine_h * fine_w * c);
  for (std::size_t y = 0; y < fine_h; ++y)
    for (std::size_t x = 0; x < fine_w; ++x) {
      const std::size_t tok = (y / 2) * (fine_w / 2) + x / 2;
      for (std::size_t ch = 0; ch < c; ++ch)
        idx.push_back(static_cast<std::int64_t>(tok * c + ch));
    }
  return idx;
}

}  // namespace detail

struct LevelPrediction {
  Tape::NodeId cls;  // cells x (classes+1)
  Tape::NodeId reg;  // cells x 5
  Tape::NodeId obj;  // cells x 1
  std::size_t height;
  std::size_t width;
  double stride_px;
  double base_size;
};

inline std::vector<LevelPrediction> detector_forward_tape(Tape& t,
                                                          const DetectorModel& m,
                                                          const Matrix& image) {
  const auto stages = backbone_forward_tape(t, m.backbone, image);
  const std::size_t levels = stages.size();
  const std::size_t nc = m.cfg.neck_channels;

  // FPN-like neck: 1x1 laterals, top-down nearest-neighbor additions,
  // then a 3x3 smoothing conv per level.
  std::vector<Tape::NodeId> lat(levels);
  for (std::size_t l = 0; l < levels; ++l)
    lat[l] = t.add_bias(detail::linear_t(t, stages[l].tokens, &m.lateral_w[l]),
                        t.param(&m.lateral_b[l]));
  std::vector<Tape::NodeId> merged(levels);
  merged[levels - 1] = lat[levels - 1];
  for (std::size_t l = levels - 1; l-- > 0;) {
    Tape::NodeId up = t.gather(
        merged[l + 1],
        detail::upsample2_indices(stages[l].height, stages[l].width, nc),
        stages[l].height * stages[l].width, nc);
    merged[l] = t.add(lat[l], up);
  }

  std::vector<LevelPrediction> preds;
  for (std::size_t l = 0; l < levels; ++l) {
    const std::size_t h = stages[l].height, w = stages[l].width;
    Tape::NodeId sm =
        detail::conv_tape(t, merged[l], h, w, &m.smooth_w[l], &m.smooth_b[l], 3);

    Tape::NodeId rp = t.relu(
        detail::conv_tape(t, sm, h, w, &m.rpn_conv_w, &m.rpn_conv_b, 3));
    Tape::NodeId obj = t.add_bias(detail::linear_t(t, rp, &m.rpn_obj_w),
                                  t.param(&m.rpn_obj_b));

    Tape::NodeId crop =
        t.gather(sm, detail::neighborhood_indices(h, w, nc, m.cfg.roi), h * w,
                 m.cfg.roi * m.cfg.roi * nc);
    Tape::NodeId h1 = t.gelu(t.add_bias(detail::lora_linear_t(t, crop, m.head_fc1),
                                        t.param(&m.head_fc1_b)));
    Tape::NodeId h2 = t.gelu(t.add_bias(detail::lora_linear_t(t, h1, m.head_fc2),
                                        t.param(&m.head_fc2_b)));
    Tape::NodeId cls =
        t.add_bias(detail::linear_t(t, h2, &m.cls_w), t.param(&m.cls_b));
    Tape::NodeId reg =
        t.add_bias(detail::linear_t(t, h2, &m.reg_w), t.param(&m.reg_b));

    const double stride =
        static_cast<double>(m.cfg.backbone.patch) * std::ldexp(1.0, static_cast<int>(l));
    preds.push_back({cls, reg, obj, h, w, stride, 4.0 * stride});
  }
  return preds;
}

// ---- targets and loss ------------------------------------------------------

struct LevelTargets {
  std::vector<int> labels;          // background = classes
  std::vector<double> cls_weights;
  Matrix reg_targets;               // cells x 5
  std::vector<double> reg_weights;  // 1 on positive cells
  std::vector<double> obj_targets;
  std::vector<double> obj_weights;
  std::size_t positives = 0;
};

// One positive cell per ground-truth box: the cell containing the box center
// at the size-matched pyramid level.
inline std::vector<LevelTargets> build_targets(
    const std::vector<LevelPrediction>& preds, const SceneSample& sample,
    std::size_t classes, double positive_weight = 8.0) {
  std::vector<LevelTargets> targets;
  for (const auto& p : preds) {
    LevelTargets lt;
    const std::size_t cells = p.height * p.width;
    lt.labels.assign(cells, static_cast<int>(classes));
    lt.cls_weights.assign(cells, 1.0);
    lt.reg_targets = Matrix(cells, 5);
    lt.reg_weights.assign(cells, 0.0);
    lt.obj_targets.assign(cells, 0.0);
    lt.obj_weights.assign(cells, 1.0);
    targets.push_back(std::move(lt));
  }
  for (std::size_t b = 0; b < sample.boxes.size(); ++b) {
    const OrientedBox& box = sample.boxes[b];
    const double long_side = std::max(box.w, box.h);
    std::size_t level = 0;
    double best = 1e300;
    for (std::size_t l = 0; l < preds.size(); ++l) {
      const double d = std::abs(std::log(long_side / preds[l].base_size));
      if (d < best) {
        best = d;
        level = l;
      }
    }
    const auto& p = preds[level];
    auto& lt = targets[level];
    const auto cx_cell = static_cast<std::size_t>(
        std::min(box.cx / p.stride_px, static_cast<double>(p.width) - 1.0));
    const auto cy_cell = static_cast<std::size_t>(
        std::min(box.cy / p.stride_px, static_cast<double>(p.height) - 1.0));
    const std::size_t cell = cy_cell * p.width + cx_cell;
    lt.labels[cell] = sample.labels[b];
    lt.cls_weights[cell] = positive_weight;
    lt.reg_targets(cell, 0) =
        (box.cx - (static_cast<double>(cx_cell) + 0.5) * p.stride_px) / p.stride_px;
    lt.reg_targets(cell, 1) =
        (box.cy - (static_cast<double>(cy_cell) + 0.5) * p.stride_px) / p.stride_px;
    lt.reg_targets(cell, 2) = std::log(box.w / p.base_size);
    lt.reg_targets(cell, 3) = std::log(box.h / p.base_size);
    lt.reg_targets(cell, 4) = box.theta;
    lt.reg_weights[cell] = 1.0;
    lt.obj_targets[cell] = 1.0;
    lt.obj_weights[cell] = positive_weight;
    ++lt.positives;
  }
  return targets;
}

// Cross-entropy on class logits, smooth-L1 on the five box deltas of positive
// cells, binary cross-entropy on objectness. Returns the scalar loss node.
inline Tape::NodeId detection_loss_tape(Tape& t,
                                        const std::vector<LevelPrediction>& preds,
                                        const std::vector<LevelTargets>& targets) {
  if (preds.size() != targets.size())
    throw ShapeError("detection_loss: level count mismatch");
  double cls_norm = 0.0, obj_norm = 0.0;
  std::size_t positives = 0;
  for (const auto& lt : targets) {
    for (double w : lt.cls_weights) cls_norm += w;
    for (double w : lt.obj_weights) obj_norm += w;
    positives += lt.positives;
  }
  const double reg_norm = std::max<std::size_t>(positives, 1);

  Tape::NodeId total = t.constant(Matrix(1, 1));
  for (std::size_t l = 0; l < preds.size(); ++l) {
    const auto& p = preds[l];
    const auto& lt = targets[l];
    Tape::NodeId ce = t.softmax_xent(p.cls, lt.labels, lt.cls_weights, cls_norm);
    Tape::NodeId sl = t.smooth_l1(p.reg, lt.reg_targets, lt.reg_weights, reg_norm);
    Tape::NodeId ob = t.bce_logits(p.obj, lt.obj_targets, lt.obj_weights, obj_norm);
    total = t.add(total, t.add(ce, t.add(t.scale(sl, 2.0), ob)));
  }
  const double v = t.value(total)(0, 0);
  if (!std::isfinite(v)) throw NumericError("detection_loss: non-finite loss");
  return total;
}

// ---- training --------------------------------------------------------------

struct OptimizerConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;  // decoupled
  std::size_t batch_size = 4;
};

struct TrainLog {
  std::vector<double> epoch_loss;
};

// Trains exactly the policy's trainable tensors with decoupled-weight-decay
// Adam; everything else stays bit-identical.
inline TrainLog train(DetectorModel& model, const FinetunePolicy& policy,
                      const std::vector<SceneSample>& dataset, std::size_t epochs,
                      const OptimizerConfig& opt, std::uint64_t seed) {
  if (dataset.empty()) throw ArgumentError("train: empty dataset");
  struct Slot {
    std::string name;
    Matrix* value;
    Matrix m1, m2;
  };
  std::vector<Slot> slots;
  for_each_param(model, [&](const std::string& name, Matrix* mx, ParamKind kind) {
    if (policy.trainable(name, kind))
      slots.push_back({name, mx, Matrix(mx->rows(), mx->cols()),
                       Matrix(mx->rows(), mx->cols())});
  });

  TrainLog log;
  Rng shuffle_rng(Rng::derive_seed(seed, 0x7261117ULL));
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      std::vector<Matrix> grads(slots.size());
      for (std::size_t si = 0; si < slots.size(); ++si)
        grads[si] = Matrix(slots[si].value->rows(), slots[si].value->cols());
      double batch_loss = 0.0;
      for (std::size_t bi = start; bi < end; ++bi) {
        const SceneSample& sample = dataset[order[bi]];
        Tape t;
        const auto preds = detector_forward_tape(t, model, sample.image);
        const auto targets = build_targets(preds, sample, model.cfg.classes);
        const Tape::NodeId loss = detection_loss_tape(t, preds, targets);
        batch_loss += t.value(loss)(0, 0);
        if (!slots.empty()) {
          t.backward(loss);
          for (std::size_t si = 0; si < slots.size(); ++si) {
            const Matrix g = t.grad_of(slots[si].value);
            for (std::size_t i = 0; i < g.size(); ++i) grads[si].vec()[i] += g.vec()[i];
          }
        }
      }
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      epoch_loss += batch_loss;
      if (!std::isfinite(batch_loss))
        throw TrainingError("train: loss diverged at epoch " + std::to_string(epoch));
      if (slots.empty()) continue;
      ++step;
      const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
      for (std::size_t si = 0; si < slots.size(); ++si) {
        Slot& s = slots[si];
        for (std::size_t i = 0; i < s.value->size(); ++i) {
          const double g = grads[si].vec()[i] * inv_batch;
          s.m1.vec()[i] = opt.beta1 * s.m1.vec()[i] + (1.0 - opt.beta1) * g;
          s.m2.vec()[i] = opt.beta2 * s.m2.vec()[i] + (1.0 - opt.beta2) * g * g;
          const double mhat = s.m1.vec()[i] / bc1;
          const double vhat = s.m2.vec()[i] / bc2;
          double& p = s.value->vec()[i];
          p -= opt.lr * (mhat / (std::sqrt(vhat) + opt.eps) + opt.weight_decay * p);
        }
      }
    }
    log.epoch_loss.push_back(epoch_loss / static_cast<double>(dataset.size()));
  }
  return log;
}

// ---- inference / evaluation ------------------------------------------------

inline std::vector<Detection> detect(const DetectorModel& model, const Matrix& image) {
  Tape t;
  const auto preds = detector_forward_tape(t, model, image);
  const std::size_t classes = model.cfg.classes;
  std::vector<Detection> dets;
  for (const auto& p : preds) {
    const Matrix& cls = t.value(p.cls);
    const Matrix& reg = t.value(p.reg);
    const Matrix& obj = t.value(p.obj);
    for (std::size_t cell = 0; cell < p.height * p.width; ++cell) {
      // softmax over class logits
      double mx = cls(cell, 0);
      for (std::size_t j = 1; j < classes + 1; ++j) mx = std::max(mx, cls(cell, j));
      double denom = 0.0;
      for (std::size_t j = 0; j < classes + 1; ++j) denom += std::exp(cls(cell, j) - mx);
      int best = 0;
      double best_p = 0.0, fg_p = 0.0;
      for (std::size_t j = 0; j < classes; ++j) {
        const double pj = std::exp(cls(cell, j) - mx) / denom;
        fg_p += pj;
        if (pj > best_p) {
          best_p = pj;
          best = static_cast<int>(j);
        }
      }
      const double p_obj = 1.0 / (1.0 + std::exp(-obj(cell, 0)));
      const double score = fg_p * p_obj;

      const double cx_cell = static_cast<double>(cell % p.width);
      const double cy_cell = static_cast<double>(cell / p.width);
      auto clamp = [](double v, double lim) { return std::max(-lim, std::min(lim, v)); };
      const double cx = (cx_cell + 0.5 + clamp(reg(cell, 0), 4.0)) * p.stride_px;
      const double cy = (cy_cell + 0.5 + clamp(reg(cell, 1), 4.0)) * p.stride_px;
      const double w = p.base_size * std::exp(clamp(reg(cell, 2), 4.0));
      const double h = p.base_size * std::exp(clamp(reg(cell, 3), 4.0));
      dets.push_back({OrientedBox::make(cx, cy, w, h, reg(cell, 4)), best, score});
    }
  }
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (dets.size() > model.cfg.max_detections) dets.resize(model.cfg.max_detections);
  return dets;
}

inline EvalMetrics evaluate(const DetectorModel& model,
                            const std::vector<SceneSample>& dataset,
                            double iou_threshold = 0.5) {
  if (dataset.empty()) throw ArgumentError("evaluate: empty dataset");
  std::vector<std::vector<Detection>> dets(dataset.size());
  std::vector<std::vector<OrientedBox>> gts(dataset.size());
  std::vector<std::vector<int>> labels(dataset.size());
  parallel_for(dataset.size(), [&](std::size_t i) {
    dets[i] = detect(model, dataset[i].image);
    gts[i] = dataset[i].boxes;
    labels[i] = dataset[i].labels;
  });
  return score_detections(dets, gts, labels, iou_threshold);
}

}  // namespace ldet
