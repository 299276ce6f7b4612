#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ldet/autodiff.hpp"
#include "ldet/lora.hpp"
#include "ldet/matrix.hpp"

namespace ldet {

// One hierarchical stage: channel width, block count (regular/shifted pairs),
// attention heads and window side in patches.
struct StageConfig {
  std::size_t dim;
  std::size_t depth;
  std::size_t heads;
  std::size_t window;

  void validate() const {
    if (depth == 0 || depth % 2 != 0)
      throw ConfigError("StageConfig: depth must be positive and even");
    if (dim == 0 || heads == 0 || dim % heads != 0)
      throw ConfigError("StageConfig: dim must be a positive multiple of heads");
    if (window == 0) throw ConfigError("StageConfig: window must be positive");
  }
};

// Patch-grid activations, stored token-major: tokens (height*width rows, one
// per grid cell in row-major order) by channels.
struct FeatureMap {
  std::size_t height;
  std::size_t width;
  Matrix tokens;  // (height*width) x channels

  std::size_t channels() const { return tokens.cols(); }
};

// ---- pure grid ops ---------------------------------------------------------

// Non-overlapping tiling into m x m windows, row-major window order and
// row-major tokens within each window.
inline std::vector<Matrix> window_partition(const FeatureMap& f, std::size_t m) {
  if (m == 0 || f.height % m != 0 || f.width % m != 0)
    throw ShapeError("window_partition: " + std::to_string(f.height) + "x" +
                     std::to_string(f.width) + " not divisible by window " +
                     std::to_string(m));
  const std::size_t c = f.channels();
  std::vector<Matrix> windows;
  for (std::size_t wy = 0; wy < f.height / m; ++wy)
    for (std::size_t wx = 0; wx < f.width / m; ++wx) {
      Matrix win(m * m, c);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const std::size_t tok = (wy * m + i) * f.width + (wx * m + j);
          for (std::size_t ch = 0; ch < c; ++ch)
            win(i * m + j, ch) = f.tokens(tok, ch);
        }
      windows.push_back(std::move(win));
    }
  return windows;
}

inline FeatureMap window_unpartition(const std::vector<Matrix>& windows,
                                     std::size_t height, std::size_t width,
                                     std::size_t m) {
  if (m == 0 || height % m != 0 || width % m != 0)
    throw ShapeError("window_unpartition: extents not divisible by window");
  if (windows.size() != (height / m) * (width / m))
    throw ShapeError("window_unpartition: window count mismatch");
  const std::size_t c = windows.empty() ? 0 : windows[0].cols();
  FeatureMap f{height, width, Matrix(height * width, c)};
  std::size_t w_idx = 0;
  for (std::size_t wy = 0; wy < height / m; ++wy)
    for (std::size_t wx = 0; wx < width / m; ++wx, ++w_idx)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const std::size_t tok = (wy * m + i) * width + (wx * m + j);
          for (std::size_t ch = 0; ch < c; ++ch)
            f.tokens(tok, ch) = windows[w_idx](i * m + j, ch);
        }
  return f;
}

// Toroidal roll of the patch grid by (dy, dx): output cell (y, x) takes the
// input cell ((y - dy) mod h, (x - dx) mod w).
inline FeatureMap cyclic_shift(const FeatureMap& f, std::int64_t dy, std::int64_t dx) {
  const auto h = static_cast<std::int64_t>(f.height);
  const auto w = static_cast<std::int64_t>(f.width);
  FeatureMap out{f.height, f.width, Matrix(f.tokens.rows(), f.tokens.cols())};
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const std::int64_t sy = ((y - dy) % h + h) % h;
      const std::int64_t sx = ((x - dx) % w + w) % w;
      for (std::size_t ch = 0; ch < f.channels(); ++ch)
        out.tokens(static_cast<std::size_t>(y * w + x), ch) =
            f.tokens(static_cast<std::size_t>(sy * w + sx), ch);
    }
  return out;
}

// ---- index-map builders for tape gathers -----------------------------------

inline std::vector<std::int64_t> cyclic_shift_indices(std::size_t height,
                                                      std::size_t width,
                                                      std::size_t channels,
                                                      std::int64_t dy,
                                                      std::int64_t dx) {
  const auto h = static_cast<std::int64_t>(height);
  const auto w = static_cast<std::int64_t>(width);
  std::vector<std::int64_t> idx(height * width * channels);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const std::int64_t sy = ((y - dy) % h + h) % h;
      const std::int64_t sx = ((x - dx) % w + w) % w;
      for (std::size_t ch = 0; ch < channels; ++ch)
        idx[(y * w + x) * channels + ch] = (sy * w + sx) * channels + ch;
    }
  return idx;
}

// Token row indices of window `which` (row-major window order).
inline std::vector<std::size_t> window_token_rows(std::size_t height,
                                                  std::size_t width,
                                                  std::size_t m,
                                                  std::size_t which) {
  const std::size_t wy = which / (width / m), wx = which % (width / m);
  std::vector<std::size_t> rows;
  rows.reserve(m * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      rows.push_back((wy * m + i) * width + (wx * m + j));
  return rows;
}

// Standard relative-offset index map: entry (i, j) is the table row for the
// offset between tokens i and j of an m x m window; rows span (2m-1)^2.
inline std::vector<std::size_t> relative_position_index(std::size_t m) {
  std::vector<std::size_t> idx(m * m * m * m);
  for (std::size_t i = 0; i < m * m; ++i) {
    const std::int64_t iy = static_cast<std::int64_t>(i / m);
    const std::int64_t ix = static_cast<std::int64_t>(i % m);
    for (std::size_t j = 0; j < m * m; ++j) {
      const std::int64_t jy = static_cast<std::int64_t>(j / m);
      const std::int64_t jx = static_cast<std::int64_t>(j % m);
      const std::int64_t ry = iy - jy + static_cast<std::int64_t>(m) - 1;
      const std::int64_t rx = ix - jx + static_cast<std::int64_t>(m) - 1;
      idx[i * m * m + j] =
          static_cast<std::size_t>(ry * (2 * static_cast<std::int64_t>(m) - 1) + rx);
    }
  }
  return idx;
}

// Region ids used to mask wrapped cross-window pairs after a cyclic shift of
// (-s, -s). Tokens in different regions must not attend to each other.
inline std::vector<int> shift_region_ids(std::size_t height, std::size_t width,
                                         std::size_t m, std::size_t s) {
  std::vector<int> ids(height * width, 0);
  auto band = [m, s](std::size_t v, std::size_t extent) -> int {
    if (v < extent - m) return 0;
    if (v < extent - s) return 1;
    return 2;
  };
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      ids[y * width + x] = band(y, height) * 3 + band(x, width);
  return ids;
}

// ---- weights ---------------------------------------------------------------

// Attention projections for one block: W_q / W_v carry LoRA adapters, W_k and
// the output projection stay plain dense.
struct AttentionWeights {
  LoraLinear wq;
  Matrix wk;
  LoraLinear wv;
  Matrix wo;
  Matrix wo_bias;          // 1 x C
  Matrix rel_bias_table;   // (2m-1)^2 x heads
  std::vector<std::size_t> rel_index;  // m^2 x m^2 rows into the table
  std::size_t heads;
  std::size_t window;
};

struct SwinBlockWeights {
  AttentionWeights attn;
  Matrix ln1_g, ln1_b;  // 1 x C
  Matrix ln2_g, ln2_b;
  Matrix mlp_w1;  // hidden x C   (y = x W^T convention via transpose)
  Matrix mlp_b1;  // 1 x hidden
  Matrix mlp_w2;  // C x hidden
  Matrix mlp_b2;  // 1 x C
};

struct BackboneConfig {
  std::size_t image_size = 64;   // square, pixels
  std::size_t patch = 4;
  std::size_t in_channels = 1;
  std::vector<StageConfig> stages = {{16, 2, 2, 4}, {32, 2, 2, 4}, {64, 2, 2, 4}, {128, 2, 2, 4}};
  std::vector<std::size_t> lora_rank = {4, 4, 4, 4};  // per stage, for wq/wv
  double lora_stddev = 0.02;

  void validate() const {
    if (stages.empty()) throw ConfigError("BackboneConfig: no stages");
    if (lora_rank.size() != stages.size())
      throw ConfigError("BackboneConfig: one lora rank per stage required");
    for (const auto& s : stages) s.validate();
    for (std::size_t i = 1; i < stages.size(); ++i)
      if (stages[i].dim != 2 * stages[i - 1].dim)
        throw ConfigError("BackboneConfig: stage dims must double (patch merging)");
    if (patch == 0 || image_size % (patch << (stages.size() - 1)) != 0)
      throw ConfigError("BackboneConfig: image size must be divisible by patch * 2^(stages-1)");
    for (std::size_t i = 0; i < stages.size(); ++i)
      if (lora_rank[i] < 1 || lora_rank[i] > stages[i].dim)
        throw ConfigError("BackboneConfig: lora rank out of range in stage " +
                          std::to_string(i + 1));
  }
};

struct SwinBackbone {
  BackboneConfig cfg;
  Matrix patch_embed_w;  // dim0 x (patch^2 * in_channels)
  Matrix patch_embed_b;  // 1 x dim0
  std::vector<Matrix> merge_w;  // per transition: 2C x 4C
  std::vector<Matrix> merge_b;  // per transition: 1 x 2C
  std::vector<std::vector<SwinBlockWeights>> stage_blocks;

  // Effective window for a square extent: windows never exceed the grid.
  static std::size_t effective_window(std::size_t window, std::size_t extent) {
    return window < extent ? window : extent;
  }
};

namespace detail {

inline Matrix dense_init(std::size_t out, std::size_t in, Rng& rng) {
  return gaussian_matrix(out, in, 1.0 / std::sqrt(static_cast<double>(in)), rng);
}

inline SwinBlockWeights make_block(std::size_t dim, std::size_t heads,
                                   std::size_t window, std::size_t rank,
                                   double lora_stddev, Rng& rng) {
  const std::size_t hidden = 4 * dim;
  const std::size_t table_rows = (2 * window - 1) * (2 * window - 1);
  SwinBlockWeights b{
      AttentionWeights{
          LoraLinear(dense_init(dim, dim, rng), rank, lora_stddev, rng),
          dense_init(dim, dim, rng),
          LoraLinear(dense_init(dim, dim, rng), rank, lora_stddev, rng),
          dense_init(dim, dim, rng),
          Matrix(1, dim),
          Matrix(table_rows, heads),
          relative_position_index(window),
          heads,
          window},
      Matrix(1, dim), Matrix(1, dim),
      Matrix(1, dim), Matrix(1, dim),
      dense_init(hidden, dim, rng), Matrix(1, hidden),
      dense_init(dim, hidden, rng), Matrix(1, dim)};
  for (double& v : b.ln1_g.vec()) v = 1.0;
  for (double& v : b.ln2_g.vec()) v = 1.0;
  return b;
}

}  // namespace detail

inline SwinBackbone make_backbone(const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  SwinBackbone bb;
  bb.cfg = cfg;
  const std::size_t patch_in = cfg.patch * cfg.patch * cfg.in_channels;
  bb.patch_embed_w = detail::dense_init(cfg.stages[0].dim, patch_in, rng);
  bb.patch_embed_b = Matrix(1, cfg.stages[0].dim);
  std::size_t extent = cfg.image_size / cfg.patch;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const auto& st = cfg.stages[s];
    if (s > 0) {
      const std::size_t prev = cfg.stages[s - 1].dim;
      bb.merge_w.push_back(detail::dense_init(2 * prev, 4 * prev, rng));
      bb.merge_b.push_back(Matrix(1, 2 * prev));
      extent /= 2;
    }
    const std::size_t eff_m = SwinBackbone::effective_window(st.window, extent);
    std::vector<SwinBlockWeights> blocks;
    for (std::size_t d = 0; d < st.depth; ++d)
      blocks.push_back(detail::make_block(st.dim, st.heads, eff_m,
                                          cfg.lora_rank[s], cfg.lora_stddev, rng));
    bb.stage_blocks.push_back(std::move(blocks));
  }
  return bb;
}

// ---- tape forward ----------------------------------------------------------

namespace detail {

// y = x W^T for token-major x and an (out x in) weight.
inline Tape::NodeId linear_t(Tape& t, Tape::NodeId x, const Matrix* w) {
  return t.matmul(x, t.transpose_node(t.param(w)));
}

inline Tape::NodeId lora_linear_t(Tape& t, Tape::NodeId x, const LoraLinear& l) {
  Tape::NodeId base = linear_t(t, x, &l.w());
  if (l.merged()) return base;
  Tape::NodeId ax = t.matmul(x, t.transpose_node(t.param(&l.a())));
  Tape::NodeId bax = t.matmul(ax, t.transpose_node(t.param(&l.b())));
  return t.add(base, bax);
}

// Gather a subset of token rows out of an n x c node.
inline Tape::NodeId gather_rows(Tape& t, Tape::NodeId x,
                                const std::vector<std::size_t>& rows,
                                std::size_t c) {
  std::vector<std::int64_t> idx;
  idx.reserve(rows.size() * c);
  for (std::size_t r : rows)
    for (std::size_t ch = 0; ch < c; ++ch)
      idx.push_back(static_cast<std::int64_t>(r * c + ch));
  return t.gather(x, std::move(idx), rows.size(), c);
}

inline Tape::NodeId gather_col_block(Tape& t, Tape::NodeId x, std::size_t rows,
                                     std::size_t cols, std::size_t c0,
                                     std::size_t cn) {
  std::vector<std::int64_t> idx;
  idx.reserve(rows * cn);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cn; ++j)
      idx.push_back(static_cast<std::int64_t>(r * cols + c0 + j));
  return t.gather(x, std::move(idx), rows, cn);
}

}  // namespace detail

// Windowed multi-head self-attention over an n-token grid node.
// `mask` may be empty; otherwise one additive m^2 x m^2 matrix per window.
inline Tape::NodeId window_attention_tape(Tape& t, Tape::NodeId tokens,
                                          const AttentionWeights& w,
                                          std::size_t height, std::size_t width,
                                          const std::vector<Matrix>& masks) {
  const std::size_t c = t.value(tokens).cols();
  const std::size_t m = w.window;
  if (height % m != 0 || width % m != 0)
    throw ShapeError("window_attention: grid not divisible by window");
  const std::size_t d_head = c / w.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_head));
  const std::size_t n_windows = (height / m) * (width / m);
  if (!masks.empty() && masks.size() != n_windows)
    throw ShapeError("window_attention: one mask per window expected");

  Tape::NodeId q = detail::lora_linear_t(t, tokens, w.wq);
  Tape::NodeId k = detail::linear_t(t, tokens, &w.wk);
  Tape::NodeId v = detail::lora_linear_t(t, tokens, w.wv);

  // Per-head bias matrices gathered from the learnable table.
  std::vector<Tape::NodeId> head_bias(w.heads);
  Tape::NodeId table = t.param(&w.rel_bias_table);
  for (std::size_t h = 0; h < w.heads; ++h) {
    std::vector<std::int64_t> idx;
    idx.reserve(w.rel_index.size());
    for (std::size_t row : w.rel_index)
      idx.push_back(static_cast<std::int64_t>(row * w.heads + h));
    head_bias[h] = t.gather(table, std::move(idx), m * m, m * m);
  }

  std::vector<Tape::NodeId> window_outs;
  for (std::size_t wi = 0; wi < n_windows; ++wi) {
    const auto rows = window_token_rows(height, width, m, wi);
    Tape::NodeId qw = detail::gather_rows(t, q, rows, c);
    Tape::NodeId kw = detail::gather_rows(t, k, rows, c);
    Tape::NodeId vw = detail::gather_rows(t, v, rows, c);
    std::vector<Tape::NodeId> heads_out;
    for (std::size_t h = 0; h < w.heads; ++h) {
      Tape::NodeId qh = detail::gather_col_block(t, qw, m * m, c, h * d_head, d_head);
      Tape::NodeId kh = detail::gather_col_block(t, kw, m * m, c, h * d_head, d_head);
      Tape::NodeId vh = detail::gather_col_block(t, vw, m * m, c, h * d_head, d_head);
      Tape::NodeId logits =
          t.scale(t.matmul(qh, t.transpose_node(kh)), inv_sqrt);
      logits = t.add(logits, head_bias[h]);
      if (!masks.empty()) logits = t.add(logits, t.constant(masks[wi]));
      Tape::NodeId attn = t.softmax_rows(logits);
      heads_out.push_back(t.matmul(attn, vh));
    }
    window_outs.push_back(t.concat_cols(heads_out));
  }
  Tape::NodeId stacked = t.concat_rows(window_outs);  // window-major token order

  // Restore grid token order, then project.
  std::vector<std::int64_t> restore(height * width * c);
  std::size_t pos = 0;
  for (std::size_t wi = 0; wi < n_windows; ++wi)
    for (std::size_t r : window_token_rows(height, width, m, wi)) {
      for (std::size_t ch = 0; ch < c; ++ch)
        restore[r * c + ch] = static_cast<std::int64_t>(pos * c + ch);
      ++pos;
    }
  Tape::NodeId grid = t.gather(stacked, std::move(restore), height * width, c);
  Tape::NodeId proj = detail::linear_t(t, grid, &w.wo);
  return t.add_bias(proj, t.param(&w.wo_bias));
}

// Builds the additive masks for a grid cyclically shifted by (-s, -s).
inline std::vector<Matrix> shifted_window_masks(std::size_t height,
                                                std::size_t width, std::size_t m,
                                                std::size_t s) {
  const std::vector<int> ids = shift_region_ids(height, width, m, s);
  const std::size_t n_windows = (height / m) * (width / m);
  std::vector<Matrix> masks;
  masks.reserve(n_windows);
  for (std::size_t wi = 0; wi < n_windows; ++wi) {
    const auto rows = window_token_rows(height, width, m, wi);
    Matrix mask(m * m, m * m);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < rows.size(); ++j)
        if (ids[rows[i]] != ids[rows[j]]) mask(i, j) = -1e9;
    masks.push_back(std::move(mask));
  }
  return masks;
}

// Pre-norm transformer block: x + attn(LN(x)), then x + MLP(LN(x)).
// `shifted` applies the cyclic shift / mask / unshift dance.
inline Tape::NodeId swin_block_tape(Tape& t, Tape::NodeId x,
                                    const SwinBlockWeights& b, std::size_t height,
                                    std::size_t width, bool shifted) {
  const std::size_t c = t.value(x).cols();
  const std::size_t m = b.attn.window;
  const std::size_t s = shifted && m < height && m < width ? m / 2 : 0;

  Tape::NodeId h1 = t.layernorm(x, t.param(&b.ln1_g), t.param(&b.ln1_b));
  std::vector<Matrix> masks;
  if (s > 0) {
    h1 = t.gather(h1,
                  cyclic_shift_indices(height, width, c,
                                       -static_cast<std::int64_t>(s),
                                       -static_cast<std::int64_t>(s)),
                  height * width, c);
    masks = shifted_window_masks(height, width, m, s);
  }
  Tape::NodeId attn = window_attention_tape(t, h1, b.attn, height, width, masks);
  if (s > 0) {
    attn = t.gather(attn,
                    cyclic_shift_indices(height, width, c,
                                         static_cast<std::int64_t>(s),
                                         static_cast<std::int64_t>(s)),
                    height * width, c);
  }
  x = t.add(x, attn);

  Tape::NodeId h2 = t.layernorm(x, t.param(&b.ln2_g), t.param(&b.ln2_b));
  Tape::NodeId mlp = t.add_bias(detail::linear_t(t, h2, &b.mlp_w1), t.param(&b.mlp_b1));
  mlp = t.gelu(mlp);
  mlp = t.add_bias(t.matmul(mlp, t.transpose_node(t.param(&b.mlp_w2))), t.param(&b.mlp_b2));
  return t.add(x, mlp);
}

// 2x2 neighborhood concatenation (4C) followed by a dense reduction to 2C.
inline Tape::NodeId patch_merging_tape(Tape& t, Tape::NodeId x, std::size_t height,
                                       std::size_t width, const Matrix* w,
                                       const Matrix* bias) {
  if (height % 2 != 0 || width % 2 != 0)
    throw ShapeError("patch_merging: extents must be even");
  const std::size_t c = t.value(x).cols();
  const std::size_t oh = height / 2, ow = width / 2;
  std::vector<std::int64_t> idx;
  idx.reserve(oh * ow * 4 * c);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t xx = 0; xx < ow; ++xx)
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx) {
          const std::size_t tok = (2 * y + dy) * width + (2 * xx + dx);
          for (std::size_t ch = 0; ch < c; ++ch)
            idx.push_back(static_cast<std::int64_t>(tok * c + ch));
        }
  Tape::NodeId cat = t.gather(x, std::move(idx), oh * ow, 4 * c);
  return t.add_bias(detail::linear_t(t, cat, w), t.param(bias));
}

struct StageOutput {
  Tape::NodeId tokens;
  std::size_t height;
  std::size_t width;
};

// Full hierarchical forward; returns one token node per stage.
inline std::vector<StageOutput> backbone_forward_tape(Tape& t,
                                                      const SwinBackbone& bb,
                                                      const Matrix& image) {
  const auto& cfg = bb.cfg;
  if (image.rows() != cfg.image_size || image.cols() != cfg.image_size * cfg.in_channels)
    throw ShapeError("backbone_forward: image " + image.shape_str() +
                     " does not match configured size " +
                     std::to_string(cfg.image_size));
  const std::size_t p = cfg.patch;
  std::size_t extent = cfg.image_size / p;

  // Patch extraction as a constant gather done on the host side.
  Matrix patches(extent * extent, p * p * cfg.in_channels);
  for (std::size_t py = 0; py < extent; ++py)
    for (std::size_t px = 0; px < extent; ++px) {
      const std::size_t row = py * extent + px;
      std::size_t col = 0;
      for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < p; ++dx)
          for (std::size_t ch = 0; ch < cfg.in_channels; ++ch)
            patches(row, col++) =
                image(py * p + dy, (px * p + dx) * cfg.in_channels + ch);
    }
  Tape::NodeId x = t.add_bias(
      detail::linear_t(t, t.constant(std::move(patches)), &bb.patch_embed_w),
      t.param(&bb.patch_embed_b));

  std::vector<StageOutput> outs;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    if (s > 0) {
      x = patch_merging_tape(t, x, extent, extent, &bb.merge_w[s - 1],
                             &bb.merge_b[s - 1]);
      extent /= 2;
    }
    const auto& blocks = bb.stage_blocks[s];
    for (std::size_t d = 0; d < blocks.size(); ++d)
      x = swin_block_tape(t, x, blocks[d], extent, extent, d % 2 == 1);
    outs.push_back({x, extent, extent});
  }
  return outs;
}

// Convenience: plain forward of one attention window without a policy in
// play (used by unit tests against the naive per-head oracle).
inline Matrix window_attention(const Matrix& tokens, const AttentionWeights& w) {
  const std::size_t m = w.window;
  if (tokens.rows() != m * m)
    throw ShapeError("window_attention: expected m^2 tokens");
  Tape t;
  Tape::NodeId x = t.constant(tokens);
  Tape::NodeId y = window_attention_tape(t, x, w, m, m, {});
  return t.value(y);
}

}  // namespace ldet
