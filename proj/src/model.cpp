/* Copyright 2026 The Dispersion Lab Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#include "dlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dlab/errors.hpp"
#include "dlab/rng.hpp"
#include "dlab/traced.hpp"

namespace dlab {

std::string to_string(BlockAttention a) {
  switch (a) {
    case BlockAttention::kWindow:
      return "window";
    case BlockAttention::kLinear:
      return "linear";
    case BlockAttention::kFull:
      return "full";
  }
  return "?";
}

BlockAttention parse_block_attention(const std::string& name) {
  if (name == "window") return BlockAttention::kWindow;
  if (name == "linear") return BlockAttention::kLinear;
  if (name == "full") return BlockAttention::kFull;
  throw ConfigError("unknown attention variant '" + name + "' (window, linear, full)");
}

std::string to_string(Readout r) { return r == Readout::kMeanPool ? "mean_pool" : "first_token"; }

Readout parse_readout(const std::string& name) {
  if (name == "mean_pool") return Readout::kMeanPool;
  if (name == "first_token") return Readout::kFirstToken;
  throw ConfigError("unknown readout '" + name + "' (mean_pool, first_token)");
}

ModelConfig ModelConfig::reference() { return {}; }

ModelConfig ModelConfig::toy() {
  ModelConfig cfg;
  cfg.stage_dims = {16, 32, 64, 128};
  cfg.stage_depths = {1, 1, 2, 1};
  cfg.stage_heads = {1, 2, 4, 8};
  cfg.window = 4;
  cfg.image_size = 64;
  cfg.num_classes = 10;
  return cfg;
}

std::size_t ModelConfig::hidden_dim(std::size_t stage) const {
  return static_cast<std::size_t>(std::lround(static_cast<double>(stage_dims.at(stage)) * mlp_ratio));
}

void ModelConfig::validate() const {
  if (stage_dims.empty()) throw ConfigError("model config: at least one stage is required");
  if (stage_depths.size() != stage_dims.size() || stage_heads.size() != stage_dims.size()) {
    throw ConfigError("model config: stage_dims, stage_depths and stage_heads differ in length");
  }
  for (std::size_t s = 0; s < stages(); ++s) {
    const std::string where = "model config: stage " + std::to_string(s + 1) + ": ";
    if (stage_dims[s] == 0 || stage_heads[s] == 0) throw ConfigError(where + "dim and heads must be positive");
    if (stage_dims[s] % stage_heads[s] != 0) throw ConfigError(where + "heads must divide the dim");
    if ((stage_dims[s] / stage_heads[s]) % 2 != 0) throw ConfigError(where + "head dim must be even for RoPE");
    if (hidden_dim(s) == 0) throw ConfigError(where + "mlp_ratio leaves no hidden units");
  }
  if (window == 0) throw ConfigError("model config: window must be positive");
  if (patch_size == 0) throw ConfigError("model config: patch_size must be positive");
  if (in_channels == 0) throw ConfigError("model config: in_channels must be positive");
  if (num_classes == 0) throw ConfigError("model config: num_classes must be positive");
  if (lepe_size % 2 == 0) throw ConfigError("model config: lepe_size must be odd");
  if (!(mlp_ratio > 0.0)) throw ConfigError("model config: mlp_ratio must be positive");
}

std::size_t stage_window(const ModelConfig& cfg, const GridSpec& grid) {
  return std::min({cfg.window, grid.height, grid.width});
}

std::vector<GridSpec> stage_grids(const ModelConfig& cfg, std::size_t height, std::size_t width) {
  cfg.validate();
  std::vector<GridSpec> grids;
  std::size_t factor = cfg.patch_size;
  for (std::size_t s = 0; s < cfg.stages(); ++s, factor *= 2) {
    const std::string where = "stage " + std::to_string(s + 1) + ": ";
    if (height % factor != 0 || width % factor != 0) {
      throw ConfigError(where + "input " + std::to_string(height) + "x" + std::to_string(width) +
                        " is not divisible by " + std::to_string(factor));
    }
    const GridSpec grid = GridSpec::grid(height / factor, width / factor);
    const std::size_t w = stage_window(cfg, grid);
    if (grid.height % w != 0 || grid.width % w != 0) {
      throw ConfigError(where + "grid " + std::to_string(grid.height) + "x" + std::to_string(grid.width) +
                        " is not divisible by window " + std::to_string(w));
    }
    grids.push_back(grid);
  }
  return grids;
}

std::vector<GridSpec> stage_grids(const ModelConfig& cfg) { return stage_grids(cfg, cfg.image_size, cfg.image_size); }

void ModelParams::add(std::string name, Tensor value) {
  if (contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
  index_.emplace(name, names_.size());
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

std::size_t ModelParams::index_of(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ModelParams::operator[](const std::string& name) const { return values_[index_of(name)]; }
Tensor& ModelParams::operator[](const std::string& name) { return values_[index_of(name)]; }

std::size_t ModelParams::scalar_count() const {
  std::size_t total = 0;
  for (const auto& v : values_) total += v.size();
  return total;
}

namespace {

std::string block_prefix(std::size_t stage, std::size_t block) {
  return "s" + std::to_string(stage + 1) + ".b" + std::to_string(block) + ".";
}

std::string down_prefix(std::size_t stage) { return "s" + std::to_string(stage + 1) + ".down."; }

// Shape-only parameter layout; init_params fills values, parameter_count sums.
template <typename Sink>
void visit_layout(const ModelConfig& cfg, Sink&& sink) {
  cfg.validate();
  const std::size_t k = cfg.lepe_size;
  const std::size_t c1 = cfg.stage_dims[0];
  const std::size_t patch_in = cfg.patch_size * cfg.patch_size * cfg.in_channels;
  sink("stem.w", Shape{patch_in, c1}, patch_in);
  sink("stem.b", Shape{1, c1}, 0);
  sink("stem.norm.g", Shape{1, c1}, 0);
  sink("stem.norm.b", Shape{1, c1}, 0);
  for (std::size_t s = 0; s < cfg.stages(); ++s) {
    const std::size_t c = cfg.stage_dims[s];
    if (s > 0) {
      const std::size_t prev = 4 * cfg.stage_dims[s - 1];
      sink(down_prefix(s) + "norm.g", Shape{1, prev}, 0);
      sink(down_prefix(s) + "norm.b", Shape{1, prev}, 0);
      sink(down_prefix(s) + "w", Shape{prev, c}, prev);
    }
    const std::size_t hidden = cfg.hidden_dim(s);
    for (std::size_t b = 0; b < cfg.stage_depths[s]; ++b) {
      const std::string p = block_prefix(s, b);
      sink(p + "norm1.g", Shape{1, c}, 0);
      sink(p + "norm1.b", Shape{1, c}, 0);
      for (const char* m : {"wq", "wk", "wv"}) sink(p + "attn." + m, Shape{c, c}, c);
      for (const char* m : {"bq", "bk", "bv"}) sink(p + "attn." + m, Shape{1, c}, 0);
      sink(p + "attn.lepe", Shape{c, k, k}, k * k);
      sink(p + "attn.proj.w", Shape{c, c}, c);
      sink(p + "attn.proj.b", Shape{1, c}, 0);
      sink(p + "norm2.g", Shape{1, c}, 0);
      sink(p + "norm2.b", Shape{1, c}, 0);
      sink(p + "mlp.fc1.w", Shape{c, hidden}, c);
      sink(p + "mlp.fc1.b", Shape{1, hidden}, 0);
      sink(p + "mlp.fc2.w", Shape{hidden, c}, hidden);
      sink(p + "mlp.fc2.b", Shape{1, c}, 0);
    }
  }
  const std::size_t last = cfg.stage_dims.back();
  sink("head.norm.g", Shape{1, last}, 0);
  sink("head.norm.b", Shape{1, last}, 0);
  sink("head.w", Shape{last, cfg.num_classes}, last);
  sink("head.b", Shape{1, cfg.num_classes}, 0);
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg) {
  ModelParams params;
  visit_layout(cfg, [&](const std::string& name, const Shape& shape, std::size_t fan_in) {
    if (fan_in > 0) {
      Rng rng = Rng::keyed(cfg.seed, name);
      params.add(name, rng.normal_tensor(shape, 1.0 / std::sqrt(static_cast<double>(fan_in))));
    } else if (ends_with(name, ".g")) {
      params.add(name, Tensor::ones(shape));
    } else {
      params.add(name, Tensor::zeros(shape));
    }
  });
  return params;
}

std::size_t parameter_count(const ModelConfig& cfg) {
  std::size_t total = 0;
  visit_layout(cfg, [&](const std::string&, const Shape& shape, std::size_t) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    total += n;
  });
  return total;
}

void zero_lepe(ModelParams& params) {
  for (std::size_t i = 0; i < params.names().size(); ++i) {
    if (ends_with(params.names()[i], ".attn.lepe")) params.values()[i] = Tensor::zeros(params.values()[i].shape());
  }
}

BoundParams::BoundParams(ad::Tape& tape, const ModelParams& params, bool requires_grad) : params_(&params) {
  vars_.reserve(params.values().size());
  for (const auto& v : params.values()) vars_.push_back(tape.leaf(v, requires_grad));
}

const ad::Var& BoundParams::operator[](const std::string& name) const { return vars_[params_->index_of(name)]; }

Tensor patchify(const Tensor& image, std::size_t patch) {
  if (image.rank() != 3) throw DimensionError("patchify: expected an H x W x C image");
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ConfigError("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                      " is not divisible by patch " + std::to_string(patch));
  }
  const std::size_t gh = h / patch, gw = w / patch;
  Tensor out({gh * gw, patch * patch * c});
  for (std::size_t r = 0; r < gh; ++r)
    for (std::size_t q = 0; q < gw; ++q) {
      auto row = out.row(r * gw + q);
      std::size_t at = 0;
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          for (std::size_t ch = 0; ch < c; ++ch) row[at++] = image[((r * patch + y) * w + q * patch + x) * c + ch];
    }
  return out;
}

ad::Var block_mixer(const ModelConfig& cfg, const BoundParams& p, const std::string& prefix, const ad::Var& x,
                    std::size_t heads, const GridSpec& grid, const CaptureFn& capture, std::size_t stage,
                    std::size_t block) {
  const std::string a = prefix + "attn.";
  const std::size_t d = x.value().cols();
  const std::size_t hd = d / heads;
  const double qk_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  ad::Var out, v;

  if (cfg.attention_variant == BlockAttention::kWindow) {
    ad::TracedSemaParams sp;
    sp.wq = p[a + "wq"];
    sp.wk = p[a + "wk"];
    sp.wv = p[a + "wv"];
    sp.bq = p[a + "bq"];
    sp.bk = p[a + "bk"];
    sp.bv = p[a + "bv"];
    sp.lepe_taps = p[a + "lepe"];
    sp.heads = heads;
    sp.qk_scale = qk_scale;
    sp.averaging = cfg.averaging_enabled;
    out = ad::sema_attention_full(x, sp, WindowSpec{stage_window(cfg, grid)}, grid);
    if (capture) v = ad::add_row(ad::matmul(x, p[a + "wv"]), p[a + "bv"]);
  } else {
    const ad::Var q = ad::add_row(ad::matmul(x, p[a + "wq"]), p[a + "bq"]);
    const ad::Var k = ad::add_row(ad::matmul(x, p[a + "wk"]), p[a + "bk"]);
    v = ad::add_row(ad::matmul(x, p[a + "wv"]), p[a + "bv"]);
    const Tensor angles = rope_angles(grid_positions(grid), hd, grid.planar);
    std::vector<ad::Var> parts;
    for (std::size_t h = 0; h < heads; ++h) {
      const ad::Var qh = heads == 1 ? q : ad::slice_cols(q, h * hd, hd);
      const ad::Var kh = heads == 1 ? k : ad::slice_cols(k, h * hd, hd);
      const ad::Var vh = heads == 1 ? v : ad::slice_cols(v, h * hd, hd);
      if (cfg.attention_variant == BlockAttention::kFull) {
        parts.push_back(ad::softmax_attention(ad::scale(ad::rotate(qh, angles), qk_scale), ad::rotate(kh, angles), vh));
      } else {
        parts.push_back(ad::linear_attention(qh, kh, vh));
      }
    }
    out = ad::add(heads == 1 ? parts.front() : ad::concat_cols(parts), ad::depthwise_conv(v, p[a + "lepe"], grid));
    if (cfg.averaging_enabled) out = ad::add(out, ad::homogeneous_mix(v));
  }
  if (capture) capture(stage, block, BlockCapture{v.value(), out.value()});
  return out;
}

ad::Var block_forward(const ModelConfig& cfg, const BoundParams& p, std::size_t stage, std::size_t block,
                      const ad::Var& x, const GridSpec& grid, const CaptureFn& capture) {
  const std::string pre = block_prefix(stage, block);
  const ad::Var h = ad::layer_norm(x, p[pre + "norm1.g"], p[pre + "norm1.b"]);
  const ad::Var mixed = block_mixer(cfg, p, pre, h, cfg.stage_heads[stage], grid, capture, stage, block);
  const ad::Var attn = ad::add_row(ad::matmul(mixed, p[pre + "attn.proj.w"]), p[pre + "attn.proj.b"]);
  const ad::Var y = ad::add(x, attn);
  const ad::Var h2 = ad::layer_norm(y, p[pre + "norm2.g"], p[pre + "norm2.b"]);
  const ad::Var hidden = ad::gelu(ad::add_row(ad::matmul(h2, p[pre + "mlp.fc1.w"]), p[pre + "mlp.fc1.b"]));
  return ad::add(y, ad::add_row(ad::matmul(hidden, p[pre + "mlp.fc2.w"]), p[pre + "mlp.fc2.b"]));
}

namespace {

// 2 x 2 patch merge: concatenates the four tokens of every 2 x 2 cell.
ad::Var merge_patches(const ad::Var& x, const GridSpec& grid) {
  const std::size_t gh = grid.height / 2, gw = grid.width / 2;
  std::vector<ad::Var> parts;
  for (const auto& [dy, dx] : {std::pair<std::size_t, std::size_t>{0, 0}, {1, 0}, {0, 1}, {1, 1}}) {
    std::vector<std::size_t> index;
    index.reserve(gh * gw);
    for (std::size_t r = 0; r < gh; ++r)
      for (std::size_t c = 0; c < gw; ++c) index.push_back((2 * r + dy) * grid.width + 2 * c + dx);
    parts.push_back(ad::gather_rows(x, index));
  }
  return ad::concat_cols(parts);
}

}  // namespace

ad::Var forward_traced(const ModelConfig& cfg, const BoundParams& p, const Tensor& image, const CaptureFn& capture) {
  if (image.rank() != 3 || image.dim(2) != cfg.in_channels) {
    throw DimensionError("forward: expected an H x W x " + std::to_string(cfg.in_channels) + " image");
  }
  const auto grids = stage_grids(cfg, image.dim(0), image.dim(1));
  ad::Tape& tape = *p.vars().front().tape();
  const ad::Var tokens = tape.constant(patchify(image, cfg.patch_size));
  ad::Var x = ad::add_row(ad::matmul(tokens, p["stem.w"]), p["stem.b"]);
  x = ad::layer_norm(x, p["stem.norm.g"], p["stem.norm.b"]);
  for (std::size_t s = 0; s < cfg.stages(); ++s) {
    if (s > 0) {
      const std::string d = down_prefix(s);
      x = ad::layer_norm(merge_patches(x, grids[s - 1]), p[d + "norm.g"], p[d + "norm.b"]);
      x = ad::matmul(x, p[d + "w"]);
    }
    for (std::size_t b = 0; b < cfg.stage_depths[s]; ++b) x = block_forward(cfg, p, s, b, x, grids[s], capture);
  }
  x = ad::layer_norm(x, p["head.norm.g"], p["head.norm.b"]);
  const ad::Var pooled = cfg.readout == Readout::kMeanPool ? ad::mean_rows(x) : ad::slice_rows(x, 0, 1);
  return ad::add_row(ad::matmul(pooled, p["head.w"]), p["head.b"]);
}

Tensor forward(const ModelConfig& cfg, const ModelParams& params, const Tensor& images, const CaptureFn& capture) {
  if (images.rank() != 4) throw DimensionError("forward: expected b x H x W x C images");
  const std::size_t b = images.dim(0);
  const Shape image_shape{images.dim(1), images.dim(2), images.dim(3)};
  const std::size_t stride = images.size() / b;
  Tensor logits({b, cfg.num_classes});
  for (std::size_t i = 0; i < b; ++i) {
    const auto src = images.data().subspan(i * stride, stride);
    const Tensor image(image_shape, std::vector<double>(src.begin(), src.end()));
    ad::Tape tape(/*grad_enabled=*/false);
    const BoundParams bound(tape, params, false);
    const ad::Var out = forward_traced(cfg, bound, image, capture);
    std::copy(out.value().data().begin(), out.value().data().end(), logits.row(i).begin());
  }
  return logits;
}

Tensor receptive_field_map(const ModelConfig& cfg, const ModelParams& params, std::size_t token_i) {
  const GridSpec grid = stage_grids(cfg).front();
  if (cfg.stage_depths.front() == 0) throw ConfigError("receptive field probe: stage 1 has no blocks");
  const std::size_t n = grid.tokens(), c = cfg.stage_dims.front();
  if (token_i >= n) throw DimensionError("receptive field probe: token index out of range");
  Rng rng = Rng::keyed(cfg.seed, "probe");
  ad::Tape tape;
  const BoundParams bound(tape, params, false);
  const ad::Var x = tape.leaf(rng.normal_tensor({n, c}));
  const ad::Var out = block_forward(cfg, bound, 0, 0, x, grid);
  std::vector<double> sq(n, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    Tensor seed({n, c});
    seed(token_i, ch) = 1.0;
    const Tensor g = tape.backward(out, seed)[x];
    for (std::size_t j = 0; j < n; ++j)
      for (double v : g.row(j)) sq[j] += v * v;
  }
  Tensor map({grid.height, grid.width});
  for (std::size_t j = 0; j < n; ++j) map[j] = std::sqrt(sq[j]);
  return map;
}

double receptive_field_probe(const ModelConfig& cfg, const ModelParams& params, std::size_t token_i,
                             std::size_t token_j) {
  const Tensor map = receptive_field_map(cfg, params, token_i);
  if (token_j >= map.size()) throw DimensionError("receptive field probe: token index out of range");
  return map[token_j];
}

namespace {

constexpr double kGray[3] = {0.5, 0.5, 0.5};
constexpr double kColors[2][3] = {{0.9, 0.1, 0.1}, {0.1, 0.1, 0.9}};

}  // namespace

std::vector<SyntheticTask::Sample> SyntheticTask::generate(std::uint64_t seed, const std::string& split,
                                                           std::size_t count) const {
  if (patch == 0 || image_size % patch != 0) throw ConfigError("synthetic task: image_size must divide by patch");
  const std::size_t g = image_size / patch;
  if (window == 0 || g % window != 0) throw ConfigError("synthetic task: grid must divide by window");
  std::vector<std::size_t> colored;
  for (std::size_t r = 0; r < g; ++r)
    for (std::size_t c = 0; c < g; ++c)
      if (r >= window || c >= window) colored.push_back(r * g + c);
  if (minority_min > minority_max || 2 * minority_max >= colored.size()) {
    throw ConfigError("synthetic task: minority range must stay below half of the colored patches");
  }

  Rng rng = Rng::keyed(seed, "task/" + split);
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t label = s % 2;
    const std::size_t minority = minority_min + rng.index(minority_max - minority_min + 1);
    std::vector<std::size_t> order = colored;
    for (std::size_t i = 0; i < minority; ++i) std::swap(order[i], order[i + rng.index(order.size() - i)]);
    std::vector<const double*> color(g * g, kGray);
    for (std::size_t i = 0; i < order.size(); ++i) color[order[i]] = kColors[i < minority ? 1 - label : label];

    Tensor image({image_size, image_size, 3});
    for (std::size_t y = 0; y < image_size; ++y)
      for (std::size_t x = 0; x < image_size; ++x) {
        const double* col = color[(y / patch) * g + x / patch];
        for (std::size_t ch = 0; ch < 3; ++ch) image[(y * image_size + x) * 3 + ch] = col[ch] + noise * rng.normal();
      }
    out.push_back({std::move(image), label});
  }
  return out;
}

ModelConfig SyntheticTask::model_config(bool averaging, std::uint64_t seed) const {
  ModelConfig cfg;
  cfg.stage_dims = {16};
  cfg.stage_depths = {1};
  cfg.stage_heads = {1};
  cfg.window = window;
  cfg.patch_size = patch;
  cfg.image_size = image_size;
  cfg.num_classes = 2;
  cfg.averaging_enabled = averaging;
  cfg.readout = Readout::kFirstToken;
  cfg.seed = seed;
  return cfg;
}

namespace {

std::size_t argmax(const Tensor& row) {
  return static_cast<std::size_t>(std::max_element(row.data().begin(), row.data().end()) - row.data().begin());
}

struct Evaluation {
  double accuracy = 0.0;
  double loss = 0.0;
};

Evaluation evaluate(const ModelConfig& cfg, const ModelParams& params,
                    const std::vector<SyntheticTask::Sample>& samples) {
  Evaluation e;
  for (const auto& s : samples) {
    ad::Tape tape(/*grad_enabled=*/false);
    const BoundParams bound(tape, params, false);
    const ad::Var logits = forward_traced(cfg, bound, s.image);
    e.loss += ad::cross_entropy(logits, s.label).value()[0];
    if (argmax(logits.value()) == s.label) e.accuracy += 1.0;
  }
  e.accuracy /= static_cast<double>(samples.size());
  e.loss /= static_cast<double>(samples.size());
  return e;
}

}  // namespace

double evaluate_accuracy(const ModelConfig& cfg, const ModelParams& params,
                         const std::vector<SyntheticTask::Sample>& samples) {
  return evaluate(cfg, params, samples).accuracy;
}

TrainResult train_toy(const ModelConfig& cfg, const SyntheticTask& task, const TrainOptions& opts) {
  if (opts.epochs < 0 || opts.batch_size == 0) throw ConfigError("train_toy: epochs >= 0 and batch_size > 0 required");
  const auto train = task.generate(opts.seed, "train", task.train_size);
  const auto val = task.generate(opts.seed, "val", task.val_size);
  ModelParams params = init_params(cfg);
  stage_grids(cfg, task.image_size, task.image_size);

  TrainResult result;
  const Evaluation start_train = evaluate(cfg, params, train);
  const Evaluation start_val = evaluate(cfg, params, val);
  result.history.push_back({0, start_train.accuracy, start_val.accuracy, start_train.loss});
  result.best_params = params;
  result.best_val_acc = start_val.accuracy;

  std::vector<Tensor> velocity;
  for (const auto& v : params.values()) velocity.push_back(Tensor::zeros(v.shape()));
  const std::size_t steps_per_epoch = (train.size() + opts.batch_size - 1) / opts.batch_size;
  const double total_steps = static_cast<double>(steps_per_epoch * static_cast<std::size_t>(opts.epochs));
  std::size_t step = 0;

  std::vector<std::size_t> order(train.size());
  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle = Rng::keyed(opts.seed, "shuffle", static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += opts.batch_size) {
      const std::size_t end = std::min(order.size(), begin + opts.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(end - begin);
      std::vector<Tensor> grads;
      for (const auto& v : params.values()) grads.push_back(Tensor::zeros(v.shape()));
      for (std::size_t i = begin; i < end; ++i) {
        const auto& sample = train[order[i]];
        ad::Tape tape;
        const BoundParams bound(tape, params);
        const ad::Var logits = forward_traced(cfg, bound, sample.image);
        const ad::Var loss = ad::cross_entropy(logits, sample.label);
        const double value = loss.value()[0];
        if (!std::isfinite(value)) throw TrainingError("train_toy: non-finite loss", epoch);
        loss_sum += value;
        if (argmax(logits.value()) == sample.label) ++correct;
        const ad::Gradients g = tape.backward(loss);
        for (std::size_t k = 0; k < grads.size(); ++k) {
          if (!g.has(bound.vars()[k])) continue;
          const Tensor gk = g[bound.vars()[k]];
          for (std::size_t e = 0; e < gk.size(); ++e) grads[k][e] += gk[e] * inv_batch;
        }
      }
      const double lr = 0.5 * opts.lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps));
      for (std::size_t k = 0; k < grads.size(); ++k) {
        Tensor& p = params.values()[k];
        for (std::size_t e = 0; e < p.size(); ++e) {
          velocity[k][e] = opts.momentum * velocity[k][e] + grads[k][e];
          p[e] -= lr * velocity[k][e];
        }
      }
      ++step;
    }
    const Evaluation v = evaluate(cfg, params, val);
    result.history.push_back({epoch, static_cast<double>(correct) / static_cast<double>(train.size()), v.accuracy,
                              loss_sum / static_cast<double>(train.size())});
    if (v.accuracy > result.best_val_acc) {
      result.best_val_acc = v.accuracy;
      result.best_epoch = epoch;
      result.best_params = params;
    }
  }
  return result;
}

}  // namespace dlab
