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
#ifndef DLAB_MODEL_HPP_
#define DLAB_MODEL_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dlab/attention.hpp"
#include "dlab/autograd.hpp"
#include "dlab/posenc.hpp"
#include "dlab/tensor.hpp"

namespace dlab {

// Token mixer inside every block. Averaging and LePE are added on top of
// whichever is chosen.
enum class BlockAttention { kWindow, kLinear, kFull };
std::string to_string(BlockAttention a);
BlockAttention parse_block_attention(const std::string& name);

// How the last stage is reduced to the classifier input.
enum class Readout { kMeanPool, kFirstToken };
std::string to_string(Readout r);
Readout parse_readout(const std::string& name);

struct ModelConfig {
  std::vector<std::size_t> stage_dims{64, 128, 256, 512};
  std::vector<std::size_t> stage_depths{2, 4, 8, 4};
  std::vector<std::size_t> stage_heads{2, 4, 8, 16};
  std::size_t window = 7;
  double mlp_ratio = 4.0;
  std::size_t patch_size = 4;
  std::size_t in_channels = 3;
  std::size_t image_size = 224;
  std::size_t num_classes = 1000;
  std::size_t lepe_size = 3;
  bool averaging_enabled = true;
  BlockAttention attention_variant = BlockAttention::kWindow;
  Readout readout = Readout::kMeanPool;
  std::uint64_t seed = 42;

  static ModelConfig reference();
  // 64 x 64 input, dims 16/32/64/128, depths 1/1/2/1, heads 1/2/4/8, window 4.
  static ModelConfig toy();

  std::size_t stages() const { return stage_dims.size(); }
  std::size_t hidden_dim(std::size_t stage) const;
  // Throws ConfigError naming the first inconsistent field.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Token grid of every stage for an H x W input. Throws ConfigError naming the
// failing stage when a side does not divide.
std::vector<GridSpec> stage_grids(const ModelConfig& cfg, std::size_t height, std::size_t width);
std::vector<GridSpec> stage_grids(const ModelConfig& cfg);
// Window side used at a stage: cfg.window, or the whole grid when the grid is
// smaller than the window.
std::size_t stage_window(const ModelConfig& cfg, const GridSpec& grid);

// Named learnable tensors in creation order.
class ModelParams {
 public:
  void add(std::string name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  // Throws ConfigError for an unknown name.
  std::size_t index_of(const std::string& name) const;
  const Tensor& operator[](const std::string& name) const;
  Tensor& operator[](const std::string& name);
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor>& values() const { return values_; }
  std::vector<Tensor>& values() { return values_; }
  std::size_t scalar_count() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Seeded initialization; every tensor draws from its own named stream.
ModelParams init_params(const ModelConfig& cfg);
std::size_t parameter_count(const ModelConfig& cfg);
// Zeroes every LePE kernel.
void zero_lepe(ModelParams& params);

// Model parameters bound as tape leaves, looked up by name.
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, const ModelParams& params, bool requires_grad = true);
  const ad::Var& operator[](const std::string& name) const;
  const std::vector<ad::Var>& vars() const { return vars_; }

 private:
  const ModelParams* params_;
  std::vector<ad::Var> vars_;
};

// Per-block observation for tests: the projected values and the token-mixer
// output before the output projection.
struct BlockCapture {
  Tensor v;
  Tensor mixer;
};
using CaptureFn = std::function<void(std::size_t stage, std::size_t block, const BlockCapture&)>;

// Non-overlapping patch_size x patch_size patches of an H x W x C image,
// flattened row-major: (H/p * W/p) x (p * p * C).
Tensor patchify(const Tensor& image, std::size_t patch);

// Token mixer of one block on tokens x (n x C).
ad::Var block_mixer(const ModelConfig& cfg, const BoundParams& p, const std::string& prefix, const ad::Var& x,
                    std::size_t heads, const GridSpec& grid, const CaptureFn& capture = {}, std::size_t stage = 0,
                    std::size_t block = 0);
// Full pre-norm block: x + proj(mixer(LN(x))), then x + MLP(LN(x)).
ad::Var block_forward(const ModelConfig& cfg, const BoundParams& p, std::size_t stage, std::size_t block,
                      const ad::Var& x, const GridSpec& grid, const CaptureFn& capture = {});

// One H x W x C image to 1 x num_classes logits.
ad::Var forward_traced(const ModelConfig& cfg, const BoundParams& p, const Tensor& image,
                       const CaptureFn& capture = {});
// b x H x W x C images to b x num_classes logits.
Tensor forward(const ModelConfig& cfg, const ModelParams& params, const Tensor& images,
               const CaptureFn& capture = {});

// Frobenius norm of d out_i / d x_j for the first block of stage 1, on seeded
// random tokens, for every j. Returned as a height x width map.
Tensor receptive_field_map(const ModelConfig& cfg, const ModelParams& params, std::size_t token_i);
double receptive_field_probe(const ModelConfig& cfg, const ModelParams& params, std::size_t token_i,
                             std::size_t token_j);

// "Global majority": every patch is gray, red or blue plus small noise. The
// top-left window is always gray; among the remaining patches the label is
// the majority color, with a minority count of at most minority_max.
struct SyntheticTask {
  std::size_t image_size = 32;
  std::size_t patch = 4;
  std::size_t window = 4;
  std::size_t train_size = 256;
  std::size_t val_size = 256;
  std::size_t minority_min = 8;
  std::size_t minority_max = 18;
  double noise = 0.05;

  struct Sample {
    Tensor image;  // H x W x 3
    std::size_t label = 0;
  };
  // Balanced, seeded split; split is "train" or "val".
  std::vector<Sample> generate(std::uint64_t seed, const std::string& split, std::size_t count) const;
  // Single-stage, single-block model reading out token 0.
  ModelConfig model_config(bool averaging, std::uint64_t seed) const;
};

struct TrainOptions {
  int epochs = 30;
  std::size_t batch_size = 16;
  double lr = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 13;
};

struct EpochMetrics {
  int epoch = 0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;  // epoch 0 is the untrained model
  ModelParams best_params;
  double best_val_acc = 0.0;
  int best_epoch = 0;
};

// Deterministic SGD with momentum and a cosine-decayed learning rate.
// Throws TrainingError on a non-finite loss.
TrainResult train_toy(const ModelConfig& cfg, const SyntheticTask& task, const TrainOptions& opts);
double evaluate_accuracy(const ModelConfig& cfg, const ModelParams& params,
                         const std::vector<SyntheticTask::Sample>& samples);

}  // namespace dlab

#endif  // DLAB_MODEL_HPP_
