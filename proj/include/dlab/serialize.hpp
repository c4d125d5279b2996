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
#ifndef DLAB_SERIALIZE_HPP_
#define DLAB_SERIALIZE_HPP_

#include <filesystem>
#include <string>

#include "json.hpp"

#include "dlab/analysis.hpp"
#include "dlab/attention.hpp"
#include "dlab/model.hpp"
#include "dlab/posenc.hpp"
#include "dlab/ssm.hpp"
#include "dlab/tensor.hpp"

// JSON forms picked up by nlohmann::json through argument-dependent lookup.
// Malformed documents raise ConfigError.
namespace dlab {

using nlohmann::json;

void to_json(json& j, const Tensor& t);  // {"shape": [...], "data": [...]}
void from_json(const json& j, Tensor& t);
void to_json(json& j, const KernelSpec& k);  // {"phi": "exp", "psi": "identity", "epsilon": 1e-6}
void from_json(const json& j, KernelSpec& k);
void to_json(json& j, const WindowSpec& w);  // {"w": 7, "scheme": "blocked"}
void from_json(const json& j, WindowSpec& w);
void to_json(json& j, const DepthwiseKernel& k);
void from_json(const json& j, DepthwiseKernel& k);
void to_json(json& j, const SsmParams& p);
void from_json(const json& j, SsmParams& p);
void to_json(json& j, const DispersionReport& r);
void to_json(json& j, const ModelConfig& c);
void from_json(const json& j, ModelConfig& c);

// n,max_coeff,min_coeff,lower,upper
std::string dispersion_csv(const DispersionReport& r);
// epoch,train_acc,val_acc,loss
std::string metrics_csv(const std::vector<EpochMetrics>& history);

json read_json_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

// Checkpoint: <stem>.json lists config and tensors (name, shape, offset);
// <stem>.bin holds the float64 values back to back, little-endian.
void save_checkpoint(const std::filesystem::path& index_path, const ModelConfig& cfg, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& index_path, ModelConfig* cfg = nullptr);

}  // namespace dlab

#endif  // DLAB_SERIALIZE_HPP_
