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
#include "dlab/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "dlab/errors.hpp"

namespace dlab {

namespace {

template <typename T>
T field(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw ConfigError(std::string("missing JSON field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad JSON field '") + key + "': " + e.what());
  }
}

template <typename T>
T field_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? field<T>(j, key) : fallback;
}

Normalizer parse_normalizer(const json& j) {
  const auto phi = field<std::string>(j, "phi");
  if (phi == "exp") return Normalizer::exp();
  if (phi == "exp_temperature") return Normalizer::exp_temperature(field<double>(j, "theta"));
  if (phi == "identity") return Normalizer::identity();
  if (phi == "power") return Normalizer::power(field<double>(j, "p"));
  throw ConfigError("unknown kernel phi '" + phi + "'");
}

FeatureMap parse_feature(const std::string& name, int p) {
  if (name == "identity") return FeatureMap::identity();
  if (name == "elu_plus_one") return FeatureMap::elu_plus_one();
  if (name == "focused") return FeatureMap::focused(p);
  throw ConfigError("unknown feature map '" + name + "'");
}

std::string csv_number(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

void to_json(json& j, const Tensor& t) { j = json{{"shape", t.shape()}, {"data", t.values()}}; }

void from_json(const json& j, Tensor& t) {
  t = Tensor(field<Shape>(j, "shape"), field<std::vector<double>>(j, "data"));
}

void to_json(json& j, const KernelSpec& k) {
  j = json{{"phi", k.phi.name()}, {"epsilon", k.epsilon}};
  if (k.phi.kind == NormalizerKind::kExpTemperature) j["theta"] = k.phi.theta;
  if (k.phi.kind == NormalizerKind::kPower) j["p"] = k.phi.p;
  if (k.psi_q == k.psi_k) {
    j["psi"] = k.psi_q.name();
  } else {
    j["psi_q"] = k.psi_q.name();
    j["psi_k"] = k.psi_k.name();
  }
  if (k.psi_q.kind == FeatureKind::kFocused || k.psi_k.kind == FeatureKind::kFocused) {
    j["focus_p"] = k.psi_q.kind == FeatureKind::kFocused ? k.psi_q.p : k.psi_k.p;
  }
}

void from_json(const json& j, KernelSpec& k) {
  k.phi = parse_normalizer(j);
  const int p = field_or<int>(j, "focus_p", 3);
  const auto psi = field_or<std::string>(j, "psi", "identity");
  k.psi_q = parse_feature(field_or<std::string>(j, "psi_q", psi), p);
  k.psi_k = parse_feature(field_or<std::string>(j, "psi_k", psi), p);
  k.epsilon = field_or<double>(j, "epsilon", 1e-6);
  k.validate();
}

void to_json(json& j, const WindowSpec& w) {
  const char* scheme = w.scheme == WindowScheme::kBlocked ? "blocked"
                       : w.scheme == WindowScheme::kSliding ? "sliding"
                                                            : "dilated";
  j = json{{"w", w.w}, {"scheme", scheme}};
}

void from_json(const json& j, WindowSpec& w) {
  w.w = field<std::size_t>(j, "w");
  const auto scheme = field_or<std::string>(j, "scheme", "blocked");
  if (scheme == "blocked") {
    w.scheme = WindowScheme::kBlocked;
  } else if (scheme == "sliding") {
    w.scheme = WindowScheme::kSliding;
  } else if (scheme == "dilated") {
    w.scheme = WindowScheme::kDilated;
  } else {
    throw ConfigError("unknown window scheme '" + scheme + "'");
  }
}

void to_json(json& j, const DepthwiseKernel& k) {
  j = json{{"size", k.size}, {"channels", k.channels}, {"taps", k.taps}};
}

void from_json(const json& j, DepthwiseKernel& k) {
  k.size = field<std::size_t>(j, "size");
  k.channels = field<std::size_t>(j, "channels");
  k.taps = field<std::vector<double>>(j, "taps");
  k.validate();
}

void to_json(json& j, const SsmParams& p) {
  j = json{{"a_tilde", p.a_tilde}, {"b", p.b}, {"c_out", p.c_out}, {"d", p.d}, {"delta", p.delta}, {"h0", p.h0}};
}

void from_json(const json& j, SsmParams& p) {
  p.a_tilde = field<std::vector<Tensor>>(j, "a_tilde");
  p.b = field<std::vector<Tensor>>(j, "b");
  p.c_out = field<std::vector<Tensor>>(j, "c_out");
  p.d = field<Tensor>(j, "d");
  p.delta = field<Tensor>(j, "delta");
  p.h0 = field<Tensor>(j, "h0");
  p.validate();
}

void to_json(json& j, const DispersionReport& r) {
  j = json{{"variant", to_string(r.variant)},
           {"n", r.n_values},
           {"max_coeff", r.max_coeff},
           {"min_coeff", r.min_coeff},
           {"median_max_coeff", r.median_max_coeff},
           {"lower", r.lower_bound},
           {"upper", r.upper_bound},
           {"slope", r.slope},
           {"samples", r.samples},
           {"seed", r.seed},
           {"coefficients_checked", r.coefficients_checked}};
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"stage_dims", c.stage_dims},
           {"stage_depths", c.stage_depths},
           {"stage_heads", c.stage_heads},
           {"window", c.window},
           {"mlp_ratio", c.mlp_ratio},
           {"patch_size", c.patch_size},
           {"in_channels", c.in_channels},
           {"image_size", c.image_size},
           {"num_classes", c.num_classes},
           {"lepe_size", c.lepe_size},
           {"averaging_enabled", c.averaging_enabled},
           {"attention_variant", to_string(c.attention_variant)},
           {"readout", to_string(c.readout)},
           {"seed", c.seed}};
}

void from_json(const json& j, ModelConfig& c) {
  const ModelConfig d;
  c.stage_dims = field_or(j, "stage_dims", d.stage_dims);
  c.stage_depths = field_or(j, "stage_depths", d.stage_depths);
  c.stage_heads = field_or(j, "stage_heads", d.stage_heads);
  c.window = field_or(j, "window", d.window);
  c.mlp_ratio = field_or(j, "mlp_ratio", d.mlp_ratio);
  c.patch_size = field_or(j, "patch_size", d.patch_size);
  c.in_channels = field_or(j, "in_channels", d.in_channels);
  c.image_size = field_or(j, "image_size", d.image_size);
  c.num_classes = field_or(j, "num_classes", d.num_classes);
  c.lepe_size = field_or(j, "lepe_size", d.lepe_size);
  c.averaging_enabled = field_or(j, "averaging_enabled", d.averaging_enabled);
  c.attention_variant = parse_block_attention(field_or<std::string>(j, "attention_variant", "window"));
  c.readout = parse_readout(field_or<std::string>(j, "readout", "mean_pool"));
  c.seed = field_or(j, "seed", d.seed);
  c.validate();
}

std::string dispersion_csv(const DispersionReport& r) {
  std::string out = "n,max_coeff,min_coeff,lower,upper\n";
  for (std::size_t i = 0; i < r.n_values.size(); ++i) {
    out += std::to_string(r.n_values[i]) + "," + csv_number(r.max_coeff[i]) + "," + csv_number(r.min_coeff[i]) + "," +
           csv_number(r.lower_bound[i]) + "," + csv_number(r.upper_bound[i]) + "\n";
  }
  return out;
}

std::string metrics_csv(const std::vector<EpochMetrics>& history) {
  std::string out = "epoch,train_acc,val_acc,loss\n";
  for (const auto& m : history) {
    out += std::to_string(m.epoch) + "," + csv_number(m.train_acc) + "," + csv_number(m.val_acc) + "," +
           csv_number(m.loss) + "\n";
  }
  return out;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

void save_checkpoint(const std::filesystem::path& index_path, const ModelConfig& cfg, const ModelParams& params) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  std::filesystem::path bin_path = index_path;
  bin_path.replace_extension(".bin");
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw ConfigError("cannot write " + bin_path.string());

  json tensors = json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < params.names().size(); ++i) {
    const Tensor& t = params.values()[i];
    tensors.push_back({{"name", params.names()[i]}, {"shape", t.shape()}, {"offset", offset}});
    bin.write(reinterpret_cast<const char*>(t.values().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    offset += t.size();
  }
  const json index{{"format", "dlab-checkpoint"},
                   {"version", 1},
                   {"dtype", "float64-le"},
                   {"weights", bin_path.filename().string()},
                   {"config", cfg},
                   {"tensors", tensors}};
  write_text_file(index_path, index.dump(2) + "\n");
}

ModelParams load_checkpoint(const std::filesystem::path& index_path, ModelConfig* cfg) {
  const json index = read_json_file(index_path);
  if (field<std::string>(index, "format") != "dlab-checkpoint") throw ConfigError("not a checkpoint index");
  if (cfg) *cfg = field<ModelConfig>(index, "config");
  const auto bin_path = index_path.parent_path() / field<std::string>(index, "weights");
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw ConfigError("cannot open " + bin_path.string());
  const std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  ModelParams params;
  for (const auto& entry : field<json>(index, "tensors")) {
    const auto shape = field<Shape>(entry, "shape");
    const auto offset = field<std::size_t>(entry, "offset");
    std::size_t count = 1;
    for (std::size_t d : shape) count *= d;
    if ((offset + count) * sizeof(double) > bytes.size()) throw ConfigError("checkpoint weights are truncated");
    std::vector<double> data(count);
    std::memcpy(data.data(), bytes.data() + offset * sizeof(double), count * sizeof(double));
    params.add(field<std::string>(entry, "name"), Tensor(shape, std::move(data)));
  }
  return params;
}

}  // namespace dlab
