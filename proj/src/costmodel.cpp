#include "rvit/costmodel.hpp"

#include <algorithm>
#include <sstream>

#include "rvit/seghead.hpp"

namespace rvit {

CostReport estimate_cost(const ModelConfig& cfg, double ratio, std::string config_name) {
  cfg.validate();
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw ConfigError("retention ratio " + std::to_string(ratio) + " is outside (0, 1]");
  }
  const std::uint64_t n = cfg.tokens();
  const std::uint64_t k = retained_count(ratio, n);
  if (k == 0) throw ConfigError("retention ratio keeps no patches");
  const std::uint64_t t = k + 1;
  const std::uint64_t d = cfg.width, hidden = cfg.width * cfg.mlp_ratio;

  CostReport r;
  r.config_name = std::move(config_name);
  r.image_h = cfg.image_h;
  r.image_w = cfg.image_w;
  r.patch_size = cfg.patch_size;
  r.ratio = ratio;
  r.retained = k;
  r.seq_len = t;
  r.depth = cfg.depth;

  r.embed_flops = 2 * k * cfg.patch_dim() * d;
  r.block.qkv = 3 * 2 * t * d * d;
  r.block.logits = 2 * t * t * d;
  r.block.values = 2 * t * t * d;
  r.block.proj = 2 * t * d * d;
  r.block.mlp = 2 * (2 * t * d * hidden);
  if (cfg.task == Task::classification) {
    r.head_flops = 2 * d * cfg.classes;
  } else {
    const std::uint64_t e = cfg.decoder_width;
    r.decoder_flops = kStageCount * 2 * n * d * e + 2 * n * e * cfg.classes;
  }

  const std::uint64_t image = cfg.image_h * cfg.image_w * cfg.channels;
  const std::pair<const char*, std::uint64_t> stages[] = {
      {"embed", image + k * cfg.patch_dim() + t * d},
      {"attention", 6 * t * d + cfg.heads * t * t},
      {"mlp", 2 * t * d + 2 * t * hidden},
      {"head", d + cfg.classes},
  };
  const auto* peak = std::max_element(std::begin(stages), std::end(stages),
                                      [](const auto& a, const auto& b) { return a.second < b.second; });
  r.peak_stage = peak->first;
  r.peak_activation_bytes = 4 * peak->second;
  r.model_bytes = 4 * parameter_count(cfg);
  return r;
}

nlohmann::json CostReport::to_json() const {
  return {{"config", config_name},
          {"H", image_h},
          {"W", image_w},
          {"P", patch_size},
          {"r", ratio},
          {"retained", retained},
          {"seq_len", seq_len},
          {"gflops", gflops()},
          {"peak_mem_mb", peak_mem_mb()},
          {"peak_stage", peak_stage},
          {"model_mb_f32", static_cast<double>(model_bytes) / (1024.0 * 1024.0)},
          {"flops",
           {{"embed", embed_flops},
            {"per_block",
             {{"qkv", block.qkv},
              {"attn_logits", block.logits},
              {"attn_values", block.values},
              {"proj", block.proj},
              {"mlp", block.mlp}}},
            {"blocks", depth},
            {"head", head_flops},
            {"decoder", decoder_flops},
            {"total", total_flops()}}}};
}

Efficiency compare_to_full(const ModelConfig& cfg, double ratio, std::string config_name) {
  Efficiency e;
  e.full = estimate_cost(cfg, 1.0, config_name);
  e.masked = estimate_cost(cfg, ratio, config_name);
  e.flops_ratio = static_cast<double>(e.full.total_flops()) / static_cast<double>(e.masked.total_flops());
  e.memory_ratio = static_cast<double>(e.full.peak_activation_bytes) /
                   static_cast<double>(e.masked.peak_activation_bytes);
  return e;
}

nlohmann::json Efficiency::to_json() const {
  nlohmann::json doc = masked.to_json();
  doc["full_gflops"] = full.gflops();
  doc["full_peak_mem_mb"] = full.peak_mem_mb();
  doc["flops_ratio"] = flops_ratio;
  doc["memory_ratio"] = memory_ratio;
  return doc;
}

ModelConfig model_preset(std::string_view name) {
  ModelConfig cfg;
  cfg.patch_size = 16;
  cfg.image_h = cfg.image_w = 224;
  cfg.channels = 3;
  cfg.classes = 60;
  cfg.mlp_ratio = 4;
  if (name == "vits16") {
    cfg.width = 384;
    cfg.depth = 12;
    cfg.heads = 6;
  } else if (name == "vitb16") {
    cfg.width = 768;
    cfg.depth = 12;
    cfg.heads = 12;
  } else if (name == "vitl16") {
    cfg.width = 1024;
    cfg.depth = 24;
    cfg.heads = 16;
  } else if (name == "desk") {
    cfg = ModelConfig{};
  } else {
    throw ConfigError("unknown model preset '" + std::string(name) +
                      "' (expected vits16, vitb16, vitl16 or desk)");
  }
  return cfg;
}

std::string cost_csv_header() { return "config,H,W,P,r,seq_len,gflops,peak_mem_mb\n"; }

std::string cost_csv_row(const CostReport& r) {
  std::ostringstream out;
  out.precision(10);
  out << r.config_name << ',' << r.image_h << ',' << r.image_w << ',' << r.patch_size << ','
      << r.ratio << ',' << r.seq_len << ',' << r.gflops() << ',' << r.peak_mem_mb() << '\n';
  return out.str();
}

}  // namespace rvit
