#include "rvit/model.hpp"

#include <algorithm>
#include <cmath>

#include "rvit/seghead.hpp"

namespace rvit {

std::string to_string(Task task) {
  return task == Task::classification ? "classification" : "segmentation";
}

Task parse_task(std::string_view name) {
  if (name == "classification") return Task::classification;
  if (name == "segmentation") return Task::segmentation;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected classification or segmentation)");
}

std::vector<std::size_t> ModelConfig::tap_blocks() const {
  if (!taps.empty()) return taps;
  if (depth < kStageCount) return {};
  std::vector<std::size_t> out;
  for (std::size_t l = 1; l <= kStageCount; ++l) out.push_back(depth * l / kStageCount);
  return out;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid model config: " + msg); };
  if (width == 0 || heads == 0 || depth == 0 || mlp_ratio == 0) fail("extents must be positive");
  if (width % heads != 0) fail("width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
  if (width % 4 != 0) fail("width must be a multiple of 4 for the 2D positional table");
  if (patch_size == 0 || image_h % patch_size != 0 || image_w % patch_size != 0) {
    fail("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
         " not divisible by patch size " + std::to_string(patch_size));
  }
  if (channels == 0 || image_h == 0 || image_w == 0) fail("image extents must be positive");
  if (classes == 0) fail("classes must be positive");
  const auto tapped = tap_blocks();
  for (std::size_t i = 0; i < tapped.size(); ++i) {
    if (tapped[i] == 0 || tapped[i] > depth) fail("tap block out of range");
    if (i > 0 && tapped[i] <= tapped[i - 1]) fail("tap blocks must be strictly increasing");
  }
  if (task == Task::segmentation) {
    if (tapped.size() != kStageCount) fail("segmentation needs four tap blocks (depth >= 4)");
    if (decoder_width == 0) fail("decoder width must be positive");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"task", to_string(task)},       {"width", width},
          {"depth", depth},                {"heads", heads},
          {"mlp_ratio", mlp_ratio},        {"patch_size", patch_size},
          {"channels", channels},          {"image_h", image_h},
          {"image_w", image_w},            {"classes", classes},
          {"decoder_width", decoder_width}, {"taps", tap_blocks()}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& doc) {
  ModelConfig cfg;
  try {
    cfg.task = parse_task(doc.value("task", std::string("classification")));
    cfg.width = doc.value("width", cfg.width);
    cfg.depth = doc.value("depth", cfg.depth);
    cfg.heads = doc.value("heads", cfg.heads);
    cfg.mlp_ratio = doc.value("mlp_ratio", cfg.mlp_ratio);
    cfg.patch_size = doc.value("patch_size", cfg.patch_size);
    cfg.channels = doc.value("channels", cfg.channels);
    cfg.image_h = doc.value("image_h", cfg.image_h);
    cfg.image_w = doc.value("image_w", cfg.image_w);
    cfg.classes = doc.value("classes", cfg.classes);
    cfg.decoder_width = doc.value("decoder_width", cfg.decoder_width);
    if (doc.contains("taps")) cfg.taps = doc["taps"].get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  return cfg;
}

std::size_t Params::add(std::string name, Tensor value) {
  for (const auto& e : entries_) {
    if (e.first == name) throw ConfigError("duplicate parameter name " + name);
  }
  entries_.emplace_back(std::move(name), std::move(value));
  return entries_.size() - 1;
}

std::size_t Params::index(std::string_view name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first == name) return i;
  }
  throw ConfigError("no parameter named " + std::string(name));
}

std::size_t Params::scalar_count() const {
  std::size_t total = 0;
  for (const auto& e : entries_) total += e.second.size();
  return total;
}

namespace {

Tensor xavier(SplitMix64& rng, std::size_t fan_in, std::size_t fan_out) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  Tensor t({fan_in, fan_out});
  for (double& v : t.data()) v = stddev * rng.normal();
  return t;
}

Tensor normal(SplitMix64& rng, Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = stddev * rng.normal();
  return t;
}

}  // namespace

Network::Network(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  SplitMix64 rng(seed);
  const std::size_t d = cfg_.width, hidden = cfg_.width * cfg_.mlp_ratio;
  params_.add("patch_embed.weight", xavier(rng, cfg_.patch_dim(), d));
  params_.add("patch_embed.bias", Tensor({d}));
  params_.add("cls_token", normal(rng, {d}, 0.02));
  for (std::size_t i = 0; i < cfg_.depth; ++i) {
    const std::string pre = "blocks." + std::to_string(i) + ".";
    params_.add(pre + "ln1.gain", Tensor({d}, 1.0));
    params_.add(pre + "ln1.bias", Tensor({d}));
    for (const char* proj : {"q", "k", "v", "o"}) {
      params_.add(pre + "attn.w" + proj, xavier(rng, d, d));
      params_.add(pre + "attn.b" + proj, Tensor({d}));
    }
    params_.add(pre + "ln2.gain", Tensor({d}, 1.0));
    params_.add(pre + "ln2.bias", Tensor({d}));
    params_.add(pre + "mlp.w1", xavier(rng, d, hidden));
    params_.add(pre + "mlp.b1", Tensor({hidden}));
    params_.add(pre + "mlp.w2", xavier(rng, hidden, d));
    params_.add(pre + "mlp.b2", Tensor({d}));
  }
  params_.add("norm.gain", Tensor({d}, 1.0));
  params_.add("norm.bias", Tensor({d}));
  head_begin_ = params_.size();
  add_head(rng);
  build_index();
}

Network::Network(ModelConfig cfg, Params params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  // Shape check against a freshly initialised layout.
  Network reference(cfg_, 0);
  if (reference.params_.size() != params_.size()) {
    throw ConfigError("parameter set does not match model config (" +
                      std::to_string(params_.size()) + " tensors, expected " +
                      std::to_string(reference.params_.size()) + ")");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_.name(i) != reference.params_.name(i) ||
        params_[i].shape() != reference.params_[i].shape()) {
      throw ConfigError("parameter " + params_.name(i) + " " + shape_str(params_[i].shape()) +
                        " does not match expected " + reference.params_.name(i) + " " +
                        shape_str(reference.params_[i].shape()));
    }
  }
  head_begin_ = reference.head_begin_;
  build_index();
}

void Network::add_head(SplitMix64& rng) {
  const std::size_t d = cfg_.width;
  if (cfg_.task == Task::classification) {
    params_.add("head.weight", Tensor({d, cfg_.classes}));
    params_.add("head.bias", Tensor({cfg_.classes}));
    return;
  }
  const std::size_t e = cfg_.decoder_width;
  for (std::size_t l = 0; l < kStageCount; ++l) {
    const std::string pre = "decoder.proj." + std::to_string(l) + ".";
    Tensor w = xavier(rng, e, d);  // [E, D] layout for conv1x1
    params_.add(pre + "weight", std::move(w));
    params_.add(pre + "bias", Tensor({e}));
  }
  params_.add("decoder.cls.weight", Tensor({cfg_.classes, e}));
  params_.add("decoder.cls.bias", Tensor({cfg_.classes}));
}

void Network::reset_head(std::uint64_t seed) {
  Params fresh;
  for (std::size_t i = 0; i < head_begin_; ++i) fresh.add(params_.name(i), params_[i]);
  params_ = std::move(fresh);
  SplitMix64 rng(seed);
  add_head(rng);
  build_index();
}

void Network::build_index() {
  positions_ = sinusoidal_positions(cfg_.grid_h(), cfg_.grid_w(), cfg_.width);
  patch_w_ = params_.index("patch_embed.weight");
  patch_b_ = params_.index("patch_embed.bias");
  cls_ = params_.index("cls_token");
  norm_g_ = params_.index("norm.gain");
  norm_b_ = params_.index("norm.bias");
  blocks_.clear();
  for (std::size_t i = 0; i < cfg_.depth; ++i) {
    const std::string pre = "blocks." + std::to_string(i) + ".";
    auto at = [&](const char* n) { return params_.index(pre + n); };
    blocks_.push_back(BlockIndex{at("ln1.gain"), at("ln1.bias"), at("attn.wq"), at("attn.bq"),
                                 at("attn.wk"), at("attn.bk"), at("attn.wv"), at("attn.bv"),
                                 at("attn.wo"), at("attn.bo"), at("ln2.gain"), at("ln2.bias"),
                                 at("mlp.w1"), at("mlp.b1"), at("mlp.w2"), at("mlp.b2")});
  }
}

BoundParams Network::bind(nk::Tape& tape, bool train_encoder, bool train_head) const {
  BoundParams bound;
  bound.vars.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const bool trainable = i < head_begin_ ? train_encoder : train_head;
    bound.vars.push_back(trainable ? tape.leaf(params_[i]) : tape.constant(params_[i]));
  }
  return bound;
}

EmbeddingConfig Network::embedding_config() const {
  return EmbeddingConfig{cfg_.width, params_[patch_w_], params_[patch_b_], params_[cls_], positions_};
}

TokenInput Network::embed(nk::Tape& tape, const BoundParams& p,
                          std::span<const PatchGrid* const> grids,
                          std::span<const RetentionPlan* const> plans) const {
  if (grids.empty() || grids.size() != plans.size()) {
    throw ShapeError("embed: need one retention plan per image, got " + std::to_string(grids.size()) +
                     " images and " + std::to_string(plans.size()) + " plans");
  }
  const std::size_t d = cfg_.width, in = cfg_.patch_dim(), n = cfg_.tokens();
  std::size_t total = 0, longest = 0;
  for (std::size_t b = 0; b < grids.size(); ++b) {
    if (grids[b]->count() != n || grids[b]->patch_dim() != in) {
      throw ShapeError("embed: image grid of " + std::to_string(grids[b]->count()) + " patches x " +
                       std::to_string(grids[b]->patch_dim()) + " values does not match the model");
    }
    if (plans[b]->total != n || plans[b]->kept() == 0) {
      throw ShapeError("embed: retention plan does not cover " + std::to_string(n) + " tokens");
    }
    total += plans[b]->kept();
    longest = std::max(longest, plans[b]->kept());
  }
  Tensor pixels({total, in});
  Tensor pos({total, d});
  std::size_t row = 0;
  for (std::size_t b = 0; b < grids.size(); ++b) {
    for (std::size_t idx : plans[b]->indices) {
      if (idx >= n) throw ShapeError("embed: patch index " + std::to_string(idx) + " out of range");
      std::copy_n(grids[b]->patches.ptr() + idx * in, in, pixels.ptr() + row * in);
      std::copy_n(positions_.ptr() + (idx + 1) * d, d, pos.ptr() + row * d);
      ++row;
    }
  }
  nk::Var patches = nk::add(nk::add_bias(nk::matmul(tape.constant(std::move(pixels)), p[patch_w_]),
                                         p[patch_b_]),
                            tape.constant(std::move(pos)));
  Tensor cls_pos({1, d}, std::vector<double>(positions_.ptr(), positions_.ptr() + d));
  nk::Var cls = nk::add(nk::reshape(p[cls_], {1, d}), tape.constant(std::move(cls_pos)));
  nk::Var source = nk::concat_rows(cls, patches);

  TokenInput out;
  out.batch = grids.size();
  out.seq_len = longest + 1;
  out.mask.assign(out.batch * out.seq_len, 0);
  std::vector<std::ptrdiff_t> rows(out.batch * out.seq_len, -1);
  std::ptrdiff_t offset = 1;
  for (std::size_t b = 0; b < out.batch; ++b) {
    const std::size_t k = plans[b]->kept();
    rows[b * out.seq_len] = 0;
    out.mask[b * out.seq_len] = 1;
    for (std::size_t j = 0; j < k; ++j) {
      rows[b * out.seq_len + 1 + j] = offset + static_cast<std::ptrdiff_t>(j);
      out.mask[b * out.seq_len + 1 + j] = 1;
    }
    offset += static_cast<std::ptrdiff_t>(k);
    out.counts.push_back(k);
  }
  out.tokens = nk::gather_rows(source, rows);
  return out;
}

nk::Var Network::block(nk::Tape& tape, const BoundParams& p, const BlockIndex& blk, nk::Var x,
                       std::size_t batch, std::size_t seq_len,
                       std::span<const std::uint8_t> mask) const {
  (void)tape;
  const std::size_t d = cfg_.width, h = cfg_.heads, dh = cfg_.head_dim();
  auto split_heads = [&](nk::Var t) {
    return nk::reshape(nk::permute(nk::reshape(t, {batch, seq_len, h, dh}), {0, 2, 1, 3}),
                       {batch * h, seq_len, dh});
  };
  nk::Var norm1 = nk::layernorm(x, p[blk.ln1_gain], p[blk.ln1_bias]);
  nk::Var q = split_heads(nk::add_bias(nk::matmul(norm1, p[blk.wq]), p[blk.bq]));
  nk::Var k = split_heads(nk::add_bias(nk::matmul(norm1, p[blk.wk]), p[blk.bk]));
  nk::Var v = split_heads(nk::add_bias(nk::matmul(norm1, p[blk.wv]), p[blk.bv]));
  nk::Var scores = nk::scale(nk::batched_matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  nk::Var attn = nk::masked_softmax(scores, mask);
  nk::Var ctx = nk::batched_matmul(attn, v);
  ctx = nk::reshape(nk::permute(nk::reshape(ctx, {batch, h, seq_len, dh}), {0, 2, 1, 3}),
                    {batch * seq_len, d});
  x = nk::add(x, nk::add_bias(nk::matmul(ctx, p[blk.wo]), p[blk.bo]));
  nk::Var norm2 = nk::layernorm(x, p[blk.ln2_gain], p[blk.ln2_bias]);
  nk::Var hidden = nk::gelu(nk::add_bias(nk::matmul(norm2, p[blk.w1]), p[blk.b1]));
  return nk::add(x, nk::add_bias(nk::matmul(hidden, p[blk.w2]), p[blk.b2]));
}

Encoded Network::encode(nk::Tape& tape, const BoundParams& p, const TokenInput& input) const {
  if (input.seq_len < 2) throw ShapeError("encode: need the class token and at least one patch");
  if (input.tokens.shape() != Shape{input.batch * input.seq_len, cfg_.width}) {
    throw ShapeError("encode: token tensor " + shape_str(input.tokens.shape()) +
                     " does not match batch and width");
  }
  const auto tapped = cfg_.tap_blocks();
  Encoded out;
  out.batch = input.batch;
  out.seq_len = input.seq_len;
  nk::Var x = input.tokens;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    x = block(tape, p, blocks_[i], x, input.batch, input.seq_len, input.mask);
    if (std::find(tapped.begin(), tapped.end(), i + 1) != tapped.end()) out.taps.push_back(x);
  }
  std::vector<std::ptrdiff_t> cls_rows(input.batch);
  for (std::size_t b = 0; b < input.batch; ++b) {
    cls_rows[b] = static_cast<std::ptrdiff_t>(b * input.seq_len);
  }
  out.class_embedding = nk::layernorm(nk::gather_rows(x, cls_rows), p[norm_g_], p[norm_b_]);
  return out;
}

std::size_t parameter_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.width, hidden = cfg.width * cfg.mlp_ratio;
  const std::size_t per_block = 4 * d + 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d);
  std::size_t total = cfg.patch_dim() * d + d + d + cfg.depth * per_block + 2 * d;
  if (cfg.task == Task::classification) {
    total += d * cfg.classes + cfg.classes;
  } else {
    total += kStageCount * (cfg.decoder_width * d + cfg.decoder_width) +
             cfg.classes * cfg.decoder_width + cfg.classes;
  }
  return total;
}

nk::Var linear_head(nk::Var embedding, nk::Var weight, nk::Var bias) {
  return nk::add_bias(nk::matmul(embedding, weight), bias);
}

nk::Var Network::classify(nk::Tape&, const BoundParams& p, nk::Var class_embedding) const {
  if (cfg_.task != Task::classification) throw ConfigError("classify: model has a segmentation head");
  return linear_head(class_embedding, p[head_begin_], p[head_begin_ + 1]);
}

nk::Var Network::segment(nk::Tape&, const BoundParams& p, const Encoded& enc,
                         std::span<const RetentionPlan* const> plans) const {
  if (cfg_.task != Task::segmentation) throw ConfigError("segment: model has a classification head");
  std::array<nk::Var, kStageCount> stages;
  for (std::size_t l = 0; l < kStageCount; ++l) {
    stages[l] = scatter_back(enc.taps.at(l), plans, enc.seq_len, cfg_.grid_h(), cfg_.grid_w());
  }
  DecoderVars vars;
  for (std::size_t l = 0; l < kStageCount; ++l) {
    vars.proj_weight[l] = p[head_begin_ + 2 * l];
    vars.proj_bias[l] = p[head_begin_ + 2 * l + 1];
  }
  vars.class_weight = p[head_begin_ + 2 * kStageCount];
  vars.class_bias = p[head_begin_ + 2 * kStageCount + 1];
  return decode(stages, vars, cfg_.patch_size);
}

nk::Var Network::forward(nk::Tape& tape, const BoundParams& p,
                         std::span<const PatchGrid* const> grids,
                         std::span<const RetentionPlan* const> plans) const {
  const TokenInput input = embed(tape, p, grids, plans);
  const Encoded enc = encode(tape, p, input);
  if (cfg_.task == Task::classification) return classify(tape, p, enc.class_embedding);
  return segment(tape, p, enc, plans);
}

Tensor scatter_back(const Tensor& features, const RetentionPlan& plan, std::size_t grid_h,
                    std::size_t grid_w) {
  if (features.rank() != 2 || features.dim(0) != plan.kept()) {
    throw ShapeError("scatter_back: " + shape_str(features.shape()) + " features for " +
                     std::to_string(plan.kept()) + " retained tokens");
  }
  const std::size_t n = grid_h * grid_w, d = features.dim(1);
  if (plan.total != n) throw ShapeError("scatter_back: plan covers " + std::to_string(plan.total) +
                                        " tokens, grid has " + std::to_string(n));
  Tensor out({d, grid_h, grid_w});
  for (std::size_t j = 0; j < plan.kept(); ++j) {
    const std::size_t cell = plan.indices[j];
    for (std::size_t c = 0; c < d; ++c) out[c * n + cell] = features.at(j, c);
  }
  return out;
}

nk::Var scatter_back(nk::Var tap, std::span<const RetentionPlan* const> plans, std::size_t seq_len,
                     std::size_t grid_h, std::size_t grid_w) {
  const std::size_t batch = plans.size(), n = grid_h * grid_w;
  if (tap.shape().size() != 2 || tap.shape()[0] != batch * seq_len) {
    throw ShapeError("scatter_back: tap " + shape_str(tap.shape()) + " does not match " +
                     std::to_string(batch) + " sequences of length " + std::to_string(seq_len));
  }
  const std::size_t d = tap.shape()[1];
  std::vector<std::ptrdiff_t> rows(batch * n, -1);
  for (std::size_t b = 0; b < batch; ++b) {
    if (plans[b]->total != n || plans[b]->kept() + 1 > seq_len) {
      throw ShapeError("scatter_back: plan does not fit the grid or sequence length");
    }
    for (std::size_t j = 0; j < plans[b]->kept(); ++j) {
      rows[b * n + plans[b]->indices[j]] = static_cast<std::ptrdiff_t>(b * seq_len + 1 + j);
    }
  }
  nk::Var dense = nk::reshape(nk::gather_rows(tap, rows), {batch, n, d});
  return nk::reshape(nk::permute(dense, {0, 2, 1}), {batch, d, grid_h, grid_w});
}

}  // namespace rvit
