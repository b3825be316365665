#include "tsa/backbone.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace tsa {

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

double snap_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

void snap_tensor_f32(Tensor& t) {
  for (double& v : t.mutable_values()) v = snap_f32(v);
}

Tensor glorot(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Tensor t = Tensor::uniform({rows, cols}, -a, a, rng);
  snap_tensor_f32(t);
  return t.set_requires_grad();
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& part : split(s, ',')) {
    out.push_back(static_cast<std::size_t>(std::stoull(trim(part))));
  }
  return out;
}

const std::vector<std::vector<int>>& tdnn_offset_table() {
  static const std::vector<std::vector<int>> table = {
      {-2, -1, 0, 1, 2}, {-2, 0, 2}, {-3, 0, 3}, {0}, {0}};
  return table;
}

}  // namespace

std::vector<TdnnLayerSpec> default_tdnn_layers(const std::vector<std::size_t>& widths) {
  if (widths.empty()) fail("tdnn needs at least one layer width");
  const auto& table = tdnn_offset_table();
  std::vector<TdnnLayerSpec> layers(widths.size());
  for (std::size_t i = 0; i < widths.size(); ++i) {
    layers[i].context_offsets = i < table.size() ? table[i] : std::vector<int>{0};
    layers[i].out_dim = widths[i];
  }
  return layers;
}

KvConfig ModelConfig::to_kv() const {
  KvConfig kv;
  kv.set("backbone", backbone == BackboneKind::Tdnn ? "tdnn" : "resnet");
  kv.set("features", feature_kind_name(features));
  kv.set("n_speakers", std::to_string(n_speakers));
  kv.set("embed_dim", std::to_string(embed_dim));
  kv.set("batchnorm", batchnorm ? "1" : "0");
  kv.set("attention", scenario_name(attention.scenario));
  if (attention.gamma.has_value()) {
    std::ostringstream os;
    os.precision(17);
    os << *attention.gamma;
    kv.set("gamma", os.str());
  }
  kv.set("bottleneck", std::to_string(attention.bottleneck));
  kv.set("init_seed", std::to_string(init_seed));
  kv.set("tdnn_widths", join_sizes(tdnn_widths));
  kv.set("cnn_blocks", join_sizes(cnn_blocks));
  kv.set("cnn_channels", join_sizes(cnn_channels));
  kv.set("cnn_stem_channels", std::to_string(cnn_stem_channels));
  kv.set("cnn_input_frames", std::to_string(cnn_input_frames));
  return kv;
}

ModelConfig ModelConfig::from_kv(const KvConfig& kv) {
  ModelConfig cfg;
  const std::string bk = kv.get_or("backbone", "tdnn");
  if (bk == "tdnn") {
    cfg.backbone = BackboneKind::Tdnn;
  } else if (bk == "resnet") {
    cfg.backbone = BackboneKind::ResNetLite;
  } else {
    fail("unknown backbone: " + bk);
  }
  cfg.features = feature_kind_from_name(
      kv.get_or("features", cfg.backbone == BackboneKind::Tdnn ? "logmel40" : "spec257"));
  cfg.n_speakers = static_cast<std::size_t>(kv.get_int("n_speakers"));
  cfg.embed_dim = static_cast<std::size_t>(kv.get_int_or("embed_dim", 512));
  cfg.batchnorm = kv.get_bool_or("batchnorm", true);
  cfg.attention.scenario = scenario_from_name(kv.get_or("attention", "none"));
  if (kv.has("gamma")) cfg.attention.gamma = kv.get_double("gamma");
  cfg.attention.bottleneck = static_cast<std::size_t>(kv.get_int_or("bottleneck", 100));
  cfg.init_seed = static_cast<std::uint64_t>(kv.get_int_or("init_seed", 1));
  if (kv.has("tdnn_widths")) cfg.tdnn_widths = parse_sizes(kv.get("tdnn_widths"));
  if (kv.has("cnn_blocks")) cfg.cnn_blocks = parse_sizes(kv.get("cnn_blocks"));
  if (kv.has("cnn_channels")) cfg.cnn_channels = parse_sizes(kv.get("cnn_channels"));
  cfg.cnn_stem_channels = static_cast<std::size_t>(kv.get_int_or("cnn_stem_channels", 16));
  cfg.cnn_input_frames = static_cast<std::size_t>(kv.get_int_or("cnn_input_frames", 64));
  cfg.validate();
  return cfg;
}

void ModelConfig::validate() const {
  attention.validate();
  if (n_speakers < 1) fail("model needs n_speakers >= 1");
  if (embed_dim < 1) fail("embed_dim must be >= 1");
  if (backbone == BackboneKind::Tdnn) {
    if (features != FeatureKind::LogMel40) {
      fail("TDNN backbone expects logmel40 features");
    }
    if (tdnn_widths.empty()) fail("tdnn_widths must not be empty");
  } else {
    if (features != FeatureKind::Spec257) {
      fail("ResNet backbone expects spec257 features");
    }
    if (cnn_blocks.size() != cnn_channels.size()) {
      fail("cnn_blocks and cnn_channels must have equal length");
    }
    if (cnn_blocks.empty()) fail("cnn plan must have at least one stage");
    if (cnn_input_frames < 16) fail("cnn_input_frames must be >= 16");
  }
}

Tensor stats_pool(const Tensor& h) {
  if (h.rank() != 2) fail("stats_pool expects T x F, got " + shape_str(h.shape()));
  const Tensor mean = reduce_axis(h, 0, Reduce::mean, /*keepdim=*/true);
  const Tensor stdev = reduce_axis(h, 0, Reduce::stdev, /*keepdim=*/true);
  return concat({mean, stdev}, 1);
}

SpeakerModel::SpeakerModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.init_seed);

  if (cfg_.backbone == BackboneKind::Tdnn) {
    tdnn_layers_ = default_tdnn_layers(cfg_.tdnn_widths);
    std::size_t in_dim = feature_dim(cfg_.features);
    for (std::size_t i = 0; i < tdnn_layers_.size(); ++i) {
      const auto& layer = tdnn_layers_[i];
      const std::string p = "tdnn" + std::to_string(i);
      register_param(p + ".w", glorot(layer.context_offsets.size() * in_dim, layer.out_dim, rng));
      register_param(p + ".b", Tensor::zeros({1, layer.out_dim}).set_requires_grad());
      if (cfg_.batchnorm) {
        register_param(p + ".bn.gamma", Tensor::ones({1, layer.out_dim}).set_requires_grad());
        register_param(p + ".bn.beta", Tensor::zeros({1, layer.out_dim}).set_requires_grad());
        register_buffer(p + ".bn.mean", Tensor::zeros({1, layer.out_dim}));
        register_buffer(p + ".bn.var", Tensor::ones({1, layer.out_dim}));
      }
      in_dim = layer.out_dim;
    }
    frame_width_ = tdnn_layers_.back().out_dim;
  } else {
    // Shape plan first, then convolution parameters.
    std::size_t t = cfg_.cnn_input_frames;
    std::size_t f = feature_dim(cfg_.features);
    std::size_t c = cfg_.cnn_stem_channels;
    for (std::size_t si = 0; si < cfg_.cnn_blocks.size(); ++si) {
      for (std::size_t bi = 0; bi < cfg_.cnn_blocks[si]; ++bi) {
        BlockShape bs;
        bs.stride = bi == 0 ? 2 : 1;
        bs.c_in = c;
        bs.c_out = cfg_.cnn_channels[si];
        t = conv_out_dim(t, 3, bs.stride, 1);
        f = conv_out_dim(f, 3, bs.stride, 1);
        bs.t = t;
        bs.f = f;
        bs.needs_proj = bs.stride != 1 || bs.c_in != bs.c_out;
        block_shapes_.push_back(bs);
        c = bs.c_out;
      }
    }
    frame_width_ = f * c;

    register_param("stem.w", glorot(3 * 3 * 1, cfg_.cnn_stem_channels, rng));
    register_param("stem.b", Tensor::zeros({1, cfg_.cnn_stem_channels}).set_requires_grad());
    if (cfg_.batchnorm) {
      register_param("stem.bn.gamma", Tensor::ones({1, 1, cfg_.cnn_stem_channels}).set_requires_grad());
      register_param("stem.bn.beta", Tensor::zeros({1, 1, cfg_.cnn_stem_channels}).set_requires_grad());
      register_buffer("stem.bn.mean", Tensor::zeros({1, 1, cfg_.cnn_stem_channels}));
      register_buffer("stem.bn.var", Tensor::ones({1, 1, cfg_.cnn_stem_channels}));
    }
    for (std::size_t i = 0; i < block_shapes_.size(); ++i) {
      const auto& bs = block_shapes_[i];
      const std::string p = "block" + std::to_string(i);
      register_param(p + ".conv1.w", glorot(3 * 3 * bs.c_in, bs.c_out, rng));
      register_param(p + ".conv1.b", Tensor::zeros({1, bs.c_out}).set_requires_grad());
      register_param(p + ".conv2.w", glorot(3 * 3 * bs.c_out, bs.c_out, rng));
      register_param(p + ".conv2.b", Tensor::zeros({1, bs.c_out}).set_requires_grad());
      if (bs.needs_proj) {
        register_param(p + ".proj.w", glorot(1 * 1 * bs.c_in, bs.c_out, rng));
        register_param(p + ".proj.b", Tensor::zeros({1, bs.c_out}).set_requires_grad());
      }
      if (cfg_.batchnorm) {
        for (const char* bn : {".bn1", ".bn2"}) {
          register_param(p + bn + std::string(".gamma"),
                         Tensor::ones({1, 1, bs.c_out}).set_requires_grad());
          register_param(p + bn + std::string(".beta"),
                         Tensor::zeros({1, 1, bs.c_out}).set_requires_grad());
          register_buffer(p + bn + std::string(".mean"), Tensor::zeros({1, 1, bs.c_out}));
          register_buffer(p + bn + std::string(".var"), Tensor::ones({1, 1, bs.c_out}));
        }
        if (bs.needs_proj) {
          register_param(p + ".bnp.gamma", Tensor::ones({1, 1, bs.c_out}).set_requires_grad());
          register_param(p + ".bnp.beta", Tensor::zeros({1, 1, bs.c_out}).set_requires_grad());
          register_buffer(p + ".bnp.mean", Tensor::zeros({1, 1, bs.c_out}));
          register_buffer(p + ".bnp.var", Tensor::ones({1, 1, bs.c_out}));
        }
      }
    }
  }

  register_param("fc1.w", glorot(2 * frame_width_, cfg_.embed_dim, rng));
  register_param("fc1.b", Tensor::zeros({1, cfg_.embed_dim}).set_requires_grad());
  register_param("fc2.w", glorot(cfg_.embed_dim, cfg_.embed_dim, rng));
  register_param("fc2.b", Tensor::zeros({1, cfg_.embed_dim}).set_requires_grad());
  register_param("cls.w", glorot(cfg_.embed_dim, cfg_.n_speakers, rng));
  register_param("cls.b", Tensor::zeros({1, cfg_.n_speakers}).set_requires_grad());

  // Attention parameters last, so the backbone draws are identical across
  // scenarios for a given seed; scenario None owns no gate parameters.
  const auto& att = cfg_.attention;
  if (cfg_.backbone == BackboneKind::Tdnn) {
    const std::size_t f = frame_width_;
    if (att.uses_freq()) {
      const std::size_t k = clamp_bottleneck(att.bottleneck, f);
      auto p = GateParams::glorot(f, k, rng);
      register_param("att.freq.w0", p.w0);
      register_param("att.freq.b0", p.b0);
      register_param("att.freq.w1", p.w1);
    }
    if (att.uses_time()) {
      auto p = TimeAttentionParams::glorot(f, rng);
      register_param("att.time.w0", p.w0);
      register_param("att.time.b0", p.b0);
      register_param("att.time.w1", p.w1);
    }
  } else if (att.scenario != Scenario::None) {
    for (std::size_t i = 0; i < block_shapes_.size(); ++i) {
      const auto& bs = block_shapes_[i];
      const std::string p = "block" + std::to_string(i) + ".att";
      if (att.uses_freq()) {
        const std::size_t width = bs.f * bs.c_out;
        auto g = GateParams::glorot(width, clamp_bottleneck(att.bottleneck, width), rng);
        register_param(p + ".freq.w0", g.w0);
        register_param(p + ".freq.b0", g.b0);
        register_param(p + ".freq.w1", g.w1);
      }
      if (att.uses_time()) {
        auto g = GateParams::glorot(bs.t, clamp_bottleneck(att.bottleneck, bs.t), rng);
        register_param(p + ".time.w0", g.w0);
        register_param(p + ".time.b0", g.b0);
        register_param(p + ".time.w1", g.w1);
      }
    }
  }
}

Tensor SpeakerModel::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) fail("unknown model parameter: " + name);
  return it->second;
}

Tensor SpeakerModel::buffer(const std::string& name) const {
  auto it = buffers_.find(name);
  if (it == buffers_.end()) fail("unknown model buffer: " + name);
  return it->second;
}

Tensor SpeakerModel::register_param(const std::string& name, Tensor t) {
  snap_tensor_f32(t);
  params_.emplace(name, t);
  return t;
}

void SpeakerModel::register_buffer(const std::string& name, Tensor t) {
  snap_tensor_f32(t);
  buffers_.emplace(name, std::move(t));
}

void SpeakerModel::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

FreqAttentionParams SpeakerModel::freq_params(const std::string& prefix) const {
  return gate_params(prefix);
}

GateParams SpeakerModel::gate_params(const std::string& prefix) const {
  GateParams p;
  p.w0 = param(prefix + ".w0");
  p.b0 = param(prefix + ".b0");
  p.w1 = param(prefix + ".w1");
  return p;
}

TimeAttentionParams SpeakerModel::time_params(const std::string& prefix) const {
  TimeAttentionParams p;
  p.w0 = param(prefix + ".w0");
  p.b0 = param(prefix + ".b0");
  p.w1 = param(prefix + ".w1");
  return p;
}

Tensor SpeakerModel::batchnorm_cols(const Tensor& x, const std::string& prefix, bool training) {
  const Tensor gamma = param(prefix + ".gamma");
  const Tensor beta = param(prefix + ".beta");
  if (training) {
    const Tensor mu = reduce_axis(x, 0, Reduce::mean, /*keepdim=*/true);
    const Tensor centered = x - mu;
    const Tensor var = reduce_axis(centered * centered, 0, Reduce::mean, /*keepdim=*/true);
    const Tensor y = centered / sqrt_elem(var + kBnEps) * gamma + beta;
    Tensor rm = buffer(prefix + ".mean");
    Tensor rv = buffer(prefix + ".var");
    for (std::size_t i = 0; i < rm.numel(); ++i) {
      rm.mutable_values()[i] =
          snap_f32((1.0 - kBnMomentum) * rm.values()[i] + kBnMomentum * mu.values()[i]);
      rv.mutable_values()[i] =
          snap_f32((1.0 - kBnMomentum) * rv.values()[i] + kBnMomentum * var.values()[i]);
    }
    return y;
  }
  const Tensor rm = buffer(prefix + ".mean");
  const Tensor rv = buffer(prefix + ".var");
  return (x - rm) / sqrt_elem(rv + kBnEps) * gamma + beta;
}

Tensor SpeakerModel::batchnorm_channels(const Tensor& x, const std::string& prefix,
                                        bool training) {
  const Tensor gamma = param(prefix + ".gamma");
  const Tensor beta = param(prefix + ".beta");
  if (training) {
    const Tensor mu = reduce_axis(reduce_axis(x, 0, Reduce::mean, true), 1, Reduce::mean, true);
    const Tensor centered = x - mu;
    const Tensor var =
        reduce_axis(reduce_axis(centered * centered, 0, Reduce::mean, true), 1, Reduce::mean, true);
    const Tensor y = centered / sqrt_elem(var + kBnEps) * gamma + beta;
    Tensor rm = buffer(prefix + ".mean");
    Tensor rv = buffer(prefix + ".var");
    for (std::size_t i = 0; i < rm.numel(); ++i) {
      rm.mutable_values()[i] =
          snap_f32((1.0 - kBnMomentum) * rm.values()[i] + kBnMomentum * mu.values()[i]);
      rv.mutable_values()[i] =
          snap_f32((1.0 - kBnMomentum) * rv.values()[i] + kBnMomentum * var.values()[i]);
    }
    return y;
  }
  const Tensor rm = buffer(prefix + ".mean");
  const Tensor rv = buffer(prefix + ".var");
  return (x - rm) / sqrt_elem(rv + kBnEps) * gamma + beta;
}

Tensor SpeakerModel::conv2d(const Tensor& x, const std::string& prefix, std::size_t kt,
                            std::size_t kf, std::size_t stride, std::size_t pad) {
  const std::size_t to = conv_out_dim(x.dim(0), kt, stride, pad);
  const std::size_t fo = conv_out_dim(x.dim(1), kf, stride, pad);
  const Tensor cols = im2col(x, kt, kf, stride, pad);
  const Tensor w = param(prefix + ".w");
  const Tensor y = matmul(cols, w) + param(prefix + ".b");
  return reshape(y, {to, fo, w.dim(1)});
}

Tensor SpeakerModel::residual_block(const Tensor& x, const std::string& prefix,
                                    const BlockShape& shape, bool training) {
  Tensor main = conv2d(x, prefix + ".conv1", 3, 3, shape.stride, 1);
  if (cfg_.batchnorm) main = batchnorm_channels(main, prefix + ".bn1", training);
  main = relu(main);
  main = conv2d(main, prefix + ".conv2", 3, 3, 1, 1);
  if (cfg_.batchnorm) main = batchnorm_channels(main, prefix + ".bn2", training);

  if (cfg_.attention.scenario != Scenario::None) {
    const GateParams* fp = nullptr;
    const GateParams* tp = nullptr;
    GateParams fp_store, tp_store;
    if (cfg_.attention.uses_freq()) {
      fp_store = gate_params(prefix + ".att.freq");
      fp = &fp_store;
    }
    if (cfg_.attention.uses_time()) {
      tp_store = gate_params(prefix + ".att.time");
      tp = &tp_store;
    }
    main = cnn_two_stage(main, cfg_.attention, fp, tp);
  }

  Tensor skip = x;
  if (shape.needs_proj) {
    skip = conv2d(x, prefix + ".proj", 1, 1, shape.stride, 0);
    if (cfg_.batchnorm) skip = batchnorm_channels(skip, prefix + ".bnp", training);
  }
  return relu(main + skip);
}

Tensor SpeakerModel::tdnn_forward(const Tensor& x, bool training) {
  if (cfg_.backbone != BackboneKind::Tdnn) fail("tdnn_forward on a non-TDNN model");
  if (x.rank() != 2 || x.dim(1) != feature_dim(cfg_.features)) {
    fail("tdnn_forward expects T x " + std::to_string(feature_dim(cfg_.features)) +
         " input, got " + shape_str(x.shape()));
  }
  Tensor h = x;
  for (std::size_t i = 0; i < tdnn_layers_.size(); ++i) {
    const std::string p = "tdnn" + std::to_string(i);
    h = gather_context(h, tdnn_layers_[i].context_offsets);
    h = relu(matmul(h, param(p + ".w")) + param(p + ".b"));
    if (cfg_.batchnorm) h = batchnorm_cols(h, p + ".bn", training);
  }
  return h;
}

Tensor SpeakerModel::resnet_forward(const Tensor& x, bool training) {
  if (cfg_.backbone != BackboneKind::ResNetLite) fail("resnet_forward on a non-CNN model");
  if (x.rank() != 2 || x.dim(1) != feature_dim(cfg_.features)) {
    fail("resnet_forward expects T x " + std::to_string(feature_dim(cfg_.features)) +
         " input, got " + shape_str(x.shape()));
  }
  if (x.dim(0) < 16) {
    fail("utterance too short for receptive field: T=" + std::to_string(x.dim(0)) +
         " < 16 frames");
  }
  if (x.dim(0) != cfg_.cnn_input_frames) {
    fail("CNN input must have exactly " + std::to_string(cfg_.cnn_input_frames) +
         " frames (time attention gates are sized by the block plan), got " +
         std::to_string(x.dim(0)));
  }
  Tensor h = reshape(x, {x.dim(0), x.dim(1), 1});
  h = conv2d(h, "stem", 3, 3, 1, 1);
  if (cfg_.batchnorm) h = batchnorm_channels(h, "stem.bn", training);
  h = relu(h);
  for (std::size_t i = 0; i < block_shapes_.size(); ++i) {
    h = residual_block(h, "block" + std::to_string(i), block_shapes_[i], training);
  }
  return h;
}

Tensor SpeakerModel::embed_tensor(const Tensor& x, bool training) {
  Tensor frames;
  if (cfg_.backbone == BackboneKind::Tdnn) {
    frames = tdnn_forward(x, training);
    if (cfg_.attention.scenario != Scenario::None) {
      FreqAttentionParams fp;
      TimeAttentionParams tp;
      const FreqAttentionParams* fpp = nullptr;
      const TimeAttentionParams* tpp = nullptr;
      if (cfg_.attention.uses_freq()) {
        fp = freq_params("att.freq");
        fpp = &fp;
      }
      if (cfg_.attention.uses_time()) {
        tp = time_params("att.time");
        tpp = &tp;
      }
      frames = compose_attention(frames, cfg_.attention, fpp, tpp);
    }
  } else {
    const Tensor map = resnet_forward(x, training);
    frames = reshape(map, {map.dim(0), map.dim(1) * map.dim(2)});
  }
  const Tensor pooled = stats_pool(frames);
  return matmul(pooled, param("fc1.w")) + param("fc1.b");
}

Tensor SpeakerModel::embed(const FeatureMatrix& features, bool training) {
  if (features.kind != cfg_.features) {
    fail("feature kind mismatch: model expects " + feature_kind_name(cfg_.features) + ", got " +
         feature_kind_name(features.kind));
  }
  return embed_tensor(features.tensor(), training);
}

Tensor SpeakerModel::logits_from_embedding(const Tensor& embedding, bool training) {
  (void)training;
  Tensor h = relu(embedding);
  h = relu(matmul(h, param("fc2.w")) + param("fc2.b"));
  return matmul(h, param("cls.w")) + param("cls.b");
}

Tensor SpeakerModel::logits(const FeatureMatrix& features, bool training) {
  return logits_from_embedding(embed(features, training), training);
}

Tensor SpeakerModel::add_margin_head(std::mt19937_64& rng) {
  params_.erase("ams.w");
  Tensor w = glorot(cfg_.n_speakers, cfg_.embed_dim, rng);
  return register_param("ams.w", std::move(w));
}

Tensor SpeakerModel::margin_head() const { return param("ams.w"); }

void SpeakerModel::load_state(const std::map<std::string, Tensor>& state) {
  auto copy_into = [&](const std::string& name, Tensor& dst) {
    auto it = state.find(name);
    if (it == state.end()) fail("checkpoint is missing tensor: " + name);
    if (it->second.shape() != dst.shape()) {
      fail("checkpoint tensor " + name + " has shape " + shape_str(it->second.shape()) +
           ", expected " + shape_str(dst.shape()));
    }
    dst.mutable_values().assign(it->second.values().begin(), it->second.values().end());
  };
  if (state.count("ams.w") && !params_.count("ams.w")) {
    const auto& src = state.at("ams.w");
    register_param("ams.w", Tensor::zeros(src.shape()).set_requires_grad());
  }
  for (auto& [name, t] : params_) copy_into(name, t);
  for (auto& [name, t] : buffers_) copy_into(name, t);
}

}  // namespace tsa
