// Frame-level feature extractors and full speaker models.
//
// The TDNN path is the x-vector layout: five context layers over 40-dim
// log-mel input, attention on the frame-level output, statistics pooling,
// two fully connected layers and a classifier. The CNN path is a reduced
// residual network over 257-dim spectrograms with the two-stage gate inside
// every residual block (after the second convolution, before the skip add).

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tsa/attention.hpp"
#include "tsa/config.hpp"
#include "tsa/features.hpp"
#include "tsa/tensor.hpp"

namespace tsa {

enum class BackboneKind { Tdnn, ResNetLite };

struct TdnnLayerSpec {
  std::vector<int> context_offsets;  // sorted, unique
  std::size_t out_dim = 0;
};

// The x-vector context table; widths are configurable so desk-scale tests
// can run narrow.
std::vector<TdnnLayerSpec> default_tdnn_layers(const std::vector<std::size_t>& widths);

struct ModelConfig {
  BackboneKind backbone = BackboneKind::Tdnn;
  FeatureKind features = FeatureKind::LogMel40;
  std::size_t n_speakers = 0;
  std::size_t embed_dim = 512;
  bool batchnorm = true;
  AttentionConfig attention;
  std::uint64_t init_seed = 1;

  std::vector<std::size_t> tdnn_widths = {512, 512, 512, 512, 1500};

  // CNN plan: stride 2 at each stage entry; {3,4,6,3} with channels
  // {64,128,256,512} gives the full-depth variant.
  std::vector<std::size_t> cnn_blocks = {2, 2, 2, 2};
  std::vector<std::size_t> cnn_channels = {16, 32, 64, 128};
  std::size_t cnn_stem_channels = 16;
  // The CNN time gate is sized by the block's time axis, so this path
  // requires fixed-length input.
  std::size_t cnn_input_frames = 64;

  KvConfig to_kv() const;
  static ModelConfig from_kv(const KvConfig& kv);
  std::string canonical_text() const { return to_kv().text(); }

  void validate() const;
};

// Concatenated per-dimension mean and std over time: T x F -> 1 x 2F.
Tensor stats_pool(const Tensor& h);

class SpeakerModel {
 public:
  explicit SpeakerModel(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }

  // Frame-level forward: T x 40 -> T' x F with T' = T - 14 (valid context
  // convolution); throws for T below the receptive field.
  Tensor tdnn_forward(const Tensor& x, bool training);

  // CNN forward to the last residual stage output {Tk, Fk, Ck}; attention
  // runs inside each block per the configured scenario.
  Tensor resnet_forward(const Tensor& x, bool training);

  // Segment embedding: first fully connected output, pre-activation, 1 x E.
  Tensor embed(const FeatureMatrix& features, bool training = false);
  Tensor embed_tensor(const Tensor& x, bool training);

  // Classifier logits 1 x C (cross-entropy head).
  Tensor logits(const FeatureMatrix& features, bool training = false);
  Tensor logits_from_embedding(const Tensor& embedding, bool training);

  std::map<std::string, Tensor>& parameters() { return params_; }
  const std::map<std::string, Tensor>& parameters() const { return params_; }
  std::map<std::string, Tensor>& buffers() { return buffers_; }
  const std::map<std::string, Tensor>& buffers() const { return buffers_; }

  void zero_grad();

  // Replaces the classifier head with a fresh margin-softmax weight matrix
  // (C x E, no bias); the returned tensor is registered as "ams.w".
  Tensor add_margin_head(std::mt19937_64& rng);
  bool has_margin_head() const { return params_.count("ams.w") > 0; }
  Tensor margin_head() const;

  // Overwrites parameter/buffer values from a checkpoint blob map.
  void load_state(const std::map<std::string, Tensor>& state);

 private:
  struct BlockShape {
    std::size_t t, f, c_in, c_out, stride;
    bool needs_proj;
  };

  Tensor param(const std::string& name) const;
  Tensor buffer(const std::string& name) const;
  Tensor register_param(const std::string& name, Tensor t);
  void register_buffer(const std::string& name, Tensor t);

  Tensor batchnorm_cols(const Tensor& x, const std::string& prefix, bool training);
  Tensor batchnorm_channels(const Tensor& x, const std::string& prefix, bool training);
  Tensor conv2d(const Tensor& x, const std::string& prefix, std::size_t kt, std::size_t kf,
                std::size_t stride, std::size_t pad);
  Tensor residual_block(const Tensor& x, const std::string& prefix, const BlockShape& shape,
                        bool training);
  Tensor segment_head(const Tensor& pooled, bool training, bool want_logits);

  FreqAttentionParams freq_params(const std::string& prefix) const;
  TimeAttentionParams time_params(const std::string& prefix) const;
  GateParams gate_params(const std::string& prefix) const;

  ModelConfig cfg_;
  std::map<std::string, Tensor> params_;
  std::map<std::string, Tensor> buffers_;
  std::vector<TdnnLayerSpec> tdnn_layers_;
  std::vector<BlockShape> block_shapes_;  // CNN plan, one entry per block
  std::size_t frame_width_ = 0;           // F after the backbone
};

}  // namespace tsa
