// Optimization loop: Adam with per-epoch exponential learning-rate decay,
// cross-entropy identification training, additive-margin fine-tuning,
// per-epoch checkpoints and an append-only metrics log.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tsa/backbone.hpp"
#include "tsa/config.hpp"
#include "tsa/dataset.hpp"
#include "tsa/objectives.hpp"
#include "tsa/tensor.hpp"

namespace tsa {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(const std::map<std::string, Tensor>& params, AdamConfig cfg = {});

  // Bias-corrected update from the accumulated gradients. Every parameter
  // must have a populated gradient; parameters and moments are rounded to
  // float32 after the update so checkpoints are value-exact.
  void step(double lr, std::map<std::string, Tensor>& params, double clip_norm = 0.0);

  std::size_t step_count() const { return step_; }

  std::map<std::string, Tensor> state_blobs() const;  // "opt.m.*", "opt.v.*"
  void load_state(const std::map<std::string, Tensor>& blobs, std::size_t step_count);

 private:
  struct Moments {
    Tensor m, v;
  };
  std::map<std::string, Moments> state_;
  std::size_t step_ = 0;
  AdamConfig cfg_;
};

enum class TrainPhase { CrossEntropy, AmSoftmax };

struct TrainConfig {
  double lr0 = 1e-4;
  double decay = 0.95;
  double finetune_lr = 5e-5;
  std::size_t epochs = 0;           // required; no silent default
  std::size_t finetune_epochs = 0;  // margin fine-tune phase length
  std::size_t batch_size = 0;       // required
  std::size_t crop_frames = 98;
  std::uint64_t seed = 1;
  double clip_norm = 0.0;  // 0 disables clipping
  AmSoftmaxConfig ams;
  std::string cache_dir;

  // lr(e) = lr0 * decay^e within each phase; the fine-tune phase restarts
  // the schedule at finetune_lr.
  double lr_at(std::size_t global_epoch) const;
  TrainPhase phase_at(std::size_t global_epoch) const;
  std::size_t total_epochs() const { return epochs + finetune_epochs; }

  void validate() const;
  static TrainConfig from_kv(const KvConfig& kv);
};

struct TrainResult {
  double final_loss = 0.0;
  double final_top1 = 0.0;
  std::string final_checkpoint;
  std::vector<std::string> log_lines;
};

// Trains in place. Writes epoch_<n>.ckpt plus metrics.log under out_dir and
// returns the last epoch's metrics. A NaN/Inf loss aborts with a diagnostic
// naming epoch, batch and learning rate. `resume_checkpoint` restarts from
// a previous epoch checkpoint bit-exactly.
TrainResult train(SpeakerModel& model, const Manifest& manifest, const TrainConfig& cfg,
                  const std::string& out_dir, const std::string& resume_checkpoint = "");

// Model + optimizer + progress snapshot (format per checkpoint.hpp).
void save_train_checkpoint(const std::string& path, const SpeakerModel& model,
                           const Adam* optimizer, std::size_t next_epoch);

SpeakerModel load_model_checkpoint(const std::string& path);

}  // namespace tsa
