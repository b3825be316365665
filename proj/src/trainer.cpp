#include "tsa/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "tsa/checkpoint.hpp"

namespace tsa {

namespace {

double snap_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::string format_metric(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// Parameters the active loss head reaches; the inactive head is excluded so
// the gradient-presence contract stays meaningful.
std::map<std::string, Tensor> phase_params(SpeakerModel& model, TrainPhase phase) {
  std::map<std::string, Tensor> out;
  for (auto& [name, t] : model.parameters()) {
    if (phase == TrainPhase::CrossEntropy && name.rfind("ams.", 0) == 0) continue;
    if (phase == TrainPhase::AmSoftmax && name.rfind("cls.", 0) == 0) continue;
    out.emplace(name, t);
  }
  return out;
}

Tensor cosine_logits(const Tensor& embeddings, const Tensor& class_weights) {
  auto normalize_rows = [](const Tensor& x) {
    const Tensor sq = reduce_axis(x * x, 1, Reduce::sum, /*keepdim=*/true);
    return x / sqrt_elem(sq + 1e-12);
  };
  return matmul(normalize_rows(embeddings), transpose(normalize_rows(class_weights)));
}

}  // namespace

Adam::Adam(const std::map<std::string, Tensor>& params, AdamConfig cfg) : cfg_(cfg) {
  for (const auto& [name, t] : params) {
    state_.emplace(name, Moments{Tensor::zeros(t.shape()), Tensor::zeros(t.shape())});
  }
}

void Adam::step(double lr, std::map<std::string, Tensor>& params, double clip_norm) {
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) throw std::runtime_error("adam: parameter " + name + " has no gradient");
    if (state_.find(name) == state_.end()) {
      throw std::runtime_error("adam: parameter " + name + " is not part of this optimizer");
    }
  }
  double scale = 1.0;
  if (clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& [name, t] : params) {
      for (double g : t.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > clip_norm) scale = clip_norm / norm;
  }

  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (auto& [name, t] : params) {
    Moments& mom = state_.at(name);
    auto& p = t.mutable_values();
    auto& m = mom.m.mutable_values();
    auto& v = mom.v.mutable_values();
    const auto g = t.grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i] * scale;
      m[i] = snap_f32(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi);
      v[i] = snap_f32(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] = snap_f32(p[i] - lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }
}

std::map<std::string, Tensor> Adam::state_blobs() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, mom] : state_) {
    out.emplace("opt.m." + name, mom.m);
    out.emplace("opt.v." + name, mom.v);
  }
  return out;
}

void Adam::load_state(const std::map<std::string, Tensor>& blobs, std::size_t step_count) {
  for (auto& [name, mom] : state_) {
    const auto mi = blobs.find("opt.m." + name);
    const auto vi = blobs.find("opt.v." + name);
    if (mi == blobs.end() || vi == blobs.end()) {
      throw std::runtime_error("checkpoint is missing optimizer state for " + name);
    }
    mom.m.mutable_values().assign(mi->second.values().begin(), mi->second.values().end());
    mom.v.mutable_values().assign(vi->second.values().begin(), vi->second.values().end());
  }
  step_ = step_count;
}

double TrainConfig::lr_at(std::size_t global_epoch) const {
  if (phase_at(global_epoch) == TrainPhase::CrossEntropy) {
    return lr0 * std::pow(decay, static_cast<double>(global_epoch));
  }
  return finetune_lr * std::pow(decay, static_cast<double>(global_epoch - epochs));
}

TrainPhase TrainConfig::phase_at(std::size_t global_epoch) const {
  return global_epoch < epochs ? TrainPhase::CrossEntropy : TrainPhase::AmSoftmax;
}

void TrainConfig::validate() const {
  if (epochs == 0) throw std::invalid_argument("train config: epochs is required");
  if (batch_size == 0) throw std::invalid_argument("train config: batch_size is required");
  if (crop_frames < 15) throw std::invalid_argument("train config: crop_frames must be >= 15");
  ams.validate();
}

TrainConfig TrainConfig::from_kv(const KvConfig& kv) {
  TrainConfig cfg;
  cfg.lr0 = kv.get_double_or("lr0", 1e-4);
  cfg.decay = kv.get_double_or("decay", 0.95);
  cfg.finetune_lr = kv.get_double_or("finetune_lr", 5e-5);
  cfg.epochs = static_cast<std::size_t>(kv.get_int("epochs"));
  cfg.finetune_epochs = static_cast<std::size_t>(kv.get_int_or("finetune_epochs", 0));
  cfg.batch_size = static_cast<std::size_t>(kv.get_int("batch_size"));
  cfg.crop_frames = static_cast<std::size_t>(kv.get_int_or("crop_frames", 98));
  cfg.seed = static_cast<std::uint64_t>(kv.get_int_or("seed", 1));
  cfg.clip_norm = kv.get_double_or("clip_norm", 0.0);
  cfg.ams.margin = kv.get_double_or("ams_margin", 0.3);
  cfg.ams.scale = kv.get_double_or("ams_scale", 35.0);
  cfg.cache_dir = kv.get_or("cache_dir", "");
  cfg.validate();
  return cfg;
}

void save_train_checkpoint(const std::string& path, const SpeakerModel& model,
                           const Adam* optimizer, std::size_t next_epoch) {
  Checkpoint ckpt;
  ckpt.config = model.config().to_kv();
  ckpt.config.set("train.next_epoch", std::to_string(next_epoch));
  ckpt.tensors = model.parameters();
  for (const auto& [name, t] : model.buffers()) ckpt.tensors.emplace(name, t);
  if (optimizer) {
    ckpt.config.set("train.adam_step", std::to_string(optimizer->step_count()));
    for (auto& [name, t] : optimizer->state_blobs()) ckpt.tensors.emplace(name, t);
  }
  save_checkpoint(path, ckpt);
}

SpeakerModel load_model_checkpoint(const std::string& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  SpeakerModel model(ModelConfig::from_kv(ckpt.config));
  model.load_state(ckpt.tensors);
  return model;
}

TrainResult train(SpeakerModel& model, const Manifest& manifest, const TrainConfig& cfg,
                  const std::string& out_dir, const std::string& resume_checkpoint) {
  cfg.validate();
  manifest.validate_identification();
  if (manifest.speakers.size() != model.config().n_speakers) {
    throw std::invalid_argument("model expects " + std::to_string(model.config().n_speakers) +
                                " speakers, manifest has " +
                                std::to_string(manifest.speakers.size()));
  }
  std::filesystem::create_directories(out_dir);

  const std::size_t crop = model.config().backbone == BackboneKind::ResNetLite
                               ? model.config().cnn_input_frames
                               : cfg.crop_frames;
  Batcher batcher(manifest, model.config().features, cfg.batch_size, crop, cfg.seed,
                  cfg.cache_dir);

  std::size_t start_epoch = 0;
  std::optional<std::size_t> resume_adam_step;
  std::map<std::string, Tensor> resume_blobs;
  if (!resume_checkpoint.empty()) {
    Checkpoint ckpt = load_checkpoint(resume_checkpoint);
    model.load_state(ckpt.tensors);
    start_epoch = static_cast<std::size_t>(std::stoull(ckpt.config.get("train.next_epoch")));
    if (ckpt.config.has("train.adam_step")) {
      resume_adam_step = static_cast<std::size_t>(std::stoull(ckpt.config.get("train.adam_step")));
    }
    resume_blobs = std::move(ckpt.tensors);
  }

  TrainResult result;
  std::ofstream log(out_dir + "/metrics.log",
                    resume_checkpoint.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot open metrics log in " + out_dir);

  std::optional<Adam> adam;
  TrainPhase adam_phase = TrainPhase::CrossEntropy;
  std::mt19937_64 head_rng(cfg.seed ^ 0x616d73ULL);  // margin head init stream

  for (std::size_t epoch = start_epoch; epoch < cfg.total_epochs(); ++epoch) {
    const TrainPhase phase = cfg.phase_at(epoch);
    const double lr = cfg.lr_at(epoch);

    if (phase == TrainPhase::AmSoftmax && !model.has_margin_head()) {
      model.add_margin_head(head_rng);
    }
    if (!adam || adam_phase != phase) {
      // Fresh optimizer state at the phase boundary: the loss geometry
      // changes and the active parameter set does too.
      adam.emplace(phase_params(model, phase));
      adam_phase = phase;
      if (resume_adam_step) {
        adam->load_state(resume_blobs, *resume_adam_step);
        resume_adam_step.reset();
        resume_blobs.clear();
      }
    }

    double loss_sum = 0.0;
    double top1_sum = 0.0;
    std::size_t n_batches = 0;
    const auto batches = batcher.epoch(epoch);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const Batch& batch = batches[bi];
      double loss_val = 0.0;
      try {
        model.zero_grad();
        Tape tape;
        std::vector<Tensor> emb_rows;
        emb_rows.reserve(batch.crops.size());
        for (const Tensor& x : batch.crops) {
          emb_rows.push_back(model.embed_tensor(x, /*training=*/true));
        }
        const Tensor embeddings = concat(emb_rows, 0);
        Tensor loss;
        Tensor acc_logits;
        if (phase == TrainPhase::CrossEntropy) {
          acc_logits = model.logits_from_embedding(embeddings, /*training=*/true);
          loss = cross_entropy(acc_logits, batch.labels);
        } else {
          loss = am_softmax(embeddings, batch.labels, model.margin_head(), cfg.ams);
          acc_logits = cosine_logits(embeddings, model.margin_head());
        }
        loss_val = loss.item();
        if (!std::isfinite(loss_val)) throw std::runtime_error("non-finite loss");
        tape.backward(loss);
        auto params = phase_params(model, phase);
        adam->step(lr, params, cfg.clip_norm);
        top1_sum += top1(acc_logits, batch.labels);
      } catch (const std::runtime_error& e) {
        const std::string what = e.what();
        if (what.find("non-finite") != std::string::npos) {
          throw std::runtime_error("training diverged (non-finite loss) at epoch " +
                                   std::to_string(epoch) + ", batch " + std::to_string(bi) +
                                   ", lr " + format_metric(lr));
        }
        throw;
      }
      loss_sum += loss_val;
      ++n_batches;
    }

    const double mean_loss = loss_sum / static_cast<double>(n_batches);
    const double mean_top1 = top1_sum / static_cast<double>(n_batches);
    std::string line = "epoch=" + std::to_string(epoch) +
                       " phase=" + (phase == TrainPhase::CrossEntropy ? "CE" : "AMS") +
                       " loss=" + format_metric(mean_loss) + " top1=" + format_metric(mean_top1) +
                       " lr=" + format_metric(lr);
    log << line << "\n";
    log.flush();
    result.log_lines.push_back(line);
    result.final_loss = mean_loss;
    result.final_top1 = mean_top1;

    result.final_checkpoint = out_dir + "/epoch_" + std::to_string(epoch) + ".ckpt";
    save_train_checkpoint(result.final_checkpoint, model, &*adam, epoch + 1);
  }
  return result;
}

}  // namespace tsa
