// Command-line front end for the two-stage attention speaker recognition
// pipeline: corpus synthesis, feature extraction, noise mixing, training,
// evaluation, the gamma sweep and the finite-difference gradient suite.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tsa/checkpoint.hpp"
#include "tsa/config.hpp"
#include "tsa/dataset.hpp"
#include "tsa/evaluate.hpp"
#include "tsa/gradcheck.hpp"
#include "tsa/noise.hpp"
#include "tsa/threading.hpp"
#include "tsa/trainer.hpp"
#include "tsa/wav.hpp"

namespace {

using namespace tsa;

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

void write_tsv(const std::string& path, const std::vector<std::vector<std::string>>& rows) {
  std::ostream* out = &std::cout;
  std::ofstream file;
  if (!path.empty()) {
    file.open(path);
    if (!file) throw std::runtime_error("cannot create output file: " + path);
    out = &file;
  }
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) (*out) << (i ? "\t" : "") << row[i];
    (*out) << "\n";
  }
}

NoiseSource resolve_noise(const std::string& kind_name, const std::string& noise_manifest) {
  const NoiseKind kind = noise_kind_from_name(kind_name);
  if (kind == NoiseKind::SyntheticWhite || kind == NoiseKind::SyntheticBabble) {
    return NoiseSource::synthetic(kind);
  }
  if (noise_manifest.empty()) {
    throw std::runtime_error("noise kind " + kind_name + " needs --noise-manifest");
  }
  return load_noise_source(parse_noise_manifest(noise_manifest), kind);
}

ModelConfig model_config_from(const KvConfig& kv, const Manifest& manifest,
                              const std::string& scenario_override,
                              std::optional<double> gamma_override,
                              std::optional<std::uint64_t> seed_override) {
  KvConfig cfg = kv;
  cfg.set("n_speakers", std::to_string(manifest.speakers.size()));
  if (!scenario_override.empty()) {
    cfg.set("attention", scenario_override);
    if (scenario_override != "parallel" && cfg.has("gamma")) cfg.set("gamma", "");
  }
  if (gamma_override) cfg.set("gamma", std::to_string(*gamma_override));
  if (cfg.has("gamma") && cfg.get("gamma").empty()) {
    KvConfig cleaned;
    for (const auto& [k, v] : cfg.entries()) {
      if (k != "gamma") cleaned.set(k, v);
    }
    cfg = cleaned;
  }
  if (seed_override) cfg.set("init_seed", std::to_string(*seed_override));
  return ModelConfig::from_kv(cfg);
}

int cmd_synth(const std::string& out_dir, std::size_t speakers, std::size_t utts, double duration,
              std::uint64_t seed, double test_fraction, std::size_t trials) {
  SyntheticSpeakerSpec spec;
  spec.n_speakers = speakers;
  spec.utts_per_speaker = utts;
  spec.duration_s = duration;
  spec.seed = seed;
  spec.test_fraction = test_fraction;
  const Manifest m = generate_synthetic_corpus(spec, out_dir);
  if (trials > 0) {
    write_trial_list(out_dir + "/trials.txt", make_trial_pairs(m, Split::Test, trials, seed));
  }
  std::cout << "wrote " << m.entries.size() << " utterances for " << m.speakers.size()
            << " speakers under " << out_dir << "\n";
  return 0;
}

int cmd_features(const std::string& manifest_path, const std::string& kind_name,
                 const std::string& out_dir) {
  const Manifest m = Manifest::load(manifest_path);
  const FeatureKind kind = feature_kind_from_name(kind_name);
  std::filesystem::create_directories(out_dir);
  parallel_for(m.entries.size(), [&](std::size_t i) {
    const FeatureMatrix f = extract_features(read_wav(m.entries[i].path), kind);
    write_feature_cache(feature_cache_path(out_dir, m.entries[i].path, kind), f);
  });
  std::cout << "cached features for " << m.entries.size() << " utterances under " << out_dir
            << "\n";
  return 0;
}

int cmd_mix(const std::string& manifest_path, const std::string& noise_name,
            const std::string& noise_manifest, const std::string& snr_text, std::uint64_t seed,
            const std::string& out_dir, const std::string& split_name) {
  const Manifest m = Manifest::load(manifest_path);
  const NoiseSource noise = resolve_noise(noise_name, noise_manifest);
  std::optional<double> snr;
  if (snr_text != "random") snr = std::stod(snr_text);
  std::filesystem::create_directories(out_dir);

  Manifest mixed = m;
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto split = m.entries[i].split;
    if (split_name == "all" || (split_name == "train" && split == Split::Train) ||
        (split_name == "test" && split == Split::Test)) {
      todo.push_back(i);
    }
  }
  parallel_for(todo.size(), [&](std::size_t k) {
    const std::size_t i = todo[k];
    const Waveform w = read_wav(m.entries[i].path);
    MixSpec spec;
    spec.snr_db = snr;
    spec.seed = seed * 0x9E3779B97F4A7C15ULL + i;
    const Waveform out = mix(w, noise, spec);
    const std::string name = std::filesystem::path(m.entries[i].path).filename().string();
    const std::string out_path = out_dir + "/" + name;
    write_wav(out_path, out);
    mixed.entries[i].path = out_path;
  });
  mixed.save(out_dir + "/manifest.txt");
  std::cout << "mixed " << todo.size() << " utterances at SNR " << snr_text << " dB into "
            << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& manifest_path,
              const std::string& out_dir, const std::string& resume,
              const std::string& scenario_override, std::optional<double> gamma_override,
              std::optional<std::uint64_t> seed_override) {
  const KvConfig kv = KvConfig::parse_file(config_path);
  const Manifest manifest = Manifest::load(manifest_path);
  manifest.validate_identification();

  TrainConfig tc = TrainConfig::from_kv(kv);
  if (seed_override) tc.seed = *seed_override;

  SpeakerModel model = resume.empty()
                           ? SpeakerModel(model_config_from(kv, manifest, scenario_override,
                                                            gamma_override, seed_override))
                           : load_model_checkpoint(resume);
  const TrainResult result = train(model, manifest, tc, out_dir, resume);
  std::cout << "final: " << result.log_lines.back() << "\n"
            << "checkpoint: " << result.final_checkpoint << "\n";
  return 0;
}

int cmd_eval(const std::string& task, const std::string& checkpoint_path,
             const std::string& manifest_path, const std::string& trials_path,
             const std::string& noise_name, const std::string& noise_manifest,
             std::optional<double> snr, std::uint64_t seed, const std::string& out_path) {
  SpeakerModel model = load_model_checkpoint(checkpoint_path);

  NoiseSource noise;
  EvalOptions opts;
  opts.seed = seed;
  if (!noise_name.empty()) {
    noise = resolve_noise(noise_name, noise_manifest);
    opts.noise = &noise;
    opts.snr_db = snr;
  }

  std::string top1_col = "-";
  std::string eer_col = "-";
  if (task == "identify" || task == "both") {
    const Manifest manifest = Manifest::load(manifest_path);
    top1_col = fmt(evaluate_identification(model, manifest, opts));
  }
  if (task == "verify" || task == "both") {
    if (trials_path.empty()) throw std::runtime_error("--task verify needs --trials");
    eer_col = fmt(evaluate_verification(model, read_trial_list(trials_path), opts));
  }
  const std::string noise_col = noise_name.empty() ? "original" : noise_name;
  const std::string snr_col = snr ? fmt(*snr) : "-";
  write_tsv(out_path, {{noise_col, snr_col, top1_col, eer_col}});
  return 0;
}

int cmd_sweep_gamma(const std::string& config_path, const std::string& manifest_path,
                    const std::string& trials_path, const std::string& noise_name,
                    const std::string& noise_manifest, std::optional<double> snr,
                    std::uint64_t seed, const std::string& out_dir,
                    const std::string& out_path) {
  const KvConfig kv = KvConfig::parse_file(config_path);
  const Manifest manifest = Manifest::load(manifest_path);
  manifest.validate_identification();
  TrainConfig tc = TrainConfig::from_kv(kv);
  tc.seed = seed;

  NoiseSource noise;
  EvalOptions opts;
  opts.seed = seed;
  if (!noise_name.empty()) {
    noise = resolve_noise(noise_name, noise_manifest);
    opts.noise = &noise;
    opts.snr_db = snr;
  }

  std::vector<std::vector<std::string>> rows;
  for (int g10 = 0; g10 <= 10; g10 += 2) {
    const double gamma = static_cast<double>(g10) / 10.0;
    SpeakerModel model(model_config_from(kv, manifest, "parallel", gamma, seed));
    const std::string run_dir = out_dir + "/gamma_" + std::to_string(g10);
    train(model, manifest, tc, run_dir);
    std::string top1_col = fmt(evaluate_identification(model, manifest, opts));
    std::string eer_col = "-";
    if (!trials_path.empty()) {
      eer_col = fmt(evaluate_verification(model, read_trial_list(trials_path), opts));
    }
    char gbuf[8];
    std::snprintf(gbuf, sizeof(gbuf), "%.1f", gamma);
    rows.push_back({gbuf, top1_col, eer_col});
  }
  write_tsv(out_path, rows);
  return 0;
}

int cmd_gradcheck(std::size_t seeds, std::uint64_t seed, double tolerance) {
  const auto reports = run_gradient_suite(seeds, seed);
  bool ok = true;
  for (const auto& r : reports) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3e", r.max_rel_err);
    std::cout << r.op << "\t" << buf << (r.max_rel_err < tolerance ? "" : "\tFAIL") << "\n";
    ok = ok && r.max_rel_err < tolerance;
  }
  std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << " (" << reports.size()
            << " ops, " << seeds << " seeds each)\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-stage attention speaker recognition pipeline"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate the synthetic speaker corpus");
  std::string synth_out = "corpus";
  std::size_t synth_speakers = 8, synth_utts = 50, synth_trials = 400;
  double synth_duration = 2.0, synth_test_fraction = 0.2;
  std::uint64_t synth_seed = 7;
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--speakers", synth_speakers, "number of speakers");
  synth->add_option("--utts", synth_utts, "utterances per speaker");
  synth->add_option("--duration", synth_duration, "utterance length in seconds");
  synth->add_option("--seed", synth_seed, "corpus seed");
  synth->add_option("--test-fraction", synth_test_fraction, "held-out fraction per speaker");
  synth->add_option("--trials", synth_trials, "verification pairs to emit (0 = none)");

  // features
  auto* features = app.add_subcommand("features", "extract and cache features");
  std::string feat_manifest, feat_kind = "logmel", feat_out = "features";
  features->add_option("--manifest", feat_manifest, "dataset manifest")->required();
  features->add_option("--kind", feat_kind, "logmel | spec");
  features->add_option("--out", feat_out, "cache directory");

  // mix
  auto* mixc = app.add_subcommand("mix", "write noise-corrupted copies of a dataset");
  std::string mix_manifest, mix_noise = "synth-babble", mix_noise_manifest, mix_snr = "random";
  std::string mix_out = "mixed", mix_split = "all";
  std::uint64_t mix_seed = 1;
  mixc->add_option("--manifest", mix_manifest, "dataset manifest")->required();
  mixc->add_option("--noise", mix_noise, "noise | music | babble | synth-white | synth-babble");
  mixc->add_option("--noise-manifest", mix_noise_manifest, "noise file manifest");
  mixc->add_option("--snr", mix_snr, "SNR in dB, or `random` for the 0..20 grid");
  mixc->add_option("--seed", mix_seed, "mixing seed");
  mixc->add_option("--out", mix_out, "output directory");
  mixc->add_option("--split", mix_split, "train | test | all");

  // train
  auto* trainc = app.add_subcommand("train", "train a speaker model");
  std::string train_config, train_manifest, train_out = "run", train_resume;
  std::string train_scenario;
  double train_gamma = -1.0;
  std::int64_t train_seed = -1;
  trainc->add_option("--config", train_config, "key = value config file")->required();
  trainc->add_option("--manifest", train_manifest, "dataset manifest")->required();
  trainc->add_option("--out", train_out, "run directory (checkpoints, metrics.log)");
  trainc->add_option("--checkpoint", train_resume, "resume from this checkpoint");
  trainc->add_option("--scenario", train_scenario, "override attention scenario");
  trainc->add_option("--gamma", train_gamma, "override parallel gamma");
  trainc->add_option("--seed", train_seed, "override train + init seed");

  // eval
  auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_task = "identify", eval_ckpt, eval_manifest, eval_trials;
  std::string eval_noise, eval_noise_manifest, eval_out;
  double eval_snr = 1e9;
  std::uint64_t eval_seed = 1;
  evalc->add_option("--task", eval_task, "identify | verify | both");
  evalc->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  evalc->add_option("--manifest", eval_manifest, "dataset manifest (identification)");
  evalc->add_option("--trials", eval_trials, "trial list (verification)");
  evalc->add_option("--noise", eval_noise, "corrupt test audio with this noise kind");
  evalc->add_option("--noise-manifest", eval_noise_manifest, "noise file manifest");
  evalc->add_option("--snr", eval_snr, "SNR in dB for corruption");
  evalc->add_option("--seed", eval_seed, "evaluation seed");
  evalc->add_option("--out", eval_out, "TSV output path (default stdout)");

  // sweep-gamma
  auto* sweep = app.add_subcommand("sweep-gamma", "train/eval the parallel model over the gamma grid");
  std::string sweep_config, sweep_manifest, sweep_trials, sweep_noise, sweep_noise_manifest;
  std::string sweep_out_dir = "sweep", sweep_out;
  double sweep_snr = 1e9;
  std::uint64_t sweep_seed = 1;
  sweep->add_option("--config", sweep_config, "config file")->required();
  sweep->add_option("--manifest", sweep_manifest, "dataset manifest")->required();
  sweep->add_option("--trials", sweep_trials, "trial list for EER");
  sweep->add_option("--noise", sweep_noise, "eval-time noise kind");
  sweep->add_option("--noise-manifest", sweep_noise_manifest, "noise file manifest");
  sweep->add_option("--snr", sweep_snr, "eval-time SNR in dB");
  sweep->add_option("--seed", sweep_seed, "seed");
  sweep->add_option("--run-dir", sweep_out_dir, "directory for the per-gamma runs");
  sweep->add_option("--out", sweep_out, "TSV output path (default stdout)");

  // gradcheck
  auto* gradc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  std::size_t grad_seeds = 100;
  std::uint64_t grad_seed = 1;
  double grad_tol = 1e-4;
  gradc->add_option("--seeds", grad_seeds, "seeds per op");
  gradc->add_option("--seed", grad_seed, "base seed");
  gradc->add_option("--tolerance", grad_tol, "max relative error");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      return cmd_synth(synth_out, synth_speakers, synth_utts, synth_duration, synth_seed,
                       synth_test_fraction, synth_trials);
    }
    if (features->parsed()) return cmd_features(feat_manifest, feat_kind, feat_out);
    if (mixc->parsed()) {
      return cmd_mix(mix_manifest, mix_noise, mix_noise_manifest, mix_snr, mix_seed, mix_out,
                     mix_split);
    }
    if (trainc->parsed()) {
      std::optional<double> gamma;
      if (trainc->count("--gamma")) gamma = train_gamma;
      std::optional<std::uint64_t> seed;
      if (train_seed >= 0) seed = static_cast<std::uint64_t>(train_seed);
      return cmd_train(train_config, train_manifest, train_out, train_resume, train_scenario,
                       gamma, seed);
    }
    if (evalc->parsed()) {
      std::optional<double> snr;
      if (evalc->count("--snr")) snr = eval_snr;
      return cmd_eval(eval_task, eval_ckpt, eval_manifest, eval_trials, eval_noise,
                      eval_noise_manifest, snr, eval_seed, eval_out);
    }
    if (sweep->parsed()) {
      std::optional<double> snr;
      if (sweep->count("--snr")) snr = sweep_snr;
      return cmd_sweep_gamma(sweep_config, sweep_manifest, sweep_trials, sweep_noise,
                             sweep_noise_manifest, snr, sweep_seed, sweep_out_dir, sweep_out);
    }
    if (gradc->parsed()) return cmd_gradcheck(grad_seeds, grad_seed, grad_tol);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
