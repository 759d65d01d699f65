#pragma once

#include <functional>
#include <string>
#include <vector>

#include "crft/io.hpp"
#include "crft/loss.hpp"
#include "crft/metrics.hpp"
#include "crft/model.hpp"
#include "crft/params.hpp"
#include "crft/synth.hpp"

namespace crft {

struct TrainConfig {
  std::string data_dir;
  std::string eval_dir;  // optional held-out set for periodic evaluation
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0: epochs decide
  std::size_t batch = 1;
  double lr = 3e-4;
  double gamma = 0.9;
  double lambda_c = 0.5;
  double lambda_f = 1.0;
  ModelConfig model;  // model.dgfo.iterations is N
  bool enable_fe = true;
  bool enable_idgo = true;
  bool enable_il = true;
  bool detach_iterations = true;
  std::uint64_t seed = 0;
  std::string checkpoint_dir;  // empty: <out>/checkpoints
  std::size_t checkpoint_every = 0;
  std::size_t eval_every = 0;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
  double weight_decay = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void validate() const;
  ForwardOptions forward_options() const;
  json to_json() const;
  // Keys absent from `j` keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const json& j, const TrainConfig& base);
  static TrainConfig from_json(const json& j);
};

struct SampleLoss {
  Tensor total;
  LossReport report;
};

// Loss of one sample under the ablation flags of `cfg`.
SampleLoss sample_loss(const ParamStore& ps, const TrainConfig& cfg, const RegistrationSample& s);

// Dataset index visited by global sample counter g (epoch-wise shuffles
// derived from the seed, so resuming needs no RNG state).
std::size_t sample_index(std::uint64_t seed, std::size_t n, std::size_t g);

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);
  // Parameters, moments and step counter from a checkpoint. The checkpoint's
  // model config must match `cfg.model`.
  static Trainer resume(const fs::path& checkpoint, const TrainConfig& cfg);

  // One optimizer step over the next `batch` samples. Throws NumericError
  // (step number in the message) on a non-finite loss or gradient.
  LossReport step(const std::vector<RegistrationSample>& data);

  std::size_t steps_done() const { return step_; }
  std::size_t total_steps(std::size_t n) const;
  const TrainConfig& config() const { return cfg_; }
  const ParamStore& params() const { return ps_; }
  ParamStore& params() { return ps_; }
  std::vector<std::size_t> last_indices() const { return last_indices_; }

  // <dir>/params, <dir>/adam_m, <dir>/adam_v, <dir>/manifest.json.
  void save_checkpoint(const fs::path& dir) const;

 private:
  void adamw_update();

  TrainConfig cfg_;
  ParamStore ps_;
  ParamStore m_, v_;
  std::size_t step_ = 0;
  std::vector<std::size_t> last_indices_;
};

// Parallel inference over samples (worker lanes capped by CRFT_THREADS).
// Throws ConfigError on an empty set.
EvalReport evaluate(const ParamStore& ps, const ModelConfig& model, const ForwardOptions& opt,
                    const std::vector<RegistrationSample>& samples, std::size_t threads = 0);
EvalReport evaluate_checkpoint(const fs::path& checkpoint, const fs::path& data_dir, std::size_t threads = 0);

// Model config and training config recorded in a checkpoint manifest.
TrainConfig checkpoint_config(const fs::path& checkpoint);

std::size_t worker_lanes();

struct TrainResult {
  std::size_t steps = 0;
  std::vector<LossReport> log;
  fs::path final_checkpoint;
};

// Full loop: writes <out>/config.json, <out>/train_log.jsonl (one line per
// step, appended when resuming), checkpoints at cadence and <out>/final.
TrainResult train(const TrainConfig& cfg, const fs::path& out, const fs::path& resume_from = {},
                  const std::function<void(const json&)>& on_step = {});

}  // namespace crft
