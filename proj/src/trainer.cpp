#include "crft/trainer.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <thread>

#include "crft/error.hpp"
#include "crft/ops.hpp"

namespace crft {

namespace {

const std::set<std::string> kTrainKeys = {
    "data_dir", "eval_dir", "epochs", "max_steps", "batch", "lr", "gamma", "lambda_c",
    "lambda_f", "model", "enable_fe", "enable_idgo", "enable_il", "detach_iterations", "seed",
    "checkpoint_dir", "checkpoint_every", "eval_every", "grad_clip", "weight_decay", "beta1",
    "beta2", "eps"};

std::string step_dir(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06zu", step);
  return buf;
}

ParamStore zeros_like(const ParamStore& ps) {
  ParamStore out;
  for (std::size_t i = 0; i < ps.size(); ++i) out.add_zeros(ps.names()[i], ps.tensors()[i].shape());
  return out;
}

void check_same_layout(const ParamStore& a, const ParamStore& b, const std::string& what) {
  if (a.names() != b.names()) throw ConfigError(what + ": parameter names differ from the model config");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.tensors()[i].shape() != b.tensors()[i].shape()) {
      throw ConfigError(what + ": shape of " + a.names()[i] + " differs from the model config");
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  // lr == 0 is accepted: it freezes the parameters (used as a sanity check).
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be a finite value >= 0");
  if (batch == 0) throw ConfigError("batch must be >= 1");
  if (epochs == 0 && max_steps == 0) throw ConfigError("epochs or max_steps must be positive");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in (0, 1]");
  if (lambda_c < 0.0 || lambda_f < 0.0) throw ConfigError("loss weights must be non-negative");
  if (grad_clip < 0.0 || weight_decay < 0.0) throw ConfigError("grad_clip and weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0)) {
    throw ConfigError("Adam betas must be in [0,1) and eps > 0");
  }
  model.validate();
}

ForwardOptions TrainConfig::forward_options() const {
  return {enable_fe, enable_idgo, detach_iterations};
}

json TrainConfig::to_json() const {
  return {{"data_dir", data_dir},
          {"eval_dir", eval_dir},
          {"epochs", epochs},
          {"max_steps", max_steps},
          {"batch", batch},
          {"lr", lr},
          {"gamma", gamma},
          {"lambda_c", lambda_c},
          {"lambda_f", lambda_f},
          {"model", model.to_json()},
          {"enable_fe", enable_fe},
          {"enable_idgo", enable_idgo},
          {"enable_il", enable_il},
          {"detach_iterations", detach_iterations},
          {"seed", seed},
          {"checkpoint_dir", checkpoint_dir},
          {"checkpoint_every", checkpoint_every},
          {"eval_every", eval_every},
          {"grad_clip", grad_clip},
          {"weight_decay", weight_decay},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps}};
}

TrainConfig TrainConfig::from_json(const json& j, const TrainConfig& base) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  for (const auto& [k, _] : j.items()) {
    if (!kTrainKeys.count(k)) throw ConfigError("unknown train config key '" + k + "'");
  }
  TrainConfig c = base;
  try {
    c.data_dir = j.value("data_dir", c.data_dir);
    c.eval_dir = j.value("eval_dir", c.eval_dir);
    c.epochs = j.value("epochs", c.epochs);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.batch = j.value("batch", c.batch);
    c.lr = j.value("lr", c.lr);
    c.gamma = j.value("gamma", c.gamma);
    c.lambda_c = j.value("lambda_c", c.lambda_c);
    c.lambda_f = j.value("lambda_f", c.lambda_f);
    if (j.contains("model")) {
      json merged = c.model.to_json();
      merged.update(j["model"]);
      c.model = ModelConfig::from_json(merged);
    }
    c.enable_fe = j.value("enable_fe", c.enable_fe);
    c.enable_idgo = j.value("enable_idgo", c.enable_idgo);
    c.enable_il = j.value("enable_il", c.enable_il);
    c.detach_iterations = j.value("detach_iterations", c.detach_iterations);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_json(const json& j) { return from_json(j, TrainConfig{}); }

SampleLoss sample_loss(const ParamStore& ps, const TrainConfig& cfg, const RegistrationSample& s) {
  const std::size_t h = s.height(), w = s.width();
  Prediction pred = forward(ps, cfg.model, s.image_a, s.image_b, cfg.forward_options());
  SampleLoss out;
  Tensor lc;
  if (cfg.enable_fe && pred.coarse.defined()) {
    Mask mc = coarse_valid_mask(s.valid, h, w);
    for (auto v : mc) out.report.valid_coarse += v;
    // A transform that leaves no fully valid 8x8 block gives no coarse term.
    if (out.report.valid_coarse > 0) {
      lc = coarse_loss(pred.coarse, downsample_flow_gt(s.gt_flow), mc);
      out.report.l_c = lc.item();
    }
  }
  for (auto v : s.valid) out.report.valid += v;
  IterativeLoss lf = iterative_loss(pred.flows, s.gt_flow, s.valid, cfg.gamma, cfg.enable_il);
  for (const auto& t : lf.per_iteration) out.report.l_f_iterations.push_back(t.item());
  out.report.l_f = lf.total.item();
  out.total = total_loss(lc, lf.total, cfg.lambda_c, cfg.lambda_f);
  out.report.l_total = out.total.item();
  return out;
}

std::size_t sample_index(std::uint64_t seed, std::size_t n, std::size_t g) {
  if (n == 0) throw ConfigError("dataset is empty");
  const std::size_t epoch = g / n;
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::mt19937_64 rng(derive_seed(seed ^ 0x5348554646ULL, epoch));
  for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng() % (i + 1)]);
  return perm[g % n];
}

Trainer::Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  ps_ = build_params(cfg_.model, cfg_.seed);
  m_ = zeros_like(ps_);
  v_ = zeros_like(ps_);
}

Trainer Trainer::resume(const fs::path& checkpoint, const TrainConfig& cfg) {
  const json manifest = read_json(checkpoint / "manifest.json");
  if (manifest.value("format", "") != "crft-checkpoint") {
    throw IoError((checkpoint / "manifest.json").string() + ": not a checkpoint manifest");
  }
  Trainer t(cfg);
  ParamStore ps = ParamStore::load(checkpoint / "params");
  ParamStore m = ParamStore::load(checkpoint / "adam_m");
  ParamStore v = ParamStore::load(checkpoint / "adam_v");
  check_same_layout(t.ps_, ps, "checkpoint");
  check_same_layout(t.ps_, m, "checkpoint moments");
  check_same_layout(t.ps_, v, "checkpoint moments");
  t.ps_ = std::move(ps);
  t.m_ = std::move(m);
  t.v_ = std::move(v);
  t.step_ = manifest.at("step").get<std::size_t>();
  return t;
}

std::size_t Trainer::total_steps(std::size_t n) const {
  const std::size_t per_epoch = (n + cfg_.batch - 1) / cfg_.batch;
  if (cfg_.max_steps > 0) return cfg_.max_steps;
  return cfg_.epochs * per_epoch;
}

LossReport Trainer::step(const std::vector<RegistrationSample>& data) {
  if (data.empty()) throw ConfigError("dataset is empty");
  ps_.zero_grad();
  LossReport sum;
  last_indices_.clear();
  // Sequential accumulation: gradients of the batch samples are summed.
  for (std::size_t b = 0; b < cfg_.batch; ++b) {
    const std::size_t idx = sample_index(cfg_.seed, data.size(), step_ * cfg_.batch + b);
    last_indices_.push_back(idx);
    SampleLoss sl;
    try {
      sl = sample_loss(ps_, cfg_, data[idx]);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step_ + 1) + ": " + e.what());
    }
    if (!std::isfinite(sl.report.l_total)) {
      throw NumericError("step " + std::to_string(step_ + 1) + ": non-finite loss");
    }
    if (sl.total.requires_grad()) backward(sl.total);
    const LossReport& r = sl.report;
    sum.l_c += r.l_c;
    sum.l_f += r.l_f;
    sum.l_total += r.l_total;
    sum.valid += r.valid;
    sum.valid_coarse += r.valid_coarse;
    if (sum.l_f_iterations.empty()) sum.l_f_iterations.assign(r.l_f_iterations.size(), 0.0);
    for (std::size_t i = 0; i < r.l_f_iterations.size(); ++i) sum.l_f_iterations[i] += r.l_f_iterations[i];
  }
  adamw_update();
  ++step_;
  return sum;
}

void Trainer::adamw_update() {
  auto& params = ps_.tensors();
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  if (!std::isfinite(sq)) throw NumericError("step " + std::to_string(step_ + 1) + ": non-finite gradient");
  const double norm = std::sqrt(sq);
  const double clip = cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip ? cfg_.grad_clip / (norm + 1e-6) : 1.0;
  if (cfg_.lr == 0.0) return;
  const double t = static_cast<double>(step_ + 1);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto x = p.mutable_values();
    auto m = m_.tensors()[k].mutable_values();
    auto v = v_.tensors()[k].mutable_values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = round_f32(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi);
      v[i] = round_f32(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi);
      const double upd = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      x[i] = round_f32(x[i] * (1.0 - cfg_.lr * cfg_.weight_decay) - cfg_.lr * upd);
    }
  }
}

void Trainer::save_checkpoint(const fs::path& dir) const {
  ps_.save(dir / "params");
  m_.save(dir / "adam_m");
  v_.save(dir / "adam_v");
  write_json(dir / "manifest.json", {{"format", "crft-checkpoint"},
                                     {"step", step_},
                                     {"config", cfg_.to_json()},
                                     {"parameter_count", ps_.element_count()}});
}

std::size_t worker_lanes() {
  std::size_t lanes = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CRFT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) lanes = std::min(lanes, static_cast<std::size_t>(v));
  }
  return lanes;
}

EvalReport evaluate(const ParamStore& ps, const ModelConfig& model, const ForwardOptions& opt,
                    const std::vector<RegistrationSample>& samples, std::size_t threads) {
  if (samples.empty()) throw ConfigError("evaluate: empty evaluation set");
  const std::size_t n = samples.size();
  std::vector<double> fine(n), coarse(n, -1.0);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    NoGradGuard guard;
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        const auto& s = samples[i];
        Prediction p = forward(ps, model, s.image_a, s.image_b, opt);
        fine[i] = aepe(p.flows.back(), s.gt_flow, s.valid);
        if (p.coarse.defined()) {
          coarse[i] = aepe(upsample_coarse_flow(p.coarse, s.height(), s.width()), s.gt_flow, s.valid);
        }
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t lanes = std::min(n, threads > 0 ? threads : worker_lanes());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < lanes; ++t) pool.emplace_back(work);
  work();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
  EvalReport r = cmr_curve(fine, default_thresholds());
  if (coarse.front() >= 0.0) {
    r.per_sample_coarse = coarse;
    double s = 0.0;
    for (double c : coarse) s += c;
    r.mean_coarse = s / static_cast<double>(n);
  }
  return r;
}

TrainConfig checkpoint_config(const fs::path& checkpoint) {
  if (!fs::exists(checkpoint / "manifest.json")) {
    throw IoError("missing checkpoint: " + (checkpoint / "manifest.json").string());
  }
  const json manifest = read_json(checkpoint / "manifest.json");
  if (manifest.value("format", "") != "crft-checkpoint" || !manifest.contains("config")) {
    throw IoError((checkpoint / "manifest.json").string() + ": not a checkpoint manifest");
  }
  return TrainConfig::from_json(manifest["config"]);
}

EvalReport evaluate_checkpoint(const fs::path& checkpoint, const fs::path& data_dir, std::size_t threads) {
  const TrainConfig cfg = checkpoint_config(checkpoint);
  ParamStore ps = ParamStore::load(checkpoint / "params");
  check_same_layout(build_params(cfg.model, cfg.seed), ps, "checkpoint");
  return evaluate(ps, cfg.model, cfg.forward_options(), read_dataset(data_dir), threads);
}

TrainResult train(const TrainConfig& cfg, const fs::path& out, const fs::path& resume_from,
                  const std::function<void(const json&)>& on_step) {
  cfg.validate();
  const std::vector<RegistrationSample> data = read_dataset(cfg.data_dir);
  if (data.empty()) throw ConfigError("training dataset " + cfg.data_dir + " is empty");
  std::vector<RegistrationSample> held_out;
  if (cfg.eval_every > 0 && !cfg.eval_dir.empty()) held_out = read_dataset(cfg.eval_dir);

  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  write_json(out / "config.json", cfg.to_json());
  const fs::path ckpt_root = cfg.checkpoint_dir.empty() ? out / "checkpoints" : fs::path(cfg.checkpoint_dir);

  Trainer trainer = resume_from.empty() ? Trainer(cfg) : Trainer::resume(resume_from, cfg);
  std::ofstream log(out / "train_log.jsonl", resume_from.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw IoError("cannot open " + (out / "train_log.jsonl").string());
  std::ofstream eval_log;
  if (!held_out.empty()) {
    eval_log.open(out / "eval_log.jsonl", resume_from.empty() ? std::ios::trunc : std::ios::app);
  }

  TrainResult result;
  const std::size_t total = trainer.total_steps(data.size());
  while (trainer.steps_done() < total) {
    LossReport rep;
    try {
      rep = trainer.step(data);
    } catch (const NumericError& e) {
      log << json{{"step", trainer.steps_done() + 1}, {"error", e.what()}}.dump() << '\n';
      log.flush();
      throw;
    }
    const std::size_t s = trainer.steps_done();
    json line = rep.to_json();
    line["step"] = s;
    line["samples"] = trainer.last_indices();
    log << line.dump() << '\n';
    if (on_step) on_step(line);
    result.log.push_back(rep);
    if (cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0) trainer.save_checkpoint(ckpt_root / step_dir(s));
    if (!held_out.empty() && s % cfg.eval_every == 0) {
      EvalReport r = evaluate(trainer.params(), cfg.model, cfg.forward_options(), held_out);
      eval_log << json{{"step", s}, {"mean_aepe", r.mean}, {"mean_aepe_coarse", r.mean_coarse}}.dump() << '\n';
      eval_log.flush();
    }
  }
  log.flush();
  result.steps = trainer.steps_done();
  result.final_checkpoint = out / "final";
  trainer.save_checkpoint(result.final_checkpoint);
  return result;
}

}  // namespace crft
