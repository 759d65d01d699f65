// crft command-line driver: gen, train, eval, predict, fuse, report.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "crft/dgfo.hpp"
#include "crft/error.hpp"
#include "crft/metrics.hpp"
#include "crft/ops.hpp"
#include "crft/synth.hpp"
#include "crft/trainer.hpp"

using namespace crft;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

// Value of --config anywhere on the command line, if any.
std::string find_config(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  return {};
}

// Config keys become leading "--key value" arguments so that explicit flags
// (parsed later, last one wins) override them.
std::vector<std::string> config_as_args(const json& j) {
  if (!j.is_object()) throw ConfigError("--config must hold a JSON object");
  std::vector<std::string> out;
  for (const auto& [k, v] : j.items()) {
    if (k == "config") continue;
    const std::string flag = "--" + k;
    if (v.is_boolean()) {
      if (v.get<bool>()) out.push_back(flag);
    } else if (v.is_array()) {
      for (const auto& e : v) {
        out.push_back(flag);
        out.push_back(e.is_string() ? e.get<std::string>() : e.dump());
      }
    } else {
      out.push_back(flag);
      out.push_back(v.is_string() ? v.get<std::string>() : v.dump());
    }
  }
  return out;
}

Tensor read_image(const fs::path& p) {
  if (p.extension() == ".pgm") {
    std::size_t h = 0, w = 0;
    auto px = read_pgm(p, h, w);
    std::vector<double> v(px.begin(), px.end());
    for (double& x : v) x /= 255.0;
    return Tensor(Shape{1, 1, h, w}, std::move(v));
  }
  Tensor t = read_crt1(p);
  if (t.dim() == 2) return reshape(t, {1, 1, t.size(0), t.size(1)});
  if (t.dim() == 4 && t.size(0) == 1 && t.size(1) == 1) return t;
  throw ShapeError(p.string() + ": expected an image [H,W] or [1,1,H,W], got " + shape_str(t.shape()));
}

Tensor read_flow(const fs::path& p) {
  Tensor t = read_crt1(p);
  if (t.dim() == 3 && t.size(0) == 2) return reshape(t, {1, 2, t.size(1), t.size(2)});
  if (t.dim() == 4 && t.size(0) == 1 && t.size(1) == 2) return t;
  throw ShapeError(p.string() + ": expected a flow [2,H,W], got " + shape_str(t.shape()));
}

void make_out(const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
}

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
  cmd->add_option("--config", c.config, "JSON file with option values; flags override it");
  cmd->add_option("--seed", c.seed, "random seed");
  auto* o = cmd->add_option("--out", c.out, "output directory");
  if (out_required) o->required();
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);

  CLI::App app{"crft: cross-modal flow registration toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  // gen
  Common gen_c;
  std::size_t gen_n = 4, gen_size = 64;
  std::string gen_preset = "easy";
  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  add_common(gen, gen_c);
  gen->add_option("--n", gen_n, "number of pairs");
  gen->add_option("--size", gen_size, "image side (multiple of 8)");
  gen->add_option("--preset", gen_preset, "easy | paper | stress");

  // train
  Common tr_c;
  std::string tr_data, tr_eval, tr_resume, tr_ckpt_dir;
  double tr_lr = 0, tr_clip = 0, tr_gamma = 0, tr_lc = 0, tr_lf = 0, tr_wd = 0;
  std::size_t tr_steps = 0, tr_epochs = 0, tr_batch = 0, tr_iters = 0, tr_ckpt_every = 0, tr_eval_every = 0;
  bool tr_no_fe = false, tr_no_idgo = false, tr_no_il = false, tr_no_detach = false;
  auto* tr = app.add_subcommand("train", "train a model");
  add_common(tr, tr_c);
  auto* o_data = tr->add_option("--data", tr_data, "training dataset directory");
  auto* o_eval = tr->add_option("--eval-data", tr_eval, "held-out dataset for periodic evaluation");
  tr->add_option("--resume", tr_resume, "checkpoint directory to resume from");
  auto* o_lr = tr->add_option("--lr", tr_lr, "learning rate");
  auto* o_steps = tr->add_option("--steps", tr_steps, "maximum optimizer steps");
  auto* o_epochs = tr->add_option("--epochs", tr_epochs, "epochs");
  auto* o_batch = tr->add_option("--batch", tr_batch, "batch size");
  auto* o_iters = tr->add_option("--iterations", tr_iters, "refinement iterations N");
  auto* o_clip = tr->add_option("--grad-clip", tr_clip, "global gradient-norm clip (0 off)");
  auto* o_gamma = tr->add_option("--gamma", tr_gamma, "iterative loss decay");
  auto* o_lc = tr->add_option("--lambda-c", tr_lc, "coarse loss weight");
  auto* o_lf = tr->add_option("--lambda-f", tr_lf, "fine loss weight");
  auto* o_wd = tr->add_option("--weight-decay", tr_wd, "decoupled weight decay");
  auto* o_ckdir = tr->add_option("--checkpoint-dir", tr_ckpt_dir, "checkpoint directory (default <out>/checkpoints)");
  auto* o_ckev = tr->add_option("--checkpoint-every", tr_ckpt_every, "checkpoint cadence in steps");
  auto* o_evev = tr->add_option("--eval-every", tr_eval_every, "held-out evaluation cadence in steps");
  tr->add_flag("--no-fe", tr_no_fe, "disable coarse flow estimation");
  tr->add_flag("--no-idgo", tr_no_idgo, "disable iterative refinement");
  tr->add_flag("--no-il", tr_no_il, "supervise only the last iteration");
  tr->add_flag("--no-detach", tr_no_detach, "backpropagate through all iterations");

  // eval
  Common ev_c;
  std::string ev_ckpt, ev_data, ev_label;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_common(ev, ev_c);
  ev->add_option("--ckpt", ev_ckpt, "checkpoint directory")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--label", ev_label, "run label stored in the report");

  // predict
  Common pr_c;
  std::string pr_ckpt, pr_a, pr_b, pr_gt;
  auto* pr = app.add_subcommand("predict", "predict the flow between two images");
  add_common(pr, pr_c);
  pr->add_option("--ckpt", pr_ckpt, "checkpoint directory")->required();
  pr->add_option("--a", pr_a, "source image (.crt1 or .pgm)")->required();
  pr->add_option("--b", pr_b, "target image (.crt1 or .pgm)")->required();
  pr->add_option("--gt", pr_gt, "sample directory with flow.crt1 and mask.crt1 for an AEPE printout");

  // fuse
  Common fu_c;
  std::string fu_a, fu_b, fu_flow;
  std::size_t fu_tile = 8;
  auto* fu = app.add_subcommand("fuse", "checkerboard fusion of two images");
  add_common(fu, fu_c);
  fu->add_option("--a", fu_a, "image A (.crt1 or .pgm)")->required();
  fu->add_option("--b", fu_b, "image B (.crt1 or .pgm)")->required();
  fu->add_option("--flow", fu_flow, "flow (.crt1) used to warp B onto A first");
  fu->add_option("--tile", fu_tile, "tile side in pixels");

  // report
  Common re_c;
  std::vector<std::string> re_inputs, re_names;
  auto* re = app.add_subcommand("report", "merge eval reports into one CMR table");
  add_common(re, re_c);
  re->add_option("--eval-json", re_inputs, "eval.json files")->required();
  re->add_option("--names", re_names, "column names (default: labels or file stems)");
  re->get_option("--eval-json")->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  re->get_option("--names")->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  try {
    json file_cfg;
    const std::string cfg_path = find_config(args);
    if (!cfg_path.empty()) file_cfg = read_json(cfg_path);
    std::vector<std::string> full = args;
    const bool is_train = !args.empty() && args[0] == "train";
    if (!cfg_path.empty() && !is_train && !args.empty()) {
      auto extra = config_as_args(file_cfg);
      full.insert(full.begin() + 1, extra.begin(), extra.end());
    }
    std::reverse(full.begin(), full.end());
    try {
      app.parse(full);
    } catch (const CLI::ParseError& e) {
      const int rc = app.exit(e);
      return rc == 0 ? 0 : kExitUsage;
    }

    if (*gen) {
      const Preset preset = parse_preset(gen_preset);
      const fs::path out = gen_c.out;
      write_dataset(gen_n, gen_c.seed, preset, gen_size, out);
      write_json(out / "config.json", {{"command", "gen"},
                                       {"n", gen_n},
                                       {"size", gen_size},
                                       {"preset", gen_preset},
                                       {"seed", gen_c.seed}});
      std::printf("wrote %zu %s pairs of %zux%zu to %s (seed %llu)\n", gen_n, gen_preset.c_str(), gen_size,
                  gen_size, out.string().c_str(), static_cast<unsigned long long>(gen_c.seed));
      return 0;
    }

    if (*tr) {
      TrainConfig cfg = cfg_path.empty() ? TrainConfig{} : TrainConfig::from_json(file_cfg);
      if (tr->get_option("--seed")->count()) cfg.seed = tr_c.seed;
      if (o_data->count()) cfg.data_dir = tr_data;
      if (o_eval->count()) cfg.eval_dir = tr_eval;
      if (o_lr->count()) cfg.lr = tr_lr;
      if (o_steps->count()) cfg.max_steps = tr_steps;
      if (o_epochs->count()) cfg.epochs = tr_epochs;
      if (o_batch->count()) cfg.batch = tr_batch;
      if (o_iters->count()) cfg.model.dgfo.iterations = tr_iters;
      if (o_clip->count()) cfg.grad_clip = tr_clip;
      if (o_gamma->count()) cfg.gamma = tr_gamma;
      if (o_lc->count()) cfg.lambda_c = tr_lc;
      if (o_lf->count()) cfg.lambda_f = tr_lf;
      if (o_wd->count()) cfg.weight_decay = tr_wd;
      if (o_ckdir->count()) cfg.checkpoint_dir = tr_ckpt_dir;
      if (o_ckev->count()) cfg.checkpoint_every = tr_ckpt_every;
      if (o_evev->count()) cfg.eval_every = tr_eval_every;
      if (tr_no_fe) cfg.enable_fe = false;
      if (tr_no_idgo) cfg.enable_idgo = false;
      if (tr_no_il) cfg.enable_il = false;
      if (tr_no_detach) cfg.detach_iterations = false;
      if (cfg.data_dir.empty()) throw ConfigError("train: --data (or data_dir in --config) is required");
      cfg.validate();
      TrainResult r = train(cfg, tr_c.out, tr_resume);
      const double last = r.log.empty() ? 0.0 : r.log.back().l_total;
      std::printf("trained %zu steps, last loss %.6f, checkpoint %s\n", r.steps, last,
                  r.final_checkpoint.string().c_str());
      return 0;
    }

    if (*ev) {
      const fs::path out = ev_c.out;
      EvalReport r = evaluate_checkpoint(ev_ckpt, ev_data);
      r.label = ev_label;
      make_out(out);
      write_json(out / "eval.json", r.to_json());
      const std::string csv = r.cmr_csv();
      write_bytes(out / "cmr.csv", std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
      write_json(out / "config.json",
                 {{"command", "eval"}, {"ckpt", ev_ckpt}, {"data", ev_data}, {"seed", ev_c.seed}, {"label", ev_label}});
      std::printf("samples %zu mean AEPE %.4f", r.per_sample.size(), r.mean);
      if (r.mean_coarse >= 0.0) std::printf(" (coarse %.4f)", r.mean_coarse);
      std::printf("\n");
      return 0;
    }

    if (*pr) {
      const fs::path out = pr_c.out;
      const TrainConfig cfg = checkpoint_config(pr_ckpt);
      ParamStore ps = ParamStore::load(fs::path(pr_ckpt) / "params");
      Tensor a = read_image(pr_a), b = read_image(pr_b);
      NoGradGuard guard;
      Prediction p = forward(ps, cfg.model, a, b, cfg.forward_options());
      const Tensor& flow = p.flows.back();
      const std::size_t h = flow.size(2), w = flow.size(3);
      make_out(out);
      write_flow(out / "flow.crt1", flow, "full", h, w);
      if (p.confidence.defined()) {
        write_crt1(out / "confidence.crt1", reshape(p.confidence, {p.confidence.size(2), p.confidence.size(3)}));
      }
      auto mag = flow_magnitude(flow);
      const double top = std::max(1e-12, *std::max_element(mag.begin(), mag.end()));
      write_pgm(out / "flow_magnitude.pgm", h, w, mag, 0.0, top);
      json summary = {{"command", "predict"}, {"ckpt", pr_ckpt}, {"a", pr_a}, {"b", pr_b}, {"seed", pr_c.seed}};
      if (!pr_gt.empty()) {
        RegistrationSample gt = read_sample(pr_gt);
        const double e = aepe(flow, gt.gt_flow, gt.valid);
        summary["aepe"] = e;
        std::printf("AEPE %.6f\n", e);
      }
      write_json(out / "config.json", summary);
      std::printf("wrote %s\n", (out / "flow.crt1").string().c_str());
      return 0;
    }

    if (*fu) {
      const fs::path out = fu_c.out;
      if (fu_tile == 0) throw ConfigError("fuse: --tile must be >= 1");
      Tensor a = read_image(fu_a), b = read_image(fu_b);
      if (!fu_flow.empty()) {
        NoGradGuard guard;
        b = sgt_warp(b, read_flow(fu_flow));
      }
      Tensor fused = checkerboard_fuse(a, b, fu_tile);
      make_out(out);
      write_pgm(out / "fuse.pgm", fused.size(0), fused.size(1), fused.values());
      write_json(out / "config.json",
                 {{"command", "fuse"}, {"a", fu_a}, {"b", fu_b}, {"flow", fu_flow}, {"tile", fu_tile}, {"seed", fu_c.seed}});
      std::printf("wrote %s\n", (out / "fuse.pgm").string().c_str());
      return 0;
    }

    if (*re) {
      const fs::path out = re_c.out;
      std::vector<EvalReport> reports;
      std::vector<std::string> names = re_names;
      for (const auto& in : re_inputs) {
        reports.push_back(EvalReport::from_json(read_json(in)));
        if (re_names.empty()) {
          const auto& lab = reports.back().label;
          names.push_back(lab.empty() ? fs::path(in).parent_path().filename().string() : lab);
        }
      }
      const std::string csv = merge_cmr_csv(reports, names);
      make_out(out);
      write_bytes(out / "cmr_merged.csv", std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
      write_json(out / "config.json", {{"command", "report"}, {"eval_json", re_inputs}, {"names", names}, {"seed", re_c.seed}});
      std::printf("merged %zu reports into %s\n", reports.size(), (out / "cmr_merged.csv").string().c_str());
      return 0;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kExitNumeric;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 1;
  }
  return kExitUsage;
}
