// grpod-lab: desk-scale GRPO / GRPO-D / SFT fine-tuning lab.
//
// Subcommands: gen-data, train, eval, cross-eval, schedule-dump, gradcheck,
// run-preset, summarize. Exit codes: 0 ok, 2 config error, 3 runtime error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "grpodlab/config.hpp"
#include "grpodlab/gradcheck.hpp"
#include "grpodlab/presets.hpp"
#include "grpodlab/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

bool g_quiet = false;

void say(const std::string& msg) {
  if (!g_quiet) std::cout << msg << '\n';
}

int cmd_gen_data(const std::string& spec_path, const std::string& out_path,
                 int grid_symbols) {
  std::ifstream in(spec_path);
  if (!in) throw grpodlab::config_error("cannot open spec: " + spec_path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded())
    throw grpodlab::config_error("spec is not valid JSON: " + spec_path);
  grpodlab::DatasetSpec spec = grpodlab::dataset_spec_from_json(j);
  grpodlab::Vocab vocab = grpodlab::Vocab::standard(grid_symbols);
  auto data = grpodlab::generate_dataset(spec, vocab);
  grpodlab::save_dataset(data, vocab, out_path);
  say("wrote " + std::to_string(data.size()) + " instances to " + out_path);
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& out_override,
              long seed_override, const std::string& resume) {
  grpodlab::TrainConfig cfg = grpodlab::load_config(config_path);
  if (!out_override.empty()) cfg.out_dir = out_override;
  if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
  auto violations = grpodlab::validate_config(cfg);
  if (!violations.empty()) {
    for (const auto& v : violations) std::cerr << "config error: " << v << '\n';
    return kExitConfig;
  }
  grpodlab::TrainResult res = grpodlab::train(cfg, resume);
  say("finished " + std::to_string(res.metrics.size()) + " steps; final ckpt " +
      res.final_ckpt);
  for (const auto& rep : res.final_evals)
    say("eval " + rep.family +
        ": answer_accuracy=" + std::to_string(rep.answer_accuracy) +
        " format_accuracy=" + std::to_string(rep.format_accuracy));
  return kExitOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data_path,
             const std::string& out_path, int grid_symbols, int max_new,
             bool records) {
  grpodlab::Vocab vocab = grpodlab::Vocab::standard(grid_symbols);
  auto data = grpodlab::load_dataset(data_path, vocab);
  grpodlab::EvalReport rep = grpodlab::cross_task_eval(
      ckpt, data, vocab, max_new, records, grpodlab::resolve_threads(0));
  nlohmann::json j = grpodlab::to_json(rep);
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw grpodlab::io_error("cannot write " + out_path);
    out << j.dump(2) << '\n';
  }
  std::cout << j.dump() << '\n';
  return kExitOk;
}

int cmd_schedule_dump(double beta_min, double beta_max, int w, int t,
                      int resolution, const std::string& out_path) {
  grpodlab::KLScheduleCfg cfg{beta_min, beta_max, w, t};
  cfg.validate();
  if (resolution < 1)
    throw grpodlab::config_error("resolution must be >= 1");
  std::ostringstream csv;
  csv << "step,beta\n";
  for (int s = 0; s <= t; s += resolution)
    csv << s << ',' << grpodlab::beta_at(s, cfg) << '\n';
  if (t % resolution != 0) csv << t << ',' << grpodlab::beta_at(t, cfg) << '\n';
  if (out_path.empty()) {
    std::cout << csv.str();
  } else {
    std::ofstream out(out_path);
    if (!out) throw grpodlab::io_error("cannot write " + out_path);
    out << csv.str();
  }
  return kExitOk;
}

int cmd_gradcheck(int d_model, int n_heads, long seed, double tolerance,
                  int points, bool corrupt) {
  grpodlab::Vocab vocab = grpodlab::Vocab::standard();
  grpodlab::PolicyArch arch;
  arch.vocab_size = vocab.size();
  arch.d_model = d_model;
  arch.n_heads = n_heads;
  arch.max_context = 40;

  double worst = 0.0;
  for (int p = 0; p < points; ++p) {
    const std::uint64_t point_seed =
        static_cast<std::uint64_t>(seed) + 101 * static_cast<std::uint64_t>(p);
    grpodlab::GradCheckRun run =
        grpodlab::run_gradcheck(vocab, arch, point_seed, corrupt);
    worst = std::max(worst, run.max_rel_error);
    for (const auto* rep : {&run.grpo, &run.sft}) {
      std::printf("point %d %s: max_rel_error %.3e\n", p,
                  rep->loss_name.c_str(), rep->max_rel_error);
      for (const auto& blk : rep->blocks)
        std::printf("  %-12s worst %.3e at %ld\n", blk.block.c_str(),
                    blk.worst_rel_error, blk.worst_index);
    }
  }
  std::printf("max relative error over %d points: %.3e (tolerance %.1e)\n",
              points, worst, tolerance);
  if (worst >= tolerance) {
    std::printf("gradcheck FAILED\n");
    return kExitRuntime;
  }
  std::printf("gradcheck passed\n");
  return kExitOk;
}

int cmd_run_preset(const std::string& name, const std::string& out_dir,
                   const std::vector<std::uint64_t>& seeds,
                   const std::vector<std::string>& families, int total_steps,
                   int pretrain_steps, int prompts_per_step, int group_size,
                   int train_count, int eval_count) {
  grpodlab::PresetOptions opt;
  opt.out_dir = out_dir;
  if (!seeds.empty()) opt.seeds = seeds;
  if (!families.empty()) {
    opt.families.clear();
    for (const auto& f : families)
      opt.families.push_back(grpodlab::dataset_family_from_name(f));
  }
  if (total_steps > 0) opt.total_steps = total_steps;
  if (pretrain_steps > 0) opt.pretrain_steps = pretrain_steps;
  if (prompts_per_step > 0) opt.prompts_per_step = prompts_per_step;
  if (group_size > 0) opt.group_size = group_size;
  if (train_count > 0) opt.train_count = train_count;
  if (eval_count > 0) opt.eval_count = eval_count;
  opt.quiet = g_quiet;

  grpodlab::PresetResult res =
      grpodlab::run_preset(grpodlab::preset_from_name(name), opt);
  say("summary written to " + res.summary_path);
  if (!res.complete) {
    std::cerr << "preset incomplete: some cells are missing\n";
    return kExitRuntime;
  }
  return kExitOk;
}

int cmd_summarize(const std::string& dir) {
  std::string path = grpodlab::summarize_from_disk(dir);
  say("summary written to " + path);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"grpod-lab: GRPO-D reinforcement fine-tuning laboratory"};
  app.require_subcommand(1);
  app.add_flag("--quiet", g_quiet, "suppress progress output");

  // gen-data
  std::string gd_spec, gd_out;
  int gd_symbols = 6;
  auto* gen = app.add_subcommand("gen-data", "generate a dataset file");
  gen->add_option("--spec", gd_spec, "dataset spec JSON")->required();
  gen->add_option("--out", gd_out, "output path")->required();
  gen->add_option("--grid-symbols", gd_symbols, "vocab grid symbols");

  // train
  std::string tr_config, tr_out, tr_resume;
  long tr_seed = -1;
  auto* tr = app.add_subcommand("train", "run a training config");
  tr->add_option("--config", tr_config, "TrainConfig JSON")->required();
  tr->add_option("--out", tr_out, "override out_dir");
  tr->add_option("--seed", tr_seed, "override seed");
  tr->add_option("--resume", tr_resume, "resume from checkpoint");

  // eval / cross-eval (same machinery; cross-eval makes intent explicit)
  std::string ev_ckpt, ev_data, ev_out;
  int ev_symbols = 6, ev_max_new = 40;
  bool ev_records = false;
  for (const char* name : {"eval", "cross-eval"}) {
    auto* ev = app.add_subcommand(name, "evaluate a checkpoint on a dataset");
    ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
    ev->add_option("--data", ev_data, "dataset file")->required();
    ev->add_option("--out", ev_out, "write the report here");
    ev->add_option("--grid-symbols", ev_symbols, "vocab grid symbols");
    ev->add_option("--max-new-tokens", ev_max_new, "decode length cap");
    ev->add_flag("--records", ev_records, "include per-example records");
  }

  // schedule-dump
  double sd_min = 0.04, sd_max = 0.1;
  int sd_w = 300, sd_t = 1000, sd_res = 1;
  std::string sd_out;
  auto* sd = app.add_subcommand("schedule-dump", "dump beta(s) as CSV");
  sd->add_option("--beta-min", sd_min, "beta_min")->required();
  sd->add_option("--beta-max", sd_max, "beta_max")->required();
  sd->add_option("--w", sd_w, "exploration steps")->required();
  sd->add_option("--t", sd_t, "total steps")->required();
  sd->add_option("--resolution", sd_res, "step stride");
  sd->add_option("--out", sd_out, "CSV path (stdout if omitted)");

  // gradcheck
  int gc_d = 8, gc_heads = 1, gc_points = 3;
  long gc_seed = 404;
  double gc_tol = 1e-4;
  bool gc_corrupt = false;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gc->add_option("--d-model", gc_d, "reduced model width");
  gc->add_option("--n-heads", gc_heads, "attention heads");
  gc->add_option("--seed", gc_seed, "base seed");
  gc->add_option("--tolerance", gc_tol, "max relative error");
  gc->add_option("--points", gc_points, "parameter points to test");
  gc->add_flag("--corrupt", gc_corrupt,
               "test hook: corrupt the gradient so the check must fail");

  // run-preset
  std::string rp_name, rp_out;
  std::vector<std::uint64_t> rp_seeds;
  std::vector<std::string> rp_families;
  int rp_steps = 0, rp_pretrain = 0, rp_pps = 0, rp_group = 0, rp_train = 0,
      rp_eval = 0;
  auto* rp = app.add_subcommand("run-preset", "run an experiment preset");
  rp->add_option("--name", rp_name,
                 "alpha_sweep|kl_sweep|same_task|cross_task|fig5_curves")
      ->required();
  rp->add_option("--out", rp_out, "output directory")->required();
  rp->add_option("--seeds", rp_seeds, "seed list");
  rp->add_option("--families", rp_families, "restrict task families");
  rp->add_option("--total-steps", rp_steps, "post-training steps per arm");
  rp->add_option("--pretrain-steps", rp_pretrain, "base warm-start steps");
  rp->add_option("--prompts-per-step", rp_pps, "prompts per step");
  rp->add_option("--group-size", rp_group, "rollouts per prompt");
  rp->add_option("--train-count", rp_train, "train instances per family");
  rp->add_option("--eval-count", rp_eval, "eval instances per family");

  // summarize
  std::string sm_dir;
  auto* sm = app.add_subcommand("summarize", "rebuild summary.csv from disk");
  sm->add_option("--out", sm_dir, "preset directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gd_spec, gd_out, gd_symbols);
    if (tr->parsed()) return cmd_train(tr_config, tr_out, tr_seed, tr_resume);
    if (app.got_subcommand("eval") || app.got_subcommand("cross-eval"))
      return cmd_eval(ev_ckpt, ev_data, ev_out, ev_symbols, ev_max_new,
                      ev_records);
    if (sd->parsed())
      return cmd_schedule_dump(sd_min, sd_max, sd_w, sd_t, sd_res, sd_out);
    if (gc->parsed())
      return cmd_gradcheck(gc_d, gc_heads, gc_seed, gc_tol, gc_points,
                           gc_corrupt);
    if (rp->parsed())
      return cmd_run_preset(rp_name, rp_out, rp_seeds, rp_families, rp_steps,
                            rp_pretrain, rp_pps, rp_group, rp_train, rp_eval);
    if (sm->parsed()) return cmd_summarize(sm_dir);
  } catch (const grpodlab::config_error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const grpodlab::contract_error& e) {
    std::cerr << "contract violation: " << e.what() << '\n';
    return kExitConfig;
  } catch (const grpodlab::io_error& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const grpodlab::runtime_abort& e) {
    std::cerr << "runtime abort: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}
