// lewm: generate data, train, plan and evaluate latent world models.
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lewm/lewm.hpp"

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, const std::string& out_help) {
  cmd->add_option("--config", c.config_path, "Run config (section.key = value); defaults when omitted")
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Global seed, overrides run.seed");
  cmd->add_option("--out", c.out, out_help)->required();
}

lewm::RunConfig resolve(const Common& c) {
  lewm::RunConfig cfg = c.config_path.empty() ? lewm::RunConfig{} : lewm::RunConfig::load(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

std::vector<std::string> split_values(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t end = std::min(s.find(',', start), s.size());
    const auto v = lewm::trim(std::string_view(s).substr(start, end - start));
    if (!v.empty()) out.emplace_back(v);
    start = end + 1;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent world models: data generation, training, planning and evaluation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // generate
  Common gen;
  std::optional<std::size_t> gen_episodes;
  auto* g = app.add_subcommand("generate", "Roll out the heuristic policy and write a dataset file");
  add_common(g, gen, "Dataset file to write");
  g->add_option("--episodes", gen_episodes, "Number of episodes, overrides data.n_episodes");

  // train
  Common tr;
  std::string tr_data, tr_loss;
  std::optional<double> tr_lambda;
  std::optional<std::size_t> tr_steps;
  bool tr_quiet = false;
  auto* t = app.add_subcommand("train", "Train a world model and write checkpoints and the loss log");
  add_common(t, tr, "Run directory");
  t->add_option("--data", tr_data, "Dataset file")->required()->check(CLI::ExistingFile);
  t->add_option("--loss", tr_loss, "lewm or pldm, overrides train.loss");
  t->add_option("--lambda", tr_lambda, "SIGReg weight, overrides train.lambda");
  t->add_option("--steps", tr_steps, "Step cap, overrides train.max_steps");
  t->add_flag("--quiet", tr_quiet, "No progress output");

  // plan-eval
  Common pe;
  std::string pe_ckpt, pe_data;
  std::optional<std::size_t> pe_episodes, pe_budget;
  bool pe_verbose = false;
  auto* p = app.add_subcommand("plan-eval", "Goal-reaching success rate with CEM model-predictive control");
  add_common(p, pe, "Output directory");
  p->add_option("--checkpoint", pe_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  p->add_option("--data", pe_data, "Dataset supplying start/goal pairs")->required()->check(CLI::ExistingFile);
  p->add_option("--episodes", pe_episodes, "Overrides control.n_episodes");
  p->add_option("--budget", pe_budget, "Low-level step budget, overrides control.budget");
  p->add_flag("--verbose", pe_verbose, "Also write per-plan CEM cost traces");

  // eval
  Common ev;
  std::string ev_suite;
  lewm::EvalRequest req;
  auto* e = app.add_subcommand("eval", "Probing, violation-of-expectation, straightness or embedding statistics");
  add_common(e, ev, "Output directory");
  e->add_option("--suite", ev_suite, "probe, voe, straighten or stats")->required();
  e->add_option("--checkpoint", req.checkpoints, "Model checkpoint (straighten accepts several)")
      ->check(CLI::ExistingFile);
  e->add_option("--data", req.dataset, "Dataset file")->check(CLI::ExistingFile);
  e->add_option("--latents", req.latents, "straighten: CSV of stored latent sequences")->check(CLI::ExistingFile);
  e->add_flag("--noise-targets", req.noise_targets, "probe: regress seeded noise instead of positions");

  // sweep
  Common sw;
  std::string sw_axis, sw_values, sw_data;
  bool sw_control = false;
  bool sw_quiet = false;
  auto* s = app.add_subcommand("sweep", "Train and evaluate once per value of one axis");
  add_common(s, sw, "Sweep directory");
  s->add_option("--axis", sw_axis, "lambda, projections, knots or embed_dim")->required();
  s->add_option("--values", sw_values, "Comma-separated values")->required();
  s->add_option("--data", sw_data, "Dataset file")->required()->check(CLI::ExistingFile);
  s->add_flag("--control", sw_control, "Also run the control evaluation per value");
  s->add_flag("--quiet", sw_quiet, "No progress output");

  // config
  std::string cfg_in, cfg_out;
  auto* c = app.add_subcommand("config", "Write the resolved config (defaults when no input is given)");
  c->add_option("--config", cfg_in, "Config to resolve")->check(CLI::ExistingFile);
  c->add_option("--out", cfg_out, "Destination; stdout when omitted");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return 1;
  }

  try {
    if (*g) {
      auto cfg = resolve(gen);
      if (gen_episodes) cfg.data.n_episodes = *gen_episodes;
      const auto ds = lewm::cmd_generate(cfg, gen.out);
      std::cout << "wrote " << ds.trajectories.size() << " episodes to " << gen.out << "\n";
    } else if (*t) {
      auto cfg = resolve(tr);
      if (!tr_loss.empty()) {
        try {
          cfg.train.loss = lewm::parse_loss_kind(tr_loss);
        } catch (const lewm::Error& ex) {
          throw lewm::UsageError(ex.what());
        }
      }
      if (tr_lambda) cfg.train.lambda_loss = *tr_lambda;
      if (tr_steps) cfg.train.max_steps = *tr_steps;
      const auto sum = lewm::cmd_train(cfg, tr_data, tr.out, tr_quiet ? nullptr : &std::cerr);
      std::cout << "trained " << sum.steps << " steps, final loss " << lewm::format_double(sum.last.total) << "\n";
    } else if (*p) {
      auto cfg = resolve(pe);
      if (pe_episodes) cfg.control.n_episodes = *pe_episodes;
      if (pe_budget) cfg.control.budget = *pe_budget;
      const auto rep = lewm::cmd_plan_eval(cfg, pe_ckpt, pe_data, pe.out, pe_verbose);
      std::cout << "success rate " << lewm::format_double(rep.success_rate()) << " +/- "
                << lewm::format_double(rep.standard_error()) << " over " << rep.episodes.size() << " episodes\n";
    } else if (*e) {
      const auto cfg = resolve(ev);
      req.suite = lewm::parse_suite(ev_suite);
      lewm::cmd_eval(cfg, req, ev.out);
      std::cout << "wrote " << ev_suite << " results to " << ev.out << "\n";
    } else if (*s) {
      const auto cfg = resolve(sw);
      const auto rows = lewm::cmd_sweep(cfg, sw_axis, split_values(sw_values), sw_data, sw.out, sw_control,
                                        sw_quiet ? nullptr : &std::cerr);
      std::cout << "wrote " << rows.size() << " sweep rows to " << sw.out << "\n";
    } else if (*c) {
      const auto cfg = cfg_in.empty() ? lewm::RunConfig{} : lewm::RunConfig::load(cfg_in);
      if (cfg_out.empty()) {
        std::cout << cfg.serialize();
      } else {
        cfg.save(cfg_out);
      }
    }
  } catch (const lewm::UsageError& ex) {
    std::cerr << "usage error: " << ex.what() << "\n";
    return 1;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  }
  return 0;
}
