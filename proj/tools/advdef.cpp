#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <optional>

#include "advdef/evalharness.hpp"
#include "advdef/parallel.hpp"

using namespace advdef;
using namespace advdef::eval;

namespace {

struct Options {
  fs::path config;
  std::optional<std::uint64_t> seed;
  std::optional<float> epsilon;
  std::optional<std::size_t> iterations;
  std::optional<int> quality;
  std::optional<std::size_t> patch;
  std::optional<std::size_t> stride;
  std::optional<std::size_t> threads;
  fs::path out;
  fs::path input;  // report only
};

class UsageError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

void print_line(std::ostream& os, const Json& j) { os << j.dump() << std::endl; }

void log(const std::string& msg) { std::cerr << msg << std::endl; }

void override_steps(std::vector<defenses::Transform>& steps, const Options& o) {
  for (auto& t : steps) {
    if (t.kind == defenses::TransformKind::dct_quant && o.quality) t.quality = *o.quality;
    if (t.kind == defenses::TransformKind::vae_patch) {
      if (o.patch) t.patch = *o.patch;
      if (o.stride) t.stride = *o.stride;
    }
    for (auto& member : t.members) override_steps(member.steps, o);
  }
}

ExperimentConfig resolve_config(const Options& o) {
  ExperimentConfig c = o.config.empty() ? config_from_json(Json::object()) : load_config(o.config);
  if (c.dataset.kind == "mnist" && c.dataset.dir.empty()) c.dataset.dir = fs::path(ADVDEF_DATA_DIR) / "mnist";
  if (o.seed) {
    c.seed = *o.seed;
    c.model.train.seed = *o.seed;
  }
  if (o.epsilon) c.attack.epsilon = *o.epsilon;
  if (o.iterations) c.attack.iterations = *o.iterations;
  if (o.threads) c.threads = *o.threads;
  if (!o.out.empty()) c.out = o.out;
  for (auto& chain : c.defenses) override_steps(chain.steps, o);
  return c;
}

models::ClassifierSpec classifier_spec(const ExperimentConfig& c) {
  if (c.model.classifier == "hires-cnn" && c.dataset.kind != "mnist")
    return models::hires_classifier({c.dataset.height, c.dataset.width, c.dataset.channels}, c.dataset.classes);
  return models::classifier_preset(c.model.classifier);
}

fs::path require_out(const ExperimentConfig& c, const fs::path& fallback = {}) {
  if (!c.out.empty()) return c.out;
  if (!fallback.empty()) return fallback;
  throw UsageError("no output path: pass --out or set \"out\" in the config");
}

Classifier load_classifier(const ExperimentConfig& c) {
  if (c.model.checkpoint.empty()) throw UsageError("model.checkpoint is not set");
  auto ckpt = load_checkpoint(c.model.checkpoint);
  return {ckpt.classifier_spec(), std::move(ckpt.params)};
}

defenses::ModelRegistry load_registry(const ExperimentConfig& c) {
  defenses::ModelRegistry reg;
  for (const auto& [name, path] : c.model.vaes) {
    auto ckpt = load_checkpoint(path);
    reg[name] = {ckpt.vae_spec(), std::move(ckpt.params)};
  }
  return reg;
}

Dataset test_slice(const ExperimentConfig& c) {
  auto data = c.dataset;
  data.train_size = data.kind == "mnist" ? 0 : 1;  // only the test split is needed
  auto [train, test] = load_data(data);
  return c.slice ? head(test, c.slice) : test;
}

Json epoch_json(const models::EpochStats& s) {
  return {{"epoch", s.epoch}, {"loss", s.loss}, {"recon", s.recon}, {"kl", s.kl}, {"seconds", s.seconds}};
}

Json train_classifier_cmd(const ExperimentConfig& c) {
  auto out = require_out(c, c.model.checkpoint);
  auto [train, test] = load_data(c.dataset);
  auto spec = classifier_spec(c);
  auto cfg = c.model.train;
  cfg.on_epoch = [](const models::EpochStats& s) { print_line(std::cerr, epoch_json(s)); };
  log("training " + spec.name + " on " + std::to_string(train.size()) + " images");
  auto trained = models::train_classifier(spec, train, cfg);
  auto eval = models::evaluate_classifier(spec, trained.params, test);
  Json meta = {{"epochs", trained.report.loss.size()},
               {"final_loss", trained.report.final_loss},
               {"train_accuracy", trained.report.final_metric},
               {"test_accuracy", eval.accuracy},
               {"train_size", train.size()}};
  save_checkpoint(out, make_checkpoint(spec, trained.params, cfg.seed, meta));
  meta["checkpoint"] = out.string();
  return meta;
}

Json train_vae_cmd(const ExperimentConfig& c, const Options& o) {
  auto name = o.patch ? "patch-vae-" + std::to_string(*o.patch) : c.model.vae;
  auto spec = models::vae_preset(name);
  if (!std::isnan(c.model.beta)) spec.beta = c.model.beta;
  fs::path fallback;
  if (auto it = c.model.vaes.find(name); it != c.model.vaes.end()) fallback = it->second;
  auto out = require_out(c, fallback);
  auto [train, test] = load_data(c.dataset);
  auto cfg = c.model.train;
  cfg.on_epoch = [](const models::EpochStats& s) { print_line(std::cerr, epoch_json(s)); };
  log("training " + spec.name + " (beta " + std::to_string(spec.beta) + ") on " + std::to_string(train.size()) +
      " images");
  auto trained = models::train_vae(spec, train.images, cfg);
  Json meta = {{"epochs", trained.report.loss.size()},
               {"final_loss", trained.report.final_loss},
               {"final_recon", trained.report.final_metric},
               {"early_stopped", trained.report.early_stopped}};
  save_checkpoint(out, make_checkpoint(spec, trained.params, cfg.seed, meta));
  meta["checkpoint"] = out.string();
  return meta;
}

Json failures_json(const std::vector<attacks::AttackFailure>& failures) {
  Json j = Json::array();
  for (const auto& f : failures) j.push_back({{"index", f.index}, {"reason", f.reason}});
  return j;
}

Json attack_cmd(const ExperimentConfig& c, bool defend) {
  auto clf = load_classifier(c);
  auto slice = test_slice(c);
  const auto threads = resolve_threads(c.threads);
  for (const auto& w : attacks::validate(c.attack, clf.spec.dataset)) log("warning: " + w);
  auto batch = attacks::attack_batch(c.attack, clf.spec, clf.params, slice.images, slice.labels, threads);
  if (batch.size() == 0) throw std::runtime_error("no image survived the attack");
  Json r = {{"attack", to_json(c.attack)},
            {"samples", batch.size()},
            {"l2_diff", l2_relative_diff(batch.original, batch.perturbed)},
            {"clean_accuracy", top1_accuracy(clf, batch.original, batch.labels)},
            {"adversarial_accuracy", top1_accuracy(clf, batch.perturbed, batch.labels)},
            {"fingerprint", batch.fingerprint()},
            {"failures", failures_json(batch.failures)}};
  if (defend) {
    if (c.defenses.empty()) throw UsageError("no defenses: add a \"defenses\" section or pass --quality / --patch");
    auto registry = load_registry(c);
    Json cols = Json::object();
    for (std::size_t i = 0; i < c.defenses.size(); ++i) {
      defenses::DefenseContext ctx{&registry, Rng(c.seed, 0xdef).split(i).next_u64(), threads};
      cols[c.defenses[i].name] = top1_accuracy(clf, batch.perturbed, batch.labels, &c.defenses[i], &ctx);
    }
    r["defended_accuracy"] = cols;
  }
  if (!c.out.empty()) write_text(c.out, r.dump(2) + "\n");
  return r;
}

// Chains built from flags when the config names none.
void chains_from_flags(ExperimentConfig& c, const Options& o) {
  if (!c.defenses.empty()) return;
  if (o.quality)
    c.defenses.push_back({"dct_q" + std::to_string(*o.quality), {defenses::Transform::dct_quant(*o.quality)}});
  if (o.patch) {
    const std::size_t stride = o.stride.value_or(*o.patch);
    std::string model;
    for (const auto& [name, path] : c.model.vaes)
      if (name.find(std::to_string(*o.patch)) != std::string::npos) model = name;
    if (model.empty()) throw UsageError("--patch " + std::to_string(*o.patch) + ": no matching entry in model.vaes");
    auto name = "patch" + std::to_string(*o.patch) + "_s" + std::to_string(stride);
    c.defenses.push_back({name, {defenses::Transform::vae_patch(model, *o.patch, stride)}});
    c.defenses.push_back({name + "_smooth", {defenses::Transform::vae_patch(model, *o.patch, stride),
                                             defenses::Transform::smooth()}});
  }
}

Json sweep_cmd(const ExperimentConfig& c, const Options& o) {
  auto clf = load_classifier(c);
  auto slice = test_slice(c);
  auto registry = load_registry(c);
  SweepConfig s;
  s.attack = c.attack;
  s.epsilons = o.epsilon ? std::vector<float>{*o.epsilon} : c.epsilons;
  s.columns.push_back({"no_defense", {}});
  for (const auto& chain : c.defenses)
    if (!chain.steps.empty()) s.columns.push_back(chain);
  s.seed = c.seed;
  s.threads = resolve_threads(c.threads);
  for (const auto& chain : s.columns) defenses::validate(chain, registry);
  auto result = run_sweep(clf, slice, s, registry);

  Json cell_errors = Json::array();
  for (const auto& row : result.rows)
    for (std::size_t i = 0; i < row.cells.size(); ++i)
      if (!row.cells[i].error.empty())
        cell_errors.push_back({{"epsilon", row.epsilon}, {"column", result.columns[i]}, {"error", row.cells[i].error}});
  Json r = {{"rows", result.rows.size()}, {"columns", result.columns}, {"cell_errors", cell_errors}};
  if (!c.out.empty()) {
    write_text(c.out, emit_csv(result));
    auto md = c.out;
    write_text(md.replace_extension(".md"), emit_markdown(result));
    r["csv"] = c.out.string();
    r["markdown"] = md.string();
  } else {
    std::cout << emit_markdown(result);
  }
  return r;
}

Json report_cmd(const Options& o) {
  if (o.input.empty()) throw UsageError("report needs an input csv");
  auto result = parse_csv(read_text(o.input));
  auto md = emit_markdown(result);
  if (o.out.empty()) {
    std::cout << md;
    return {{"rows", result.rows.size()}};
  }
  write_text(o.out, md);
  return {{"rows", result.rows.size()}, {"markdown", o.out.string()}};
}

void error_line(const std::string& command, const std::string& kind, const std::string& message) {
  print_line(std::cerr, {{"status", "error"}, {"command", command}, {"kind", kind}, {"message", message}});
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Adversarial example defenses: training, attacks, purification and sweeps"};
  app.require_subcommand(1);
  Options o;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"train-classifier", "Train a classifier and write its checkpoint"},
      {"train-vae", "Train a VAE and write its checkpoint"},
      {"attack", "Attack the test slice and report accuracy and L2 difference"},
      {"defend", "Attack the test slice and score each defense chain"},
      {"sweep", "Accuracy table over an epsilon grid and defense columns"},
      {"report", "Render a sweep CSV as a markdown table"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Seed for training, attacks and defenses");
    sub->add_option("--epsilon", o.epsilon, "Attack budget per pixel in [0, 1]");
    sub->add_option("--iterations", o.iterations, "I-FGSM iterations");
    sub->add_option("--quality", o.quality, "DCT quantisation quality in [1, 100]");
    sub->add_option("--patch", o.patch, "Patch size of the patch-wise VAE");
    sub->add_option("--stride", o.stride, "Patch stride");
    sub->add_option("--threads", o.threads, "Worker threads (0 = all cores; ADVDEF_THREADS caps)");
    sub->add_option("--out", o.out, "Output path");
    if (name == "report") sub->add_option("input", o.input, "Sweep CSV")->check(CLI::ExistingFile);
  }

  std::string command = "advdef";
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    if (!app.get_subcommands().empty()) command = app.get_subcommands().front()->get_name();
    error_line(command, "usage", e.what());
    return 2;
  }
  command = app.get_subcommands().front()->get_name();

  try {
    Json result;
    if (command == "report") {
      result = report_cmd(o);
    } else {
      auto c = resolve_config(o);
      if (command == "train-classifier") result = train_classifier_cmd(c);
      else if (command == "train-vae") result = train_vae_cmd(c, o);
      else if (command == "attack") result = attack_cmd(c, false);
      else if (command == "defend") {
        chains_from_flags(c, o);
        result = attack_cmd(c, true);
      } else {
        chains_from_flags(c, o);
        result = sweep_cmd(c, o);
      }
    }
    Json line = {{"status", "ok"}, {"command", command}};
    line.update(result);
    print_line(std::cout, line);
    return 0;
  } catch (const UsageError& e) {
    error_line(command, "usage", e.what());
    return 2;
  } catch (const ParseError& e) {
    error_line(command, "parse", e.what());
  } catch (const defenses::DefenseError& e) {
    error_line(command, "defense", e.what());
  } catch (const std::invalid_argument& e) {
    error_line(command, "invalid_argument", e.what());
  } catch (const std::exception& e) {
    error_line(command, "runtime", e.what());
  }
  return 1;
}
