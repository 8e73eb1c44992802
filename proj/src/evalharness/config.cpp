#include <cmath>

#include "advdef/evalharness.hpp"
#include "json_util.hpp"

namespace advdef::eval {

namespace {

nn::OptimizerConfig optimizer_from(const Json& j) {
  check_keys(j, {"kind", "lr", "momentum", "beta1", "beta2", "eps"}, "optimizer");
  nn::OptimizerConfig o;
  const auto kind = j.value("kind", std::string("adam"));
  if (kind == "sgd")
    o.kind = nn::OptimizerKind::sgd;
  else if (kind == "adam")
    o.kind = nn::OptimizerKind::adam;
  else
    throw std::invalid_argument("unknown optimizer '" + kind + "'");
  o.lr = j.value("lr", o.lr);
  o.momentum = j.value("momentum", o.momentum);
  o.beta1 = j.value("beta1", o.beta1);
  o.beta2 = j.value("beta2", o.beta2);
  o.eps = j.value("eps", o.eps);
  return o;
}

Json optimizer_json(const nn::OptimizerConfig& o) {
  return {{"kind", o.kind == nn::OptimizerKind::sgd ? "sgd" : "adam"},
          {"lr", o.lr},
          {"momentum", o.momentum},
          {"beta1", o.beta1},
          {"beta2", o.beta2},
          {"eps", o.eps}};
}

models::TrainConfig train_from(const Json& j) {
  check_keys(j, {"epochs", "batch_size", "optimizer", "early_stop_tau", "early_stop_window", "patches_per_epoch"},
             "model.train");
  models::TrainConfig t;
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  if (j.contains("optimizer")) t.optimizer = optimizer_from(j.at("optimizer"));
  t.early_stop_tau = j.value("early_stop_tau", t.early_stop_tau);
  t.early_stop_window = j.value("early_stop_window", t.early_stop_window);
  t.patches_per_epoch = j.value("patches_per_epoch", t.patches_per_epoch);
  return t;
}

}  // namespace

ExperimentConfig config_from_json(const Json& j) {
  check_keys(j, {"dataset", "model", "attack", "defenses", "sweep", "seed", "threads", "out"}, "config");
  ExperimentConfig c;
  c.seed = j.value("seed", std::uint64_t{0});
  c.threads = j.value("threads", std::size_t{0});
  c.out = j.value("out", std::string());

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    check_keys(d, {"kind", "dir", "train_size", "test_size", "height", "width", "channels", "classes", "seed"},
               "dataset");
    auto& o = c.dataset;
    o.kind = d.value("kind", o.kind);
    o.dir = d.value("dir", std::string());
    o.train_size = d.value("train_size", o.train_size);
    o.test_size = d.value("test_size", o.test_size);
    o.height = d.value("height", o.height);
    o.width = d.value("width", o.width);
    o.channels = d.value("channels", o.channels);
    o.classes = d.value("classes", o.classes);
    o.seed = d.value("seed", c.seed);
  } else {
    c.dataset.seed = c.seed;
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, {"classifier", "vae", "checkpoint", "vaes", "train", "beta"}, "model");
    auto& o = c.model;
    o.classifier = m.value("classifier", o.classifier);
    o.vae = m.value("vae", o.vae);
    o.checkpoint = m.value("checkpoint", std::string());
    if (m.contains("vaes"))
      for (const auto& [name, path] : m.at("vaes").items()) o.vaes[name] = path.get<std::string>();
    if (m.contains("train")) o.train = train_from(m.at("train"));
    if (m.contains("beta")) o.beta = m.at("beta").get<float>();
  }
  c.model.train.seed = c.seed;

  if (j.contains("attack")) c.attack = attack_from_json(j.at("attack"));
  if (j.contains("defenses")) {
    if (!j.at("defenses").is_array()) throw std::invalid_argument("defenses: expected an array of chains");
    for (const auto& d : j.at("defenses")) c.defenses.push_back(chain_from_json(d));
  }
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    check_keys(s, {"epsilons", "slice"}, "sweep");
    if (s.contains("epsilons")) c.epsilons = s.at("epsilons").get<std::vector<float>>();
    c.slice = s.value("slice", c.slice);
  }
  return c;
}

Json to_json(const ExperimentConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["out"] = c.out.string();
  const auto& d = c.dataset;
  j["dataset"] = {{"kind", d.kind},         {"dir", d.dir.string()}, {"train_size", d.train_size},
                  {"test_size", d.test_size}, {"height", d.height},  {"width", d.width},
                  {"channels", d.channels},   {"classes", d.classes}, {"seed", d.seed}};
  const auto& m = c.model;
  Json model = {{"classifier", m.classifier}, {"vae", m.vae}, {"checkpoint", m.checkpoint.string()}};
  Json vaes = Json::object();
  for (const auto& [name, path] : m.vaes) vaes[name] = path.string();
  model["vaes"] = vaes;
  model["train"] = {{"epochs", m.train.epochs},
                    {"batch_size", m.train.batch_size},
                    {"optimizer", optimizer_json(m.train.optimizer)},
                    {"early_stop_tau", m.train.early_stop_tau},
                    {"early_stop_window", m.train.early_stop_window},
                    {"patches_per_epoch", m.train.patches_per_epoch}};
  if (!std::isnan(m.beta)) model["beta"] = m.beta;
  j["model"] = model;
  j["attack"] = to_json(c.attack);
  Json defs = Json::array();
  for (const auto& chain : c.defenses) defs.push_back(to_json(chain));
  j["defenses"] = defs;
  j["sweep"] = {{"epsilons", c.epsilons}, {"slice", c.slice}};
  return j;
}

ExperimentConfig load_config(const fs::path& path) {
  Json j;
  try {
    j = Json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::pair<Dataset, Dataset> load_data(const DataConfig& config) {
  Dataset train, test;
  if (config.kind == "mnist") {
    if (config.dir.empty()) throw std::invalid_argument("dataset: mnist needs a dir");
    train = load_mnist(config.dir, Split::train);
    test = load_mnist(config.dir, Split::test);
    if (config.train_size) train = head(train, config.train_size);
    if (config.test_size) test = head(test, config.test_size);
  } else {
    const std::size_t n_train = config.train_size ? config.train_size : 3000;
    train = synth_dataset(config.kind, n_train, config.height, config.width, config.channels, config.classes,
                          config.seed, Split::train);
    test = synth_dataset(config.kind, config.test_size, config.height, config.width, config.channels, config.classes,
                         config.seed, Split::test);
  }
  return {std::move(train), std::move(test)};
}

}  // namespace advdef::eval
