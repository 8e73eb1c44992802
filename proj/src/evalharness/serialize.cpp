#include <algorithm>
#include <cmath>

#include "advdef/evalharness.hpp"
#include "json_util.hpp"

namespace advdef::eval {

using defenses::ColourMode;
using defenses::DefenseChain;
using defenses::SmoothKernel;
using defenses::Transform;
using defenses::TransformKind;

void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected a JSON object");
  for (const auto& [key, value] : j.items())
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw std::invalid_argument(where + ": unknown key '" + key + "'");
}

Json to_json(const nn::LayerSpec& layer) {
  const nn::LayerSpec def;
  Json j;
  j["kind"] = nn::to_string(layer.kind);
  if (!layer.name.empty()) j["name"] = layer.name;
  if (layer.units) j["units"] = layer.units;
  if (layer.kind == nn::LayerKind::conv2d || layer.kind == nn::LayerKind::transpose_conv2d) j["kernel"] = layer.kernel;
  if (layer.rate != def.rate) j["rate"] = layer.rate;
  if (layer.activation != def.activation) j["activation"] = nn::to_string(layer.activation);
  if (!layer.target.empty()) j["target"] = layer.target;
  if (layer.zero_init) j["zero_init"] = true;
  return j;
}

nn::LayerSpec layer_from_json(const Json& j) {
  check_keys(j, {"kind", "name", "units", "kernel", "rate", "activation", "target", "zero_init"}, "layer");
  nn::LayerSpec l;
  l.kind = nn::layer_kind_from_string(j.at("kind").get<std::string>());
  l.name = j.value("name", std::string());
  l.units = j.value("units", std::size_t{0});
  l.kernel = j.value("kernel", std::size_t{3});
  l.rate = j.value("rate", 0.0f);
  if (j.contains("activation")) l.activation = nn::activation_from_string(j.at("activation").get<std::string>());
  if (j.contains("target")) l.target = j.at("target").get<Shape>();
  l.zero_init = j.value("zero_init", false);
  return l;
}

namespace {

Json layers_json(const std::vector<nn::LayerSpec>& layers) {
  Json a = Json::array();
  for (const auto& l : layers) a.push_back(to_json(l));
  return a;
}

std::vector<nn::LayerSpec> layers_from(const Json& a) {
  std::vector<nn::LayerSpec> out;
  for (const auto& l : a) out.push_back(layer_from_json(l));
  return out;
}

std::string smooth_name(SmoothKernel k) { return k == SmoothKernel::uniform ? "uniform" : "gaussian"; }

SmoothKernel smooth_from(const std::string& s) {
  if (s == "uniform") return SmoothKernel::uniform;
  if (s == "gaussian") return SmoothKernel::gaussian;
  throw std::invalid_argument("unknown smoothing kernel '" + s + "'");
}

std::string colour_name(ColourMode m) { return m == ColourMode::rgb ? "rgb" : "ycbcr"; }

ColourMode colour_from(const std::string& s) {
  if (s == "rgb") return ColourMode::rgb;
  if (s == "ycbcr") return ColourMode::ycbcr;
  throw std::invalid_argument("unknown colour mode '" + s + "'");
}

Json transform_json(const Transform& t) {
  Json j;
  j["kind"] = to_string(t.kind);
  switch (t.kind) {
    case TransformKind::vae_patch:
      j["patch"] = t.patch;
      j["stride"] = t.stride;
      [[fallthrough]];
    case TransformKind::vae_whole:
      j["model"] = t.model;
      if (t.samples != 1) j["samples"] = t.samples;
      break;
    case TransformKind::smooth5x5:
      if (t.kernel != SmoothKernel::uniform) j["kernel"] = smooth_name(t.kernel);
      break;
    case TransformKind::dct_quant:
      j["quality"] = t.quality;
      if (t.colour != ColourMode::rgb) j["colour"] = colour_name(t.colour);
      break;
    case TransformKind::ensemble: {
      Json m = Json::array();
      for (const auto& c : t.members) m.push_back(to_json(c));
      j["members"] = m;
      break;
    }
  }
  return j;
}

Transform transform_from(const Json& j) {
  check_keys(j, {"kind", "model", "patch", "stride", "samples", "kernel", "quality", "colour", "members"}, "transform");
  Transform t;
  t.kind = defenses::transform_kind_from_string(j.at("kind").get<std::string>());
  t.model = j.value("model", std::string());
  t.patch = j.value("patch", std::size_t{0});
  t.stride = j.value("stride", std::size_t{0});
  t.samples = j.value("samples", std::size_t{1});
  if (j.contains("kernel")) t.kernel = smooth_from(j.at("kernel").get<std::string>());
  t.quality = j.value("quality", 50);
  if (j.contains("colour")) t.colour = colour_from(j.at("colour").get<std::string>());
  if (j.contains("members"))
    for (const auto& m : j.at("members")) t.members.push_back(chain_from_json(m));
  if ((t.kind == TransformKind::vae_whole || t.kind == TransformKind::vae_patch) && t.model.empty())
    throw std::invalid_argument("transform " + to_string(t.kind) + " needs a model");
  if (t.kind == TransformKind::vae_patch && t.stride == 0)
    throw std::invalid_argument("transform vae_patch needs a stride");
  return t;
}

}  // namespace

Json to_json(const models::ClassifierSpec& spec) {
  Json j;
  j["name"] = spec.name;
  j["dataset"] = models::to_string(spec.dataset);
  j["input"] = spec.input;
  j["classes"] = spec.classes;
  j["layers"] = layers_json(spec.layers);
  return j;
}

models::ClassifierSpec classifier_spec_from_json(const Json& j) {
  if (j.is_string()) return models::classifier_preset(j.get<std::string>());
  check_keys(j, {"preset", "name", "dataset", "input", "classes", "layers"}, "classifier spec");
  models::ClassifierSpec s;
  if (j.contains("preset")) {
    const auto preset = j.at("preset").get<std::string>();
    if (preset == "hires-cnn" && (j.contains("input") || j.contains("classes")))
      s = models::hires_classifier(j.value("input", Shape{64, 64, 3}), j.value("classes", std::size_t{6}));
    else
      s = models::classifier_preset(preset);
  }
  if (j.contains("name")) s.name = j.at("name").get<std::string>();
  if (j.contains("dataset")) s.dataset = models::dataset_tag_from_string(j.at("dataset").get<std::string>());
  if (j.contains("input")) s.input = j.at("input").get<Shape>();
  if (j.contains("classes")) s.classes = j.at("classes").get<std::size_t>();
  if (j.contains("layers")) s.layers = layers_from(j.at("layers"));
  models::validate(s);
  return s;
}

Json to_json(const models::VaeSpec& spec) {
  Json j;
  j["name"] = spec.name;
  j["input"] = spec.input;
  j["latent"] = spec.latent;
  j["beta"] = spec.beta;
  j["clip"] = {spec.clip_lo, spec.clip_hi};
  j["recon"] = models::to_string(spec.recon);
  j["encoder"] = layers_json(spec.encoder);
  j["decoder"] = layers_json(spec.decoder);
  return j;
}

models::VaeSpec vae_spec_from_json(const Json& j) {
  if (j.is_string()) return models::vae_preset(j.get<std::string>());
  check_keys(j, {"preset", "name", "input", "latent", "beta", "clip", "recon", "encoder", "decoder"}, "vae spec");
  models::VaeSpec s;
  if (j.contains("preset")) s = models::vae_preset(j.at("preset").get<std::string>());
  if (j.contains("name")) s.name = j.at("name").get<std::string>();
  if (j.contains("input")) s.input = j.at("input").get<Shape>();
  if (j.contains("latent")) s.latent = j.at("latent").get<std::size_t>();
  if (j.contains("beta")) s.beta = j.at("beta").get<float>();
  if (j.contains("clip")) {
    auto c = j.at("clip").get<std::vector<float>>();
    if (c.size() != 2) throw std::invalid_argument("vae spec: clip must be [lo, hi]");
    s.clip_lo = c[0];
    s.clip_hi = c[1];
  }
  if (j.contains("recon")) s.recon = models::recon_loss_from_string(j.at("recon").get<std::string>());
  if (j.contains("encoder")) s.encoder = layers_from(j.at("encoder"));
  if (j.contains("decoder")) s.decoder = layers_from(j.at("decoder"));
  models::validate(s);
  return s;
}

Json to_json(const DefenseChain& chain) {
  Json j;
  j["name"] = chain.name;
  Json steps = Json::array();
  for (const auto& t : chain.steps) steps.push_back(transform_json(t));
  j["steps"] = steps;
  return j;
}

DefenseChain chain_from_json(const Json& j) {
  check_keys(j, {"name", "steps"}, "defense chain");
  DefenseChain c;
  c.name = j.at("name").get<std::string>();
  if (j.contains("steps"))
    for (const auto& t : j.at("steps")) c.steps.push_back(transform_from(t));
  return c;
}

Json to_json(const attacks::AttackConfig& config) {
  Json j;
  j["kind"] = attacks::to_string(config.kind);
  j["epsilon"] = config.epsilon;
  j["iterations"] = config.iterations;
  j["clip"] = {config.clip_lo, config.clip_hi};
  return j;
}

attacks::AttackConfig attack_from_json(const Json& j) {
  check_keys(j, {"kind", "epsilon", "iterations", "clip"}, "attack");
  attacks::AttackConfig a;
  if (j.contains("kind")) a.kind = attacks::attack_kind_from_string(j.at("kind").get<std::string>());
  a.epsilon = j.value("epsilon", 0.0f);
  a.iterations = j.value("iterations", std::size_t{10});
  if (j.contains("clip")) {
    auto c = j.at("clip").get<std::vector<float>>();
    if (c.size() != 2) throw std::invalid_argument("attack: clip must be [lo, hi]");
    a.clip_lo = c[0];
    a.clip_hi = c[1];
  }
  return a;
}

}  // namespace advdef::eval
