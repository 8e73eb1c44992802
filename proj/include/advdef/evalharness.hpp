#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "advdef/attacks.hpp"
#include "advdef/defenses.hpp"
#include "advdef/models.hpp"

namespace advdef::eval {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---- idx ingestion ---------------------------------------------------------------

/// Malformed input file; `offset` is the byte position where parsing stopped.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& path, std::uint64_t offset, const std::string& what);
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> bytes;
};

/// Reads an unsigned-byte IDX file (magic 0x801 or 0x803), gzip-compressed
/// or not.
IdxArray read_idx(const fs::path& path);

/// Pairs an image file [N, H, W] with a label file [N]; pixels scaled to [0, 1].
Dataset load_idx(const fs::path& images, const fs::path& labels, std::string name, Split split,
                 std::size_t classes = 10);

/// Standard MNIST file names inside `dir`, with or without a .gz suffix.
Dataset load_mnist(const fs::path& dir, Split split);

// ---- synthetic data ------------------------------------------------------------------

/// Names accepted by synth_dataset.
std::vector<std::string> synth_kinds();

/// Procedural class-conditional images: class k is one of up to eight
/// shapes drawn with random position, size, colours and background
/// gradient. Deterministic per (seed, index), so the first n images do not
/// depend on the total count.
Dataset synth_dataset(const std::string& kind, std::size_t n, std::size_t height, std::size_t width,
                      std::size_t channels, std::size_t classes, std::uint64_t seed, Split split = Split::train);

// ---- spec and chain serialisation ------------------------------------------------------

Json to_json(const nn::LayerSpec& layer);
nn::LayerSpec layer_from_json(const Json& j);
Json to_json(const models::ClassifierSpec& spec);
models::ClassifierSpec classifier_spec_from_json(const Json& j);
Json to_json(const models::VaeSpec& spec);
models::VaeSpec vae_spec_from_json(const Json& j);
Json to_json(const defenses::DefenseChain& chain);
defenses::DefenseChain chain_from_json(const Json& j);
Json to_json(const attacks::AttackConfig& config);
attacks::AttackConfig attack_from_json(const Json& j);

// ---- checkpoints --------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class ModelKind { classifier, vae };

struct Checkpoint {
  ModelKind kind = ModelKind::classifier;
  Json spec;  // classifier or vae spec as produced by to_json
  std::uint64_t seed = 0;
  Json metadata = Json::object();  // epochs, final loss and similar
  models::ParamStore params;

  models::ClassifierSpec classifier_spec() const;
  models::VaeSpec vae_spec() const;
};

Checkpoint make_checkpoint(const models::ClassifierSpec& spec, models::ParamStore params, std::uint64_t seed,
                           Json metadata = Json::object());
Checkpoint make_checkpoint(const models::VaeSpec& spec, models::ParamStore params, std::uint64_t seed,
                           Json metadata = Json::object());

/// Binary layout: "ADVDEFv1", u32 version, u32 length + JSON header, then
/// until end of file one record per tensor: u32 name length + name, u32
/// rank, u32 dims, f32 payload. Integers and floats are little-endian. The
/// header lists non-trainable tensors under "buffers".
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes, const std::string& source = "<memory>");
void save_checkpoint(const fs::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const fs::path& path);

// ---- metrics -------------------------------------------------------------------------

/// Mean over images of ||x - x_adv|| / ||x||, accumulated in double.
double l2_relative_diff(const Tensor& originals, const Tensor& perturbed);

struct Classifier {
  models::ClassifierSpec spec;
  models::ParamStore params;
};

/// Eval-mode argmax predictions, computed in fixed chunks.
std::vector<int> predict_labels(const Classifier& clf, const Tensor& images, std::size_t threads = 1,
                                std::size_t chunk = 128);

/// Fraction of images whose prediction matches the label, after the chain
/// when one is given.
double top1_accuracy(const Classifier& clf, const Tensor& images, std::span<const int> labels,
                     const defenses::DefenseChain* chain = nullptr, const defenses::DefenseContext* ctx = nullptr);

// ---- sweeps -------------------------------------------------------------------------

struct SweepConfig {
  attacks::AttackConfig attack;         // epsilon is overridden per row
  std::vector<float> epsilons;
  std::vector<defenses::DefenseChain> columns;  // an empty chain is the undefended column
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct SweepCell {
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  std::size_t samples = 0;
  std::string error;  // empty on success
};

struct SweepRow {
  double epsilon = 0.0;
  double l2_diff = 0.0;
  std::uint64_t fingerprint = 0;  // adversarial batch shared by every cell
  std::vector<SweepCell> cells;
  std::vector<attacks::AttackFailure> attack_failures;
};

struct SweepResult {
  std::vector<std::string> columns;
  std::vector<SweepRow> rows;

  /// Accuracy of a named column in row r; throws when absent.
  double accuracy(std::size_t row, const std::string& column) const;
  bool operator==(const SweepResult& other) const;
};

/// Attacks the slice once per epsilon and scores every column on that same
/// batch. Failing cells are recorded and the sweep goes on.
SweepResult run_sweep(const Classifier& clf, const Dataset& slice, const SweepConfig& config,
                      const defenses::ModelRegistry& models);

std::string emit_csv(const SweepResult& result);
std::string emit_markdown(const SweepResult& result);
/// Inverse of emit_csv; values carry the 3-decimal precision of the text.
SweepResult parse_csv(const std::string& text);
void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

// ---- experiment configs ---------------------------------------------------------------

struct DataConfig {
  std::string kind = "mnist";  // "mnist" or a synthetic kind
  fs::path dir;                // mnist files
  std::size_t train_size = 0;  // 0 = everything available
  std::size_t test_size = 1000;
  std::size_t height = 64, width = 64, channels = 3, classes = 6;
  std::uint64_t seed = 0;
};

struct ModelConfig {
  std::string classifier = "mnist-cnn";
  std::string vae = "mnist-vae";
  fs::path checkpoint;                      // classifier checkpoint
  std::map<std::string, fs::path> vaes;     // registry name -> vae checkpoint
  models::TrainConfig train;
  float beta = std::numeric_limits<float>::quiet_NaN();  // overrides the preset when set
};

struct ExperimentConfig {
  DataConfig dataset;
  ModelConfig model;
  attacks::AttackConfig attack;
  std::vector<defenses::DefenseChain> defenses;
  std::vector<float> epsilons;
  std::size_t slice = 1000;
  std::size_t threads = 0;
  std::uint64_t seed = 0;
  fs::path out;
};

/// Unknown keys are rejected so typos do not pass silently.
ExperimentConfig config_from_json(const Json& j);
Json to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const fs::path& path);

/// Training and test data described by the config.
std::pair<Dataset, Dataset> load_data(const DataConfig& config);

}  // namespace advdef::eval
