#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "smdk/model.hpp"
#include "smdk/schedules.hpp"

namespace smdk {

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Optimizer { kAdam, kAdamW };

struct TrainConfig {
  ModelConfig model;
  KSchedule ksched;
  double lr0 = 2.5e-4;
  Optimizer optimizer = Optimizer::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  int batch = 4;
  int steps = 1000;
  uint64_t seed = 0;
  std::string data_path;
  double val_fraction = 0.1;
  int val_max_windows = 16;
  double balance_weight = 0.01;
  double thor_weight = 2.0;
  double concrete_reg_weight = 1.0;
  std::string config_echo;  // verbatim run config, stored in checkpoints

  void validate() const;
};

// Adam / AdamW state for one trainable tensor set.
class AdamState {
 public:
  explicit AdamState(const std::vector<Tensor>& params);

  // Bias-corrected update; `step` is 1-based. Frozen tensors never appear in
  // `params` so the router is untouched by construction.
  void step(const std::vector<Tensor>& params, double lr, Optimizer opt,
            double beta1, double beta2, double eps, double weight_decay,
            int step_num);

 private:
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

struct Batch {
  std::vector<std::vector<int>> inputs;   // batch x seq_len token windows
  std::vector<std::vector<int>> targets;  // shifted by one byte
};

// Deterministic epoch-shuffled window iterator over the training prefix.
class BatchIterator {
 public:
  BatchIterator(const std::vector<uint8_t>& corpus, int seq_len, int batch,
                double val_fraction, uint64_t seed);

  Batch next();
  // Validation windows (contiguous suffix), never overlapping training.
  std::vector<std::pair<std::vector<int>, std::vector<int>>> val_windows(
      int max_windows) const;
  size_t train_window_count() const { return positions_.size(); }
  size_t train_len() const { return train_len_; }

 private:
  void reshuffle();
  const std::vector<uint8_t>& corpus_;
  int seq_len_;
  int batch_;
  size_t train_len_;
  std::vector<size_t> positions_;
  size_t cursor_ = 0;
  RngStream shuffle_rng_;
};

// Binary format: magic "SMDK", u32 version=1, u32 header length, JSON header
// (model config, step, tensor index, payload checksum), then concatenated
// little-endian float32 buffers.
struct Checkpoint {
  static constexpr uint32_t kVersion = 1;

  ModelConfig model_cfg;
  uint64_t init_seed = 0;
  int step = 0;
  std::string config_echo;
  std::vector<std::pair<std::string, std::vector<float>>> tensors;
  std::vector<Shape> shapes;

  static Checkpoint from_model(const Model& model, int step,
                               const std::string& config_echo);
  Model to_model() const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  uint64_t payload_checksum() const;
};

struct LogRow {
  int step = 0;
  int k = 0;
  double lr = 0;
  double train_loss_nats = 0;
  double val_bpc_at_k = -1;  // negative = not evaluated this step
  double val_bpc_at_n = -1;
};

std::string log_csv_header();
std::string log_row_csv(const LogRow& row);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LogRow> log;
};

TrainResult train(const TrainConfig& cfg, const std::vector<uint8_t>& corpus);

// Validation BPC of a live model at a given k.
double validate_bpc(Model& model, const BatchIterator& batches, int k,
                    int max_windows);

// Mean cross-entropy in nats over the validation suffix, divided by ln 2.
double bpc(const Checkpoint& ckpt, const std::vector<uint8_t>& data, int k,
           double val_fraction = 1.0, int max_windows = 0);

std::vector<uint8_t> read_corpus(const std::string& path);

}  // namespace smdk
