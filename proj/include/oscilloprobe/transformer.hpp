#pragma once

#include "oscilloprobe/common.hpp"
#include "oscilloprobe/dynamics.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace oscilloprobe {

struct ModelConfig {
  int layers = 2;
  int hidden = 16;
  int token_dim = 1;
  int max_seq_len = 130;
  int mlp_multiplier = 4;
  std::uint64_t seed = 0;

  // L in [1, 5]; H in {2, 4, 8, 16, 32} unless `allow_any_width`.
  void validate(bool allow_any_width = false) const;
  int mlp_width() const { return mlp_multiplier * hidden; }
  std::string to_json() const;
  static ModelConfig from_json(const std::string& json);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Where activations are read or written. `embed` lives at layer 0; the four
// in-layer sites use layers 1..L.
enum class SiteKind { embed, attn, attn_res, mlp, mlp_res };

std::string_view to_string(SiteKind k);
SiteKind parse_site_kind(std::string_view s);

struct Site {
  int layer = 0;
  SiteKind kind = SiteKind::embed;

  std::size_t index() const;  // 0 for embed, then 4 per layer
  std::string name() const;   // "embed", "L1.attn-res", ...
  static Site from_index(std::size_t index);
  static Site parse(std::string_view name);
  friend bool operator==(const Site&, const Site&) = default;
};

std::vector<Site> all_sites(int layers);  // 4L + 1 entries
inline std::size_t site_count(int layers) { return 4 * static_cast<std::size_t>(layers) + 1; }

struct ParamInfo {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

// Called with (site index, activations of one sequence) during forward; may
// overwrite the activations in place.
using ActivationHook = std::function<void(std::size_t site, RowMatrix& act)>;

// Per-sequence activations kept for the backward pass, plus scratch space.
struct LayerCache {
  RowMatrix h_in, q, k, v, probs, ctx, attn, r, z1, cdf, pdf, g1, mlp;
};

struct ForwardCache {
  RowMatrix h0;
  std::vector<LayerCache> layers;
  RowMatrix h_final;
  RowMatrix out;
  // backward scratch
  RowMatrix dh, dr, dz1, dctx, dp, ds, dq, dk, dv;
};

// Decoder-only transformer with one attention head and no normalization.
// Per layer: a = Attn(h); r = h + a; m = MLP(r); h' = r + m.
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }
  const std::vector<ParamInfo>& layout() const { return layout_; }
  std::size_t parameter_count() const { return params_.size(); }
  const ParamInfo& param(std::string_view name) const;

  // Predictions for every position of one sequence (T x token_dim). Throws
  // UsageError when T exceeds max_seq_len or the token width is wrong.
  RowMatrix forward(const Eigen::Ref<const RowMatrix>& tokens,
                    const ActivationHook* hook = nullptr) const;
  void forward(const Eigen::Ref<const RowMatrix>& tokens, ForwardCache& cache,
               const ActivationHook* hook) const;

  // Accumulates d(loss)/d(params) into `grad` given d(loss)/d(predictions).
  void backward(const Eigen::Ref<const RowMatrix>& tokens, ForwardCache& cache,
                const Eigen::Ref<const RowMatrix>& d_pred, std::span<double> grad) const;

  void save(const std::filesystem::path& path, int epoch = -1) const;
  static Model load(const std::filesystem::path& path, int* epoch = nullptr);

 private:
  struct LayerParams {
    std::size_t wq, bq, wk, bk, wv, bv, wo, bo, w1, b1, w2, b2;
  };
  std::size_t add_param(const std::string& name, std::size_t rows, std::size_t cols);
  void initialize();

  Eigen::Map<const RowMatrix> mat(std::size_t offset, std::size_t rows, std::size_t cols) const;

  ModelConfig config_;
  AlignedBuffer params_;
  std::vector<ParamInfo> layout_;
  std::size_t w_emb_ = 0, b_emb_ = 0, pos_ = 0, w_out_ = 0, b_out_ = 0;
  std::vector<LayerParams> layer_offsets_;
};

// Closed-form parameter count for a config.
std::size_t expected_parameter_count(const ModelConfig& config);

// Mean squared error over masked positions and output dimensions. Throws
// UsageError on shape mismatch or an empty mask.
double masked_mse(const Eigen::Ref<const RowMatrix>& predictions,
                  const Eigen::Ref<const RowMatrix>& targets, const std::vector<bool>& mask);

// Next-token targets of one series: row i holds token i+1 (last row zero).
RowMatrix next_token_targets(const TokenizedDataset& data, std::size_t series);

struct BatchGradient {
  double loss = 0.0;
  AlignedBuffer grad;
};

// Loss over the given series (mean over all masked entries) and its exact
// gradient, scaled by `loss_scale`. Throws TrainingError on a non-finite loss.
BatchGradient compute_gradients(const Model& model, const TokenizedDataset& data,
                                std::span<const std::size_t> batch, double loss_scale = 1.0);

double dataset_loss(const Model& model, const TokenizedDataset& data,
                    const ActivationHook* hook = nullptr);

struct TrainHyper {
  int epochs = 2000;
  double lr = 1e-3;
  int batch = 64;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t shuffle_seed = 0;
  int checkpoint_every = 0;  // epochs; 0 disables intermediate checkpoints
  std::filesystem::path checkpoint_dir;
  double divergence_threshold = 1e6;
  int jobs = 1;
  std::function<void(int epoch, double loss)> on_epoch;
};

struct TrainReport {
  std::vector<double> loss_curve;  // mean batch loss per epoch
  std::vector<double> mse_train_by_context;
  std::vector<double> mse_ood_by_context;
  double wall_seconds = 0.0;
  std::string checkpoint_path;
  std::vector<std::string> intermediate_checkpoints;
  int epochs_completed = 0;
  bool aborted = false;
  std::string abort_reason;
  double lr = 0.0, beta1 = 0.0, beta2 = 0.0, eps = 0.0;
  int batch = 0;

  // Without timing, reports from repeated runs compare equal.
  std::string to_json(bool include_timing = true) const;
};

// Adam with a fixed learning rate and per-epoch seeded shuffling. Stops early
// (aborted = true) when the loss is non-finite or exceeds the threshold.
TrainReport train(Model& model, const TokenizedDataset& train_data, const TrainHyper& hyper,
                  const TokenizedDataset* ood_data = nullptr);

// MSE_M(c): error of predictions made at the c-th masked position.
std::vector<double> evaluate(const Model& model, const TokenizedDataset& data,
                             const ActivationHook* hook = nullptr);

// Activations of selected sites at selected token positions, stored per
// (site, position) as an n_series x H matrix.
struct HiddenStateCapture {
  std::vector<Site> sites;
  std::vector<std::size_t> positions;
  std::size_t n_series = 0;
  std::size_t hidden = 0;
  std::vector<std::vector<RowMatrix>> data;  // [site][position]

  std::size_t site_slot(const Site& site) const;  // throws UsageError if absent
  std::size_t position_slot(std::size_t position) const;
  const RowMatrix& at(const Site& site, std::size_t position) const;

  void save(const std::filesystem::path& dir) const;  // one file per site
  static HiddenStateCapture load(const std::filesystem::path& dir);
};

HiddenStateCapture capture(const Model& model, const TokenizedDataset& data,
                           const std::vector<Site>& sites, const std::vector<std::size_t>& positions);

// Runs `fn(i)` for i in [0, n) on up to `jobs` threads.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

}  // namespace oscilloprobe
