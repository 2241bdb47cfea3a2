#include "oscilloprobe/transformer.hpp"

#include "oscilloprobe/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <exception>
#include <fstream>
#include <mutex>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>

namespace oscilloprobe {

namespace {

using nlohmann::json;
using MapMat = Eigen::Map<RowMatrix>;
using ConstMapMat = Eigen::Map<const RowMatrix>;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

inline double normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }

// Gradients of a batch are reduced over fixed-size chunks in chunk order, so
// the result does not depend on the number of worker threads.
constexpr std::size_t kGradChunk = 8;

}  // namespace

// ---------------------------------------------------------------- config

void ModelConfig::validate(bool allow_any_width) const {
  if (layers < 1 || layers > 5) throw UsageError("ModelConfig: layers must be in [1, 5]");
  const bool standard_width = hidden == 2 || hidden == 4 || hidden == 8 || hidden == 16 || hidden == 32;
  if (hidden < 1 || (!allow_any_width && !standard_width)) {
    throw UsageError("ModelConfig: hidden width must be one of 2, 4, 8, 16, 32");
  }
  if (token_dim != 1 && token_dim != 2) throw UsageError("ModelConfig: token_dim must be 1 or 2");
  if (max_seq_len < 1) throw UsageError("ModelConfig: max_seq_len must be positive");
  if (mlp_multiplier < 1) throw UsageError("ModelConfig: mlp_multiplier must be positive");
}

std::string ModelConfig::to_json() const {
  return json{{"layers", layers},
              {"hidden", hidden},
              {"token_dim", token_dim},
              {"max_seq_len", max_seq_len},
              {"mlp_multiplier", mlp_multiplier},
              {"seed", seed}}
      .dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  ModelConfig c;
  c.layers = j.at("layers").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.token_dim = j.at("token_dim").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.mlp_multiplier = j.at("mlp_multiplier").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

// ---------------------------------------------------------------- sites

std::string_view to_string(SiteKind k) {
  switch (k) {
    case SiteKind::embed: return "embed";
    case SiteKind::attn: return "attn";
    case SiteKind::attn_res: return "attn-res";
    case SiteKind::mlp: return "mlp";
    case SiteKind::mlp_res: return "mlp-res";
  }
  return "?";
}

SiteKind parse_site_kind(std::string_view s) {
  for (auto k : {SiteKind::embed, SiteKind::attn, SiteKind::attn_res, SiteKind::mlp,
                 SiteKind::mlp_res}) {
    if (to_string(k) == s) return k;
  }
  throw UsageError("unknown site kind '" + std::string(s) + "'");
}

std::size_t Site::index() const {
  if (kind == SiteKind::embed) return 0;
  return 1 + 4 * static_cast<std::size_t>(layer - 1) + (static_cast<std::size_t>(kind) - 1);
}

std::string Site::name() const {
  if (kind == SiteKind::embed) return "embed";
  return "L" + std::to_string(layer) + "." + std::string(to_string(kind));
}

Site Site::from_index(std::size_t index) {
  if (index == 0) return {0, SiteKind::embed};
  const std::size_t i = index - 1;
  return {static_cast<int>(i / 4) + 1, static_cast<SiteKind>(i % 4 + 1)};
}

Site Site::parse(std::string_view name) {
  if (name == "embed") return {0, SiteKind::embed};
  const auto dot = name.find('.');
  if (name.size() < 4 || name[0] != 'L' || dot == std::string_view::npos) {
    throw UsageError("bad site name '" + std::string(name) + "'");
  }
  const int layer = std::stoi(std::string(name.substr(1, dot - 1)));
  const SiteKind kind = parse_site_kind(name.substr(dot + 1));
  if (layer < 1 || kind == SiteKind::embed) throw UsageError("bad site name '" + std::string(name) + "'");
  return {layer, kind};
}

std::vector<Site> all_sites(int layers) {
  std::vector<Site> out;
  out.reserve(site_count(layers));
  for (std::size_t i = 0; i < site_count(layers); ++i) out.push_back(Site::from_index(i));
  return out;
}

// ---------------------------------------------------------------- model

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = static_cast<std::size_t>(c.token_dim);
  const std::size_t h = static_cast<std::size_t>(c.hidden);
  const std::size_t m = static_cast<std::size_t>(c.mlp_width());
  const std::size_t per_layer = 4 * (h * h + h) + (h * m + m) + (m * h + h);
  return (d * h + h) + static_cast<std::size_t>(c.max_seq_len) * h +
         static_cast<std::size_t>(c.layers) * per_layer + (h * d + d);
}

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate(true);
  const std::size_t d = static_cast<std::size_t>(config_.token_dim);
  const std::size_t h = static_cast<std::size_t>(config_.hidden);
  const std::size_t m = static_cast<std::size_t>(config_.mlp_width());

  w_emb_ = add_param("embed.w", d, h);
  b_emb_ = add_param("embed.b", 1, h);
  pos_ = add_param("embed.pos", static_cast<std::size_t>(config_.max_seq_len), h);
  for (int l = 1; l <= config_.layers; ++l) {
    const std::string p = "L" + std::to_string(l) + ".";
    LayerParams lp{};
    lp.wq = add_param(p + "attn.wq", h, h);
    lp.bq = add_param(p + "attn.bq", 1, h);
    lp.wk = add_param(p + "attn.wk", h, h);
    lp.bk = add_param(p + "attn.bk", 1, h);
    lp.wv = add_param(p + "attn.wv", h, h);
    lp.bv = add_param(p + "attn.bv", 1, h);
    lp.wo = add_param(p + "attn.wo", h, h);
    lp.bo = add_param(p + "attn.bo", 1, h);
    lp.w1 = add_param(p + "mlp.w1", h, m);
    lp.b1 = add_param(p + "mlp.b1", 1, m);
    lp.w2 = add_param(p + "mlp.w2", m, h);
    lp.b2 = add_param(p + "mlp.b2", 1, h);
    layer_offsets_.push_back(lp);
  }
  w_out_ = add_param("readout.w", h, d);
  b_out_ = add_param("readout.b", 1, d);
  initialize();
}

std::size_t Model::add_param(const std::string& name, std::size_t rows, std::size_t cols) {
  const std::size_t offset = params_.size();
  layout_.push_back({name, offset, rows, cols});
  params_.resize(offset + rows * cols, 0.0);
  return offset;
}

void Model::initialize() {
  Rng rng(config_.seed, 0x6d6f64656cULL);
  const double residual_scale = 1.0 / std::sqrt(2.0 * config_.layers);
  for (const auto& p : layout_) {
    const bool is_bias = p.rows == 1 && p.name != "embed.w";
    if (is_bias) continue;
    double stddev = 1.0 / std::sqrt(static_cast<double>(p.rows));
    if (p.name == "embed.pos") stddev = 0.1;
    if (p.name.ends_with("attn.wo") || p.name.ends_with("mlp.w2")) stddev *= residual_scale;
    for (std::size_t i = 0; i < p.size(); ++i) params_[p.offset + i] = stddev * rng.normal();
  }
}

const ParamInfo& Model::param(std::string_view name) const {
  for (const auto& p : layout_) {
    if (p.name == name) return p;
  }
  throw UsageError("no parameter named '" + std::string(name) + "'");
}

Eigen::Map<const RowMatrix> Model::mat(std::size_t offset, std::size_t rows, std::size_t cols) const {
  return {params_.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

RowMatrix Model::forward(const Eigen::Ref<const RowMatrix>& tokens, const ActivationHook* hook) const {
  ForwardCache cache;
  forward(tokens, cache, hook);
  return std::move(cache.out);
}

void Model::forward(const Eigen::Ref<const RowMatrix>& tokens, ForwardCache& cache,
                    const ActivationHook* hook) const {
  const auto t = tokens.rows();
  if (t > config_.max_seq_len) throw UsageError("forward: sequence longer than max_seq_len");
  if (t < 1) throw UsageError("forward: empty sequence");
  if (tokens.cols() != config_.token_dim) throw UsageError("forward: token width mismatch");

  const std::size_t d = static_cast<std::size_t>(config_.token_dim);
  const std::size_t h = static_cast<std::size_t>(config_.hidden);
  const std::size_t m = static_cast<std::size_t>(config_.mlp_width());
  const double scale = 1.0 / std::sqrt(static_cast<double>(h));

  cache.h0.noalias() = tokens * mat(w_emb_, d, h);
  cache.h0.rowwise() += mat(b_emb_, 1, h).row(0);
  cache.h0 += mat(pos_, static_cast<std::size_t>(config_.max_seq_len), h).topRows(t);
  if (hook) (*hook)(0, cache.h0);

  cache.layers.resize(layer_offsets_.size());
  const RowMatrix* h_prev = &cache.h0;
  for (std::size_t l = 0; l < layer_offsets_.size(); ++l) {
    const LayerParams& lp = layer_offsets_[l];
    LayerCache& lc = cache.layers[l];
    const std::size_t site_base = 1 + 4 * l;

    lc.h_in = *h_prev;
    lc.q.noalias() = lc.h_in * mat(lp.wq, h, h);
    lc.q.rowwise() += mat(lp.bq, 1, h).row(0);
    lc.k.noalias() = lc.h_in * mat(lp.wk, h, h);
    lc.k.rowwise() += mat(lp.bk, 1, h).row(0);
    lc.v.noalias() = lc.h_in * mat(lp.wv, h, h);
    lc.v.rowwise() += mat(lp.bv, 1, h).row(0);

    // Causal softmax: shift each row by its visible maximum, mask the future
    // with -inf and exponentiate the whole block at once.
    lc.probs.noalias() = (lc.q * lc.k.transpose()) * scale;
    for (Eigen::Index i = 0; i < t; ++i) {
      auto row = lc.probs.row(i);
      row.head(i + 1).array() -= row.head(i + 1).maxCoeff();
      row.tail(t - i - 1).setConstant(-std::numeric_limits<double>::infinity());
    }
    lc.probs.array() = lc.probs.array().exp();
    for (Eigen::Index i = 0; i < t; ++i) lc.probs.row(i).head(i + 1) /= lc.probs.row(i).head(i + 1).sum();
    lc.ctx.noalias() = lc.probs.triangularView<Eigen::Lower>() * lc.v;
    lc.attn.noalias() = lc.ctx * mat(lp.wo, h, h);
    lc.attn.rowwise() += mat(lp.bo, 1, h).row(0);
    if (hook) (*hook)(site_base + 0, lc.attn);

    lc.r = lc.h_in + lc.attn;
    if (hook) (*hook)(site_base + 1, lc.r);

    lc.z1.noalias() = lc.r * mat(lp.w1, h, m);
    lc.z1.rowwise() += mat(lp.b1, 1, m).row(0);
    lc.cdf = lc.z1.unaryExpr([](double x) { return normal_cdf(x); });
    lc.pdf.array() = (-0.5 * lc.z1.array().square()).exp() * kInvSqrt2Pi;
    lc.g1.array() = lc.z1.array() * lc.cdf.array();
    lc.mlp.noalias() = lc.g1 * mat(lp.w2, m, h);
    lc.mlp.rowwise() += mat(lp.b2, 1, h).row(0);
    if (hook) (*hook)(site_base + 2, lc.mlp);

    RowMatrix& next = (l + 1 < layer_offsets_.size()) ? cache.layers[l + 1].h_in : cache.h_final;
    next = lc.r + lc.mlp;
    if (hook) (*hook)(site_base + 3, next);
    h_prev = &next;
  }
  if (layer_offsets_.empty()) cache.h_final = cache.h0;

  cache.out.noalias() = cache.h_final * mat(w_out_, h, d);
  cache.out.rowwise() += mat(b_out_, 1, d).row(0);
}

void Model::backward(const Eigen::Ref<const RowMatrix>& tokens, ForwardCache& cache,
                     const Eigen::Ref<const RowMatrix>& d_pred, std::span<double> grad) const {
  if (grad.size() != params_.size()) throw UsageError("backward: gradient buffer size mismatch");
  const auto t = tokens.rows();
  const std::size_t d = static_cast<std::size_t>(config_.token_dim);
  const std::size_t h = static_cast<std::size_t>(config_.hidden);
  const std::size_t m = static_cast<std::size_t>(config_.mlp_width());
  const double scale = 1.0 / std::sqrt(static_cast<double>(h));
  auto g = [&](std::size_t offset, std::size_t rows, std::size_t cols) {
    return MapMat(grad.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  };

  g(w_out_, h, d).noalias() += cache.h_final.transpose() * d_pred;
  g(b_out_, 1, d) += d_pred.colwise().sum();
  cache.dh.noalias() = d_pred * mat(w_out_, h, d).transpose();

  for (std::size_t li = layer_offsets_.size(); li-- > 0;) {
    const LayerParams& lp = layer_offsets_[li];
    const LayerCache& lc = cache.layers[li];

    // h' = r + W2 gelu(W1 r)
    g(lp.w2, m, h).noalias() += lc.g1.transpose() * cache.dh;
    g(lp.b2, 1, h) += cache.dh.colwise().sum();
    cache.dz1.noalias() = cache.dh * mat(lp.w2, m, h).transpose();
    cache.dz1.array() *= lc.cdf.array() + lc.z1.array() * lc.pdf.array();
    g(lp.w1, h, m).noalias() += lc.r.transpose() * cache.dz1;
    g(lp.b1, 1, m) += cache.dz1.colwise().sum();
    cache.dr = cache.dh;
    cache.dr.noalias() += cache.dz1 * mat(lp.w1, h, m).transpose();

    // r = h + Wo (P V)
    g(lp.wo, h, h).noalias() += lc.ctx.transpose() * cache.dr;
    g(lp.bo, 1, h) += cache.dr.colwise().sum();
    cache.dctx.noalias() = cache.dr * mat(lp.wo, h, h).transpose();

    cache.dp.noalias() = cache.dctx * lc.v.transpose();
    cache.dv.noalias() = lc.probs.transpose().triangularView<Eigen::Upper>() * cache.dctx;
    cache.ds.resize(t, t);
    for (Eigen::Index i = 0; i < t; ++i) {
      double dot = 0.0;
      for (Eigen::Index j = 0; j <= i; ++j) dot += cache.dp(i, j) * lc.probs(i, j);
      for (Eigen::Index j = 0; j <= i; ++j) {
        cache.ds(i, j) = lc.probs(i, j) * (cache.dp(i, j) - dot) * scale;
      }
      for (Eigen::Index j = i + 1; j < t; ++j) cache.ds(i, j) = 0.0;
    }
    cache.dq.noalias() = cache.ds.triangularView<Eigen::Lower>() * lc.k;
    cache.dk.noalias() = cache.ds.transpose().triangularView<Eigen::Upper>() * lc.q;

    g(lp.wq, h, h).noalias() += lc.h_in.transpose() * cache.dq;
    g(lp.bq, 1, h) += cache.dq.colwise().sum();
    g(lp.wk, h, h).noalias() += lc.h_in.transpose() * cache.dk;
    g(lp.bk, 1, h) += cache.dk.colwise().sum();
    g(lp.wv, h, h).noalias() += lc.h_in.transpose() * cache.dv;
    g(lp.bv, 1, h) += cache.dv.colwise().sum();

    cache.dh = cache.dr;
    cache.dh.noalias() += cache.dq * mat(lp.wq, h, h).transpose();
    cache.dh.noalias() += cache.dk * mat(lp.wk, h, h).transpose();
    cache.dh.noalias() += cache.dv * mat(lp.wv, h, h).transpose();
  }

  g(w_emb_, d, h).noalias() += tokens.transpose() * cache.dh;
  g(b_emb_, 1, h) += cache.dh.colwise().sum();
  g(pos_, static_cast<std::size_t>(config_.max_seq_len), h).topRows(t) += cache.dh;
}

void Model::save(const std::filesystem::path& path, int epoch) const {
  json params = json::object();
  for (const auto& p : layout_) {
    params[p.name] = {{"shape", {p.rows, p.cols}},
                      {"data", std::vector<double>(params_.begin() + static_cast<std::ptrdiff_t>(p.offset),
                                                   params_.begin() + static_cast<std::ptrdiff_t>(p.offset + p.size()))}};
  }
  json j{{"format", "oscilloprobe-checkpoint"},
         {"version", 1},
         {"config", json::parse(config_.to_json())},
         {"epoch", epoch},
         {"parameters", std::move(params)}};
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw FormatError("cannot write checkpoint " + tmp);
    out << j.dump() << '\n';
  }
  std::filesystem::rename(tmp, path);
}

Model Model::load(const std::filesystem::path& path, int* epoch) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const json j = json::parse(in);
  if (j.value("format", "") != "oscilloprobe-checkpoint" || j.value("version", 0) != 1) {
    throw FormatError(path.string() + ": not a version-1 checkpoint");
  }
  Model model(ModelConfig::from_json(j.at("config").dump()));
  const json& params = j.at("parameters");
  for (const auto& p : model.layout_) {
    const json& entry = params.at(p.name);
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    const auto data = entry.at("data").get<std::vector<double>>();
    if (shape.size() != 2 || shape[0] != p.rows || shape[1] != p.cols || data.size() != p.size()) {
      throw FormatError(path.string() + ": shape mismatch for " + p.name);
    }
    std::copy(data.begin(), data.end(), model.params_.begin() + static_cast<std::ptrdiff_t>(p.offset));
  }
  if (epoch) *epoch = j.value("epoch", -1);
  return model;
}

// ---------------------------------------------------------------- loss & gradients

double masked_mse(const Eigen::Ref<const RowMatrix>& predictions,
                  const Eigen::Ref<const RowMatrix>& targets, const std::vector<bool>& mask) {
  if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols() ||
      static_cast<std::size_t>(predictions.rows()) != mask.size()) {
    throw UsageError("masked_mse: shape mismatch");
  }
  double sum = 0.0;
  std::size_t count = 0;
  for (Eigen::Index i = 0; i < predictions.rows(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    sum += (predictions.row(i) - targets.row(i)).squaredNorm();
    count += static_cast<std::size_t>(predictions.cols());
  }
  if (count == 0) throw UsageError("masked_mse: empty mask");
  return sum / static_cast<double>(count);
}

RowMatrix next_token_targets(const TokenizedDataset& data, std::size_t series) {
  const auto tokens = data.series(series);
  RowMatrix out = RowMatrix::Zero(tokens.rows(), tokens.cols());
  if (tokens.rows() > 1) out.topRows(tokens.rows() - 1) = tokens.bottomRows(tokens.rows() - 1);
  return out;
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
  std::vector<std::jthread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  threads.clear();
  if (error) std::rethrow_exception(error);
}

namespace {

BatchGradient gradients_impl(const Model& model, const TokenizedDataset& data,
                             std::span<const std::size_t> batch, double loss_scale, int jobs) {
  if (batch.empty()) throw UsageError("compute_gradients: empty batch");
  const std::size_t masked = std::count(data.mask.begin(), data.mask.end(), true);
  if (masked == 0) throw UsageError("compute_gradients: empty loss mask");
  const double n_entries = static_cast<double>(batch.size() * masked * data.token_dim);
  const std::size_t n_params = model.parameter_count();

  const std::size_t n_chunks = (batch.size() + kGradChunk - 1) / kGradChunk;
  std::vector<AlignedBuffer> chunk_grads(n_chunks);
  std::vector<double> chunk_loss(n_chunks, 0.0);

  parallel_for(n_chunks, jobs, [&](std::size_t c) {
    thread_local ForwardCache cache;
    thread_local RowMatrix d_pred;
    auto& grad = chunk_grads[c];
    grad.assign(n_params, 0.0);
    const std::size_t begin = c * kGradChunk;
    const std::size_t end = std::min(batch.size(), begin + kGradChunk);
    for (std::size_t b = begin; b < end; ++b) {
      const std::size_t s = batch[b];
      const auto tokens = data.series(s);
      model.forward(tokens, cache, nullptr);
      const auto t = tokens.rows();
      d_pred.setZero(t, tokens.cols());
      for (Eigen::Index i = 0; i + 1 < t; ++i) {
        if (!data.mask[static_cast<std::size_t>(i)]) continue;
        const auto diff = cache.out.row(i) - tokens.row(i + 1);
        chunk_loss[c] += diff.squaredNorm();
        d_pred.row(i) = (2.0 * loss_scale / n_entries) * diff;
      }
      model.backward(tokens, cache, d_pred, grad);
    }
  });

  BatchGradient out;
  out.grad.assign(n_params, 0.0);
  double loss = 0.0;
  for (std::size_t c = 0; c < n_chunks; ++c) {
    loss += chunk_loss[c];
    for (std::size_t p = 0; p < n_params; ++p) out.grad[p] += chunk_grads[c][p];
  }
  out.loss = loss_scale * loss / n_entries;
  if (!std::isfinite(out.loss)) {
    std::ostringstream os;
    os << "non-finite loss on batch of " << batch.size() << " series (first ids:";
    for (std::size_t i = 0; i < std::min<std::size_t>(batch.size(), 5); ++i) os << ' ' << batch[i];
    os << ")";
    throw TrainingError(os.str());
  }
  return out;
}

}  // namespace

BatchGradient compute_gradients(const Model& model, const TokenizedDataset& data,
                                std::span<const std::size_t> batch, double loss_scale) {
  return gradients_impl(model, data, batch, loss_scale, 1);
}

std::vector<double> evaluate(const Model& model, const TokenizedDataset& data,
                             const ActivationHook* hook) {
  const auto positions = data.masked_positions();
  if (positions.empty()) throw UsageError("evaluate: empty loss mask");
  std::vector<double> sums(positions.size(), 0.0);
  ForwardCache cache;
  for (std::size_t s = 0; s < data.n_series; ++s) {
    const auto tokens = data.series(s);
    model.forward(tokens, cache, hook);
    for (std::size_t c = 0; c < positions.size(); ++c) {
      const auto i = static_cast<Eigen::Index>(positions[c]);
      sums[c] += (cache.out.row(i) - tokens.row(i + 1)).squaredNorm();
    }
  }
  const double denom = static_cast<double>(data.n_series * data.token_dim);
  for (auto& v : sums) v /= denom;
  return sums;
}

double dataset_loss(const Model& model, const TokenizedDataset& data, const ActivationHook* hook) {
  const auto per_context = evaluate(model, data, hook);
  return std::accumulate(per_context.begin(), per_context.end(), 0.0) /
         static_cast<double>(per_context.size());
}

// ---------------------------------------------------------------- training

std::string TrainReport::to_json(bool include_timing) const {
  json j{{"loss_curve", loss_curve},
         {"mse_train_by_context", mse_train_by_context},
         {"mse_ood_by_context", mse_ood_by_context},
         {"checkpoint_path", checkpoint_path},
         {"intermediate_checkpoints", intermediate_checkpoints},
         {"epochs_completed", epochs_completed},
         {"aborted", aborted},
         {"abort_reason", abort_reason},
         {"adam", {{"lr", lr}, {"beta1", beta1}, {"beta2", beta2}, {"eps", eps}}},
         {"batch", batch}};
  if (include_timing) j["wall_seconds"] = wall_seconds;
  return j.dump(2);
}

TrainReport train(Model& model, const TokenizedDataset& train_data, const TrainHyper& hyper,
                  const TokenizedDataset* ood_data) {
  if (hyper.epochs < 0 || hyper.batch <= 0 || hyper.lr < 0.0) {
    throw UsageError("train: epochs, batch and lr must be non-negative (batch positive)");
  }
  if (static_cast<int>(train_data.token_dim) != model.config().token_dim ||
      static_cast<int>(train_data.seq_len) > model.config().max_seq_len) {
    throw UsageError("train: dataset does not fit the model configuration");
  }
  const auto start = std::chrono::steady_clock::now();
  TrainReport report;
  report.lr = hyper.lr;
  report.beta1 = hyper.beta1;
  report.beta2 = hyper.beta2;
  report.eps = hyper.eps;
  report.batch = hyper.batch;

  auto params = model.parameters();
  std::vector<double> m1(params.size(), 0.0);
  std::vector<double> m2(params.size(), 0.0);
  std::vector<std::size_t> order(train_data.n_series);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (!hyper.checkpoint_dir.empty()) std::filesystem::create_directories(hyper.checkpoint_dir);

  std::int64_t step = 0;
  for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
    Rng shuffler(hyper.shuffle_seed, static_cast<std::uint64_t>(epoch));
    shuffler.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    try {
      for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(hyper.batch)) {
        const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(hyper.batch));
        const std::span<const std::size_t> batch(order.data() + b, e - b);
        const BatchGradient bg = gradients_impl(model, train_data, batch, 1.0, hyper.jobs);
        epoch_loss += bg.loss * static_cast<double>(batch.size());
        ++step;
        const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
        for (std::size_t p = 0; p < params.size(); ++p) {
          const double gp = bg.grad[p];
          m1[p] = hyper.beta1 * m1[p] + (1.0 - hyper.beta1) * gp;
          m2[p] = hyper.beta2 * m2[p] + (1.0 - hyper.beta2) * gp * gp;
          params[p] -= hyper.lr * (m1[p] / c1) / (std::sqrt(m2[p] / c2) + hyper.eps);
        }
      }
    } catch (const TrainingError& e) {
      report.aborted = true;
      report.abort_reason = "epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }
    epoch_loss /= static_cast<double>(order.size());
    report.loss_curve.push_back(epoch_loss);
    report.epochs_completed = epoch;
    if (!std::isfinite(epoch_loss) || epoch_loss > hyper.divergence_threshold) {
      report.aborted = true;
      report.abort_reason = "epoch " + std::to_string(epoch) + ": loss " + format_double(epoch_loss) +
                            " exceeds divergence threshold";
      break;
    }
    if (hyper.on_epoch) hyper.on_epoch(epoch, epoch_loss);
    if (hyper.checkpoint_every > 0 && !hyper.checkpoint_dir.empty() &&
        epoch % hyper.checkpoint_every == 0 && epoch != hyper.epochs) {
      const auto path = hyper.checkpoint_dir / ("epoch-" + std::to_string(epoch) + ".json");
      model.save(path, epoch);
      report.intermediate_checkpoints.push_back(path.string());
    }
  }

  if (!report.aborted) {
    report.mse_train_by_context = evaluate(model, train_data);
    if (ood_data) report.mse_ood_by_context = evaluate(model, *ood_data);
  }
  if (!hyper.checkpoint_dir.empty()) {
    const auto path = hyper.checkpoint_dir / "final.json";
    model.save(path, report.epochs_completed);
    report.checkpoint_path = path.string();
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// ---------------------------------------------------------------- capture

std::size_t HiddenStateCapture::site_slot(const Site& site) const {
  for (std::size_t i = 0; i < sites.size(); ++i) {
    if (sites[i] == site) return i;
  }
  throw UsageError("capture has no site " + site.name());
}

std::size_t HiddenStateCapture::position_slot(std::size_t position) const {
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] == position) return i;
  }
  throw UsageError("capture has no position " + std::to_string(position));
}

const RowMatrix& HiddenStateCapture::at(const Site& site, std::size_t position) const {
  return data[site_slot(site)][position_slot(position)];
}

HiddenStateCapture capture(const Model& model, const TokenizedDataset& data,
                           const std::vector<Site>& sites, const std::vector<std::size_t>& positions) {
  HiddenStateCapture hs;
  hs.sites = sites;
  hs.positions = positions;
  hs.n_series = data.n_series;
  hs.hidden = static_cast<std::size_t>(model.config().hidden);
  const std::size_t total_sites = site_count(model.config().layers);
  std::vector<int> slot_of(total_sites, -1);
  for (std::size_t i = 0; i < sites.size(); ++i) {
    if (sites[i].index() >= total_sites) throw UsageError("capture: site beyond model depth");
    slot_of[sites[i].index()] = static_cast<int>(i);
  }
  for (auto p : positions) {
    if (p >= data.seq_len) throw UsageError("capture: position beyond sequence length");
  }
  hs.data.assign(sites.size(), std::vector<RowMatrix>(positions.size(),
                                                     RowMatrix(data.n_series, hs.hidden)));
  std::size_t current = 0;
  const ActivationHook hook = [&](std::size_t site, RowMatrix& act) {
    const int slot = slot_of[site];
    if (slot < 0) return;
    auto& per_pos = hs.data[static_cast<std::size_t>(slot)];
    for (std::size_t p = 0; p < positions.size(); ++p) {
      per_pos[p].row(static_cast<Eigen::Index>(current)) =
          act.row(static_cast<Eigen::Index>(positions[p]));
    }
  };
  ForwardCache cache;
  for (current = 0; current < data.n_series; ++current) {
    model.forward(data.series(current), cache, &hook);
  }
  return hs;
}

void HiddenStateCapture::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  for (std::size_t s = 0; s < sites.size(); ++s) {
    const json header{{"format", "oscilloprobe-hs"},
                      {"version", 1},
                      {"site", sites[s].name()},
                      {"n_series", n_series},
                      {"hidden", hidden},
                      {"positions", positions}};
    const auto path = dir / ("site-" + sites[s].name() + ".bin");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    out << header.dump() << '\n';
    for (const auto& m : data[s]) {
      out.write(reinterpret_cast<const char*>(m.data()),
                static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
  }
}

HiddenStateCapture HiddenStateCapture::load(const std::filesystem::path& dir) {
  std::vector<std::pair<std::size_t, std::filesystem::path>> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("site-", 0) == 0 && entry.path().extension() == ".bin") {
      const Site site = Site::parse(name.substr(5, name.size() - 9));
      files.emplace_back(site.index(), entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw FormatError("no site tensors in " + dir.string());

  HiddenStateCapture hs;
  for (const auto& [index, path] : files) {
    std::ifstream in(path, std::ios::binary);
    std::string line;
    std::getline(in, line);
    const json header = json::parse(line);
    if (header.value("format", "") != "oscilloprobe-hs") throw FormatError(path.string() + ": bad header");
    const auto n = header.at("n_series").get<std::size_t>();
    const auto h = header.at("hidden").get<std::size_t>();
    const auto positions = header.at("positions").get<std::vector<std::size_t>>();
    if (hs.sites.empty()) {
      hs.n_series = n;
      hs.hidden = h;
      hs.positions = positions;
    } else if (n != hs.n_series || h != hs.hidden || positions != hs.positions) {
      throw FormatError(path.string() + ": inconsistent with other site tensors");
    }
    std::vector<RowMatrix> per_pos(positions.size(), RowMatrix(n, h));
    for (auto& m : per_pos) {
      in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
    if (!in) throw FormatError(path.string() + ": truncated tensor");
    hs.sites.push_back(Site::from_index(index));
    hs.data.push_back(std::move(per_pos));
  }
  return hs;
}

}  // namespace oscilloprobe
