#include "oscilloprobe/transformer.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

using namespace oscilloprobe;

namespace {

TokenizedDataset small_linreg(std::size_t n, std::size_t len, std::uint64_t seed) {
  return tokenize(generate_linreg(n, len, {-0.75, 0.75}, {-0.75, 0.75}, seed));
}

TokenizedDataset small_sho(std::size_t n, std::size_t len, std::uint64_t seed) {
  auto cfg = ShoConfig::standard(DatasetKind::sho_underdamped, Split::train);
  cfg.n_series = n;
  cfg.length = len;
  return tokenize(generate_sho(cfg, seed));
}

// Loss recomputed from forward() alone: mean squared error of next-token
// predictions over masked positions.
double reference_loss(const Model& model, const TokenizedDataset& data,
                      const std::vector<std::size_t>& batch) {
  double sum = 0.0;
  std::size_t count = 0;
  for (auto s : batch) {
    const auto tokens = data.series(s);
    const RowMatrix out = model.forward(tokens);
    for (std::size_t i = 0; i + 1 < data.seq_len; ++i) {
      if (!data.mask[i]) continue;
      for (std::size_t d = 0; d < data.token_dim; ++d) {
        const double e = out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) -
                         tokens(static_cast<Eigen::Index>(i + 1), static_cast<Eigen::Index>(d));
        sum += e * e;
        ++count;
      }
    }
  }
  return sum / static_cast<double>(count);
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.layers = 0;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c.layers = 6;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c.layers = 2;
  c.hidden = 3;
  CHECK_THROWS_AS(c.validate(), UsageError);
  CHECK_NOTHROW(c.validate(true));
  c.hidden = 16;
  CHECK(ModelConfig::from_json(c.to_json()) == c);
}

TEST_CASE("sites") {
  const auto sites = all_sites(2);
  REQUIRE(sites.size() == 9);
  CHECK(sites[0].name() == "embed");
  CHECK(sites[1].name() == "L1.attn");
  CHECK(sites[2].name() == "L1.attn-res");
  CHECK(sites[3].name() == "L1.mlp");
  CHECK(sites[4].name() == "L1.mlp-res");
  CHECK(sites[8].name() == "L2.mlp-res");
  for (std::size_t i = 0; i < sites.size(); ++i) {
    CHECK(sites[i].index() == i);
    CHECK(Site::parse(sites[i].name()) == sites[i]);
  }
  CHECK_THROWS_AS(Site::parse("L1.resid"), UsageError);
  CHECK_THROWS_AS(Site::parse("L0.attn"), UsageError);
}

TEST_CASE("parameter count matches the closed form and the layout") {
  for (int layers : {1, 2, 4}) {
    for (int hidden : {2, 4, 16}) {
      for (int dim : {1, 2}) {
        ModelConfig c;
        c.layers = layers;
        c.hidden = hidden;
        c.token_dim = dim;
        const Model m(c);
        CHECK(m.parameter_count() == expected_parameter_count(c));
        std::size_t total = 0;
        for (const auto& p : m.layout()) {
          CHECK(p.offset == total);
          total += p.size();
        }
        CHECK(total == m.parameter_count());
      }
    }
  }
  // Hand count for L=1, H=2, d=1, T=3, MLP 8:
  // embed 2+2, pos 6, attention 4*(4+2)=24, mlp 16+8+16+2=42, readout 2+1.
  ModelConfig c{1, 2, 1, 3, 4, 0};
  CHECK(expected_parameter_count(c) == 4 + 6 + 24 + 42 + 3);
}

TEST_CASE("forward: shapes, errors and determinism") {
  ModelConfig c{2, 8, 2, 20, 4, 5};
  const Model a(c), b(c);
  CHECK(std::equal(a.parameters().begin(), a.parameters().end(), b.parameters().begin()));
  c.seed = 6;
  const Model other(c);
  CHECK_FALSE(std::equal(a.parameters().begin(), a.parameters().end(), other.parameters().begin()));

  const TokenizedDataset td = small_sho(2, 20, 1);
  const RowMatrix out = a.forward(td.series(0));
  CHECK(out.rows() == 20);
  CHECK(out.cols() == 2);
  CHECK(out.allFinite());
  RowMatrix too_long = RowMatrix::Zero(21, 2);
  CHECK_THROWS_AS(a.forward(too_long), UsageError);
  RowMatrix wrong_width = RowMatrix::Zero(5, 1);
  CHECK_THROWS_AS(a.forward(wrong_width), UsageError);
}

TEST_CASE("forward is causal") {
  const Model model(ModelConfig{3, 8, 1, 30, 4, 2});
  const TokenizedDataset td = small_linreg(1, 15, 3);
  RowMatrix tokens = td.series(0);
  const RowMatrix base = model.forward(tokens);
  for (Eigen::Index j : {0, 7, 29}) {
    RowMatrix changed = tokens;
    changed(j, 0) += 0.37;
    const RowMatrix out = model.forward(changed);
    for (Eigen::Index i = 0; i < j; ++i) CHECK(out(i, 0) == base(i, 0));
    CHECK(out(j, 0) != base(j, 0));
  }
  // A prefix run gives the same predictions as the full run.
  const RowMatrix prefix = model.forward(tokens.topRows(10));
  CHECK((prefix - base.topRows(10)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("hooks observe and replace activations") {
  const Model model(ModelConfig{2, 4, 1, 10, 4, 1});
  const TokenizedDataset td = small_linreg(1, 5, 3);
  std::vector<std::size_t> seen;
  const ActivationHook observe = [&](std::size_t site, RowMatrix& act) {
    seen.push_back(site);
    CHECK(act.rows() == 10);
    CHECK(act.cols() == 4);
  };
  const RowMatrix base = model.forward(td.series(0), &observe);
  CHECK(seen == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8});
  CHECK(model.forward(td.series(0)) == base);

  // Zeroing the final residual stream leaves only the readout bias.
  const ActivationHook zero_last = [](std::size_t site, RowMatrix& act) {
    if (site == 8) act.setZero();
  };
  const RowMatrix out = model.forward(td.series(0), &zero_last);
  const double bias = model.parameters()[model.param("readout.b").offset];
  for (Eigen::Index i = 0; i < out.rows(); ++i) CHECK(out(i, 0) == bias);
}

TEST_CASE("masked MSE") {
  RowMatrix p(3, 2), t(3, 2);
  p << 1, 2, 3, 4, 5, 6;
  t << 1, 0, 0, 4, 5, 5;
  CHECK(masked_mse(p, t, {true, true, true}) == doctest::Approx((4.0 + 9.0 + 1.0) / 6.0));
  CHECK(masked_mse(p, t, {true, false, true}) == doctest::Approx((4.0 + 1.0) / 4.0));
  CHECK_THROWS_AS(masked_mse(p, t, {false, false, false}), UsageError);
  CHECK_THROWS_AS(masked_mse(p, t, {true, true}), UsageError);
}

TEST_CASE("gradient matches central finite differences") {
  for (int dim : {1, 2}) {
    ModelConfig c{2, 4, dim, 12, 4, 17};
    Model model(c);
    const TokenizedDataset td = dim == 1 ? small_linreg(3, 6, 4) : small_sho(3, 12, 4);
    const std::vector<std::size_t> batch{0, 1, 2};
    const BatchGradient bg = compute_gradients(model, td, batch);
    CHECK(bg.loss == doctest::Approx(reference_loss(model, td, batch)).epsilon(1e-12));

    auto params = model.parameters();
    const double h = 1e-5;
    double worst = 0.0;
    for (const auto& info : model.layout()) {
      // A few entries from every tensor, including the first and last.
      for (std::size_t k : {std::size_t{0}, info.size() / 2, info.size() - 1}) {
        const std::size_t p = info.offset + k;
        const double saved = params[p];
        params[p] = saved + h;
        const double up = reference_loss(model, td, batch);
        params[p] = saved - h;
        const double down = reference_loss(model, td, batch);
        params[p] = saved;
        const double fd = (up - down) / (2 * h);
        const double err = std::abs(fd - bg.grad[p]) / std::max(1e-4, std::abs(fd) + std::abs(bg.grad[p]));
        INFO(info.name << "[" << k << "] fd=" << fd << " analytic=" << bg.grad[p]);
        CHECK(err < 1e-5);
        worst = std::max(worst, err);
      }
    }
    MESSAGE("worst relative gradient error (dim " << dim << "): " << worst);
    // Positional rows past the sequence receive no gradient.
    const auto& pos = model.param("embed.pos");
    for (std::size_t r = td.seq_len; r < pos.rows; ++r) {
      for (std::size_t col = 0; col < pos.cols; ++col) CHECK(bg.grad[pos.offset + r * pos.cols + col] == 0.0);
    }
  }
}

TEST_CASE("training with zero learning rate leaves parameters unchanged") {
  Model model(ModelConfig{1, 4, 1, 10, 4, 3});
  const std::vector<double> before(model.parameters().begin(), model.parameters().end());
  TrainHyper hyper;
  hyper.epochs = 2;
  hyper.lr = 0.0;
  hyper.batch = 4;
  const TokenizedDataset td = small_linreg(10, 5, 1);
  const TrainReport r = train(model, td, hyper);
  CHECK(r.epochs_completed == 2);
  CHECK(std::equal(before.begin(), before.end(), model.parameters().begin()));
  CHECK(r.loss_curve[0] == doctest::Approx(r.loss_curve[1]).epsilon(1e-14));
  CHECK(r.loss_curve[0] == doctest::Approx(dataset_loss(model, td)).epsilon(1e-12));
}

TEST_CASE("training reduces the loss and is reproducible for any job count") {
  // Next-state prediction on short trajectories is learnable in a few hundred steps.
  const TokenizedDataset td = small_sho(256, 9, 2);
  TrainHyper hyper;
  hyper.epochs = 30;
  hyper.batch = 16;
  hyper.shuffle_seed = 9;
  hyper.lr = 3e-3;
  Model a(ModelConfig{1, 8, 2, 16, 4, 1});
  const TrainReport ra = train(a, td, hyper);
  CHECK(ra.loss_curve.back() < 0.5 * ra.loss_curve.front());
  hyper.jobs = 3;
  Model b(ModelConfig{1, 8, 2, 16, 4, 1});
  const TrainReport rb = train(b, td, hyper);
  CHECK(std::equal(a.parameters().begin(), a.parameters().end(), b.parameters().begin()));
  CHECK(ra.to_json(false) == rb.to_json(false));
  CHECK(ra.mse_train_by_context.size() == 8);
}

TEST_CASE("divergence aborts with a report") {
  Model model(ModelConfig{1, 4, 1, 10, 4, 3});
  TrainHyper hyper;
  hyper.epochs = 5;
  hyper.batch = 4;
  hyper.divergence_threshold = 1e-12;
  const TrainReport r = train(model, small_linreg(8, 5, 1), hyper);
  CHECK(r.aborted);
  CHECK(r.epochs_completed == 1);
  CHECK(r.abort_reason.find("divergence") != std::string::npos);
}

TEST_CASE("checkpoint round trip and intermediate checkpoints") {
  const auto dir = std::filesystem::temp_directory_path() / "oscilloprobe_test_transformer";
  std::filesystem::remove_all(dir);
  Model model(ModelConfig{2, 4, 2, 12, 4, 8});
  TrainHyper hyper;
  hyper.epochs = 4;
  hyper.batch = 4;
  hyper.checkpoint_every = 2;
  hyper.checkpoint_dir = dir;
  const TokenizedDataset td = small_sho(8, 12, 5);
  const TrainReport r = train(model, td, hyper);
  CHECK(r.intermediate_checkpoints.size() == 1);
  int epoch = 0;
  const Model loaded = Model::load(r.checkpoint_path, &epoch);
  CHECK(epoch == 4);
  CHECK(loaded.config() == model.config());
  CHECK(std::equal(model.parameters().begin(), model.parameters().end(), loaded.parameters().begin()));
  CHECK(evaluate(loaded, td) == evaluate(model, td));
  CHECK_THROWS_AS(Model::load(dir / "missing.json"), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("evaluate reports per-context error") {
  const Model model(ModelConfig{1, 4, 1, 10, 4, 3});
  const TokenizedDataset td = small_linreg(5, 5, 1);
  const auto per = evaluate(model, td);
  REQUIRE(per.size() == 5);
  // Oracle: direct per-position average.
  for (std::size_t c = 0; c < per.size(); ++c) {
    double sum = 0.0;
    for (std::size_t s = 0; s < td.n_series; ++s) {
      const auto tokens = td.series(s);
      const RowMatrix out = model.forward(tokens);
      const double e = out(static_cast<Eigen::Index>(2 * c), 0) - tokens(static_cast<Eigen::Index>(2 * c + 1), 0);
      sum += e * e;
    }
    CHECK(per[c] == doctest::Approx(sum / 5.0).epsilon(1e-12));
  }
}

TEST_CASE("capture agrees with hooked forward passes and round-trips through disk") {
  const Model model(ModelConfig{2, 4, 2, 12, 4, 3});
  const TokenizedDataset td = small_sho(6, 12, 2);
  const std::vector<Site> sites{Site::parse("embed"), Site::parse("L2.mlp-res"), Site::parse("L1.attn")};
  const HiddenStateCapture hs = capture(model, td, sites, {0, 5, 11});
  for (std::size_t s = 0; s < td.n_series; ++s) {
    const ActivationHook check = [&](std::size_t site, RowMatrix& act) {
      for (const auto& want : sites) {
        if (want.index() != site) continue;
        for (std::size_t p : {0, 5, 11}) {
          CHECK(hs.at(want, p).row(static_cast<Eigen::Index>(s)) == act.row(static_cast<Eigen::Index>(p)));
        }
      }
    };
    model.forward(td.series(s), &check);
  }
  // The final residual stream feeds the readout.
  const auto& last = hs.at(Site::parse("L2.mlp-res"), 11);
  const auto& w = model.param("readout.w");
  const auto& b = model.param("readout.b");
  const Eigen::Map<const RowMatrix> wm(model.parameters().data() + w.offset, 4, 2);
  const Eigen::Map<const RowMatrix> bm(model.parameters().data() + b.offset, 1, 2);
  const RowMatrix pred = model.forward(td.series(3));
  CHECK(((last.row(3) * wm + bm) - pred.row(11)).cwiseAbs().maxCoeff() < 1e-14);

  const auto dir = std::filesystem::temp_directory_path() / "oscilloprobe_test_capture";
  std::filesystem::remove_all(dir);
  hs.save(dir);
  const HiddenStateCapture back = HiddenStateCapture::load(dir);
  CHECK(back.positions == hs.positions);
  CHECK(back.n_series == 6);
  for (const auto& site : sites) {
    for (std::size_t p : {0, 5, 11}) CHECK(back.at(site, p) == hs.at(site, p));
  }
  CHECK_THROWS_AS(capture(model, td, {Site::parse("L3.attn")}, {0}), UsageError);
  CHECK_THROWS_AS(capture(model, td, sites, {12}), UsageError);
  std::filesystem::remove_all(dir);
}
