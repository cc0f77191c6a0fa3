// Copyright (c) 2026 dermaudit contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "dermaudit/synthetic.hpp"
#include "dermaudit/training.hpp"
#include "testutil.hpp"

using namespace dermaudit;
namespace fs = std::filesystem;

namespace {

struct TinySetup {
  SynthDataset ds;
  ImageStore store;
  std::vector<ImageRecord> records;
};

TinySetup tiny_setup(std::int64_t n_per_group, std::int64_t side, std::uint64_t seed) {
  SynthParams sp;
  sp.side = side;
  sp.n_per_group = n_per_group;
  sp.seed = seed;
  SynthDataset ds = generate(sp);
  ImageStore store = memory_store(ds, side);
  std::vector<ImageRecord> records = ds.records;
  return {std::move(ds), std::move(store), std::move(records)};
}

VaeConfig side16_arch() {
  VaeConfig cfg;
  cfg.input_side = 16;
  cfg.latent_side = 2;
  cfg.latent_channels = 4;
  cfg.base_width = 8;
  cfg.max_width = 16;
  return cfg;
}

}  // namespace

TEST_CASE("gradients of the total training loss match finite differences") {
  const auto result = testutil::gradcheck_total_loss(25);
  INFO("worst " << result.worst_rel_err << " at " << result.worst_param);
  CHECK(result.checked >= 20);
  CHECK(result.worst_rel_err < 1e-3);
}

TEST_CASE("zero epochs returns the freshly initialized model and empty log") {
  auto setup = tiny_setup(8, 16, 1);
  TrainingConfig tc = TrainingConfig::canonical(TrainingConfig::Name::B_Mixed);
  tc.train_size = 8;
  tc.epochs = 0;
  tc.seed = 77;
  auto phi = FeatureExtractorT<float>::seeded(ExtractorGeometry::stub2(), 1);
  auto [model, log] = train<float>(setup.records, tc, phi, setup.store, side16_arch());
  CHECK(log.epochs.empty());
  CHECK(log.steps == 0);

  VaeModelT<float> reference(side16_arch());
  reference.init(tc.seed);
  auto got = model.named_state();
  auto want = reference.named_state();
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    REQUIRE(got[i].second->numel() == want[i].second->numel());
    for (std::int64_t j = 0; j < got[i].second->numel(); ++j) {
      REQUIRE((*got[i].second)[j] == (*want[i].second)[j]);
    }
  }
}

TEST_CASE("log has one entry per epoch and counts partial batches") {
  auto setup = tiny_setup(40, 16, 2);
  std::vector<ImageRecord> sample(setup.records.begin(), setup.records.begin() + 68);
  TrainingConfig tc;
  tc.train_size = 68;
  tc.epochs = 3;
  tc.batch_size = 64;
  tc.learning_rate = 1e-4;
  tc.seed = 5;
  auto phi = FeatureExtractorT<float>::seeded(ExtractorGeometry::stub2(), 1);
  auto [model, log] = train<float>(sample, tc, phi, setup.store, side16_arch());
  CHECK(log.epochs.size() == 3);
  // 68 = 64 + 4: the last partial minibatch is used, giving 2 steps per epoch
  CHECK(log.steps == 6);
  CHECK(log.excluded_images == 0);
  CHECK(log.config_hash == training_config_hash(tc));
}

TEST_CASE("training descends on a small synthetic set") {
  auto setup = tiny_setup(32, 16, 3);
  TrainingConfig tc;
  tc.train_size = 64;
  tc.epochs = 5;
  tc.batch_size = 32;
  tc.learning_rate = 1e-3;
  tc.seed = 11;
  auto phi = FeatureExtractorT<float>::seeded(ExtractorGeometry::tiny(), 2);
  auto [model, log] = train<float>(setup.records, tc, phi, setup.store, side16_arch());
  REQUIRE(log.epochs.size() == 5);
  CHECK(log.epochs.back().total < log.epochs.front().total);
}

TEST_CASE("training is reproducible for a fixed seed") {
  auto setup = tiny_setup(16, 16, 4);
  TrainingConfig tc;
  tc.train_size = 32;
  tc.epochs = 2;
  tc.batch_size = 16;
  tc.learning_rate = 1e-3;
  tc.seed = 21;
  auto phi = FeatureExtractorT<float>::seeded(ExtractorGeometry::stub2(), 3);

  auto [m1, l1] = train<float>(setup.records, tc, phi, setup.store, side16_arch());
  auto [m2, l2] = train<float>(setup.records, tc, phi, setup.store, side16_arch());

  auto s1 = m1.named_state();
  auto s2 = m2.named_state();
  REQUIRE(s1.size() == s2.size());
  for (std::size_t i = 0; i < s1.size(); ++i) {
    for (std::int64_t j = 0; j < s1[i].second->numel(); ++j) {
      REQUIRE((*s1[i].second)[j] == (*s2[i].second)[j]);
    }
  }
  REQUIRE(l1.epochs.size() == l2.epochs.size());
  for (std::size_t e = 0; e < l1.epochs.size(); ++e) {
    CHECK(l1.epochs[e].total ==
          Catch::Approx(l2.epochs[e].total).epsilon(1e-6));
  }

  TrainingConfig other = tc;
  other.seed = 22;
  auto [m3, l3] = train<float>(setup.records, other, phi, setup.store, side16_arch());
  CHECK(l3.epochs.front().total != l1.epochs.front().total);
}

TEST_CASE("overfitting one fixed batch cuts the loss by 10x") {
  VaeModelT<float> model(testutil::tiny_vae_config());
  model.init(8);
  auto phi = FeatureExtractorT<float>::seeded(ExtractorGeometry::stub2(), 4);

  // one fixed batch of four smooth lesion images, fixed zero noise
  SynthParams sp;
  sp.side = 16;
  sp.n_per_group = 2;
  sp.texture_noise = 0.0;
  sp.seed = 9;
  const auto ds = generate(sp);
  Tensor<float> x({4, 3, 16, 16});
  std::int64_t row = 0;
  for (const auto& rec : ds.records) {
    const Tensorf& img = ds.images.at(rec.id);
    std::copy(img.data(), img.data() + img.numel(), x.data() + (row++) * img.numel());
  }
  Tensor<float> eps({4, 4, 2, 2});

  auto params = model.build_params();
  nn::Adam<float> adam(params, 5e-3);
  adam.zero_grad();
  const double first = vae_loss_and_grads<float>(model, &phi, x, eps, 1.0).total;
  adam.step();
  double last = first;
  for (int step = 1; step < 200; ++step) {
    adam.zero_grad();
    last = vae_loss_and_grads<float>(model, &phi, x, eps, 1.0).total;
    adam.step();
  }
  CHECK(last <= first / 10.0);
}

TEST_CASE("divergence raises an error carrying the step index") {
  auto setup = tiny_setup(16, 16, 5);
  TrainingConfig tc;
  tc.train_size = 16;
  tc.epochs = 3;
  tc.batch_size = 16;
  tc.learning_rate = 1e18;  // guaranteed numeric blow-up
  tc.seed = 31;
  auto phi = FeatureExtractorT<float>::seeded(ExtractorGeometry::stub2(), 5);
  const auto run_dir = fs::temp_directory_path() / "dermaudit_divergence_test";
  fs::create_directories(run_dir);
  TrainOptions opts;
  opts.run_dir = run_dir.string();
  try {
    train<float>(setup.records, tc, phi, setup.store, side16_arch(), opts);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(e.step >= 0);
    CHECK(fs::exists(run_dir / "last_good.dmta"));
    const auto restored = load_checkpoint<float>((run_dir / "last_good.dmta").string());
    CHECK(restored.config().input_side == 16);
  }
  fs::remove_all(run_dir);
}

TEST_CASE("unloadable records are excluded and counted") {
  auto setup = tiny_setup(16, 16, 6);
  std::vector<ImageRecord> records = setup.records;
  ImageRecord ghost;
  ghost.id = "missing_image";
  ghost.source = "/nonexistent/path.png";
  ghost.fst.value = 1;
  ghost.fine_label = "f";
  ghost.mid_label = "m";
  ghost.coarse_label = "c";
  records.push_back(ghost);
  records.push_back(ghost);  // repeated draws of the same bad record

  TrainingConfig tc;
  tc.train_size = static_cast<std::int64_t>(records.size());
  tc.epochs = 1;
  tc.batch_size = 16;
  tc.learning_rate = 1e-4;
  tc.seed = 41;
  auto phi = FeatureExtractorT<float>::seeded(ExtractorGeometry::stub2(), 6);
  auto [model, log] = train<float>(records, tc, phi, setup.store, side16_arch());
  CHECK(log.excluded_images == 2);
}

TEST_CASE("per-epoch checkpoints appear behind the flag") {
  auto setup = tiny_setup(8, 16, 7);
  TrainingConfig tc;
  tc.train_size = 8;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.learning_rate = 1e-4;
  tc.seed = 51;
  auto phi = FeatureExtractorT<float>::seeded(ExtractorGeometry::stub2(), 7);
  const auto run_dir = fs::temp_directory_path() / "dermaudit_epoch_ckpt_test";
  fs::create_directories(run_dir);
  TrainOptions opts;
  opts.run_dir = run_dir.string();
  opts.checkpoint_per_epoch = true;
  train<float>(setup.records, tc, phi, setup.store, side16_arch(), opts);
  CHECK(fs::exists(run_dir / "epoch_0.dmta"));
  CHECK(fs::exists(run_dir / "epoch_1.dmta"));
  fs::remove_all(run_dir);
}
