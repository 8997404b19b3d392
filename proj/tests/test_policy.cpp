#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "ebtl/energy.hpp"
#include "ebtl/policy.hpp"
#include "support/finite_diff.hpp"

using namespace ebtl::policy;
using ebtl::Rng;
using ebtl::nn::Tape;
using ebtl::nn::Tensor;

namespace {

std::vector<std::uint8_t> all_on(std::size_t n, std::size_t k) {
  return std::vector<std::uint8_t>(n * k, 1);
}

Tensor random_obs(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<double> v(n * d);
  for (auto& x : v) x = rng.uniform(-1, 1);
  return Tensor::matrix(n, d, std::move(v));
}

}  // namespace

TEST_CASE("forward") {
  Tape tape;
  auto arch = dense_architecture(10, 5);
  auto params = init_params(arch, 7);

  SECTION("zero input with zero biases gives the uniform masked distribution") {
    auto out = forward(tape, params, Tensor::zeros({1, 10}), all_on(1, 5));
    for (std::size_t j = 0; j < 5; ++j)
      CHECK(std::exp(out.masked_log_probs.at(0, j)) == Catch::Approx(0.2).epsilon(1e-12));
  }
  SECTION("masked action carries essentially zero probability") {
    Rng rng(3);
    std::vector<std::uint8_t> mask{1, 1, 0, 1, 1};
    auto out = forward(tape, params, random_obs(rng, 1, 10), mask);
    CHECK(std::exp(out.masked_log_probs.at(0, 2)) < 1e-300);
  }
  SECTION("probabilities sum to one") {
    Rng rng(4);
    auto out = forward(tape, params, random_obs(rng, 6, 10), all_on(6, 5));
    for (std::size_t i = 0; i < 6; ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < 5; ++j) sum += std::exp(out.masked_log_probs.at(i, j));
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
  }
  SECTION("all-masked rows are rejected") {
    CHECK_THROWS_WITH(forward(tape, params, Tensor::zeros({1, 10}),
                              std::vector<std::uint8_t>{0, 0, 0, 0, 0}),
                      Catch::Matchers::ContainsSubstring("all actions masked"));
  }
  SECTION("raw logits are mask-independent") {
    Rng rng(5);
    auto obs = random_obs(rng, 2, 10);
    auto a = forward(tape, params, obs, all_on(2, 5));
    std::vector<std::uint8_t> partial{1, 0, 1, 0, 1, 0, 1, 0, 1, 1};
    auto b = forward(tape, params, obs, partial);
    for (std::size_t i = 0; i < a.logits.numel(); ++i) CHECK(a.logits[i] == b.logits[i]);
    for (std::size_t i = 0; i < 2; ++i) {
      const auto& row_a = a.logits.data();
      const double phi_a = ebtl::energy::energy_score(
          std::span<const double>(row_a.data() + i * 5, 5), 1.0);
      const auto& row_b = b.logits.data();
      const double phi_b = ebtl::energy::energy_score(
          std::span<const double>(row_b.data() + i * 5, 5), 1.0);
      CHECK(phi_a == phi_b);
    }
  }
}

TEST_CASE("sample_action") {
  Tape tape;
  auto arch = dense_architecture(4, 4);
  auto params = init_params(arch, 11);
  SECTION("single enabled action is forced with log-prob zero") {
    Rng rng(1);
    auto out = forward(tape, params, Tensor::zeros({1, 4}), std::vector<std::uint8_t>{0, 0, 1, 0});
    auto [a, lp] = sample_action(out, 0, rng);
    CHECK(a == 2);
    CHECK(lp == 0.0);
  }
  SECTION("uniform over four: empirical frequencies near 1/4") {
    Rng rng(2);
    auto out = forward(tape, params, Tensor::zeros({1, 4}), all_on(1, 4));
    std::array<int, 4> counts{};
    const int n = 10000;
    for (int i = 0; i < n; ++i) counts[sample_action(out, 0, rng).first] += 1;
    for (int c : counts) {
      const double frac = static_cast<double>(c) / n;
      CHECK(frac > 0.23);
      CHECK(frac < 0.27);
    }
  }
  SECTION("sampled action is never masked") {
    Rng rng(3);
    Rng obs_rng(4);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<std::uint8_t> mask(4, 0);
      int enabled = 0;
      for (auto& m : mask) {
        m = obs_rng.bernoulli(0.5) ? 1 : 0;
        enabled += m;
      }
      if (!enabled) mask[obs_rng.uniform_int(4)] = 1;
      auto out = forward(tape, params, random_obs(obs_rng, 1, 4), mask);
      auto [a, lp] = sample_action(out, 0, rng);
      CHECK(mask[a] == 1);
      CHECK(lp == out.masked_log_probs.at(0, a));
    }
  }
}

TEST_CASE("entropy") {
  Tape tape;
  SECTION("uniform over 7 is log 7") {
    auto arch = dense_architecture(3, 7);
    auto params = init_params(arch, 13);
    auto out = forward(tape, params, Tensor::zeros({1, 3}), all_on(1, 7));
    CHECK(entropy(out) == Catch::Approx(std::log(7.0)).epsilon(1e-9));
  }
  SECTION("deterministic distribution has zero entropy") {
    auto arch = dense_architecture(3, 7);
    auto params = init_params(arch, 13);
    std::vector<std::uint8_t> mask{0, 0, 0, 1, 0, 0, 0};
    auto out = forward(tape, params, Tensor::zeros({1, 3}), mask);
    CHECK(entropy(out) == 0.0);
  }
  SECTION("uniform over 2 is log 2") {
    auto arch = dense_architecture(3, 2);
    auto params = init_params(arch, 13);
    auto out = forward(tape, params, Tensor::zeros({1, 3}), all_on(1, 2));
    CHECK(entropy(out) == Catch::Approx(std::log(2.0)).epsilon(1e-9));
  }
  SECTION("gradient of entropy w.r.t. logits matches finite differences") {
    std::vector<double> base{0.3, -0.7, 1.1, 0.2};
    auto eval = [](const std::vector<double>& v, std::vector<double>* grad) {
      Tape t;
      auto logits = t.leaf(Tensor::matrix(1, 4, std::vector<double>(v)));
      auto ent = entropy_mean(t, t.log_softmax(logits));
      if (grad) *grad = t.backward(ent).at(logits.node()).data();
      return ent.value();
    };
    std::vector<double> analytic;
    eval(base, &analytic);
    auto numeric = ebtl_test::central_diff([&](const std::vector<double>& v) {
      return eval(v, nullptr);
    }, base);
    CHECK(ebtl_test::max_rel_err(analytic, numeric) < 1e-4);
  }
}

TEST_CASE("checkpoint round-trip") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "ebtl_ckpt_test";
  fs::create_directories(dir);
  auto arch = grid_architecture(9, 13, 13, 7);
  auto params = init_params(arch, 99);
  CheckpointMeta meta;
  meta.step = 12345;
  meta.env_hash = "deadbeef";
  meta.env_config = {{"domain", "grid"}};
  meta.energy_reg = true;
  meta.tau_table = {{"0", 1.5}, {"0.5", 7.25}, {"0.9", 11.0}};
  meta.m_in = 10;
  meta.m_out = 15;
  meta.lambda = 0.1;
  const fs::path file = dir / "teacher.ckpt";
  save_checkpoint(params, meta, file);

  SECTION("identical forward outputs and energy scores after reload") {
    auto ck = load_checkpoint(file);
    CHECK(ck.meta.step == 12345);
    CHECK(ck.meta.energy_reg);
    CHECK(ck.meta.tau_table.at("0.5") == 7.25);
    CHECK(ck.params.arch == arch);
    Rng rng(8);
    Tape tape;
    for (int trial = 0; trial < 100; ++trial) {
      auto obs = random_obs(rng, 1, arch.obs_dim);
      auto mask = all_on(1, 7);
      auto a = forward(tape, params, obs, mask);
      auto b = forward(tape, ck.params, obs, mask);
      for (std::size_t i = 0; i < a.logits.numel(); ++i) CHECK(a.logits[i] == b.logits[i]);
      CHECK(a.value[0] == b.value[0]);
      const double phi_a = ebtl::energy::energy_score(a.logits.data(), 1.0);
      const double phi_b = ebtl::energy::energy_score(b.logits.data(), 1.0);
      CHECK(phi_a == phi_b);
      tape.clear();
    }
  }
  SECTION("tampered magic bytes raise a corruption error") {
    const fs::path bad = dir / "tampered.ckpt";
    fs::copy_file(file, bad, fs::copy_options::overwrite_existing);
    std::fstream f(bad, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(bad), CheckpointCorruptError);
  }
  SECTION("corrupted payload raises a corruption error") {
    const fs::path bad = dir / "bitflip.ckpt";
    fs::copy_file(file, bad, fs::copy_options::overwrite_existing);
    auto size = fs::file_size(bad);
    std::fstream f(bad, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(static_cast<std::streamoff>(size / 2));
    f.write("\x7f", 1);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(bad), CheckpointCorruptError);
  }
  SECTION("grid checkpoint against an overcooked-sized signature is a shape error") {
    auto ck = load_checkpoint(file);
    CHECK_THROWS_AS(require_compatible(ck.params, 413, 6), ebtl::ShapeError);
    CHECK_NOTHROW(require_compatible(ck.params, arch.obs_dim, 7));
  }
}

TEST_CASE("initialization is deterministic in the seed") {
  auto arch = dense_architecture(20, 6);
  auto a = init_params(arch, 5);
  auto b = init_params(arch, 5);
  auto c = init_params(arch, 6);
  for (const auto& [name, t] : a.tensors) {
    CHECK(t.data() == b.tensors.at(name).data());
  }
  CHECK(a.tensors.at("fc1.w").data() != c.tensors.at("fc1.w").data());
}
