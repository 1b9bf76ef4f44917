#include <cmath>

#include "doctest.h"

#include "mtadapt/merged_qkv.hpp"
#include "oracles.hpp"

using namespace mtadapt;

namespace {

AdapterConfig make_config(AdapterVariant v, std::size_t rank = 2, double alpha = 4.0) {
  AdapterConfig c;
  c.variant = v;
  c.rank = rank;
  c.alpha = alpha;
  c.init_std = 0.5;
  return c;
}

const std::vector<QkvChannel> kAll = {QkvChannel::kQ, QkvChannel::kK, QkvChannel::kV};

// Row offset of channel c in the fused output.
std::size_t channel_row(QkvChannel c, std::size_t d) {
  return static_cast<std::size_t>(c) * d;
}

}  // namespace

TEST_CASE("init: zero blocks, channel validation, determinism") {
  Rng rng(3);
  MergedAdapterParams p = init_merged(make_config(AdapterVariant::kShim), 4, 9, kAll, rng);
  for (const Matrix& b : p.B_blocks) CHECK(frobenius_norm(b) == 0.0);
  const Matrix x = gaussian(rng, 9, 3, 1.0);
  CHECK(frobenius_norm(forward_merged(p, x)) == 0.0);

  CHECK_THROWS_AS(init_merged(make_config(AdapterVariant::kShim), 4, 9, {}, rng), ConfigError);
  CHECK_THROWS_AS(
      init_merged(make_config(AdapterVariant::kShim), 4, 9,
                  {QkvChannel::kQ, QkvChannel::kQ}, rng),
      ConfigError);
  // joint rank r|E| = 6 not below min(d|E|, k) = 6
  CHECK_THROWS_AS(init_merged(make_config(AdapterVariant::kShim), 4, 6, kAll, rng),
                  ConfigError);

  Rng r1(9), r2(9);
  const MergedAdapterParams a = init_merged(make_config(AdapterVariant::kCtcm), 4, 9, kAll, r1);
  const MergedAdapterParams b = init_merged(make_config(AdapterVariant::kCtcm), 4, 9, kAll, r2);
  CHECK(oracles::max_abs_diff(a.A, b.A) == 0.0);
  CHECK(oracles::max_abs_diff(*a.C, *b.C) == 0.0);
}

TEST_CASE("disabled channels stay exactly zero") {
  Rng rng(5);
  MergedAdapterParams p = init_merged(make_config(AdapterVariant::kShim), 4, 9,
                                      {QkvChannel::kQ, QkvChannel::kV}, rng);
  for (Matrix& b : p.B_blocks) b = gaussian(rng, 4, 2, 0.5);
  const Matrix dw = delta_weight_merged(p);
  REQUIRE(dw.rows() == 12);
  const std::size_t k_row = channel_row(QkvChannel::kK, 4);
  for (std::size_t i = k_row; i < k_row + 4; ++i) {
    for (std::size_t j = 0; j < dw.cols(); ++j) CHECK(dw(i, j) == 0.0);
  }
  CHECK(frobenius_norm(dw) > 0.0);
}

TEST_CASE("|E| = 1 with identity transform reduces to a plain adapter") {
  Rng rng(7);
  const AdapterConfig config = make_config(AdapterVariant::kLora, 2, 6.0);
  MergedAdapterParams merged = init_merged(config, 5, 8, {QkvChannel::kV}, rng);
  for (Matrix& b : merged.B_blocks) b = gaussian(rng, 5, 2, 0.5);

  AdapterParams plain = init_adapter(config, 5, 8, rng);
  plain.A = merged.A;
  plain.B = merged.B_blocks[0];

  const Matrix x = gaussian(rng, 8, 3, 1.0);
  const Matrix full = forward_merged(merged, x);
  const Matrix expect = forward_adapter(plain, x);
  const std::size_t row0 = channel_row(QkvChannel::kV, 5);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(full(row0 + i, j) == doctest::Approx(expect(i, j)).epsilon(1e-12));
    }
  }
  // the other channels are untouched
  for (std::size_t i = 0; i < row0; ++i) {
    for (std::size_t j = 0; j < 3; ++j) CHECK(full(i, j) == 0.0);
  }
}

TEST_CASE("forward equals the explicit block-matrix formulation") {
  Rng rng(11);
  const std::size_t d = 4, k = 9, r = 2;
  MergedAdapterParams p = init_merged(make_config(AdapterVariant::kShim, r), d, k, kAll, rng);
  for (Matrix& b : p.B_blocks) b = gaussian(rng, d, r, 0.5);
  const Matrix x = gaussian(rng, k, 3, 1.0);

  // block-diagonal B (3d x 3r), dense M_T (3r x 3r), stacked A (3r x k)
  Matrix b_diag = Matrix::zeros(3 * d, 3 * r);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t c = 0; c < r; ++c) {
        b_diag(i * d + a, i * r + c) = p.B_blocks[i](a, c);
      }
    }
  }
  const Matrix m_t = merged_transform(p);
  const Matrix oracle = scale(
      oracles::matmul(b_diag, oracles::matmul(m_t, oracles::matmul(p.A, x))),
      p.config.scaling());
  CHECK(oracles::max_abs_diff(forward_merged(p, x), oracle) <= 1e-12);

  CHECK(frobenius_norm(forward_merged(p, Matrix::zeros(k, 3))) == 0.0);
}

TEST_CASE("joint transform actually couples channels") {
  Rng rng(13);
  const std::size_t d = 4, k = 9, r = 2;
  MergedAdapterParams p = init_merged(make_config(AdapterVariant::kShim, r), d, k, kAll, rng);
  for (Matrix& b : p.B_blocks) b = gaussian(rng, d, r, 0.5);
  const Matrix x = gaussian(rng, k, 3, 1.0);

  auto channel_slice = [&](const Matrix& y, QkvChannel c) {
    Matrix out(d, y.cols());
    const std::size_t r0 = channel_row(c, d);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < y.cols(); ++j) out(i, j) = y(r0 + i, j);
    }
    return out;
  };

  MergedAdapterParams perturbed = p;
  for (std::size_t j = 0; j < k; ++j) perturbed.A(0, j) += 0.1;  // q block row

  // dense M_T: perturbing the q block of A moves the k and v outputs
  const Matrix base = forward_merged(p, x);
  const Matrix moved = forward_merged(perturbed, x);
  CHECK(frobenius_norm(sub(channel_slice(moved, QkvChannel::kK),
                           channel_slice(base, QkvChannel::kK))) > 0.0);
  CHECK(frobenius_norm(sub(channel_slice(moved, QkvChannel::kV),
                           channel_slice(base, QkvChannel::kV))) > 0.0);

  // block-diagonal M_T: the same perturbation stays inside the q channel
  MergedAdapterParams diag = p;
  Matrix c_diag = Matrix::zeros(3 * r, 3 * r);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t a = 0; a < r; ++a) {
      for (std::size_t b2 = 0; b2 < r; ++b2) {
        c_diag(i * r + a, i * r + b2) = (*p.C)(i * r + a, i * r + b2);
      }
    }
  }
  diag.C = c_diag;
  MergedAdapterParams diag_perturbed = diag;
  for (std::size_t j = 0; j < k; ++j) diag_perturbed.A(0, j) += 0.1;
  const Matrix diag_base = forward_merged(diag, x);
  const Matrix diag_moved = forward_merged(diag_perturbed, x);
  CHECK(frobenius_norm(sub(channel_slice(diag_moved, QkvChannel::kK),
                           channel_slice(diag_base, QkvChannel::kK))) == 0.0);
  CHECK(frobenius_norm(sub(channel_slice(diag_moved, QkvChannel::kV),
                           channel_slice(diag_base, QkvChannel::kV))) == 0.0);
  CHECK(frobenius_norm(sub(channel_slice(diag_moved, QkvChannel::kQ),
                           channel_slice(diag_base, QkvChannel::kQ))) > 0.0);
}

TEST_CASE("merge equivalence for the fused host weight") {
  Rng rng(17);
  for (AdapterVariant v :
       {AdapterVariant::kLora, AdapterVariant::kShim, AdapterVariant::kIcfm,
        AdapterVariant::kCtcm, AdapterVariant::kDtsm}) {
    MergedAdapterParams p = init_merged(make_config(v), 4, 9, kAll, rng);
    for (Matrix& b : p.B_blocks) b = gaussian(rng, 4, 2, 0.5);
    const Matrix w0 = gaussian(rng, 12, 9, 0.3);
    const Matrix x = gaussian(rng, 9, 5, 1.0);
    const Matrix via_adapter = add(matmul(w0, x), forward_merged(p, x));
    const Matrix via_merge = matmul(add(w0, delta_weight_merged(p)), x);
    CHECK(frobenius_norm(sub(via_adapter, via_merge)) <=
          1e-10 * std::max(1.0, frobenius_norm(x)));
  }
}

TEST_CASE("backward matches finite differences for every enabled subset") {
  Rng rng(19);
  const std::vector<std::vector<QkvChannel>> subsets = {
      {QkvChannel::kK},
      {QkvChannel::kQ, QkvChannel::kV},
      kAll,
  };
  for (const auto& enabled : subsets) {
    MergedAdapterParams p =
        init_merged(make_config(AdapterVariant::kCtcm), 4, 9, enabled, rng);
    for (Matrix& b : p.B_blocks) b = gaussian(rng, 4, 2, 0.5);
    Matrix x = gaussian(rng, 9, 3, 1.0);

    auto loss = [&]() {
      const Matrix y = forward_merged(p, x);
      return 0.5 * frobenius_norm(y) * frobenius_norm(y);
    };
    const Matrix y = forward_merged(p, x);
    MergedAdapterGrads grads = backward_merged(p, x, y);

    CHECK(oracles::max_rel_err(grads.dA, oracles::fd_gradient(p.A, loss)) <= 1e-4);
    for (std::size_t i = 0; i < p.B_blocks.size(); ++i) {
      CHECK(oracles::max_rel_err(grads.dB_blocks[i],
                                 oracles::fd_gradient(p.B_blocks[i], loss)) <= 1e-4);
    }
    CHECK(oracles::max_rel_err(*grads.dC, oracles::fd_gradient(*p.C, loss)) <= 1e-4);
    CHECK(oracles::max_rel_err(*grads.dD, oracles::fd_gradient(*p.D, loss)) <= 1e-4);
  }
}

TEST_CASE("param accounting matches storage") {
  Rng rng(23);
  for (AdapterVariant v : {AdapterVariant::kLora, AdapterVariant::kShim, AdapterVariant::kDtsm}) {
    for (std::size_t e = 1; e <= 3; ++e) {
      std::vector<QkvChannel> enabled(kAll.begin(), kAll.begin() + e);
      const MergedAdapterParams p = init_merged(make_config(v), 4, 9, enabled, rng);
      std::size_t stored = p.A.size();
      for (const Matrix& b : p.B_blocks) stored += b.size();
      if (p.C) stored += p.C->size();
      if (p.D) stored += p.D->size();
      CHECK(stored == param_count_merged(p.config, 4, 9, e));
    }
  }
}

TEST_CASE("channel parsing") {
  const auto qv = parse_channels("vq");
  REQUIRE(qv.size() == 2);
  CHECK(qv[0] == QkvChannel::kQ);  // normalized to ascending order
  CHECK(qv[1] == QkvChannel::kV);
  CHECK(parse_channels("qkv").size() == 3);
  CHECK_THROWS_AS(parse_channels("qx"), ConfigError);
}
