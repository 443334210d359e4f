#include <cmath>
#include <numbers>

#include <doctest.h>

#include "gradcheck.hpp"
#include "lrdg/divergence.hpp"
#include "lrdg/losses.hpp"
#include "lrdg/random.hpp"

using namespace lrdg;
using MatD = Matrix<double>;
using VecD = Vector<double>;

namespace {

MatD random_logits(int classes, int batch, Rng& rng, double scale = 2.0) {
  MatD m(classes, batch);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

}  // namespace

TEST_CASE("cross-entropy and entropy analytic values") {
  CHECK(cross_entropy(VecD::Zero(4), 2) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(entropy(VecD::Zero(7)) == doctest::Approx(std::log(7.0)).epsilon(1e-12));

  VecD l(3);
  l << 2, 0, 0;
  // -log(e^2 / (e^2 + 2))
  CHECK(cross_entropy(l, 0) == doctest::Approx(std::log1p(2.0 * std::exp(-2.0))).epsilon(1e-12));

  const double p[3] = {0.5, 0.25, 0.25};
  VecD lp(3);
  for (int k = 0; k < 3; ++k) lp(k) = std::log(p[k]);
  double h = 0;
  for (double q : p) h -= q * std::log(q);
  CHECK(entropy(lp) == doctest::Approx(h).epsilon(1e-12));
}

TEST_CASE("least-likely uncertainty targets the smallest logit") {
  VecD l(3);
  l << 3, 2, 1;
  CHECK(least_likely_class(l) == 2);
  const double expected = std::log(std::exp(3.0) + std::exp(2.0) + std::exp(1.0)) - 1.0;
  CHECK(uncertainty_loss(l, UncertaintyVariant::least_likely) == doctest::Approx(expected).epsilon(1e-12));
  VecD tie(3);
  tie << 1, 0, 0;
  CHECK(least_likely_class(tie) == 1);
}

TEST_CASE("cross-entropy rejects labels outside the class range") {
  CHECK_THROWS_AS(cross_entropy(VecD::Zero(3), 3), Error);
  CHECK_THROWS_AS(cross_entropy(VecD::Zero(3), -1), Error);
}

TEST_CASE("entropy stays in [0, ln C] and is maximal at uniform logits") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int c = 2 + static_cast<int>(rng.below(9));
    const VecD l = random_logits(c, 1, rng, 5.0);
    const double h = entropy(l);
    CHECK(h >= -1e-12);
    CHECK(h <= std::log(c) + 1e-12);
    CHECK(cross_entropy(l, static_cast<int>(rng.below(static_cast<std::uint64_t>(c)))) >= 0.0);
  }
  // Peaked logits saturate the probability floor without producing NaN.
  VecD peaked(4);
  peaked << 1000, 0, 0, 0;
  CHECK(std::isfinite(entropy(peaked)));
  CHECK(entropy(peaked) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("reconstruction loss is the mean squared or absolute difference") {
  MatD a(2, 2), b(2, 2);
  a << 0, 1, 0.5, 0.25;
  b << 0, 0, 0, 0.25;
  CHECK(reconstruction_loss(a, b, ReconstructionKind::l2) == doctest::Approx((1.0 + 0.25) / 4.0));
  CHECK(reconstruction_loss(a, b, ReconstructionKind::l1) == doctest::Approx((1.0 + 0.5) / 4.0));
  CHECK(reconstruction_loss(a, a, ReconstructionKind::l2) == 0.0);
  CHECK_THROWS_AS(reconstruction_loss(a, MatD(3, 2), ReconstructionKind::l2), ShapeError);
}

TEST_CASE("pad arithmetic") {
  CHECK(pad_from_error(0.0) == 2.0);
  CHECK(pad_from_error(0.1) == doctest::Approx(1.6).epsilon(1e-15));
  CHECK(pad_from_error(0.5) == 0.0);
  CHECK(pad_from_error(0.7) == 0.0);
}

TEST_CASE("batch loss gradients match central differences") {
  Rng rng(11);
  const std::vector<int> labels = {0, 3, 1, 2};
  MatD logits = random_logits(4, 4, rng);

  SUBCASE("cross-entropy") {
    const auto r = cross_entropy_batch(logits, labels);
    auto f = [&](const MatD& x) { return cross_entropy_batch(x, labels).value; };
    CHECK(test::relative_error(r.grad, test::numeric_gradient(f, logits)) < 1e-6);
  }
  SUBCASE("entropy uncertainty") {
    const auto r = uncertainty_batch(logits, UncertaintyVariant::entropy);
    auto f = [&](const MatD& x) { return uncertainty_batch(x, UncertaintyVariant::entropy).value; };
    CHECK(test::relative_error(r.grad, test::numeric_gradient(f, logits)) < 1e-6);
  }
  SUBCASE("least-likely uncertainty") {
    const auto r = uncertainty_batch(logits, UncertaintyVariant::least_likely);
    auto f = [&](const MatD& x) { return uncertainty_batch(x, UncertaintyVariant::least_likely).value; };
    CHECK(test::relative_error(r.grad, test::numeric_gradient(f, logits)) < 1e-6);
  }
  SUBCASE("reconstruction") {
    const MatD original = MatD::Random(3, 16);
    const MatD mapped = MatD::Random(3, 16);
    for (ReconstructionKind kind : {ReconstructionKind::l2, ReconstructionKind::l1}) {
      const auto r = reconstruction_batch(mapped, original, kind);
      auto f = [&](const MatD& x) { return reconstruction_batch(x, original, kind).value; };
      CHECK(test::relative_error(r.grad, test::numeric_gradient(f, mapped)) < 1e-6);
    }
  }
}

TEST_CASE("stage objectives: totals and gradients") {
  Rng rng(5);
  const LossWeights w{0.7, 1.3, 2.1};
  const std::vector<int> labels = {1, 0, 2, 2};
  const MatD own = random_logits(3, 4, rng);
  const std::vector<MatD> others = {random_logits(3, 4, rng), random_logits(3, 4, rng)};

  SUBCASE("stage 1") {
    const auto r = stage1_loss<double>(own, labels, others, w, UncertaintyVariant::entropy);
    MatD pooled(3, 8);
    pooled << others[0], others[1];
    const double expected = cross_entropy_batch(own, labels).value +
                            w.lambda1 * uncertainty_batch(pooled, UncertaintyVariant::entropy).value;
    CHECK(r.total == doctest::Approx(expected).epsilon(1e-12));
    auto f_own = [&](const MatD& x) {
      return stage1_loss<double>(x, labels, others, w, UncertaintyVariant::entropy).total;
    };
    CHECK(test::relative_error(r.grad_own, test::numeric_gradient(f_own, own)) < 1e-6);
    for (std::size_t k = 0; k < others.size(); ++k) {
      auto f_other = [&](const MatD& x) {
        std::vector<MatD> o = others;
        o[k] = x;
        return stage1_loss<double>(own, labels, o, w, UncertaintyVariant::entropy).total;
      };
      CHECK(test::relative_error(r.grad_others[k], test::numeric_gradient(f_other, others[k])) < 1e-6);
    }
    CHECK_THROWS_AS(stage1_loss<double>(own, labels, {}, w, UncertaintyVariant::entropy), ConfigError);
  }

  SUBCASE("stage 2") {
    const std::vector<int> pooled_labels = {0, 1, 2, 0, 1, 1, 2, 0};
    const MatD inv = random_logits(3, 8, rng);
    const MatD original = (MatD::Random(3, 8 * 4).array() * 0.5 + 0.5).matrix();
    const MatD mapped = (MatD::Random(3, 8 * 4).array() * 0.5 + 0.5).matrix();
    const auto r = stage2_loss<double>(inv, pooled_labels, others, mapped, original, w, UncertaintyVariant::entropy,
                                       ReconstructionKind::l2);
    MatD pooled(3, 8);
    pooled << others[0], others[1];
    const double expected = cross_entropy_batch(inv, pooled_labels).value +
                            w.lambda2 * uncertainty_batch(pooled, UncertaintyVariant::entropy).value +
                            w.lambda3 * reconstruction_loss(mapped, original, ReconstructionKind::l2);
    CHECK(r.total == doctest::Approx(expected).epsilon(1e-12));
    auto f_inv = [&](const MatD& x) {
      return stage2_loss<double>(x, pooled_labels, others, mapped, original, w, UncertaintyVariant::entropy,
                                 ReconstructionKind::l2)
          .total;
    };
    CHECK(test::relative_error(r.grad_invariant_logits, test::numeric_gradient(f_inv, inv)) < 1e-6);
    auto f_map = [&](const MatD& x) {
      return stage2_loss<double>(inv, pooled_labels, others, x, original, w, UncertaintyVariant::entropy,
                                 ReconstructionKind::l2)
          .total;
    };
    CHECK(test::relative_error(r.grad_mapped, test::numeric_gradient(f_map, mapped)) < 1e-6);
    for (std::size_t k = 0; k < others.size(); ++k) {
      auto f_bank = [&](const MatD& x) {
        std::vector<MatD> o = others;
        o[k] = x;
        return stage2_loss<double>(inv, pooled_labels, o, mapped, original, w, UncertaintyVariant::entropy,
                                   ReconstructionKind::l2)
            .total;
      };
      CHECK(test::relative_error(r.grad_bank_logits[k], test::numeric_gradient(f_bank, others[k])) < 1e-6);
    }
    // A source domain without frozen-classifier output is a precondition violation.
    const std::vector<MatD> missing = {others[0], MatD(3, 0)};
    CHECK_THROWS_AS(stage2_loss<double>(inv, pooled_labels, missing, mapped, original, w,
                                        UncertaintyVariant::entropy, ReconstructionKind::l2),
                    ConfigError);
  }
}

TEST_CASE("negative loss weights are rejected") {
  CHECK_THROWS_AS((LossWeights{-1.0, 1.0, 1.0}.validate()), ConfigError);
  CHECK_NOTHROW((LossWeights{0.0, 0.0, 0.0}.validate()));
}
