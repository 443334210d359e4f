#include <filesystem>
#include <fstream>

#include <doctest.h>

#include "gradcheck.hpp"
#include "lrdg/nn/checkpoint.hpp"
#include "lrdg/nn/classifier.hpp"
#include "lrdg/nn/mapper.hpp"
#include "lrdg/random.hpp"

using namespace lrdg;
using MatD = Matrix<double>;

namespace {

nn::ClassifierSpec small_classifier() {
  nn::ClassifierSpec s;
  s.num_classes = 3;
  s.image_size = 8;
  s.widths = {4, 6};
  return s;
}

nn::MapperSpec small_mapper(bool identity) {
  nn::MapperSpec s;
  s.depth = 2;
  s.base_channels = 4;
  s.image_size = 8;
  s.identity_init = identity;
  return s;
}

MatD random_images(int batch, int size, Rng& rng) {
  MatD x(3, static_cast<Eigen::Index>(batch) * size * size);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform();
  return x;
}

/// Checks every parameter tensor and the input gradient of L = sum(R .* net(x)).
template <typename Net>
void check_gradients(Net& net, const MatD& x, const MatD& weights) {
  typename Net::Tape tape;
  net.forward(x, &tape);
  const auto g = net.backward(tape, weights, true, true);
  for (int i = 0; i < net.params().count(); ++i) {
    auto f = [&](const MatD& p) {
      Net copy = net;
      copy.params()[i] = p;
      return copy.forward(x).cwiseProduct(weights).sum();
    };
    const double err = test::relative_error(g.params[i], test::numeric_gradient(f, net.params()[i]));
    INFO(net.params().name(i));
    CHECK(err < 1e-4);
  }
  auto fx = [&](const MatD& in) { return net.forward(in).cwiseProduct(weights).sum(); };
  CHECK(test::relative_error(g.input, test::numeric_gradient(fx, x)) < 1e-4);
}

}  // namespace

TEST_CASE("classifier: output shape and feature dimension") {
  Rng rng(1);
  const nn::Classifier<float> net(small_classifier(), rng);
  Rng data_rng(2);
  const MatrixR x = random_images(5, 8, data_rng).cast<float>();
  const MatrixR logits = net.forward(x);
  CHECK(logits.rows() == 3);
  CHECK(logits.cols() == 5);
  CHECK(net.features(x).rows() == 6);
  CHECK_THROWS_AS(net.forward(MatrixR::Zero(3, 7)), ShapeError);
  CHECK_THROWS_AS(net.forward(MatrixR::Zero(1, 64)), ShapeError);
}

TEST_CASE("classifier gradients match central differences in double precision") {
  Rng rng(3);
  nn::Classifier<double> net(small_classifier(), rng);
  Rng data_rng(4);
  const MatD x = random_images(4, 8, data_rng);
  MatD w(3, 4);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = data_rng.normal();
  check_gradients(net, x, w);
}

TEST_CASE("mapper gradients match central differences in double precision") {
  Rng rng(5);
  nn::Mapper<double> net(small_mapper(false), rng);
  Rng data_rng(6);
  const MatD x = random_images(4, 8, data_rng);
  MatD w(3, x.cols());
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = data_rng.normal();
  check_gradients(net, x, w);
}

TEST_CASE("mapper is shape- and range-preserving; identity init reproduces the input") {
  for (int size : {8, 16, 32}) {
    nn::MapperSpec spec = small_mapper(false);
    spec.image_size = size;
    Rng rng(7);
    const nn::Mapper<float> random_net(spec, rng);
    Rng data_rng(8);
    const MatrixR x = random_images(3, size, data_rng).cast<float>();
    const MatrixR y = random_net.forward(x);
    CHECK(y.rows() == x.rows());
    CHECK(y.cols() == x.cols());
    CHECK(y.minCoeff() > 0.0f);
    CHECK(y.maxCoeff() < 1.0f);

    spec.identity_init = true;
    Rng rng2(7);
    const nn::Mapper<float> identity(spec, rng2);
    const MatrixR z = identity.forward(x);
    // eps + (1 - 2 eps) x differs from x by at most eps.
    CHECK((z - x).cwiseAbs().maxCoeff() <= static_cast<float>(nn::kMapperEps) + 1e-6f);
  }
  nn::MapperSpec bad = small_mapper(true);
  bad.image_size = 10;  // not divisible by 2^depth
  Rng rng(1);
  CHECK_THROWS_AS(nn::Mapper<float>(bad, rng), ConfigError);
}

TEST_CASE("same seed gives the same network; forward is deterministic") {
  Rng a(9), b(9);
  const nn::Classifier<float> n1(small_classifier(), a);
  const nn::Classifier<float> n2(small_classifier(), b);
  CHECK(n1.params() == n2.params());
  Rng data_rng(10);
  const MatrixR x = random_images(2, 8, data_rng).cast<float>();
  CHECK(n1.forward(x) == n2.forward(x));
}

TEST_CASE("checkpoints round-trip bitwise and check the network kind") {
  const auto dir = std::filesystem::temp_directory_path() / "lrdg_ckpt_test";
  std::filesystem::create_directories(dir);
  Rng rng(11);
  const nn::Classifier<float> clf(small_classifier(), rng);
  const nn::Mapper<float> map(small_mapper(true), rng);
  nn::save_checkpoint(dir / "c.ckpt", nn::make_checkpoint(clf, nn::StageTag::specific, 42, {{"domain", "tint"}}));
  nn::save_checkpoint(dir / "m.ckpt", nn::make_checkpoint(map, 42));

  const nn::Checkpoint c = nn::load_checkpoint(dir / "c.ckpt");
  CHECK(c.network == "classifier");
  CHECK(c.stage == nn::StageTag::specific);
  CHECK(c.seed == 42);
  CHECK(c.metadata.at("domain") == "tint");
  CHECK(nn::classifier_from(c).params() == clf.params());
  CHECK(nn::classifier_from(c).params().checksum() == clf.params().checksum());
  CHECK(nn::mapper_from(nn::load_checkpoint(dir / "m.ckpt")).params() == map.params());
  CHECK_THROWS_AS(nn::mapper_from(c), Error);

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  CHECK_THROWS_AS(nn::load_checkpoint(dir / "junk.ckpt"), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("parameter checksums are bitwise sensitive") {
  Rng rng(12);
  nn::Classifier<float> clf(small_classifier(), rng);
  const std::uint64_t before = clf.params().checksum();
  float& v = clf.params()[0](0, 0);
  v = std::nextafter(v, 1.0f);
  CHECK(clf.params().checksum() != before);
}
