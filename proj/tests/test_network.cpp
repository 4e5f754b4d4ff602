#include <limits>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "doctest.h"
#include "dualnorm/error.hpp"
#include "dualnorm/network.hpp"
#include "gradcheck.hpp"

using namespace dualnorm;
using dualnorm::testing::random_tensor;

namespace {

NetConfig small_config(std::set<int> dual = {}) {
  NetConfig cfg;
  cfg.in_channels = 1;
  cfg.num_classes = 3;
  cfg.base_width = 8;
  cfg.dual_blocks = std::move(dual);
  return cfg;
}

// Learnable values of one SPADE subnet counted from its layer shapes.
std::size_t spade_size(std::size_t c, std::size_t classes) {
  const std::size_t hidden = std::max<std::size_t>(c / 2, 1);
  const std::size_t shared = classes * hidden * 9 + hidden;
  const std::size_t head = hidden * c * 9 + c;
  return shared + 2 * head;
}

SemanticMask mask_from(const std::vector<int>& labels, std::size_t n, std::size_t classes, std::size_t h,
                       std::size_t w) {
  return SemanticMask::from_labels(labels, n, classes, h, w);
}

SemanticMask random_mask(std::size_t n, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, 2);
  std::vector<int> labels(n * h * w);
  for (int& l : labels) l = d(rng);
  return mask_from(labels, n, 3, h, w);
}

void make_neutral(SegNetwork& net) {
  for (int b = 1; b <= kBlockCount; ++b) {
    for (std::size_t i = 0; i < 2; ++i) {
      NormSite& s = net.block(b).site(i);
      s.bn.gamma.value.fill(1.0f);
      s.bn.beta.value.fill(0.0f);
      if (s.spade) s.spade->set_neutral();
    }
  }
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_THROWS_AS(SegNetwork::build(small_config({0}), 1), ConfigError);
  CHECK_THROWS_AS(SegNetwork::build(small_config({11}), 1), ConfigError);
  NetConfig two = small_config();
  two.num_classes = 1;
  CHECK_THROWS_AS(SegNetwork::build(two, 1), ConfigError);
  NetConfig in_dual = small_config({1});
  in_dual.norm = NormKind::instance;
  CHECK_THROWS_AS(SegNetwork::build(in_dual, 1), ConfigError);
  NetConfig gn = small_config();
  gn.norm = NormKind::group;
  gn.gn_groups = 3;
  CHECK_THROWS_AS(SegNetwork::build(gn, 1), ConfigError);
  CHECK_NOTHROW(SegNetwork::build(small_config({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}), 1));
}

TEST_CASE("parameter groups partition the network") {
  SegNetwork net = SegNetwork::build(small_config({1, 7}), 3);
  std::set<const Tensor*> seen;
  std::size_t total = 0;
  for (ParamGroup g : {ParamGroup::shared, ParamGroup::norm_bn, ParamGroup::norm_spade}) {
    for (Parameter* p : net.parameters(g)) {
      CHECK(seen.insert(&p->value).second);
      total += p->value.size();
    }
  }
  CHECK(seen.size() == net.parameters().size());
  CHECK(total == net.parameter_count());
  // Only SPADE subnet tensors land in the SPADE group, and only BN affines in the BN group.
  for (Parameter* p : net.parameters(ParamGroup::norm_spade)) CHECK(p->name.find(".spade") != std::string::npos);
  for (Parameter* p : net.parameters(ParamGroup::norm_bn)) CHECK(p->name.find(".bn") != std::string::npos);
  CHECK(net.parameters(ParamGroup::norm_spade).size() == 2 * 2 * 6);
}

TEST_CASE("SPADE parameter overhead") {
  SegNetwork plain = SegNetwork::build(small_config(), 5);
  CHECK(plain.parameter_count(ParamGroup::norm_spade) == 0);
  SegNetwork b1 = SegNetwork::build(small_config({1}), 5);
  SegNetwork b14 = SegNetwork::build(small_config({1, 2, 3, 4}), 5);
  const std::size_t base = plain.parameter_count();
  CHECK(b1.parameter_count() - base == 2 * spade_size(8, 3));
  std::size_t expected14 = 0;
  for (std::size_t c : {8, 16, 32, 64}) expected14 += 2 * spade_size(c, 3);
  CHECK(b14.parameter_count() - base == expected14);
  // The first block is the narrowest, so its subnets cost about a tenth of a percent.
  const double r1 = static_cast<double>(b1.parameter_count()) / static_cast<double>(base);
  const double r14 = static_cast<double>(b14.parameter_count()) / static_cast<double>(base);
  MESSAGE("overhead block1 " << r1 << "x, block1-4 " << r14 << "x");
  CHECK(r1 < 1.005);
  CHECK(r14 > r1);
  CHECK(r14 < 1.15);
}

TEST_CASE("build is deterministic under the seed") {
  SegNetwork a = SegNetwork::build(small_config({1}), 9);
  SegNetwork b = SegNetwork::build(small_config({1}), 9);
  SegNetwork c = SegNetwork::build(small_config({1}), 10);
  CHECK(network_state(a) == network_state(b));
  CHECK_FALSE(network_state(a) == network_state(c));
  auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->name == pb[i]->name);
}

TEST_CASE("forward_bn output is a softmax map at input resolution") {
  std::mt19937_64 rng(11);
  SegNetwork net = SegNetwork::build(small_config(), 11);
  Tape tape;
  Var y = net.forward_bn(tape, tape.constant(random_tensor(Shape{2, 1, 32, 32}, rng)));
  CHECK(y.shape() == Shape{2, 3, 32, 32});
  double worst_sum = 0, worst_dev = 0;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 32 * 32; ++i) {
      double s = 0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = y.value()[(n * 3 + c) * 1024 + i];
        s += v;
        worst_dev = std::max(worst_dev, std::fabs(v - 1.0 / 3.0));
      }
      worst_sum = std::max(worst_sum, std::fabs(s - 1.0));
    }
  CHECK(worst_sum < 1e-5);
  MESSAGE("untrained max deviation from uniform " << worst_dev);
  CHECK(worst_dev < 0.35);

  CHECK_THROWS_AS(net.forward_bn(tape, tape.constant(Tensor(Shape{1, 1, 24, 32}))), ShapeError);
  CHECK_THROWS_AS(net.forward_bn(tape, tape.constant(Tensor(Shape{1, 2, 32, 32}))), ShapeError);
}

TEST_CASE("forward_spade without dual blocks is forward_bn") {
  std::mt19937_64 rng(12);
  SegNetwork net = SegNetwork::build(small_config(), 12);
  Tensor x = random_tensor(Shape{2, 1, 16, 16}, rng);
  SemanticMask m = random_mask(2, 16, 16, rng);
  Tape t1, t2;
  Tensor a = net.forward_bn(t1, t1.constant(x), {Mode::train, false}).value();
  CHECK(net.forward_spade(t2, t2.constant(x), m, {Mode::train, false}).value() == a);
}

TEST_CASE("neutral SPADE modulation reproduces the BN path") {
  std::mt19937_64 rng(13);
  SegNetwork net = SegNetwork::build(small_config({1, 3, 6, 10}), 13);
  make_neutral(net);
  Tensor x = random_tensor(Shape{2, 1, 32, 32}, rng);
  SemanticMask m = random_mask(2, 32, 32, rng);
  {
    Tape t;
    Var yb = net.forward_bn(t, t.constant(x), {Mode::train, false});
    Var ys = net.forward_spade(t, t.constant(x), m, {Mode::train, false});
    CHECK(max_abs_diff(yb.value(), ys.value()) < 1e-5f);
  }
  // Eval mode agrees once the SPADE-path statistics start from the BN ones.
  {
    Tape t;
    net.forward_bn(t, t.constant(x), {Mode::train, true});
  }
  net.seed_spade_running_stats();
  Tape t;
  Var yb = net.forward_bn(t, t.constant(x), {Mode::eval, false});
  Var ys = net.forward_spade(t, t.constant(x), m, {Mode::eval, false});
  CHECK(max_abs_diff(yb.value(), ys.value()) < 1e-5f);
}

TEST_CASE("forward_spade checks the mask") {
  SegNetwork net = SegNetwork::build(small_config({1}), 14);
  Tape t;
  Var x = t.constant(Tensor(Shape{1, 1, 16, 16}));
  std::vector<int> labels(256, 0);
  CHECK_THROWS_AS(net.forward_spade(t, x, mask_from(labels, 1, 2, 16, 16)), ShapeError);
  std::vector<int> small(64, 0);
  CHECK_THROWS_AS(net.forward_spade(t, x, mask_from(small, 1, 3, 8, 8)), ShapeError);
}

TEST_CASE("gradients of the SPADE path skip the BN affines of dual sites") {
  std::mt19937_64 rng(15);
  SegNetwork net = SegNetwork::build(small_config({2}), 15);
  Tensor x = random_tensor(Shape{2, 1, 16, 16}, rng);
  SemanticMask m = random_mask(2, 16, 16, rng);
  Tape t;
  Var y = net.forward_spade(t, t.constant(x), m, {Mode::train, false});
  t.backward(ops::sum_all(ops::mul(y, t.constant(random_tensor(y.shape(), rng)))));
  auto magnitude = [](const Parameter& p) {
    float mag = 0;
    for (float g : p.grad.data()) mag = std::max(mag, std::fabs(g));
    return mag;
  };
  for (std::size_t i = 0; i < 2; ++i) {
    NormSite& s = net.block(2).site(i);
    CHECK(magnitude(s.bn.gamma) == 0.0f);
    CHECK(magnitude(s.bn.beta) == 0.0f);
    for (Parameter* p : s.spade->parameters()) {
      INFO(p->name);
      CHECK(magnitude(*p) > 0.0f);
    }
  }
  CHECK(magnitude(net.block(2).conv1_weight()) > 0.0f);
}

TEST_CASE("predict runs the two passes in sequence") {
  std::mt19937_64 rng(16);
  Tensor x = random_tensor(Shape{2, 1, 32, 32}, rng);
  SegNetwork plain = SegNetwork::build(small_config(), 16);
  CHECK(plain.predict(x) == plain.predict_bn(x));
  {
    Tape t;
    CHECK(plain.predict(x) == argmax_channels(plain.forward_bn(t, t.constant(x), {Mode::eval, false}).value()));
  }

  // A last-block SPADE with large random weights rewrites the decision on part of the image.
  SegNetwork net = SegNetwork::build(small_config({10}), 16);
  for (std::size_t i = 0; i < 2; ++i) {
    for (Parameter* p : net.block(10).site(i).spade->parameters()) p->value = random_tensor(p->value.shape(), rng, -2, 2);
  }
  const std::vector<int> bn_only = net.predict_bn(x);
  const std::vector<int> two_pass = net.predict(x);
  CHECK(two_pass == net.predict(x));
  Tape t;
  Var yb = net.forward_bn(t, t.constant(x), {Mode::eval, false});
  SemanticMask m = SemanticMask::from_argmax(yb.value());
  const std::vector<int> manual = argmax_channels(net.forward_spade(t, t.constant(x), m, {Mode::eval, false}).value());
  CHECK(two_pass == manual);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < bn_only.size(); ++i) changed += bn_only[i] != two_pass[i];
  CHECK(changed > 0);
  CHECK(changed < bn_only.size());
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "dualnorm_test_ckpt";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "net.dnt").string();
  std::mt19937_64 rng(17);
  SegNetwork net = SegNetwork::build(small_config({1, 4}), 17);
  {
    Tape t;
    net.forward_bn(t, t.constant(random_tensor(Shape{2, 1, 16, 16}, rng)));
  }
  save_checkpoint(net, path, {{"stage", "alternate"}, {"iteration", 12}});
  Checkpoint ck = load_checkpoint(path);
  CHECK(network_state(ck.net) == network_state(net));
  CHECK(ck.net.config().dual_blocks == std::set<int>{1, 4});
  CHECK(ck.meta.at("iteration") == 12);

  auto bytes = read_file_bytes(path);
  bytes[bytes.size() / 2] ^= 0x40;
  write_file_bytes(path, bytes);
  CHECK_THROWS_AS(load_checkpoint(path), IntegrityError);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.dnt").string()), IntegrityError);

  std::vector<NamedArray> state = network_state(net);
  state.pop_back();
  CHECK_THROWS_AS(load_network_state(ck.net, state), IntegrityError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("full network gradient check, one seed") {
  std::mt19937_64 rng(18);
  SegNetwork net = SegNetwork::build(small_config({1, 6}), 18);
  Parameter x("input", ParamGroup::shared, random_tensor(Shape{1, 1, 16, 16}, rng));
  SemanticMask m = random_mask(1, 16, 16, rng);
  std::vector<Parameter*> ps{&x};
  for (Parameter* p : net.parameters()) ps.push_back(p);
  testing::GradCheckOptions opt;
  opt.max_entries = 4;
  opt.stability = std::numeric_limits<double>::infinity();
  opt.one_sided = 5e-2;
  auto bn = testing::grad_check_params(
      ps, [&](Tape& t) { return net.forward_bn(t, t.parameter(x), {Mode::train, false}); }, 1, opt);
  MESSAGE("bn path rel " << bn.rel_error << " unstable " << bn.unstable << "/" << bn.probed);
  CHECK(bn.rel_error < 1e-2);
  auto sp = testing::grad_check_params(
      ps, [&](Tape& t) { return net.forward_spade(t, t.parameter(x), m, {Mode::train, false}); }, 1, opt);
  MESSAGE("spade path rel " << sp.rel_error << " unstable " << sp.unstable << "/" << sp.probed);
  CHECK(sp.rel_error < 1e-2);
}
