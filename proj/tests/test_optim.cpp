#include <cmath>
#include <limits>

#include "doctest.h"
#include "helpers.hpp"
#include "metaalign/errors.hpp"
#include "metaalign/optim.hpp"
#include "oracles.hpp"

using namespace metaalign;
using testutil::random_tensor;

namespace {

optim::OptimState plain_state(double lr, double momentum = 0.0, double wd = 0.0) {
  optim::OptimConfig c;
  c.lr = lr;
  c.momentum = momentum;
  c.weight_decay = wd;
  return optim::OptimState(c);
}

const ParamId P{"p"};

double step_once(ParamStore& ps, double g, optim::OptimState& s) {
  optim::sgd_update(ps, {{P, Tensor::vector({g})}}, s);
  return ps.at(P)[0];
}

nn::ModelBundle small_model(nn::DiscriminatorInput input, std::uint64_t seed) {
  nn::ModelSpec spec;
  spec.input_dim = 3;
  spec.hidden = {6, 5};
  spec.num_classes = 3;
  spec.discriminator_input = input;
  spec.discriminator_hidden = 7;
  auto m = nn::build_model(spec);
  nn::init_params(m, seed);
  return m;
}

data::PairedBatch small_batch(std::uint64_t seed, std::size_t n = 6) {
  Rng rng(seed);
  data::PairedBatch b;
  b.src_features = random_tensor(rng, {n, 3});
  b.tgt_features = random_tensor(rng, {n + 1, 3}, -1.0, 3.0);
  for (std::size_t i = 0; i < n; ++i) b.src_labels.push_back(static_cast<int>(i % 3));
  return b;
}

}  // namespace

TEST_CASE("sgd_update") {
  SUBCASE("plain descent") {
    ParamStore ps{{P, Tensor::vector({1.0})}};
    auto s = plain_state(0.1);
    CHECK(step_once(ps, 2.0, s) == doctest::Approx(0.8).epsilon(1e-15));
  }
  SUBCASE("zero gradient is a fixed point") {
    Rng rng(3);
    const Tensor w = random_tensor(rng, {4, 3});
    ParamStore ps{{P, w}};
    auto s = plain_state(0.5);
    optim::sgd_update(ps, {{P, Tensor::zeros({4, 3})}}, s);
    CHECK(testutil::values_of(ps.at(P)) == testutil::values_of(w));
  }
  SUBCASE("two momentum steps follow the unrolled recurrence") {
    // v1 = g, p1 = p0 - lr g; v2 = mu g + g, p2 = p1 - lr (1 + mu) g.
    ParamStore ps{{P, Tensor::vector({1.0})}};
    auto s = plain_state(0.1, 0.9);
    CHECK(step_once(ps, 2.0, s) == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(step_once(ps, 2.0, s) == doctest::Approx(0.8 - 0.1 * 1.9 * 2.0).epsilon(1e-15));
    CHECK(s.velocity.at(P)[0] == doctest::Approx(3.8).epsilon(1e-15));
  }
  SUBCASE("weight decay and its exemption") {
    ParamStore ps{{P, Tensor::vector({2.0})}, {ParamId{"beta"}, Tensor::vector({2.0})}};
    auto s = plain_state(0.1, 0.0, 0.5);
    s.no_decay.insert(ParamId{"beta"});
    optim::sgd_update(ps, {{P, Tensor::vector({0.0})}, {ParamId{"beta"}, Tensor::vector({0.0})}},
                      s);
    CHECK(ps.at(P)[0] == doctest::Approx(1.9).epsilon(1e-15));
    CHECK(ps.at(ParamId{"beta"})[0] == 2.0);
  }
  SUBCASE("parameters without a gradient are untouched") {
    ParamStore ps{{P, Tensor::vector({1.0})}, {ParamId{"q"}, Tensor::vector({5.0})}};
    auto s = plain_state(0.1);
    step_once(ps, 1.0, s);
    CHECK(ps.at(ParamId{"q"})[0] == 5.0);
  }
  SUBCASE("errors") {
    ParamStore ps{{P, Tensor::vector({1.0, 2.0})}};
    auto s = plain_state(0.1);
    CHECK_THROWS_AS(optim::sgd_update(ps, {{P, Tensor::vector({1.0})}}, s), DimensionError);
    CHECK_THROWS_AS(optim::sgd_update(ps, {{ParamId{"x"}, Tensor::vector({1.0})}}, s),
                    ContractError);
    optim::OptimConfig c;
    c.lr = 0.0;
    CHECK_THROWS_AS(optim::OptimState{c}, ContractError);
    c = {};
    c.alpha = -0.1;
    CHECK_THROWS_AS(optim::OptimState{c}, ContractError);
    c = {};
    c.momentum = 1.0;
    CHECK_THROWS_AS(optim::OptimState{c}, ContractError);
    c = {};
    c.weight_decay = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(optim::OptimState{c}, ContractError);
  }
}

TEST_CASE("role_schedule") {
  using optim::Task;
  for (std::size_t it = 0; it < 5; ++it) {
    CHECK(optim::role_schedule(optim::RolePolicy::align_train, it).meta_train == Task::alignment);
    CHECK(optim::role_schedule(optim::RolePolicy::cls_train, it).meta_train ==
          Task::classification);
  }
  CHECK(optim::role_schedule(optim::RolePolicy::alternate, 0).meta_train == Task::alignment);
  CHECK(optim::role_schedule(optim::RolePolicy::alternate, 1).meta_train == Task::classification);
  CHECK(optim::role_schedule(optim::RolePolicy::alternate, 2).meta_train == Task::alignment);
  CHECK(optim::Role{Task::alignment}.meta_test() == Task::classification);
  CHECK(optim::Role{Task::classification}.meta_test() == Task::alignment);
  for (auto p : {optim::RolePolicy::align_train, optim::RolePolicy::cls_train,
                 optim::RolePolicy::alternate}) {
    CHECK(optim::parse_role_policy(optim::to_string(p)) == p);
  }
  CHECK_THROWS_AS(optim::parse_role_policy("random"), ContractError);
}

TEST_CASE("virtual_update") {
  const ParamId a{"a"}, b{"b"}, c{"c"};
  Rng rng(5);
  const nn::Bindings theta{{a, random_tensor(rng, {2, 3})},
                           {b, random_tensor(rng, {3})},
                           {c, random_tensor(rng, {2})}};
  const GradientMap dir{{a, random_tensor(rng, {2, 3})},
                        {b, random_tensor(rng, {3})},
                        {c, random_tensor(rng, {2})}};
  const std::vector<std::vector<ParamId>> groups{{a, b}, {c}};

  SUBCASE("alpha zero is the identity") {
    const auto out = optim::virtual_update(theta, dir, 0.0, Tensor::vector({1.3, 0.7}), groups);
    for (const auto& [id, t] : theta) CHECK(testutil::values_of(out.at(id)) == testutil::values_of(t));
  }
  SUBCASE("a zero group weight freezes its group") {
    const auto out = optim::virtual_update(theta, dir, 0.1, Tensor::vector({0.0, 1.0}), groups);
    CHECK(testutil::values_of(out.at(a)) == testutil::values_of(theta.at(a)));
    CHECK(testutil::values_of(out.at(b)) == testutil::values_of(theta.at(b)));
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(out.at(c)[i] == doctest::Approx(theta.at(c)[i] - 0.1 * dir.at(c)[i]).epsilon(1e-15));
    }
  }
  SUBCASE("scalar example") {
    const auto out = optim::virtual_update({{a, Tensor::vector({1.0})}},
                                           {{a, Tensor::vector({1.0})}}, 0.1,
                                           Tensor::vector({1.0}), {{a}});
    CHECK(out.at(a)[0] == doctest::Approx(0.9).epsilon(1e-15));
  }
  SUBCASE("shapes are preserved") {
    const auto out = optim::virtual_update(theta, dir, 0.2, Tensor::vector({1.0, 1.0}), groups);
    for (const auto& [id, t] : theta) CHECK(out.at(id).shape() == t.shape());
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(optim::virtual_update(theta, dir, 0.1, Tensor::vector({1.0}), groups),
                    ContractError);
    GradientMap missing = dir;
    missing.erase(c);
    CHECK_THROWS_AS(
        optim::virtual_update(theta, missing, 0.1, Tensor::vector({1.0, 1.0}), groups),
        ContractError);
    GradientMap wrong = dir;
    wrong[c] = Tensor::vector({1.0, 2.0, 3.0});
    CHECK_THROWS_AS(optim::virtual_update(theta, wrong, 0.1, Tensor::vector({1.0, 1.0}), groups),
                    DimensionError);
    Graph g;
    GradientMap live = dir;
    live[c] = g.param(c, dir.at(c));
    CHECK_THROWS_AS(optim::virtual_update(theta, live, 0.1, Tensor::vector({1.0, 1.0}), groups),
                    ContractError);
  }
}

TEST_CASE("quadratic toy matches the hand computation") {
  // g_dom = theta = 1, theta' = 1 - alpha, theta-grad = 1 + (theta' - 1),
  // beta-grad = -alpha (theta' - 1); the budget term sits at its kink.
  for (const double alpha : {0.01, 0.1, 0.5}) {
    CAPTURE(alpha);
    const auto g = oracles::scalar_toy(alpha);
    CHECK(std::abs(g.theta - (1.0 - alpha)) <= 1e-12);
    CHECK(std::abs(g.beta - alpha * alpha) <= 1e-12);

    // Cross-check on the closed-form objective 0.5 (alpha beta)^2 near beta = 1.
    const double h = 1e-6;
    auto f = [&](double beta) { return 0.5 * (alpha * beta) * (alpha * beta); };
    CHECK(g.beta == doctest::Approx((f(1.0 + h) - f(1.0 - h)) / (2 * h)).epsilon(1e-6));
  }
  SUBCASE("off the kink the penalty adds its sign") {
    const auto g = oracles::scalar_toy(0.1, 1.0, 1.5);
    // theta' = 1 - 0.15, beta-grad = -0.1 (-0.15) + 1.
    CHECK(g.beta == doctest::Approx(0.015 + 1.0).epsilon(1e-14));
    const auto low = oracles::scalar_toy(0.1, 1.0, 0.5);
    CHECK(low.beta == doctest::Approx(0.005 - 1.0).epsilon(1e-14));
  }
}

TEST_CASE("alpha zero reduces to the joint step") {
  const auto r = oracles::alpha_zero_reduction(11, 20);
  CHECK(r.max_grad_diff <= 1e-12);
  CHECK(r.max_param_diff <= 1e-12);
  CHECK(r.beta_only_penalty);
}

TEST_CASE("beta gradient closed form") {
  const auto r = oracles::beta_closed_form(12, 6);
  CHECK(r.coordinates > 0);
  CHECK(r.mismatches == 0);
  CHECK(r.max_fd_rel_err <= 1e-6);
}

TEST_CASE("meta-step bookkeeping") {
  Rng rng(21);
  for (int trial = 0; trial < 9; ++trial) {
    const auto kind = oracles::kind_for(trial);
    auto f = gradcheck::random_fixture(rng, kind, nn::Activation::relu, 2);
    const auto variant = gradcheck::variant_for(f, kind, 1.0);
    for (auto task : {optim::Task::alignment, optim::Task::classification}) {
      const auto r = optim::compute_metaalign(f.model, f.batch, variant, 0.1, optim::Role{task});
      double sum = 0.0;
      for (double d : r.grad_dot_per_group) sum += d;
      CHECK(r.grad_dot_total == sum);
      CHECK(r.grad_dot_per_group.size() == f.model.groups.size());
      CHECK(r.L_beta >= 0.0);
      if (r.grad_cos) {
        CHECK(*r.grad_cos >= -1.0);
        CHECK(*r.grad_cos <= 1.0);
      }
      CHECK(r.L_total == doctest::Approx(r.L_cls + r.L_dom + r.L_beta).epsilon(1e-15));
      CHECK(r.beta == testutil::values_of(f.model.params.at(f.model.beta.id)));
      if (kind == losses::AlignmentKind::mmd) {
        CHECK_FALSE(r.L_dom_cls.has_value());
      } else {
        CHECK(r.L_dom == -*r.L_dom_cls);
      }
    }
  }
}

TEST_CASE("role symmetry at alpha zero") {
  Rng rng(31);
  for (int trial = 0; trial < 6; ++trial) {
    const auto kind = oracles::kind_for(trial);
    auto f = gradcheck::random_fixture(rng, kind, nn::Activation::relu);
    const auto variant = gradcheck::variant_for(f, kind, 1.0);
    const auto a = optim::compute_metaalign(f.model, f.batch, variant, 0.0,
                                            optim::Role{optim::Task::alignment});
    const auto c = optim::compute_metaalign(f.model, f.batch, variant, 0.0,
                                            optim::Role{optim::Task::classification});
    std::vector<ParamId> all;
    for (const auto& [id, t] : f.model.params) all.push_back(id);
    CHECK(oracles::inf_norm_diff(a.grads, c.grads, all) <= 1e-12);
  }
}

TEST_CASE("meta-step gradient approaches the joint gradient linearly in alpha") {
  Rng rng(41);
  for (int trial = 0; trial < 3; ++trial) {
    const auto kind = oracles::kind_for(trial);
    auto f = gradcheck::random_fixture(rng, kind, nn::Activation::tanh, 2);
    const auto variant = gradcheck::variant_for(f, kind, 1.0);
    const auto joint = optim::compute_joint(f.model, f.batch, variant);
    const auto theta = f.model.theta_ids();
    double previous = 0.0;
    for (const double alpha : {1e-3, 1e-4, 1e-5}) {
      const auto meta = optim::compute_metaalign(f.model, f.batch, variant, alpha,
                                                 optim::Role{optim::Task::alignment});
      const double diff = oracles::inf_norm_diff(meta.grads, joint.grads, theta);
      CAPTURE(alpha);
      CHECK(diff > 0.0);
      if (previous > 0.0) CHECK(diff / previous == doctest::Approx(0.1).epsilon(0.05));
      previous = diff;
    }
  }
}

TEST_CASE("joint step") {
  const auto batch = small_batch(2);
  SUBCASE("lambda zero trains extractor and classifier like supervised learning") {
    auto model = small_model(nn::DiscriminatorInput::features, 7);
    auto reference = model;
    auto s = plain_state(0.05, 0.9, 5e-4);
    optim::joint_step(model, batch, {losses::AlignmentKind::dann, 0.0, 1.0}, s);

    Graph g;
    const auto params = nn::bind(g, reference.params);
    const Tensor loss = losses::cross_entropy(
        nn::classify(reference.classifier, params,
                     nn::extract_features(reference.extractor, params, batch.src_features)),
        batch.src_labels);
    std::set<ParamId> wanted;
    for (const auto& id : reference.theta_ids()) wanted.insert(id);
    for (const auto& id : reference.classifier_ids()) wanted.insert(id);
    const auto grads = backward(loss, wanted);
    auto s2 = plain_state(0.05, 0.9, 5e-4);
    optim::sgd_update(reference.params, grads, s2);
    for (const auto& id : wanted) {
      CAPTURE(id.name);
      CHECK(testutil::values_of(model.params.at(id)) ==
            testutil::values_of(reference.params.at(id)));
    }
  }
  SUBCASE("MMD has no discriminator") {
    auto model = small_model(nn::DiscriminatorInput::none, 7);
    CHECK_FALSE(model.discriminator.has_value());
    CHECK(model.discriminator_ids().empty());
    auto s = plain_state(0.05);
    const auto r = optim::joint_step(model, batch, {losses::AlignmentKind::mmd, 1.0, 2.0}, s);
    for (const auto& [id, g] : r.grads) CHECK(id.name.rfind("D.", 0) == std::string::npos);
    CHECK_FALSE(r.L_dom_cls.has_value());
    CHECK(r.L_dom >= 0.0);
  }
  SUBCASE("group weights are untouched") {
    auto model = small_model(nn::DiscriminatorInput::features, 7);
    const auto beta = testutil::values_of(model.params.at(model.beta.id));
    auto s = plain_state(0.05);
    const auto r = optim::joint_step(model, batch, {}, s);
    CHECK(r.grads.count(model.beta.id) == 0);
    CHECK(testutil::values_of(model.params.at(model.beta.id)) == beta);
    CHECK(r.L_total == doctest::Approx(r.L_cls + r.L_dom).epsilon(1e-15));
  }
  SUBCASE("empty batch") {
    auto model = small_model(nn::DiscriminatorInput::features, 7);
    auto s = plain_state(0.05);
    data::PairedBatch empty;
    CHECK_THROWS_AS(optim::joint_step(model, empty, {}, s), ContractError);
  }
}

TEST_CASE("non-finite values abort the step") {
  const auto batch = small_batch(3);
  for (bool meta : {false, true}) {
    auto model = small_model(nn::DiscriminatorInput::features, 8);
    auto& w = model.params.at(ParamId{"G.0.weight"});
    auto v = testutil::values_of(w);
    v[0] = std::numeric_limits<double>::infinity();
    w = Tensor(w.shape(), v);
    const auto before = model.params;
    auto s = plain_state(0.05);
    optim::StepContext ctx;
    ctx.iteration = 17;
    try {
      if (meta) {
        optim::metaalign_step(model, batch, {}, s, optim::Role{}, ctx);
      } else {
        optim::joint_step(model, batch, {}, s, ctx);
      }
      FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
      CHECK(e.step() == 17);
    }
    for (const auto& [id, t] : before) {
      const auto now = testutil::values_of(model.params.at(id));
      const auto was = testutil::values_of(t);
      for (std::size_t i = 0; i < was.size(); ++i) {
        CHECK((now[i] == was[i] || (std::isnan(now[i]) && std::isnan(was[i]))));
      }
    }
  }
}

TEST_CASE("metaalign step updates every parameter set") {
  auto model = small_model(nn::DiscriminatorInput::features, 9);
  const auto before = model.params;
  optim::OptimConfig c;
  c.alpha = 0.1;
  optim::OptimState s(c);
  s.no_decay.insert(model.beta.id);
  // Move beta off the budget so its penalty subgradient is nonzero.
  model.params[model.beta.id] = Tensor::vector({1.2, 1.1});
  const auto r = optim::metaalign_step(model, small_batch(4), {}, s, optim::Role{});
  CHECK(r.grads.size() == model.params.size());
  for (const auto& [id, t] : before) {
    if (id == model.beta.id) continue;
    CAPTURE(id.name);
    CHECK(testutil::max_abs_diff(model.params.at(id), t) > 0.0);
  }
  CHECK(model.params.at(model.beta.id)[0] != 1.2);
  CHECK(r.beta == std::vector<double>{1.2, 1.1});
  CHECK(r.L_beta == doctest::Approx(0.3).epsilon(1e-12));
}
