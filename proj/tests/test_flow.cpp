#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "test_support.hpp"
#include "unicombine/flow.hpp"

using namespace unicombine;

namespace {

std::vector<ToySample> toy_train(std::size_t n) {
  std::vector<ToySample> out;
  for (std::uint64_t seed = 0; out.size() < n; ++seed) {
    auto s = gen_scene(seed);
    if (s.split == Split::TRAIN) out.push_back(std::move(s));
  }
  return out;
}

// Two-item batch for the tiny model, with one spatial and one reference condition.
FlowBatch<double> tiny_batch(const ModelConfig& c, std::mt19937_64& rng) {
  FlowBatch<double> b;
  const Shape img{c.image_size, c.image_size, 3};
  for (int i = 0; i < 2; ++i) {
    FlowItem<double> it;
    it.x1 = Tensor<double>::uniform(img, rng, 0, 1);
    it.x0 = Tensor<double>::randn(img, rng);
    it.t = 0.2 + 0.5 * i;
    it.caption = {1, static_cast<std::int64_t>(2 + i), 9};
    it.conds = {{ConditionType::DEPTH, Tensor<double>::uniform({c.image_size, c.image_size, 1}, rng, 0, 1)},
                {ConditionType::SUBJECT, Tensor<double>::uniform(img, rng, 0, 1)}};
    b.items.push_back(std::move(it));
  }
  return b;
}

std::map<std::string, std::vector<float>> snapshot(const Model<float>& m, const LoraRegistry<float>& reg) {
  std::map<std::string, std::vector<float>> out;
  for (const auto& [n, t] : m.params().items()) out[n] = t.values();
  for (const auto& [n, t] : reg.named_tensors()) out[n] = t.values();
  return out;
}

std::set<std::string> changed(const std::map<std::string, std::vector<float>>& a,
                              const std::map<std::string, std::vector<float>>& b) {
  std::set<std::string> out;
  for (const auto& [n, v] : b) {
    auto it = a.find(n);
    if (it == a.end() || it->second != v) out.insert(n);
  }
  return out;
}

}  // namespace

TEST_CASE("interpolation endpoints") {
  std::mt19937_64 rng(1);
  auto x0 = Tensor<double>::randn({4, 3}, rng), x1 = Tensor<double>::randn({4, 3}, rng);
  CHECK(interpolate(x0, x1, 0.0).values() == x0.values());
  CHECK(interpolate(x0, x1, 1.0).values() == x1.values());
  auto mid = interpolate(Tensor<double>::zeros({2, 2}), Tensor<double>::full({2, 2}, 2.0), 0.5);
  for (double v : mid.values()) CHECK(v == 1.0);
  CHECK_THROWS_AS(interpolate(x0, x1, 1.5), ContractError);
  CHECK_THROWS_AS(interpolate(x0, Tensor<double>::zeros({3, 4}), 0.5), DimensionError);
}

TEST_CASE("rf_loss at the oracle and at zero") {
  std::mt19937_64 rng(2);
  FlowBatch<double> b;
  for (int i = 0; i < 3; ++i)
    b.items.push_back({Tensor<double>::randn({4, 4, 3}, rng), Tensor<double>::randn({4, 4, 3}, rng),
                       0.1 * (i + 1), {1}, {}});
  VelocityFn<double> oracle = [&](const Tensor<double>&, double, std::size_t i) {
    return sub(b.items[i].x1, b.items[i].x0);
  };
  CHECK(rf_loss(oracle, b).item() == 0.0);
  VelocityFn<double> zero = [](const Tensor<double>& x, double, std::size_t) {
    return Tensor<double>::zeros(x.shape());
  };
  double want = 0;
  for (const auto& it : b.items) {
    double s = 0;
    for (std::size_t j = 0; j < it.x1.values().size(); ++j) {
      const double d = it.x1.values()[j] - it.x0.values()[j];
      s += d * d;
    }
    want += s / static_cast<double>(it.x1.values().size());
  }
  CHECK(rf_loss(zero, b).item() == doctest::Approx(want / 3).epsilon(1e-12));
  // Nonnegative for any predictor.
  for (int trial = 0; trial < 5; ++trial) {
    VelocityFn<double> noise = [&](const Tensor<double>& x, double, std::size_t) {
      return Tensor<double>::randn(x.shape(), rng);
    };
    CHECK(rf_loss(noise, b).item() > 0);
  }
  VelocityFn<double> wrong = [](const Tensor<double>&, double, std::size_t) {
    return Tensor<double>::zeros({2, 2});
  };
  CHECK_THROWS_AS(rf_loss(wrong, b), DimensionError);
  VelocityFn<double> inf = [](const Tensor<double>& x, double, std::size_t) {
    return Tensor<double>::full(x.shape(), std::numeric_limits<double>::infinity());
  };
  CHECK_THROWS_AS(rf_loss(inf, b), NumericError);
  CHECK_THROWS_AS(rf_loss(zero, FlowBatch<double>{}), ContractError);
}

TEST_CASE("end-to-end rf_loss gradient matches finite differences") {
  const auto c = tiny_config();
  for (std::uint64_t seed : {1, 2, 3}) {
    INFO("seed " << seed);
    Model<double> m(c, seed);
    std::mt19937_64 rng(seed + 100);
    LoraRegistry<double> reg;
    for (auto t : {ConditionType::DEPTH, ConditionType::SUBJECT}) {
      auto a = m.make_adapter("cond_lora/" + to_string(t), rng);
      for (const auto& [_, f] : a->targets()) {
        auto bb = f.b;
        bb.values() = Tensor<double>::randn(bb.shape(), rng, 0.3).values();
      }
      reg.add_condition(t, a);
    }
    reg.set_denoising(m.make_adapter("denoise_lora", rng));
    // The output head starts near zero, which leaves every upstream gradient
    // around 1e-7 and inside finite-difference noise; widen it first.
    for (const char* head : {"base/final/out/w", "base/final/mod/w"}) {
      auto w = m.params().get(head);
      w.values() = Tensor<double>::randn(w.shape(), rng, 0.5).values();
    }
    const auto batch = tiny_batch(c, rng);
    const AdapterSet<double> set{&reg, true, false};
    auto loss = [&] { return rf_loss(m, batch, set); };

    for (const char* name : {"base/x_embed/w", "base/text/embed", "base/time/fc1/w",
                             "base/dual0/img/q/w", "base/dual0/txt/mod/w", "base/single0/mlp1/w",
                             "base/single0/k/w", "base/final/out/w"}) {
      INFO(name);
      CHECK(testing::param_grad_check(loss, m.params().get(name), 1e-4, 12) < 1e-4);
    }
    const auto& depth = reg.condition(ConditionType::DEPTH)->at("dual0/v");
    CHECK(testing::param_grad_check(loss, depth.a, 1e-4, 12) < 1e-4);
    CHECK(testing::param_grad_check(loss, depth.b, 1e-4, 12) < 1e-4);
    const auto& den = reg.denoising()->at("single0/q");
    CHECK(testing::param_grad_check(loss, den.b, 1e-4, 12) < 1e-4);
  }
}

TEST_CASE("adam step against a hand computation") {
  auto p = Tensor<double>::from({2}, {1.0, -2.0});
  p.set_requires_grad();
  Adam<double> opt({{"p", p}}, {0.1, 0.9, 0.999, 1e-8, 0.01});
  for (int step = 1; step <= 3; ++step) {
    const std::vector<double> w = p.values();
    p.zero_grad();
    {
      Graph<double> g;
      GraphScope<double> s(g);
      g.backward(sum(mul(p, p)));
    }
    opt.step();
    CHECK(opt.steps_taken() == step);
    (void)w;
  }
  // Replay the three updates by hand.
  double w[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 3; ++t)
    for (int j = 0; j < 2; ++j) {
      const double g = 2 * w[j] + 0.01 * w[j];
      m[j] = 0.9 * m[j] + 0.1 * g;
      v[j] = 0.999 * v[j] + 0.001 * g * g;
      const double mh = m[j] / (1 - std::pow(0.9, t)), vh = v[j] / (1 - std::pow(0.999, t));
      w[j] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    }
  CHECK(p.values()[0] == doctest::Approx(w[0]).epsilon(1e-12));
  CHECK(p.values()[1] == doctest::Approx(w[1]).epsilon(1e-12));

  auto st = opt.state();
  REQUIRE(st.size() == 2);
  CHECK(st[0].first == "adam/m/p");
  CHECK(st[1].first == "adam/v/p");
  Adam<double> other({{"p", p}}, {});
  CHECK_THROWS_AS(other.load_state({}, 3), ConfigError);
}

TEST_CASE("plans are validated") {
  TrainPlan p;
  CHECK_NOTHROW(p.validate());
  p.stage = Stage::CONDITION_LORA;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p.conditions = {ConditionType::CANNY, ConditionType::DEPTH};
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p.conditions = {ConditionType::CANNY};
  CHECK_NOTHROW(p.validate());
  p.batch_size = 0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  CHECK(to_string(Stage::DENOISING_LORA) == "denoising-lora");
  CHECK(parse_sample_mode("Training_Based") == SampleMode::TRAINING_BASED);
  CHECK_THROWS_AS(parse_sample_mode("guided"), ConfigError);
}

TEST_CASE("batches depend only on seed and step") {
  const auto data = toy_train(20);
  TrainPlan p;
  p.seed = 5;
  p.batch_size = 3;
  p.stage = Stage::CONDITION_LORA;
  p.conditions = {ConditionType::CANNY};
  auto a = make_batch<float>(p, data, 7), b = make_batch<float>(p, data, 7), c = make_batch<float>(p, data, 8);
  REQUIRE(a.items.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a.items[i].x0.values() == b.items[i].x0.values());
    CHECK(a.items[i].t == b.items[i].t);
    CHECK(a.items[i].conds.size() == 1);
    CHECK(a.items[i].conds[0].type == ConditionType::CANNY);
  }
  CHECK(a.items[0].x0.values() != c.items[0].x0.values());
  CHECK_THROWS_AS(make_batch<float>(p, {}, 0), ConfigError);

  auto e1 = make_eval_batch<float>(data, {ConditionType::DEPTH}, 3);
  auto e2 = make_eval_batch<float>(std::vector<ToySample>(data.begin(), data.begin() + 5),
                                   {ConditionType::DEPTH}, 3);
  CHECK(e1.items.size() == data.size());
  // An item does not depend on how many follow it.
  CHECK(e1.items[4].x0.values() == e2.items[4].x0.values());
}

TEST_CASE("stage isolation") {
  const auto data = toy_train(16);
  Model<float> m(desk_config(), 3);
  LoraRegistry<float> reg;
  auto step_plan = [](Stage s, std::vector<ConditionType> c) {
    TrainPlan p;
    p.stage = s;
    p.conditions = std::move(c);
    p.steps = 3;
    p.batch_size = 2;
    p.learning_rate = 1e-3;
    p.seed = 9;
    return p;
  };

  auto before = snapshot(m, reg);
  {
    Trainer<float> t(m, reg, step_plan(Stage::BASE, {}));
    t.run(data);
  }
  auto after = snapshot(m, reg);
  for (const auto& n : changed(before, after)) CHECK(n.rfind("base/", 0) == 0);
  CHECK(changed(before, after).size() > 10);

  before = after;
  {
    Trainer<float> t(m, reg, step_plan(Stage::CONDITION_LORA, {ConditionType::CANNY}));
    t.run(data);
  }
  after = snapshot(m, reg);
  auto diff = changed(before, after);
  CHECK_FALSE(diff.empty());
  for (const auto& n : diff) CHECK(n.rfind("cond_lora/CANNY/", 0) == 0);

  {
    Trainer<float> t(m, reg, step_plan(Stage::CONDITION_LORA, {ConditionType::DEPTH}));
    t.run(data);
  }
  before = snapshot(m, reg);
  {
    Trainer<float> t(m, reg, step_plan(Stage::DENOISING_LORA, {ConditionType::CANNY, ConditionType::DEPTH}));
    t.run(data);
  }
  after = snapshot(m, reg);
  diff = changed(before, after);
  CHECK_FALSE(diff.empty());
  for (const auto& n : diff) CHECK(n.rfind("denoise_lora/", 0) == 0);
}

TEST_CASE("denoising stage needs its condition adapters") {
  Model<float> m(desk_config(), 4);
  LoraRegistry<float> reg;
  TrainPlan p;
  p.stage = Stage::DENOISING_LORA;
  p.conditions = {ConditionType::SUBJECT, ConditionType::MASK_FILL};
  try {
    Trainer<float> t(m, reg, p);
    FAIL("expected a configuration error");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("SUBJECT") != std::string::npos);
    CHECK(msg.find("MASK_FILL") != std::string::npos);
  }
}

TEST_CASE("resuming reproduces an uninterrupted run") {
  const auto data = toy_train(12);
  TrainPlan p;
  p.stage = Stage::BASE;
  p.steps = 6;
  p.batch_size = 2;
  p.learning_rate = 1e-3;
  p.seed = 4;
  p.log_every = 2;

  Model<float> straight(desk_config(), 5);
  LoraRegistry<float> r1;
  Trainer<float> t1(straight, r1, p);
  const auto full = t1.run(data);
  // Every second step plus the last one.
  REQUIRE(full.size() == 4);
  CHECK(full.back().step == 5);

  Model<float> split(desk_config(), 5);
  LoraRegistry<float> r2;
  auto half = p;
  half.steps = 3;
  std::map<std::string, Tensor<float>> state;
  {
    Trainer<float> t(split, r2, half);
    t.run(data);
    for (auto& [n, v] : t.optimizer().state()) state[n] = v.clone();
  }
  Trainer<float> t2(split, r2, p);
  t2.optimizer().load_state(state, 3);
  const auto rest = t2.run(data);
  CHECK(rest.front().step == 4);
  CHECK(rest.front().loss == full[2].loss);
  CHECK(rest.back().loss == full.back().loss);
  for (std::size_t i = 0; i < straight.params().items().size(); ++i)
    CHECK(straight.params().items()[i].second.values() == split.params().items()[i].second.values());
  CHECK(loss_csv({{0, 1.5}, {10, 0.25}}) == "step,loss\n0,1.5\n10,0.25\n");
  CHECK(loss_csv({{3, 2}}, false) == "3,2\n");
}

TEST_CASE("200 training steps lower the loss") {
  const auto data = toy_train(64);
  Model<float> m(desk_config(), 6);
  LoraRegistry<float> reg;
  TrainPlan p;
  p.steps = 200;
  p.batch_size = 4;
  p.learning_rate = 1e-3;
  p.weight_decay = 0;
  p.seed = 6;
  p.log_every = 1;
  Trainer<float> t(m, reg, p);
  const auto log = t.run(data);
  REQUIRE(log.size() == 200);
  double first = 0, last = 0;
  for (int i = 0; i < 20; ++i) {
    first += log[i].loss;
    last += log[180 + i].loss;
  }
  CHECK(last < first);
}

TEST_CASE("euler integration") {
  std::mt19937_64 rng(7);
  auto x0 = Tensor<double>::randn({4, 4, 3}, rng), target = Tensor<double>::randn({4, 4, 3}, rng);
  for (std::int64_t steps : {1, 4, 16}) {
    auto v = sub(target, x0);
    auto out = euler_integrate<double>([&](const Tensor<double>&, double) { return v; }, x0, steps);
    CHECK(max_abs_diff(out.data(), target.data()) <= 1e-12);
    auto outf = euler_integrate<float>(
        [&](const Tensor<float>&, float) { return cast<float>(v); }, cast<float>(x0), steps);
    CHECK(max_abs_diff(outf.data(), cast<float>(target).data()) <= 1e-5);
  }
  // One step is x0 + v(x0, 0).
  auto field = [](const Tensor<double>& x, double t) { return add_scalar(scale(x, -0.5), 1.0 + t); };
  auto one = euler_integrate<double>(field, x0, 1);
  CHECK(max_abs_diff(one.data(), add(x0, field(x0, 0.0)).data()) == 0.0);
  // The grid is t_k = k/steps.
  std::vector<double> ts;
  euler_integrate<double>([&](const Tensor<double>& x, double t) {
    ts.push_back(t);
    return x;
  }, x0, 4);
  CHECK(ts == std::vector<double>{0.0, 0.25, 0.5, 0.75});
  CHECK_THROWS_AS(euler_integrate<double>(field, x0, 0), ContractError);
}

TEST_CASE("sampling modes and determinism") {
  const auto c = desk_config();
  Model<float> m(c, 8);
  std::mt19937_64 rng(9);
  LoraRegistry<float> reg;
  reg.add_condition(ConditionType::CANNY, m.make_adapter("cond_lora/CANNY", rng));
  reg.add_condition(ConditionType::DEPTH, m.make_adapter("cond_lora/DEPTH", rng));
  const auto s = gen_scene(3);
  std::vector<Condition<float>> conds{
      {ConditionType::CANNY, image_tensor<float>(s.conditions.at(ConditionType::CANNY))},
      {ConditionType::DEPTH, image_tensor<float>(s.conditions.at(ConditionType::DEPTH))}};

  // Training-free works with no denoising adapter at all.
  auto a = sample_euler(m, s.caption_ids, conds, &reg, 4, 11, SampleMode::TRAINING_FREE);
  auto b = sample_euler(m, s.caption_ids, conds, &reg, 4, 11, SampleMode::TRAINING_FREE);
  CHECK(a.values() == b.values());
  for (float v : a.values()) CHECK((v >= 0.0f && v <= 1.0f));
  CHECK(sample_euler(m, s.caption_ids, conds, &reg, 4, 12, SampleMode::TRAINING_FREE).values() != a.values());
  CHECK_THROWS_AS(sample_euler(m, s.caption_ids, conds, &reg, 4, 11, SampleMode::TRAINING_BASED), ConfigError);
  CHECK_THROWS_AS(sample_euler(m, s.caption_ids,
                               {{ConditionType::SUBJECT, image_tensor<float>(s.conditions.at(ConditionType::SUBJECT))}},
                               &reg, 4, 11, SampleMode::TRAINING_FREE),
                  ConfigError);

  // With a denoising adapter loaded, training-free still never applies it.
  reg.set_denoising(m.make_adapter("denoise_lora", rng));
  {
    AdapterLog log;
    sample_euler(m, s.caption_ids, conds, &reg, 2, 11, SampleMode::TRAINING_FREE);
    std::set<std::string> used;
    for (const auto& call : log.calls) used.insert(call.adapter);
    CHECK(used == std::set<std::string>{"", "cond_lora/CANNY", "cond_lora/DEPTH"});
  }
  {
    AdapterLog log;
    sample_euler(m, s.caption_ids, conds, &reg, 2, 11, SampleMode::TRAINING_BASED);
    std::set<std::string> used;
    for (const auto& call : log.calls)
      if (call.branch == "X") used.insert(call.adapter);
    CHECK(used == std::set<std::string>{"denoise_lora"});
  }
  CHECK(sample_noise<float>(c, 5).values() == sample_noise<float>(c, 5).values());
}
