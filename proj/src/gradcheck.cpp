#include "taylorseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "taylorseg/dataset.hpp"
#include "taylorseg/encoding.hpp"
#include "taylorseg/errors.hpp"
#include "taylorseg/rng.hpp"

namespace taylorseg {

namespace {

double loss_value(const ParamStore& params, const LossFn& loss) {
  Tape tape;
  TapeParams bound(tape, params);
  return loss(bound).value()[0];
}

// Values in +-[0.2, 1], away from the kinks of abs/relu/sign.
Tensor random_tensor(Rng& rng, std::size_t rows, std::size_t cols, bool positive = false) {
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.data()) {
    const double mag = rng.uniform(0.2, 1.0);
    v = positive || rng.uniform() < 0.5 ? mag : -mag;
  }
  return t;
}

struct OpCase {
  std::string name;
  ParamStore inputs;
  std::function<Var(TapeParams&)> op;
};

}  // namespace

double GradcheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.rel_error);
  return m;
}

double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("relative_error needs equal lengths");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

GradcheckReport gradcheck(ParamStore& params, const LossFn& loss, double h) {
  GradMap analytic;
  {
    Tape tape;
    TapeParams bound(tape, params);
    Var l = loss(bound);
    tape.backward(l);
    analytic = bound.gradients();
  }
  GradcheckReport report;
  for (auto& entry : params.entries()) {
    Tensor& value = entry.value;
    std::vector<double> numeric(value.size());
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + h;
      const double up = loss_value(params, loss);
      value[i] = saved - h;
      const double down = loss_value(params, loss);
      value[i] = saved;
      numeric[i] = (up - down) / (2.0 * h);
    }
    const Tensor& a = analytic.at(entry.name);
    report.entries.push_back({entry.name, value.size(), relative_error(a.data(), numeric)});
  }
  return report;
}

ToyProblem toy_problem(std::uint64_t seed) {
  NetworkConfig cfg;
  cfg.downsample_ratio = 0.5;
  cfg.k_neighbors = 8;
  cfg.channels = {8, 12, 16};
  cfg.embed_channels = 8;
  cfg.out_channels = 8;
  SegNet net = SegNet::make_pn(cfg, seed);
  register_app_params(net.params(), net.out_channels(), seed);

  // Perturb zero-initialised tensors so every path carries gradient.
  Rng rng(seed, Stream::Gradcheck);
  for (auto& e : net.params().entries()) {
    if (e.name == "app.w3" || e.name == "app.w5" || e.name.find("bias") != std::string::npos ||
        e.name.find(".b") != std::string::npos || e.name.find("beta") != std::string::npos) {
      for (double& v : e.value.data()) v += rng.uniform(-0.1, 0.1);
    }
    if (e.name.size() > 2 && e.name.substr(e.name.size() - 2) == ".p") e.value[0] = 1.3;
  }

  const auto palette = standard_palette();
  SceneSpec spec;
  spec.class_ids = {0, 1, 2};
  for (int id : spec.class_ids) spec.styles.push_back(palette[static_cast<std::size_t>(id)]);
  spec.points = 64;
  spec.noise = 0.01;
  Dataset data;
  for (std::uint64_t s = 0; s < 4; ++s) data.scenes.push_back(synth_scene(spec, derive_seed(seed, s)));
  const int classes[] = {1, 2};
  Episode ep = sample_episode(data, classes, 2, 1, 1, seed);
  return ToyProblem{std::move(net), std::move(ep), FewShotConfig{}};
}

GradcheckReport gradcheck_pipeline(std::uint64_t seed, double h) {
  ToyProblem toy = toy_problem(seed);
  const SegNet& net = toy.net;
  ParamStore& params = toy.net.params();
  auto loss = [&](TapeParams& bound) {
    return run_episode(bound, net, toy.episode, PrototypeMode::App, toy.fewshot).loss;
  };
  return gradcheck(params, loss, h);
}

GradcheckReport gradcheck_ops(std::uint64_t seed, double h) {
  Rng rng(seed, Stream::Gradcheck, 1);
  std::vector<OpCase> cases;
  auto unary = [&](std::string name, std::function<Var(Var)> f, bool positive = false) {
    OpCase c{std::move(name), {}, {}};
    c.inputs.add("a", ParamGroup::Backbone, random_tensor(rng, 4, 5, positive));
    c.op = [f](TapeParams& p) { return f(p["a"]); };
    cases.push_back(std::move(c));
  };
  auto binary = [&](std::string name, std::size_t br, std::size_t bc, std::function<Var(Var, Var)> f) {
    OpCase c{std::move(name), {}, {}};
    c.inputs.add("a", ParamGroup::Backbone, random_tensor(rng, 4, 5));
    c.inputs.add("b", ParamGroup::Backbone, random_tensor(rng, br, bc));
    c.op = [f](TapeParams& p) { return f(p["a"], p["b"]); };
    cases.push_back(std::move(c));
  };

  binary("matmul", 5, 3, [](Var a, Var b) { return matmul(a, b); });
  binary("add", 4, 5, [](Var a, Var b) { return add(a, b); });
  binary("add_row", 1, 5, [](Var a, Var b) { return add(a, b); });
  binary("sub_scalar", 1, 1, [](Var a, Var b) { return sub(a, b); });
  binary("mul", 4, 5, [](Var a, Var b) { return mul(a, b); });
  binary("mul_row", 1, 5, [](Var a, Var b) { return mul(a, b); });
  binary("concat_cols", 4, 2, [](Var a, Var b) { return concat_cols(a, b); });
  binary("concat_rows", 3, 5, [](Var a, Var b) {
    Var parts[] = {a, b};
    return concat_rows(parts);
  });
  binary("linear", 5, 3, [](Var a, Var w) {
    Var b = a.tape()->constant(Tensor::row({0.1, -0.2, 0.3}));
    return linear(a, w, b);
  });
  unary("transpose", [](Var a) { return transpose(a); });
  unary("scale", [](Var a) { return scale(a, -1.7); });
  unary("abs", [](Var a) { return abs(a); });
  unary("exp", [](Var a) { return exp(a); });
  unary("log", [](Var a) { return log(a); }, true);
  unary("relu", [](Var a) { return relu(a); });
  unary("sin", [](Var a) { return sin(a); });
  unary("cos", [](Var a) { return cos(a); });
  unary("pow_scalar", [](Var a) { return pow_scalar(a, 3.0); });
  unary("sigmoid", [](Var a) { return sigmoid(a); });
  unary("softmax_rows", [](Var a) { return softmax_rows(a); });
  unary("max_pool_stride", [](Var a) { return max_pool_stride(a, 3); });
  unary("gather_rows", [](Var a) { return gather_rows(a, {3, 0, 0, 2}); });
  unary("weighted_gather", [](Var a) {
    return weighted_gather(a, {0, 1, 2, 3, 1, 1}, {0.2, 0.8, 0.5, 0.5, 0.3, 0.7}, 2);
  });
  unary("sum", [](Var a) { return sum(a); });
  unary("mean", [](Var a) { return mean(a); });
  unary("normalize_rows", [](Var a) { return normalize_rows(a); });
  unary("cross_entropy", [](Var a) {
    const int labels[] = {0, 4, 2, 1};
    return cross_entropy(a, labels);
  });

  {
    OpCase c{"pow_learnable", {}, {}};
    c.inputs.add("a", ParamGroup::Backbone, random_tensor(rng, 4, 5));
    c.inputs.add("p", ParamGroup::Backbone, Tensor::scalar(1.4));
    c.op = [](TapeParams& p) { return pow_scalar(p["a"], p["p"]); };
    cases.push_back(std::move(c));
  }
  {
    OpCase c{"layer_norm", {}, {}};
    c.inputs.add("x", ParamGroup::Backbone, random_tensor(rng, 3, 6));
    c.inputs.add("gamma", ParamGroup::Backbone, random_tensor(rng, 1, 6));
    c.inputs.add("beta", ParamGroup::Backbone, random_tensor(rng, 1, 6));
    c.op = [](TapeParams& p) { return layer_norm(p["x"], p["gamma"], p["beta"]); };
    cases.push_back(std::move(c));
  }
  {
    OpCase c{"high_order_kernel", {}, {}};
    c.inputs.add("u", ParamGroup::Backbone, random_tensor(rng, 4, 5));
    c.inputs.add("p", ParamGroup::Backbone, Tensor::scalar(1.6));
    c.op = [](TapeParams& p) { return high_order_kernel(p["u"], KernelConfig{}, p["p"]); };
    cases.push_back(std::move(c));
  }
  {
    const std::size_t ch = 4;
    OpCase c{"app", {}, {}};
    c.inputs.add("fs", ParamGroup::Backbone, random_tensor(rng, 6, ch));
    c.inputs.add("fq", ParamGroup::Backbone, random_tensor(rng, 6, ch));
    c.inputs.add("proto", ParamGroup::Backbone, random_tensor(rng, 1, ch));
    register_app_params(c.inputs, ch, seed);
    c.inputs.get("app.w3") = random_tensor(rng, 1, ch);
    c.inputs.get("app.w5") = random_tensor(rng, ch, ch);
    c.op = [](TapeParams& p) {
      return app(p["fs"], p["fq"], p["proto"], AppWeights::bind(p), 2);
    };
    cases.push_back(std::move(c));
  }

  GradcheckReport report;
  for (OpCase& c : cases) {
    // Random projection turns any output into a scalar loss.
    Tensor out_shape;
    {
      Tape tape;
      TapeParams bound(tape, c.inputs);
      out_shape = c.op(bound).value();
    }
    const Tensor proj = random_tensor(rng, out_shape.rows(), out_shape.cols());
    auto op = c.op;
    auto loss = [op, proj](TapeParams& p) {
      Var out = op(p);
      return sum(mul(out, p.tape().constant(proj.reshaped(out.value().shape()))));
    };
    const GradcheckReport r = gradcheck(c.inputs, loss, h);
    for (auto e : r.entries) {
      e.name = c.name + "/" + e.name;
      report.entries.push_back(std::move(e));
    }
  }
  return report;
}

}  // namespace taylorseg
