#pragma once

// Finite-difference cases for every differentiable primitive and composite
// layer. Shared by the unit suite and the acceptance binary.

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "findrec/findrec.hpp"

namespace gradsuite {

using namespace findrec;
using ad::Var;

struct Case {
  std::string name;
  std::function<double()> run;  // max relative error over all trials
};

// Random fixed projection of `out` to a scalar, so that constant-sum outputs
// (softmax rows, gates) still expose every partial derivative.
inline Var project(const Var& out, std::uint64_t seed) {
  Rng rng(seed);
  return ad::sum(ad::mul(out, ad::constant(rng.normal_tensor(out.shape(), 1.0))));
}

inline double check(const std::string& name, const ad::ScalarFn& fn, const std::vector<Tensor>& inputs) {
  return ad::finite_diff_check(name, fn, inputs).max_rel_err;
}

// Like finite_diff_check, but also differentiates with respect to every
// parameter registered in `store`.
// Location of the worst coordinate seen by the last check_module call.
inline std::string last_worst;

inline double check_module(ParamStore& store, const std::vector<Tensor>& inputs, const ad::ScalarFn& fn,
                           double eps = 1e-4) {
  store.zero_grad();
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(ad::leaf(t, true));
  ad::backward(fn(vars));

  ad::NoGradGuard no_grad;
  std::vector<Var> probe;
  for (const auto& t : inputs) probe.push_back(ad::leaf(t, false));
  double worst = 0.0;
  std::string where;
  auto compare = [&](double analytic, double& x, const std::string& name, std::size_t i) {
    const double orig = x;
    x = orig + eps;
    const double fp = fn(probe).item();
    x = orig - eps;
    const double fm = fn(probe).item();
    x = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
    if (err > worst) {
      worst = err;
      char buf[96];
      std::snprintf(buf, sizeof buf, "[%zu] analytic %.6g numeric %.6g", i, analytic, numeric);
      where = name + buf;
    }
  };
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor g = vars[k].grad();
    for (std::size_t i = 0; i < g.numel(); ++i) compare(g[i], probe[k].mutable_value()[i], "input" + std::to_string(k), i);
  }
  for (auto& p : store.params()) {
    const Tensor g = p.var.grad();
    Tensor& w = p.var.mutable_value();
    const std::size_t skip = p.frozen_row0 ? w.dim(-1) : 0;
    for (std::size_t i = skip; i < w.numel(); ++i) compare(g[i], w[i], p.name, i);
  }
  store.zero_grad();
  last_worst = where;
  return worst;
}

// At init the step sizes are small enough that d/d(a_log) sits at the
// float-noise floor. Move decays and step sizes to O(1) before checking.
inline void exercise_scan(ParamStore& store, std::uint64_t seed) {
  Rng rng(seed ^ 0xa10aULL);
  for (auto& p : store.params()) {
    const bool decay = p.name.ends_with(".a_log");
    if (!decay && !p.name.ends_with(".dt_proj.bias")) continue;
    Tensor& w = p.var.mutable_value();
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = decay ? rng.uniform(-1.5, 0.0) : rng.uniform(-0.5, 0.5);
  }
}

// Redraws every parameter at O(1) scale (frozen padding rows stay zero), so
// deep paths through small-init layers still carry measurable gradient.
inline void randomize_params(ParamStore& store, std::uint64_t seed, double sd) {
  Rng rng(seed);
  for (auto& p : store.params()) {
    Tensor& w = p.var.mutable_value();
    const std::size_t skip = p.frozen_row0 ? w.dim(-1) : 0;
    for (std::size_t i = skip; i < w.numel(); ++i) w[i] = rng.normal(0.0, sd);
  }
  exercise_scan(store, seed);
}

inline double trials(int n, const std::function<double(std::uint64_t)>& one) {
  double worst = 0.0;
  for (int t = 0; t < n; ++t) worst = std::max(worst, one(1000 + static_cast<std::uint64_t>(t)));
  return worst;
}

inline Tensor positive(Rng& rng, Shape s, double lo, double hi) { return rng.uniform_tensor(std::move(s), lo, hi); }

inline std::vector<Case> primitive_cases() {
  std::vector<Case> cases;
  auto unary = [&](std::string name, std::function<Var(const Var&)> f, Shape s, double sd = 1.0) {
    cases.push_back({name, [=] {
                       return trials(10, [&](std::uint64_t seed) {
                         Rng rng(seed);
                         return check(name, [&](const std::vector<Var>& in) { return project(f(in[0]), seed); },
                                      {rng.normal_tensor(s, sd)});
                       });
                     }});
  };
  auto binary = [&](std::string name, std::function<Var(const Var&, const Var&)> f, Shape a, Shape b) {
    cases.push_back({name, [=] {
                       return trials(10, [&](std::uint64_t seed) {
                         Rng rng(seed);
                         return check(
                             name, [&](const std::vector<Var>& in) { return project(f(in[0], in[1]), seed); },
                             {rng.normal_tensor(a, 1.0), rng.normal_tensor(b, 1.0)});
                       });
                     }});
  };

  binary("add", ad::add, {2, 3}, {2, 3});
  binary("add_broadcast_suffix", ad::add, {2, 3, 4}, {4});
  binary("add_broadcast_scalar", ad::add, {2, 3}, {});
  binary("sub", ad::sub, {3, 4}, {3, 4});
  binary("sub_broadcast", ad::sub, {3, 4}, {4});
  binary("mul", ad::mul, {3, 4}, {3, 4});
  binary("mul_broadcast_scalar", ad::mul, {2, 5}, {});
  binary("scale_rows", ad::scale_rows, {3, 2, 4}, {3});
  unary("scale", [](const Var& x) { return ad::scale(x, -2.5); }, {3, 3});
  unary("add_scalar", [](const Var& x) { return ad::add_scalar(x, 0.7); }, {4});
  unary("reshape", [](const Var& x) { return ad::reshape(x, Shape{3, 4}); }, {2, 6});
  unary("exp", ad::exp, {3, 4});
  unary("softplus", ad::softplus, {3, 4}, 3.0);
  unary("sigmoid", ad::sigmoid, {3, 4}, 3.0);
  unary("silu", ad::silu, {3, 4}, 3.0);
  unary("gelu", ad::gelu, {3, 4}, 1.5);
  unary("log_sigmoid", ad::log_sigmoid, {3, 4}, 3.0);
  binary("matmul", ad::matmul, {3, 4}, {4, 5});
  binary("matmul_batched_lhs", ad::matmul, {2, 3, 4}, {4, 2});
  binary("bmm", ad::bmm, {2, 3, 4}, {2, 4, 5});
  unary("transpose", ad::transpose, {2, 3, 4});
  unary("softmax", ad::softmax, {3, 5}, 2.0);
  unary("masked_softmax", [](const Var& x) {
    const std::vector<std::size_t> len = {2, 4, 1};
    return ad::masked_softmax(x, len);
  }, {3, 4, 4}, 2.0);
  cases.push_back({"layer_norm", [] {
                     return trials(10, [](std::uint64_t seed) {
                       Rng rng(seed);
                       return check(
                           "layer_norm",
                           [&](const std::vector<Var>& in) { return project(ad::layer_norm(in[0], in[1], in[2]), seed); },
                           {rng.normal_tensor({3, 5}, 2.0), rng.normal_tensor({5}, 1.0), rng.normal_tensor({5}, 1.0)});
                     });
                   }});
  cases.push_back({"concat", [] {
                     return trials(10, [](std::uint64_t seed) {
                       Rng rng(seed);
                       return check(
                           "concat",
                           [&](const std::vector<Var>& in) { return project(ad::concat({in[0], in[1], in[2]}), seed); },
                           {rng.normal_tensor({2, 3, 2}, 1.0), rng.normal_tensor({2, 3, 4}, 1.0),
                            rng.normal_tensor({2, 3, 1}, 1.0)});
                     });
                   }});
  unary("slice", [](const Var& x) { return ad::slice_last(x, 1, 3); }, {2, 3, 6});
  unary("embedding", [](const Var& t) {
    const std::vector<std::int64_t> ids = {1, 3, 1, 3, 2, 2};
    return ad::embedding(t, ids, Shape{2, 3});
  }, {4, 3});
  unary("dropout", [](const Var& x) { return ad::dropout(x, 0.3, 99); }, {4, 5});
  unary("sum", ad::sum, {3, 4});
  unary("mean", ad::mean, {3, 4});
  unary("sum_last", ad::sum_last, {2, 3, 4});
  unary("gather_positions", [](const Var& x) {
    const std::vector<std::size_t> pos = {2, 0};
    return ad::gather_positions(x, pos);
  }, {2, 4, 3});
  unary("masked_mean", [](const Var& x) {
    const std::vector<std::size_t> len = {3, 1};
    return ad::masked_mean(x, len);
  }, {2, 4, 3});
  unary("pick", [](const Var& x) {
    const std::vector<std::size_t> cols = {1, 4, 2, 2, 3, 1};
    return ad::pick(x, cols, 3);
  }, {2, 5});
  cases.push_back({"mask_padding_column+cross_entropy", [] {
                     return trials(10, [](std::uint64_t seed) {
                       Rng rng(seed);
                       const std::vector<std::int64_t> y = {3, 1, 5};
                       return check(
                           "cross_entropy",
                           [&](const std::vector<Var>& in) { return ad::cross_entropy(ad::mask_padding_column(in[0]), y); },
                           {rng.normal_tensor({3, 6}, 2.0)});
                     });
                   }});
  cases.push_back({"selective_scan", [] {
                     return trials(10, [](std::uint64_t seed) {
                       Rng rng(seed);
                       const std::size_t B = 2, L = 5, D = 3, N = 2;
                       return check(
                           "selective_scan",
                           [&](const std::vector<Var>& in) {
                             return project(selective_scan(in[0], in[1], in[2], in[3], in[4], in[5]), seed);
                           },
                           {rng.normal_tensor({B, L, D}, 1.0), positive(rng, {B, L, D}, 0.05, 1.0),
                            rng.normal_tensor({B, L, N}, 1.0), rng.normal_tensor({B, L, N}, 1.0),
                            positive(rng, {D, N}, -2.0, -0.2), rng.normal_tensor({D}, 1.0)});
                     });
                   }});
  cases.push_back({"causal_conv1d", [] {
                     return trials(10, [](std::uint64_t seed) {
                       Rng rng(seed);
                       return check(
                           "causal_conv1d",
                           [&](const std::vector<Var>& in) { return project(causal_conv1d(in[0], in[1], in[2]), seed); },
                           {rng.normal_tensor({2, 6, 3}, 1.0), rng.normal_tensor({3, 4}, 1.0),
                            rng.normal_tensor({3}, 1.0)});
                     });
                   }});
  cases.push_back({"rbf_paired_kernel", [] {
                     return trials(10, [](std::uint64_t seed) {
                       Rng rng(seed);
                       return check(
                           "rbf_paired_kernel",
                           [&](const std::vector<Var>& in) {
                             return project(paired_kernel(in[0], in[1], Bandwidth{3.0}), seed);
                           },
                           {rng.normal_tensor({4, 3}, 0.7), rng.normal_tensor({4, 3}, 0.7)});
                     });
                   }});
  return cases;
}

inline std::vector<Case> composite_cases() {
  std::vector<Case> cases;
  cases.push_back({"mamba_layer", [] {
                     return trials(3, [](std::uint64_t seed) {
                       Rng rng(seed);
                       ParamStore store;
                       MambaLayer layer(store, "layer", MambaConfig{4, 3, 2, 3, 1}, rng);
                       // move alpha and the step sizes away from their init so every branch is exercised
                       layer.alpha.mutable_value()[0] = 0.8;
                       exercise_scan(store, seed);
                       ForwardContext ctx{true, seed, 1, 0.2};
                       return check_module(store, {rng.normal_tensor({2, 5, 4}, 1.0)},
                                           [&](const std::vector<Var>& in) { return project(layer(in[0], ctx), seed); });
                     });
                   }});
  cases.push_back({"mamba_stack", [] {
                     return trials(2, [](std::uint64_t seed) {
                       Rng rng(seed);
                       ParamStore store;
                       MambaStack stack(store, "stack", MambaConfig{4, 2, 2, 2, 2}, rng);
                       exercise_scan(store, seed);
                       const std::vector<std::size_t> len = {5, 2};
                       return check_module(store, {rng.normal_tensor({2, 5, 4}, 1.0)}, [&](const std::vector<Var>& in) {
                         return project(stack(in[0], len, ForwardContext{}).last, seed);
                       });
                     });
                   }});
  cases.push_back({"modality_encoder", [] {
                     return trials(2, [](std::uint64_t seed) {
                       Rng rng(seed);
                       ParamStore store;
                       ModalityEncoder enc(store, "text", Modality::Text, 3, 4, 5, MambaConfig{4, 2, 2, 2, 1}, rng);
                       exercise_scan(store, seed);
                       const std::vector<std::size_t> len = {4, 2};
                       return check_module(store, {rng.normal_tensor({2, 4, 3}, 1.0)}, [&](const std::vector<Var>& in) {
                         const auto out = enc(in[0], len, ForwardContext{});
                         return ad::add(project(out.last, seed), project(out.sequence, seed + 1));
                       });
                     });
                   }});
  cases.push_back({"cross_attention_head", [] {
                     return trials(10, [](std::uint64_t seed) {
                       Rng rng(seed);
                       const std::vector<std::size_t> len = {4, 2};
                       return check(
                           "cross_attention_head",
                           [&](const std::vector<Var>& in) { return project(cross_attention_head(in[0], in[1], len), seed); },
                           {rng.normal_tensor({2, 4, 3}, 1.0), rng.normal_tensor({2, 4, 3}, 1.0)});
                     });
                   }});
  cases.push_back({"route", [] {
                     return trials(5, [](std::uint64_t seed) {
                       Rng rng(seed);
                       ParamStore store;
                       Router router(store, "router", 3, 4, rng);
                       const std::vector<std::size_t> len = {3, 1};
                       return check_module(store, {rng.normal_tensor({2, 3, 3}, 1.0)}, [&](const std::vector<Var>& in) {
                         return project(route(router, in[0], len), seed);
                       });
                     });
                   }});
  cases.push_back({"expert_mix", [] {
                     return trials(5, [](std::uint64_t seed) {
                       Rng rng(seed);
                       ParamStore store;
                       std::vector<Expert> experts;
                       for (int k = 0; k < 3; ++k) experts.emplace_back(store, "e" + std::to_string(k), 2, rng);
                       return check_module(store, {rng.normal_tensor({2, 3, 2}, 1.0), rng.uniform_tensor({2, 3}, 0.1, 1.0)},
                                           [&](const std::vector<Var>& in) {
                                             return project(expert_mix(experts, in[0], in[1]), seed);
                                           });
                     });
                   }});
  cases.push_back({"cross_modal_full", [] {
                     return trials(2, [](std::uint64_t seed) {
                       Rng rng(seed);
                       ParamStore store;
                       CrossModalMoe moe(store, "crossmodal", 4, HeadConfig{2, 2}, rng);
                       const std::vector<std::size_t> len = {3, 2};
                       return check_module(store, {rng.normal_tensor({2, 3, 4}, 1.0), rng.normal_tensor({2, 3, 4}, 1.0)},
                                           [&](const std::vector<Var>& in) {
                                             return project(moe(in[0], in[1], len, Variant::Full).last, seed);
                                           });
                     });
                   }});
  cases.push_back({"fuse", [] {
                     return trials(5, [](std::uint64_t seed) {
                       Rng rng(seed);
                       ParamStore store;
                       FusionHead head(store, "fusion", 3, 4, rng);
                       ForwardContext ctx{true, seed, 2, 0.2};
                       return check_module(store, {rng.normal_tensor({2, 3}, 1.0), rng.normal_tensor({2, 4}, 1.0)},
                                           [&](const std::vector<Var>& in) { return project(head(in[0], in[1], ctx), seed); });
                     });
                   }});
  cases.push_back({"score_items+rec_loss_ce", [] {
                     return trials(5, [](std::uint64_t seed) {
                       Rng rng(seed);
                       ParamStore store;
                       EmbeddingTable table(store, "items", 6, 3, rng);
                       const std::vector<std::int64_t> y = {2, 6};
                       return check_module(store, {rng.normal_tensor({2, 3}, 1.0)}, [&](const std::vector<Var>& in) {
                         return rec_loss_ce(score_items(in[0], table), y);
                       });
                     });
                   }});
  cases.push_back({"rec_loss_bpr", [] {
                     return trials(5, [](std::uint64_t seed) {
                       Rng rng(seed);
                       const std::vector<std::int64_t> y = {2, 4};
                       const std::vector<std::size_t> neg = {1, 3, 5, 1};
                       return check(
                           "rec_loss_bpr",
                           [&](const std::vector<Var>& in) { return rec_loss_bpr(ad::mask_padding_column(in[0]), y, neg); },
                           {rng.normal_tensor({2, 6}, 1.0)});
                     });
                   }});
  cases.push_back({"iicm_alignment", [] {
                     return trials(10, [](std::uint64_t seed) {
                       Rng rng(seed);
                       const Tensor img = rng.normal_tensor({6, 3}, 1.0);
                       const Tensor txt = rng.normal_tensor({6, 3}, 1.0);
                       // bandwidth is a constant of the batch, fixed at the evaluation point
                       const Bandwidth bw = median_bandwidth(stack_rows(img, txt));
                       return check(
                           "iicm_alignment",
                           [&](const std::vector<Var>& in) {
                             return ad::add_scalar(ad::neg(ad::mean(paired_kernel(in[0], in[1], bw))), 1.0);
                           },
                           {img, txt});
                     });
                   }});
  cases.push_back({"entropy_surrogate", [] {
                     return trials(5, [](std::uint64_t seed) {
                       Rng rng(seed);
                       const Tensor z = rng.normal_tensor({8, 3}, 1.0);
                       const Tensor s = stein_score_estimate(z, 0.01).s_hat;
                       return check(
                           "entropy_surrogate",
                           [&](const std::vector<Var>& in) {
                             return ad::scale(ad::sum(ad::mul(in[0], ad::constant(s))), 1.0 / 8.0);
                           },
                           {z});
                     });
                   }});
  cases.push_back({"full_model_loss", [] {
                     SynthConfig sc;
                     sc.n_users = 6;
                     sc.n_items = 7;
                     sc.style_dim = 2;
                     sc.min_len = 5;
                     sc.max_len = 6;
                     sc.text_dim = 3;
                     sc.image_dim = 2;
                     sc.seed = 4;
                     const PreparedData data = prepare_synthetic(generate_synthetic(sc));
                     ModelConfig mc;
                     mc.d_id = 4;
                     mc.d_hidden = 4;
                     mc.d_align = 3;
                     mc.heads = 2;
                     mc.experts = 2;
                     mc.n_layers = 1;
                     mc.d_state = 2;
                     mc.expand = 1;
                     mc.conv_kernel = 2;
                     mc.max_len = 4;
                     mc.dropout = 0.1;
                     FindRecModel model(mc, shape_of(data), 3);
                     randomize_params(model.params(), 3, 0.5);
                     // long contexts only, so the scan recurrence carries gradient to a_log
                     std::vector<Example> examples;
                     for (const auto& ex : training_examples(data.splits)) {
                       if (ex.context.size() >= 3) examples.push_back(ex);
                     }
                     const auto batches = make_batches(examples, 4, mc.max_len, 1, data.features());
                     const Batch& batch = batches.front();
                     const ForwardContext ctx{true, 1, 1, 0.0};
                     return check_module(model.params(), {}, [&](const std::vector<Var>&) {
                       const ModelOutput out = model.forward(batch, ctx);
                       return ad::add(rec_loss_ce(out.logits, batch.target),
                                      ad::scale(ad::mean(paired_kernel(out.z_img_last, out.z_txt_last, Bandwidth{2.0})), 0.1));
                     });
                   }});
  return cases;
}

}  // namespace gradsuite
