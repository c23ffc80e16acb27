// Acceptance suite: every release criterion in one binary, one verdict line
// each. Tolerances, budgets and desk-scale targets are pinned in
// acceptance_config.json next to this file. Exit status is the number of
// failed gating criteria (the curriculum comparison reports but never gates).

#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <vector>

#include <omp.h>

#include "dseg/commands.hpp"
#include "dseg/inference.hpp"
#include "dseg/metrics.hpp"
#include "dseg/train.hpp"
#include "support/testutil.hpp"

#include "json.hpp"

using namespace dseg;
using Clock = std::chrono::steady_clock;
using nlohmann::json;

namespace {

double secs_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  int id;
  bool pass;
  bool gating = true;
  std::string detail;
};

std::vector<Verdict> g_verdicts;

void report(int id, bool pass, const std::string& detail, bool gating = true) {
  g_verdicts.push_back({id, pass, gating, detail});
  const char* tag = pass ? "[PASS]" : (gating ? "[FAIL]" : "[FLAG]");
  std::printf("%s criterion %d: %s\n", tag, id, detail.c_str());
  std::fflush(stdout);
}

// ---------------------------------------------------------------------------
// 1. Table conformance: scale-1 forward trace sizes and parameter count.
// ---------------------------------------------------------------------------

const std::vector<std::pair<std::string, std::array<int64_t, 3>>> kTableSizes = {
    {"conv1-1", {64, 224, 224}},   {"conv1-2", {64, 224, 224}},
    {"pool1", {64, 112, 112}},     {"conv2-1", {128, 112, 112}},
    {"conv2-2", {128, 112, 112}},  {"pool2", {128, 56, 56}},
    {"conv3-1", {256, 56, 56}},    {"conv3-2", {256, 56, 56}},
    {"conv3-3", {256, 56, 56}},    {"pool3", {256, 28, 28}},
    {"conv4-1", {512, 28, 28}},    {"conv4-2", {512, 28, 28}},
    {"conv4-3", {512, 28, 28}},    {"pool4", {512, 14, 14}},
    {"conv5-1", {512, 14, 14}},    {"conv5-2", {512, 14, 14}},
    {"conv5-3", {512, 14, 14}},    {"pool5", {512, 7, 7}},
    {"fc6", {4096, 1, 1}},         {"fc7", {4096, 1, 1}},
    {"deconv-fc6", {512, 7, 7}},   {"unpool5", {512, 14, 14}},
    {"deconv5-1", {512, 14, 14}},  {"deconv5-2", {512, 14, 14}},
    {"deconv5-3", {512, 14, 14}},  {"unpool4", {512, 28, 28}},
    {"deconv4-1", {512, 28, 28}},  {"deconv4-2", {512, 28, 28}},
    {"deconv4-3", {256, 28, 28}},  {"unpool3", {256, 56, 56}},
    {"deconv3-1", {256, 56, 56}},  {"deconv3-2", {256, 56, 56}},
    {"deconv3-3", {128, 56, 56}},  {"unpool2", {128, 112, 112}},
    {"deconv2-1", {128, 112, 112}},{"deconv2-2", {64, 112, 112}},
    {"unpool1", {64, 224, 224}},   {"deconv1-1", {64, 224, 224}},
    {"deconv1-2", {64, 224, 224}}, {"output", {21, 224, 224}},
};

void criterion1(const json& cfg) {
  const auto t0 = Clock::now();
  const auto budget = cfg.at("runtime_budget_sec").get<double>();
  const auto batch = cfg.at("forward_batch").get<int64_t>();

  const NetworkConfig net = build_deconvnet(21, 1.0, 224);
  auto model = init_model<float>(net, 123);

  const double params = static_cast<double>(model.param_count());
  const double target = cfg.at("param_target").get<double>();
  const double rel = std::abs(params - target) / target;

  TensorF x = testutil::random_tensor<float>(Shape4(batch, 3, 224, 224), 5, 0.5);
  auto res = forward(model, x, BnMode::train, true);

  std::map<std::string, Shape4> by_name;
  for (size_t i = 0; i < net.layers.size(); ++i)
    by_name[net.layers[i].name] = res.trace->outputs[i].shape();

  int mismatches = 0;
  for (const auto& [name, want] : kTableSizes) {
    const Shape4& got = by_name.at(name);
    if (got.c != want[0] || got.h != want[1] || got.w != want[2]) {
      ++mismatches;
      std::printf("  table mismatch at %s: got (%lld,%lld,%lld)\n", name.c_str(),
                  static_cast<long long>(got.c), static_cast<long long>(got.h),
                  static_cast<long long>(got.w));
    }
  }
  const double elapsed = secs_since(t0);
  const bool pass = mismatches == 0 &&
                    rel < cfg.at("param_rel_tol").get<double>() && elapsed < budget;
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "table conformance: %zu/%zu sizes exact, params %.1fM (%.2f%% from 252M), "
                "%.1fs (budget %.0fs)",
                kTableSizes.size() - static_cast<size_t>(mismatches), kTableSizes.size(),
                params / 1e6, rel * 100.0, elapsed, budget);
  report(1, pass, buf);
}

// ---------------------------------------------------------------------------
// 2. Adjoint identity for every (kernel, stride, pad) row of the table.
// ---------------------------------------------------------------------------

void criterion2(const json& cfg) {
  struct Row {
    const char* name;
    int k, s, p;
  };
  // Every convolutional/deconvolutional row; pools are not adjoint pairs.
  const std::vector<Row> rows = {
      {"conv1-1", 3, 1, 1},  {"conv1-2", 3, 1, 1},  {"conv2-1", 3, 1, 1},
      {"conv2-2", 3, 1, 1},  {"conv3-1", 3, 1, 1},  {"conv3-2", 3, 1, 1},
      {"conv3-3", 3, 1, 1},  {"conv4-1", 3, 1, 1},  {"conv4-2", 3, 1, 1},
      {"conv4-3", 3, 1, 1},  {"conv5-1", 3, 1, 1},  {"conv5-2", 3, 1, 1},
      {"conv5-3", 3, 1, 1},  {"fc6", 7, 1, 0},      {"fc7", 1, 1, 0},
      {"deconv-fc6", 7, 1, 0}, {"deconv5-1", 3, 1, 1}, {"deconv5-2", 3, 1, 1},
      {"deconv5-3", 3, 1, 1}, {"deconv4-1", 3, 1, 1}, {"deconv4-2", 3, 1, 1},
      {"deconv4-3", 3, 1, 1}, {"deconv3-1", 3, 1, 1}, {"deconv3-2", 3, 1, 1},
      {"deconv3-3", 3, 1, 1}, {"deconv2-1", 3, 1, 1}, {"deconv2-2", 3, 1, 1},
      {"deconv1-1", 3, 1, 1}, {"deconv1-2", 3, 1, 1}, {"output", 1, 1, 0},
  };
  const double tol = cfg.at("rel_tol").get<double>();
  double worst = 0.0;
  uint64_t seed = 900;
  for (const Row& row : rows) {
    ConvParams<double> p;
    p.weights = testutil::random_tensor<double>(Shape4(6, 5, row.k, row.k), seed++, 0.7);
    p.stride = row.s;
    p.pad = row.p;
    const int64_t side = std::max(8, row.k + 2);
    auto x = testutil::random_tensor<double>(Shape4(2, 5, side, side), seed++);
    auto cx = conv2d_forward(x, p);
    auto y = testutil::random_tensor<double>(cx.shape(), seed++);
    auto dy = deconv2d_forward(y, p);
    worst = std::max(worst, testutil::rel_err(dot(cx, y), dot(x, dy)));
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "adjoint identity over %zu table rows: max rel err %.3g (tol %.0e)",
                rows.size(), worst, tol);
  report(2, worst < tol, buf);
}

// ---------------------------------------------------------------------------
// 3. Gradient suite: per-layer finite differences plus the end-to-end check.
// ---------------------------------------------------------------------------

void criterion3(const json& cfg) {
  const auto t0 = Clock::now();
  const double layer_tol = cfg.at("layer_tol").get<double>();
  const double bn_tol = cfg.at("batchnorm_tol").get<double>();
  const double e2e_tol = cfg.at("end_to_end_tol").get<double>();
  using testutil::fd_check;
  using testutil::random_tensor;
  bool pass = true;
  std::string fails;
  auto note = [&](const char* what, double err, double tol) {
    if (err >= tol) {
      pass = false;
      fails += std::string(" ") + what;
    }
  };

  {  // conv
    ConvParams<double> p;
    p.weights = random_tensor<double>(Shape4(3, 2, 3, 3), 1, 0.5);
    p.stride = 1;
    p.pad = 1;
    p.bias = {0.1, -0.2, 0.3};
    auto x = random_tensor<double>(Shape4(1, 2, 5, 5), 2);
    auto w = random_tensor<double>(Shape4(1, 3, 5, 5), 3);
    auto g = conv2d_backward(x, p, w);
    auto loss = [&] { return dot(conv2d_forward(x, p), w); };
    note("conv.x", fd_check(x.data(), x.size(), loss,
                            {g.d_input.vec().begin(), g.d_input.vec().end()}).max_rel_err,
         layer_tol);
    note("conv.w", fd_check(p.weights.data(), p.weights.size(), loss,
                            {g.d_weights.vec().begin(), g.d_weights.vec().end()}).max_rel_err,
         layer_tol);
    note("conv.b", fd_check(p.bias.data(), 3, loss, g.d_bias).max_rel_err, layer_tol);
  }
  {  // deconv
    ConvParams<double> p;
    p.weights = random_tensor<double>(Shape4(3, 2, 3, 3), 4, 0.5);
    p.stride = 1;
    p.pad = 1;
    p.bias = {0.05, -0.1};
    auto x = random_tensor<double>(Shape4(1, 3, 4, 4), 5);
    auto w = random_tensor<double>(Shape4(1, 2, 4, 4), 6);
    auto g = deconv2d_backward(x, p, w);
    auto loss = [&] { return dot(deconv2d_forward(x, p), w); };
    note("deconv.x", fd_check(x.data(), x.size(), loss,
                              {g.d_input.vec().begin(), g.d_input.vec().end()}).max_rel_err,
         layer_tol);
    note("deconv.w",
         fd_check(p.weights.data(), p.weights.size(), loss,
                  {g.d_weights.vec().begin(), g.d_weights.vec().end()}).max_rel_err,
         layer_tol);
  }
  {  // pooling pair: gradients route through switches
    auto x = random_tensor<double>(Shape4(1, 2, 6, 6), 7);
    auto [y, sw] = maxpool2d(x);
    auto w = random_tensor<double>(y.shape(), 8);
    auto g = maxpool2d_backward(w, sw, x.shape());
    auto loss = [&] { return dot(maxpool2d(x).first, w); };
    note("maxpool",
         fd_check(x.data(), x.size(), loss, {g.vec().begin(), g.vec().end()}, 1e-5)
             .max_rel_err,
         layer_tol);

    auto yy = random_tensor<double>(y.shape(), 9);
    auto wu = random_tensor<double>(x.shape(), 10);
    auto gu = maxunpool2d_backward(wu, sw);
    auto lossu = [&] { return dot(maxunpool2d(yy, sw, x.shape()), wu); };
    note("maxunpool",
         fd_check(yy.data(), yy.size(), lossu, {gu.vec().begin(), gu.vec().end()}, 1e-5)
             .max_rel_err,
         layer_tol);
  }
  {  // relu away from the kink
    auto x = random_tensor<double>(Shape4(1, 2, 4, 4), 11);
    for (int64_t i = 0; i < x.size(); ++i)
      if (std::abs(x[i]) < 1e-2) x[i] = 0.2;
    auto w = random_tensor<double>(x.shape(), 12);
    auto g = relu_backward(x, w);
    auto loss = [&] { return dot(relu_forward(x), w); };
    note("relu",
         fd_check(x.data(), x.size(), loss, {g.vec().begin(), g.vec().end()}, 1e-4)
             .max_rel_err,
         layer_tol);
  }
  {  // batchnorm with statistics coupling
    auto x = random_tensor<double>(Shape4(2, 3, 4, 4), 13);
    auto st = BatchNormState<double>::identity(3);
    st.mode = BnMode::train;
    for (size_t c = 0; c < 3; ++c) st.gamma[c] = 0.7 + 0.2 * static_cast<double>(c);
    auto w = random_tensor<double>(x.shape(), 14);
    auto g = batchnorm_backward(x, st, w);
    auto loss = [&] {
      auto fresh = st;
      return dot(batchnorm_forward(x, fresh), w);
    };
    note("batchnorm.x",
         fd_check(x.data(), x.size(), loss,
                  {g.d_input.vec().begin(), g.d_input.vec().end()}).max_rel_err,
         bn_tol);
    note("batchnorm.gamma", fd_check(st.gamma.data(), 3, loss, g.d_gamma).max_rel_err,
         bn_tol);
    note("batchnorm.beta", fd_check(st.beta.data(), 3, loss, g.d_beta).max_rel_err,
         bn_tol);
  }
  {  // crop (adjoint route) and softmax + cross entropy
    auto x = random_tensor<double>(Shape4(1, 2, 7, 7), 15);
    const Shape4 target(1, 2, 4, 4);
    auto w = random_tensor<double>(target, 16);
    auto g = uncrop_backward(w, x.shape());
    auto loss = [&] { return dot(crop_center(x, target), w); };
    note("crop",
         fd_check(x.data(), x.size(), loss, {g.vec().begin(), g.vec().end()}).max_rel_err,
         layer_tol);

    auto logits = random_tensor<double>(Shape4(1, 4, 3, 3), 17);
    auto ws = random_tensor<double>(logits.shape(), 18);
    auto probs = softmax_per_pixel(logits);
    auto gs = softmax_per_pixel_backward(probs, ws);
    auto loss_s = [&] { return dot(softmax_per_pixel(logits), ws); };
    note("softmax",
         fd_check(logits.data(), logits.size(), loss_s,
                  {gs.vec().begin(), gs.vec().end()}, 1e-4).max_rel_err,
         layer_tol);

    LabelMask labels(Shape4(1, 1, 3, 3));
    Rng rng(19);
    for (int64_t i = 0; i < labels.size(); ++i)
      labels[i] = static_cast<int32_t>(rng.uniform_int(4));
    auto [lv, gl] = cross_entropy_loss(logits, labels);
    auto loss_ce = [&] { return cross_entropy_loss(logits, labels).first; };
    note("cross_entropy",
         fd_check(logits.data(), logits.size(), loss_ce,
                  {gl.vec().begin(), gl.vec().end()}, 1e-4).max_rel_err,
         layer_tol);
  }
  {  // fixed bilinear upsample layer: input gradient through the adjoint
    auto p = bilinear_upsample_kernel<double>(2, 3);
    auto x = random_tensor<double>(Shape4(1, 3, 5, 5), 20);
    auto w = random_tensor<double>(Shape4(1, 3, 10, 10), 21);
    auto g = deconv2d_backward(x, p, w);
    auto loss = [&] { return dot(deconv2d_forward(x, p), w); };
    note("upsample",
         fd_check(x.data(), x.size(), loss,
                  {g.d_input.vec().begin(), g.d_input.vec().end()}).max_rel_err,
         layer_tol);
  }

  double e2e_worst = 0.0;
  {  // end-to-end at 1/16 scale, 16x16 input, extended precision
    const NetworkConfig net = build_deconvnet(3, 1.0 / 16.0, 16);
    auto model = init_model<double>(net, 19, 0.5);
    auto x = random_tensor<double>(Shape4(4, 3, 16, 16), 20);
    auto w = random_tensor<double>(Shape4(4, 3, 16, 16), 21);
    auto r = forward(model, x, BnMode::train, true);
    auto grads = backward(model, *r.trace, w);
    auto loss = [&] { return dot(forward(model, x, BnMode::train, false).output, w); };
    double gmax = 0.0;
    for (const auto& [name, g] : grads)
      for (double v : g) gmax = std::max(gmax, std::abs(v));
    for (auto& ref : param_registry(model)) {
      const auto& g = grads.at(ref.name);
      double tmax = 0.0;
      for (double v : g) tmax = std::max(tmax, std::abs(v));
      const double floor = std::max(1e-3 * tmax, 1e-5 * gmax);
      auto res = fd_check(ref.data, ref.size, loss, {g.begin(), g.end()}, 1e-7, 3,
                          static_cast<uint64_t>(ref.size) + 7, floor);
      e2e_worst = std::max(e2e_worst, res.max_rel_err);
    }
    if (e2e_worst >= e2e_tol) {
      pass = false;
      fails += " end-to-end";
    }
  }

  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "gradient suite: layers vs central differences (tol %.0e, bn %.0e), "
                "end-to-end worst %.3g (tol %.0e), %.0fs%s%s",
                layer_tol, bn_tol, e2e_worst, e2e_tol, secs_since(t0),
                pass ? "" : " — failed:", fails.c_str());
  report(3, pass, buf);
}

// ---------------------------------------------------------------------------
// 4. Unpooling laws on randomized cases; switch determinism across threads.
// ---------------------------------------------------------------------------

void criterion4(const json& cfg) {
  const auto cases = cfg.at("cases").get<int64_t>();
  const auto thread_cases = cfg.at("thread_cases").get<int64_t>();
  Rng rng(777);
  int64_t bad = 0;
  for (int64_t k = 0; k < cases; ++k) {
    const Shape4 s(1 + rng.uniform_int(2), 1 + rng.uniform_int(3),
                   2 * (1 + rng.uniform_int(8)), 2 * (1 + rng.uniform_int(8)));
    auto x = testutil::random_tensor<float>(s, 1000 + static_cast<uint64_t>(k));
    auto [y, sw] = maxpool2d(x);
    for (int64_t i = 0; i < y.size(); ++i) y[i] = std::abs(y[i]);
    auto up = maxunpool2d(y, sw, s);
    auto [y2, sw2] = maxpool2d(up);
    if (!(y2.vec() == y.vec())) ++bad;
    // at most one nonzero per window
    for (int64_t plane = 0; plane < s.n * s.c && bad == 0; ++plane)
      for (int64_t oy = 0; oy < s.h / 2; ++oy)
        for (int64_t ox = 0; ox < s.w / 2; ++ox) {
          int nz = 0;
          for (int64_t dy = 0; dy < 2; ++dy)
            for (int64_t dx = 0; dx < 2; ++dx)
              if (up[plane * s.plane() + (oy * 2 + dy) * s.w + (ox * 2 + dx)] != 0.0f)
                ++nz;
          if (nz > 1) ++bad;
        }
  }

  int64_t thread_mismatch = 0;
  for (int64_t k = 0; k < thread_cases; ++k) {
    auto x = testutil::random_tensor<float>(Shape4(2, 4, 16, 16),
                                            5000 + static_cast<uint64_t>(k));
    omp_set_num_threads(1);
    auto [y1, s1] = maxpool2d(x);
    omp_set_num_threads(4);
    auto [y4, s4] = maxpool2d(x);
    if (!(s1.indices == s4.indices && y1.vec() == y4.vec())) ++thread_mismatch;
  }
  omp_set_num_threads(omp_get_num_procs());

  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "unpooling laws on %lld randomized cases: %lld violations; switch maps "
                "across thread counts: %lld mismatches",
                static_cast<long long>(cases), static_cast<long long>(bad),
                static_cast<long long>(thread_mismatch));
  report(4, bad == 0 && thread_mismatch == 0, buf);
}

// ---------------------------------------------------------------------------
// 5. Aggregation equals a brute-force triple loop; order and duplication laws.
// ---------------------------------------------------------------------------

void criterion5(const json& cfg) {
  const auto cases = cfg.at("cases").get<int64_t>();
  int64_t bad = 0;
  for (int64_t k = 0; k < cases; ++k) {
    Rng rng(3000 + static_cast<uint64_t>(k));
    const int64_t H = 4 + rng.uniform_int(5), W = 4 + rng.uniform_int(5);
    const int64_t C = 2 + rng.uniform_int(3);
    const int64_t n_props = 1 + rng.uniform_int(5);
    const AggMode mode = k % 2 == 0 ? AggMode::max : AggMode::sum;

    std::vector<PlacedMap> maps;
    for (int64_t i = 0; i < n_props; ++i) {
      const int64_t x0 = rng.uniform_int(W - 2), y0 = rng.uniform_int(H - 2);
      const int64_t x1 = x0 + 2 + rng.uniform_int(W - x0 - 2 + 1);
      const int64_t y1 = y0 + 2 + rng.uniform_int(H - y0 - 2 + 1);
      ProposalPrediction pred{{x0, y0, std::min(x1, W), std::min(y1, H), 0.0},
                              testutil::random_tensor<float>(Shape4(1, C, 4, 4),
                                                             4000 + static_cast<uint64_t>(k * 7 + i),
                                                             2.0)};
      maps.push_back(place_in_image(pred, H, W, mode));
    }
    auto agg = aggregate(maps, mode);
    // brute-force triple loop
    for (int64_t c = 0; c < C && !bad; ++c)
      for (int64_t y = 0; y < H && !bad; ++y)
        for (int64_t x = 0; x < W; ++x) {
          float ref = mode == AggMode::max ? kNeutralMax : 0.0f;
          for (const auto& pm : maps)
            ref = mode == AggMode::max ? std::max(ref, pm.map.at(0, c, y, x))
                                       : ref + pm.map.at(0, c, y, x);
          if (agg.P.at(0, c, y, x) != ref) {
            ++bad;
            break;
          }
        }
    if (mode == AggMode::max) {
      // order invariance and duplicate idempotence are exact for max
      auto rev = maps;
      std::reverse(rev.begin(), rev.end());
      if (!(aggregate(rev, mode).P.vec() == agg.P.vec())) ++bad;
      auto dup = maps;
      dup.insert(dup.end(), maps.begin(), maps.end());
      if (!(aggregate(dup, mode).P.vec() == agg.P.vec())) ++bad;
    } else {
      // sum: order invariance up to float reassociation; duplication doubles
      auto rev = maps;
      std::reverse(rev.begin(), rev.end());
      auto arev = aggregate(rev, mode);
      for (int64_t i = 0; i < agg.P.size(); ++i)
        if (testutil::rel_err(arev.P[i], agg.P[i]) > 1e-6) ++bad;
      auto dup = maps;
      dup.insert(dup.end(), maps.begin(), maps.end());
      auto adup = aggregate(dup, mode);
      for (int64_t i = 0; i < agg.P.size(); ++i)
        if (testutil::rel_err(adup.P[i], 2.0f * agg.P[i]) > 1e-6) ++bad;
    }
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "aggregation vs brute-force oracle on %lld randomized instances "
                "(both modes, order/duplication laws): %lld violations",
                static_cast<long long>(cases), static_cast<long long>(bad));
  report(5, bad == 0, buf);
}

// ---------------------------------------------------------------------------
// 6. Metric oracle fixtures.
// ---------------------------------------------------------------------------

void criterion6(const json&) {
  bool pass = true;
  std::string fails;

  {  // 2x2 blocks overlapping in one cell: IoU 1/7
    LabelMask gt(Shape4(1, 1, 4, 4)), pr(Shape4(1, 1, 4, 4));
    for (int64_t y = 0; y < 2; ++y)
      for (int64_t x = 0; x < 2; ++x) gt.at(0, 0, y, x) = 1;
    for (int64_t y = 1; y < 3; ++y)
      for (int64_t x = 1; x < 3; ++x) pr.at(0, 0, y, x) = 1;
    ConfusionCounts c(2);
    accumulate(c, gt, pr);
    const auto ious = iou_per_class(c);
    if (!ious[1] || std::abs(*ious[1] - 1.0 / 7.0) > 1e-12) {
      pass = false;
      fails += " 1/7-case";
    }
  }
  {  // perfect prediction: all IoUs 1
    LabelMask m(Shape4(1, 1, 3, 3), {0, 1, 2, 1, 0, 2, 2, 1, 0});
    ConfusionCounts c(3);
    accumulate(c, m, m);
    if (mean_iou(c) != 1.0 || pixel_accuracy(c) != 1.0) {
      pass = false;
      fails += " perfect";
    }
  }
  {  // defined IoUs {1.0, 0.5} -> mean 0.75
    ConfusionCounts c(2);
    c.at(0, 0) = 4;              // background exact
    c.at(1, 1) = 2;
    // give class 1 two misses into background: recompute -> bkg not exact
    ConfusionCounts d(3);
    d.at(0, 0) = 10;
    d.at(1, 1) = 2;
    d.at(1, 2) = 2;  // class1 IoU = 0.5, class2 IoU = 0, bkg = 1
    const auto ious = iou_per_class(d);
    const double m = (*ious[0] + *ious[1] + *ious[2]) / 3.0;
    if (std::abs(*ious[0] - 1.0) > 0 || std::abs(*ious[1] - 0.5) > 0 ||
        std::abs(mean_iou(d) - m) > 1e-12) {
      pass = false;
      fails += " mean";
    }
    if (std::abs((1.0 + 0.5) / 2.0 - 0.75) > 0) {
      pass = false;
      fails += " arith";
    }
  }
  {  // hand-counted 4x4 tally with an ignored pixel
    LabelMask gt(Shape4(1, 1, 4, 4),
                 {0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 255, 1, 2, 2, 0, 0});
    LabelMask pr(Shape4(1, 1, 4, 4), {0, 1, 1, 1, 0, 0, 2, 1, 2, 0, 1, 1, 2, 2, 0, 1});
    ConfusionCounts c(3);
    accumulate(c, gt, pr);
    if (c.ignored != 1 || c.at(0, 0) != 4 || c.at(0, 1) != 2 || c.at(1, 1) != 4 ||
        c.at(1, 2) != 1 || c.at(2, 2) != 3 || c.at(2, 0) != 1) {
      pass = false;
      fails += " tally";
    }
  }
  report(6, pass,
         std::string("metric oracle fixtures (1/7 overlap, perfect, means, hand tally)") +
             (pass ? "" : " — failed:" + fails));
}

// ---------------------------------------------------------------------------
// Desk-scale machinery shared by criteria 7, 9 and 10.
// ---------------------------------------------------------------------------

struct DeskState {
  std::vector<Sample> train, val;
  Model model;       // after the full two-stage curriculum
  Model fcn;         // trained baseline
  bool fcn_ready = false;
  double stage1_train_miou = 0.0;
  double heldout_miou = 0.0;
  json cfg;
  SegmentOptions seg_opt;
};

SegmentOptions desk_segment_options(const json& desk) {
  SegmentOptions opt;
  opt.mode = AggMode::max;
  opt.top_k = desk.at("eval_proposals").get<int64_t>();
  opt.grid_scales = desk.at("grid_scales").get<std::vector<int64_t>>();
  opt.grid_stride = desk.at("grid_stride").get<int64_t>();
  return opt;
}

OptimConfig desk_optim(const json& desk, int64_t iters) {
  const auto& o = desk.at("optimizer");
  OptimConfig cfg;
  cfg.lr = o.at("lr").get<double>();
  cfg.momentum = o.at("momentum").get<double>();
  cfg.weight_decay = o.at("weight_decay").get<double>();
  cfg.batch_size = o.at("batch_size").get<int64_t>();
  cfg.val_interval = o.at("val_interval").get<int64_t>();
  cfg.patience = o.at("patience").get<int64_t>();
  cfg.lr_drop_factor = o.at("lr_drop_factor").get<double>();
  cfg.improve_margin = o.at("improve_margin").get<double>();
  cfg.max_iters = iters;
  return cfg;
}

double whole_image_miou(Model& model, const std::vector<Sample>& images,
                        const SegmentOptions& opt, int64_t classes) {
  ConfusionCounts counts(classes);
  for (const Sample& s : images) {
    auto res = segment_image(model, nullptr, s.image, {}, opt);
    accumulate(counts, s.mask, res.label_mask);
  }
  return mean_iou(counts);
}

DeskState run_desk(const json& desk) {
  DeskState st;
  st.cfg = desk;
  const auto& sy = desk.at("synth");
  SynthConfig sc;
  sc.count = sy.at("count").get<int64_t>();
  sc.val_count = sy.at("val").get<int64_t>();
  sc.image_side = sy.at("image_side").get<int64_t>();
  sc.seed = sy.at("seed").get<uint64_t>();
  sc.num_foreground_classes = sy.at("classes").get<int64_t>();
  for (auto& s : synth_shapes(sc)) (s.split == "val" ? st.val : st.train).push_back(std::move(s));

  const auto& net = desk.at("network");
  const int64_t classes = net.at("num_classes").get<int64_t>();
  const int64_t side = net.at("input_side").get<int64_t>();
  st.model = init_model<float>(
      build_deconvnet(classes, net.at("scale").get<double>(), side),
      desk.at("train_seed").get<uint64_t>());

  auto s1 = make_stage1_examples(st.train);
  auto s1_val = make_stage1_examples(st.val);
  auto s1_bal = balance_classes(s1.examples);

  TrainState state;
  StageRunConfig run;
  run.optim = desk_optim(desk, desk.at("stage1_iters").get<int64_t>());
  run.stage = 1;
  run.out_side = side;
  run.resize_side = desk.at("resize_side").get<int64_t>();
  run.num_classes = classes;
  run.seed = desk.at("train_seed").get<uint64_t>();
  train_stage(st.model, state, s1_bal, s1_val.examples, run);

  // Stage-1 verdict input: mean IoU over (a sample of) the training examples.
  std::vector<TrainingExample> train_eval;
  const auto limit = desk.at("train_eval_examples").get<size_t>();
  for (size_t i = 0; i < s1.examples.size() && i < limit; ++i)
    train_eval.push_back(center_fit(s1.examples[i], side));
  st.stage1_train_miou =
      evaluate_validation(st.model, train_eval, classes, run.pixel_means).second;

  // Stage 2: proposal-driven examples.
  st.seg_opt = desk_segment_options(desk);
  std::map<std::string, std::vector<BoxGeometry>> props, val_props;
  for (auto& s : st.train)
    props[s.id] = grid_proposals(s.image, st.seg_opt.grid_scales, st.seg_opt.grid_stride);
  for (auto& s : st.val)
    val_props[s.id] = grid_proposals(s.image, st.seg_opt.grid_scales, st.seg_opt.grid_stride);
  const double iou_min = desk.at("stage2_iou_min").get<double>();
  auto s2 = balance_classes(make_stage2_examples(st.train, props, iou_min));
  auto s2_val = make_stage2_examples(st.val, val_props, iou_min);
  run.stage = 2;
  run.optim = desk_optim(desk, desk.at("stage2_iters").get<int64_t>());
  train_stage(st.model, state, s2, s2_val, run);

  st.heldout_miou = whole_image_miou(st.model, st.val, st.seg_opt, classes);
  return st;
}

void criterion7(DeskState& st) {
  // Behavioral spot check: a proposal covering a lone instance labels the
  // crop center with that instance's class after training.
  {
    int hits = 0, total = 0;
    const int64_t side = st.model.config.input_shape.h;
    for (const Sample& s : st.val) {
      if (s.instances.size() != 1) continue;
      ++total;
      auto pred = predict_proposal(st.model, s.image, s.instances[0].box,
                                   st.seg_opt.pixel_means);
      const int64_t plane = side * side;
      const int64_t px = (side / 2) * side + side / 2;
      float best = pred.score_map[px];
      int32_t arg = 0;
      for (int64_t c = 1; c < pred.score_map.shape().c; ++c)
        if (pred.score_map[c * plane + px] > best) {
          best = pred.score_map[c * plane + px];
          arg = static_cast<int32_t>(c);
        }
      if (arg == s.instances[0].class_id) ++hits;
    }
    std::printf("  lone-instance crops: center pixel labeled correctly on %d/%d\n",
                hits, total);
  }
  const double t1 = st.cfg.at("stage1_train_miou_target").get<double>();
  const double t2 = st.cfg.at("heldout_miou_target").get<double>();
  char buf[240];
  std::snprintf(buf, sizeof(buf),
                "desk-scale learning: stage-1 train-example mIoU %.3f (target %.2f), "
                "held-out whole-image mIoU %.3f with %lld max-aggregated grid proposals "
                "(target %.2f)",
                st.stage1_train_miou, t1, st.heldout_miou,
                static_cast<long long>(st.seg_opt.top_k), t2);
  report(7, st.stage1_train_miou >= t1 && st.heldout_miou >= t2, buf);
}

// ---------------------------------------------------------------------------
// 8. Curriculum effect: two-stage vs stage-2-only, averaged over seeds.
//    A reported comparison: failure flags, it does not gate.
// ---------------------------------------------------------------------------

void criterion8(const json& cur) {
  const auto seeds = cur.at("seeds").get<std::vector<uint64_t>>();
  const auto& sy = cur.at("synth");
  SynthConfig sc;
  sc.count = sy.at("count").get<int64_t>();
  sc.val_count = sy.at("val").get<int64_t>();
  sc.image_side = sy.at("image_side").get<int64_t>();
  sc.seed = sy.at("seed").get<uint64_t>();
  sc.num_foreground_classes = sy.at("classes").get<int64_t>();
  std::vector<Sample> train, val;
  for (auto& s : synth_shapes(sc)) (s.split == "val" ? val : train).push_back(std::move(s));

  const auto& net = cur.at("network");
  const int64_t classes = net.at("num_classes").get<int64_t>();
  const int64_t side = net.at("input_side").get<int64_t>();
  const double scale = net.at("scale").get<double>();
  const int64_t iters1 = cur.at("stage1_iters").get<int64_t>();
  const int64_t iters2 = cur.at("stage2_iters").get<int64_t>();

  SegmentOptions opt;
  opt.mode = AggMode::max;
  opt.top_k = cur.at("eval_proposals").get<int64_t>();
  opt.grid_scales = cur.at("grid_scales").get<std::vector<int64_t>>();
  opt.grid_stride = cur.at("grid_stride").get<int64_t>();

  auto s1 = make_stage1_examples(train);
  auto s1_val = make_stage1_examples(val);
  auto s1_bal = balance_classes(s1.examples);
  std::map<std::string, std::vector<BoxGeometry>> props, val_props;
  for (auto& s : train) props[s.id] = grid_proposals(s.image, opt.grid_scales, opt.grid_stride);
  for (auto& s : val) val_props[s.id] = grid_proposals(s.image, opt.grid_scales, opt.grid_stride);
  const double iou_min = cur.at("stage2_iou_min").get<double>();
  auto s2 = balance_classes(make_stage2_examples(train, props, iou_min));
  auto s2_val = make_stage2_examples(val, val_props, iou_min);

  auto stage_cfg = [&](int stage, uint64_t seed, int64_t iters) {
    StageRunConfig run;
    run.optim.batch_size = cur.at("batch_size").get<int64_t>();
    run.optim.val_interval = cur.at("val_interval").get<int64_t>();
    run.optim.max_iters = iters;
    run.stage = stage;
    run.out_side = side;
    run.resize_side = cur.at("resize_side").get<int64_t>();
    run.num_classes = classes;
    run.seed = seed;
    return run;
  };

  double sum_two = 0.0, sum_single = 0.0;
  for (uint64_t seed : seeds) {
    {  // two-stage schedule: easy centered crops first, proposals second
      auto model = init_model<float>(build_deconvnet(classes, scale, side), seed);
      TrainState state;
      train_stage(model, state, s1_bal, s1_val.examples, stage_cfg(1, seed, iters1));
      train_stage(model, state, s2, s2_val, stage_cfg(2, seed, iters2));
      sum_two += whole_image_miou(model, val, opt, classes);
    }
    {  // single-stage schedule: proposals only, same total budget
      auto model = init_model<float>(build_deconvnet(classes, scale, side), seed);
      TrainState state;
      train_stage(model, state, s2, s2_val, stage_cfg(2, seed, iters1 + iters2));
      sum_single += whole_image_miou(model, val, opt, classes);
    }
  }
  const double avg_two = sum_two / static_cast<double>(seeds.size());
  const double avg_single = sum_single / static_cast<double>(seeds.size());
  const bool holds = avg_two >= avg_single;
  char buf[240];
  std::snprintf(buf, sizeof(buf),
                "curriculum effect (reported comparison): two-stage mean IoU %.3f vs "
                "stage-2-only %.3f over %zu seeds — inequality %s",
                avg_two, avg_single, seeds.size(), holds ? "holds" : "VIOLATED at this scale");
  report(8, holds, buf, /*gating=*/false);
}

// ---------------------------------------------------------------------------
// 9. Aggregation progression: adding proposals largest-first.
// ---------------------------------------------------------------------------

void criterion9(DeskState& st, const json& cfg) {
  const double max_drop = cfg.at("max_prefix_drop").get<double>();
  const int64_t classes = st.cfg.at("network").at("num_classes").get<int64_t>();
  const int64_t top_k = st.seg_opt.top_k;

  std::vector<ConfusionCounts> per_prefix(static_cast<size_t>(top_k),
                                          ConfusionCounts(classes));
  ConfusionCounts whole_counts(classes);

  for (const Sample& s : st.val) {
    auto proposals = grid_proposals(s.image, st.seg_opt.grid_scales, st.seg_opt.grid_stride);
    auto selected = select_proposals(proposals, top_k);
    std::stable_sort(selected.begin(), selected.end(),
                     [](const BoxGeometry& a, const BoxGeometry& b) {
                       return a.area() > b.area();
                     });
    const int64_t H = s.image.shape().h, W = s.image.shape().w;
    AggregatedMap agg;
    agg.mode = AggMode::max;
    agg.P = full<float>(Shape4(1, classes, H, W), kNeutralMax);
    agg.coverage.assign(static_cast<size_t>(H * W), 0);
    for (size_t t = 0; t < selected.size(); ++t) {
      auto pred = predict_proposal(st.model, s.image, selected[t], st.seg_opt.pixel_means);
      const TensorF local =
          bilinear_resize(pred.score_map, pred.box.height(), pred.box.width());
      for (int64_t c = 0; c < classes; ++c)
        for (int64_t y = 0; y < pred.box.height(); ++y) {
          const float* src = local.data() + (c * pred.box.height() + y) * pred.box.width();
          float* dst = agg.P.data() + (c * H + pred.box.y0 + y) * W + pred.box.x0;
          for (int64_t x = 0; x < pred.box.width(); ++x) dst[x] = std::max(dst[x], src[x]);
        }
      for (int64_t y = pred.box.y0; y < pred.box.y1; ++y)
        for (int64_t x = pred.box.x0; x < pred.box.x1; ++x)
          ++agg.coverage[static_cast<size_t>(y * W + x)];
      auto res = finalize(agg);
      accumulate(per_prefix[t], s.mask, res.label_mask);
    }
    // One proposal covering the whole image, for the contrast value.
    AggregatedMap wagg;
    wagg.mode = AggMode::max;
    wagg.P = full<float>(Shape4(1, classes, H, W), kNeutralMax);
    wagg.coverage.assign(static_cast<size_t>(H * W), 0);
    auto wpred = predict_proposal(st.model, s.image, BoxGeometry{0, 0, W, H, 1.0},
                                  st.seg_opt.pixel_means);
    const TensorF wlocal =
        bilinear_resize(wpred.score_map, wpred.box.height(), wpred.box.width());
    for (int64_t c = 0; c < classes; ++c)
      for (int64_t y = 0; y < wpred.box.height(); ++y)
        for (int64_t x = 0; x < wpred.box.width(); ++x)
          wagg.P.at(0, c, wpred.box.y0 + y, wpred.box.x0 + x) = wlocal.at(0, c, y, x);
    for (auto& v : wagg.coverage) v = 1;
    accumulate(whole_counts, s.mask, finalize(wagg).label_mask);
  }

  std::vector<double> curve;
  for (auto& c : per_prefix) curve.push_back(mean_iou(c));
  double worst_drop = 0.0;
  for (size_t t = 1; t < curve.size(); ++t)
    worst_drop = std::max(worst_drop, curve[t - 1] - curve[t]);
  const double whole = mean_iou(whole_counts);
  const bool pass = worst_drop <= max_drop && curve.back() > whole;

  std::string curve_str;
  for (size_t t = 0; t < curve.size(); t += 4) {
    char seg[32];
    std::snprintf(seg, sizeof(seg), "%s%.3f", t ? " " : "", curve[t]);
    curve_str += seg;
  }
  char buf[300];
  std::snprintf(buf, sizeof(buf),
                "largest-first aggregation: curve [%s .. %.3f], worst prefix drop %.4f "
                "(allowed %.2f), final %.3f > whole-image-proposal %.3f: %s",
                curve_str.c_str(), curve.back(), worst_drop, max_drop, curve.back(),
                whole, curve.back() > whole ? "yes" : "no");
  report(9, pass, buf);
}

// ---------------------------------------------------------------------------
// 10. Ensemble with the trained FCN baseline.
// ---------------------------------------------------------------------------

void criterion10(DeskState& st, const json& cfg) {
  const auto& net = st.cfg.at("network");
  const int64_t classes = net.at("num_classes").get<int64_t>();
  const int64_t side = net.at("input_side").get<int64_t>();

  st.fcn = init_model<float>(
      build_fcn_baseline(classes, net.at("scale").get<double>(), side),
      st.cfg.at("train_seed").get<uint64_t>() + 100);
  auto train_ex = whole_image_examples(st.train);
  auto val_ex = whole_image_examples(st.val);
  TrainState state;
  StageRunConfig run;
  run.optim = desk_optim(st.cfg, cfg.at("fcn_iters").get<int64_t>());
  run.stage = 1;
  run.out_side = side;
  run.resize_side = st.cfg.at("resize_side").get<int64_t>();
  run.num_classes = classes;
  run.seed = st.cfg.at("train_seed").get<uint64_t>() + 100;
  train_stage(st.fcn, state, train_ex, val_ex, run);
  st.fcn_ready = true;

  // Idempotence of the mean is exact.
  auto probe = softmax_per_pixel(
      testutil::random_tensor<float>(Shape4(1, classes, 6, 6), 42, 2.0));
  const bool idem = ensemble_mean(probe, probe).vec() == probe.vec();

  ConfusionCounts cd(classes), cf(classes), ce(classes);
  double worst_sum_err = 0.0;
  float min_prob = 0.0f;
  for (const Sample& s : st.val) {
    auto deconv_res = segment_image(st.model, nullptr, s.image, {}, st.seg_opt);
    auto fcn_probs = whole_image_probs(st.fcn, s.image, st.seg_opt.pixel_means);
    auto mean = ensemble_mean(deconv_res.class_probs, fcn_probs);

    const int64_t plane = s.image.shape().plane();
    LabelMask em(Shape4(1, 1, s.image.shape().h, s.image.shape().w));
    for (int64_t px = 0; px < plane; ++px) {
      double sum = 0.0;
      float best = mean[px];
      int32_t arg = 0;
      for (int64_t c = 0; c < classes; ++c) {
        const float v = mean[c * plane + px];
        min_prob = std::min(min_prob, v);
        sum += v;
        if (v > best) {
          best = v;
          arg = static_cast<int32_t>(c);
        }
      }
      worst_sum_err = std::max(worst_sum_err, std::abs(sum - 1.0));
      em[px] = arg;
    }
    LabelMask fm(Shape4(1, 1, s.image.shape().h, s.image.shape().w));
    for (int64_t px = 0; px < plane; ++px) {
      float best = fcn_probs[px];
      int32_t arg = 0;
      for (int64_t c = 0; c < classes; ++c)
        if (fcn_probs[c * plane + px] > best) {
          best = fcn_probs[c * plane + px];
          arg = static_cast<int32_t>(c);
        }
      fm[px] = arg;
    }
    accumulate(cd, s.mask, deconv_res.label_mask);
    accumulate(cf, s.mask, fm);
    accumulate(ce, s.mask, em);
  }
  const double miou_d = mean_iou(cd), miou_f = mean_iou(cf), miou_e = mean_iou(ce);
  const double margin = cfg.at("miou_margin").get<double>();
  const bool pass = idem && worst_sum_err < 1e-5 && min_prob >= 0.0f &&
                    miou_e >= std::min(miou_d, miou_f) - margin;
  char buf[300];
  std::snprintf(buf, sizeof(buf),
                "ensemble: distributions valid (max sum err %.2g, min prob %.2g), "
                "idempotence %s; mean IoU deconv %.3f / fcn %.3f / ensemble %.3f "
                "(needs >= min - %.2f)",
                worst_sum_err, static_cast<double>(min_prob), idem ? "exact" : "BROKEN",
                miou_d, miou_f, miou_e, margin);
  report(10, pass, buf);
}

}  // namespace

int main(int argc, char** argv) {
  std::string config_path = ACCEPTANCE_CONFIG_PATH;
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--config") == 0 && i + 1 < argc) config_path = argv[++i];
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      std::string list = argv[++i];
      size_t pos = 0;
      while (pos < list.size()) {
        only.insert(std::atoi(list.c_str() + pos));
        pos = list.find(',', pos);
        if (pos == std::string::npos) break;
        ++pos;
      }
    }
  }
  auto want = [&](int id) { return only.empty() || only.count(id) > 0; };

  std::ifstream f(config_path);
  if (!f) {
    std::fprintf(stderr, "cannot open acceptance config %s\n", config_path.c_str());
    return 99;
  }
  json cfg;
  f >> cfg;

  const auto t0 = Clock::now();
  if (want(1)) criterion1(cfg.at("table_conformance"));
  if (want(2)) criterion2(cfg.at("adjoint"));
  if (want(3)) criterion3(cfg.at("gradients"));
  if (want(4)) criterion4(cfg.at("unpooling"));
  if (want(5)) criterion5(cfg.at("aggregation"));
  if (want(6)) criterion6(cfg);

  if (want(7) || want(9) || want(10)) {
    std::printf("-- desk-scale curriculum training (criteria 7/9/10 share it)\n");
    std::fflush(stdout);
    DeskState desk = run_desk(cfg.at("desk"));
    if (want(7)) criterion7(desk);
    if (want(9)) criterion9(desk, cfg.at("progression"));
    if (want(10)) criterion10(desk, cfg.at("ensemble"));
  }
  if (want(8)) criterion8(cfg.at("curriculum"));

  int hard_failures = 0;
  for (const auto& v : g_verdicts)
    if (!v.pass && v.gating) ++hard_failures;
  std::printf("acceptance: %zu criteria run, %d hard failure(s), %.0fs total\n",
              g_verdicts.size(), hard_failures, secs_since(t0));
  return hard_failures;
}
