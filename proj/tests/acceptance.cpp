// Acceptance suite: one PASS/FAIL line per criterion, details indented below.
// Exits nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "msbdn/msbdn.hpp"
#include "support.hpp"

using namespace msbdn;
using namespace msbdn::testing;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string summary;
  std::vector<std::string> details;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// ---------------------------------------------------------------------------

Outcome ac1_gradients() {
  const auto t0 = Clock::now();
  Outcome o;
  o.pass = true;
  double worst_prim = 0;
  for (const auto& c : primitive_grad_cases()) {
    const bool ok = c.report.finite && c.report.max_rel_error < 1e-3;
    o.pass = o.pass && ok;
    worst_prim = std::max(worst_prim, c.report.max_rel_error);
    if (!ok) o.details.push_back(fmt("primitive %s rel-err %.3e", c.name.c_str(), c.report.max_rel_error));
  }
  double worst_e2e = 0, worst_dev = 0;
  for (auto v : all_variants())
    for (bool dff : {true, false}) {
      const auto r = end_to_end_grad_check(v, dff);
      const double dev = float32_gradient_deviation(v, dff);
      const bool ok = r.finite && r.max_rel_error < 1e-2 && dev < 1e-3;
      o.pass = o.pass && ok;
      worst_e2e = std::max(worst_e2e, r.max_rel_error);
      worst_dev = std::max(worst_dev, dev);
      o.details.push_back(fmt("%-11s dff=%-3s fd rel-err %.2e  float32-vs-float64 grad %.2e%s", to_string(v),
                              dff ? "on" : "off", r.max_rel_error, dev, ok ? "" : "  FAIL"));
    }
  const double secs = seconds_since(t0);
  o.pass = o.pass && secs < 120;
  o.summary = fmt("primitives max rel-err %.2e (< 1e-3), end-to-end max %.2e (< 1e-2), float32 grad dev %.2e, %.1f s "
                  "(< 120 s)",
                  worst_prim, worst_e2e, worst_dev, secs);
  return o;
}

Outcome ac2_sos_twicing_identity() {
  Outcome o;
  o.pass = true;
  for (auto v : {DecoderVariant::sos, DecoderVariant::twicing}) {
    NetworkConfig cfg;
    cfg.levels = 3;
    cfg.base_channels = 4;
    cfg.resblocks_B = 1;
    cfg.refinement_blocks = 2;
    cfg.decoder_variant = v;
    auto p = make_parameters<float>(cfg);
    Rng rng(21);
    init_model(p, cfg, rng, 1.0);
    for (auto& e : p)
      if (e.name.rfind("dec", 0) == 0 && e.name.find(".rg.") != std::string::npos) e.value.fill(0);
    for (int n = 1; n < cfg.levels; ++n) {
      const std::size_t side = 16u >> (n - 1);
      Tensor<float> i(Shape{1, std::size_t(cfg.channels(n)), side, side});
      Tensor<float> j(Shape{1, std::size_t(cfg.channels(n + 1)), side / 2, side / 2});
      // Dyadic data and weights: every intermediate is exactly representable.
      auto dyadic = [&](Tensor<float>& t, int denom) {
        for (auto& x : t.values()) x = float(int(rng.below(2 * denom)) - denom) / float(2 * denom);
      };
      dyadic(i, 32);
      dyadic(j, 32);
      dyadic(p.at("dec" + std::to_string(n) + ".up.w").value, 8);
      dyadic(p.at("dec" + std::to_string(n) + ".up.b").value, 8);
      auto out = decoder_module(p, cfg, v, FeatureMap<float>{n, Var<float>::constant(i)},
                                FeatureMap<float>{n + 1, Var<float>::constant(j)});
      const bool exact = out.value.value() == i;
      // Generic float data: the identity holds up to one rounding of i + u.
      Tensor<float> ig(i.shape()), jg(j.shape());
      for (auto& x : ig.values()) x = float(rng.uniform(-1, 1));
      for (auto& x : jg.values()) x = float(rng.uniform(-1, 1));
      init_weights(p, rng);
      for (auto& e : p)
        if (e.name.rfind("dec", 0) == 0 && e.name.find(".rg.") != std::string::npos) e.value.fill(0);
      auto outg = decoder_module(p, cfg, v, FeatureMap<float>{n, Var<float>::constant(ig)},
                                 FeatureMap<float>{n + 1, Var<float>::constant(jg)});
      const double dev = max_abs_diff(outg.value.value(), ig);
      o.pass = o.pass && exact;
      o.details.push_back(fmt("%-7s level %d: dyadic inputs %s; generic float inputs max |out - i| %.2e", to_string(v),
                              n, exact ? "bit-exact" : "NOT EXACT", dev));
    }
  }
  o.summary = o.pass ? "zeroed refinement units return the skip feature elementwise, all decoder levels"
                     : "decoder output differs from the skip feature";
  return o;
}

Outcome ac3_proposition() {
  const auto t0 = Clock::now();
  Outcome o;
  Rng rng(2024);
  const int scenes = 10, iterations = 5;
  std::vector<SyntheticScene<double>> sc;
  for (int i = 0; i < scenes; ++i) sc.push_back(random_scene<double>(rng, 32, 32, {}, true));
  int violations = 0, sequences = 0;
  for (double gamma : {0.25, 0.5, 0.75}) {
    std::vector<double> mean(iterations + 1, 0.0);
    int bad = 0;
    for (const auto& s : sc) {
      auto states = sos_boost_images(s.hazy, ideal_dehazer(s.transmission, s.atmospheric_light, gamma), iterations);
      const auto seq = poh_sequence(states, s.clean, s.atmospheric_light);
      bool dec = true;
      for (std::size_t n = 1; n < seq.size(); ++n) dec = dec && seq[n] < seq[n - 1];
      bad += dec ? 0 : 1;
      for (std::size_t n = 0; n < seq.size(); ++n) mean[n] += seq[n] / scenes;
    }
    std::string row;
    for (double m : mean) row += fmt(" %.3f", m);
    o.details.push_back(fmt("gamma %.2f: hazy PoH %.3f, mean PoH over iterates 0..%d:%s; %d/%d scenes violate",
                            gamma, [&] {
                              double h = 0;
                              for (const auto& s : sc) h += poh(s.clean, s.transmission, s.atmospheric_light) / scenes;
                              return h;
                            }(),
                            iterations, row.c_str(), bad, scenes));
    violations += bad;
    sequences += scenes;
  }
  const double secs = seconds_since(t0);
  o.pass = violations == 0;
  o.summary = fmt("%d of %d PoH sequences not strictly decreasing over %d SOS iterations (need 0), %.1f s", violations,
                  sequences, iterations, secs);
  return o;
}

Outcome ac4_parity() {
  Outcome o;
  o.pass = true;
  struct C {
    int levels, base, B, refine;
    bool dff;
  };
  for (const auto& c : {C{2, 2, 1, 1, true}, C{3, 8, 2, 3, false}, C{5, 16, 18, 3, true}}) {
    std::vector<std::uint64_t> counts;
    for (auto v : {DecoderVariant::sos, DecoderVariant::diffusion, DecoderVariant::twicing, DecoderVariant::pyramid}) {
      NetworkConfig n;
      n.levels = c.levels;
      n.base_channels = c.base;
      n.resblocks_B = c.B;
      n.refinement_blocks = c.refine;
      n.dff_enabled = c.dff;
      n.decoder_variant = v;
      counts.push_back(count_parameters(n));
      o.pass = o.pass && count_parameters(n) == make_parameters<float>(n).scalar_count();
    }
    const bool same = std::adjacent_find(counts.begin(), counts.end(), std::not_equal_to<>()) == counts.end();
    o.pass = o.pass && same;
    o.details.push_back(fmt("L%d base %d B%d refine %d dff %s: sos %llu diffusion %llu twicing %llu pyramid %llu%s",
                            c.levels, c.base, c.B, c.refine, c.dff ? "on" : "off", (unsigned long long)counts[0],
                            (unsigned long long)counts[1], (unsigned long long)counts[2],
                            (unsigned long long)counts[3], same ? "" : "  DIFFER"));
  }
  o.summary = o.pass ? "identical counts across the four boosted decoders at 3 configs" : "counts differ";
  return o;
}

Outcome ac5_back_projection() {
  Outcome o;
  Rng rng(55);
  int increases = 0;
  double worst_rise = 0;
  for (int k = 0; k < 20; ++k) {
    auto obs = random_tensor<double>(Shape{1, 3, 8, 8}, rng, 0.0, 1.0);
    const auto r = iterative_back_projection(obs, 10);
    for (std::size_t t = 1; t < r.residual_norms.size(); ++t)
      if (r.residual_norms[t] > r.residual_norms[t - 1]) {
        ++increases;
        worst_rise = std::max(worst_rise, r.residual_norms[t] - r.residual_norms[t - 1]);
      }
  }
  double worst_final = 0;
  for (int k = 0; k < 20; ++k) {
    auto hi = random_tensor<double>(Shape{1, 3, 16, 16}, rng, 0.0, 1.0);
    const auto r = iterative_back_projection(kernels::avg_pool2(hi), 20);
    worst_final = std::max(worst_final, r.residual_norms.back());
  }
  o.pass = increases == 0 && worst_final < 1e-4;
  o.summary = fmt("%d residual increases over 20 random inputs x 10 iterations (need 0); consistent inputs final residual "
                  "max %.2e (< 1e-4)",
                  increases, worst_final);
  if (increases) o.details.push_back(fmt("largest rise %.3e", worst_rise));
  return o;
}

Outcome ac6_overfit() {
  const auto t0 = Clock::now();
  Outcome o;
  Rng drng(1);
  const auto data = make_synthetic_dataset<float>(drng, 4, 64, 64);
  Settings s;
  apply_config_text(s,
                    "levels=3\nbase_channels=8\nresblocks_B=2\ndecoder_variant=sos\ndff_enabled=true\n"
                    "lr0=1e-3\ndecay=1\nbeta2=0.99\nbatch=8\nflips=false\nscale_range=1,1\npatch=64\n"
                    "steps_per_epoch=500\nepochs=1\nseed=7\n");
  Trainer<float> tr(s.net, s.train, data);
  auto train_mse = [&] {
    double m = 0;
    for (const auto& d : data) m += mse(predict(tr.params(), s.net, d.hazy), d.clean) / double(data.size());
    return m;
  };
  const double initial = train_mse();
  const auto log = tr.run();
  const double final_mse = train_mse();
  const auto report = evaluate(tr.params(), s.net, data);
  const double secs = seconds_since(t0);
  const bool mse_ok = final_mse <= initial / 100, psnr_ok = report.psnr_db >= 30, time_ok = secs < 600;
  o.pass = mse_ok && psnr_ok && time_ok;
  o.summary = fmt("train MSE %.3e -> %.3e (ratio %.0fx, need >= 100x: %s); train PSNR %.2f dB (need >= 30: %s); "
                  "%.0f s (< 600 s)",
                  initial, final_mse, initial / final_mse, mse_ok ? "ok" : "no", report.psnr_db, psnr_ok ? "ok" : "no",
                  secs);
  std::string curve;
  for (std::size_t i = 0; i < log.losses.size(); i += 50) curve += fmt(" %zu:%.2e", i, log.losses[i]);
  o.details.push_back("batch loss by step:" + curve);
  return o;
}

Outcome ac7_ablation() {
  const auto t0 = Clock::now();
  Outcome o;
  Rng vr(1001), trr(2002);
  const auto val = make_synthetic_dataset<float>(vr, 32, 64, 64);
  const auto train = make_synthetic_dataset<float>(trr, 128, 64, 64);
  Settings s;
  apply_config_text(s,
                    "levels=3\nbase_channels=8\nresblocks_B=1\nrefinement_blocks=1\npatch=32\nbatch=2\nlr0=1e-3\n"
                    "decay=0.75\ndecay_every=2\nsteps_per_epoch=200\nepochs=10\n");
  std::vector<double> dff, plain, diffusion;
  for (std::uint64_t seed : {1, 2, 3}) {
    s.train.seed = seed;
    const auto sos_rows = run_ablation(train, val, s, {DecoderVariant::sos}, {true, false});
    const auto diff_rows = run_ablation(train, val, s, {DecoderVariant::diffusion}, {false});
    for (const auto* r : {&sos_rows[0], &sos_rows[1], &diff_rows[0]})
      if (!r->error.empty()) o.details.push_back("seed " + std::to_string(seed) + " failed: " + r->error);
    dff.push_back(sos_rows[0].val_psnr);
    plain.push_back(sos_rows[1].val_psnr);
    diffusion.push_back(diff_rows[0].val_psnr);
    o.details.push_back(fmt("seed %llu: MSBDN-DFF %.3f  MSBDN %.3f  diffusion %.3f dB", (unsigned long long)seed,
                            dff.back(), plain.back(), diffusion.back()));
  }
  const double md = median3(dff), mp = median3(plain), mf = median3(diffusion);
  o.pass = o.details.size() == 3 && md >= mf;
  o.summary = fmt("median val PSNR MSBDN-DFF %.3f, MSBDN %.3f, diffusion %.3f dB; gate DFF >= diffusion: %s; full "
                  "ordering DFF >= MSBDN >= diffusion (informational): %s; %.0f s",
                  md, mp, mf, md >= mf ? "yes" : "no", (md >= mp && mp >= mf) ? "yes" : "no", seconds_since(t0));
  return o;
}

Outcome ac8_invariants() {
  Outcome o;
  o.pass = true;
  auto check = [&](bool ok, const std::string& what) {
    o.pass = o.pass && ok;
    o.details.push_back((ok ? "ok    " : "FAIL  ") + what);
  };
  Rng rng(88);

  // Scattering round trip.
  double worst = 0;
  for (int k = 0; k < 10; ++k) {
    auto sc = random_scene<double>(rng, 24, 24);
    worst = std::max(worst, max_abs_diff(recover_clean(sc.hazy, sc.transmission, sc.atmospheric_light), sc.clean));
  }
  check(worst < 1e-6, fmt("scattering round trip max error %.2e (< 1e-6)", worst));

  // Metric identity and symmetry.
  auto a = random_tensor<double>(Shape{2, 3, 24, 24}, rng, 0.0, 1.0);
  auto b = random_tensor<double>(a.shape(), rng, 0.0, 1.0);
  check(psnr(a, a) == kPsnrCap && std::abs(ssim(a, a) - 1) < 1e-12, "PSNR(x,x) = cap, SSIM(x,x) = 1");
  check(psnr(a, b) == psnr(b, a) && std::abs(ssim(a, b) - ssim(b, a)) < 1e-12, "PSNR and SSIM symmetric");

  // Checkpoint round trip.
  NetworkConfig net;
  net.levels = 3;
  net.base_channels = 4;
  net.resblocks_B = 2;
  auto p = make_parameters<float>(net);
  init_model(p, net, rng, 0.1);
  std::stringstream ss;
  write_checkpoint(ss, net, p, 3);
  auto ck = read_checkpoint<float>(ss);
  auto x = random_tensor<float>(Shape{1, 3, 16, 16}, rng, 0.0, 1.0);
  check(predict(ck.params, ck.config, x) == predict(p, net, x), "checkpoint round trip predicts bit-identically");

  // Seed determinism.
  Rng drng(5);
  const auto data = make_synthetic_dataset<float>(drng, 3, 16, 16);
  TrainConfig t;
  t.patch = 8;
  t.batch = 2;
  t.epochs = 1;
  t.steps_per_epoch = 8;
  t.seed = 9;
  net.levels = 2;
  Trainer<float> r1(net, t, data), r2(net, t, data);
  const auto l1 = r1.run().losses, l2 = r2.run().losses;
  check(l1 == l2, "identical seeds give bit-identical loss curves");
  Trainer<float> full(net, t, data), head(net, t, data);
  const auto lf = full.run().losses;
  head.run(5);
  std::stringstream cks;
  write_checkpoint(cks, net, head.params(), head.step());
  Trainer<float> tail(net, t, data);
  tail.resume(read_checkpoint<float>(cks));
  auto lt = tail.run().losses;
  check(std::equal(lt.begin(), lt.end(), lf.begin() + 5) && lt.size() == 3,
        "resumed run bit-matches the uninterrupted run");

  o.summary = o.pass ? "round trip, metric, checkpoint and determinism invariants hold" : "an invariant failed";
  return o;
}

}  // namespace

int main() {
  struct Criterion {
    const char* id;
    Outcome (*run)();
  };
  const Criterion all[] = {{"AC1", ac1_gradients},       {"AC2", ac2_sos_twicing_identity}, {"AC3", ac3_proposition},
                           {"AC4", ac4_parity},          {"AC5", ac5_back_projection},      {"AC6", ac6_overfit},
                           {"AC7", ac7_ablation},        {"AC8", ac8_invariants}};
  int failed = 0;
  for (const auto& c : all) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.summary = std::string("exception: ") + e.what();
    }
    std::printf("%s %s  %s\n", c.id, o.pass ? "PASS" : "FAIL", o.summary.c_str());
    for (const auto& d : o.details) std::printf("    %s\n", d.c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  std::printf("%d of %zu criteria passed\n", int(std::size(all)) - failed, std::size(all));
  return failed ? 1 : 0;
}
