// msbdn: synthesis, training, inference, evaluation, ablation and the
// verification harnesses behind one binary.
//
// Exit codes: 0 ok, 1 usage, 2 data, 3 numeric failure / failed check.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "msbdn/haze.hpp"
#include "msbdn/image_io.hpp"
#include "msbdn/training.hpp"

namespace fs = std::filesystem;
using namespace msbdn;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* sub, Common& c, const std::string& out_help) {
  sub->add_option("--config", c.config, "Flat key=value config file");
  sub->add_option("--set", c.sets, "Override one config key (key=value), repeatable")->take_all();
  sub->add_option("--seed", c.seed, "Seed for every random draw (overrides the seed key)");
  sub->add_option("--out", c.out, out_help);
}

Settings resolve(const Common& c, Settings s = {}) {
  if (!c.config.empty()) load_config_file(s, c.config);
  for (const auto& kv : c.sets) apply_assignment(s, kv);
  if (c.seed) s.train.seed = *c.seed;
  return s;
}

std::pair<double, double> parse_range(const std::string& text, const char* what) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw UsageError(std::string(what) + ": expected min,max, got '" + text + "'");
  try {
    return {std::stod(text.substr(0, comma)), std::stod(text.substr(comma + 1))};
  } catch (const std::exception&) {
    throw UsageError(std::string(what) + ": bad range '" + text + "'");
  }
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<fs::path> files_with_extension(const fs::path& dir, const std::string& ext) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

// ---------------------------------------------------------------------------
// synthesize

struct SynthArgs {
  Common c;
  std::string clean_dir, depth_dir;
  std::size_t count = 0;
  std::size_t size = 64;
  std::string a_range = "0.7,1", beta_range = "0.4,1.6", depth_range = "0.1,1";
  std::optional<double> a_fixed, beta_fixed;
};

int cmd_synthesize(const SynthArgs& a) {
  const Settings s = resolve(a.c);
  if (a.c.out.empty()) throw UsageError("synthesize: --out DIR is required");
  SceneRanges r;
  std::tie(r.A_min, r.A_max) = parse_range(a.a_range, "--A-range");
  std::tie(r.beta_min, r.beta_max) = parse_range(a.beta_range, "--beta-range");
  std::tie(r.depth_min, r.depth_max) = parse_range(a.depth_range, "--depth-range");
  if (a.a_fixed) r.A_min = r.A_max = *a.a_fixed;
  if (a.beta_fixed) r.beta_min = r.beta_max = *a.beta_fixed;
  try {
    r.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  Rng rng(s.train.seed);

  Dataset<double> data;
  if (a.clean_dir.empty()) {
    if (a.count == 0) throw UsageError("synthesize: give --clean-dir or --count");
    data = make_synthetic_dataset<double>(rng, a.count, a.size, a.size, r);
  } else {
    int failed = 0;
    for (const auto& path : files_with_extension(a.clean_dir, ".ppm")) {
      const std::string stem = path.stem().string();
      try {
        auto clean = read_ppm<double>(path.string());
        Tensor<double> depth;
        if (!a.depth_dir.empty()) {
          depth = rescale_depth(read_pgm<double>((fs::path(a.depth_dir) / (stem + ".pgm")).string()), r.depth_min,
                                r.depth_max);
          if (depth.h() != clean.h() || depth.w() != clean.w()) throw DataError("depth map size differs from image");
        } else {
          depth = random_depth_map<double>(rng, clean.h(), clean.w(), r.depth_min, r.depth_max);
        }
        SceneParams p;
        p.atmospheric_light = rng.uniform(r.A_min, r.A_max);
        p.beta = rng.uniform(r.beta_min, r.beta_max);
        auto pair = synthesize_hazy<double>(clean, p, depth);
        data.push_back({stem, pair.hazy, pair.clean, pair.transmission, p.atmospheric_light, *p.beta});
      } catch (const std::exception& e) {
        ++failed;
        std::cerr << "synthesize: skipping " << path.string() << ": " << e.what() << "\n";
      }
    }
    std::cerr << "synthesize: " << data.size() << " written, " << failed << " failed\n";
    if (data.empty()) throw DataError("synthesize: no usable clean images in " + a.clean_dir);
    write_dataset(data, a.c.out);
    return failed ? kData : kOk;
  }
  write_dataset(data, a.c.out);
  std::cerr << "synthesize: " << data.size() << " pairs in " << a.c.out << "/manifest.csv\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train / dehaze / eval

struct TrainArgs {
  Common c;
  std::string data, val, resume;
};

int cmd_train(const TrainArgs& a) {
  const Settings s = resolve(a.c);
  const auto train = load_manifest<float>(a.data);
  std::optional<Dataset<float>> val;
  if (!a.val.empty()) val = load_manifest<float>(a.val);
  Trainer<float> tr(s.net, s.train, train, val ? &*val : nullptr);
  if (!a.resume.empty()) tr.resume(load_checkpoint<float>(a.resume));
  const std::string out = a.c.out.empty() ? "run" : a.c.out;
  tr.set_output_dir(out);
  tr.set_progress([](const std::string& line) { std::cerr << line << "\n"; });
  write_text(fs::path(out) / "config.txt", format_settings(s));
  std::cerr << "train: " << count_parameters(s.net) << " parameters, " << tr.total_steps() << " steps ("
            << tr.steps_per_epoch() << " per epoch), starting at step " << tr.step() << "\n";
  const auto log = tr.run();
  if (!log.losses.empty()) std::printf("final_loss %.9g\n", log.losses.back());
  std::printf("checkpoint %s\n", (fs::path(out) / "checkpoint.msbc").string().c_str());
  return kOk;
}

struct DehazeArgs {
  Common c;
  std::string checkpoint, input;
};

int cmd_dehaze(const DehazeArgs& a) {
  resolve(a.c);
  if (a.c.out.empty()) throw UsageError("dehaze: --out DIR is required");
  auto ck = load_checkpoint<float>(a.checkpoint);
  std::vector<fs::path> inputs;
  if (fs::is_directory(a.input))
    inputs = files_with_extension(a.input, ".ppm");
  else
    inputs.push_back(a.input);
  fs::create_directories(a.c.out);
  for (const auto& in : inputs) {
    const auto out = fs::path(a.c.out) / (in.stem().string() + "_dehazed.ppm");
    write_ppm(out.string(), clamped(dehaze(ck.params, ck.config, read_ppm<float>(in.string()))));
    std::cout << out.string() << "\n";
  }
  return kOk;
}

struct EvalArgs {
  Common c;
  std::string checkpoint, data;
};

int cmd_eval(const EvalArgs& a) {
  resolve(a.c);
  auto ck = load_checkpoint<float>(a.checkpoint);
  const auto data = load_manifest<float>(a.data);
  const auto m = evaluate(ck.params, ck.config, data);
  std::string csv = "image,psnr,ssim\n";
  char buf[256];
  for (const auto& im : m.images) {
    std::snprintf(buf, sizeof buf, "%s,%.4f,%.5f\n", im.name.c_str(), im.psnr_db, im.ssim);
    csv += buf;
  }
  std::snprintf(buf, sizeof buf, "mean,%.4f,%.5f\n", m.psnr_db, m.ssim);
  csv += buf;
  std::cout << csv;
  if (!a.c.out.empty()) write_text(fs::path(a.c.out) / "eval.csv", csv);
  return kOk;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
  Common c;
  std::string data, val;
  std::string variants = "sos,diffusion,twicing,pyramid,unet_concat";
  std::string dff = "both";
};

int cmd_ablate(const AblateArgs& a) {
  const Settings s = resolve(a.c);
  std::vector<DecoderVariant> variants;
  for (const auto& v : split_list(a.variants)) {
    try {
      variants.push_back(parse_decoder_variant(v));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  std::vector<bool> modes;
  if (a.dff == "both")
    modes = {true, false};
  else if (a.dff == "on")
    modes = {true};
  else if (a.dff == "off")
    modes = {false};
  else
    throw UsageError("--dff must be on, off or both");
  const auto train = load_manifest<float>(a.data);
  const auto val = a.val.empty() ? train : load_manifest<float>(a.val);
  if (a.val.empty()) std::cerr << "ablate: no --val given, scoring on the training set\n";
  const auto rows = run_ablation(train, val, s, variants, modes, [](const std::string& l) { std::cerr << l << "\n"; });
  const auto csv = format_ablation_csv(rows);
  std::cout << csv;
  if (!a.c.out.empty()) write_text(fs::path(a.c.out) / "ablation.csv", csv);
  const bool any_failed = std::any_of(rows.begin(), rows.end(), [](const auto& r) { return !r.error.empty(); });
  return any_failed ? kNumeric : kOk;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradArgs {
  Common c;
  std::string variants = "sos,diffusion,twicing,pyramid,unet_concat";
  double eps = 1e-6;
  double tolerance = 1e-2;
  std::size_t size = 8;
};

int cmd_gradcheck(const GradArgs& a) {
  Settings base;
  base.net.levels = 2;
  base.net.base_channels = 2;
  base.net.resblocks_B = 1;
  base.net.refinement_blocks = 1;
  const Settings s = resolve(a.c, base);
  bool ok = true;
  std::printf("variant,dff,params,max_rel_error,worst\n");
  for (const auto& name : split_list(a.variants)) {
    for (bool dff : {true, false}) {
      NetworkConfig net = s.net;
      net.decoder_variant = parse_decoder_variant(name);
      net.dff_enabled = dff;
      net.validate();
      if (a.size % net.size_multiple() != 0) throw UsageError("--size must be a multiple of " + std::to_string(net.size_multiple()));
      auto p = make_parameters<double>(net);
      Rng rng(s.train.seed);
      init_model(p, net, rng, 1.0);
      for (auto& e : p)
        if (e.kind == ParamKind::bias)
          for (auto& b : e.value.values()) b = rng.uniform(-0.1, 0.1);
      Tensor<double> x(Shape{1, 3, a.size, a.size}), y(x.shape());
      for (auto& v : x.values()) v = rng.uniform();
      for (auto& v : y.values()) v = rng.uniform();
      auto r = grad_check<double>(
          p,
          [&] { return ops::mse_loss(model_forward(p, net, Var<double>::constant(x)), Var<double>::constant(y)); },
          a.eps);
      const bool pass = r.finite && r.max_rel_error < a.tolerance;
      ok = ok && pass;
      std::printf("%s,%s,%llu,%.3e,%s%s\n", name.c_str(), dff ? "on" : "off",
                  static_cast<unsigned long long>(p.scalar_count()), r.max_rel_error,
                  r.finite ? (r.worst_param + "[" + std::to_string(r.worst_index) + "]").c_str()
                           : ("non-finite at " + r.nonfinite_at).c_str(),
                  pass ? "" : " FAIL");
    }
  }
  return ok ? kOk : kNumeric;
}

// ---------------------------------------------------------------------------
// boostcheck

struct BoostArgs {
  Common c;
  std::string gammas = "0.25,0.5,0.75";
  int iterations = 5;
  int scenes = 10;
  std::size_t size = 32;
  std::string dehazer = "ideal";
};

int cmd_boostcheck(const BoostArgs& a) {
  const Settings s = resolve(a.c);
  if (a.iterations < 1 || a.scenes < 1) throw UsageError("--iterations and --scenes must be >= 1");
  if (a.dehazer != "ideal" && a.dehazer != "identity") throw UsageError("--dehazer must be ideal or identity");
  std::vector<double> gammas;
  for (const auto& g : split_list(a.gammas)) {
    double v = 0;
    try {
      v = std::stod(g);
    } catch (const std::exception&) {
      throw UsageError("bad gamma '" + g + "'");
    }
    if (!(v > 0 && v <= 1)) throw UsageError("gamma must lie in (0, 1], got " + g);
    gammas.push_back(v);
  }
  if (a.dehazer == "identity") {
    std::printf("# note: the identity dehazer leaves PoH unchanged, so it violates the precondition that g itself "
                "lowers PoH; boosting cannot help and every sequence is flagged.\n");
    gammas = {0};
  }

  Rng rng(s.train.seed);
  std::vector<SyntheticScene<double>> scenes;
  for (int i = 0; i < a.scenes; ++i) scenes.push_back(random_scene<double>(rng, a.size, a.size, {}, true));

  std::printf("gamma,iteration,mean_poh,min_poh,max_poh\n");
  int violations = 0, sequences = 0;
  for (double gamma : gammas) {
    std::vector<std::vector<double>> seqs;
    for (const auto& sc : scenes) {
      Dehazer<double> g = a.dehazer == "identity" ? Dehazer<double>([](const Tensor<double>& x) { return x; })
                                                  : ideal_dehazer(sc.transmission, sc.atmospheric_light, gamma);
      auto states = sos_boost_images(sc.hazy, g, a.iterations);
      std::vector<double> seq{poh(sc.clean, sc.transmission, sc.atmospheric_light)};
      const auto rest = poh_sequence(states, sc.clean, sc.atmospheric_light);
      seq.insert(seq.end(), rest.begin(), rest.end());
      seqs.push_back(seq);
    }
    int bad = 0;
    for (const auto& q : seqs) {
      bool dec = true;
      for (std::size_t n = 2; n < q.size(); ++n) dec = dec && q[n] < q[n - 1];
      bad += dec ? 0 : 1;
    }
    for (std::size_t n = 0; n < seqs[0].size(); ++n) {
      double sum = 0, lo = 1e300, hi = -1e300;
      for (const auto& q : seqs) {
        sum += q[n];
        lo = std::min(lo, q[n]);
        hi = std::max(hi, q[n]);
      }
      // Row "hazy" is the input image; row k is boosting iterate k - 1.
      const std::string it = n == 0 ? "hazy" : std::to_string(n - 1);
      std::printf("%g,%s,%.6f,%.6f,%.6f\n", gamma, it.c_str(), sum / double(seqs.size()), lo, hi);
    }
    std::printf("# gamma %g: %d of %zu sequences not strictly decreasing over %d boosting iterations\n", gamma, bad,
                seqs.size(), a.iterations);
    violations += bad;
    sequences += static_cast<int>(seqs.size());
  }
  std::printf("# total: %d violations in %d sequences\n", violations, sequences);
  return violations ? kNumeric : kOk;
}

// ---------------------------------------------------------------------------
// params

struct ParamsArgs {
  Common c;
  bool breakdown = false;
};

int cmd_params(const ParamsArgs& a) {
  const Settings s = resolve(a.c);
  s.net.validate();
  std::printf("%llu\n", static_cast<unsigned long long>(count_parameters(s.net)));
  if (a.breakdown)
    for (const auto& e : make_parameters<float>(s.net))
      std::printf("%s %s %zu\n", e.name.c_str(), to_string(e.value.shape()).c_str(), e.value.size());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MSBDN-DFF dehazing laboratory"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synthesize", "Create hazy/clean pairs and a manifest");
  add_common(s, synth.c, "Output directory");
  s->add_option("--clean-dir", synth.clean_dir, "Directory of clean PPM images");
  s->add_option("--depth-dir", synth.depth_dir, "Directory of PGM depth maps named like the clean images");
  s->add_option("--count", synth.count, "Generate this many procedural scenes instead");
  s->add_option("--size", synth.size, "Side of generated scenes");
  s->add_option("--A-range", synth.a_range, "Atmospheric light range min,max");
  s->add_option("--beta-range", synth.beta_range, "Scattering coefficient range min,max");
  s->add_option("--depth-range", synth.depth_range, "Depth range min,max (PGM grey 0..255 maps onto it)");
  s->add_option("--A", synth.a_fixed, "Fixed atmospheric light");
  s->add_option("--beta", synth.beta_fixed, "Fixed scattering coefficient");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model");
  add_common(t, train.c, "Run directory (logs and checkpoint.msbc)");
  t->add_option("--data", train.data, "Training manifest")->required();
  t->add_option("--val", train.val, "Validation manifest");
  t->add_option("--resume", train.resume, "Checkpoint to continue from");

  DehazeArgs dh;
  auto* d = app.add_subcommand("dehaze", "Dehaze a PPM image or a directory of them");
  add_common(d, dh.c, "Output directory");
  d->add_option("--checkpoint", dh.checkpoint, "Model checkpoint")->required();
  d->add_option("--input", dh.input, "PPM file or directory")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "PSNR/SSIM of a checkpoint on a manifest");
  add_common(e, ev.c, "Directory for eval.csv");
  e->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->required();
  e->add_option("--data", ev.data, "Manifest")->required();

  AblateArgs ab;
  auto* ablate = app.add_subcommand("ablate", "Train and score decoder variants with and without DFF");
  add_common(ablate, ab.c, "Directory for ablation.csv");
  ablate->add_option("--data", ab.data, "Training manifest")->required();
  ablate->add_option("--val", ab.val, "Validation manifest");
  ablate->add_option("--variants", ab.variants, "Comma-separated decoder variants");
  ablate->add_option("--dff", ab.dff, "on, off or both");

  GradArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of the whole model in double precision");
  add_common(g, gc.c, "Unused");
  g->add_option("--variants", gc.variants, "Comma-separated decoder variants");
  g->add_option("--eps", gc.eps, "Central-difference step");
  g->add_option("--tolerance", gc.tolerance, "Maximum relative error");
  g->add_option("--size", gc.size, "Input side");

  BoostArgs bc;
  auto* b = app.add_subcommand("boostcheck", "PoH of image-space SOS boosting with ideal dehazers");
  add_common(b, bc.c, "Unused");
  b->add_option("--gammas", bc.gammas, "Comma-separated dehazer strengths in (0, 1]");
  b->add_option("--iterations", bc.iterations, "Boosting iterations");
  b->add_option("--scenes", bc.scenes, "Random synthetic scenes");
  b->add_option("--size", bc.size, "Scene side");
  b->add_option("--dehazer", bc.dehazer, "ideal or identity");

  ParamsArgs pa;
  auto* p = app.add_subcommand("params", "Print the parameter count of a configuration");
  add_common(p, pa.c, "Unused");
  p->add_flag("--breakdown", pa.breakdown, "List every parameter tensor");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*s) return cmd_synthesize(synth);
    if (*t) return cmd_train(train);
    if (*d) return cmd_dehaze(dh);
    if (*e) return cmd_eval(ev);
    if (*ablate) return cmd_ablate(ab);
    if (*g) return cmd_gradcheck(gc);
    if (*b) return cmd_boostcheck(bc);
    if (*p) return cmd_params(pa);
  } catch (const NumericError& err) {
    std::cerr << "numeric failure: " << err.what() << "\n";
    return kNumeric;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kData;
  } catch (const std::invalid_argument& err) {
    std::cerr << "usage error: " << err.what() << "\n";
    return kUsage;
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << "\n";
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kData;
  }
  return kUsage;
}
