// cruseg: synthetic data, training, evaluation and gradient checks for the
// residual U-Net + CRF mass segmenter.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cruseg/config.hpp"
#include "cruseg/data.hpp"
#include "cruseg/gradcheck_suites.hpp"
#include "cruseg/io.hpp"
#include "cruseg/metrics.hpp"
#include "cruseg/synth.hpp"
#include "cruseg/train.hpp"
#include "cruseg/weights_io.hpp"

using namespace cruseg;

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Defaults < config file < --set < dedicated flags.
RunConfig merged_config(const std::string& file, const std::vector<std::string>& sets) {
  RunConfig rc;
  if (!file.empty()) apply_config_file(rc, file);
  for (const auto& s : sets) {
    const auto [k, v] = parse_assignment(s);
    set_config_value(rc, k, v);
  }
  return rc;
}

void add_config_options(CLI::App* cmd, std::string& file, std::vector<std::string>& sets) {
  cmd->add_option("--config", file, "key=value config file with [section] headers")->check(CLI::ExistingFile);
  cmd->add_option("--set", sets, "override one setting, e.g. --set train.epochs=10 (repeatable)");
}

std::string require_path(const std::string& flag, const std::string& cfg_value, const char* what) {
  const std::string p = !flag.empty() ? flag : cfg_value;
  if (p.empty()) throw std::invalid_argument(std::string("no ") + what + " given");
  return p;
}

// ---- reports --------------------------------------------------------------

std::string dice_csv(const std::vector<std::pair<std::string, double>>& rows) {
  std::ostringstream o;
  o << "id,dice\n";
  for (const auto& [id, d] : rows) o << id << ',' << fmt("%.17g", d) << '\n';
  return o.str();
}

std::string hist_csv(const std::vector<std::size_t>& h) {
  std::ostringstream o;
  o << "bin_lo,bin_hi,count\n";
  const double w = 1.0 / static_cast<double>(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) {
    o << fmt("%.2f", w * static_cast<double>(i)) << ',' << fmt("%.2f", w * static_cast<double>(i + 1)) << ','
      << h[i] << '\n';
  }
  return o.str();
}

std::string cdf_csv(const std::vector<std::pair<double, double>>& cdf) {
  std::ostringstream o;
  o << "dice,fraction\n";
  for (const auto& [v, f] : cdf) o << fmt("%.17g", v) << ',' << fmt("%.17g", f) << '\n';
  return o.str();
}

std::string within_run_line(double mean, double sd, std::size_t n) {
  return "mean DI: " + fmt("%.2f", 100 * mean) + " ± " + fmt("%.2f", 100 * sd) + " (n=" + std::to_string(n) +
         " test samples; ± is the sample std across test samples)";
}

void write_summary_files(const fs::path& dir, const std::vector<std::pair<std::string, double>>& rows,
                         const std::string& summary) {
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(r.second);
  write_text(dir / "hist.csv", hist_csv(dice_histogram(v)));
  write_text(dir / "cdf.csv", cdf_csv(empirical_cdf(v)));
  write_text(dir / "summary.txt", summary + "\n");
}

std::string contour_csv(const SampleResult& s) {
  std::ostringstream o;
  o << "kind,contour,x,y\n";
  auto put = [&](const char* kind, const std::vector<Polygon>& cs) {
    for (std::size_t c = 0; c < cs.size(); ++c)
      for (const auto& p : cs[c]) o << kind << ',' << c << ',' << fmt("%g", p.x) << ',' << fmt("%g", p.y) << '\n';
  };
  put("truth", s.truth_contours);
  put("pred", s.pred_contours);
  return o.str();
}

// ROI in grey with the truth outline in green and the prediction in red.
std::string contour_svg(const SampleResult& s, const GrayImage& roi) {
  constexpr int kScale = 8;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << roi.width * kScale << "\" height=\""
    << roi.height * kScale << "\">\n";
  for (std::size_t y = 0; y < roi.height; ++y)
    for (std::size_t x = 0; x < roi.width; ++x) {
      const int g = static_cast<int>(std::lround(255 * std::clamp(roi(x, y), 0.0, 1.0)));
      o << "<rect x=\"" << x * kScale << "\" y=\"" << y * kScale << "\" width=\"" << kScale << "\" height=\""
        << kScale << "\" fill=\"rgb(" << g << ',' << g << ',' << g << ")\"/>\n";
    }
  auto put = [&](const std::vector<Polygon>& cs, const char* colour) {
    for (const auto& c : cs) {
      o << "<polygon fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
      for (const auto& p : c) o << (p.x + 0.5) * kScale << ',' << (p.y + 0.5) * kScale << ' ';
      o << "\"/>\n";
    }
  };
  put(s.truth_contours, "lime");
  put(s.pred_contours, "red");
  o << "</svg>\n";
  return o.str();
}

std::vector<std::pair<std::string, double>> read_dice_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::string line;
  if (!std::getline(in, line) || line != "id,dice") throw std::runtime_error(p.string() + ": expected header id,dice");
  std::vector<std::pair<std::string, double>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto where = p.string() + ":" + std::to_string(lineno);
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw std::runtime_error(where + ": malformed row");
    rows.emplace_back(line.substr(0, comma), detail::to_double(where, line.substr(comma + 1)));
  }
  if (rows.empty()) throw std::runtime_error(p.string() + ": no rows");
  return rows;
}

// ---- commands -------------------------------------------------------------

struct SynthArgs {
  std::uint64_t seed = 1;
  std::size_t count = 0;
  std::string out;
  double test_fraction = 0.5;
  std::string config;
  std::vector<std::string> sets;
};

int cmd_synth(const SynthArgs& a) {
  RunConfig rc = merged_config(a.config, a.sets);
  rc.synth.validate();
  auto samples = synth_generate(a.seed, a.count, rc.synth);
  const auto n_test = static_cast<std::size_t>(std::lround(a.test_fraction * static_cast<double>(a.count)));
  for (std::size_t i = 0; i < samples.size(); ++i) samples[i].split = i + n_test < a.count ? Split::train : Split::test;
  write_corpus(a.out, samples);
  std::cout << "wrote " << a.count << " samples (" << a.count - n_test << " train, " << n_test << " test) to "
            << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string manifest;
  std::string out_weights;
  std::string log;
  std::optional<std::string> variant;
  std::optional<long> epochs;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig rc = merged_config(a.config, a.sets);
  if (a.variant) rc.train.variant = parse_variant(*a.variant);
  if (a.epochs) rc.train.epochs = *a.epochs;
  if (a.seed) rc.train.seed = *a.seed;
  if (a.lambda) rc.train.lambda = *a.lambda;
  rc.validate();
  const auto manifest = require_path(a.manifest, rc.manifest, "--manifest");
  const auto weights = require_path(a.out_weights, rc.weights, "--out-weights");
  const std::string log_path = !a.log.empty() ? a.log : rc.log;

  std::vector<std::string> warnings;
  const auto streams = materialize(load_manifest(manifest), std::nullopt, rc.network.input_size, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  if (streams.train.empty()) throw std::runtime_error(manifest + ": no training records");
  const auto data = augment_stream(streams.train);

  auto net = build_network<float>(rc.effective_network(), rc.train.seed);
  std::cerr << "training " << to_string(rc.train.variant) << " on " << data.size() << " samples for "
            << rc.train.epochs << " epochs\n";
  const auto log = train(net, data, rc.train, [&](const EpochLog& e) {
    if (!a.quiet) {
      std::cerr << "epoch " << e.epoch << "/" << rc.train.epochs << " f=" << fmt("%.4f", e.f) << " g="
                << fmt("%.4f", e.g) << " loss=" << fmt("%.4f", e.loss) << "\n";
    }
  });

  TrainConfig echo = rc.train;
  echo.lambda = net.config.lambda;
  save_weights(weights, net, echo);
  if (!log_path.empty()) {
    std::ostringstream o;
    o << "epoch,f,g,loss\n";
    for (const auto& e : log)
      o << e.epoch << ',' << fmt("%.17g", e.f) << ',' << fmt("%.17g", e.g) << ',' << fmt("%.17g", e.loss) << '\n';
    write_text(log_path, o.str());
  }
  std::cout << "wrote " << weights << " (" << net.parameter_count() << " parameters)\n";
  return 0;
}

struct EvalArgs {
  std::string weights;
  std::string manifest;
  std::string report_dir;
  std::string split = "test";
  bool svg = false;
};

int cmd_eval(const EvalArgs& a) {
  const auto lw = load_weights(a.weights);
  const auto m = load_manifest(a.manifest);
  std::vector<std::string> warnings;
  auto streams = materialize(m, std::nullopt, lw.net.config.input_size, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  std::vector<RoiSample> test;
  if (a.split == "test" || a.split == "all") test.insert(test.end(), streams.test.begin(), streams.test.end());
  if (a.split == "train" || a.split == "all") test.insert(test.end(), streams.train.begin(), streams.train.end());
  if (test.empty()) throw std::runtime_error(a.manifest + ": no records in split '" + a.split + "'");

  const auto report = evaluate(lw.net, test);
  const std::string line = within_run_line(report.mean, report.stddev, report.samples.size());
  std::cout << line << "\n";
  if (!a.report_dir.empty()) {
    const fs::path dir(a.report_dir);
    fs::create_directories(dir / "contours");
    std::vector<std::pair<std::string, double>> rows;
    for (std::size_t i = 0; i < report.samples.size(); ++i) {
      const auto& s = report.samples[i];
      rows.emplace_back(s.id, s.dice);
      write_text(dir / "contours" / (s.id + ".csv"), contour_csv(s));
      if (a.svg) write_text(dir / "contours" / (s.id + ".svg"), contour_svg(s, test[i].image));
    }
    write_text(dir / "dice.csv", dice_csv(rows));
    write_summary_files(dir, rows, line);
  }
  return 0;
}

struct InferArgs {
  std::string weights;
  std::string image;
  std::vector<long> box;
  std::string out;
  std::string prob;
};

int cmd_infer(const InferArgs& a) {
  const auto lw = load_weights(a.weights);
  const GrayImage img = read_image(a.image);
  BBox box{0, 0, static_cast<long>(img.width), static_cast<long>(img.height)};
  if (!a.box.empty()) {
    if (a.box.size() != 4) throw std::invalid_argument("--box takes x0 y0 w h");
    box = {a.box[0], a.box[1], a.box[2], a.box[3]};
  }
  const auto roi = extract_and_resize(img, Mask(img.width, img.height), box, lw.net.config.input_size);
  const auto p = predict_probability(lw.net, roi.image);
  const auto mask = threshold_mask(p);
  write_mask_pgm(a.out, mask);
  if (!a.prob.empty()) write_raw_f32(a.prob, p);
  std::cout << "wrote " << a.out << " (" << count_foreground(mask) << " foreground pixels of " << mask.size()
            << ")\n";
  return 0;
}

struct ReportArgs {
  std::vector<std::string> dice;
  std::string out;
};

int cmd_report(const ReportArgs& a) {
  std::vector<std::pair<std::string, double>> pooled;
  std::vector<double> run_means;
  std::ostringstream per_run;
  for (const auto& path : a.dice) {
    const auto rows = read_dice_csv(path);
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.second);
    run_means.push_back(mean_of(v));
    per_run << path << ": " << within_run_line(mean_of(v), sample_stddev(v), v.size()) << "\n";
    pooled.insert(pooled.end(), rows.begin(), rows.end());
  }
  std::string summary;
  if (run_means.size() == 1) {
    std::vector<double> v;
    for (const auto& r : pooled) v.push_back(r.second);
    summary = within_run_line(mean_of(v), sample_stddev(v), v.size());
  } else {
    summary = "mean DI: " + fmt("%.2f", 100 * mean_of(run_means)) + " ± " +
              fmt("%.2f", 100 * sample_stddev(run_means)) + " (" + std::to_string(run_means.size()) +
              " runs; ± is the sample std of the per-run means across runs)\n" + per_run.str();
    summary.pop_back();
  }
  std::cout << summary << "\n";
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_text(fs::path(a.out) / "dice.csv", dice_csv(pooled));
    write_summary_files(a.out, pooled, summary);
  }
  return 0;
}

struct GradArgs {
  std::uint64_t seed = 1;
  std::size_t samples = 50;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::vector<std::string> suites;
  std::string corrupt;
};

int cmd_gradcheck(const GradArgs& a) {
  GradSuiteOptions opt;
  opt.seed = a.seed;
  opt.samples = a.samples;
  opt.step = a.step;
  opt.corrupt_op = a.corrupt;
  const auto names = a.suites.empty() ? gradcheck_suite_names() : a.suites;
  bool ok = true;
  for (const auto& name : names) {
    const auto r = run_gradcheck_suite(name, opt);
    const double err = r.result.max_rel_error();
    const bool pass = err < a.tolerance;
    ok = ok && pass;
    char line[160];
    std::snprintf(line, sizeof line, "%-22s coords=%-4zu max_rel_error=%.3e  %s", name.c_str(),
                  r.result.coords.size(), err, pass ? "PASS" : "FAIL");
    std::cout << line << std::endl;
  }
  std::cout << (ok ? "all suites passed" : "gradient check FAILED") << " (tolerance " << fmt("%g", a.tolerance)
            << ")\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cruseg: mass segmentation with a residual U-Net and a mean-field CRF layer"};
  app.footer(
      "Environment:\n  CRUSEG_THREADS  cap on worker threads for evaluation and kernel loops\n"
      "Config precedence: built-in defaults < --config file < --set < dedicated flags.");
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a synthetic ROI corpus and manifest");
  synth->add_option("--seed", sa.seed, "corpus seed")->capture_default_str();
  synth->add_option("--count", sa.count, "number of samples")->required()->check(CLI::PositiveNumber);
  synth->add_option("--out", sa.out, "output directory")->required();
  synth->add_option("--test-fraction", sa.test_fraction, "share of samples (the last ones) in the test split")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  add_config_options(synth, sa.config, sa.sets);

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train a network and write a weights file");
  add_config_options(tr, ta.config, ta.sets);
  tr->add_option("--manifest", ta.manifest, "dataset manifest (TSV)");
  tr->add_option("--out-weights", ta.out_weights, "weights file to write");
  tr->add_option("--log", ta.log, "per-epoch loss log CSV (epoch,f,g,loss)");
  tr->add_option("--variant", ta.variant, "cru, cru_no_r or unet")
      ->check(CLI::IsMember({"cru", "cru_no_r", "unet"}));
  tr->add_option("--epochs", ta.epochs, "number of epochs");
  tr->add_option("--seed", ta.seed, "seed for initialization, shuffling and dropout");
  tr->add_option("--lambda", ta.lambda, "weight of the CRF term in the loss");
  tr->add_flag("--quiet", ta.quiet, "no per-epoch progress");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "score a weights file on a manifest split");
  ev->add_option("--weights", ea.weights, "weights file")->required()->check(CLI::ExistingFile);
  ev->add_option("--manifest", ea.manifest, "dataset manifest (TSV)")->required();
  ev->add_option("--report-dir", ea.report_dir, "directory for dice.csv, hist.csv, cdf.csv, contours/");
  ev->add_option("--split", ea.split, "test, train or all")
      ->check(CLI::IsMember({"test", "train", "all"}))
      ->capture_default_str();
  ev->add_flag("--svg", ea.svg, "also render contour overlays as SVG");

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "segment one ROI and write the mask as PGM");
  inf->add_option("--weights", ia.weights, "weights file")->required()->check(CLI::ExistingFile);
  inf->add_option("--image", ia.image, "PGM, or .raw/.f32 float32 with a .dims sidecar")
      ->required()
      ->check(CLI::ExistingFile);
  inf->add_option("--box", ia.box, "ROI box x0 y0 w h (default: whole image)")->expected(4);
  inf->add_option("--out", ia.out, "mask PGM to write")->required();
  inf->add_option("--prob", ia.prob, "optional float32 foreground probability map");

  ReportArgs ra;
  auto* rep = app.add_subcommand("report", "re-render summaries from one or more dice.csv files");
  rep->add_option("--dice", ra.dice, "dice.csv from eval; several runs are aggregated across runs")
      ->required()
      ->check(CLI::ExistingFile);
  rep->add_option("--out", ra.out, "directory for the re-rendered tables");

  GradArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "compare analytic gradients with central differences");
  gc->add_option("--seed", ga.seed, "seed for inputs and coordinate choice")->capture_default_str();
  gc->add_option("--samples", ga.samples, "coordinates checked per suite")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  gc->add_option("--step", ga.step, "finite-difference step")->capture_default_str();
  gc->add_option("--tolerance", ga.tolerance, "maximum relative error")->capture_default_str();
  gc->add_option("--suite", ga.suites, "run only these suites (repeatable)");
  gc->add_option("--corrupt", ga.corrupt, "test hook: scale the backward rule of this op by 1.05");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(sa);
    if (*tr) return cmd_train(ta);
    if (*ev) return cmd_eval(ea);
    if (*inf) return cmd_infer(ia);
    if (*rep) return cmd_report(ra);
    if (*gc) return cmd_gradcheck(ga);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
