// Command-line front end: cube-face projection, panorama prediction,
// viewport assembly, training, evaluation and self-checks.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "acceptance/acceptance_suite.hpp"
#include "json.hpp"
#include "mrgan/checkpoint.hpp"
#include "mrgan/gradcheck.hpp"
#include "mrgan/image_io.hpp"
#include "mrgan/metrics.hpp"
#include "mrgan/model.hpp"
#include "mrgan/sphere.hpp"
#include "mrgan/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mrgan;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  bool verbose = false;
  std::vector<std::string> overrides;
};

Globals globals;

void info(const std::string& s) {
  if (globals.verbose) std::cerr << s << "\n";
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// The config file (or defaults), then --set overrides, then --seed. Any
/// problem is a usage error and is reported before work starts.
TrainConfig load_config() {
  json j = json::object();
  if (!globals.config_path.empty()) {
    std::ifstream in(globals.config_path);
    if (!in) throw UsageError("cannot open config " + globals.config_path);
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw UsageError("config " + globals.config_path + " is not valid JSON: " + e.what());
    }
  }
  for (const auto& kv : globals.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
    json parsed = json::parse(value, nullptr, false);
    j[key] = parsed.is_discarded() ? json(value) : parsed;
  }
  if (globals.seed) j["seed"] = *globals.seed;
  try {
    return train_config_from_json(j);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

/// Gray or gray-alpha inputs are replicated to RGB; alpha is dropped.
Image to_rgb(const Image& img) {
  if (img.channels == 3) return img;
  Image out(img.width, img.height, 3);
  const std::size_t src = img.channels >= 3 ? 3 : 1;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(src == 3 ? c : 0, y, x);
  return out;
}

Image read_erp(const std::string& path) {
  Image img = read_png(path);
  if (img.width != 2 * img.height)
    throw UsageError(path + " is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                     "; an equirectangular panorama must be 2:1 (width = 2 x height)");
  return img;
}

json view_json(const ViewSpec& v) {
  return {{"yaw", v.yaw}, {"pitch", v.pitch}, {"roll", v.roll},
          {"fov", v.fov}, {"width", v.out_width}, {"height", v.out_height}};
}

ViewSpec view_from_json(const json& j) {
  ViewSpec v;
  v.yaw = j.at("yaw").get<double>();
  v.pitch = j.at("pitch").get<double>();
  v.roll = j.value("roll", 0.0);
  v.fov = j.value("fov", 90.0);
  v.out_width = j.at("width").get<std::size_t>();
  v.out_height = j.at("height").get<std::size_t>();
  return v;
}

// ---------------------------------------------------------------------------
// project

struct ProjectArgs {
  std::string input, outdir;
  std::vector<double> rotation{0.0, 0.0};
  std::size_t size = 256;
};

int cmd_project(const ProjectArgs& a) {
  const Image erp = read_erp(a.input);
  const double yaw = a.rotation[0], pitch = a.rotation[1];
  const auto views = cube_face_views(yaw, pitch, a.size, a.size);
  fs::create_directories(a.outdir);
  const std::string suffix = "_y" + num(yaw) + "_p" + num(pitch);
  json faces = json::array();
  for (std::size_t k = 0; k < views.size(); ++k) {
    const std::string file = std::string(face_name(kCubeFaces[k])) + suffix + ".png";
    write_png(fs::path(a.outdir) / file, extract_view(erp, views[k]).image);
    json f = view_json(views[k]);
    f["face"] = face_name(kCubeFaces[k]);
    f["file"] = file;
    faces.push_back(f);
    info("wrote " + file);
  }
  const json manifest{{"source", fs::path(a.input).filename().string()},
                      {"width", erp.width},
                      {"height", erp.height},
                      {"rotation", {yaw, pitch}},
                      {"faces", faces}};
  const fs::path mpath = fs::path(a.outdir) / ("manifest" + suffix + ".json");
  write_text_atomic(mpath, manifest.dump(2) + "\n");
  std::cout << mpath.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// predict

struct PredictArgs {
  std::string input, checkpoint, out, preview;
  std::optional<std::size_t> stages;
  std::optional<double> stride;
};

/// The generator in `arrays` must have the configured width, and a stored
/// discriminator must match the configured face resolution.
void check_checkpoint(const std::vector<NamedArray>& arrays, const TrainConfig& cfg) {
  const GeneratorConfig g = generator_config_from(arrays);
  require(g.channels == cfg.channels && g.se_ratio == cfg.se_ratio, ErrorCode::shape_mismatch,
          "checkpoint has " + std::to_string(g.channels) + " channels (SE ratio " + std::to_string(g.se_ratio) +
              "), config expects " + std::to_string(cfg.channels) + " (SE ratio " + std::to_string(cfg.se_ratio) + ")");
  if (!has_discriminator(arrays)) return;
  const auto it = std::find_if(arrays.begin(), arrays.end(), [](const NamedArray& a) { return a.name == "disc.fc1.weight"; });
  require(it != arrays.end() && it->shape.size() == 2, ErrorCode::format, "checkpoint discriminator lacks fc1");
  const std::size_t expected = cfg.discriminator().fc1_inputs();
  require(it->shape[1] == expected, ErrorCode::shape_mismatch,
          "checkpoint discriminator was trained for fc1 width " + std::to_string(it->shape[1]) + ", config " +
              std::to_string(cfg.width) + "x" + std::to_string(cfg.height) + " needs " + std::to_string(expected));
}

template <class T>
SaliencyMap predict_with(const Image& erp, const std::vector<NamedArray>& arrays, const TrainConfig& cfg,
                         std::size_t stages, double stride) {
  auto g = GeneratorParams<T>::zeros(cfg.generator());
  load_named_arrays(g, arrays);
  return predict_erp(erp, g, stages, PredictOptions{cfg.width, cfg.height, stride, 90.0});
}

int cmd_predict(const PredictArgs& a) {
  const TrainConfig cfg = load_config();
  const std::size_t stages = a.stages.value_or(cfg.stages);
  const double stride = a.stride.value_or(cfg.viewport_stride);
  if (stages < 1) throw UsageError("--stages must be >= 1");
  if (!(stride > 0.0 && stride <= 180.0)) throw UsageError("--viewport-stride must lie in (0,180]");
  const std::string preview = a.preview.empty() ? fs::path(a.out).replace_extension(".png").string() : a.preview;
  for (const auto& target : {fs::path(a.out), fs::path(preview)})
    if (fs::weakly_canonical(target) == fs::weakly_canonical(a.input))
      throw UsageError("output " + target.string() + " would overwrite the input panorama; choose another --out or --preview");
  const Image erp = to_rgb(read_erp(a.input));
  const auto arrays = load_checkpoint(a.checkpoint);
  check_checkpoint(arrays, cfg);
  info("predicting " + std::to_string(dense_viewports(stride, cfg.width, cfg.height).size()) + " viewports, " +
       std::to_string(stages) + " stages");
  const SaliencyMap map = cfg.precision == "float" ? predict_with<float>(erp, arrays, cfg, stages, stride)
                                                   : predict_with<double>(erp, arrays, cfg, stages, stride);
  write_smap(a.out, map);
  write_saliency_preview(preview, map);
  std::cout << a.out << "\n" << preview << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// assemble

struct AssembleArgs {
  std::string manifest, out, preview;
  std::optional<std::size_t> width;
};

int cmd_assemble(const AssembleArgs& a) {
  json m;
  {
    std::ifstream in(a.manifest);
    if (!in) throw UsageError("cannot open manifest " + a.manifest);
    try {
      m = json::parse(in);
    } catch (const json::exception& e) {
      throw UsageError("manifest " + a.manifest + " is not valid JSON: " + e.what());
    }
  }
  std::size_t width = 0;
  if (a.width) width = *a.width;
  else if (m.contains("width")) width = m["width"].get<std::size_t>();
  if (width == 0 || width % 2 != 0) throw UsageError("output width must be a positive even number (use --width)");
  if (!m.contains("faces") || !m["faces"].is_array() || m["faces"].empty())
    throw UsageError("manifest lists no faces");
  const fs::path dir = fs::path(a.manifest).parent_path();
  std::vector<FaceImage> faces;
  for (const auto& f : m["faces"]) {
    ViewSpec view;
    try {
      view = view_from_json(f);
    } catch (const json::exception& e) {
      throw UsageError(std::string("manifest face entry is malformed: ") + e.what());
    }
    const fs::path file = dir / f.at("file").get<std::string>();
    faces.push_back({view, to_image(read_saliency(file))});
    info("read " + file.string());
  }
  const SaliencyMap map = dense_assemble(faces, width, width / 2);
  write_smap(a.out, map);
  const std::string preview = a.preview.empty() ? fs::path(a.out).replace_extension(".png").string() : a.preview;
  write_saliency_preview(preview, map);
  std::cout << a.out << "\n" << preview << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data, out;
  std::size_t synthetic = 0;
};

/// Panoramas <stem>.png with fixations <stem>.csv in equirectangular pixels.
std::vector<Panorama> load_panoramas(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError("--data " + dir.string() + " is not a directory");
  std::vector<fs::path> images;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".png") images.push_back(e.path());
  std::sort(images.begin(), images.end());
  std::vector<Panorama> out;
  for (const auto& p : images) {
    fs::path csv = p;
    csv.replace_extension(".csv");
    if (!fs::exists(csv)) {
      std::cerr << "skipping " << p.filename().string() << ": no " << csv.filename().string() << "\n";
      continue;
    }
    Image erp = to_rgb(read_erp(p.string()));
    FixationMap fix = load_fixation_csv(csv, erp.width, erp.height);
    out.push_back({p.stem().string(), std::move(erp), std::move(fix)});
  }
  if (out.empty()) throw UsageError("no panorama with fixations found in " + dir.string());
  return out;
}

template <class T>
int train_with(const TrainConfig& cfg, const std::vector<Sample>& samples, const fs::path& out) {
  const Split split = split_by_source(samples);
  const auto& train_set = split.train.empty() ? samples : split.train;
  std::cout << "training on " << train_set.size() << " samples, " << split.validation.size() << " held out\n";
  write_text_atomic(out / "config.json", to_json(cfg).dump(2) + "\n");

  auto g = GeneratorParams<T>::init(cfg.generator(), cfg.seed);
  std::optional<DiscriminatorParams<T>> d;
  std::string last_good;
  auto save = [&](const fs::path& path) {
    auto arrays = to_named_arrays(g);
    if (d)
      for (auto& a : to_named_arrays(*d)) arrays.push_back(std::move(a));
    save_checkpoint(path, arrays);
    last_good = path.string();
    info("checkpoint " + last_good);
  };
  auto hooks = [&](const std::string& phase) {
    TrainHooks h;
    h.on_step = [phase](const LogRow& r) {
      info(phase + " epoch " + std::to_string(r.epoch) + " step " + std::to_string(r.step) + " content " +
           num(r.content) + (r.loss_d ? " loss_D " + num(*r.loss_d) : "") +
           (r.loss_g ? " loss_G " + num(*r.loss_g) : ""));
    };
    h.on_checkpoint = [&, phase](std::size_t epoch) {
      save(out / ("checkpoint_" + phase + "_e" + std::to_string(epoch + 1) + ".mrgw"));
    };
    return h;
  };

  try {
    const auto log = pretrain(train_set, g, cfg, hooks("pretrain"));
    write_text_atomic(out / "pretrain_log.csv", log_csv(log));
    if (cfg.finetune_epochs > 0) {
      d = DiscriminatorParams<T>::init(cfg.discriminator(), cfg.seed + 1);
      AdversarialTrainer<T> trainer(g, *d, cfg);
      const auto ft = trainer.run(train_set, hooks("finetune"));
      write_text_atomic(out / "finetune_log.csv", log_csv(ft));
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::non_finite) throw;
    std::cerr << "error: training diverged: " << e.what() << "\n"
              << "last good checkpoint: " << (last_good.empty() ? "none" : last_good) << "\n";
    return 2;
  }

  const fs::path final_path = out / "checkpoint.mrgw";
  save(final_path);
  std::cout << final_path.string() << " fnv1a " << hex64(fnv1a([&] {
    const auto bytes = read_file(final_path);
    return std::string(bytes.begin(), bytes.end());
  }())) << "\n";

  if (!split.validation.empty()) {
    const auto losses = stage_content_losses(split.validation, g, cfg.stages);
    json report = json::array();
    for (std::size_t k = 0; k < losses.size(); ++k) {
      report.push_back({{"stage", k + 1}, {"content", losses[k]}});
      std::cout << "held-out content loss stage " << k + 1 << ": " << num(losses[k]) << "\n";
    }
    write_text_atomic(out / "validation.json", json{{"stages", report}}.dump(2) + "\n");
  }
  return 0;
}

int cmd_train(const TrainArgs& a) {
  const TrainConfig cfg = load_config();
  if (a.data.empty() == (a.synthetic == 0)) throw UsageError("train needs exactly one of --data DIR or --synthetic N");
  std::vector<Sample> samples;
  if (a.synthetic > 0) {
    samples = synthetic_samples(a.synthetic, cfg.width, cfg.height, cfg.seed, cfg.sigma);
  } else {
    const auto panos = load_panoramas(a.data);
    samples = build_dataset(panos, cfg.rotations, cfg.width, cfg.height, cfg.sigma);
    info(std::to_string(panos.size()) + " panoramas -> " + std::to_string(samples.size()) + " face samples");
  }
  fs::create_directories(a.out);
  return cfg.precision == "float" ? train_with<float>(cfg, samples, a.out) : train_with<double>(cfg, samples, a.out);
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string pred, gt, fix, out;
};

std::optional<fs::path> find_map(const fs::path& dir, const std::string& stem) {
  for (const char* ext : {".smap", ".png"})
    if (fs::exists(dir / (stem + ext))) return dir / (stem + ext);
  return std::nullopt;
}

int cmd_eval(const EvalArgs& a) {
  for (const auto& d : {a.pred, a.gt, a.fix})
    if (!fs::is_directory(d)) throw UsageError(d + " is not a directory");
  std::vector<fs::path> preds;
  for (const auto& e : fs::directory_iterator(a.pred))
    if (e.path().extension() == ".smap" || e.path().extension() == ".png") preds.push_back(e.path());
  std::sort(preds.begin(), preds.end());
  if (preds.empty()) throw UsageError("no .smap or .png predictions in " + a.pred);

  std::vector<MetricRow> good;
  std::string body;
  std::size_t failures = 0;
  auto error_row = [&](const std::string& id, const std::string& why) {
    std::cerr << "error: " << id << ": " << why << "\n";
    body += id + ",nan,nan,nan,nan\n";
    ++failures;
  };
  for (const auto& p : preds) {
    const std::string id = p.stem().string();
    const auto gt = find_map(a.gt, id);
    const fs::path fix = fs::path(a.fix) / (id + ".csv");
    if (!gt) {
      error_row(id, "no ground truth in " + a.gt);
      continue;
    }
    if (!fs::exists(fix)) {
      error_row(id, "no fixation file " + fix.string());
      continue;
    }
    try {
      const SaliencyMap pm = read_saliency(p), gm = read_saliency(*gt);
      const MetricRow r = score(id, pm, gm, load_fixation_csv(fix, gm.width, gm.height));
      good.push_back(r);
      body += metric_row_csv(r);
    } catch (const Error& e) {
      error_row(id, e.what());
    }
  }
  // Error rows are listed but left out of the mean.
  const std::string csv = kMetricsHeader + body + metric_row_csv(mean_row(good));
  if (a.out.empty()) std::cout << csv;
  else write_text_atomic(a.out, csv);
  return failures == 0 ? 0 : 2;
}

// ---------------------------------------------------------------------------
// gradcheck and selftest

struct GradcheckArgs {
  GradCheckOptions opt;
  double tolerance = 1e-4;
};

int cmd_gradcheck(GradcheckArgs a) {
  const TrainConfig cfg = load_config();
  a.opt.seed = cfg.seed;
  const auto results = run_gradcheck_suite(a.opt);
  double worst = 0.0;
  bool ok = !results.empty();
  for (const auto& r : results) {
    char line[256];
    std::snprintf(line, sizeof line, "%-40s max rel-err %.3e  checked %zu  refined %zu  unresolved %zu", r.name.c_str(),
                  r.max_rel_err, r.checked, r.refined, r.unresolved);
    std::cout << line << "\n";
    worst = std::max(worst, r.max_rel_err);
    ok = ok && r.max_rel_err <= a.tolerance && r.unresolved == 0;
  }
  std::cout << (ok ? "PASS" : "FAIL") << " worst rel-err " << num(worst) << " (tolerance " << num(a.tolerance)
            << ")\n";
  return ok ? 0 : 2;
}

int cmd_selftest(const std::vector<int>& ids_in) {
  std::vector<int> ids = ids_in;
  if (ids.empty())
    for (int id = 1; id <= acceptance::Suite::kCount; ++id) ids.push_back(id);
  acceptance::Suite suite([](const std::string& s) { info(s); });
  bool ok = true;
  for (int id : ids) {
    const auto o = suite.run(id);
    ok = ok && o.pass;
    std::cout << acceptance::Suite::line(o) << std::endl;
  }
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"360-degree saliency prediction with a multi-stage recurrent generator"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--config", globals.config_path, "training/model config (JSON)");
  app.add_option("--seed", globals.seed, "random seed (overrides the config)");
  app.add_option("--threads", globals.threads, "worker threads (computation is single-threaded)")
      ->check(CLI::PositiveNumber);
  app.add_flag("--verbose,-v", globals.verbose, "progress on stderr");
  app.add_option("--set", globals.overrides, "config override key=value (repeatable)");

  ProjectArgs pa;
  auto* project = app.add_subcommand("project", "render the six cube faces of a panorama");
  project->add_option("input", pa.input, "equirectangular PNG")->required()->check(CLI::ExistingFile);
  project->add_option("outdir", pa.outdir, "output directory")->required();
  project->add_option("--rotation", pa.rotation, "cube rotation yaw,pitch in degrees")
      ->delimiter(',')
      ->expected(2);
  project->add_option("--size", pa.size, "face side in pixels")->check(CLI::PositiveNumber);

  PredictArgs pr;
  auto* predict = app.add_subcommand("predict", "predict panorama saliency from a checkpoint");
  predict->add_option("input", pr.input, "equirectangular PNG")->required()->check(CLI::ExistingFile);
  predict->add_option("--checkpoint", pr.checkpoint, "MRGW checkpoint")->required()->check(CLI::ExistingFile);
  predict->add_option("--out", pr.out, "output SMAP")->required();
  predict->add_option("--preview", pr.preview, "preview PNG (default: --out with .png)");
  predict->add_option("--stages", pr.stages, "generator stages (default: config)");
  predict->add_option("--viewport-stride", pr.stride, "dense viewport spacing in degrees (default: config)");

  AssembleArgs as;
  auto* assemble = app.add_subcommand("assemble", "back-project viewport maps listed in a manifest");
  assemble->add_option("manifest", as.manifest, "manifest JSON (as written by project)")
      ->required()
      ->check(CLI::ExistingFile);
  assemble->add_option("--out", as.out, "output SMAP")->required();
  assemble->add_option("--preview", as.preview, "preview PNG (default: --out with .png)");
  assemble->add_option("--width", as.width, "output width (default: manifest)");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "pretrain, then optionally fine-tune adversarially");
  train->add_option("--data", ta.data, "directory of <id>.png panoramas with <id>.csv fixations");
  train->add_option("--synthetic", ta.synthetic, "use N bundled synthetic samples instead of --data");
  train->add_option("--out", ta.out, "output directory")->required();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "score predicted maps against ground truth");
  eval->add_option("pred", ea.pred, "directory of predicted maps (.smap/.png)")->required();
  eval->add_option("gt", ea.gt, "directory of ground-truth maps")->required();
  eval->add_option("fix", ea.fix, "directory of fixation CSVs")->required();
  eval->add_option("--out", ea.out, "metrics CSV (default: stdout)");

  GradcheckArgs ga;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check of every layer");
  gradcheck->add_option("--size", ga.opt.size, "spatial size")->check(CLI::PositiveNumber);
  gradcheck->add_option("--channels", ga.opt.channels, "generator channels")->check(CLI::PositiveNumber);
  gradcheck->add_option("--stages", ga.opt.stages, "stages in the end-to-end check")->check(CLI::PositiveNumber);
  gradcheck->add_option("--entries", ga.opt.model_entries, "sampled entries per tensor in the end-to-end check");
  gradcheck->add_option("--tolerance", ga.tolerance, "maximum relative error");

  std::vector<int> criteria;
  auto* selftest = app.add_subcommand("selftest", "run the synthetic-data acceptance suite");
  selftest->add_option("criteria", criteria, "criterion numbers (default: all)")->check(CLI::Range(1, 8));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*project) return cmd_project(pa);
    if (*predict) return cmd_predict(pr);
    if (*assemble) return cmd_assemble(as);
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*gradcheck) return cmd_gradcheck(ga);
    if (*selftest) return cmd_selftest(criteria);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
