#pragma once

// Command-line front end. Needs CLI11.hpp on the include path.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "instxai/experiments.hpp"
#include "instxai/phantom.hpp"
#include "instxai/report.hpp"
#include "instxai/saliency.hpp"
#include "instxai/segmodel.hpp"
#include "instxai/volume.hpp"

namespace instxai::cli {

namespace fs = std::filesystem;

enum Exit : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kMissingInput = 3,
  kBadInput = 4,
  kBadConfig = 5,
  kNumeric = 6,
  kPlacement = 7,
};

inline const char* kExitCodes =
    "Exit codes:\n"
    "  0  success\n"
    "  1  other runtime failure\n"
    "  2  usage error (unknown flag, missing or invalid argument)\n"
    "  3  missing input file or directory\n"
    "  4  malformed input file (volume, instances, CSV, checkpoint)\n"
    "  5  invalid configuration file or value\n"
    "  6  numerical failure (non-finite values, training divergence)\n"
    "  7  lesion / probe placement failure\n";

class missing_input : public error {
 public:
  using error::error;
};

// Config files hold "section.key = value" lines; sections are phantom, unet,
// train and run.
struct Settings {
  PhantomConfig phantom;
  UNetConfig unet;
  TrainConfig train;
  RunConfig run;
};

inline Settings load_settings(const std::string& path, std::optional<std::uint64_t> seed) {
  KeyValues sec[4];
  static const char* names[] = {"phantom", "unet", "train", "run"};
  if (!path.empty()) {
    if (!fs::exists(path)) throw missing_input("config file not found: " + path);
    const KeyValues kv = KeyValues::load(path);
    for (const auto& [k, v] : kv.items()) {
      const auto dot = k.find('.');
      int idx = -1;
      for (int i = 0; i < 4 && dot != std::string::npos; ++i)
        if (k.compare(0, dot, names[i]) == 0) idx = i;
      if (idx < 0)
        throw config_error("config key '" + k + "' lacks a phantom./unet./train./run. section");
      sec[idx].set(k.substr(dot + 1), v);
    }
  }
  Settings s;
  s.phantom = PhantomConfig::from_kv(sec[0]);
  s.unet = UNetConfig::from_kv(sec[1]);
  s.train = TrainConfig::from_kv(sec[2]);
  s.run = RunConfig::from_kv(sec[3]);
  if (seed) s.phantom.seed = s.train.seed = s.run.seed = *seed;
  return s;
}

inline void require(const fs::path& p) {
  if (!fs::exists(p)) throw missing_input("input not found: " + p.string());
}

inline std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw io_error("cannot write " + p.string());
  return os;
}

// Phantom directories under `dir` (or `dir` itself), sorted by name.
inline std::vector<fs::path> phantom_dirs(const fs::path& dir) {
  require(dir);
  if (fs::exists(dir / "image.mvh")) return {dir};
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && fs::exists(e.path() / "image.mvh")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw missing_input("no phantom directories in " + dir.string());
  return out;
}

inline Graph<float> load_model(const fs::path& dir, UNetConfig* cfg) {
  require(dir / "manifest.txt");
  return load_checkpoint<float>(dir, cfg);
}

inline Tensor<float> load_image(const fs::path& p) {
  require(p);
  return preprocess(read_metavolume(p)).cast<float>();
}

inline std::vector<LesionInstance> load_instances(const fs::path& p) {
  require(p);
  std::ifstream is(p);
  std::vector<LesionInstance> out;
  for (auto& ci : read_instances(is)) out.push_back(std::move(ci.instance));
  return out;
}

inline const LesionInstance& find_instance(const std::vector<LesionInstance>& v, int id) {
  for (const auto& i : v)
    if (i.id == id) return i;
  throw error("no instance with id " + std::to_string(id));
}

template <class F>
int guarded(F&& f, std::ostream& err) {
  try {
    f();
    return kOk;
  } catch (const CLI::ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const missing_input& e) {
    err << "error: " << e.what() << '\n';
    return kMissingInput;
  } catch (const io_error& e) {
    err << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const config_error& e) {
    err << "error: " << e.what() << '\n';
    return kBadConfig;
  } catch (const numeric_error& e) {
    err << "error: " << e.what() << '\n';
    return kNumeric;
  } catch (const placement_error& e) {
    err << "error: " << e.what() << '\n';
    return kPlacement;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"instxai: instance-level saliency maps for volumetric segmentation"};
  app.footer(kExitCodes);
  app.require_subcommand(1);

  std::optional<std::uint64_t> seed;
  std::string config;
  const auto common = [&](CLI::App* a) {
    a->add_option("--seed", seed, "seed for every random stream (overrides config seeds)");
    a->add_option("--config", config, "key = value config file (sections phantom/unet/train/run)");
    a->footer(kExitCodes);
  };
  std::function<void()> action;

  // phantom gen
  auto* ph = app.add_subcommand("phantom", "synthetic phantom volumes");
  ph->require_subcommand(1);
  auto* ph_gen = ph->add_subcommand("gen", "generate phantoms");
  std::string out_dir;
  int count = 1;
  ph_gen->add_option("--out", out_dir, "output directory")->required();
  ph_gen->add_option("--count", count, "number of phantoms")->check(CLI::PositiveNumber);
  common(ph_gen);
  ph_gen->callback([&] {
    action = [&] {
      Settings s = load_settings(config, seed);
      for (int i = 0; i < count; ++i) {
        PhantomConfig pc = s.phantom;
        pc.seed = derive_seed(s.phantom.seed, 0xf4a7, std::uint64_t(i));
        const Phantom p = generate_phantom(pc);
        std::ostringstream name;
        name << "phantom_" << std::setw(3) << std::setfill('0') << i;
        save_phantom(p, fs::path(out_dir) / name.str(), &pc);
        out << name.str() << ": " << p.instances.size() << " lesions, "
            << p.distractors.size() << " distractors\n";
      }
    };
  });

  // train
  auto* tr = app.add_subcommand("train", "train the segmentation network");
  std::string data_dir, model_dir;
  int epochs = -1, base = -1;
  tr->add_option("--data", data_dir, "directory of training phantoms")->required();
  tr->add_option("--out", model_dir, "checkpoint directory")->required();
  tr->add_option("--epochs", epochs, "override train.epochs");
  tr->add_option("--base", base, "override unet.base_channels");
  common(tr);
  tr->callback([&] {
    action = [&] {
      Settings s = load_settings(config, seed);
      if (epochs >= 0) s.train.epochs = epochs;
      if (base > 0) s.unet.base_channels = base;
      std::vector<TrainSample<float>> data;
      for (const auto& d : phantom_dirs(data_dir)) {
        const Phantom p = load_phantom(d);
        TrainSample<float> ts;
        ts.image = preprocess(p.image).cast<float>();
        ts.gt = p.gt;
        for (const auto& di : p.distractors) ts.hard_negatives.push_back(center_of_mass(di));
        data.push_back(std::move(ts));
      }
      Graph<float> g = build_unet<float>(s.unet, s.train.seed);
      const TrainResult r = train(g, data, s.unet, s.train, [&](const EpochLog& e) {
        out << "epoch " << e.epoch << " loss " << num(e.loss) << '\n';
      });
      save_checkpoint(g, s.unet, model_dir);
      auto os = open_out(fs::path(model_dir) / "loss.csv");
      write_loss_csv(os, r.loss_history);
    };
  });

  // infer
  auto* inf = app.add_subcommand("infer", "sliding-window foreground probability");
  std::string image, out_file;
  inf->add_option("--model", model_dir, "checkpoint directory")->required();
  inf->add_option("--image", image, "2-channel raw image volume")->required();
  inf->add_option("--out", out_file, "probability volume")->required();
  common(inf);
  inf->callback([&] {
    action = [&] {
      load_settings(config, seed);
      UNetConfig uc;
      const Graph<float> g = load_model(model_dir, &uc);
      const MetaVolume raw = (require(image), read_metavolume(image));
      const Tensor<float> prob = infer_volume(g, preprocess(raw).cast<float>(), uc.patch_extent);
      MetaVolume mv = MetaVolume::from(prob, raw.spacing, DType::f32);
      mv.meta["kind"] = "probability";
      write_metavolume(mv, out_file);
    };
  });

  // instances extract | categorize
  auto* ins = app.add_subcommand("instances", "lesion instances");
  ins->require_subcommand(1);
  auto* ins_x = ins->add_subcommand("extract", "threshold, label (18-conn.) and filter");
  auto* ins_c = ins->add_subcommand("categorize", "TP / FP / FN against ground truth");
  std::string prob_file, gt_file;
  double threshold = -1, min_volume = -1;
  for (auto* a : {ins_x, ins_c}) {
    a->add_option("--prob", prob_file, "probability volume")->required();
    a->add_option("--out", out_file, "instance list")->required();
    a->add_option("--threshold", threshold, "binarization threshold (default run.threshold)");
    a->add_option("--min-volume", min_volume, "minimum lesion volume in mm^3");
    common(a);
  }
  ins_c->add_option("--gt", gt_file, "ground-truth mask volume")->required();
  const auto extract = [&](const Settings& s, Mask* mask_out) {
    require(prob_file);
    const MetaVolume pv = read_metavolume(prob_file);
    const double t = threshold >= 0 ? threshold : s.run.threshold;
    const double mv = min_volume >= 0 ? min_volume : s.run.min_volume_mm3;
    const Mask m = binarize(pv.data, t);
    if (mask_out) *mask_out = m;
    return filter_min_volume(connected_components(m, 18, pv.voxel_volume()), mv);
  };
  ins_x->callback([&] {
    action = [&] {
      const Settings s = load_settings(config, seed);
      std::vector<CategorizedInstance> items;
      for (auto& i : extract(s, nullptr)) items.push_back({std::move(i), Category::TP, 0, false});
      auto os = open_out(out_file);
      write_instances(os, items);
      out << items.size() << " instances\n";
    };
  });
  ins_c->callback([&] {
    action = [&] {
      const Settings s = load_settings(config, seed);
      Mask pm;
      const auto pred = extract(s, &pm);
      require(gt_file);
      const MetaVolume gv = read_metavolume(gt_file);
      const Mask gm = to_mask(gv);
      DetectionCounts dc;
      const auto items =
          categorize(pred, connected_components(gm, 18, gv.voxel_volume()), pm, gm, &dc);
      auto os = open_out(out_file);
      write_instances(os, items);
      out << "TP " << dc.tp << " FP " << dc.fp << " FN " << dc.fn << " GT " << dc.gt << '\n';
    };
  });

  // saliency smoothgrad | gradcampp
  auto* sal = app.add_subcommand("saliency", "explanation maps");
  sal->require_subcommand(1);
  auto* sg = sal->add_subcommand("smoothgrad", "instance-level SmoothGrad");
  auto* gc = sal->add_subcommand("gradcampp", "Grad-CAM++ (class or instance level)");
  std::string instances_file, aggregation = "max", layer = kLastDecoderActivation, gate = "probability";
  int instance = -1, noise_n = -1, cap = -1;
  double sigma = -1;
  for (auto* a : {sg, gc}) {
    a->add_option("--model", model_dir, "checkpoint directory")->required();
    a->add_option("--image", image, "2-channel raw image volume")->required();
    a->add_option("--out", out_file, "saliency volume")->required();
    a->add_option("--instances", instances_file, "instance list");
    a->add_option("--instance", instance, "instance id within --instances");
    common(a);
  }
  sg->add_option("--aggregation", aggregation, "avg | max")
      ->check(CLI::IsMember({"avg", "max"}))
      ->capture_default_str();
  sg->add_option("--N", noise_n, "noise samples (default run.noise_n)");
  sg->add_option("--sigma", sigma, "noise stdev (default run.noise_sigma)");
  sg->add_option("--cap", cap, "signed-max domain subsample cap, 0 = none");
  gc->add_option("--layer", layer, "activation layer name")->capture_default_str();
  gc->add_option("--threshold", threshold, "class-score gate threshold (default run.threshold)");
  gc->add_option("--gate", gate, "probability | logits")
      ->check(CLI::IsMember({"probability", "logits"}))
      ->capture_default_str();
  sg->callback([&] {
    action = [&] {
      const Settings s = load_settings(config, seed);
      if (instances_file.empty() || instance < 0)
        throw CLI::ValidationError("smoothgrad needs --instances and --instance");
      UNetConfig uc;
      const Graph<float> g = load_model(model_dir, &uc);
      const Tensor<float> x = load_image(image);
      const auto insts = load_instances(instances_file);
      const LesionInstance& li = find_instance(insts, instance);
      NoiseSpec ns = s.run.noise();
      if (noise_n > 0) ns.n = noise_n;
      if (sigma >= 0) ns.sigma = sigma;
      SaliencyOptions so;
      so.omega_cap = cap >= 0 ? cap : s.run.omega_cap;
      SaliencyMap m = aggregation == "avg" ? smoothgrad_instance_avg(g, x, li.voxels, ns, so)
                                           : smoothgrad_instance_max(g, x, li.voxels, ns, so);
      m.target = std::to_string(li.id);
      write_metavolume(m.to_metavolume(), out_file);
    };
  });
  gc->callback([&] {
    action = [&] {
      const Settings s = load_settings(config, seed);
      UNetConfig uc;
      const Graph<float> g = load_model(model_dir, &uc);
      const Tensor<float> x = load_image(image);
      GradCamOptions go;
      go.layer = layer;
      go.threshold = threshold >= 0 ? threshold : s.run.threshold;
      go.gate_on_logits = gate == "logits";
      SaliencyMap m;
      if (!instances_file.empty() && instance >= 0) {
        const auto insts = load_instances(instances_file);
        m = gradcampp_instance(g, x, find_instance(insts, instance).voxels, go);
        m.target = std::to_string(instance);
      } else {
        m = gradcampp_class(g, x, go);
        if (m.empty) err << "warning: no voxel above the threshold, heatmap is zero\n";
      }
      write_metavolume(m.to_metavolume(), out_file);
    };
  });

  // experiment context | stats | sanity | relocate
  auto* ex = app.add_subcommand("experiment", "phantom-scale analyses");
  ex->require_subcommand(1);
  auto* ex_ctx = ex->add_subcommand("context", "progressive context reveal around TP lesions");
  auto* ex_st = ex->add_subcommand("stats", "saliency extrema per category with U tests");
  auto* ex_san = ex->add_subcommand("sanity", "empty-region and single-voxel checks");
  auto* ex_rel = ex->add_subcommand("relocate", "move lesions to white matter / background");
  std::string phantom_dir;
  int iterations = -1, connectivity = -1, relocate_count = 5;
  for (auto* a : {ex_ctx, ex_st, ex_san, ex_rel}) {
    a->add_option("--model", model_dir, "checkpoint directory")->required();
    a->add_option("--out", out_file, "output CSV")->required();
    common(a);
  }
  for (auto* a : {ex_ctx, ex_san, ex_rel})
    a->add_option("--phantom", phantom_dir, "phantom directory")->required();
  for (auto* a : {ex_st, ex_san, ex_rel}) {
    a->add_option("--N", noise_n, "noise samples (default run.noise_n)");
    a->add_option("--sigma", sigma, "noise stdev (default run.noise_sigma)");
    a->add_option("--cap", cap, "signed-max domain subsample cap, 0 = none");
  }
  ex_st->add_option("--data", data_dir, "directory of test phantoms")->required();
  ex_ctx->add_option("--iterations", iterations, "dilation steps (default run.dilation_iterations)");
  ex_ctx->add_option("--connectivity", connectivity, "dilation element: 26 cube, 6 cross")
      ->check(CLI::IsMember({6, 26}));
  ex_ctx->add_option("--instance", instance, "predicted instance id (default: all TPs in the volume band)");
  ex_rel->add_option("--count", relocate_count, "lesions to relocate")->check(CLI::PositiveNumber);

  const auto run_settings = [&] {
    Settings s = load_settings(config, seed);
    if (noise_n > 0) s.run.noise_n = noise_n;
    if (sigma >= 0) s.run.noise_sigma = sigma;
    if (cap >= 0) s.run.omega_cap = cap;
    if (iterations >= 0) s.run.dilation_iterations = iterations;
    if (connectivity > 0) s.run.dilation_connectivity = connectivity;
    return s;
  };
  const auto study_volume = [](const Phantom& p, int id, const Graph<float>& g, int patch,
                               const RunConfig& rc) {
    StudyVolume<float> sv;
    sv.id = id;
    sv.phantom = &p;
    sv.image = preprocess(p.image).cast<float>();
    sv.prediction = predict(g, sv.image, patch, rc.threshold, rc.min_volume_mm3,
                            p.image.voxel_volume());
    return sv;
  };

  ex_ctx->callback([&] {
    action = [&] {
      const Settings s = run_settings();
      UNetConfig uc;
      const Graph<float> g = load_model(model_dir, &uc);
      require(phantom_dir);
      const Phantom p = load_phantom(phantom_dir);
      const StudyVolume<float> sv = study_volume(p, 0, g, uc.patch_extent, s.run);
      const auto lesions = context_lesions(sv, instance);
      if (lesions.empty()) err << "warning: no TP lesion to study\n";
      const ContextCurve c = context_experiment(g, sv.image, lesions, uc.patch_extent,
                                                s.run.dilation_iterations, s.run.threshold,
                                                p.image.spacing[0], s.run.dilation_connectivity);
      {
        auto os = open_out(out_file);
        write_context_csv(os, c);
      }
      const fs::path per = fs::path(out_file).replace_extension("").string() + "_lesions.csv";
      auto os = open_out(per);
      write_context_lesions_csv(os, c);
    };
  });
  ex_st->callback([&] {
    action = [&] {
      const Settings s = run_settings();
      UNetConfig uc;
      const Graph<float> g = load_model(model_dir, &uc);
      std::vector<Phantom> ps;
      for (const auto& d : phantom_dirs(data_dir)) ps.push_back(load_phantom(d));
      std::vector<StudyVolume<float>> svs;
      for (std::size_t i = 0; i < ps.size(); ++i)
        svs.push_back(study_volume(ps[i], int(i), g, uc.patch_extent, s.run));
      const ExtremaTable t = distribution_study(g, svs, s.run);
      const std::string stem = fs::path(out_file).replace_extension("").string();
      {
        auto os = open_out(out_file);
        write_extrema_rows_csv(os, t);
      }
      {
        auto os = open_out(stem + "_summary.csv");
        write_extrema_summary_csv(os, t);
      }
      auto os = open_out(stem + "_tests.csv");
      write_extrema_tests_csv(os, t);
    };
  });
  ex_san->callback([&] {
    action = [&] {
      const Settings s = run_settings();
      UNetConfig uc;
      const Graph<float> g = load_model(model_dir, &uc);
      require(phantom_dir);
      const Phantom p = load_phantom(phantom_dir);
      const StudyVolume<float> sv = study_volume(p, 0, g, uc.patch_extent, s.run);
      std::vector<std::pair<std::string, std::string>> items;
      const EmptyRegionReport er = sanity_empty_region(g, sv, s.run);
      items.push_back({"empty_region.omega_size", std::to_string(er.omega.size())});
      items.push_back({"empty_region.peak", num(er.peak)});
      for (std::size_t c = 0; c < er.extrema.size(); ++c) {
        items.push_back({"empty_region.max_m" + std::to_string(c), num(er.extrema[c].max)});
        items.push_back({"empty_region.min_m" + std::to_string(c), num(er.extrema[c].min)});
      }
      const auto cats = categorize(sv.prediction.instances, p.instances, sv.prediction.mask, p.gt);
      for (const auto& ci : cats) {
        if (ci.category != Category::TP) continue;
        const SingleVoxelReport r = sanity_single_voxel(g, sv.image, ci.instance, s.run);
        const std::string k = "single_voxel." + std::to_string(ci.instance.id) + ".";
        items.push_back({k + "voxel", std::to_string(r.voxel[0]) + " " + std::to_string(r.voxel[1]) +
                                          " " + std::to_string(r.voxel[2])});
        items.push_back({k + "avg_equals_max", r.identical ? "1" : "0"});
        items.push_back({k + "vicinity_fraction", num(r.vicinity_fraction)});
        items.push_back({k + "zero_beyond_rf", r.zero_beyond_receptive_field ? "1" : "0"});
        items.push_back({k + "peak", num(peak_abs(r.signed_max.values))});
      }
      auto os = open_out(out_file);
      write_kv_csv(os, "sanity", items);
    };
  });
  ex_rel->callback([&] {
    action = [&] {
      const Settings s = run_settings();
      UNetConfig uc;
      const Graph<float> g = load_model(model_dir, &uc);
      require(phantom_dir);
      const Phantom p = load_phantom(phantom_dir);
      const StudyVolume<float> sv = study_volume(p, 0, g, uc.patch_extent, s.run);
      std::vector<RelocationReport> reps;
      for (const auto& li : relocation_candidates(sv, relocate_count))
        reps.push_back(relocation_study(g, p, 0, li, uc.patch_extent, s.run));
      auto os = open_out(out_file);
      write_relocation_csv(os, reps);
    };
  });

  // report
  auto* rep = app.add_subcommand("report", "render a CSV written by this tool as SVG");
  std::string in_file;
  int modality = 0;
  rep->add_option("--in", in_file, "input CSV")->required();
  rep->add_option("--out", out_file, "output SVG")->required();
  rep->add_option("--modality", modality, "modality for extrema charts")->capture_default_str();
  common(rep);
  rep->callback([&] {
    action = [&] {
      load_settings(config, seed);
      require(in_file);
      std::ifstream is(in_file);
      CsvTable t;
      try {
        t = read_csv(is);
      } catch (const io_error&) {
        throw;
      } catch (const std::exception& e) {
        throw io_error(in_file + ": " + e.what());
      }
      auto os = open_out(out_file);
      os << render_svg(t, modality);
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  if (!action) return kOk;
  return guarded(action, err);
}

}  // namespace instxai::cli
