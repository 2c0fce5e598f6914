// Command-line front end: each pipeline stage as a subcommand plus an
// end-to-end run. Configuration comes from JSON (--config) with flag
// overrides; hyperparameter keys use the symbols N, tau, lambda, alpha, w,
// eta. Every run writes a manifest with the effective config, the seed and
// FNV-1a hashes of every input file, so a run can be reproduced from its
// output directory alone.
//
// Exit codes: 0 success, 1 usage error (synopsis on stderr), 2 runtime
// failure.

#include <algorithm>
#include <array>
#include <atomic>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "exseg/io.hpp"
#include "exseg/metrics.hpp"
#include "exseg/pipeline.hpp"
#include "exseg/seed_genesis.hpp"
#include "exseg/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace exseg;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ------------------------------------------------------------ configuration

struct ToolConfig {
  std::uint64_t seed = 1;
  int threads = 1;
  std::string out_dir = "out";
  bool overlays = false;

  // Hyperparameters, keyed by their symbols in config files.
  int n = 100;                  // N: referring / contrastive sample size
  double tau = 0.1;             // temperature
  double lambda = 0.96;         // similarity threshold
  double alpha = 0.96;          // acceptance fraction
  double w = 0.1;               // pseudo-label loss weight
  double eta = 0.01;            // initial learning rate (train / retrain)
  double eta_finetune = 0.0001; // fine-tune learning rate

  Dims3 patch{32, 32, 16};
  int epochs_train = 60;
  int finetune_iters = 100;
  int epochs_retrain = 60;

  RwConfig rw;
  SynthSpec synth;
  int n_train = 20;
  int n_test = 10;
};

PipelineConfig pipeline_config(const ToolConfig& t) {
  PipelineConfig c;
  c.patch_dims = t.patch;
  c.epochs_train = t.epochs_train;
  c.finetune_iters = t.finetune_iters;
  c.epochs_retrain = t.epochs_retrain;
  c.eta_train = t.eta;
  c.eta_finetune = t.eta_finetune;
  c.ctr_n = t.n;
  c.tau = t.tau;
  c.prop.n = t.n;
  c.prop.lambda = t.lambda;
  c.prop.alpha = t.alpha;
  c.prop.w = t.w;
  c.seed = t.seed;
  return c;
}

ordered_json config_json(const ToolConfig& t) {
  ordered_json j;
  j["seed"] = t.seed;
  j["threads"] = t.threads;
  j["out_dir"] = t.out_dir;
  j["export_overlays"] = t.overlays;
  j["N"] = t.n;
  j["tau"] = t.tau;
  j["lambda"] = t.lambda;
  j["alpha"] = t.alpha;
  j["w"] = t.w;
  j["eta"] = t.eta;
  j["eta_finetune"] = t.eta_finetune;
  j["patch"] = {t.patch.nx, t.patch.ny, t.patch.nz};
  j["epochs_train"] = t.epochs_train;
  j["finetune_iters"] = t.finetune_iters;
  j["epochs_retrain"] = t.epochs_retrain;
  j["rw"] = {{"beta", t.rw.beta},
             {"epsilon_w", t.rw.epsilon_w},
             {"cg_tol", t.rw.cg_tol},
             {"cg_max_iters", t.rw.cg_max_iters},
             {"fg_threshold", t.rw.fg_threshold},
             {"bg_threshold", t.rw.bg_threshold},
             {"n_iterations", t.rw.n_iterations},
             {"dilation_iters", t.rw.dilation_iters}};
  j["synth"] = {{"dims", {t.synth.dims.nx, t.synth.dims.ny, t.synth.dims.nz}},
                {"spacing", {t.synth.spacing.sx, t.synth.spacing.sy, t.synth.spacing.sz}},
                {"radius_min", {t.synth.radius_min[0], t.synth.radius_min[1],
                                t.synth.radius_min[2]}},
                {"radius_max", {t.synth.radius_max[0], t.synth.radius_max[1],
                                t.synth.radius_max[2]}},
                {"bg_mean", t.synth.bg_mean},
                {"contrast", t.synth.contrast},
                {"noise_sigma", t.synth.noise_sigma},
                {"bias_amp", t.synth.bias_amp},
                {"lobulated", t.synth.lobulated},
                {"jitter_extremes", t.synth.jitter_extremes}};
  j["n_train"] = t.n_train;
  j["n_test"] = t.n_test;
  return j;
}

// Strict loader: an unknown key is an error, not a silent no-op, because a
// typo'd hyperparameter that falls back to its default is the worst failure
// mode a config file can have.
void load_config_file(const std::string& path, ToolConfig& t) {
  const nlohmann::json j = nlohmann::json::parse(slurp_file(path), nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw std::runtime_error("config is not a JSON object: " + path);
  }
  const auto triplet = [&](const nlohmann::json& v, const char* key, auto& a, auto& b,
                           auto& c) {
    if (!v.is_array() || v.size() != 3) {
      throw std::runtime_error(std::string("config key '") + key +
                               "' must be an array of 3: " + path);
    }
    a = v[0].get<std::remove_reference_t<decltype(a)>>();
    b = v[1].get<std::remove_reference_t<decltype(b)>>();
    c = v[2].get<std::remove_reference_t<decltype(c)>>();
  };
  for (const auto& [key, val] : j.items()) {
    if (key == "seed") t.seed = val.get<std::uint64_t>();
    else if (key == "threads") t.threads = val.get<int>();
    else if (key == "out_dir") t.out_dir = val.get<std::string>();
    else if (key == "export_overlays") t.overlays = val.get<bool>();
    else if (key == "N") t.n = val.get<int>();
    else if (key == "tau") t.tau = val.get<double>();
    else if (key == "lambda") t.lambda = val.get<double>();
    else if (key == "alpha") t.alpha = val.get<double>();
    else if (key == "w") t.w = val.get<double>();
    else if (key == "eta") t.eta = val.get<double>();
    else if (key == "eta_finetune") t.eta_finetune = val.get<double>();
    else if (key == "patch") triplet(val, "patch", t.patch.nx, t.patch.ny, t.patch.nz);
    else if (key == "epochs_train") t.epochs_train = val.get<int>();
    else if (key == "finetune_iters") t.finetune_iters = val.get<int>();
    else if (key == "epochs_retrain") t.epochs_retrain = val.get<int>();
    else if (key == "n_train") t.n_train = val.get<int>();
    else if (key == "n_test") t.n_test = val.get<int>();
    else if (key == "rw") {
      for (const auto& [rk, rv] : val.items()) {
        if (rk == "beta") t.rw.beta = rv.get<double>();
        else if (rk == "epsilon_w") t.rw.epsilon_w = rv.get<double>();
        else if (rk == "cg_tol") t.rw.cg_tol = rv.get<double>();
        else if (rk == "cg_max_iters") t.rw.cg_max_iters = rv.get<int>();
        else if (rk == "fg_threshold") t.rw.fg_threshold = rv.get<double>();
        else if (rk == "bg_threshold") t.rw.bg_threshold = rv.get<double>();
        else if (rk == "n_iterations") t.rw.n_iterations = rv.get<int>();
        else if (rk == "dilation_iters") t.rw.dilation_iters = rv.get<int>();
        else throw std::runtime_error("unknown config key 'rw." + rk + "': " + path);
      }
    } else if (key == "synth") {
      for (const auto& [sk, sv] : val.items()) {
        if (sk == "dims") {
          triplet(sv, "synth.dims", t.synth.dims.nx, t.synth.dims.ny, t.synth.dims.nz);
        } else if (sk == "spacing") {
          triplet(sv, "synth.spacing", t.synth.spacing.sx, t.synth.spacing.sy,
                  t.synth.spacing.sz);
        } else if (sk == "radius_min") {
          triplet(sv, "synth.radius_min", t.synth.radius_min[0], t.synth.radius_min[1],
                  t.synth.radius_min[2]);
        } else if (sk == "radius_max") {
          triplet(sv, "synth.radius_max", t.synth.radius_max[0], t.synth.radius_max[1],
                  t.synth.radius_max[2]);
        } else if (sk == "bg_mean") t.synth.bg_mean = sv.get<double>();
        else if (sk == "contrast") t.synth.contrast = sv.get<double>();
        else if (sk == "noise_sigma") t.synth.noise_sigma = sv.get<double>();
        else if (sk == "bias_amp") t.synth.bias_amp = sv.get<double>();
        else if (sk == "lobulated") t.synth.lobulated = sv.get<bool>();
        else if (sk == "jitter_extremes") t.synth.jitter_extremes = sv.get<bool>();
        else throw std::runtime_error("unknown config key 'synth." + sk + "': " + path);
      }
    } else {
      throw std::runtime_error("unknown config key '" + key + "': " + path);
    }
  }
}

// ------------------------------------------------------------ run manifests

std::string hash_hex(const std::string& bytes) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, fnv1a64(bytes));
  return buf;
}

struct RunRecorder {
  ordered_json inputs = ordered_json::array();
  std::vector<std::string> outputs;

  void input(const std::string& path) {
    inputs.push_back({{"path", path}, {"fnv1a64", hash_hex(slurp_file(path))}});
  }
  void output(const std::string& path) { outputs.push_back(path); }
};

void write_manifest(const ToolConfig& t, const std::string& subcommand,
                    const RunRecorder& rec) {
  ordered_json m;
  m["tool"] = "exseg";
  m["subcommand"] = subcommand;
  m["config"] = config_json(t);
  m["inputs"] = rec.inputs;
  m["outputs"] = rec.outputs;
  fs::create_directories(t.out_dir);
  spit_file((fs::path(t.out_dir) / "run_manifest.json").string(), m.dump(2) + "\n");
}

// ------------------------------------------------------------ shared pieces

// Runs fn(0..n-1) on up to `threads` workers. Work items must be independent
// and write only their own slots, so the result is identical for any thread
// count; the first exception is rethrown after all workers stop.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(n)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr err;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&]() {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!err) err = std::current_exception();
          next.store(n);
          return;
        }
      }
    });
  }
  for (std::thread& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

struct DatasetEntry {
  std::string id, volume, gt, extremes, split;
};

// Reads a dataset manifest and resolves relative case paths against its dir.
std::vector<DatasetEntry> read_dataset(const std::string& dir, RunRecorder& rec) {
  const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
  rec.input(manifest_path);
  const nlohmann::json m = nlohmann::json::parse(slurp_file(manifest_path), nullptr, false);
  if (m.is_discarded() || !m.contains("cases") || !m["cases"].is_array()) {
    throw std::runtime_error("malformed dataset manifest: " + manifest_path);
  }
  std::vector<DatasetEntry> out;
  for (const auto& c : m["cases"]) {
    DatasetEntry e;
    e.id = c.at("id").get<std::string>();
    e.volume = (fs::path(dir) / c.at("volume").get<std::string>()).string();
    e.gt = (fs::path(dir) / c.at("gt").get<std::string>()).string();
    e.extremes = (fs::path(dir) / c.at("extremes").get<std::string>()).string();
    e.split = c.at("split").get<std::string>();
    out.push_back(std::move(e));
  }
  if (out.empty()) throw std::runtime_error("dataset has no cases: " + manifest_path);
  return out;
}

std::vector<DatasetEntry> split_of(const std::vector<DatasetEntry>& all,
                                   const std::string& split) {
  if (split == "all") return all;
  std::vector<DatasetEntry> out;
  for (const DatasetEntry& e : all) {
    if (e.split == split) out.push_back(e);
  }
  if (out.empty()) throw std::runtime_error("dataset has no '" + split + "' cases");
  return out;
}

// Loads the train split as TrainingCases; mask_dir supplies the trinary
// pseudo-masks written by the pseudomask stage (<id>_mask.vol1).
std::vector<TrainingCase> load_training_cases(const std::vector<DatasetEntry>& entries,
                                              const std::string& mask_dir,
                                              RunRecorder& rec) {
  std::vector<TrainingCase> cases;
  for (const DatasetEntry& e : entries) {
    rec.input(e.volume);
    rec.input(e.extremes);
    TrainingCase tc;
    tc.id = e.id;
    tc.volume = normalize(read_volume(e.volume));
    tc.extremes = read_extremes(e.extremes);
    if (!mask_dir.empty()) {
      const std::string mp = (fs::path(mask_dir) / (e.id + "_mask.vol1")).string();
      rec.input(mp);
      tc.initial_mask = read_trinary(mp);
    }
    cases.push_back(std::move(tc));
  }
  return cases;
}

void save_trace(const StageResult& r, const std::string& path, RunRecorder& rec) {
  ordered_json j;
  j["loss_trace"] = r.loss_trace;
  spit_file(path, j.dump(2) + "\n");
  rec.output(path);
}

// Per-slice u8 rasters of the volume with labeled voxels brightened, for
// eyeballing masks and predictions without a viewer that understands f32.
void export_overlays(const Volume3D& v, const std::vector<std::uint8_t>& labels,
                     const fs::path& dir, const std::string& base, RunRecorder& rec) {
  fs::create_directories(dir);
  float mn = v.data[0], mx = v.data[0];
  for (float t : v.data) {
    mn = std::min(mn, t);
    mx = std::max(mx, t);
  }
  const float range = mx > mn ? mx - mn : 1.0f;
  const Dims3 slice_dims{v.dims.nx, v.dims.ny, 1};
  std::vector<std::uint8_t> slice(static_cast<std::size_t>(v.dims.nx) * v.dims.ny);
  for (int z = 0; z < v.dims.nz; ++z) {
    for (int y = 0; y < v.dims.ny; ++y) {
      for (int x = 0; x < v.dims.nx; ++x) {
        const std::size_t i = linear_index(v.dims, x, y, z);
        const int g = static_cast<int>(160.0f * (v.data[i] - mn) / range);
        const int val = labels[i] == 1 ? std::min(255, g + 95) : g;
        slice[static_cast<std::size_t>(y) * v.dims.nx + x] =
            static_cast<std::uint8_t>(val);
      }
    }
    char name[64];
    std::snprintf(name, sizeof(name), "%s_overlay_z%03d.vol1", base.c_str(), z);
    const std::string path = (dir / name).string();
    spit_file(path, detail::vol1_bytes(slice_dims, Spacing3{}, "u8", slice.data(),
                                       slice.size()));
    rec.output(path);
  }
}

// ------------------------------------------------------------- subcommands

int cmd_gen_data(const ToolConfig& t) {
  RunRecorder rec;
  fs::create_directories(t.out_dir);
  const ordered_json manifest =
      gen_dataset(t.synth, t.n_train, t.n_test, t.seed, t.out_dir);
  for (const auto& c : manifest["cases"]) {
    for (const char* k : {"volume", "gt", "extremes"}) {
      rec.output((fs::path(t.out_dir) / c[k].get<std::string>()).string());
    }
  }
  rec.output((fs::path(t.out_dir) / "manifest.json").string());
  write_manifest(t, "gen-data", rec);
  std::printf("gen-data: wrote %d train + %d test cases of %dx%dx%d to %s\n",
              t.n_train, t.n_test, t.synth.dims.nx, t.synth.dims.ny, t.synth.dims.nz,
              t.out_dir.c_str());
  return 0;
}

// Pseudo-mask one explicit volume or every train case of a dataset.
int cmd_pseudomask(const ToolConfig& t, const std::string& data_dir,
                   const std::string& volume_path, const std::string& extremes_path) {
  RunRecorder rec;
  fs::create_directories(t.out_dir);

  struct Item {
    std::string id, volume, extremes;
  };
  std::vector<Item> items;
  if (!volume_path.empty()) {
    items.push_back({fs::path(volume_path).stem().string(), volume_path, extremes_path});
    rec.input(volume_path);
    rec.input(extremes_path);
  } else {
    for (const DatasetEntry& e : split_of(read_dataset(data_dir, rec), "train")) {
      items.push_back({e.id, e.volume, e.extremes});
      rec.input(e.volume);
      rec.input(e.extremes);
    }
  }

  std::vector<std::pair<std::string, std::string>> written(items.size());
  parallel_for(items.size(), t.threads, [&](std::size_t i) {
    const Volume3D v = read_volume(items[i].volume);
    const ExtremePoints e = read_extremes(items[i].extremes);
    GenesisTrace trace;
    const TrinaryMask mask = generate_initial_mask(v, e, t.rw, &trace);
    const std::string mask_path =
        (fs::path(t.out_dir) / (items[i].id + "_mask.vol1")).string();
    write_trinary(mask, mask_path);
    ordered_json g;
    g["fg_seeds"] = trace.fg_seeds;
    g["bg_seeds"] = trace.bg_seeds;
    const std::string trace_path =
        (fs::path(t.out_dir) / (items[i].id + "_genesis.json")).string();
    spit_file(trace_path, g.dump(2) + "\n");
    written[i] = {mask_path, trace_path};
  });
  for (const auto& [m, g] : written) {
    rec.output(m);
    rec.output(g);
  }
  write_manifest(t, "pseudomask", rec);
  std::printf("pseudomask: wrote %zu mask(s) to %s\n", items.size(), t.out_dir.c_str());
  return 0;
}

int cmd_train(const ToolConfig& t, const std::string& data_dir,
              const std::string& mask_dir) {
  RunRecorder rec;
  fs::create_directories(t.out_dir);
  const std::vector<TrainingCase> cases =
      load_training_cases(split_of(read_dataset(data_dir, rec), "train"), mask_dir, rec);
  const StageResult r = train_stage(cases, pipeline_config(t));
  const std::string model_path = (fs::path(t.out_dir) / "trained.mdl1").string();
  save_model(r.model, model_path);
  rec.output(model_path);
  save_trace(r, (fs::path(t.out_dir) / "train_trace.json").string(), rec);
  write_manifest(t, "train", rec);
  std::printf("train: %zu cases, %d epochs, final mean loss %.4f -> %s\n", cases.size(),
              t.epochs_train, r.loss_trace.empty() ? 0.0 : r.loss_trace.back(),
              model_path.c_str());
  return 0;
}

// Fine-tunes the model, then rewrites every training pseudo-mask as the
// binarized prediction of the tuned model (the input to retraining).
int cmd_finetune(const ToolConfig& t, const std::string& data_dir,
                 const std::string& mask_dir, const std::string& model_path) {
  RunRecorder rec;
  fs::create_directories(t.out_dir);
  const std::vector<TrainingCase> cases =
      load_training_cases(split_of(read_dataset(data_dir, rec), "train"), mask_dir, rec);
  rec.input(model_path);
  const ModelState<float> start = load_model(model_path);
  const StageResult r = finetune_stage(start, cases, pipeline_config(t));

  const std::string tuned_path = (fs::path(t.out_dir) / "finetuned.mdl1").string();
  save_model(r.model, tuned_path);
  rec.output(tuned_path);
  save_trace(r, (fs::path(t.out_dir) / "finetune_trace.json").string(), rec);

  std::vector<Volume3D> vols;
  for (const TrainingCase& c : cases) vols.push_back(c.volume);
  const std::vector<BinaryMask> updated = binarize_training_masks(r.model, vols, t.patch);
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const std::string p =
        (fs::path(t.out_dir) / (cases[i].id + "_mask.vol1")).string();
    write_binary(updated[i], p);
    rec.output(p);
  }
  write_manifest(t, "finetune", rec);
  std::printf("finetune: %d iterations, wrote %s and %zu updated mask(s)\n",
              t.finetune_iters, tuned_path.c_str(), updated.size());
  return 0;
}

int cmd_retrain(const ToolConfig& t, const std::string& data_dir,
                const std::string& mask_dir) {
  RunRecorder rec;
  fs::create_directories(t.out_dir);
  const std::vector<DatasetEntry> entries =
      split_of(read_dataset(data_dir, rec), "train");
  std::vector<TrainingCase> cases = load_training_cases(entries, "", rec);
  std::vector<BinaryMask> masks;
  for (const DatasetEntry& e : entries) {
    const std::string p = (fs::path(mask_dir) / (e.id + "_mask.vol1")).string();
    rec.input(p);
    masks.push_back(read_binary(p));
  }
  const StageResult r = retrain_stage(cases, masks, pipeline_config(t));
  const std::string model_path = (fs::path(t.out_dir) / "retrained.mdl1").string();
  save_model(r.model, model_path);
  rec.output(model_path);
  save_trace(r, (fs::path(t.out_dir) / "retrain_trace.json").string(), rec);
  write_manifest(t, "retrain", rec);
  std::printf("retrain: %zu cases, %d epochs, final mean loss %.4f -> %s\n", cases.size(),
              t.epochs_retrain, r.loss_trace.empty() ? 0.0 : r.loss_trace.back(),
              model_path.c_str());
  return 0;
}

int cmd_infer(const ToolConfig& t, const std::string& model_path,
              const std::string& volume_path, const std::string& data_dir,
              const std::string& split) {
  RunRecorder rec;
  fs::create_directories(t.out_dir);
  rec.input(model_path);
  const ModelState<float> model = load_model(model_path);

  struct Item {
    std::string id, volume;
  };
  std::vector<Item> items;
  if (!volume_path.empty()) {
    items.push_back({fs::path(volume_path).stem().string(), volume_path});
    rec.input(volume_path);
  } else {
    for (const DatasetEntry& e : split_of(read_dataset(data_dir, rec), split)) {
      items.push_back({e.id, e.volume});
      rec.input(e.volume);
    }
  }

  std::vector<std::array<std::string, 2>> written(items.size());
  std::vector<RunRecorder> overlay_recs(items.size());
  parallel_for(items.size(), t.threads, [&](std::size_t i) {
    const Volume3D raw = read_volume(items[i].volume);
    const Volume3D nv = normalize(raw);
    const ProbMap p = sliding_window_infer(model, nv, t.patch);
    BinaryMask pred = make_binary(nv.dims);
    for (std::size_t k = 0; k < p.probs.size(); ++k) pred.labels[k] = p.probs[k] > 0.5f;
    const std::string prob_path =
        (fs::path(t.out_dir) / (items[i].id + "_prob.vol1")).string();
    const std::string pred_path =
        (fs::path(t.out_dir) / (items[i].id + "_pred.vol1")).string();
    write_probmap(p, prob_path);
    write_binary(pred, pred_path);
    written[i] = {prob_path, pred_path};
    if (t.overlays) {
      export_overlays(raw, pred.labels, fs::path(t.out_dir) / "overlays", items[i].id,
                      overlay_recs[i]);
    }
  });
  for (std::size_t i = 0; i < written.size(); ++i) {
    rec.output(written[i][0]);
    rec.output(written[i][1]);
    for (const std::string& p : overlay_recs[i].outputs) rec.output(p);
  }
  write_manifest(t, "infer", rec);
  std::printf("infer: wrote probability map + prediction for %zu volume(s) to %s\n",
              items.size(), t.out_dir.c_str());
  return 0;
}

int cmd_eval(const ToolConfig& t, const std::string& data_dir,
             const std::string& pred_dir, const std::string& split) {
  RunRecorder rec;
  fs::create_directories(t.out_dir);
  const std::vector<DatasetEntry> entries = split_of(read_dataset(data_dir, rec), split);
  std::vector<CaseMetrics> rows(entries.size());
  for (const DatasetEntry& e : entries) {
    rec.input(e.gt);
    rec.input((fs::path(pred_dir) / (e.id + "_pred.vol1")).string());
  }
  parallel_for(entries.size(), t.threads, [&](std::size_t i) {
    const BinaryMask gt = read_binary(entries[i].gt);
    const BinaryMask pred =
        read_binary((fs::path(pred_dir) / (entries[i].id + "_pred.vol1")).string());
    rows[i] = {entries[i].id, dice(pred, gt), jaccard(pred, gt)};
  });
  const ReportSummary s = report(rows);
  const std::string table = report_table(s);
  std::fputs(table.c_str(), stdout);
  const std::string table_path = (fs::path(t.out_dir) / "report.txt").string();
  const std::string json_path = (fs::path(t.out_dir) / "report.json").string();
  spit_file(table_path, table);
  spit_file(json_path, report_json(s).dump(2) + "\n");
  rec.output(table_path);
  rec.output(json_path);
  write_manifest(t, "eval", rec);
  return 0;
}

// The full chain on one dataset: pseudo-masks, train, fine-tune + mask
// update, retrain, inference on the test split, evaluation report.
int cmd_pipeline(const ToolConfig& t, const std::string& data_dir) {
  RunRecorder rec;
  const fs::path out(t.out_dir);
  fs::create_directories(out);
  const std::vector<DatasetEntry> all = read_dataset(data_dir, rec);
  const std::vector<DatasetEntry> train_entries = split_of(all, "train");
  const std::vector<DatasetEntry> test_entries = split_of(all, "test");
  const PipelineConfig cfg = pipeline_config(t);

  // Initial pseudo-masks (parallel per case; genesis reads the raw volume).
  std::vector<TrainingCase> cases(train_entries.size());
  parallel_for(train_entries.size(), t.threads, [&](std::size_t i) {
    const DatasetEntry& e = train_entries[i];
    const Volume3D raw = read_volume(e.volume);
    TrainingCase tc;
    tc.id = e.id;
    tc.extremes = read_extremes(e.extremes);
    tc.initial_mask = generate_initial_mask(raw, tc.extremes, t.rw, nullptr);
    tc.volume = normalize(raw);
    cases[i] = std::move(tc);
  });
  fs::create_directories(out / "masks");
  for (const TrainingCase& tc : cases) {
    const std::string p = (out / "masks" / (tc.id + "_mask.vol1")).string();
    write_trinary(tc.initial_mask, p);
    rec.output(p);
  }
  for (const DatasetEntry& e : train_entries) {
    rec.input(e.volume);
    rec.input(e.extremes);
  }
  std::printf("pipeline: pseudo-masks done (%zu cases)\n", cases.size());

  const StageResult trained = train_stage(cases, cfg);
  save_model(trained.model, (out / "trained.mdl1").string());
  rec.output((out / "trained.mdl1").string());
  save_trace(trained, (out / "train_trace.json").string(), rec);
  std::printf("pipeline: train done (%d epochs, final mean loss %.4f)\n", t.epochs_train,
              trained.loss_trace.empty() ? 0.0 : trained.loss_trace.back());

  const StageResult tuned = finetune_stage(trained.model, cases, cfg);
  save_model(tuned.model, (out / "finetuned.mdl1").string());
  rec.output((out / "finetuned.mdl1").string());
  save_trace(tuned, (out / "finetune_trace.json").string(), rec);

  std::vector<Volume3D> vols;
  for (const TrainingCase& c : cases) vols.push_back(c.volume);
  const std::vector<BinaryMask> updated = binarize_training_masks(tuned.model, vols, t.patch);
  fs::create_directories(out / "masks_updated");
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const std::string p = (out / "masks_updated" / (cases[i].id + "_mask.vol1")).string();
    write_binary(updated[i], p);
    rec.output(p);
  }
  std::printf("pipeline: fine-tune + mask update done (%d iterations)\n",
              t.finetune_iters);

  const StageResult retrained = retrain_stage(cases, updated, cfg);
  save_model(retrained.model, (out / "retrained.mdl1").string());
  rec.output((out / "retrained.mdl1").string());
  save_trace(retrained, (out / "retrain_trace.json").string(), rec);
  std::printf("pipeline: retrain done (%d epochs, final mean loss %.4f)\n",
              t.epochs_retrain,
              retrained.loss_trace.empty() ? 0.0 : retrained.loss_trace.back());

  // Test-split inference + evaluation with the retrained model.
  fs::create_directories(out / "pred");
  std::vector<CaseMetrics> rows(test_entries.size());
  std::vector<RunRecorder> overlay_recs(test_entries.size());
  parallel_for(test_entries.size(), t.threads, [&](std::size_t i) {
    const DatasetEntry& e = test_entries[i];
    const Volume3D raw = read_volume(e.volume);
    const Volume3D nv = normalize(raw);
    const ProbMap p = sliding_window_infer(retrained.model, nv, t.patch);
    BinaryMask pred = make_binary(nv.dims);
    for (std::size_t k = 0; k < p.probs.size(); ++k) pred.labels[k] = p.probs[k] > 0.5f;
    write_probmap(p, (out / "pred" / (e.id + "_prob.vol1")).string());
    write_binary(pred, (out / "pred" / (e.id + "_pred.vol1")).string());
    const BinaryMask gt = read_binary(e.gt);
    rows[i] = {e.id, dice(pred, gt), jaccard(pred, gt)};
    if (t.overlays) {
      export_overlays(raw, pred.labels, out / "pred" / "overlays", e.id, overlay_recs[i]);
    }
  });
  for (std::size_t i = 0; i < test_entries.size(); ++i) {
    rec.input(test_entries[i].volume);
    rec.input(test_entries[i].gt);
    rec.output((out / "pred" / (test_entries[i].id + "_prob.vol1")).string());
    rec.output((out / "pred" / (test_entries[i].id + "_pred.vol1")).string());
    for (const std::string& p : overlay_recs[i].outputs) rec.output(p);
  }

  const ReportSummary s = report(rows);
  const std::string table = report_table(s);
  std::fputs(table.c_str(), stdout);
  spit_file((out / "report.txt").string(), table);
  spit_file((out / "report.json").string(), report_json(s).dump(2) + "\n");
  rec.output((out / "report.txt").string());
  rec.output((out / "report.json").string());
  write_manifest(t, "pipeline", rec);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"weakly supervised 3d lesion segmentation from extreme points"};
  app.require_subcommand(1);

  ToolConfig cfg;   // effective config: defaults -> --config file -> flags
  ToolConfig raw;   // parse target for flag values
  std::vector<int> raw_patch, raw_dims;
  std::vector<double> raw_rmin, raw_rmax;
  std::string config_path;
  std::vector<std::pair<CLI::Option*, std::function<void()>>> overrides;

  const auto bind = [&overrides](CLI::Option* o, std::function<void()> apply) {
    overrides.emplace_back(o, std::move(apply));
  };
  // Options shared by every subcommand (also accepted before the subcommand).
  const auto add_common = [&](CLI::App* s) {
    s->add_option("--config", config_path, "JSON config file; flags override its values");
    bind(s->add_option("--seed", raw.seed, "master seed"), [&] { cfg.seed = raw.seed; });
    bind(s->add_option("--threads", raw.threads, "worker threads for per-case sections")
             ->check(CLI::PositiveNumber),
         [&] { cfg.threads = raw.threads; });
    bind(s->add_option("--out-dir", raw.out_dir, "output directory"),
         [&] { cfg.out_dir = raw.out_dir; });
    bind(s->add_flag("--export-overlays", raw.overlays,
                     "write per-slice u8 overlay rasters next to predictions"),
         [&] { cfg.overlays = raw.overlays; });
  };
  const auto add_hyper = [&](CLI::App* s) {
    bind(s->add_option("--N", raw.n, "referring/contrastive sample size"),
         [&] { cfg.n = raw.n; });
    bind(s->add_option("--tau", raw.tau, "temperature"), [&] { cfg.tau = raw.tau; });
    bind(s->add_option("--lambda", raw.lambda, "similarity threshold"),
         [&] { cfg.lambda = raw.lambda; });
    bind(s->add_option("--alpha", raw.alpha, "acceptance fraction"),
         [&] { cfg.alpha = raw.alpha; });
    bind(s->add_option("--w", raw.w, "pseudo-label loss weight"), [&] { cfg.w = raw.w; });
    bind(s->add_option("--eta", raw.eta, "train/retrain learning rate"),
         [&] { cfg.eta = raw.eta; });
    bind(s->add_option("--eta-finetune", raw.eta_finetune, "fine-tune learning rate"),
         [&] { cfg.eta_finetune = raw.eta_finetune; });
    bind(s->add_option("--patch", raw_patch, "patch dims (3 ints)")->expected(3),
         [&] { cfg.patch = {raw_patch[0], raw_patch[1], raw_patch[2]}; });
    bind(s->add_option("--epochs-train", raw.epochs_train, "training epochs"),
         [&] { cfg.epochs_train = raw.epochs_train; });
    bind(s->add_option("--finetune-iters", raw.finetune_iters, "fine-tune iterations"),
         [&] { cfg.finetune_iters = raw.finetune_iters; });
    bind(s->add_option("--epochs-retrain", raw.epochs_retrain, "retraining epochs"),
         [&] { cfg.epochs_retrain = raw.epochs_retrain; });
  };
  const auto add_rw = [&](CLI::App* s) {
    bind(s->add_option("--beta", raw.rw.beta, "edge weight sharpness"),
         [&] { cfg.rw.beta = raw.rw.beta; });
    bind(s->add_option("--epsilon-w", raw.rw.epsilon_w, "edge weight floor"),
         [&] { cfg.rw.epsilon_w = raw.rw.epsilon_w; });
    bind(s->add_option("--cg-tol", raw.rw.cg_tol, "cg relative residual"),
         [&] { cfg.rw.cg_tol = raw.rw.cg_tol; });
    bind(s->add_option("--cg-max-iters", raw.rw.cg_max_iters, "cg iteration cap"),
         [&] { cfg.rw.cg_max_iters = raw.rw.cg_max_iters; });
    bind(s->add_option("--fg-threshold", raw.rw.fg_threshold, "promotion threshold"),
         [&] { cfg.rw.fg_threshold = raw.rw.fg_threshold; });
    bind(s->add_option("--bg-threshold", raw.rw.bg_threshold, "demotion threshold"),
         [&] { cfg.rw.bg_threshold = raw.rw.bg_threshold; });
    bind(s->add_option("--rw-iterations", raw.rw.n_iterations, "walker solve count"),
         [&] { cfg.rw.n_iterations = raw.rw.n_iterations; });
    bind(s->add_option("--dilation-iters", raw.rw.dilation_iters, "scribble dilation"),
         [&] { cfg.rw.dilation_iters = raw.rw.dilation_iters; });
  };
  const auto add_synth = [&](CLI::App* s) {
    bind(s->add_option("--dims", raw_dims, "volume dims (3 ints)")->expected(3),
         [&] { cfg.synth.dims = {raw_dims[0], raw_dims[1], raw_dims[2]}; });
    bind(s->add_option("--radius-min", raw_rmin, "per-axis min radii")->expected(3), [&] {
      for (int a = 0; a < 3; ++a) cfg.synth.radius_min[a] = raw_rmin[a];
    });
    bind(s->add_option("--radius-max", raw_rmax, "per-axis max radii")->expected(3), [&] {
      for (int a = 0; a < 3; ++a) cfg.synth.radius_max[a] = raw_rmax[a];
    });
    bind(s->add_option("--bg-mean", raw.synth.bg_mean, "background intensity"),
         [&] { cfg.synth.bg_mean = raw.synth.bg_mean; });
    bind(s->add_option("--contrast", raw.synth.contrast, "lesion contrast"),
         [&] { cfg.synth.contrast = raw.synth.contrast; });
    bind(s->add_option("--noise-sigma", raw.synth.noise_sigma, "gaussian noise sigma"),
         [&] { cfg.synth.noise_sigma = raw.synth.noise_sigma; });
    bind(s->add_option("--bias-amp", raw.synth.bias_amp, "bias field amplitude"),
         [&] { cfg.synth.bias_amp = raw.synth.bias_amp; });
    bind(s->add_flag("--lobulated,!--no-lobulated", raw.synth.lobulated,
                     "multi-lobe lesions"),
         [&] { cfg.synth.lobulated = raw.synth.lobulated; });
    bind(s->add_flag("--jitter-extremes,!--no-jitter-extremes", raw.synth.jitter_extremes,
                     "annotation slack on extreme points"),
         [&] { cfg.synth.jitter_extremes = raw.synth.jitter_extremes; });
    bind(s->add_option("--n-train", raw.n_train, "training cases"),
         [&] { cfg.n_train = raw.n_train; });
    bind(s->add_option("--n-test", raw.n_test, "test cases"),
         [&] { cfg.n_test = raw.n_test; });
  };

  std::string data_dir, mask_dir, model_path, volume_path, extremes_path, pred_dir;
  std::string split = "test";

  add_common(&app);

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen);
  add_synth(gen);

  CLI::App* pm = app.add_subcommand(
      "pseudomask", "initial pseudo-masks from extreme points (scribbles + random walker)");
  add_common(pm);
  add_rw(pm);
  pm->add_option("--data-dir", data_dir, "dataset directory (processes the train split)");
  pm->add_option("--volume", volume_path, "single volume (VOL1)");
  pm->add_option("--extremes", extremes_path, "extreme points JSON for --volume");

  CLI::App* tr = app.add_subcommand("train", "first training stage on pseudo-masks");
  add_common(tr);
  add_hyper(tr);
  tr->add_option("--data-dir", data_dir, "dataset directory")->required();
  tr->add_option("--mask-dir", mask_dir, "directory with <id>_mask.vol1 pseudo-masks")
      ->required();

  CLI::App* ft = app.add_subcommand(
      "finetune", "similarity-guided fine-tune; also writes updated binary masks");
  add_common(ft);
  add_hyper(ft);
  ft->add_option("--data-dir", data_dir, "dataset directory")->required();
  ft->add_option("--mask-dir", mask_dir, "directory with <id>_mask.vol1 pseudo-masks")
      ->required();
  ft->add_option("--model", model_path, "trained model checkpoint")->required();

  CLI::App* rt = app.add_subcommand("retrain", "fresh training on updated binary masks");
  add_common(rt);
  add_hyper(rt);
  rt->add_option("--data-dir", data_dir, "dataset directory")->required();
  rt->add_option("--mask-dir", mask_dir, "directory with updated binary <id>_mask.vol1")
      ->required();

  CLI::App* in = app.add_subcommand("infer", "sliding-window inference");
  add_common(in);
  add_hyper(in);
  in->add_option("--model", model_path, "model checkpoint")->required();
  in->add_option("--volume", volume_path, "single volume (VOL1)");
  in->add_option("--data-dir", data_dir, "dataset directory (use with --split)");
  in->add_option("--split", split, "train|test|all for --data-dir")
      ->check(CLI::IsMember({"train", "test", "all"}));

  CLI::App* ev = app.add_subcommand("eval", "dice/jaccard report against ground truth");
  add_common(ev);
  ev->add_option("--data-dir", data_dir, "dataset directory")->required();
  ev->add_option("--pred-dir", pred_dir, "directory with <id>_pred.vol1")->required();
  ev->add_option("--split", split, "train|test|all")
      ->check(CLI::IsMember({"train", "test", "all"}));

  CLI::App* pl = app.add_subcommand("pipeline", "full chain: masks, train, fine-tune, "
                                                "retrain, test-split report");
  add_common(pl);
  add_hyper(pl);
  add_rw(pl);
  pl->add_option("--data-dir", data_dir, "dataset directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // --help: text on stdout, exit 0
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help() << std::flush;
    return 1;
  }

  try {
    if (!config_path.empty()) load_config_file(config_path, cfg);
    for (const auto& [opt, apply] : overrides) {
      if (opt->count() > 0) apply();
    }

    if (app.got_subcommand(gen)) return cmd_gen_data(cfg);
    if (app.got_subcommand(pm)) {
      if (volume_path.empty() == data_dir.empty()) {
        throw UsageError("pseudomask needs exactly one of --data-dir or --volume");
      }
      if (!volume_path.empty() && extremes_path.empty()) {
        throw UsageError("--volume requires --extremes");
      }
      return cmd_pseudomask(cfg, data_dir, volume_path, extremes_path);
    }
    if (app.got_subcommand(tr)) return cmd_train(cfg, data_dir, mask_dir);
    if (app.got_subcommand(ft)) return cmd_finetune(cfg, data_dir, mask_dir, model_path);
    if (app.got_subcommand(rt)) return cmd_retrain(cfg, data_dir, mask_dir);
    if (app.got_subcommand(in)) {
      if (volume_path.empty() == data_dir.empty()) {
        throw UsageError("infer needs exactly one of --data-dir or --volume");
      }
      return cmd_infer(cfg, model_path, volume_path, data_dir, split);
    }
    if (app.got_subcommand(ev)) return cmd_eval(cfg, data_dir, pred_dir, split);
    if (app.got_subcommand(pl)) return cmd_pipeline(cfg, data_dir);
    throw UsageError("no subcommand selected");
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help() << std::flush;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
