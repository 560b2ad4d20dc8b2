#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "triflow/checkpoint.hpp"
#include "triflow/gradcheck.hpp"
#include "triflow/image.hpp"
#include "triflow/threading.hpp"
#include "triflow/train.hpp"

namespace fs = std::filesystem;
using namespace triflow;

namespace {

void apply_thread_env() {
  if (const char* env = std::getenv("TRIFLOW_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) set_thread_count(n);
  }
}

KeyValueConfig effective_config(const std::string& path, const std::vector<std::string>& sets) {
  auto kv = path.empty() ? KeyValueConfig{} : KeyValueConfig::parse_file(path);
  for (const auto& s : sets) kv.apply_override(s);
  return kv;
}

void echo_config(const KeyValueConfig& kv) {
  std::cout << "config:\n";
  std::istringstream in(kv.echo());
  std::string line;
  while (std::getline(in, line)) std::cout << "  " << line << "\n";
}

KeyValueConfig dataset_key_values(const DatasetSpec& d) {
  KeyValueConfig kv;
  kv.set("data.count", std::to_string(d.count));
  kv.set("data.width", std::to_string(d.width));
  kv.set("data.height", std::to_string(d.height));
  kv.set("data.frames", std::to_string(d.frames));
  kv.set("data.min_sprites", std::to_string(d.min_sprites));
  kv.set("data.max_sprites", std::to_string(d.max_sprites));
  kv.set("data.max_speed", std::to_string(d.max_speed));
  kv.set("data.max_spin", std::to_string(d.max_spin));
  kv.set("data.background_speed", std::to_string(d.background_speed));
  kv.set("data.seed", std::to_string(d.seed));
  return kv;
}

std::vector<LoadedSequence> load_dataset(const std::string& dir) {
  const auto names = list_sequences(dir);
  if (names.empty())
    throw std::runtime_error("no sequences found under '" + dir + "' (expected seq_* directories)");
  std::vector<LoadedSequence> data;
  data.reserve(names.size());
  for (const auto& name : names) data.push_back(load_sequence((fs::path(dir) / name).string()));
  return data;
}

FlowModel<float> model_from_checkpoint(const std::string& ckpt, TrainConfig& cfg_out) {
  const auto meta = read_checkpoint_meta(ckpt);
  cfg_out = train_config_from(meta.config);
  Rng rng(cfg_out.seed);
  auto model = make_flow_model<float>(rng, cfg_out.model);
  auto params = named_params(model);
  load_checkpoint(ckpt, params);
  return model;
}

std::string two_digit(const char* stem, int t, const char* ext) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s_%02d.%s", stem, t, ext);
  return buf;
}

int run_gen_data(const KeyValueConfig& kv, const std::string& out_dir) {
  const auto spec = dataset_spec_from(kv);
  echo_config(dataset_key_values(spec));
  const auto names = make_dataset(out_dir, spec);
  std::cout << "wrote " << names.size() << " sequences to " << out_dir << "\n";
  return 0;
}

int run_train(const KeyValueConfig& kv, const std::string& data_dir, const std::string& out_dir) {
  const auto cfg = train_config_from(kv);
  echo_config(to_key_values(cfg));
  const auto data = load_dataset(data_dir);
  std::cout << "training on " << data.size() << " sequences\n";

  fs::create_directories(out_dir);
  std::ofstream log(fs::path(out_dir) / "train.log", std::ios::app);
  if (!log) throw std::runtime_error("cannot open training log under '" + out_dir + "'");
  std::istringstream cfg_lines(to_key_values(cfg).echo());
  for (std::string line; std::getline(cfg_lines, line);) log << "# " << line << "\n";

  Rng rng(cfg.seed);
  auto model = make_flow_model<float>(rng, cfg.model);
  const auto result = train(cfg, model, data, &log);

  CheckpointMeta meta;
  meta.step = cfg.steps;
  meta.rng_state = rng.state_string();
  meta.config = to_key_values(cfg);
  const auto ckpt = (fs::path(out_dir) / "model.ckpt").string();
  auto params = named_params(model);
  save_checkpoint(ckpt, params, meta);

  if (!result.losses.empty())
    std::cout << "final step loss=" << result.losses.back() << " lr=" << result.lrs.back() << "\n";
  std::cout << "checkpoint: " << ckpt << "\n";
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& data_dir, int iters, bool cross_check) {
  TrainConfig cfg;
  auto model = model_from_checkpoint(ckpt, cfg);
  const auto data = load_dataset(data_dir);
  EvalOptions opts;
  opts.iters = iters > 0 ? iters : cfg.iters;
  opts.reverse_cross_check = cross_check;
  std::cout << format_eval(evaluate(model, data, opts));
  return 0;
}

std::vector<Tensor<float>> load_frames(const std::string& dir, int want_channels) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension().string();
    if (ext == ".pgm" || ext == ".ppm" || ext == ".png") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.size() < 3)
    throw std::runtime_error("'" + dir + "' holds " + std::to_string(files.size()) +
                             " frame images; need at least 3");
  std::vector<Tensor<float>> frames;
  for (const auto& f : files) {
    auto img = f.extension() == ".png" ? read_png(f.string()) : read_pnm(f.string());
    if (img.dim(0) != want_channels)
      throw std::runtime_error("frame '" + f.string() + "' has " + std::to_string(img.dim(0)) +
                               " channels; the model expects " + std::to_string(want_channels));
    if (!frames.empty() && img.shape() != frames.front().shape())
      throw std::runtime_error("frame '" + f.string() + "' size differs from the first frame");
    frames.push_back(std::move(img));
  }
  return frames;
}

int run_infer(const std::string& ckpt, const std::string& frames_dir, const std::string& out_dir,
              int iters, int window) {
  if (window < 1) throw std::runtime_error("--window must be >= 1");
  TrainConfig cfg;
  auto model = model_from_checkpoint(ckpt, cfg);
  const auto frames = load_frames(frames_dir, model.cfg.in_channels);
  const int f = static_cast<int>(frames.size());
  const int t_per_window = window;
  if (iters <= 0) iters = cfg.iters;

  // Clips of length window+2 advancing by `window` centers; a short tail is
  // re-anchored to end at the last frame. The first and last frames have only
  // one neighbor each and never get an output.
  std::vector<std::pair<int, int>> windows;  // (start, length)
  if (f <= t_per_window + 2) {
    windows.emplace_back(0, f);
  } else {
    int s = 0;
    for (; s + t_per_window + 1 <= f - 1; s += t_per_window)
      windows.emplace_back(s, t_per_window + 2);
    if (windows.back().first + t_per_window < f - 2)
      windows.emplace_back(f - t_per_window - 2, t_per_window + 2);
  }

  fs::create_directories(out_dir);
  NoGradGuard no_grad;
  std::vector<bool> covered(static_cast<size_t>(f), false);
  int written = 0;
  for (const auto& [start, length] : windows) {
    const auto preds = model_forward(
        model, std::span<const Tensor<float>>(frames.data() + start, static_cast<size_t>(length)),
        iters);
    for (const auto& pred : preds) {
      const int t = start + pred.center;
      if (covered[static_cast<size_t>(t)]) continue;
      covered[static_cast<size_t>(t)] = true;
      const auto& last = pred.flows_img.back();
      write_flo((fs::path(out_dir) / two_digit("fwd", t, "flo")).string(), last.next);
      write_flo((fs::path(out_dir) / two_digit("bwd", t, "flo")).string(), last.prev);
      ++written;
    }
  }
  std::cout << "wrote flow pairs for " << written << " frames (indices 1.." << f - 2 << ") to "
            << out_dir << "\n";
  return 0;
}

int run_viz(const std::vector<std::string>& flo_files, const std::string& out_dir,
            double max_magnitude) {
  if (!out_dir.empty()) fs::create_directories(out_dir);
  for (const auto& file : flo_files) {
    const auto flow = read_flo(file);
    const auto img = colorize_flow(flow, static_cast<float>(max_magnitude));
    const fs::path in(file);
    const auto out =
        (out_dir.empty() ? in.parent_path() : fs::path(out_dir)) / (in.stem().string() + ".png");
    write_png(out.string(), img);
    std::cout << file << " -> " << out.string() << "\n";
  }
  return 0;
}

int run_ablate(const KeyValueConfig& kv, const std::string& data_dir,
               const std::string& eval_data_dir, const std::string& out_file) {
  const auto cfg = train_config_from(kv);
  echo_config(to_key_values(cfg));
  const auto train_data = load_dataset(data_dir);
  const auto eval_data = eval_data_dir.empty() ? train_data : load_dataset(eval_data_dir);
  const auto report = ablate(cfg, train_data, eval_data, &std::cout);
  std::cout << report.table;
  if (!out_file.empty()) {
    std::ofstream out(out_file);
    if (!out) throw std::runtime_error("cannot open '" + out_file + "'");
    out << report.table << "\n";
    for (const auto& run : report.runs) out << "== " << run.name << "\n" << format_eval(run.eval);
    std::cout << "report: " << out_file << "\n";
  }
  return 0;
}

// Compact self-contained spot checks of the numeric core; each prints one
// line. Returns the number of failures.
int run_selftest() {
  int failures = 0;
  auto check = [&](const char* name, auto&& fn) {
    try {
      fn();
      std::cout << "ok - " << name << "\n";
    } catch (const std::exception& e) {
      std::cout << "FAIL - " << name << ": " << e.what() << "\n";
      ++failures;
    }
  };
  auto expect = [](bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
  };

  check("gradients of the sampling/conv stack", [&] {
    Rng rng(7);
    auto x = Tensor<double>::zeros({2, 6, 6}, true);
    auto w = Tensor<double>::zeros({3, 2, 3, 3}, true);
    auto b = Tensor<double>::zeros({3}, true);
    auto coords = Tensor<double>::zeros({2, 5, 5}, true);
    fill_uniform(x, rng, -1, 1);
    fill_normal(w, rng, 0, 0.4);
    fill_uniform(b, rng, -0.2, 0.2);
    fill_uniform(coords, rng, 0.3, 4.3);
    auto fn = [&] { return mean_all(abs(bilinear_sample(conv2d(x, w, b, 1, 1), coords))); };
    const auto r = check_gradients({x, w, b, coords}, fn, {1e-5, 1e-4, 0, 17});
    expect(r.ok(1e-4, 1e-6), "gradient mismatch at " + r.worst);
  });

  check("correlation equals the brute-force oracle", [&] {
    Rng rng(8);
    auto fc = Tensor<float>::zeros({8, 4, 4});
    auto fp = Tensor<float>::zeros({8, 4, 4});
    auto fn_ = Tensor<float>::zeros({8, 4, 4});
    fill_uniform(fc, rng, -1, 1);
    fill_uniform(fp, rng, -1, 1);
    fill_uniform(fn_, rng, -1, 1);
    const auto vol = build_dual_corr(fc, fp, fn_, 1, true);
    const float scale = vol.scale_norm;
    const auto& c = vol.corr_prev();
    double worst = 0;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        for (int p = 0; p < 4; ++p)
          for (int q = 0; q < 4; ++q) {
            double dot = 0;
            for (int d = 0; d < 8; ++d)
              dot += double(fc.data()[(d * 4 + i) * 4 + j]) * fp.data()[(d * 4 + p) * 4 + q];
            const double got = c.data()[((i * 4 + j) * 4 + p) * 4 + q];
            worst = std::max(worst, std::abs(got - dot * scale));
          }
    expect(worst < 1e-6, "worst deviation " + std::to_string(worst));
  });

  check("flow file round trip is bit-exact", [&] {
    Rng rng(9);
    auto flow = Tensor<float>::zeros({2, 5, 4});
    fill_uniform(flow, rng, -30, 30);
    const auto path = (fs::temp_directory_path() / "triflow_selftest.flo").string();
    write_flo(path, flow);
    const auto back = read_flo(path);
    expect(back.shape() == flow.shape(), "shape changed");
    for (size_t i = 0; i < flow.data().size(); ++i)
      expect(back.data()[i] == flow.data()[i], "payload changed");
  });

  check("sequence loss worked example", [&] {
    auto field = [](float v) {
      auto t = Tensor<float>::zeros({2, 4, 4});
      for (auto& x : t.data_mut()) x = v;
      return t;
    };
    UnitPrediction<float> pred;
    pred.flows_img.push_back({field(1.0f), field(-1.0f)});
    pred.flows_img.push_back({field(0.5f), field(0.5f)});
    std::vector<Tensor<float>> zero{Tensor<float>::zeros({2, 4, 4})};
    const double loss = sequence_loss<float>({pred}, zero, zero, 0.85).item();
    expect(std::abs(loss - 2.7) < 1e-6, "expected 2.7, got " + std::to_string(loss));
  });

  check("temporal receptive field grows one unit per iteration", [&] {
    ModelConfig mc;
    mc.downsample = 2;
    mc.d_feat = 8;
    mc.d_hidden = 8;
    mc.d_corr = 8;
    mc.d_flow = 6;
    mc.d_motion = 8;
    mc.levels = 1;
    mc.radius = 1;
    Rng rng(11);
    auto model = make_flow_model<float>(rng, mc);
    Rng frame_rng(12);
    std::vector<Tensor<float>> frames;
    for (int t = 0; t < 5; ++t) {
      auto fr = Tensor<float>::zeros({1, 8, 8});
      fill_uniform(fr, frame_rng, 0, 1);
      frames.push_back(fr);
    }
    NoGradGuard no_grad;
    auto run = [&](int perturbed) {
      auto copy = frames;
      if (perturbed >= 0) {
        auto fr = Tensor<float>::zeros({1, 8, 8});
        for (size_t i = 0; i < fr.data().size(); ++i)
          fr.data_mut()[i] = copy[perturbed].data()[i] + (i == 0 ? 0.25f : 0.0f);
        copy[perturbed] = fr;
      }
      return model_forward(model, std::span<const Tensor<float>>(copy), 1);
    };
    auto same = [](const Tensor<float>& a, const Tensor<float>& b) {
      for (size_t i = 0; i < a.data().size(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
      return true;
    };
    const auto base = run(-1);
    const auto far = run(3);   // |3 - 1| = 2 > k = 1: no influence on center 1
    const auto near = run(2);  // |2 - 1| = 1 <= k = 1: must influence center 1
    expect(same(base[0].flows_img[0].next, far[0].flows_img[0].next),
           "distant frame leaked into the first iteration");
    expect(!same(base[0].flows_img[0].next, near[0].flows_img[0].next),
           "adjacent frame had no influence");
  });

  check("metric truth table", [&] {
    auto field = [](float u, float v) {
      auto t = Tensor<float>::zeros({2, 3, 3});
      auto d = t.data_mut();
      for (int i = 0; i < 9; ++i) {
        d[i] = u;
        d[9 + i] = v;
      }
      return t;
    };
    expect(std::abs(aepe(field(3, 4), field(0, 0)) - 5.0) < 1e-12, "3-4-5 aepe");
    expect(fl_all(field(14, 0), field(10, 0)) == 100.0, "4px on 10 should be an outlier");
    expect(fl_all(field(12, 0), field(10, 0)) == 0.0, "2px is under the 3px bar");
    expect(fl_all(field(104, 0), field(100, 0)) == 0.0, "4px is under 5% of 100");
  });

  if (failures == 0)
    std::cout << "selftest: all checks passed\n";
  else
    std::cout << "selftest: " << failures << " check(s) FAILED\n";
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  apply_thread_env();

  CLI::App app{"tri-frame bi-directional optical flow toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir, eval_data_dir, ckpt_path, frames_dir, out_file;
  std::vector<std::string> set_overrides, flo_files;
  std::uint64_t seed = 0;
  int iters = 0, window = 3;
  double max_magnitude = 0.0;
  bool cross_check = false;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset with ground truth");
  gen->add_option("--config", config_path, "key=value config file");
  gen->add_option("--set", set_overrides, "override, e.g. --set data.count=16");
  auto* gen_seed = gen->add_option("--seed", seed, "dataset seed (overrides data.seed)");
  gen->add_option("--out", out_dir, "output dataset directory")->required();

  auto* tr = app.add_subcommand("train", "train a model on a generated dataset");
  tr->add_option("--config", config_path, "key=value config file");
  tr->add_option("--set", set_overrides, "override, e.g. --set train.steps=500");
  auto* tr_seed = tr->add_option("--seed", seed, "training seed (overrides train.seed)");
  tr->add_option("--data", data_dir, "dataset directory from gen-data")->required();
  tr->add_option("--out", out_dir, "directory for model.ckpt and train.log")->required();

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  ev->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  ev->add_option("--data", data_dir, "dataset directory with ground truth")->required();
  ev->add_option("--iters", iters, "refinement iterations (default: training value)");
  ev->add_flag("--cross-check", cross_check,
               "also score the backward direction by reversing the frame order");

  auto* in = app.add_subcommand("infer", "write flow pairs for a directory of frames");
  in->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  in->add_option("--frames", frames_dir, "directory of .pgm/.ppm/.png frames")->required();
  in->add_option("--out", out_dir, "output directory for .flo pairs")->required();
  in->add_option("--iters", iters, "refinement iterations (default: training value)");
  in->add_option("--window", window, "supervised centers per clip window (default 3)");

  auto* vz = app.add_subcommand("viz", "colorize .flo files to PNG images");
  vz->add_option("files", flo_files, "flow files")->required()->expected(-1);
  vz->add_option("--out", out_dir, "output directory (default: next to each input)");
  vz->add_option("--max", max_magnitude, "saturation magnitude (default: 99th percentile)");

  auto* ab = app.add_subcommand("ablate", "train and compare the ablation flag matrix");
  ab->add_option("--config", config_path, "key=value config file");
  ab->add_option("--set", set_overrides, "override, e.g. --set train.steps=200");
  auto* ab_seed = ab->add_option("--seed", seed, "seed shared by all runs");
  ab->add_option("--data", data_dir, "training dataset directory")->required();
  ab->add_option("--eval-data", eval_data_dir, "evaluation dataset (default: training data)");
  ab->add_option("--out", out_file, "also write the report to this file");

  auto* st = app.add_subcommand("selftest", "run the built-in oracle and gradient spot checks");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto kv = effective_config(config_path, set_overrides);
      if (gen_seed->count() > 0) kv.set("data.seed", std::to_string(seed));
      return run_gen_data(kv, out_dir);
    }
    if (*tr) {
      auto kv = effective_config(config_path, set_overrides);
      if (tr_seed->count() > 0) kv.set("train.seed", std::to_string(seed));
      return run_train(kv, data_dir, out_dir);
    }
    if (*ev) return run_eval(ckpt_path, data_dir, iters, cross_check);
    if (*in) return run_infer(ckpt_path, frames_dir, out_dir, iters, window);
    if (*vz) return run_viz(flo_files, out_dir, max_magnitude);
    if (*ab) {
      auto kv = effective_config(config_path, set_overrides);
      if (ab_seed->count() > 0) kv.set("train.seed", std::to_string(seed));
      return run_ablate(kv, data_dir, eval_data_dir, out_file);
    }
    if (*st) return run_selftest();
  } catch (const std::exception& e) {
    std::cerr << "triflow: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
