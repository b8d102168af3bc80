// etapkit: command-line front end for the event tracking pipeline.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "etap/event_io.hpp"
#include "etap/event_sim.hpp"
#include "etap/gt_tools.hpp"
#include "etap/losses.hpp"
#include "etap/metrics.hpp"
#include "etap/oracles.hpp"
#include "etap/pipeline.hpp"
#include "etap/representation.hpp"
#include "etap/tracker.hpp"
#include "etap/train.hpp"

namespace fs = std::filesystem;
using namespace etap;

namespace {

constexpr int kExitInput = 2;
constexpr int kExitVerify = 3;
constexpr int kExitRuntime = 1;

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  long long seed = -1;
  std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
  std::vector<std::string> argv;
};

PipelineConfig load_config(const Common& c) {
  PipelineConfig cfg = c.config_file.empty() ? PipelineConfig{} : PipelineConfig::parse(io::read_text(c.config_file));
  for (const auto& s : c.sets) cfg.set_assignment(s, "flag");
  for (const auto& o : cfg.overrides()) {
    std::cerr << "config: " << o["key"].get<std::string>() << " = " << o["value"].get<std::string>() << " ("
              << o["source"].get<std::string>() << ")\n";
  }
  return cfg;
}

fs::path manifest_path(const fs::path& out) {
  fs::path p = out;
  p += ".manifest.json";
  return p;
}

EventStream read_events(const fs::path& path, Geometry g = {}) {
  if (path.extension() == ".csv") {
    require(g.width > 0 && g.height > 0, ErrorCode::InvalidArgument, "CSV events need --width and --height");
    return decode_events_csv(io::read_text(path), g);
  }
  return read_evt1(path);
}

void write_events(const fs::path& path, const EventStream& s) {
  if (path.extension() == ".csv") {
    io::write_atomic(path, encode_events_csv(s));
  } else {
    write_evt1(path, s);
  }
}

/// Schedule from a CSV with a t_us column, or `start:step:count`.
std::vector<std::int64_t> parse_schedule(const std::string& spec) {
  std::vector<std::int64_t> out;
  if (fs::exists(spec)) {
    const io::CsvTable t = io::parse_csv(io::read_text(spec));
    const std::size_t c = t.column("t_us");
    for (const auto& r : t.rows) out.push_back(io::to_int(r[c]));
  } else {
    const auto parts = io::split(spec, ':');
    require(parts.size() == 3, ErrorCode::InvalidArgument, "schedule must be a CSV file or start:step:count");
    const auto start = io::to_int(parts[0]), step = io::to_int(parts[1]), count = io::to_int(parts[2]);
    require(step > 0 && count >= 0, ErrorCode::InvalidArgument, "schedule step must be > 0 and count >= 0");
    for (long long k = 0; k < count; ++k) out.push_back(start + k * step);
  }
  return out;
}

std::string schedule_csv(const std::vector<std::int64_t>& s) {
  std::string out = "t_us\n";
  for (auto t : s) out += std::to_string(t) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateArgs {
  std::string frames, out;
  double contrast = 0.0;
  double max_log_step = 0.0;
};

int cmd_simulate(const Common& c, const SimulateArgs& a) {
  const PipelineConfig cfg = load_config(c);
  const std::uint64_t seed = resolve_seed(cfg, c.seed);
  RunManifest m("simulate", cfg, seed, c.argv);
  const FrameSequence seq = read_frame_directory(a.frames);
  m.input(fs::path(a.frames) / "manifest.csv");
  ContrastConfig contrast;
  if (a.contrast > 0) {
    contrast = {a.contrast, a.contrast, cfg.number("log_eps")};
  } else {
    std::mt19937_64 rng(seed);
    contrast = sample_threshold(rng, cfg.number("contrast_lo"), cfg.number("contrast_hi"), cfg.number("log_eps"));
  }
  SimOptions opt;
  opt.threads = c.threads;
  opt.max_log_step = a.max_log_step;
  const EventStream s = simulate_events(seq, contrast, opt);
  write_events(a.out, s);
  m.output(a.out);
  m.note("contrast", {{"c_pos", contrast.c_pos}, {"c_neg", contrast.c_neg}, {"log_eps", contrast.log_eps}});
  m.note("events", s.size());
  m.write(manifest_path(a.out));
  std::printf("events %zu\ncontrast %s\n", s.size(), io::format_double(contrast.c_pos).c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// stack

struct StackArgs {
  std::string events, out;
  long long t_end = -1;
  long long n_events = -1;
  int bins = -1;
  int width = 0, height = 0;
  int rotate = 0;
  bool voxel = false;
  bool invert = false;
};

int cmd_stack(const Common& c, const StackArgs& a) {
  const PipelineConfig cfg = load_config(c);
  RunManifest m("stack", cfg, resolve_seed(cfg, c.seed), c.argv);
  const EventStream s = read_events(a.events, {a.width, a.height});
  m.input(a.events);
  require(!s.empty(), ErrorCode::EmptyWindow, "event file is empty");
  const std::int64_t t_end = a.t_end >= 0 ? a.t_end : s.events().back().t_us;
  const auto n = static_cast<std::size_t>(a.n_events > 0 ? a.n_events : cfg.integer("n_events"));
  const int bins = a.bins > 0 ? a.bins : static_cast<int>(cfg.integer("bins"));
  EventWindow w = select_window(s, t_end, n);
  if (a.invert) w = invert_time(w);
  if (a.rotate != 0) w = rotate_events(w, quarter_turn_from_degrees(a.rotate));
  const EventStack stack = a.voxel ? build_voxel_grid(w, bins) : build_event_stack(w, bins);
  const fs::path bin = a.out;
  fs::path json = bin;
  json.replace_extension(".json");
  export_stack(stack, bin, json);
  m.output(bin);
  m.output(json);
  m.write(manifest_path(bin));
  std::printf("stack %dx%dx%d span_us %lld\n", stack.width, stack.height, stack.bins,
              static_cast<long long>(w.span_us()));
  return 0;
}

// ---------------------------------------------------------------------------
// track

struct TrackArgs {
  std::string events, queries, schedule, params, out;
  long long n_events = -1;
  int iters = -1;
  int width = 0, height = 0;
};

int cmd_track(const Common& c, const TrackArgs& a) {
  const PipelineConfig cfg = load_config(c);
  RunManifest m("track", cfg, resolve_seed(cfg, c.seed), c.argv);
  const TrackerModel model = decode_params(io::read_text(a.params));
  m.input(a.params);
  const auto schedule = parse_schedule(a.schedule);
  if (fs::exists(a.schedule)) m.input(a.schedule);
  const auto queries = decode_queries_csv(io::read_text(a.queries), schedule);
  m.input(a.queries);
  TrackSet tracks;
  if (queries.empty()) {
    tracks = TrackSet::empty_like(schedule, 0);
  } else {
    const EventStream s = read_events(a.events, {a.width, a.height});
    m.input(a.events);
    TrackOptions opt;
    opt.n_events = static_cast<std::size_t>(a.n_events > 0 ? a.n_events : cfg.integer("n_events"));
    opt.iters = a.iters > 0 ? a.iters : model.config.iters_eval;
    opt.threads = c.threads;
    tracks = track_sequence(s, queries, schedule, model, opt);
  }
  io::write_atomic(a.out, encode_tracks_csv(tracks));
  m.output(a.out);
  m.note("summary", tracks_summary(tracks));
  m.write(manifest_path(a.out));
  std::printf("points %zu steps %zu\n", tracks.num_points(), tracks.num_steps());
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string pred, gt, out_dir;
  int width = 0, height = 0;
};

int cmd_eval(const Common& c, const EvalArgs& a) {
  const PipelineConfig cfg = load_config(c);
  RunManifest m("eval", cfg, resolve_seed(cfg, c.seed), c.argv);
  const TrackSet pred = decode_tracks_csv(io::read_text(a.pred));
  const TrackSet gt = decode_tracks_csv(io::read_text(a.gt));
  m.input(a.pred);
  m.input(a.gt);
  require(a.width > 0 && a.height > 0, ErrorCode::InvalidArgument, "--width and --height are required");
  const TapReport tap = tap_report(pred, gt, {a.width, a.height}, cfg.numbers("thresholds"));
  const FeatureAgeReport fa = feature_age(pred, gt, cfg.number("age_threshold"));
  const fs::path dir = a.out_dir;
  io::write_atomic(dir / "tap.json", to_json(tap).dump(2) + "\n");
  io::write_atomic(dir / "tap.csv", tap_csv(tap));
  io::write_atomic(dir / "feature_age.json", to_json(fa).dump(2) + "\n");
  io::write_atomic(dir / "feature_age.csv", feature_age_csv(fa, gt.point_ids));
  for (const char* f : {"tap.json", "tap.csv", "feature_age.json", "feature_age.csv"}) m.output(dir / f);
  m.write(dir / "manifest.json");
  std::printf("%-10s %s\n", "AJ", io::format_fixed(tap.aj, 4).c_str());
  std::printf("%-10s %s\n", "delta_avg", io::format_fixed(tap.delta_avg, 4).c_str());
  std::printf("%-10s %s\n", "OA", io::format_fixed(tap.oa, 4).c_str());
  std::printf("%-10s %s\n", "FA", io::format_fixed(fa.fa, 4).c_str());
  std::printf("%-10s %s\n", "EFA", io::format_fixed(fa.expected_fa, 4).c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// toy-gen

nlohmann::json toy_json(const ToyDatasetConfig& d) {
  return {{"width", d.width},       {"height", d.height},   {"scenes", d.scenes},         {"points", d.points},
          {"steps", d.steps},       {"step_us", d.step_us}, {"n_events", d.n_events},     {"bins", d.bins},
          {"speed_min", d.speed_min}, {"speed_max", d.speed_max}, {"contrast_lo", d.contrast_lo},
          {"contrast_hi", d.contrast_hi}, {"seed", d.seed}};
}

ToyDatasetConfig toy_from_json(const nlohmann::json& j) {
  ToyDatasetConfig d;
  j.at("width").get_to(d.width);
  j.at("height").get_to(d.height);
  j.at("scenes").get_to(d.scenes);
  j.at("points").get_to(d.points);
  j.at("steps").get_to(d.steps);
  j.at("step_us").get_to(d.step_us);
  j.at("n_events").get_to(d.n_events);
  j.at("bins").get_to(d.bins);
  j.at("speed_min").get_to(d.speed_min);
  j.at("speed_max").get_to(d.speed_max);
  j.at("contrast_lo").get_to(d.contrast_lo);
  j.at("contrast_hi").get_to(d.contrast_hi);
  j.at("seed").get_to(d.seed);
  d.validate();
  return d;
}

std::string dataset_fingerprint(const std::vector<ToySample>& data) {
  std::uint64_t h = io::fnv1a64("");
  for (const auto& s : data) h = io::fnv1a64(encode_tracks_csv(s.gt), h);
  return io::hex64(h);
}

int cmd_toy_gen(const Common& c, const std::string& out_dir, bool held_out, const std::string& frames_out) {
  const PipelineConfig cfg = load_config(c);
  ToyDatasetConfig d = cfg.toy();
  d.seed = resolve_seed(cfg, c.seed);
  if (held_out) d.seed += 1000;  // disjoint scene seeds
  RunManifest m("toy-gen", cfg, d.seed, c.argv);
  const auto data = make_toy_dataset(d, c.threads);
  const fs::path dir = out_dir;
  for (std::size_t i = 0; i < data.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%03zu", i);
    const fs::path sd = dir / name;
    io::write_atomic(sd / "tracks.csv", encode_tracks_csv(data[i].gt));
    io::write_atomic(sd / "queries.csv", encode_queries_csv(data[i].queries, data[i].schedule));
    io::write_atomic(sd / "schedule.csv", schedule_csv(data[i].schedule));
    export_stack(data[i].stacks.front(), sd / "stack_000.bin", sd / "stack_000.json");
  }
  const nlohmann::json meta = {{"toy", toy_json(d)}, {"fingerprint", dataset_fingerprint(data)}};
  io::write_atomic(dir / "dataset.json", meta.dump(2) + "\n");
  m.output(dir / "dataset.json");
  if (!frames_out.empty()) write_frame_directory(frames_out, ToyScene(data.front().scene).frames());
  m.write(dir / "manifest.json");
  std::printf("scenes %zu fingerprint %s\n", data.size(), meta["fingerprint"].get<std::string>().c_str());
  return 0;
}

/// Regenerates a dataset from its description and checks it matches.
std::vector<ToySample> load_dataset(const fs::path& dir, std::size_t threads, RunManifest& m) {
  const fs::path meta_path = dir / "dataset.json";
  m.input(meta_path);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(io::read_text(meta_path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, std::string("dataset.json: ") + e.what());
  }
  auto data = make_toy_dataset(toy_from_json(meta.at("toy")), threads);
  require(dataset_fingerprint(data) == meta.at("fingerprint").get<std::string>(), ErrorCode::ChecksumMismatch,
          "regenerated dataset differs from " + meta_path.string());
  return data;
}

// ---------------------------------------------------------------------------
// gt-spinner

struct SpinnerArgs {
  std::string out_dir;
  int size = 64;
  int lobes = 3;
  std::string segments = "250000:25.132741228718345,1e9:50.26548245743669";
  long long duration_us = 500000;
  std::string radii = "10,16,22";
  std::size_t hist_events = 6000;
  double contrast = 0.2;
};

int cmd_gt_spinner(const Common& c, const SpinnerArgs& a) {
  const PipelineConfig cfg = load_config(c);
  RunManifest m("gt-spinner", cfg, resolve_seed(cfg, c.seed), c.argv);
  SpinnerSceneConfig sc;
  sc.width = sc.height = a.size;
  sc.cx = sc.cy = (a.size - 1) / 2.0;
  sc.r_inner = a.size * 0.1;
  sc.r_outer = a.size * 0.45;
  sc.lobes = a.lobes;
  sc.duration_us = a.duration_us;
  for (const auto& seg : io::split(a.segments, ',')) {
    const auto p = io::split(seg, ':');
    require(p.size() == 2, ErrorCode::InvalidArgument, "segment must be duration_us:omega");
    sc.segments.push_back({io::to_double(p[0]), io::to_double(p[1])});
  }
  const EventStream stream = simulate_events(sc.frames(), {a.contrast, a.contrast, cfg.number("log_eps")});
  SpinnerGtConfig gc;
  gc.lobes = a.lobes;
  gc.hist_events = a.hist_events;
  gc.cx = sc.cx;
  gc.cy = sc.cy;
  for (const auto& r : io::split(a.radii, ',')) {
    gc.radii.push_back(io::to_double(r));
    gc.angles.push_back(0.0);
  }
  const SpinnerGt gt = spinner_groundtruth(stream, gc);
  const fs::path dir = a.out_dir;
  write_evt1(dir / "events.evt", stream);
  io::write_atomic(dir / "tracks.csv", encode_tracks_csv(gt.tracks));
  std::string om = "interval,end_us,omega\n";
  for (std::size_t i = 0; i < gt.omega.size(); ++i)
    om += std::to_string(i) + "," + io::format_double(gt.minima_us[i]) + "," + io::format_double(gt.omega[i]) + "\n";
  io::write_atomic(dir / "omega.csv", om);
  for (const char* f : {"events.evt", "tracks.csv", "omega.csv"}) m.output(dir / f);
  m.write(dir / "manifest.json");
  std::printf("events %zu intervals %zu\n", stream.size(), gt.omega.size());
  return 0;
}

// ---------------------------------------------------------------------------
// train-toy

struct TrainArgs {
  std::string dataset, out_params, loss_csv;
  int steps = -1;
  int fa_start = -2;
};

int cmd_train_toy(const Common& c, const TrainArgs& a) {
  const PipelineConfig cfg = load_config(c);
  const std::uint64_t seed = resolve_seed(cfg, c.seed);
  RunManifest m("train-toy", cfg, seed, c.argv);
  const auto data = load_dataset(a.dataset, c.threads, m);
  ModelConfig mc = toy_model_config();
  mc.bins = data.front().stacks.front().bins;
  TrainConfig tc;
  tc.steps = a.steps >= 0 ? a.steps : static_cast<int>(cfg.integer("train_steps"));
  tc.fa_start = a.fa_start >= -1 ? a.fa_start : static_cast<int>(cfg.integer("fa_start"));
  tc.iters = mc.iters_train;
  tc.noise_sigma = cfg.number("noise_sigma");
  tc.batch = static_cast<std::size_t>(cfg.integer("batch"));
  tc.adam.lr = cfg.number("lr");
  tc.seed = seed;
  TrainState st{init_model(mc, seed), AdamW(tc.adam), {}, 0};
  try {
    train_steps(st, data, tc, tc.steps, [&](int step, const LossBreakdown& l) {
      if ((step + 1) % 50 == 0) std::fprintf(stderr, "step %d total %.4f\n", step + 1, l.total);
    });
  } catch (const Error& e) {
    // keep the curve up to the failing step
    io::write_atomic(a.loss_csv, st.curve.to_csv());
    throw;
  }
  io::write_atomic(a.out_params, encode_params(st.model, seed));
  io::write_atomic(a.loss_csv, st.curve.to_csv());
  m.output(a.out_params);
  m.output(a.loss_csv);
  m.write(manifest_path(a.out_params));
  std::printf("steps %d final_total %s\n", tc.steps,
              st.curve.steps.empty() ? "none" : io::format_double(st.curve.steps.back().total).c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// grad-check and verify

/// Small model and sample whose full-graph gradient check runs in seconds.
struct GradFixture {
  ToySample sample;
  TrackerModel model;
};

GradFixture grad_fixture(std::uint64_t seed) {
  ToyDatasetConfig dc;
  dc.width = dc.height = 32;
  dc.points = 3;
  dc.steps = 3;
  dc.n_events = 600;
  dc.bins = 3;
  ModelConfig cfg = toy_model_config();
  cfg.window = 3;
  cfg.window_stride = 2;
  cfg.feature_dim = 6;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.blocks = 1;
  cfg.levels = 2;
  cfg.corr_radius = 1;
  cfg.encoder = {{3, 2, 4, true, false}, {3, 2, 6, false, false}};
  GradFixture f{make_toy_sample(dc, seed + 5), init_model(cfg, seed + 4)};
  std::mt19937_64 rng(seed + 9);
  std::normal_distribution<double> nd(0.0, 0.1);
  // zero-initialised heads would hide everything upstream from the check
  for (ad::Var v : {f.model.refiner.dx_w, f.model.refiner.dq_w, f.model.refiner.vis_w})
    for (double& x : v.mutable_value()) x = nd(rng);
  return f;
}

/// Passes the value through but scales its gradient: a deliberately broken backward.
ad::Var faulty_identity(const ad::Var& x) {
  return ad::detail::make_result(x.shape(), x.value(), {x}, [](ad::Node& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) self.parents[0]->g()[i] += 1.1 * self.grad[i];
  });
}

struct GradRow {
  std::string term;
  GradCheckResult r;
};

std::vector<GradRow> run_grad_checks(std::uint64_t seed, bool inject_fault) {
  const GradFixture f = grad_fixture(seed);
  ForwardOptions fo;
  fo.iters = 2;
  fo.detach_positions = false;  // the check needs the exact derivative
  fo.with_fa = true;
  fo.turn = QuarterTurn::R90;
  GradCheckOptions opt;
  opt.epsilon = 1e-4;
  opt.max_per_param = 6;
  opt.seed = seed;
  const auto params = f.model.named();
  std::vector<GradRow> rows;
  const char* names[4] = {"l_track", "l_vis", "l_fa", "total"};
  for (int which = 0; which < 4; ++which) {
    auto fn = [&, which] {
      std::mt19937_64 rng(seed);
      const SampleLosses l = sample_forward(f.model, f.sample, fo, rng);
      ad::Var track = inject_fault ? faulty_identity(l.l_track) : l.l_track;
      switch (which) {
        case 0: return track;
        case 1: return l.l_vis;
        case 2: return l.l_fa;
        default: return total_loss_graph(track, l.l_vis, l.l_fa);
      }
    };
    rows.push_back({names[which], grad_check(fn, params, opt)});
  }
  return rows;
}

int cmd_grad_check(const Common& c, bool inject_fault, double tolerance) {
  const PipelineConfig cfg = load_config(c);
  const std::uint64_t seed = resolve_seed(cfg, c.seed);
  bool ok = true;
  for (const auto& row : run_grad_checks(seed, inject_fault)) {
    const bool pass = row.r.max_rel_error < tolerance;
    ok = ok && pass;
    std::printf("%-8s %s max_rel_err %.3e worst %s[%zu] analytic %.6e numeric %.6e checked %zu\n", row.term.c_str(),
                pass ? "PASS" : "FAIL", row.r.max_rel_error, row.r.worst_param.c_str(), row.r.worst_index,
                row.r.analytic, row.r.numeric, row.r.checked);
  }
  return ok ? 0 : kExitVerify;
}

int cmd_verify(const Common& c, const std::string& params_path, bool inject_fault) {
  const PipelineConfig cfg = load_config(c);
  const std::uint64_t seed = resolve_seed(cfg, c.seed);
  bool all = true;
  auto report = [&](const char* name, bool pass, const std::string& detail) {
    all = all && pass;
    std::printf("%-22s %s %s\n", name, pass ? "PASS" : "FAIL", detail.c_str());
  };
  auto guarded = [&](const char* name, const std::function<std::pair<bool, std::string>()>& f) {
    try {
      const auto [pass, detail] = f();
      report(name, pass, detail);
    } catch (const Error& e) {
      report(name, false, e.what());
    }
  };

  guarded("simulator_oracle", [&] {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> val(0.05, 1.0);
    for (int k = 0; k < 3; ++k) {
      FrameSequence seq;
      for (int f = 0; f < 12; ++f) {
        Image img(12, 10);
        for (double& v : img.data) v = val(rng);
        seq.frames.push_back(std::move(img));
        seq.timestamps_us.push_back(f * 97);
      }
      const ContrastConfig cc = sample_threshold(rng);
      if (oracle::event_multiset(simulate_events(seq, cc).events()) != oracle::dense_simulate(seq, cc))
        return std::pair{false, std::string("sequence ") + std::to_string(k) + " differs"};
    }
    return std::pair{true, std::string("3 sequences identical")};
  });

  guarded("stack_counts", [&] {
    std::mt19937_64 rng(seed + 1);
    std::vector<Event> ev;
    for (int i = 0; i < 3000; ++i)
      ev.push_back({static_cast<float>(rng() % 40) + 0.25F, static_cast<float>(rng() % 30) + 0.5F, i,
                    static_cast<std::int8_t>(rng() % 2 ? 1 : -1)});
    const EventStream s(Geometry{41, 31}, std::move(ev));
    const EventWindow w = select_window(s, 2999, 2048);
    const EventStack st = build_event_stack(w, 10);
    const auto ref = oracle::naive_stack(w, 10);
    double worst = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(ref[i] - st.data[i]));
    return std::pair{worst <= 1e-12, "max deviation " + io::format_double(worst)};
  });

  guarded("correlation_oracle", [&] {
    std::mt19937_64 rng(seed + 2);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> pos(-4.0, 70.0);
    double worst = 0;
    for (int t = 0; t < 20; ++t) {
      FeaturePyramid p;
      p.base_stride = 4;
      for (int l = 0; l < 4; ++l) {
        const std::size_t side = 16u >> l;
        std::vector<double> v(side * side * 5);
        for (double& x : v) x = nd(rng);
        p.levels.push_back(ad::constant({side, side, 5}, v));
      }
      Descriptor q(5);
      for (double& x : q) x = nd(rng);
      const double x = pos(rng), y = pos(rng);
      const auto a = correlation_features(q, p, x, y, 3);
      const auto b = oracle::naive_correlation(q, p, x, y, 3);
      for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return std::pair{worst <= 1e-6, "max deviation " + io::format_double(worst)};
  });

  guarded("gradient_check", [&] {
    double worst = 0;
    std::string where;
    for (const auto& row : run_grad_checks(seed, inject_fault)) {
      if (row.r.max_rel_error > worst) {
        worst = row.r.max_rel_error;
        where = row.term + " " + row.r.worst_param;
      }
    }
    return std::pair{worst < 1e-3, "max_rel_err " + io::format_double(worst) + " (" + where + ")"};
  });

  guarded("metric_enumeration", [&] {
    std::mt19937_64 rng(seed + 3);
    std::uniform_real_distribution<double> u(0.0, 40.0);
    std::normal_distribution<double> nd(0.0, 1.5);
    double worst = 0;
    for (int t = 0; t < 10; ++t) {
      TrackSet gt = TrackSet::empty_like({0, 10, 20, 30, 40}, 4);
      for (std::size_t k = 0; k < gt.x.size(); ++k) {
        gt.x[k] = u(rng);
        gt.y[k] = u(rng);
        gt.visible[k] = rng() % 4 != 0;
        gt.valid[k] = rng() % 6 != 0;
      }
      TrackSet pred = gt;
      for (std::size_t k = 0; k < pred.x.size(); ++k) {
        pred.x[k] += nd(rng);
        pred.y[k] += nd(rng);
        if (rng() % 5 == 0) pred.visible[k] = !pred.visible[k];
      }
      const Geometry g{64, 48};
      const auto o = oracle::enumerate_tap(pred, gt, g, kDefaultThresholds);
      const TapReport r = tap_report(pred, gt, g);
      const auto fo = oracle::enumerate_feature_age(pred, gt, 2.0);
      const auto fr = feature_age(pred, gt, 2.0);
      worst = std::max({worst, std::abs(o.aj - r.aj), std::abs(o.delta_avg - r.delta_avg), std::abs(o.oa - r.oa),
                        std::abs(fo.fa - fr.fa), std::abs(fo.expected_fa - fr.expected_fa)});
    }
    return std::pair{worst <= 1e-12, "max deviation " + io::format_double(worst)};
  });

  if (!params_path.empty()) {
    guarded("params_checksum", [&] {
      const TrackerModel m = decode_params(io::read_text(params_path));
      return std::pair{true, std::to_string(m.named().size()) + " tensors"};
    });
  }
  std::printf("%s\n", all ? "all checks passed" : "verification failed");
  return all ? 0 : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Event-based point tracking toolkit"};
  app.require_subcommand(1);
#ifdef ETAP_VERSION
  app.set_version_flag("--version", ETAP_VERSION);
#endif
  Common common;
  common.argv.assign(argv, argv + argc);
  app.add_option("--config", common.config_file, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--set", common.sets, "override a config key (key=value), repeatable");
  app.add_option("--seed", common.seed, "seed (falls back to ETAPKIT_SEED, then the config)");
  app.add_option("--threads", common.threads, "worker threads for parallel stages")->check(CLI::PositiveNumber);

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "frames directory to an event file");
  simulate->add_option("--frames", sim.frames, "frame directory with manifest.csv")->required();
  simulate->add_option("--out", sim.out, "output .evt or .csv")->required();
  simulate->add_option("--contrast", sim.contrast, "fixed contrast threshold (default: sampled from the seed)");
  simulate->add_option("--max-log-step", sim.max_log_step, "reject frames whose log change exceeds this");

  StackArgs st;
  auto* stack = app.add_subcommand("stack", "event window to a mixed-density stack");
  stack->add_option("--events", st.events, "event file")->required();
  stack->add_option("--out", st.out, "output .bin (a .json sidecar is written next to it)")->required();
  stack->add_option("--t-end", st.t_end, "window end in us (default: last event)");
  stack->add_option("--n-events", st.n_events, "events per window (default: config n_events)");
  stack->add_option("--bins", st.bins, "channels (default: config bins)");
  stack->add_option("--width", st.width, "sensor width for CSV input");
  stack->add_option("--height", st.height, "sensor height for CSV input");
  stack->add_option("--rotate", st.rotate, "rotate by 0/90/180/270 degrees");
  stack->add_flag("--voxel", st.voxel, "voxel grid instead of the mixed-density stack");
  stack->add_flag("--invert", st.invert, "time-invert the window first");

  TrackArgs tr;
  auto* track = app.add_subcommand("track", "track query points through an event file");
  track->add_option("--events", tr.events, "event file")->required();
  track->add_option("--queries", tr.queries, "queries CSV (t_us,x,y)")->required();
  track->add_option("--schedule", tr.schedule, "schedule CSV (t_us) or start:step:count")->required();
  track->add_option("--params", tr.params, "parameter blob")->required();
  track->add_option("--out", tr.out, "output tracks CSV")->required();
  track->add_option("--n-events", tr.n_events, "events per window (default: config n_events)");
  track->add_option("--iters", tr.iters, "refinement iterations (default: model iters_eval)");
  track->add_option("--width", tr.width, "sensor width for CSV input");
  track->add_option("--height", tr.height, "sensor height for CSV input");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "TAP metrics and feature age");
  eval->add_option("--pred", ev.pred, "predicted tracks CSV")->required();
  eval->add_option("--gt", ev.gt, "ground-truth tracks CSV")->required();
  eval->add_option("--out-dir", ev.out_dir, "report directory")->required();
  eval->add_option("--width", ev.width, "image width")->required();
  eval->add_option("--height", ev.height, "image height")->required();

  std::string toy_dir;
  bool held_out = false;
  auto* toy = app.add_subcommand("toy-gen", "generate the translating-texture toy dataset");
  toy->add_option("--out-dir", toy_dir, "dataset directory")->required();
  toy->add_flag("--held-out", held_out, "use the held-out scene seeds");
  std::string frames_out;
  toy->add_option("--frames-out", frames_out, "also write the rendered frames of scene 0 here");

  SpinnerArgs sp;
  auto* spinner = app.add_subcommand("gt-spinner", "rotating pattern events and ground truth");
  spinner->add_option("--out-dir", sp.out_dir, "output directory")->required();
  spinner->add_option("--size", sp.size, "image side length");
  spinner->add_option("--lobes", sp.lobes, "pattern lobes");
  spinner->add_option("--segments", sp.segments, "duration_us:omega pairs, comma separated");
  spinner->add_option("--duration-us", sp.duration_us, "sequence length");
  spinner->add_option("--radii", sp.radii, "query radii, comma separated");
  spinner->add_option("--hist-events", sp.hist_events, "events per histogram");
  spinner->add_option("--contrast", sp.contrast, "contrast threshold");

  TrainArgs ta;
  auto* train = app.add_subcommand("train-toy", "train the toy model");
  train->add_option("--dataset", ta.dataset, "directory written by toy-gen")->required();
  train->add_option("--out-params", ta.out_params, "parameter blob")->required();
  train->add_option("--loss-csv", ta.loss_csv, "per-step losses")->required();
  train->add_option("--steps", ta.steps, "optimizer steps (default: config train_steps)");
  train->add_option("--fa-start", ta.fa_start, "first FA step, -1 never (default: config fa_start)");

  bool fault = false;
  double tolerance = 1e-3;
  auto* grad = app.add_subcommand("grad-check", "finite-difference check of the training losses");
  grad->add_flag("--inject-fault", fault, "break one backward pass on purpose");
  grad->add_option("--tolerance", tolerance, "maximum relative error");

  std::string verify_params;
  bool verify_fault = false;
  auto* verify = app.add_subcommand("verify", "run the oracle suite");
  verify->add_option("--params", verify_params, "also verify this parameter blob");
  verify->add_flag("--inject-fault", verify_fault, "break one backward pass on purpose");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitInput;
  }

  try {
    if (*simulate) return cmd_simulate(common, sim);
    if (*stack) return cmd_stack(common, st);
    if (*track) return cmd_track(common, tr);
    if (*eval) return cmd_eval(common, ev);
    if (*toy) return cmd_toy_gen(common, toy_dir, held_out, frames_out);
    if (*spinner) return cmd_gt_spinner(common, sp);
    if (*train) return cmd_train_toy(common, ta);
    if (*grad) return cmd_grad_check(common, fault, tolerance);
    if (*verify) return cmd_verify(common, verify_params, verify_fault);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.code()) {
      case ErrorCode::NonFiniteLoss:
      case ErrorCode::NonFiniteUpdate:
        return kExitRuntime;
      default:
        return kExitInput;
    }
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed JSON: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitInput;
}
