// pccnn: mask generation, training, sampling, ranking, evaluation,
// probability maps and the HTTP service.
//
// Exit codes: 0 success, 1 validation or usage error, 2 runtime fault.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pccnn/pccnn.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pccnn;

namespace {

std::vector<std::string> g_argv;

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFault("cannot write " + path.string());
  out << text;
  if (!out) throw RuntimeFault("write failed: " + path.string());
}

/// Every run records its arguments, seed and inputs next to its outputs.
void write_manifest(const fs::path& path, const std::string& command, json details) {
  details["command"] = command;
  details["argv"] = g_argv;
  details["threads"] = thread_count();
  write_text(path, details.dump(2) + "\n");
}

struct LoadedModel {
  Model<float> model;
  std::string sha256;
  json train_config;
};

LoadedModel open_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("checkpoint not found: " + path.string());
  auto ck = load_checkpoint(path);
  return {Model<float>(ck.config, std::move(ck.params)), sha256_file(path), ck.train_config};
}

/// IDX image file or dataset directory, conformed to the model signature.
Dataset open_dataset(const fs::path& path, const Signature& sig, std::size_t limit = 0) {
  if (!fs::exists(path)) throw ValidationError("dataset not found: " + path.string());
  Dataset ds = fs::is_directory(path) ? load_dataset_dir(path) : load_idx(path);
  if (limit > 0 && ds.size() > limit) {
    ds.images.resize(limit);
    if (!ds.labels.empty()) ds.labels.resize(limit);
  }
  return conform_dataset(ds, sig);
}

MaskDataset open_masks(const fs::path& path, const Signature& sig) {
  if (!fs::exists(path)) throw ValidationError("mask file not found: " + path.string());
  auto masks = load_mask_dataset(path);
  if (masks.height != sig.height || masks.width != sig.width) {
    throw ValidationError(path.string() + ": masks are " + std::to_string(masks.height) + "x" +
                          std::to_string(masks.width) + " but the model is " + sig.to_string());
  }
  return masks;
}

/// Blob masks for evaluation runs when no mask file is given.
std::vector<Mask> evaluation_masks(const std::optional<fs::path>& path, const Signature& sig, std::size_t count,
                                   std::uint64_t seed) {
  if (path) return open_masks(*path, sig).masks;
  std::vector<Mask> out;
  const std::uint64_t root = split_seed(seed, 0x6d61736b);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_mask(sig.height, sig.width, {}, split_seed(root, i)));
  return out;
}

// ---------------------------------------------------------------------------
// Shared image/mask selection for sample and probmap.

struct InputOptions {
  std::string image;
  std::string data;
  std::size_t index = 0;
  std::string mask;
  std::size_t mask_index = 0;
  std::string mask_spec;
  std::uint64_t mask_seed = 0;
  bool invert = false;
};

void add_input_options(CLI::App* cmd, InputOptions& o) {
  auto* image = cmd->add_option("--image", o.image, "Source image (PGM/PNG)");
  auto* data = cmd->add_option("--data", o.data, "Dataset (IDX file or directory) to take the source from");
  image->excludes(data);
  cmd->add_option("--index", o.index, "Image index within --data")->needs(data);
  auto* mask = cmd->add_option("--mask", o.mask, "Mask file (.pcmk, or an image where nonzero = visible)");
  auto* spec = cmd->add_option("--mask-spec", o.mask_spec, "Synthesized mask: top, bottom, left, right or blob")
                   ->check(CLI::IsMember({"top", "bottom", "left", "right", "blob"}));
  mask->excludes(spec);
  cmd->add_option("--mask-index", o.mask_index, "Mask index within a .pcmk file");
  cmd->add_option("--mask-seed", o.mask_seed, "Seed for --mask-spec blob");
  cmd->add_flag("--invert", o.invert, "Swap visible and hidden pixels of the mask");
}

Image load_source(const InputOptions& o, const Signature& sig) {
  if (!o.image.empty()) {
    if (!fs::exists(o.image)) throw ValidationError("image not found: " + o.image);
    return conform_image(read_image(o.image, 256), sig);
  }
  if (o.data.empty()) throw ValidationError("one of --image or --data is required");
  const Dataset ds = open_dataset(o.data, sig, o.index + 1);
  if (o.index >= ds.size()) {
    throw ValidationError("--index " + std::to_string(o.index) + " out of range for " + std::to_string(ds.size()) +
                          " images");
  }
  return ds.images[o.index];
}

Mask load_mask(const InputOptions& o, const Signature& sig) {
  Mask m;
  if (!o.mask.empty()) {
    const fs::path p = o.mask;
    if (p.extension() == ".pcmk") {
      const auto ds = open_masks(p, sig);
      if (o.mask_index >= ds.size()) throw ValidationError("--mask-index out of range for " + p.string());
      m = ds.masks[o.mask_index];
    } else {
      if (!fs::exists(p)) throw ValidationError("mask not found: " + p.string());
      const Image img = read_image(p, 256);
      if (img.height() != sig.height || img.width() != sig.width) {
        throw ValidationError(p.string() + ": mask is " + img.signature().to_string() + ", model is " + sig.to_string());
      }
      m = Mask(sig.height, sig.width);
      for (int y = 0; y < sig.height; ++y)
        for (int x = 0; x < sig.width; ++x) m.set(y, x, img.at(y, x, 0) ? 1 : 0);
    }
  } else if (o.mask_spec == "blob") {
    m = generate_mask(sig.height, sig.width, {}, o.mask_seed);
  } else if (!o.mask_spec.empty()) {
    const RegularMask kind = o.mask_spec == "top"      ? RegularMask::top
                             : o.mask_spec == "bottom" ? RegularMask::bottom
                             : o.mask_spec == "left"   ? RegularMask::left
                                                       : RegularMask::right;
    m = regular_mask(sig.height, sig.width, kind);
  } else {
    throw ValidationError("one of --mask or --mask-spec is required");
  }
  return o.invert ? m.inverted() : m;
}

Image mask_image(const Mask& m) {
  Image img(m.height(), m.width(), 1, 2);
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) img.set(y, x, 0, m.at(y, x));
  return img;
}

json input_json(const InputOptions& o) {
  return {{"image", o.image}, {"data", o.data},           {"index", o.index},         {"mask", o.mask},
          {"mask_index", o.mask_index}, {"mask_spec", o.mask_spec}, {"mask_seed", o.mask_seed}, {"invert", o.invert}};
}

std::string numbered(const char* stem, std::size_t i, int width) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s-%0*zu", stem, width, i);
  return buf;
}

// ---------------------------------------------------------------------------
// Commands.

struct GenMasksOptions {
  std::size_t count = 0;
  int height = 28;
  int width = 28;
  MaskGenParams params;
  std::uint64_t seed = 0;
  std::string out;
  bool invert = false;
};

int run_gen_masks(const GenMasksOptions& o) {
  if (o.count < 1) throw ValidationError("--count must be >= 1");
  if (o.height < 1 || o.width < 1 || o.height > 65535 || o.width > 65535) {
    throw ValidationError("--height and --width must be in [1, 65535]");
  }
  o.params.validate();
  generate_mask_dataset(o.count, o.height, o.width, o.params, o.seed, o.out, o.invert);
  write_manifest(o.out + ".manifest.json", "gen-masks",
                 {{"seed", o.seed},
                  {"config",
                   {{"count", o.count},
                    {"height", o.height},
                    {"width", o.width},
                    {"max_blobs", o.params.max_num_blobs},
                    {"iter_min", o.params.iter_min},
                    {"iter_max", o.params.iter_max},
                    {"invert", o.invert}}},
                  {"outputs", {{"masks", o.out}, {"sha256", sha256_file(o.out)}}}});
  std::cout << "wrote " << o.count << " masks to " << o.out << "\n";
  return 0;
}

struct TrainOptions {
  std::string data;
  std::string masks;
  std::string preset = "mnist";
  std::size_t limit = 0;
  TrainConfig config;
  std::string out;
  std::string log;
};

int run_train(TrainOptions o) {
  const ArchitectureConfig arch = ArchitectureConfig::from_preset(o.preset);
  o.config.mask_path = o.masks;
  o.config.validate();
  const Dataset data = open_dataset(o.data, arch.signature, o.limit);
  const MaskDataset masks = open_masks(o.masks, arch.signature);
  if (o.log.empty()) o.log = o.out + ".log.jsonl";
  if (fs::path(o.log).has_parent_path()) fs::create_directories(fs::path(o.log).parent_path());
  std::ofstream log(o.log);
  if (!log) throw RuntimeFault("cannot write " + o.log);

  Model<float> model(arch, o.config.seed);
  std::cout << "training " << arch.name << " (" << parameter_count(arch) << " parameters) on " << data.size()
            << " images\n";
  const auto records = train(model, data, masks, o.config, [&](const TrainRecord& r) {
    log << json(r).dump() << "\n" << std::flush;
    std::cout << "epoch " << r.epoch << ": joint " << r.joint << " nats (" << r.bits_per_dim << " bits/dim), aux "
              << r.aux << ", " << r.seconds << " s\n";
  });
  save_checkpoint(o.out, arch, model.params(), o.config);
  json recs = records;
  write_manifest(o.out + ".manifest.json", "train",
                 {{"seed", o.config.seed},
                  {"config", {{"architecture", arch}, {"train", o.config}, {"preset", o.preset}, {"limit", o.limit}}},
                  {"inputs",
                   {{"data", o.data}, {"data_images", data.size()}, {"masks", o.masks}, {"masks_sha256", sha256_file(o.masks)}}},
                  {"outputs", {{"checkpoint", o.out}, {"checkpoint_sha256", sha256_file(o.out)}, {"log", o.log}}},
                  {"records", recs}});
  std::cout << "wrote " << o.out << "\n";
  return 0;
}

struct SampleOptions {
  std::string ckpt;
  InputOptions input;
  int num = 8;
  std::uint64_t seed = 0;
  double temperature = 1.0;
  std::string out_dir;
  bool score_source = false;
};

int run_sample(const SampleOptions& o) {
  if (o.num < 1) throw ValidationError("--num must be >= 1");
  const auto loaded = open_checkpoint(o.ckpt);
  const Signature& sig = loaded.model.signature();
  const Image source = load_source(o.input, sig);
  const Mask mask = load_mask(o.input, sig);
  const auto results = sample_inpaintings(loaded.model, source, mask, sample_seeds(o.seed, static_cast<std::size_t>(o.num)),
                                          o.temperature);
  const auto ranking = o.score_source ? rank_inpaintings(loaded.model, results, source, source) : rank_inpaintings(results);

  const fs::path dir = o.out_dir;
  fs::create_directories(dir);
  write_image(dir / "source", source);
  write_image(dir / "mask", mask_image(mask));
  json order = json::array();
  for (std::size_t r = 0; r < ranking.order.size(); ++r) {
    const auto& s = results[ranking.order[r]];
    const std::string stem = numbered("sample", r + 1, 2);
    const fs::path file = write_image(dir / stem, s.image);
    json side = s.sidecar();
    side["rank"] = r + 1;
    side["file"] = file.filename().string();
    write_text(dir / (stem + ".json"), side.dump(2) + "\n");
    order.push_back(side);
  }
  json rank_json{{"samples", order}};
  if (ranking.ground_truth_rank) {
    rank_json["source_rank"] = *ranking.ground_truth_rank;
    rank_json["source_log_likelihood"] = *ranking.ground_truth_log_likelihood;
  }
  write_text(dir / "ranking.json", rank_json.dump(2) + "\n");
  write_manifest(dir / "manifest.json", "sample",
                 {{"seed", o.seed},
                  {"config",
                   {{"num", o.num}, {"temperature", o.temperature}, {"input", input_json(o.input)}, {"score_source", o.score_source}}},
                  {"checkpoint", o.ckpt},
                  {"checkpoint_sha256", loaded.sha256},
                  {"mask_digest", mask_digest(mask)}});
  std::cout << "wrote " << results.size() << " samples to " << dir.string() << "\n";
  return 0;
}

struct StudyOptions {
  std::string ckpt;
  std::string data;
  std::string masks;
  std::size_t count = 100;
  int samples = 8;
  std::uint64_t seed = 0;
  std::string out;
  std::string csv;
};

struct StudyInputs {
  LoadedModel loaded;
  Dataset data;
  std::vector<Mask> masks;
};

StudyInputs open_study(const StudyOptions& o) {
  if (o.count < 1) throw ValidationError("--count must be >= 1");
  if (o.samples < 1) throw ValidationError("--samples must be >= 1");
  auto loaded = open_checkpoint(o.ckpt);
  const Signature sig = loaded.model.signature();
  Dataset data = open_dataset(o.data, sig, o.count);
  auto masks = evaluation_masks(o.masks.empty() ? std::nullopt : std::optional<fs::path>(o.masks), sig, data.size(), o.seed);
  return {std::move(loaded), std::move(data), std::move(masks)};
}

json study_manifest(const StudyOptions& o, const StudyInputs& in) {
  return {{"seed", o.seed},
          {"config", {{"count", o.count}, {"samples", o.samples}, {"data", o.data}, {"masks", o.masks}}},
          {"images", in.data.size()},
          {"checkpoint", o.ckpt},
          {"checkpoint_sha256", in.loaded.sha256}};
}

int run_rank(const StudyOptions& o) {
  const auto in = open_study(o);
  const auto study = rank_study(in.loaded.model, in.data.images, in.masks, o.samples, o.seed);
  std::cout << "mean ground-truth rank over " << study.ranks.size() << " images: " << study.mean_rank << " (chance "
            << (o.samples + 2) / 2.0 << ")\n";
  json manifest = study_manifest(o, in);
  manifest["mean_rank"] = study.mean_rank;
  manifest["ranks"] = study.ranks;
  if (!o.out.empty()) write_text(o.out, json{{"mean_rank", study.mean_rank}, {"ranks", study.ranks}}.dump(2) + "\n");
  write_manifest((o.out.empty() ? fs::path("rank") : fs::path(o.out)).string() + ".manifest.json", "rank", manifest);
  return 0;
}

int run_eval(const StudyOptions& o) {
  const auto in = open_study(o);
  const auto report = evaluate(model_sampler(in.loaded.model), in.data.images, in.masks, o.samples, o.seed);
  const json j = report.to_json();
  std::cout << "l1 " << report.mean.l1 << "% (best " << report.best.l1 << "%), l2 " << report.mean.l2 << "% (best "
            << report.best.l2 << "%), psnr " << report.mean.psnr << " dB (best " << report.best.psnr << " dB)\n";
  if (!o.out.empty()) write_text(o.out, j.dump(2) + "\n");
  if (!o.csv.empty()) write_text(o.csv, report.to_csv());
  json manifest = study_manifest(o, in);
  manifest["aggregate"] = j["aggregate"];
  write_manifest((o.out.empty() ? fs::path("eval") : fs::path(o.out)).string() + ".manifest.json", "eval", manifest);
  return 0;
}

struct ProbmapOptions {
  std::string ckpt;
  InputOptions input;
  std::uint64_t seed = 0;
  int stride = 1;
  std::string out_dir;
};

Image map_image(const ProbabilityMap& map) {
  Image img(map.height, map.width, 1, 256);
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x)
      img.set(y, x, 0, static_cast<std::uint8_t>(std::lround(std::clamp(map.at(y, x), 0.0, 1.0) * 255.0)));
  return img;
}

int run_probmap(const ProbmapOptions& o) {
  if (o.stride < 1) throw ValidationError("--stride must be >= 1");
  const auto loaded = open_checkpoint(o.ckpt);
  const Signature& sig = loaded.model.signature();
  if (sig.levels != 2 || sig.channels != 1) {
    throw ValidationError("probability maps need a binary checkpoint, got " + sig.to_string());
  }
  const Image source = load_source(o.input, sig);
  const Mask mask = load_mask(o.input, sig);
  SampleResult done;
  const auto frames = probability_progression(loaded.model, source, mask, o.seed, o.stride, &done);
  const fs::path dir = o.out_dir;
  fs::create_directories(dir);
  json entropy = json::array();
  for (std::size_t i = 0; i < frames.size(); ++i) {
    write_pgm(dir / (numbered("frame", i, 5) + ".pgm"), map_image(frames[i]));
    entropy.push_back(map_entropy(frames[i], mask));
  }
  write_image(dir / "sample", done.image);
  write_text(dir / "sample.json", done.sidecar().dump(2) + "\n");
  write_manifest(dir / "manifest.json", "probmap",
                 {{"seed", o.seed},
                  {"config", {{"stride", o.stride}, {"input", input_json(o.input)}}},
                  {"checkpoint", o.ckpt},
                  {"checkpoint_sha256", loaded.sha256},
                  {"frames", frames.size()},
                  {"mean_entropy", entropy}});
  std::cout << "wrote " << frames.size() << " frames to " << dir.string() << "\n";
  return 0;
}

struct ServeOptions {
  std::string ckpt;
  std::string host = "127.0.0.1";
  int port = 8080;
  ServiceOptions service;
};

int run_serve(const ServeOptions& o) {
  const auto loaded = open_checkpoint(o.ckpt);
  auto model = std::make_shared<const Model<float>>(loaded.model);
  InpaintService service(model, model_id_for(o.ckpt), o.service);
  httplib::Server server;
  service.mount(server);
  std::cout << "serving " << model_id_for(o.ckpt) << " on http://" << o.host << ":" << o.port << "\n" << std::flush;
  if (!server.listen(o.host, o.port)) throw RuntimeFault("cannot listen on " + o.host + ":" + std::to_string(o.port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  g_argv.assign(argv, argv + argc);
  CLI::App app{"Inpainting with a conditioned PixelCNN"};
  app.require_subcommand(1);

  GenMasksOptions gm;
  auto* gen = app.add_subcommand("gen-masks", "Generate a blob-mask dataset");
  gen->add_option("--count", gm.count, "Number of masks")->required();
  gen->add_option("--height", gm.height, "Mask height");
  gen->add_option("--width", gm.width, "Mask width");
  gen->add_option("--max-blobs", gm.params.max_num_blobs, "Maximum blobs per mask");
  gen->add_option("--iter-min", gm.params.iter_min, "Minimum expansion iterations");
  gen->add_option("--iter-max", gm.params.iter_max, "Maximum expansion iterations");
  gen->add_option("--seed", gm.seed, "Seed");
  gen->add_option("--out", gm.out, "Output .pcmk file")->required();
  gen->add_flag("--invert", gm.invert, "Swap visible and hidden pixels");

  TrainOptions tr;
  auto* trn = app.add_subcommand("train", "Train a model");
  trn->add_option("--data", tr.data, "Training images (IDX file or dataset directory)")->required();
  trn->add_option("--masks", tr.masks, "Mask dataset (.pcmk)")->required();
  trn->add_option("--preset", tr.preset, "Architecture preset")->check(CLI::IsMember({"mnist", "mnist-small", "celeba"}));
  trn->add_option("--limit", tr.limit, "Use only the first N images (0 = all)");
  trn->add_option("--epochs", tr.config.epochs, "Epochs");
  trn->add_option("--lr", tr.config.learning_rate, "Adam learning rate");
  trn->add_option("--alpha", tr.config.alpha, "Weight of the auxiliary loss");
  trn->add_option("--batch", tr.config.batch_size, "Batch size");
  trn->add_option("--micro-batch", tr.config.micro_batch, "Images per forward/backward pass");
  trn->add_option("--seed", tr.config.seed, "Seed");
  trn->add_option("--checkpoint-every", tr.config.checkpoint_every, "Checkpoint cadence in epochs (0 = off)");
  trn->add_option("--checkpoint-dir", tr.config.checkpoint_dir, "Directory for periodic checkpoints");
  trn->add_flag("--aux-all-pixels", tr.config.aux_all_pixels, "Auxiliary loss over all pixels");
  trn->add_option("--out", tr.out, "Output checkpoint")->required();
  trn->add_option("--log", tr.log, "JSON-lines log (default: <out>.log.jsonl)");

  SampleOptions sm;
  auto* smp = app.add_subcommand("sample", "Draw inpaintings of one image");
  smp->add_option("--ckpt", sm.ckpt, "Checkpoint")->required();
  add_input_options(smp, sm.input);
  smp->add_option("--num", sm.num, "Number of samples");
  smp->add_option("--seed", sm.seed, "Seed");
  smp->add_option("--temperature", sm.temperature, "Sampling temperature");
  smp->add_option("--out-dir", sm.out_dir, "Output directory")->required();
  smp->add_flag("--score-source", sm.score_source, "Also rank the source image among the samples");

  StudyOptions rk;
  auto* rnk = app.add_subcommand("rank", "Ground-truth rank among sampled inpaintings");
  StudyOptions ev;
  auto* evl = app.add_subcommand("eval", "l1 / l2 / pSNR of sampled inpaintings");
  for (auto [cmd, o] : {std::pair{rnk, &rk}, std::pair{evl, &ev}}) {
    cmd->add_option("--ckpt", o->ckpt, "Checkpoint")->required();
    cmd->add_option("--data", o->data, "Images (IDX file or dataset directory)")->required();
    cmd->add_option("--masks", o->masks, "Mask dataset (.pcmk); default: blob masks from --seed");
    cmd->add_option("--count", o->count, "Number of images");
    cmd->add_option("--samples", o->samples, "Samples per image");
    cmd->add_option("--seed", o->seed, "Seed");
    cmd->add_option("--out", o->out, "JSON report");
  }
  evl->add_option("--csv", ev.csv, "Per-image CSV");

  ProbmapOptions pm;
  auto* prb = app.add_subcommand("probmap", "Pixel-probability maps along one sampling trajectory");
  prb->add_option("--ckpt", pm.ckpt, "Checkpoint")->required();
  add_input_options(prb, pm.input);
  prb->add_option("--seed", pm.seed, "Seed");
  prb->add_option("--stride", pm.stride, "Emit a frame every N sampled pixels");
  prb->add_option("--out-dir", pm.out_dir, "Output directory")->required();

  ServeOptions sv;
  auto* srv = app.add_subcommand("serve", "HTTP inference service");
  srv->add_option("--ckpt", sv.ckpt, "Checkpoint")->required();
  srv->add_option("--host", sv.host, "Bind address");
  srv->add_option("--port", sv.port, "Port");
  srv->add_option("--max-queue", sv.service.max_queue, "Requests admitted at once");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) return run_gen_masks(gm);
    if (*trn) return run_train(tr);
    if (*smp) return run_sample(sm);
    if (*rnk) return run_rank(rk);
    if (*evl) return run_eval(ev);
    if (*prb) return run_probmap(pm);
    if (*srv) return run_serve(sv);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "fault: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
