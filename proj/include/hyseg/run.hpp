#pragma once

// File-level plumbing shared by the CLI and the acceptance suite: dataset
// export/import, metrics CSV, and resumable training into an output directory.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "hyseg/checkpoint.hpp"
#include "hyseg/config.hpp"
#include "hyseg/trainer.hpp"
#include "hyseg/volume_file.hpp"

namespace hyseg {

namespace fs = std::filesystem;

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

inline std::string metrics_header(std::size_t classes) {
  std::string h = "step,lr,loss";
  for (std::size_t k = 1; k < classes; ++k) h += ",dice_c" + std::to_string(k);
  return h + "\n";
}

inline std::string metrics_row(const HistoryRow& r) {
  std::string s = std::to_string(r.step) + "," + format_number(r.lr) + "," + format_number(r.loss);
  for (double d : r.dice) s += "," + format_number(d);
  return s + "\n";
}

// ---------------------------------------------------------------------------
// Datasets on disk: vol_XXXX.svf ([C,D,H,W] f32), lab_XXXX.svf ([D,H,W] u8)
// and manifest.json listing the generator seed and index of every pair.
// ---------------------------------------------------------------------------

inline std::string volume_name(std::size_t i) {
  std::ostringstream os;
  os << "vol_" << std::setw(4) << std::setfill('0') << i << ".svf";
  return os.str();
}

inline std::string label_name(std::size_t i) {
  std::ostringstream os;
  os << "lab_" << std::setw(4) << std::setfill('0') << i << ".svf";
  return os.str();
}

inline void export_dataset(const SyntheticDataSpec& spec, std::size_t count, const fs::path& dir,
                           std::uint64_t first_index = 0) {
  ensure_dir(dir);
  Json items = Json::array();
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t index = first_index + i;
    const auto ph = generate_synthetic(spec, index);
    write_volume((dir / volume_name(i)).string(), {ph.volume_shape, ph.volume});
    write_volume((dir / label_name(i)).string(), {ph.labels.shape, ph.labels.data});
    items.push_back({{"seed", spec.seed}, {"index", index}, {"volume", volume_name(i)}, {"labels", label_name(i)}});
  }
  Json manifest = {{"data", to_json(spec)}, {"items", items}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline std::vector<Phantom> import_dataset(const fs::path& dir) {
  const auto manifest = read_json_file((dir / "manifest.json").string());
  if (!manifest.contains("items") || !manifest["items"].is_array()) {
    throw DataError((dir / "manifest.json").string() + " has no items list");
  }
  std::vector<Phantom> out;
  for (const auto& item : manifest["items"]) {
    Phantom ph;
    auto vol = read_volume((dir / item.at("volume").get<std::string>()).string());
    auto lab = read_volume((dir / item.at("labels").get<std::string>()).string());
    if (vol.dtype() != VolumeDType::kF32 || vol.shape.size() != 4) throw DataError("volume files must be f32 [C,D,H,W]");
    if (lab.dtype() != VolumeDType::kU8 || lab.shape.size() != 3) throw DataError("label files must be u8 [D,H,W]");
    if (Shape{vol.shape[1], vol.shape[2], vol.shape[3]} != lab.shape) throw DataError("volume and label extents differ");
    ph.volume_shape = vol.shape;
    ph.volume = std::get<std::vector<float>>(vol.payload);
    ph.labels.shape = lab.shape;
    ph.labels.data = std::get<std::vector<std::uint8_t>>(lab.payload);
    out.push_back(std::move(ph));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training into a directory
// ---------------------------------------------------------------------------

struct TrainRunResult {
  std::vector<HistoryRow> history;
  std::size_t final_step = 0;
  fs::path checkpoint;
};

inline fs::path checkpoint_path(const fs::path& dir) { return dir / "checkpoint.smfc"; }

// Writes effective_config.json, metrics.csv and checkpoint.smfc (+ .opt) under
// `dir`. With `resume` set, weights, optimizer state and the step counter come
// from that checkpoint and metrics rows are appended.
inline TrainRunResult train_to_directory(const RunConfig& cfg, const fs::path& dir, const std::string& resume = {},
                                         std::ostream* log = nullptr) {
  cfg.validate();
  ensure_dir(dir);
  write_text(dir / "effective_config.json", to_json(cfg).dump(2) + "\n");

  Model<float> model(cfg.model, cfg.train.seed);
  AdamWConfig oc;
  oc.weight_decay = cfg.train.weight_decay;
  AdamW<float> opt(oc);
  std::size_t start = 0;
  if (!resume.empty()) {
    start = load_parameters(resume, model);
    if (fs::exists(optimizer_path(resume))) load_optimizer(optimizer_path(resume), opt, model.parameters());
    if (start > cfg.train.total_steps) {
      throw ConfigError("checkpoint is at step " + std::to_string(start) + ", beyond train.total_steps");
    }
  }

  const fs::path metrics = dir / "metrics.csv";
  const bool append = !resume.empty() && fs::exists(metrics);
  {
    std::ofstream out(metrics, std::ios::binary | (append ? std::ios::app : std::ios::trunc));
    if (!out) throw IoError("cannot write " + metrics.string());
    if (!append) out << metrics_header(cfg.model.num_classes);
  }

  TrainRunResult result;
  result.final_step = start;
  result.checkpoint = checkpoint_path(dir);
  TrainHooks hooks;
  hooks.on_eval = [&](const HistoryRow& row) {
    std::ofstream out(metrics, std::ios::binary | std::ios::app);
    out << metrics_row(row);
    if (!out) throw IoError("write failed for " + metrics.string());
    if (log) {
      *log << "step " << row.step << " lr " << format_number(row.lr) << " loss " << format_number(row.loss);
      for (std::size_t k = 0; k < row.dice.size(); ++k) *log << " dice_c" << k + 1 << " " << format_number(row.dice[k]);
      *log << std::endl;
    }
  };
  hooks.on_checkpoint = [&](std::size_t done) {
    save_checkpoint(result.checkpoint.string(), model, done);
    save_optimizer(optimizer_path(result.checkpoint.string()), opt, model.parameters());
    result.final_step = done;
  };
  result.history = train(model, opt, cfg.train, cfg.data, start, hooks);
  if (start == cfg.train.total_steps) hooks.on_checkpoint(start);
  return result;
}

}  // namespace hyseg
