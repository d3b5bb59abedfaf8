// Synthetic classification and detection datasets with known ground-truth
// signal regions, plus the on-disk dataset formats (JSON-lines manifest and
// MGIM f32 rasters).
//
// Every image is a noisy background with one class-specific motif rendered at
// a patch-aligned location, so the "correct" mask is a well-defined patch set.
// Generation is a pure function of spec + seed; every pixel is quantized to
// f32 so the f32-on-disk round trip is bit-exact.
#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mgvit/common.hpp"
#include "mgvit/detection.hpp"
#include "mgvit/tensor.hpp"

namespace mgvit::synth {

enum class TaskKind { classification, detection };

inline const char* to_string(TaskKind k) {
  return k == TaskKind::classification ? "classification" : "detection";
}

inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "classification") return TaskKind::classification;
  if (s == "detection") return TaskKind::detection;
  throw InputError("unknown task kind: " + s);
}

struct MotifSpec {
  int shape_id = 0;                       // 0..7, see render_shape
  std::array<double, 3> color = {0.9, 0.2, 0.2};
};

struct SyntheticSpec {
  std::size_t image_h = 32;
  std::size_t image_w = 32;
  std::size_t channels = 3;
  std::size_t patch = 4;
  std::size_t num_base_classes = 4;
  std::size_t num_novel_classes = 4;
  std::size_t region_patches_h = 2;       // signal region size, in patches
  std::size_t region_patches_w = 2;
  double noise_sigma = 0.1;
  std::size_t samples_per_class = 48;
  std::uint64_t seed = 1;
  std::vector<MotifSpec> class_motifs;    // optional override, size = total classes

  // intra-class variation
  double color_jitter = 0.1;
  std::size_t modes_per_class = 1;        // distinct color sub-modes per class

  // detection-specific
  std::size_t min_instances = 1;
  std::size_t max_instances = 3;
  double novel_scale = 1.5;               // region scale of the shifted novel domain

  std::size_t grid_h() const { return image_h / patch; }
  std::size_t grid_w() const { return image_w / patch; }
  std::size_t total_classes() const { return num_base_classes + num_novel_classes; }

  void validate() const {
    if (patch == 0 || image_h % patch != 0 || image_w % patch != 0) {
      throw InputError("image not divisible by patch size");
    }
    if (region_patches_h == 0 || region_patches_w == 0 || region_patches_h > grid_h() ||
        region_patches_w > grid_w()) {
      throw InputError("signal region " + std::to_string(region_patches_h) + "x" +
                       std::to_string(region_patches_w) + " patches does not fit grid " +
                       std::to_string(grid_h()) + "x" + std::to_string(grid_w()));
    }
    if (channels == 0 || channels > 3) throw InputError("channels must be 1..3");
    if (noise_sigma < 0.0) throw InputError("noise sigma must be >= 0");
    if (num_base_classes == 0 || samples_per_class == 0) {
      throw InputError("need at least one base class and one sample per class");
    }
    if (max_instances < min_instances) throw InputError("max_instances < min_instances");
  }
};

struct SampleRecord {
  int id = -1;
  Tensor image;                    // channels x H x W, values in [0,1]
  int label = -1;
  std::vector<int> gt_patches;     // patch indices containing motif pixels
  std::vector<det::Box> boxes;     // detection only
  std::vector<int> box_labels;
};

struct Dataset {
  TaskKind kind = TaskKind::classification;
  std::size_t channels = 3, height = 32, width = 32, patch = 4;
  std::vector<int> base_classes, novel_classes;
  std::vector<SampleRecord> samples;  // sample id == index
  SyntheticSpec spec;

  const SampleRecord& by_id(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= samples.size()) {
      throw InputError("unknown sample id " + std::to_string(id));
    }
    return samples[static_cast<std::size_t>(id)];
  }

  std::vector<int> ids_of_class(int cls) const {
    std::vector<int> out;
    for (const auto& s : samples) {
      if (s.label == cls) out.push_back(s.id);
    }
    return out;
  }

  bool is_novel_class(int cls) const {
    return std::find(novel_classes.begin(), novel_classes.end(), cls) != novel_classes.end();
  }

  std::vector<int> base_ids() const {
    std::vector<int> out;
    for (const auto& s : samples) {
      if (!is_novel_class(s.label)) out.push_back(s.id);
    }
    return out;
  }

  std::vector<int> novel_ids() const {
    std::vector<int> out;
    for (const auto& s : samples) {
      if (is_novel_class(s.label)) out.push_back(s.id);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Motif rendering.
// ---------------------------------------------------------------------------

// True where the shape covers normalized region coordinates (u, v) in [0,1).
inline bool shape_covers(int shape_id, double u, double v) {
  const double du = u - 0.5, dv = v - 0.5;
  const double r = std::sqrt(du * du + dv * dv);
  switch (shape_id % 8) {
    case 0: return true;                                     // filled square
    case 1: return r <= 0.5;                                 // disc
    case 2: return std::fabs(du) < 0.18 || std::fabs(dv) < 0.18;  // plus
    case 3: return std::fmod(u + v, 0.5) < 0.25;             // diagonal stripes
    case 4: return v >= u;                                   // lower triangle
    case 5: return r <= 0.5 && r >= 0.28;                    // ring
    case 6: return (static_cast<int>(u * 4) + static_cast<int>(v * 4)) % 2 == 0;  // checker
    case 7: return std::fabs(du - dv) < 0.16 || std::fabs(du + dv) < 0.16;        // X
  }
  return false;
}

inline double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

inline std::array<double, 3> default_color(std::size_t index) {
  static const std::array<std::array<double, 3>, 8> palette = {{
      {0.90, 0.15, 0.15},
      {0.15, 0.85, 0.20},
      {0.15, 0.25, 0.90},
      {0.90, 0.80, 0.10},
      {0.85, 0.15, 0.85},
      {0.10, 0.85, 0.85},
      {0.95, 0.55, 0.10},
      {0.55, 0.30, 0.85},
  }};
  return palette[index % palette.size()];
}

inline MotifSpec motif_for_class(const SyntheticSpec& spec, std::size_t cls) {
  if (!spec.class_motifs.empty()) {
    if (cls >= spec.class_motifs.size()) throw InputError("class_motifs too short");
    return spec.class_motifs[cls];
  }
  MotifSpec m;
  m.shape_id = static_cast<int>(cls % 8);
  m.color = default_color(cls);
  return m;
}

// Sub-mode colors rotate the base color across channels and flip intensity,
// giving well-separated intra-class modes.
inline std::array<double, 3> mode_color(const std::array<double, 3>& base, std::size_t mode) {
  std::array<double, 3> c;
  for (std::size_t i = 0; i < 3; ++i) c[i] = base[(i + mode) % 3];
  if (mode >= 3) {
    for (double& v : c) v = std::clamp(1.1 - v, 0.05, 0.95);
  }
  return c;
}

struct RenderedMotif {
  std::vector<int> gt_patches;
  det::Box pixel_bbox;  // normalized bbox of the actually rendered pixels
  bool any_pixel = false;
};

// Renders one motif into the image at a patch-aligned region. Records the
// patches containing motif pixels and the exact pixel bounding box.
inline RenderedMotif render_motif(Tensor& image, const SyntheticSpec& spec, int shape_id,
                                  const std::array<double, 3>& color, std::size_t patch_r,
                                  std::size_t patch_c, std::size_t region_ph,
                                  std::size_t region_pw) {
  const std::size_t p = spec.patch, w = spec.image_w, h = spec.image_h;
  const std::size_t y0 = patch_r * p, x0 = patch_c * p;
  const std::size_t rh = region_ph * p, rw = region_pw * p;
  std::set<int> patches;
  std::size_t min_x = w, max_x = 0, min_y = h, max_y = 0;
  RenderedMotif out;
  for (std::size_t dy = 0; dy < rh; ++dy) {
    for (std::size_t dx = 0; dx < rw; ++dx) {
      const double u = (static_cast<double>(dx) + 0.5) / static_cast<double>(rw);
      const double v = (static_cast<double>(dy) + 0.5) / static_cast<double>(rh);
      if (!shape_covers(shape_id, u, v)) continue;
      const std::size_t y = y0 + dy, x = x0 + dx;
      for (std::size_t ch = 0; ch < spec.channels; ++ch) {
        image((ch * h + y) * w + x) = quantize_f32(color[ch]);
      }
      patches.insert(static_cast<int>((y / p) * spec.grid_w() + x / p));
      min_x = std::min(min_x, x);
      max_x = std::max(max_x, x);
      min_y = std::min(min_y, y);
      max_y = std::max(max_y, y);
      out.any_pixel = true;
    }
  }
  out.gt_patches.assign(patches.begin(), patches.end());
  if (out.any_pixel) {
    out.pixel_bbox.cx = (static_cast<double>(min_x + max_x) + 1.0) / 2.0 / static_cast<double>(w);
    out.pixel_bbox.cy = (static_cast<double>(min_y + max_y) + 1.0) / 2.0 / static_cast<double>(h);
    out.pixel_bbox.w = static_cast<double>(max_x - min_x + 1) / static_cast<double>(w);
    out.pixel_bbox.h = static_cast<double>(max_y - min_y + 1) / static_cast<double>(h);
  }
  return out;
}

inline Tensor noise_background(const SyntheticSpec& spec, Rng& rng) {
  Tensor image = Tensor::zeros({spec.channels, spec.image_h, spec.image_w});
  for (std::size_t i = 0; i < image.size(); ++i) {
    image(i) = quantize_f32(std::clamp(rng.normal(0.5, spec.noise_sigma), 0.0, 1.0));
  }
  return image;
}

// ---------------------------------------------------------------------------
// Generators.
// ---------------------------------------------------------------------------

// Base classes come first in the label space, novel classes after; the two
// label sets are disjoint by construction.
inline Dataset generate_classification(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.kind = TaskKind::classification;
  ds.spec = spec;
  ds.channels = spec.channels;
  ds.height = spec.image_h;
  ds.width = spec.image_w;
  ds.patch = spec.patch;
  for (std::size_t c = 0; c < spec.num_base_classes; ++c) ds.base_classes.push_back(static_cast<int>(c));
  for (std::size_t c = 0; c < spec.num_novel_classes; ++c) {
    ds.novel_classes.push_back(static_cast<int>(spec.num_base_classes + c));
  }
  int next_id = 0;
  for (std::size_t cls = 0; cls < spec.total_classes(); ++cls) {
    const MotifSpec motif = motif_for_class(spec, cls);
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      Rng rng(mix_seed(spec.seed, tag_hash("cls-sample"), static_cast<std::uint64_t>(next_id)));
      SampleRecord rec;
      rec.id = next_id++;
      rec.label = static_cast<int>(cls);
      rec.image = noise_background(spec, rng);
      const std::size_t pr = rng.uniform_int(spec.grid_h() - spec.region_patches_h + 1);
      const std::size_t pc = rng.uniform_int(spec.grid_w() - spec.region_patches_w + 1);
      std::array<double, 3> color = motif.color;
      if (spec.modes_per_class > 1) {
        color = mode_color(color, rng.uniform_int(spec.modes_per_class));
      }
      for (double& v : color) {
        v = std::clamp(v + rng.uniform(-spec.color_jitter, spec.color_jitter), 0.02, 0.98);
      }
      const RenderedMotif rendered = render_motif(rec.image, spec, motif.shape_id, color, pr, pc,
                                                  spec.region_patches_h, spec.region_patches_w);
      rec.gt_patches = rendered.gt_patches;
      ds.samples.push_back(std::move(rec));
    }
  }
  return ds;
}

// Detection: base label 0 with the standard motif, novel label 1 rendered with
// a shifted color and scale (the season-gap analog). 1..max instances per
// image, non-overlapping, boxes equal to the rendered pixel bounding boxes.
inline Dataset generate_detection(const SyntheticSpec& spec) {
  SyntheticSpec local = spec;
  local.num_base_classes = 1;
  local.num_novel_classes = 1;
  local.validate();
  Dataset ds;
  ds.kind = TaskKind::detection;
  ds.spec = local;
  ds.channels = local.channels;
  ds.height = local.image_h;
  ds.width = local.image_w;
  ds.patch = local.patch;
  ds.base_classes = {0};
  ds.novel_classes = {1};

  const MotifSpec base_motif =
      local.class_motifs.empty() ? MotifSpec{1, {0.90, 0.20, 0.15}} : local.class_motifs[0];
  MotifSpec novel_motif = base_motif;
  if (local.class_motifs.size() > 1) {
    novel_motif = local.class_motifs[1];
  } else {
    novel_motif.color = {0.95, 0.65, 0.15};  // later-season hue
  }

  int next_id = 0;
  for (int domain = 0; domain < 2; ++domain) {
    const bool novel = domain == 1;
    const MotifSpec motif = novel ? novel_motif : base_motif;
    std::size_t region_h = local.region_patches_h, region_w = local.region_patches_w;
    if (novel) {
      region_h = std::min(local.grid_h(), static_cast<std::size_t>(std::lround(
                                              static_cast<double>(region_h) * local.novel_scale)));
      region_w = std::min(local.grid_w(), static_cast<std::size_t>(std::lround(
                                              static_cast<double>(region_w) * local.novel_scale)));
      region_h = std::max<std::size_t>(1, region_h);
      region_w = std::max<std::size_t>(1, region_w);
    }
    for (std::size_t s = 0; s < local.samples_per_class; ++s) {
      Rng rng(mix_seed(local.seed, tag_hash(novel ? "det-novel" : "det-base"),
                       static_cast<std::uint64_t>(s)));
      SampleRecord rec;
      rec.id = next_id++;
      rec.label = novel ? 1 : 0;
      rec.image = noise_background(local, rng);
      const std::size_t want =
          local.min_instances + rng.uniform_int(local.max_instances - local.min_instances + 1);
      std::vector<std::pair<std::size_t, std::size_t>> placed;
      std::set<int> all_patches;
      for (std::size_t inst = 0; inst < want; ++inst) {
        bool ok = false;
        std::size_t pr = 0, pc = 0;
        for (int attempt = 0; attempt < 20 && !ok; ++attempt) {
          pr = rng.uniform_int(local.grid_h() - region_h + 1);
          pc = rng.uniform_int(local.grid_w() - region_w + 1);
          ok = true;
          for (const auto& [qr, qc] : placed) {
            const bool overlap_r = pr < qr + region_h && qr < pr + region_h;
            const bool overlap_c = pc < qc + region_w && qc < pc + region_w;
            if (overlap_r && overlap_c) {
              ok = false;
              break;
            }
          }
        }
        if (!ok) continue;  // grid too crowded, place fewer instances
        placed.emplace_back(pr, pc);
        std::array<double, 3> color = motif.color;
        for (double& v : color) {
          v = std::clamp(v + rng.uniform(-local.color_jitter, local.color_jitter), 0.02, 0.98);
        }
        const RenderedMotif rendered =
            render_motif(rec.image, local, motif.shape_id, color, pr, pc, region_h, region_w);
        if (!rendered.any_pixel) continue;
        rec.boxes.push_back(rendered.pixel_bbox);
        rec.box_labels.push_back(rec.label);
        all_patches.insert(rendered.gt_patches.begin(), rendered.gt_patches.end());
      }
      rec.gt_patches.assign(all_patches.begin(), all_patches.end());
      ds.samples.push_back(std::move(rec));
    }
  }
  return ds;
}

// Seeded shuffle, then partition at the cumulative-fraction boundaries.
inline std::vector<std::vector<int>> split_indices(std::vector<int> ids,
                                                   const std::vector<double>& fractions,
                                                   std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw InputError("negative split fraction");
    total += f;
  }
  if (std::fabs(total - 1.0) > 1e-9) {
    throw InputError("split fractions sum to " + std::to_string(total) + ", expected 1");
  }
  Rng rng(mix_seed(seed, tag_hash("split")));
  rng.shuffle(ids);
  std::vector<std::vector<int>> out;
  const std::size_t n = ids.size();
  std::size_t begin = 0;
  double cum = 0.0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    cum += fractions[i];
    const std::size_t end = i + 1 == fractions.size()
                                ? n
                                : static_cast<std::size_t>(std::llround(cum * static_cast<double>(n)));
    out.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(begin),
                     ids.begin() + static_cast<std::ptrdiff_t>(std::min(end, n)));
    begin = std::min(end, n);
  }
  return out;
}

// ---------------------------------------------------------------------------
// On-disk format. See docs/FORMATS.md.
//   <dir>/dataset.json     dataset-level metadata
//   <dir>/manifest.jsonl   one record per sample
//   <dir>/rasters/<id>.bin "MGIM" magic, u16 C, u16 H, u16 W, then C*H*W f32
//                          row-major, all little-endian
// ---------------------------------------------------------------------------

inline void save_raster(const std::string& path, const Tensor& image, std::size_t c,
                        std::size_t h, std::size_t w) {
  ByteWriter wr;
  wr.bytes("MGIM", 4);
  wr.u16(static_cast<std::uint16_t>(c));
  wr.u16(static_cast<std::uint16_t>(h));
  wr.u16(static_cast<std::uint16_t>(w));
  for (std::size_t i = 0; i < image.size(); ++i) wr.f32(static_cast<float>(image(i)));
  wr.write_file(path);
}

inline Tensor load_raster(const std::string& path, std::size_t* c_out = nullptr,
                          std::size_t* h_out = nullptr, std::size_t* w_out = nullptr) {
  ByteReader r = ByteReader::from_file(path);
  r.expect_magic("MGIM", 4);
  const std::size_t c = r.u16(), h = r.u16(), w = r.u16();
  if (c == 0 || h == 0 || w == 0) throw FormatError("zero raster dimension", 4);
  Tensor image = Tensor::zeros({c, h, w});
  for (std::size_t i = 0; i < image.size(); ++i) image(i) = static_cast<double>(r.f32());
  if (!r.at_end()) throw FormatError("trailing bytes after raster data", r.offset());
  if (c_out) *c_out = c;
  if (h_out) *h_out = h;
  if (w_out) *w_out = w;
  return image;
}

inline nlohmann::json spec_to_json(const SyntheticSpec& s) {
  return nlohmann::json{{"image_h", s.image_h},
                        {"image_w", s.image_w},
                        {"channels", s.channels},
                        {"patch", s.patch},
                        {"num_base_classes", s.num_base_classes},
                        {"num_novel_classes", s.num_novel_classes},
                        {"region_patches_h", s.region_patches_h},
                        {"region_patches_w", s.region_patches_w},
                        {"noise_sigma", s.noise_sigma},
                        {"samples_per_class", s.samples_per_class},
                        {"seed", s.seed},
                        {"color_jitter", s.color_jitter},
                        {"modes_per_class", s.modes_per_class},
                        {"min_instances", s.min_instances},
                        {"max_instances", s.max_instances},
                        {"novel_scale", s.novel_scale}};
}

inline SyntheticSpec spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.image_h = j.at("image_h");
  s.image_w = j.at("image_w");
  s.channels = j.at("channels");
  s.patch = j.at("patch");
  s.num_base_classes = j.at("num_base_classes");
  s.num_novel_classes = j.at("num_novel_classes");
  s.region_patches_h = j.at("region_patches_h");
  s.region_patches_w = j.at("region_patches_w");
  s.noise_sigma = j.at("noise_sigma");
  s.samples_per_class = j.at("samples_per_class");
  s.seed = j.at("seed");
  s.color_jitter = j.at("color_jitter");
  s.modes_per_class = j.at("modes_per_class");
  s.min_instances = j.at("min_instances");
  s.max_instances = j.at("max_instances");
  s.novel_scale = j.at("novel_scale");
  return s;
}

inline void save_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "rasters");
  nlohmann::json meta{{"kind", to_string(ds.kind)},
                      {"channels", ds.channels},
                      {"height", ds.height},
                      {"width", ds.width},
                      {"patch", ds.patch},
                      {"base_classes", ds.base_classes},
                      {"novel_classes", ds.novel_classes},
                      {"spec", spec_to_json(ds.spec)}};
  {
    std::ofstream os(fs::path(dir) / "dataset.json");
    if (!os) throw InputError("cannot write dataset.json under " + dir);
    os << meta.dump(2) << "\n";
  }
  std::ofstream manifest(fs::path(dir) / "manifest.jsonl");
  if (!manifest) throw InputError("cannot write manifest.jsonl under " + dir);
  for (const auto& s : ds.samples) {
    const std::string raster_rel = "rasters/" + std::to_string(s.id) + ".bin";
    nlohmann::json rec{{"id", s.id},
                       {"label", s.label},
                       {"patches", s.gt_patches},
                       {"raster", raster_rel}};
    if (!s.boxes.empty() || ds.kind == TaskKind::detection) {
      nlohmann::json boxes = nlohmann::json::array();
      for (const auto& b : s.boxes) boxes.push_back({b.cx, b.cy, b.w, b.h});
      rec["boxes"] = boxes;
      rec["box_labels"] = s.box_labels;
    }
    manifest << rec.dump() << "\n";
    save_raster((fs::path(dir) / raster_rel).string(), s.image, ds.channels, ds.height, ds.width);
  }
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream meta_in(fs::path(dir) / "dataset.json");
  if (!meta_in) throw InputError("cannot read dataset.json under " + dir);
  nlohmann::json meta = nlohmann::json::parse(meta_in);
  Dataset ds;
  ds.kind = task_kind_from_string(meta.at("kind"));
  ds.channels = meta.at("channels");
  ds.height = meta.at("height");
  ds.width = meta.at("width");
  ds.patch = meta.at("patch");
  ds.base_classes = meta.at("base_classes").get<std::vector<int>>();
  ds.novel_classes = meta.at("novel_classes").get<std::vector<int>>();
  ds.spec = spec_from_json(meta.at("spec"));

  std::ifstream manifest(fs::path(dir) / "manifest.jsonl");
  if (!manifest) throw InputError("cannot read manifest.jsonl under " + dir);
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line);
    SampleRecord s;
    s.id = rec.at("id");
    s.label = rec.at("label");
    s.gt_patches = rec.at("patches").get<std::vector<int>>();
    if (rec.contains("boxes")) {
      for (const auto& b : rec.at("boxes")) {
        s.boxes.push_back(det::Box{b.at(0), b.at(1), b.at(2), b.at(3)});
      }
      s.box_labels = rec.at("box_labels").get<std::vector<int>>();
    }
    std::size_t c = 0, h = 0, w = 0;
    s.image = load_raster((fs::path(dir) / rec.at("raster").get<std::string>()).string(), &c, &h, &w);
    if (c != ds.channels || h != ds.height || w != ds.width) {
      throw FormatError("raster dimensions disagree with dataset.json", 4);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace mgvit::synth
