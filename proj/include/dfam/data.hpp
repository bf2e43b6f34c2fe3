#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "dfam/image_io.hpp"
#include "dfam/matcher.hpp"
#include "dfam/rng.hpp"
#include "dfam/tensor.hpp"

namespace dfam {

// ---------------------------------------------------------------------------
// Synthetic slender scenes: rotated thin rectangles over a noise background.

struct SceneSpec {
  int width = 128, height = 128;
  int min_objects = 1, max_objects = 4;
  double aspect_min = 5.0, aspect_max = 20.0;  // long side / short side, > 1
  double rot_min = 0.0, rot_max = 3.141592653589793;  // radians
  double long_min = 0.35, long_max = 0.85;  // long side as a fraction of min(W,H)
  double fill_min = 0.65, fill_max = 1.0;   // object intensity
  double background = 0.25;
  double noise = 0.03;
  uint64_t seed = 0;

  void validate() const {
    if (width < 8 || height < 8) throw ShapeError("SceneSpec: image too small");
    if (min_objects < 0 || max_objects < min_objects) throw ShapeError("SceneSpec: bad object count range");
    if (!(aspect_min > 1.0) || aspect_max < aspect_min) throw ShapeError("SceneSpec: aspect range must exceed 1");
    if (rot_max < rot_min || long_max < long_min || fill_max < fill_min)
      throw ShapeError("SceneSpec: empty range");
    if (!(long_min > 0.0) || long_max > 1.0) throw ShapeError("SceneSpec: long side fraction out of (0,1]");
    if (noise < 0) throw ShapeError("SceneSpec: negative noise");
  }
};

struct AnnotatedImage {
  Tensor image;  // [3,H,W], values in [0,1]
  GroundTruthSet gt;
  std::vector<Box> ignore;  // evaluation-only regions (crowd annotations)
  int id = 0;
};

namespace detail {

// fraction of the pixel (px,py)..(px+1,py+1) covered by the rotated rectangle,
// 4x4 supersampled
inline double rect_coverage(double px, double py, double cx, double cy, double half_l,
                            double half_t, double cosr, double sinr) {
  int hits = 0;
  for (int sy = 0; sy < 4; ++sy)
    for (int sx = 0; sx < 4; ++sx) {
      const double x = px + (sx + 0.5) / 4.0 - cx;
      const double y = py + (sy + 0.5) / 4.0 - cy;
      const double u = x * cosr + y * sinr;
      const double v = -x * sinr + y * cosr;
      if (std::fabs(u) <= half_l && std::fabs(v) <= half_t) ++hits;
    }
  return hits / 16.0;
}

}  // namespace detail

// Deterministic per (spec.seed, image_id). GT boxes are tight bounds of the
// rendered (nonzero-coverage) pixels of each object.
inline AnnotatedImage generate_scene(const SceneSpec& spec, int image_id) {
  spec.validate();
  Rng rng(spec.seed, static_cast<uint64_t>(image_id) + 1);
  const int W = spec.width, H = spec.height;
  AnnotatedImage out;
  out.id = image_id;
  out.image = Tensor({3, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double v = spec.background + (spec.noise > 0 ? rng.normal(0.0, spec.noise) : 0.0);
      v = v < 0 ? 0 : (v > 1 ? 1 : v);
      for (int c = 0; c < 3; ++c) out.image.at3(c, y, x) = v;
    }

  const int count = rng.uniform_int(spec.min_objects, spec.max_objects);
  const double base = std::min(W, H);
  for (int obj = 0; obj < count; ++obj) {
    bool placed = false;
    for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
      const double L = rng.uniform(spec.long_min, spec.long_max) * base;
      const double aspect = rng.uniform(spec.aspect_min, spec.aspect_max);
      const double T = std::max(1.0, L / aspect);
      const double rot = rng.uniform(spec.rot_min, spec.rot_max);
      const double cosr = std::cos(rot), sinr = std::sin(rot);
      // axis-aligned extent of the rotated rectangle
      const double ex = std::fabs(cosr) * L / 2 + std::fabs(sinr) * T / 2;
      const double ey = std::fabs(sinr) * L / 2 + std::fabs(cosr) * T / 2;
      if (2 * ex >= W - 2 || 2 * ey >= H - 2) continue;
      const double cx = rng.uniform(ex + 1, W - ex - 1);
      const double cy = rng.uniform(ey + 1, H - ey - 1);
      const double fill = rng.uniform(spec.fill_min, spec.fill_max);

      int x0 = std::max(0, static_cast<int>(std::floor(cx - ex - 1)));
      int x1 = std::min(W - 1, static_cast<int>(std::ceil(cx + ex + 1)));
      int y0 = std::max(0, static_cast<int>(std::floor(cy - ey - 1)));
      int y1 = std::min(H - 1, static_cast<int>(std::ceil(cy + ey + 1)));
      int bx0 = W, bx1 = -1, by0 = H, by1 = -1;
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const double cov =
              detail::rect_coverage(x, y, cx, cy, L / 2, T / 2, cosr, sinr);
          if (cov <= 0.0) continue;
          bx0 = std::min(bx0, x);
          bx1 = std::max(bx1, x);
          by0 = std::min(by0, y);
          by1 = std::max(by1, y);
          for (int c = 0; c < 3; ++c) {
            double& px = out.image.at3(c, y, x);
            px = px + cov * (fill - px);
          }
        }
      if (bx1 < bx0) continue;
      GroundTruth g;
      g.label = 0;
      g.box.cx = (bx0 + bx1 + 1) / 2.0 / W;
      g.box.cy = (by0 + by1 + 1) / 2.0 / H;
      g.box.w = (bx1 - bx0 + 1.0) / W;
      g.box.h = (by1 - by0 + 1.0) / H;
      out.gt.push_back(g);
      placed = true;
    }
  }
  // snap to the 16-bit grid so saved images round-trip bit-identically
  for (int64_t i = 0; i < out.image.numel(); ++i) {
    double v = out.image[i];
    v = v < 0 ? 0 : (v > 1 ? 1 : v);
    out.image[i] = std::lround(v * 65535.0) / 65535.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation: random crop, resize to the training resolution.

inline Tensor resize_bilinear(const Tensor& img, int out_h, int out_w) {
  require_rank(img, 3, "resize image");
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Tensor out({C, out_h, out_w});
  for (int y = 0; y < out_h; ++y) {
    const double sy = (y + 0.5) * H / out_h - 0.5;
    const int y0 = static_cast<int>(std::floor(sy));
    const double fy = sy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double sx = (x + 0.5) * W / out_w - 0.5;
      const int x0 = static_cast<int>(std::floor(sx));
      const double fx = sx - x0;
      for (int c = 0; c < C; ++c) {
        double v = 0;
        for (int i = 0; i < 2; ++i)
          for (int j = 0; j < 2; ++j) {
            const int yy = std::clamp(y0 + i, 0, H - 1);
            const int xx = std::clamp(x0 + j, 0, W - 1);
            v += (i ? fy : 1 - fy) * (j ? fx : 1 - fx) * img.at3(c, yy, xx);
          }
        out.at3(c, y, x) = v;
      }
    }
  }
  return out;
}

struct CropParams {
  int out_width = 128, out_height = 128;
  double min_scale = 0.6;        // crop side as a fraction of the source side
  double visibility = 0.25;      // drop boxes keeping less than this area fraction
};

inline AnnotatedImage crop_and_resize(const AnnotatedImage& sample, int ox, int oy, int cw,
                                      int ch, const CropParams& p) {
  const int W = sample.image.dim(2), H = sample.image.dim(1);
  if (ox < 0 || oy < 0 || cw < 1 || ch < 1 || ox + cw > W || oy + ch > H)
    throw ShapeError("crop_and_resize: crop rectangle outside image");
  AnnotatedImage out;
  out.id = sample.id;
  Tensor crop({3, ch, cw});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x) crop.at3(c, y, x) = sample.image.at3(c, oy + y, ox + x);
  out.image = (cw == p.out_width && ch == p.out_height)
                  ? crop
                  : resize_bilinear(crop, p.out_height, p.out_width);

  auto remap = [&](const Box& b, Box& r) {
    const double x1 = std::max(b.cx * W - b.w * W / 2, static_cast<double>(ox));
    const double x2 = std::min(b.cx * W + b.w * W / 2, static_cast<double>(ox + cw));
    const double y1 = std::max(b.cy * H - b.h * H / 2, static_cast<double>(oy));
    const double y2 = std::min(b.cy * H + b.h * H / 2, static_cast<double>(oy + ch));
    if (x2 <= x1 || y2 <= y1) return 0.0;
    r.cx = ((x1 + x2) / 2 - ox) / cw;
    r.cy = ((y1 + y2) / 2 - oy) / ch;
    r.w = (x2 - x1) / cw;
    r.h = (y2 - y1) / ch;
    return (x2 - x1) * (y2 - y1) / (b.w * W * b.h * H);
  };
  for (const auto& g : sample.gt) {
    Box r;
    if (remap(g.box, r) >= p.visibility) out.gt.push_back({g.label, r});
  }
  for (const auto& ig : sample.ignore) {
    Box r;
    if (remap(ig, r) > 0) out.ignore.push_back(r);
  }
  return out;
}

inline AnnotatedImage random_crop_augment(const AnnotatedImage& sample, Rng& rng,
                                          const CropParams& p) {
  const int W = sample.image.dim(2), H = sample.image.dim(1);
  const double s = rng.uniform(p.min_scale, 1.0);
  const int cw = std::min(W, std::max(8, static_cast<int>(std::lround(s * W))));
  const int ch = std::min(H, std::max(8, static_cast<int>(std::lround(s * H))));
  const int ox = rng.uniform_int(0, W - cw);
  const int oy = rng.uniform_int(0, H - ch);
  return crop_and_resize(sample, ox, oy, cw, ch, p);
}

// ---------------------------------------------------------------------------
// Dataset serialization: COCO-style JSON plus lossless PPM images. The
// synthetic exporter writes the same schema the loader reads.

struct LoadStats {
  int skipped_records = 0;
  int missing_images = 0;
  int crowd_regions = 0;
};

// category_filter: category ids to keep (remapped to dense labels in the given
// order); empty keeps every category in file order.
inline std::vector<AnnotatedImage> load_coco_annotations(const std::string& annotation_file,
                                                         const std::string& image_dir,
                                                         std::vector<int> category_filter,
                                                         LoadStats* stats = nullptr,
                                                         std::ostream* diag = nullptr) {
  std::ifstream f(annotation_file);
  if (!f) throw ShapeError("load_coco_annotations: cannot open " + annotation_file);
  nlohmann::json j;
  f >> j;
  LoadStats local;
  LoadStats& st = stats ? *stats : local;

  if (category_filter.empty() && j.contains("categories"))
    for (const auto& c : j["categories"]) category_filter.push_back(c["id"].get<int>());
  std::vector<AnnotatedImage> dataset;
  std::unordered_map<int, size_t> by_image;
  std::unordered_map<int, std::pair<int, int>> dims;  // image id -> (W,H)

  for (const auto& im : j.value("images", nlohmann::json::array())) {
    try {
      const int id = im.at("id").get<int>();
      const std::string file = im.at("file_name").get<std::string>();
      const int W = im.at("width").get<int>(), H = im.at("height").get<int>();
      const auto path = std::filesystem::path(image_dir) / file;
      if (!std::filesystem::exists(path)) {
        ++st.missing_images;
        if (diag) *diag << "missing image: " << path.string() << "\n";
        continue;
      }
      AnnotatedImage a;
      a.id = id;
      a.image = read_ppm(path.string());
      if (a.image.dim(1) != H || a.image.dim(2) != W)
        throw ShapeError("image size disagrees with annotation record");
      by_image[id] = dataset.size();
      dims[id] = {W, H};
      dataset.push_back(std::move(a));
    } catch (const std::exception& e) {
      ++st.skipped_records;
      if (diag) *diag << "bad image record: " << e.what() << "\n";
    }
  }

  for (const auto& an : j.value("annotations", nlohmann::json::array())) {
    try {
      const int image_id = an.at("image_id").get<int>();
      auto it = by_image.find(image_id);
      if (it == by_image.end()) {
        ++st.skipped_records;
        continue;
      }
      const int cat = an.at("category_id").get<int>();
      const auto fit = std::find(category_filter.begin(), category_filter.end(), cat);
      if (fit == category_filter.end()) {
        ++st.skipped_records;
        if (diag) *diag << "annotation " << an.value("id", -1) << ": category " << cat
                        << " outside filter\n";
        continue;
      }
      const auto& bb = an.at("bbox");
      const double x = bb.at(0).get<double>(), y = bb.at(1).get<double>();
      const double w = bb.at(2).get<double>(), h = bb.at(3).get<double>();
      if (!(w > 0) || !(h > 0)) throw ShapeError("degenerate bbox");
      const auto [W, H] = dims[image_id];
      Box box{(x + w / 2) / W, (y + h / 2) / H, w / static_cast<double>(W), h / static_cast<double>(H)};
      AnnotatedImage& img = dataset[it->second];
      if (an.value("iscrowd", 0) != 0) {
        img.ignore.push_back(box);
        ++st.crowd_regions;
      } else {
        img.gt.push_back({static_cast<int>(fit - category_filter.begin()), box});
      }
    } catch (const std::exception& e) {
      ++st.skipped_records;
      if (diag) *diag << "bad annotation record: " << e.what() << "\n";
    }
  }
  return dataset;
}

inline void save_coco_dataset(const std::vector<AnnotatedImage>& dataset,
                              const std::string& annotation_file, const std::string& image_dir,
                              const std::vector<std::string>& class_names) {
  std::filesystem::create_directories(image_dir);
  nlohmann::json j;
  j["images"] = nlohmann::json::array();
  j["annotations"] = nlohmann::json::array();
  j["categories"] = nlohmann::json::array();
  for (size_t c = 0; c < class_names.size(); ++c)
    j["categories"].push_back({{"id", static_cast<int>(c) + 1}, {"name", class_names[c]}});
  int ann_id = 1;
  for (const auto& a : dataset) {
    const int W = a.image.dim(2), H = a.image.dim(1);
    char name[32];
    std::snprintf(name, sizeof name, "img_%06d.ppm", a.id);
    write_ppm((std::filesystem::path(image_dir) / name).string(), a.image);
    j["images"].push_back(
        {{"id", a.id}, {"file_name", std::string(name)}, {"width", W}, {"height", H}});
    for (const auto& g : a.gt) {
      j["annotations"].push_back({{"id", ann_id++},
                                  {"image_id", a.id},
                                  {"category_id", g.label + 1},
                                  {"bbox",
                                   {(g.box.cx - g.box.w / 2) * W, (g.box.cy - g.box.h / 2) * H,
                                    g.box.w * W, g.box.h * H}},
                                  {"iscrowd", 0}});
    }
    for (const auto& ig : a.ignore) {
      j["annotations"].push_back({{"id", ann_id++},
                                  {"image_id", a.id},
                                  {"category_id", 1},
                                  {"bbox",
                                   {(ig.cx - ig.w / 2) * W, (ig.cy - ig.h / 2) * H, ig.w * W,
                                    ig.h * H}},
                                  {"iscrowd", 1}});
    }
  }
  std::ofstream f(annotation_file);
  if (!f) throw ShapeError("save_coco_dataset: cannot open " + annotation_file);
  f << j.dump(1) << "\n";
}

}  // namespace dfam
