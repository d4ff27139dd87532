#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "chsnet/tensor.hpp"

namespace chs {

namespace fs = std::filesystem;

/// One CT slice with its masks, each (w, h, 1). Images lie in [0, 1]; masks
/// are strictly 0/1.
struct SegmentationSample {
  std::string id;
  Tensor<double> image;
  Tensor<double> lung_mask;
  Tensor<double> infection_mask;
  std::string source;
  /// Infection blobs drawn by the synthetic generator (0 for loaded data).
  std::size_t blob_count = 0;
};

/// Fraction of infection pixels that are also lung pixels (1 when there is
/// no infection).
inline double containment_ratio(const SegmentationSample& s) {
  std::size_t inf = 0, inside = 0;
  for (std::size_t i = 0; i < s.infection_mask.size(); ++i) {
    if (s.infection_mask[i] > 0.5) {
      ++inf;
      inside += s.lung_mask[i] > 0.5;
    }
  }
  return inf == 0 ? 1.0 : static_cast<double>(inside) / static_cast<double>(inf);
}

// ---------------------------------------------------------------------------
// 8-bit grayscale images (binary PGM) and raw tensor sidecars
// ---------------------------------------------------------------------------

/// Gray image with w columns and h rows; pixel (x, y) at y * w + x.
struct GrayImage {
  std::size_t w = 0, h = 0;
  std::vector<std::uint8_t> pixels;
};

inline GrayImage read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (!std::isspace(static_cast<unsigned char>(c))) {
        t += c;
        break;
      }
    }
    while (in.get(c) && !std::isspace(static_cast<unsigned char>(c))) t += c;
    return t;
  };
  if (token() != "P5") throw DataError(path.string() + ": not a binary PGM (P5) file");
  GrayImage img;
  std::size_t maxval = 0;
  try {
    img.w = std::stoul(token());
    img.h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw DataError(path.string() + ": malformed PGM header");
  }
  if (img.w == 0 || img.h == 0 || maxval == 0 || maxval > 255) {
    throw DataError(path.string() + ": unsupported PGM geometry or maxval");
  }
  img.pixels.resize(img.w * img.h);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw DataError(path.string() + ": truncated PGM");
  if (maxval != 255) {
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(std::lround(255.0 * p / static_cast<double>(maxval)));
  }
  return img;
}

inline void write_pgm(const fs::path& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << img.w << " " << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

/// (w, h, 1) tensor in [0, 1] -> 8-bit image, rounding to nearest.
template <typename T>
GrayImage to_gray(const Tensor<T>& t) {
  if (t.rank() != 3 || t.dim(2) != 1) throw DimensionError("to_gray expects (w,h,1), got " + shape_str(t.shape()));
  GrayImage img{t.dim(0), t.dim(1), {}};
  img.pixels.resize(img.w * img.h);
  for (std::size_t x = 0; x < img.w; ++x)
    for (std::size_t y = 0; y < img.h; ++y) {
      const double v = std::clamp(static_cast<double>(t[x * img.h + y]), 0.0, 1.0);
      img.pixels[y * img.w + x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return img;
}

inline Tensor<double> from_gray(const GrayImage& img) {
  Tensor<double> t({img.w, img.h, 1});
  for (std::size_t x = 0; x < img.w; ++x)
    for (std::size_t y = 0; y < img.h; ++y) t[x * img.h + y] = img.pixels[y * img.w + x] / 255.0;
  return t;
}

/// Mask binarization: gray level > 127 is foreground.
inline Tensor<double> mask_from_gray(const GrayImage& img) {
  Tensor<double> t({img.w, img.h, 1});
  for (std::size_t x = 0; x < img.w; ++x)
    for (std::size_t y = 0; y < img.h; ++y) t[x * img.h + y] = img.pixels[y * img.w + x] > 127 ? 1.0 : 0.0;
  return t;
}

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<unsigned char, 4> b{static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                       static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b.data()), 4);
}

inline std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw DataError("truncated tensor sidecar");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

/// Raw tensor sidecar: "TNSR", u32 rank, u32 dims, little-endian float32 data.
template <typename T>
void write_tensor_file(const fs::path& path, const Tensor<T>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write("TNSR", 4);
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float f = static_cast<float>(t[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32(out, bits);
  }
  if (!out) throw DataError("write failed: " + path.string());
}

inline Tensor<double> read_tensor_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "TNSR", 4) != 0) throw DataError(path.string() + ": bad tensor magic");
  const std::uint32_t rank = detail::get_u32(in);
  if (rank == 0 || rank > 8) throw DataError(path.string() + ": unsupported rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = detail::get_u32(in);
  Tensor<double> t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const std::uint32_t bits = detail::get_u32(in);
    float f;
    std::memcpy(&f, &bits, 4);
    t[i] = f;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Resizing
// ---------------------------------------------------------------------------

/// Bilinear resize of a (w, h, 1) map with half-pixel centers.
inline Tensor<double> resize_bilinear(const Tensor<double>& t, std::size_t ow, std::size_t oh) {
  const std::size_t w = t.dim(0), h = t.dim(1);
  if (w == ow && h == oh) return t;
  Tensor<double> out({ow, oh, 1});
  auto coord = [](std::size_t o, std::size_t n_in, std::size_t n_out, std::size_t& i0, std::size_t& i1, double& a) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(n_in - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, n_in - 1);
    a = s - static_cast<double>(i0);
  };
  for (std::size_t x = 0; x < ow; ++x) {
    std::size_t x0, x1;
    double ax;
    coord(x, w, ow, x0, x1, ax);
    for (std::size_t y = 0; y < oh; ++y) {
      std::size_t y0, y1;
      double ay;
      coord(y, h, oh, y0, y1, ay);
      const double top = (1 - ay) * t[x0 * h + y0] + ay * t[x0 * h + y1];
      const double bot = (1 - ay) * t[x1 * h + y0] + ay * t[x1 * h + y1];
      out[x * oh + y] = (1 - ax) * top + ax * bot;
    }
  }
  return out;
}

/// Nearest-neighbour resize; keeps masks binary.
inline Tensor<double> resize_nearest(const Tensor<double>& t, std::size_t ow, std::size_t oh) {
  const std::size_t w = t.dim(0), h = t.dim(1);
  if (w == ow && h == oh) return t;
  Tensor<double> out({ow, oh, 1});
  for (std::size_t x = 0; x < ow; ++x) {
    const std::size_t sx = std::min(w - 1, x * w / ow);
    for (std::size_t y = 0; y < oh; ++y) out[x * oh + y] = t[sx * h + std::min(h - 1, y * h / oh)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory
// ---------------------------------------------------------------------------

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

struct DatasetManifest {
  fs::path root;
  std::vector<std::string> ids;  ///< sorted
  std::vector<Split> split;      ///< parallel to ids
  std::string source;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == s) out.push_back(i);
    return out;
  }
};

struct SplitOptions {
  double test_fraction = 0.3;
  /// Share of the train+val pool held out for validation.
  double val_fraction = 0.15;
  std::uint64_t seed = 0;
  /// Split each source separately so every split keeps the source mix.
  bool balance = false;
};

/// Seeded split: the first test_fraction of a shuffle goes to test, then
/// val_fraction of the remainder to val, the rest to train.
inline std::vector<Split> assign_splits(const std::vector<std::string>& sources, const SplitOptions& opt) {
  if (opt.test_fraction < 0 || opt.test_fraction >= 1 || opt.val_fraction < 0 || opt.val_fraction >= 1) {
    throw ConfigError("split fractions must lie in [0,1)");
  }
  std::vector<Split> out(sources.size(), Split::train);
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < sources.size(); ++i) groups[opt.balance ? sources[i] : std::string()].push_back(i);
  std::mt19937_64 rng(opt.seed);
  for (auto& [tag, idx] : groups) {
    for (std::size_t i = idx.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(idx[i - 1], idx[pick(rng)]);
    }
    const auto n_test = static_cast<std::size_t>(std::llround(opt.test_fraction * static_cast<double>(idx.size())));
    const auto n_val =
        static_cast<std::size_t>(std::llround(opt.val_fraction * static_cast<double>(idx.size() - n_test)));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      out[idx[k]] = k < n_test ? Split::test : (k < n_test + n_val ? Split::val : Split::train);
    }
  }
  return out;
}

struct LoadOptions {
  std::size_t size_w = 256, size_h = 256;
  SplitOptions split;
};

struct LoadedDataset {
  DatasetManifest manifest;
  std::vector<SegmentationSample> samples;  ///< parallel to manifest.ids
  std::vector<std::string> rejected;        ///< "id: reason"
};

/// Reads `images/`, `lung_masks/` and `infection_masks/` (matching file
/// names, binary PGM). Slices without a lung mask are rejected; a missing
/// infection mask means an infection-free slice. An optional `sources.txt`
/// ("<id> <tag>" lines) tags samples for balanced splitting.
inline LoadedDataset load_dataset(const fs::path& root, const LoadOptions& opt = {}) {
  const fs::path images = root / "images";
  if (!fs::is_directory(images)) throw DataError("dataset root has no images/ directory: " + root.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(images))
    if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
  std::sort(files.begin(), files.end());

  std::map<std::string, std::string> tags;
  if (std::ifstream src(root / "sources.txt"); src) {
    std::string id, tag;
    while (src >> id >> tag) tags[id] = tag;
  }

  LoadedDataset ds;
  ds.manifest.root = root;
  ds.manifest.source = root.filename().string();
  std::vector<std::string> sources;
  for (const auto& f : files) {
    const std::string id = f.stem().string();
    const fs::path lung = root / "lung_masks" / f.filename();
    if (!fs::exists(lung)) {
      ds.rejected.push_back(id + ": missing lung mask " + lung.string());
      continue;
    }
    SegmentationSample s;
    s.id = id;
    s.image = resize_bilinear(from_gray(read_pgm(f)), opt.size_w, opt.size_h);
    s.lung_mask = resize_nearest(mask_from_gray(read_pgm(lung)), opt.size_w, opt.size_h);
    const fs::path inf = root / "infection_masks" / f.filename();
    s.infection_mask = fs::exists(inf) ? resize_nearest(mask_from_gray(read_pgm(inf)), opt.size_w, opt.size_h)
                                       : Tensor<double>({opt.size_w, opt.size_h, 1});
    auto tag = tags.find(id);
    s.source = tag == tags.end() ? ds.manifest.source : tag->second;
    sources.push_back(s.source);
    ds.manifest.ids.push_back(id);
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw DataError("no usable samples under " + root.string());
  ds.manifest.split = assign_splits(sources, opt.split);
  return ds;
}

/// Writes samples in the directory layout load_dataset reads.
inline void write_dataset(const fs::path& root, const std::vector<SegmentationSample>& samples) {
  for (const char* sub : {"images", "lung_masks", "infection_masks"}) fs::create_directories(root / sub);
  for (const auto& s : samples) {
    const std::string file = s.id + ".pgm";
    write_pgm(root / "images" / file, to_gray(s.image));
    write_pgm(root / "lung_masks" / file, to_gray(s.lung_mask));
    write_pgm(root / "infection_masks" / file, to_gray(s.infection_mask));
  }
}

// ---------------------------------------------------------------------------
// Synthetic slices
// ---------------------------------------------------------------------------

struct SynthOptions {
  std::size_t n = 100;
  std::size_t size = 64;
  std::uint64_t seed = 0;
  /// Probability of 0, 1, 2 and 3 infection blobs.
  std::array<double, 4> blob_probs{0.2, 0.3, 0.3, 0.2};
  /// Probability of a second lung ellipse.
  double two_lungs = 0.8;
  /// Up to this many lung-textured patches with a bright spot, outside the
  /// lungs and absent from both masks.
  std::size_t max_distractors = 0;
  double noise = 0.05;
};

namespace detail {

struct Ellipse {
  double cx, cy, rx, ry, angle;

  bool contains(double x, double y) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = ((x - cx) * c + (y - cy) * s) / rx;
    const double v = (-(x - cx) * s + (y - cy) * c) / ry;
    return u * u + v * v <= 1.0;
  }
};

}  // namespace detail

/// Noisy background, one or two mid-intensity "lung" ellipses, 0-3 bright
/// "infection" blobs clipped to the lungs, and optional distractor patches
/// outside them. Masks are the exact generative shapes.
inline std::vector<SegmentationSample> synth_dataset(const SynthOptions& opt) {
  if (opt.n < 1 || opt.size < 8) throw ConfigError("synth_dataset needs n >= 1 and size >= 8");
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, opt.noise);
  std::discrete_distribution<int> blob_count(opt.blob_probs.begin(), opt.blob_probs.end());
  const double S = static_cast<double>(opt.size);
  const std::size_t n = opt.size;
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * U(rng); };

  std::vector<SegmentationSample> out;
  out.reserve(opt.n);
  for (std::size_t k = 0; k < opt.n; ++k) {
    std::vector<detail::Ellipse> lungs;
    const bool two = U(rng) < opt.two_lungs;
    if (two) {
      for (int side = 0; side < 2; ++side) {
        const double cx = S * (side == 0 ? uni(0.27, 0.33) : uni(0.67, 0.73));
        lungs.push_back({cx, S * uni(0.45, 0.55), S * uni(0.13, 0.18), S * uni(0.25, 0.32), uni(-0.2, 0.2)});
      }
    } else {
      lungs.push_back({S * uni(0.4, 0.6), S * uni(0.4, 0.6), S * uni(0.22, 0.3), S * uni(0.25, 0.33), uni(-0.5, 0.5)});
    }
    std::vector<detail::Ellipse> blobs;
    const int nb = blob_count(rng);
    for (int b = 0; b < nb; ++b) {
      const auto& L = lungs[static_cast<std::size_t>(U(rng) * static_cast<double>(lungs.size())) % lungs.size()];
      // Centre drawn inside the host lung's inner region.
      const double r = std::sqrt(U(rng)) * 0.6, t = uni(0, 2 * std::numbers::pi);
      const double c = std::cos(L.angle), s = std::sin(L.angle);
      const double u = r * std::cos(t) * L.rx, v = r * std::sin(t) * L.ry;
      blobs.push_back({L.cx + u * c - v * s, L.cy + u * s + v * c, S * uni(0.04, 0.08), S * uni(0.04, 0.08),
                       uni(0, std::numbers::pi)});
    }
    // Distractors: small tissue patches outside the lungs, each holding an
    // infection-like bright blob. Only lung context tells them apart.
    std::vector<detail::Ellipse> patches, spots;
    const std::size_t nd =
        opt.max_distractors == 0 ? 0 : static_cast<std::size_t>(U(rng) * static_cast<double>(opt.max_distractors + 1));
    for (std::size_t d = 0; d < nd; ++d) {
      for (int attempt = 0; attempt < 20; ++attempt) {
        detail::Ellipse e{S * uni(0.1, 0.9), S * uni(0.1, 0.9), S * uni(0.07, 0.1), S * uni(0.07, 0.1),
                          uni(0, std::numbers::pi)};
        bool clear = true;
        for (const auto& L : lungs) {
          detail::Ellipse grown{L.cx, L.cy, L.rx + std::max(e.rx, e.ry) + 2, L.ry + std::max(e.rx, e.ry) + 2, L.angle};
          if (grown.contains(e.cx, e.cy)) clear = false;
        }
        if (clear) {
          patches.push_back(e);
          spots.push_back({e.cx, e.cy, S * uni(0.04, 0.06), S * uni(0.04, 0.06), uni(0, std::numbers::pi)});
          break;
        }
      }
    }

    SegmentationSample s;
    s.id = "synth_" + std::to_string(k);
    s.source = "synth";
    s.blob_count = static_cast<std::size_t>(nb);
    s.image = Tensor<double>({n, n, 1});
    s.lung_mask = Tensor<double>({n, n, 1});
    s.infection_mask = Tensor<double>({n, n, 1});
    const double lung_level = uni(0.35, 0.5), blob_level = uni(0.8, 0.95);
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t y = 0; y < n; ++y) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        const std::size_t i = x * n + y;
        double v = 0.1;
        bool lung = false;
        for (const auto& L : lungs) lung = lung || L.contains(px, py);
        bool inf = false;
        if (lung) {
          v = lung_level;
          for (const auto& B : blobs) inf = inf || B.contains(px, py);
          if (inf) v = blob_level;
        } else {
          for (std::size_t d = 0; d < patches.size(); ++d) {
            if (patches[d].contains(px, py)) v = spots[d].contains(px, py) ? blob_level : lung_level;
          }
        }
        s.image[i] = std::clamp(v + noise(rng), 0.0, 1.0);
        s.lung_mask[i] = lung ? 1.0 : 0.0;
        s.infection_mask[i] = inf ? 1.0 : 0.0;
      }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace chs
