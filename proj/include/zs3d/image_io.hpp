#pragma once

// Binary PPM (P6) / PGM (P5) images and organized-cloud files on disk.

#include <array>
#include <cctype>
#include <cstdint>
#include <string>
#include <vector>

#include "zs3d/error.hpp"
#include "zs3d/files.hpp"
#include "zs3d/geometry.hpp"
#include "zs3d/tensor_io.hpp"

namespace zs3d {

/// 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
struct Image8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> data;

  bool operator==(const Image8&) const = default;
};

inline std::string encode_pnm(const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw InputError("PNM images have 1 or 3 channels");
  if (img.data.size() != img.height * img.width * img.channels) throw InputError("image data size mismatch");
  std::string out = (img.channels == 3 ? "P6\n" : "P5\n") + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.data.data()), img.data.size());
  return out;
}

inline Image8 decode_pnm(const std::string& bytes, const std::string& what) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  auto number = [&]() -> std::size_t {
    const std::string t = token();
    if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos || t.size() > 9) {
      throw InputError(what + ": malformed image header");
    }
    return std::stoul(t);
  };
  const std::string magic = token();
  Image8 img;
  if (magic == "P6") {
    img.channels = 3;
  } else if (magic == "P5") {
    img.channels = 1;
  } else {
    throw InputError(what + ": not a binary PPM/PGM file");
  }
  img.width = number();
  img.height = number();
  if (number() != 255) throw InputError(what + ": only 8-bit images are supported");
  if (img.width == 0 || img.height == 0) throw InputError(what + ": empty image");
  ++pos;  // single whitespace after maxval
  const std::size_t n = img.height * img.width * img.channels;
  if (bytes.size() < pos || bytes.size() - pos != n) throw InputError(what + ": pixel data has the wrong length");
  img.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return img;
}

inline void save_pnm(const Image8& img, const fs::path& path) { write_file_atomic(path, encode_pnm(img)); }

inline Image8 load_pnm(const fs::path& path) {
  if (!fs::exists(path)) throw InputError("missing file: " + path.string());
  return decode_pnm(read_file(path), path.string());
}

/// Files of one organized cloud: points.mcle (f32 H x W x 3), rgb.ppm, mask.pgm.
inline void save_cloud(const OrganizedPointCloud& cloud, const fs::path& dir) {
  cloud.validate();
  std::vector<double> xyz;
  xyz.reserve(cloud.size() * 3);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (int k = 0; k < 3; ++k) xyz.push_back(cloud.valid[i] ? cloud.points[i][k] : 0.0);
  }
  save_mcle(dir / "points.mcle", EmbeddingTensor::f32({cloud.height, cloud.width, 3}, xyz));
  Image8 rgb{cloud.height, cloud.width, 3, {}};
  for (const auto& c : cloud.rgb) rgb.data.insert(rgb.data.end(), c.begin(), c.end());
  save_pnm(rgb, dir / "rgb.ppm");
  Image8 mask{cloud.height, cloud.width, 1, {}};
  for (auto m : cloud.mask) mask.data.push_back(m ? 255 : 0);
  save_pnm(mask, dir / "mask.pgm");
}

/// An all-zero point row marks an invalid cell.
inline OrganizedPointCloud load_cloud(const fs::path& dir) {
  const auto pts_path = dir / "points.mcle";
  if (!fs::exists(pts_path)) throw InputError("missing file: " + pts_path.string());
  const EmbeddingTensor pts = load_mcle(pts_path);
  if (pts.ndim() != 3 || pts.dim(2) != 3) throw InputError(pts_path.string() + ": expected an H x W x 3 tensor");
  OrganizedPointCloud c;
  c.height = pts.dim(0);
  c.width = pts.dim(1);
  const auto xyz = pts.to_f64();
  c.points.resize(c.size());
  c.valid.resize(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    c.points[i] = {xyz[3 * i], xyz[3 * i + 1], xyz[3 * i + 2]};
    c.valid[i] = c.points[i] == Eigen::Vector3d::Zero() ? 0 : 1;
  }
  const Image8 rgb = load_pnm(dir / "rgb.ppm");
  const Image8 mask = load_pnm(dir / "mask.pgm");
  if (rgb.channels != 3 || rgb.height != c.height || rgb.width != c.width) {
    throw InputError((dir / "rgb.ppm").string() + ": image does not match the point grid");
  }
  if (mask.channels != 1 || mask.height != c.height || mask.width != c.width) {
    throw InputError((dir / "mask.pgm").string() + ": mask does not match the point grid");
  }
  c.rgb.resize(c.size());
  c.mask.resize(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    c.rgb[i] = {rgb.data[3 * i], rgb.data[3 * i + 1], rgb.data[3 * i + 2]};
    c.mask[i] = (mask.data[i] != 0 && c.valid[i]) ? 1 : 0;
  }
  c.validate();
  return c;
}

}  // namespace zs3d
