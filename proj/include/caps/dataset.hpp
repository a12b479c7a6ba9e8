#pragma once

// Dataset container and its binary file format, little-endian:
//   magic "CAPS" | u32 version=1 | u32 count | u32 H | u32 W | u32 n_classes
//   then per record: u32 label | H*W float32 pixels in [0,1], row-major.
// An optional JSON sidecar stores the ground-truth latents of each record for
// plant-and-recover tests.

#include "caps/model.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace caps {

static_assert(std::endian::native == std::endian::little,
              "dataset files are little-endian; big-endian hosts are unsupported");

struct Dataset {
  std::uint32_t h = 0, w = 0, n_classes = 0;
  std::vector<std::uint32_t> labels;
  std::vector<std::vector<double>> images;  // row-major h*w values

  std::size_t size() const { return images.size(); }
  Tensor image_tensor(std::size_t i) const { return Tensor::from({h, w}, images[i]); }

  Dataset slice(std::size_t start, std::size_t count) const {
    Dataset d;
    d.h = h;
    d.w = w;
    d.n_classes = n_classes;
    for (std::size_t i = start; i < start + count && i < size(); ++i) {
      d.labels.push_back(labels[i]);
      d.images.push_back(images[i]);
    }
    return d;
  }
};

namespace detail {
template <class T>
void write_raw(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T read_raw(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}
}  // namespace detail

inline void write_dataset(const std::string& path, const Dataset& d) {
  if (d.labels.size() != d.images.size())
    throw ShapeError("write_dataset: label/image count mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("write_dataset: cannot open " + path);
  f.write("CAPS", 4);
  detail::write_raw<std::uint32_t>(f, 1);
  detail::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(d.size()));
  detail::write_raw<std::uint32_t>(f, d.h);
  detail::write_raw<std::uint32_t>(f, d.w);
  detail::write_raw<std::uint32_t>(f, d.n_classes);
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.images[i].size() != static_cast<std::size_t>(d.h) * d.w)
      throw ShapeError("write_dataset: record " + std::to_string(i) + " has wrong size");
    detail::write_raw<std::uint32_t>(f, d.labels[i]);
    for (double v : d.images[i]) detail::write_raw<float>(f, static_cast<float>(v));
  }
  if (!f) throw Error("write_dataset: short write to " + path);
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("read_dataset: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "CAPS", 4) != 0)
    throw Error("read_dataset: " + path + " is not a CAPS dataset");
  const auto version = detail::read_raw<std::uint32_t>(f);
  if (version != 1) throw Error("read_dataset: unsupported version");
  const auto count = detail::read_raw<std::uint32_t>(f);
  Dataset d;
  d.h = detail::read_raw<std::uint32_t>(f);
  d.w = detail::read_raw<std::uint32_t>(f);
  d.n_classes = detail::read_raw<std::uint32_t>(f);
  const std::size_t n = static_cast<std::size_t>(d.h) * d.w;
  for (std::uint32_t i = 0; i < count; ++i) {
    d.labels.push_back(detail::read_raw<std::uint32_t>(f));
    std::vector<double> img(n);
    for (auto& v : img) v = detail::read_raw<float>(f);
    d.images.push_back(std::move(img));
    if (!f) throw Error("read_dataset: truncated file " + path);
  }
  return d;
}

// ---- ground-truth sidecar ----

inline nlohmann::json latents_to_json(const LatentState& st) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t k = 0; k < st.presence.size(); ++k) {
    nlohmann::json t = nlohmann::json::array();
    nlohmann::json poses = nlohmann::json::array();
    for (std::size_t i = 0; i < st.presence[k].size(); ++i) {
      t.push_back(st.presence[k][i].item());
      poses.push_back(st.pose[k][i].offset.values());
    }
    layers.push_back({{"t", t}, {"poses", poses}});
  }
  return layers;
}

inline LatentState latents_from_json(const nlohmann::json& layers) {
  LatentState st;
  for (const auto& lj : layers) {
    std::vector<Tensor> ts;
    std::vector<Pose> poses;
    for (const auto& v : lj.at("t")) ts.push_back(Tensor::scalar(v.get<double>()));
    for (const auto& pj : lj.at("poses")) {
      auto vals = pj.get<std::vector<double>>();
      if (vals.size() != 6) throw Error("sidecar: pose must have 6 entries");
      poses.push_back(Pose(Tensor::from({2, 3}, vals)));
    }
    st.presence.push_back(std::move(ts));
    st.pose.push_back(std::move(poses));
  }
  return st;
}

inline void write_sidecar(const std::string& path, const std::vector<LatentState>& latents,
                          const std::vector<std::uint32_t>& labels) {
  nlohmann::json records = nlohmann::json::array();
  for (std::size_t i = 0; i < latents.size(); ++i)
    records.push_back({{"label", labels[i]}, {"layers", latents_to_json(latents[i])}});
  nlohmann::json j{{"version", 1}, {"kind", "caps-latents"}, {"records", records}};
  std::ofstream f(path);
  if (!f) throw Error("write_sidecar: cannot open " + path);
  f << j.dump(1) << "\n";
}

inline std::vector<LatentState> read_sidecar(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("read_sidecar: cannot open " + path);
  nlohmann::json j;
  f >> j;
  if (j.value("kind", "") != "caps-latents") throw Error("read_sidecar: wrong document kind");
  std::vector<LatentState> out;
  for (const auto& r : j.at("records")) out.push_back(latents_from_json(r.at("layers")));
  return out;
}

}  // namespace caps
