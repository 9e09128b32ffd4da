#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"
#include "pshop/config.hpp"
#include "pshop/decoder.hpp"
#include "pshop/encoder.hpp"
#include "pshop/error.hpp"

namespace pshop {

/// Everything needed to segment a new case.
struct SegmentationModel {
  PipelineConfig config;
  EncoderModel encoder;
  DecoderModel decoder;

  friend bool operator==(const SegmentationModel& a, const SegmentationModel& b) {
    return a.encoder.hops == b.encoder.hops && a.decoder.hops == b.decoder.hops &&
           nlohmann::json(a.config) == nlohmann::json(b.config);
  }
};

// File layout: "PSHOPMDL", u32 version, u64 header length, JSON header, then a
// little-endian binary payload (anchors, biases, base scores, tree nodes) in
// the order the header lists them.
inline constexpr char kModelMagic[8] = {'P', 'S', 'H', 'O', 'P', 'M', 'D', 'L'};
inline constexpr std::uint32_t kModelVersion = 1;

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    std::uint8_t b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    bytes.insert(bytes.end(), b, b + sizeof(T));
  }
  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& b, std::size_t pos) : bytes_(b), pos_(pos) {}
  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw Error(ErrorCode::format, "model payload is truncated");
    std::uint8_t b[sizeof(T)];
    std::memcpy(b, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_;
};

inline nlohmann::json ensemble_header(const TreeEnsemble& e) {
  std::vector<std::size_t> sizes;
  for (const auto& t : e.trees) sizes.push_back(t.nodes.size());
  return {{"n_classes", e.n_classes}, {"n_features", e.n_features}, {"learning_rate", e.learning_rate}, {"tree_sizes", sizes}};
}

inline void put_ensemble(ByteWriter& w, const TreeEnsemble& e) {
  for (double b : e.base_score) w.put(b);
  for (const auto& t : e.trees)
    for (const auto& n : t.nodes) {
      w.put(n.feature);
      w.put(n.threshold);
      w.put(n.left);
      w.put(n.right);
      w.put(n.value);
    }
}

inline TreeEnsemble get_ensemble(ByteReader& r, const nlohmann::json& h) {
  TreeEnsemble e;
  e.n_classes = h.at("n_classes").get<int>();
  e.n_features = h.at("n_features").get<int>();
  e.learning_rate = h.at("learning_rate").get<double>();
  e.base_score.resize(e.n_classes);
  for (double& b : e.base_score) b = r.get<double>();
  for (std::size_t size : h.at("tree_sizes").get<std::vector<std::size_t>>()) {
    Tree t;
    t.nodes.resize(size);
    for (auto& n : t.nodes) {
      n.feature = r.get<std::int32_t>();
      n.threshold = r.get<float>();
      n.left = r.get<std::int32_t>();
      n.right = r.get<std::int32_t>();
      n.value = r.get<double>();
      if (n.feature >= e.n_features) throw Error(ErrorCode::format, "tree split on feature beyond the feature width");
      if (n.feature >= 0 && (n.left <= 0 || n.right <= 0 || n.left >= static_cast<int>(size) ||
                             n.right >= static_cast<int>(size)))
        throw Error(ErrorCode::format, "tree child index out of range");
    }
    e.trees.push_back(std::move(t));
  }
  return e;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const SegmentationModel& m) {
  nlohmann::json header;
  header["config"] = m.config;
  detail::ByteWriter w;

  nlohmann::json hops = nlohmann::json::array();
  for (const auto& hop : m.encoder.hops) {
    nlohmann::json units = nlohmann::json::array();
    for (const auto& u : hop.units) {
      units.push_back({{"n_in", u.n_in}, {"num_ac", u.num_ac()}, {"energies", u.energies}});
      for (double a : u.ac_anchors) w.put(a);
      w.put(u.bias);
    }
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : hop.nodes) nodes.push_back({n.parent_channel, n.component_index, n.energy, n.kept});
    hops.push_back({{"hop", hop.hop},
                    {"spec", hop.spec},
                    {"energy_threshold", hop.energy_threshold},
                    {"parent_energies", hop.parent_energies},
                    {"units", units},
                    {"nodes", nodes}});
  }
  header["encoder"] = {{"config", m.encoder.config}, {"hops", hops}};

  nlohmann::json dhops = nlohmann::json::array();
  for (const auto& hop : m.decoder.hops) {
    nlohmann::json refine = nlohmann::json::array();
    detail::put_ensemble(w, hop.main);
    for (const auto& e : hop.refine) {
      refine.push_back(detail::ensemble_header(e));
      detail::put_ensemble(w, e);
    }
    dhops.push_back({{"hop", hop.hop}, {"main", detail::ensemble_header(hop.main)}, {"refine", refine}});
  }
  header["decoder"] = {{"config", m.decoder.config}, {"hops", dhops}};

  const std::string text = header.dump();
  detail::ByteWriter out;
  out.bytes.assign(kModelMagic, kModelMagic + 8);
  out.put(kModelVersion);
  out.put(static_cast<std::uint64_t>(text.size()));
  out.bytes.insert(out.bytes.end(), text.begin(), text.end());
  out.bytes.insert(out.bytes.end(), w.bytes.begin(), w.bytes.end());
  return out.bytes;
}

inline SegmentationModel deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kModelMagic, 8) != 0)
    throw Error(ErrorCode::format, "not a model file (bad magic)");
  detail::ByteReader pre(bytes, 8);
  const auto version = pre.get<std::uint32_t>();
  if (version != kModelVersion)
    throw Error(ErrorCode::format, "unsupported model version " + std::to_string(version) + " (expected " +
                                       std::to_string(kModelVersion) + ")");
  const auto len = pre.get<std::uint64_t>();
  if (20 + len > bytes.size()) throw Error(ErrorCode::format, "model header is truncated");

  SegmentationModel m;
  try {
    const auto header = nlohmann::json::parse(bytes.begin() + 20, bytes.begin() + 20 + static_cast<std::ptrdiff_t>(len));
    detail::ByteReader r(bytes, 20 + len);
    m.config = header.at("config").get<PipelineConfig>();

    const auto& enc = header.at("encoder");
    m.encoder.config = enc.at("config").get<EncoderConfig>();
    for (const auto& hj : enc.at("hops")) {
      VoxelHopModel hop;
      hop.hop = hj.at("hop").get<int>();
      hop.spec = hj.at("spec").get<NeighborhoodSpec>();
      hop.energy_threshold = hj.at("energy_threshold").get<double>();
      hop.parent_energies = hj.at("parent_energies").get<std::vector<double>>();
      for (const auto& uj : hj.at("units")) {
        SaabUnit u;
        u.n_in = uj.at("n_in").get<int>();
        u.energies = uj.at("energies").get<std::vector<double>>();
        u.ac_anchors.resize(static_cast<std::size_t>(uj.at("num_ac").get<int>()) * u.n_in);
        for (double& a : u.ac_anchors) a = r.get<double>();
        u.bias = r.get<double>();
        hop.units.push_back(std::move(u));
      }
      for (const auto& nj : hj.at("nodes"))
        hop.nodes.push_back({hop.hop, nj.at(0).get<int>(), nj.at(1).get<int>(), nj.at(2).get<double>(), nj.at(3).get<bool>()});
      m.encoder.hops.push_back(std::move(hop));
    }

    const auto& dec = header.at("decoder");
    m.decoder.config = dec.at("config").get<DecoderConfig>();
    for (const auto& hj : dec.at("hops")) {
      DecoderHop hop;
      hop.hop = hj.at("hop").get<int>();
      hop.main = detail::get_ensemble(r, hj.at("main"));
      for (const auto& rj : hj.at("refine")) hop.refine.push_back(detail::get_ensemble(r, rj));
      m.decoder.hops.push_back(std::move(hop));
    }
    if (!r.done()) throw Error(ErrorCode::format, "trailing bytes after model payload");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::format, std::string("bad model header: ") + e.what());
  }
  return m;
}

inline void save_model(const SegmentationModel& m, const std::string& path) {
  const auto bytes = serialize(m);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot create " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io, "write error in " + path);
}

inline SegmentationModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path);
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace pshop
