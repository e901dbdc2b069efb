// Dataset directory layout and manifest I/O.
//
//   <root>/dataset.json                       counts, seed, scene generator config
//   <root>/{train,eval}/scene_NNNNN/
//       manifest.json                         calibration, trajectory, objects
//       images/sweep_SSSS_camC.pgm            rasterized views, every sweep
//       bev/key_SSSS_<class>.pgm              BEV ground truth at keyframes
//
// The manifest carries per-camera K and cam_to_lidar (row-major 4x4) and
// per-frame lidar_to_ego / ego_to_global with timestamps in seconds, so the
// geometry is reconstructible without the generator.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mv3d/scene.hpp"

namespace mv3d {

namespace detail {

inline nlohmann::json mat16(const Mat4& m) {
  return nlohmann::json(std::vector<double>(m.m.begin(), m.m.end()));
}

inline Mat4 mat16_from(const nlohmann::json& j) {
  Mat4 m;
  for (int i = 0; i < 16; ++i) m.m[static_cast<size_t>(i)] = j.at(static_cast<size_t>(i)).get<double>();
  return m;
}

}  // namespace detail

inline uint64_t fnv1a64(const std::string& bytes) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline nlohmann::json manifest_json(const SceneSequence& seq) {
  nlohmann::json j;
  j["scene_id"] = seq.scene_id;
  j["seed"] = seq.seed;
  j["sweep_interval"] = seq.sweep_interval;
  j["img_w"] = seq.rig.img_w;
  j["img_h"] = seq.rig.img_h;
  auto cams = nlohmann::json::array();
  for (int c = 0; c < seq.rig.cameras(); ++c) {
    nlohmann::json cam;
    cam["K"] = detail::mat16(seq.rig.intrinsics[static_cast<size_t>(c)].k);
    RigidTransform::validate(seq.rig.cam_to_lidar[static_cast<size_t>(c)]);
    cam["cam_to_lidar"] = detail::mat16(seq.rig.cam_to_lidar[static_cast<size_t>(c)]);
    cams.push_back(cam);
  }
  j["cameras"] = cams;
  auto frames = nlohmann::json::array();
  for (int k = 0; k < seq.sweeps(); ++k) {
    nlohmann::json f;
    f["t"] = seq.timestamps[static_cast<size_t>(k)];
    f["lidar_to_ego"] = detail::mat16(seq.lidar_to_ego);
    f["ego_to_global"] = detail::mat16(seq.ego_to_global[static_cast<size_t>(k)]);
    frames.push_back(f);
  }
  j["frames"] = frames;
  j["keyframes"] = seq.keyframes;
  auto objs = nlohmann::json::array();
  for (const auto& o : seq.objects) {
    nlohmann::json jo;
    jo["cls"] = o.cls;
    jo["center"] = {o.center.x, o.center.y, o.center.z};
    jo["size"] = {o.size.x, o.size.y, o.size.z};
    jo["yaw"] = o.yaw;
    jo["vx"] = o.vx;
    jo["vy"] = o.vy;
    objs.push_back(jo);
  }
  j["objects"] = objs;
  return j;
}

inline SceneSequence scene_from_manifest(const nlohmann::json& j) {
  SceneSequence seq;
  seq.scene_id = j.at("scene_id").get<int>();
  seq.seed = j.at("seed").get<uint64_t>();
  seq.sweep_interval = j.at("sweep_interval").get<double>();
  seq.rig.img_w = j.at("img_w").get<int>();
  seq.rig.img_h = j.at("img_h").get<int>();
  for (const auto& cam : j.at("cameras")) {
    CameraIntrinsics intr;
    intr.k = detail::mat16_from(cam.at("K"));
    seq.rig.intrinsics.push_back(intr);
    seq.rig.cam_to_lidar.push_back(detail::mat16_from(cam.at("cam_to_lidar")));
  }
  bool first = true;
  for (const auto& f : j.at("frames")) {
    seq.timestamps.push_back(f.at("t").get<double>());
    seq.ego_to_global.push_back(detail::mat16_from(f.at("ego_to_global")));
    if (first) {
      seq.lidar_to_ego = detail::mat16_from(f.at("lidar_to_ego"));
      first = false;
    }
  }
  for (const auto& k : j.at("keyframes")) seq.keyframes.push_back(k.get<int>());
  for (const auto& jo : j.at("objects")) {
    SceneObject o;
    o.cls = jo.at("cls").get<int>();
    o.center = {jo.at("center")[0].get<double>(), jo.at("center")[1].get<double>(),
                jo.at("center")[2].get<double>()};
    o.size = {jo.at("size")[0].get<double>(), jo.at("size")[1].get<double>(),
              jo.at("size")[2].get<double>()};
    o.yaw = jo.at("yaw").get<double>();
    o.vx = jo.at("vx").get<double>();
    o.vy = jo.at("vy").get<double>();
    seq.objects.push_back(o);
  }
  return seq;
}

inline std::string scene_dir_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "scene_%05d", index);
  return buf;
}

// Writes manifest, per-sweep view images, and keyframe BEV ground truth.
inline void write_scene(const std::string& dir, const SceneSequence& seq, const SceneConfig& cfg,
                        const Roi& roi, int map_size, bool write_images) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream os(dir + "/manifest.json");
    os << manifest_json(seq).dump(1) << "\n";
    if (!os) throw std::runtime_error("write_scene: cannot write manifest in " + dir);
  }
  if (!write_images) return;
  fs::create_directories(dir + "/images");
  fs::create_directories(dir + "/bev");
  char name[64];
  for (int s = 0; s < seq.sweeps(); ++s) {
    auto views = render_views(seq, s, seq.rig);
    for (int c = 0; c < static_cast<int>(views.size()); ++c) {
      std::snprintf(name, sizeof(name), "/images/sweep_%04d_cam%d.pgm", s, c);
      write_pgm(dir + name, views[static_cast<size_t>(c)]);
    }
  }
  for (int k : seq.keyframes) {
    auto bev = bev_gt(seq, k, map_size, roi, cfg);
    int64_t per = static_cast<int64_t>(map_size) * map_size;
    for (int c = 0; c < 3; ++c) {
      PgmImage img;
      img.width = img.height = map_size;
      img.pixels.resize(static_cast<size_t>(per));
      for (int64_t i = 0; i < per; ++i)
        img.pixels[static_cast<size_t>(i)] = bev.values[c * per + i] == 1.0 ? 255 : 0;
      std::snprintf(name, sizeof(name), "/bev/key_%04d_%s.pgm", k,
                    default_bev_classes()[static_cast<size_t>(c)].c_str());
      write_pgm(dir + name, img);
    }
  }
}

inline SceneSequence load_scene(const std::string& dir) {
  std::ifstream is(dir + "/manifest.json");
  if (!is) throw std::runtime_error("load_scene: missing manifest in " + dir);
  nlohmann::json j;
  is >> j;
  return scene_from_manifest(j);
}

}  // namespace mv3d
