#pragma once

#include <filesystem>
#include <map>

#include "voxdiff/env.hpp"
#include "voxdiff/serialize.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace voxdiff {

// ---------------------------------------------------------------------------
// "VDPE" episode container: magic, u32 section count, then named sections.
// Section layout: u32 name length, name bytes, u8 dtype (0=u8, 1=i32, 2=f32,
// 3=f64), u32 rank, u64 extents, little-endian payload.

enum class SectionDtype : uint8_t { u8 = 0, i32 = 1, f32 = 2, f64 = 3 };

struct EpisodeSection {
    std::string name;
    SectionDtype dtype;
    std::vector<int64_t> extents;
    std::vector<uint8_t> bytes;  // raw little-endian payload

    int64_t count() const {
        int64_t n = 1;
        for (int64_t e : extents) n *= e;
        return n;
    }
};

namespace detail {

inline size_t dtype_size(SectionDtype d) {
    switch (d) {
        case SectionDtype::u8: return 1;
        case SectionDtype::i32: return 4;
        case SectionDtype::f32: return 4;
        case SectionDtype::f64: return 8;
    }
    throw IoError("bad section dtype");
}

inline void write_section(std::ostream& os, const EpisodeSection& s) {
    write_le<uint32_t>(os, static_cast<uint32_t>(s.name.size()));
    os.write(s.name.data(), static_cast<std::streamsize>(s.name.size()));
    write_le<uint8_t>(os, static_cast<uint8_t>(s.dtype));
    write_le<uint32_t>(os, static_cast<uint32_t>(s.extents.size()));
    for (int64_t e : s.extents) write_le<uint64_t>(os, static_cast<uint64_t>(e));
    os.write(reinterpret_cast<const char*>(s.bytes.data()),
             static_cast<std::streamsize>(s.bytes.size()));
}

inline EpisodeSection read_section(std::istream& is) {
    EpisodeSection s;
    uint32_t name_len = read_le<uint32_t>(is);
    if (name_len > 256) throw IoError("implausible section name length");
    s.name.resize(name_len);
    is.read(s.name.data(), name_len);
    s.dtype = static_cast<SectionDtype>(read_le<uint8_t>(is));
    uint32_t rank = read_le<uint32_t>(is);
    if (rank > 16) throw IoError("implausible section rank");
    s.extents.resize(rank);
    for (auto& e : s.extents) e = static_cast<int64_t>(read_le<uint64_t>(is));
    const size_t nbytes = static_cast<size_t>(s.count()) * dtype_size(s.dtype);
    s.bytes.resize(nbytes);
    is.read(reinterpret_cast<char*>(s.bytes.data()), static_cast<std::streamsize>(nbytes));
    if (!is) throw IoError("truncated episode section: " + s.name);
    return s;
}

template <class T>
std::vector<uint8_t> pack_le(const std::vector<T>& values) {
    std::vector<uint8_t> out(values.size() * sizeof(T));
    std::memcpy(out.data(), values.data(), out.size());  // little-endian host
    return out;
}

template <class T>
std::vector<T> unpack_le(const std::vector<uint8_t>& bytes) {
    std::vector<T> out(bytes.size() / sizeof(T));
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

}  // namespace detail

inline void write_episode(std::ostream& os, const Episode& ep) {
    const int64_t T = ep.length() > 0 ? ep.length() : static_cast<int64_t>(ep.frames.size());
    const int64_t cams = static_cast<int64_t>(ep.cams.size());
    const int64_t H = ep.height, W = ep.width;

    std::vector<EpisodeSection> sections;
    {
        EpisodeSection s{"frames", SectionDtype::u8, {static_cast<int64_t>(ep.frames.size()), cams, H, W, 3}, {}};
        s.bytes.reserve(static_cast<size_t>(s.count()));
        for (const auto& views : ep.frames)
            for (const auto& v : views) s.bytes.insert(s.bytes.end(), v.rgb.begin(), v.rgb.end());
        sections.push_back(std::move(s));
    }
    {
        EpisodeSection s{"depth", SectionDtype::f32, {static_cast<int64_t>(ep.frames.size()), cams, H, W}, {}};
        std::vector<float> vals;
        vals.reserve(static_cast<size_t>(s.count()));
        for (const auto& views : ep.frames)
            for (const auto& v : views) vals.insert(vals.end(), v.depth.begin(), v.depth.end());
        s.bytes = detail::pack_le(vals);
        sections.push_back(std::move(s));
    }
    {
        EpisodeSection s{"proprio", SectionDtype::f32, {static_cast<int64_t>(ep.proprio.size()), 8}, {}};
        std::vector<float> vals;
        for (const auto& p : ep.proprio)
            for (Scalar v : p) vals.push_back(static_cast<float>(v));
        s.bytes = detail::pack_le(vals);
        sections.push_back(std::move(s));
    }
    {
        EpisodeSection s{"actions", SectionDtype::f32, {T, 7}, {}};
        std::vector<float> vals;
        for (const auto& a : ep.actions)
            for (Scalar v : a) vals.push_back(static_cast<float>(v));
        s.bytes = detail::pack_le(vals);
        sections.push_back(std::move(s));
    }
    {
        EpisodeSection s{"gripper_events", SectionDtype::f32,
                         {static_cast<int64_t>(ep.gripper_events.size()), 4}, {}};
        std::vector<float> vals;
        for (const auto& [t, p] : ep.gripper_events) {
            vals.push_back(static_cast<float>(t));
            vals.push_back(static_cast<float>(p.x));
            vals.push_back(static_cast<float>(p.y));
            vals.push_back(static_cast<float>(p.z));
        }
        s.bytes = detail::pack_le(vals);
        sections.push_back(std::move(s));
    }
    {
        EpisodeSection s{"task_id", SectionDtype::i32, {1}, {}};
        s.bytes = detail::pack_le(std::vector<int32_t>{static_cast<int32_t>(ep.task_id)});
        sections.push_back(std::move(s));
    }
    {
        EpisodeSection s{"success", SectionDtype::u8, {1}, {}};
        s.bytes = {static_cast<uint8_t>(ep.success ? 1 : 0)};
        sections.push_back(std::move(s));
    }

    os.write("VDPE", 4);
    detail::write_le<uint32_t>(os, static_cast<uint32_t>(sections.size()));
    for (const auto& s : sections) detail::write_section(os, s);
    if (!os) throw IoError("failed writing episode");
}

/// Episode as read back from disk (decoded sections, f32 payloads widened).
struct StoredEpisode {
    int64_t frames_t = 0, n_cams = 0, height = 0, width = 0;
    std::vector<uint8_t> frames;                    // [T, cams, H, W, 3]
    std::vector<float> depth;                       // [T, cams, H, W]
    std::vector<std::array<Scalar, 8>> proprio;
    std::vector<std::array<float, 7>> actions;      // f32 exactly as stored
    std::vector<std::pair<int64_t, Vec3>> gripper_events;
    int64_t task_id = 0;
    bool success = false;

    int64_t length() const { return static_cast<int64_t>(actions.size()); }
    const uint8_t* frame_ptr(int64_t t, int64_t cam) const {
        return frames.data() + ((t * n_cams + cam) * height * width * 3);
    }
    const float* depth_ptr(int64_t t, int64_t cam) const {
        return depth.data() + ((t * n_cams + cam) * height * width);
    }
    std::vector<Vec3> event_positions() const {
        std::vector<Vec3> out;
        for (const auto& [t, p] : gripper_events) out.push_back(p);
        return out;
    }
};

inline StoredEpisode read_episode(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "VDPE", 4) != 0) throw IoError("bad episode magic");
    const uint32_t n_sections = detail::read_le<uint32_t>(is);
    std::map<std::string, EpisodeSection> sections;
    for (uint32_t i = 0; i < n_sections; ++i) {
        EpisodeSection s = detail::read_section(is);
        sections[s.name] = std::move(s);
    }
    StoredEpisode ep;
    {
        const auto& s = sections.at("frames");
        ep.frames_t = s.extents.at(0);
        ep.n_cams = s.extents.at(1);
        ep.height = s.extents.at(2);
        ep.width = s.extents.at(3);
        ep.frames = s.bytes;
    }
    ep.depth = detail::unpack_le<float>(sections.at("depth").bytes);
    {
        auto vals = detail::unpack_le<float>(sections.at("proprio").bytes);
        for (size_t i = 0; i + 8 <= vals.size(); i += 8) {
            std::array<Scalar, 8> p;
            for (int j = 0; j < 8; ++j) p[static_cast<size_t>(j)] = vals[i + static_cast<size_t>(j)];
            ep.proprio.push_back(p);
        }
    }
    {
        auto vals = detail::unpack_le<float>(sections.at("actions").bytes);
        for (size_t i = 0; i + 7 <= vals.size(); i += 7) {
            std::array<float, 7> a;
            for (int j = 0; j < 7; ++j) a[static_cast<size_t>(j)] = vals[i + static_cast<size_t>(j)];
            ep.actions.push_back(a);
        }
    }
    {
        auto vals = detail::unpack_le<float>(sections.at("gripper_events").bytes);
        for (size_t i = 0; i + 4 <= vals.size(); i += 4)
            ep.gripper_events.emplace_back(static_cast<int64_t>(vals[i]),
                                           Vec3{vals[i + 1], vals[i + 2], vals[i + 3]});
    }
    ep.task_id = detail::unpack_le<int32_t>(sections.at("task_id").bytes).at(0);
    ep.success = sections.at("success").bytes.at(0) != 0;
    return ep;
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest.json + per-episode .vdpe files + calibration

struct ActionNorm {
    std::array<Scalar, 7> lo{};
    std::array<Scalar, 7> hi{};

    // Actions normalize to [-1, 1]; degenerate dimensions map to 0.
    Scalar normalize(Scalar v, int d) const {
        const Scalar span = hi[static_cast<size_t>(d)] - lo[static_cast<size_t>(d)];
        if (span < 1e-9) return 0.0;
        return 2.0 * (v - lo[static_cast<size_t>(d)]) / span - 1.0;
    }
    Scalar denormalize(Scalar v, int d) const {
        const Scalar span = hi[static_cast<size_t>(d)] - lo[static_cast<size_t>(d)];
        if (span < 1e-9) return lo[static_cast<size_t>(d)];
        return lo[static_cast<size_t>(d)] + (v + 1.0) * 0.5 * span;
    }
};

struct DatasetManifest {
    int64_t episodes = 0;
    int64_t image_size = 0;
    int64_t n_cameras = 0;
    uint64_t seed = 0;
    ActionNorm norm;
    std::vector<std::string> episode_files;
    std::vector<std::string> camera_files;
    std::string grid_file = "grid.json";
    int64_t successes = 0;
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["format"] = "voxdiff-dataset-v1";
    j["dtype"] = "f32 little-endian";
    j["episodes"] = m.episodes;
    j["image_size"] = m.image_size;
    j["n_cameras"] = m.n_cameras;
    j["seed"] = m.seed;
    j["successes"] = m.successes;
    j["action_norm"] = {{"min", m.norm.lo}, {"max", m.norm.hi}};
    j["episode_files"] = m.episode_files;
    j["camera_files"] = m.camera_files;
    j["grid_file"] = m.grid_file;
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    if (j.at("format").get<std::string>() != "voxdiff-dataset-v1")
        throw IoError("unsupported dataset format: " + j.at("format").get<std::string>());
    DatasetManifest m;
    m.episodes = j.at("episodes").get<int64_t>();
    m.image_size = j.at("image_size").get<int64_t>();
    m.n_cameras = j.at("n_cameras").get<int64_t>();
    m.seed = j.at("seed").get<uint64_t>();
    m.successes = j.value("successes", int64_t{0});
    auto lo = j.at("action_norm").at("min").get<std::vector<Scalar>>();
    auto hi = j.at("action_norm").at("max").get<std::vector<Scalar>>();
    for (int d = 0; d < 7; ++d) {
        m.norm.lo[static_cast<size_t>(d)] = lo.at(static_cast<size_t>(d));
        m.norm.hi[static_cast<size_t>(d)] = hi.at(static_cast<size_t>(d));
    }
    m.episode_files = j.at("episode_files").get<std::vector<std::string>>();
    m.camera_files = j.at("camera_files").get<std::vector<std::string>>();
    m.grid_file = j.at("grid_file").get<std::string>();
    return m;
}

struct Dataset {
    DatasetManifest manifest;
    std::vector<StoredEpisode> episodes;
    std::vector<CameraModel> cameras;
    VoxelGrid grid;
};

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const fs::path root(dir);
    std::ifstream mf(root / "manifest.json");
    if (!mf) throw IoError("dataset manifest not found: " + (root / "manifest.json").string());
    nlohmann::json j;
    mf >> j;
    Dataset ds;
    ds.manifest = manifest_from_json(j);
    for (const auto& f : ds.manifest.camera_files) ds.cameras.push_back(load_camera((root / f).string()));
    ds.grid = load_grid((root / ds.manifest.grid_file).string());
    ds.episodes.reserve(ds.manifest.episode_files.size());
    for (const auto& f : ds.manifest.episode_files) {
        std::ifstream is(root / f, std::ios::binary);
        if (!is) throw IoError("episode file missing: " + (root / f).string());
        ds.episodes.push_back(read_episode(is));
    }
    return ds;
}

struct GenerateOptions {
    int64_t n_episodes = 100;
    uint64_t seed = 1;
    int64_t image_size = 64;
    int64_t n_cameras = 1;
    int64_t max_steps = 60;
    int64_t task_id = 0;
    VoxelGrid grid{{-0.2, -0.2, 0.0}, {0.2, 0.2, 0.4}, 0.01, {40, 40, 40}};
};

/// Expert demonstrations written to out_dir. Episodes are generated with
/// independent per-episode seed streams and serialized in index order, so
/// parallel generation is byte-identical to serial.
inline DatasetManifest generate_dataset(const GenerateOptions& opt, const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    const fs::path root(out_dir);
    {
        std::ofstream probe(root / ".write_probe");
        if (!probe) throw IoError("dataset path not writable: " + out_dir);
    }
    fs::remove(root / ".write_probe", ec);

    std::vector<CameraModel> cams = make_default_cameras(opt.n_cameras, opt.image_size);
    std::vector<Episode> eps(static_cast<size_t>(opt.n_episodes));
    std::vector<uint8_t> ok(static_cast<size_t>(opt.n_episodes), 0);

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < opt.n_episodes; ++i) {
        const uint64_t ep_seed = Rng::derive(opt.seed, static_cast<uint64_t>(i));
        Scene scene = make_scene(ep_seed, opt.task_id);
        RolloutResult r = rollout(expert_policy(), scene, cams, opt.max_steps);
        eps[static_cast<size_t>(i)] = std::move(r.episode);
        ok[static_cast<size_t>(i)] = r.success ? 1 : 0;
    }

    DatasetManifest m;
    m.episodes = opt.n_episodes;
    m.image_size = opt.image_size;
    m.n_cameras = opt.n_cameras;
    m.seed = opt.seed;
    for (int d = 0; d < 7; ++d) {
        m.norm.lo[static_cast<size_t>(d)] = 0.0;
        m.norm.hi[static_cast<size_t>(d)] = 0.0;
    }
    // Stats over the f32 values exactly as stored.
    bool first = true;
    for (const auto& ep : eps)
        for (const auto& a : ep.actions)
            for (int d = 0; d < 7; ++d) {
                const Scalar v = static_cast<float>(a[static_cast<size_t>(d)]);
                if (first) {
                    m.norm.lo[static_cast<size_t>(d)] = v;
                    m.norm.hi[static_cast<size_t>(d)] = v;
                } else {
                    m.norm.lo[static_cast<size_t>(d)] = std::min(m.norm.lo[static_cast<size_t>(d)], v);
                    m.norm.hi[static_cast<size_t>(d)] = std::max(m.norm.hi[static_cast<size_t>(d)], v);
                }
                if (d == 6) first = false;
            }

    for (int64_t i = 0; i < opt.n_episodes; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "ep_%05lld.vdpe", static_cast<long long>(i));
        m.episode_files.emplace_back(name);
        std::ofstream os(root / name, std::ios::binary);
        if (!os) throw IoError("cannot write episode file: " + (root / name).string());
        write_episode(os, eps[static_cast<size_t>(i)]);
        m.successes += ok[static_cast<size_t>(i)];
    }
    for (size_t c = 0; c < cams.size(); ++c) {
        std::string name = "camera_" + std::to_string(c) + ".json";
        save_camera((root / name).string(), cams[c]);
        m.camera_files.push_back(name);
    }
    save_grid((root / m.grid_file).string(), opt.grid);
    std::ofstream mf(root / "manifest.json");
    if (!mf) throw IoError("cannot write manifest: " + out_dir);
    mf << manifest_to_json(m).dump(2) << "\n";
    return m;
}

// ---------------------------------------------------------------------------
// PPM export for humans

inline void write_ppm(const std::string& path, const uint8_t* rgb, int64_t width, int64_t height) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write image: " + path);
    os << "P6\n" << width << " " << height << "\n255\n";
    os.write(reinterpret_cast<const char*>(rgb), static_cast<std::streamsize>(width * height * 3));
}

}  // namespace voxdiff
