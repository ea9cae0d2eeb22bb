#pragma once

#include <array>
#include <fstream>

#include "json.hpp"
#include "voxdiff/tensor.hpp"

namespace voxdiff {

struct Vec3 {
    Scalar x = 0, y = 0, z = 0;

    Vec3() = default;
    Vec3(Scalar x_, Scalar y_, Scalar z_) : x(x_), y(y_), z(z_) {}

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(Scalar s) const { return {x * s, y * s, z * s}; }
    Scalar dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    Scalar norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        Scalar n = norm();
        return {x / n, y / n, z / n};
    }
};

using Mat3 = std::array<Scalar, 9>;  // row-major

inline Vec3 mat3_mul(const Mat3& m, const Vec3& v) {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
}

inline Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
    Mat3 c{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            Scalar acc = 0;
            for (int k = 0; k < 3; ++k) acc += a[i * 3 + k] * b[k * 3 + j];
            c[i * 3 + j] = acc;
        }
    return c;
}

inline Scalar mat3_det(const Mat3& m) {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
}

/// Metric voxel grid: a cuboid [r_min, r_max] split into dims voxels of edge
/// length s. Index (i, j, k) maps to world corner (i*s + x_min, ...).
struct VoxelGrid {
    Vec3 r_min, r_max;
    Scalar s = 0;
    std::array<int64_t, 3> dims{};

    VoxelGrid() = default;
    VoxelGrid(Vec3 r_min_, Vec3 r_max_, Scalar s_, std::array<int64_t, 3> dims_)
        : r_min(r_min_), r_max(r_max_), s(s_), dims(dims_) {
        validate();
    }

    void validate() const {
        if (!(r_min.x < r_max.x && r_min.y < r_max.y && r_min.z < r_max.z))
            throw ConfigError("voxel grid: r_min must be componentwise below r_max");
        if (s <= 0) throw ConfigError("voxel grid: voxel size must be positive");
        const Scalar slack = s * 1e-6;
        const Scalar ext[3] = {r_max.x - r_min.x, r_max.y - r_min.y, r_max.z - r_min.z};
        for (int a = 0; a < 3; ++a) {
            if (dims[static_cast<size_t>(a)] < 1) throw ConfigError("voxel grid: dims must be positive");
            if (static_cast<Scalar>(dims[static_cast<size_t>(a)]) * s > ext[a] + slack)
                throw ConfigError("voxel grid: dims do not fit declared bounds on axis " +
                                  std::to_string(a));
        }
    }

    int64_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
    int64_t flat_index(int64_t i, int64_t j, int64_t k) const {
        return (i * dims[1] + j) * dims[2] + k;
    }
};

/// Pinhole camera: K intrinsics (pixels), P = [R | t] world-to-camera
/// extrinsics (meters), image size in pixels.
struct CameraModel {
    Mat3 K{};
    std::array<Scalar, 12> P{};  // row-major 3x4
    int64_t width = 0, height = 0;

    CameraModel() = default;
    CameraModel(Mat3 k, std::array<Scalar, 12> p, int64_t w, int64_t h)
        : K(k), P(p), width(w), height(h) {
        validate();
    }

    Mat3 rotation() const {
        return {P[0], P[1], P[2], P[4], P[5], P[6], P[8], P[9], P[10]};
    }
    Vec3 translation() const { return {P[3], P[7], P[11]}; }

    void validate() const {
        if (width < 1 || height < 1) throw ConfigError("camera: image size must be positive");
        for (Scalar v : K)
            if (!std::isfinite(v)) throw ConfigError("camera: non-finite intrinsics");
        for (Scalar v : P)
            if (!std::isfinite(v)) throw ConfigError("camera: non-finite extrinsics");
        if (K[3] != 0 || K[6] != 0 || K[7] != 0 || K[0] <= 0 || K[4] <= 0 || K[8] <= 0)
            throw ConfigError("camera: K must be upper-triangular with positive diagonal");
        Mat3 r = rotation();
        Mat3 rt = {r[0], r[3], r[6], r[1], r[4], r[7], r[2], r[5], r[8]};
        Mat3 rrt = mat3_mul(r, rt);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                Scalar want = i == j ? 1.0 : 0.0;
                if (std::abs(rrt[i * 3 + j] - want) > 1e-9)
                    throw ConfigError("camera: rotation block is not orthonormal");
            }
        if (std::abs(mat3_det(r) - 1.0) > 1e-9)
            throw ConfigError("camera: rotation block must have determinant +1");
    }
};

inline constexpr Scalar kDepthEps = 1e-6;  // meters; rejects points at/behind the camera plane

/// World position of a voxel corner (the literal grid parameterization).
/// Set centered to sample voxel centers (+s/2 per axis) instead.
inline Vec3 voxel_to_world(const VoxelGrid& grid, int64_t i, int64_t j, int64_t k,
                           bool centered = false) {
    if (i < 0 || i >= grid.dims[0] || j < 0 || j >= grid.dims[1] || k < 0 || k >= grid.dims[2])
        throw std::out_of_range("voxel_to_world: index (" + std::to_string(i) + ", " +
                                std::to_string(j) + ", " + std::to_string(k) + ") outside grid");
    Scalar half = centered ? grid.s * 0.5 : 0.0;
    return {static_cast<Scalar>(i) * grid.s + grid.r_min.x + half,
            static_cast<Scalar>(j) * grid.s + grid.r_min.y + half,
            static_cast<Scalar>(k) * grid.s + grid.r_min.z + half};
}

struct PixelProjection {
    Scalar u = 0, v = 0;
    bool valid = false;
    Scalar depth = 0;  // camera-frame depth, meters
};

/// Homogeneous projection [u, v, 1]^T ~ K P [x, y, z, 1]^T. A point is valid
/// when its camera-frame depth exceeds kDepthEps and (u, v) lands inside
/// [0, width) x [0, height). Invalid points report uv = (-1, -1).
inline PixelProjection world_to_image(const CameraModel& cam, const Vec3& p) {
    const auto& P = cam.P;
    Vec3 q{P[0] * p.x + P[1] * p.y + P[2] * p.z + P[3],
           P[4] * p.x + P[5] * p.y + P[6] * p.z + P[7],
           P[8] * p.x + P[9] * p.y + P[10] * p.z + P[11]};
    PixelProjection out;
    out.depth = q.z;
    if (q.z <= kDepthEps) {
        out.u = -1;
        out.v = -1;
        return out;
    }
    Vec3 h = mat3_mul(cam.K, q);
    out.u = h.x / h.z;
    out.v = h.y / h.z;
    out.valid = out.u >= 0 && out.u < static_cast<Scalar>(cam.width) && out.v >= 0 &&
                out.v < static_cast<Scalar>(cam.height);
    return out;
}

struct GridProjection {
    Tensor uv;                   // [X, Y, Z, 2]
    std::vector<uint8_t> valid;  // flat X*Y*Z
    std::vector<Scalar> depth;   // flat X*Y*Z, camera-frame
    int64_t valid_count = 0;
};

/// Projects every voxel reference point into one camera.
inline GridProjection project_grid(const VoxelGrid& grid, const CameraModel& cam,
                                   bool centered = false) {
    GridProjection out;
    const int64_t n = grid.voxel_count();
    out.uv = Tensor::zeros({grid.dims[0], grid.dims[1], grid.dims[2], 2});
    out.valid.assign(static_cast<size_t>(n), 0);
    out.depth.assign(static_cast<size_t>(n), 0.0);
    Scalar* puv = out.uv.data();
    int64_t idx = 0;
    for (int64_t i = 0; i < grid.dims[0]; ++i)
        for (int64_t j = 0; j < grid.dims[1]; ++j)
            for (int64_t k = 0; k < grid.dims[2]; ++k, ++idx) {
                PixelProjection p = world_to_image(cam, voxel_to_world(grid, i, j, k, centered));
                puv[idx * 2] = p.u;
                puv[idx * 2 + 1] = p.v;
                out.valid[static_cast<size_t>(idx)] = p.valid ? 1 : 0;
                out.depth[static_cast<size_t>(idx)] = p.depth;
                if (p.valid) ++out.valid_count;
            }
    return out;
}

/// Rotates the camera about its own center: yaw about the camera y axis
/// (horizontal pan), pitch about the camera x axis (vertical tilt).
/// Intrinsics are untouched.
inline CameraModel rotate_camera(const CameraModel& cam, Scalar yaw_deg, Scalar pitch_deg) {
    const Scalar d2r = 3.14159265358979323846 / 180.0;
    const Scalar cy = std::cos(yaw_deg * d2r), sy = std::sin(yaw_deg * d2r);
    const Scalar cp = std::cos(pitch_deg * d2r), sp = std::sin(pitch_deg * d2r);
    Mat3 ry = {cy, 0, sy, 0, 1, 0, -sy, 0, cy};
    Mat3 rp = {1, 0, 0, 0, cp, -sp, 0, sp, cp};
    Mat3 rd = mat3_mul(rp, ry);
    Mat3 r = mat3_mul(rd, cam.rotation());
    Vec3 t = mat3_mul(rd, cam.translation());
    CameraModel out = cam;
    out.P = {r[0], r[1], r[2], t.x, r[3], r[4], r[5], t.y, r[6], r[7], r[8], t.z};
    return out;
}

/// Camera placed at eye looking at target, +v pointing down in world z.
inline CameraModel make_lookat_camera(Vec3 eye, Vec3 target, Scalar focal, int64_t width,
                                      int64_t height) {
    Vec3 fwd = (target - eye).normalized();
    Vec3 world_up{0, 0, 1};
    if (std::abs(fwd.z) > 1.0 - 1e-9) world_up = {0, 1, 0};  // looking straight up/down
    Vec3 right = fwd.cross(world_up).normalized();
    Vec3 down = fwd.cross(right).normalized();  // camera +y, toward image bottom
    Mat3 r = {right.x, right.y, right.z, down.x, down.y, down.z, fwd.x, fwd.y, fwd.z};
    Vec3 t = mat3_mul(r, eye * -1.0);
    Mat3 k = {focal, 0, static_cast<Scalar>(width) / 2.0,
              0,     focal, static_cast<Scalar>(height) / 2.0,
              0,     0,     1};
    return CameraModel(k, {r[0], r[1], r[2], t.x, r[3], r[4], r[5], t.y, r[6], r[7], r[8], t.z},
                       width, height);
}

// ---------------------------------------------------------------------------
// Calibration files (JSON; units: meters, pixels, degrees)

inline nlohmann::json camera_to_json(const CameraModel& cam) {
    nlohmann::json j;
    j["K"] = std::vector<Scalar>(cam.K.begin(), cam.K.end());
    j["P"] = std::vector<Scalar>(cam.P.begin(), cam.P.end());  // world -> camera
    j["image_size"] = {cam.width, cam.height};
    return j;
}

inline CameraModel camera_from_json(const nlohmann::json& j) {
    auto kv = j.at("K").get<std::vector<Scalar>>();
    auto pv = j.at("P").get<std::vector<Scalar>>();
    if (kv.size() != 9 || pv.size() != 12)
        throw ConfigError("calibration: K needs 9 values and P needs 12");
    Mat3 k;
    std::copy(kv.begin(), kv.end(), k.begin());
    std::array<Scalar, 12> p;
    std::copy(pv.begin(), pv.end(), p.begin());
    auto sz = j.at("image_size").get<std::vector<int64_t>>();
    return CameraModel(k, p, sz.at(0), sz.at(1));
}

inline nlohmann::json grid_to_json(const VoxelGrid& g) {
    nlohmann::json j;
    j["r_min"] = {g.r_min.x, g.r_min.y, g.r_min.z};
    j["r_max"] = {g.r_max.x, g.r_max.y, g.r_max.z};
    j["s"] = g.s;
    j["dims"] = {g.dims[0], g.dims[1], g.dims[2]};
    return j;
}

inline VoxelGrid grid_from_json(const nlohmann::json& j) {
    auto rmin = j.at("r_min").get<std::vector<Scalar>>();
    auto rmax = j.at("r_max").get<std::vector<Scalar>>();
    auto dims = j.at("dims").get<std::vector<int64_t>>();
    if (rmin.size() != 3 || rmax.size() != 3 || dims.size() != 3)
        throw ConfigError("grid file: r_min/r_max/dims need 3 entries each");
    return VoxelGrid({rmin[0], rmin[1], rmin[2]}, {rmax[0], rmax[1], rmax[2]},
                     j.at("s").get<Scalar>(), {dims[0], dims[1], dims[2]});
}

inline void save_camera(const std::string& path, const CameraModel& cam) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for write: " + path);
    os << camera_to_json(cam).dump(2) << "\n";
}

inline CameraModel load_camera(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open for read: " + path);
    nlohmann::json j;
    is >> j;
    return camera_from_json(j);
}

inline void save_grid(const std::string& path, const VoxelGrid& g) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for write: " + path);
    os << grid_to_json(g).dump(2) << "\n";
}

inline VoxelGrid load_grid(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open for read: " + path);
    nlohmann::json j;
    is >> j;
    return grid_from_json(j);
}

}  // namespace voxdiff
