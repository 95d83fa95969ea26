/* Copyright 2026 The vla4d Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#include "vla4d/occgrid.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace vla4d::occgrid {

static_assert(std::endian::native == std::endian::little,
              "binary array I/O assumes a little-endian host");

GridSpec GridSpec::centered(int nx, int ny, int nz, double voxel_size, double dz) {
  GridSpec s;
  s.nx = nx;
  s.ny = ny;
  s.nz = nz;
  s.voxel_size = voxel_size;
  s.dz = dz;
  s.x_min = -(nx / 2) * voxel_size;
  s.y_min = -(ny / 2) * voxel_size;
  s.z_min = 0.0;
  s.validate();
  return s;
}

void GridSpec::validate() const {
  if (nx < 1 || ny < 1 || nz < 1) throw ConfigError("grid dims must be >= 1");
  if (!(voxel_size > 0) || !(dz > 0)) throw ConfigError("voxel sizes must be > 0");
  const auto ex = static_cast<int>(std::floor((0.0 - x_min) / voxel_size));
  const auto ey = static_cast<int>(std::floor((0.0 - y_min) / voxel_size));
  const auto ez = static_cast<int>(std::floor((0.0 - z_min) / dz));
  if (ex != nx / 2 || ey != ny / 2 || ez != 0) {
    throw ConfigError("grid extent must place the ego origin at (nx/2, ny/2, 0)");
  }
}

const std::vector<std::string>& default_class_names() {
  static const std::vector<std::string> names = {
      "free", "car", "truck", "pedestrian", "bicycle",
      "road", "building", "vegetation", "barrier"};
  return names;
}

bool is_movable(int class_id) {
  return class_id == kCar || class_id == kTruck || class_id == kPedestrian ||
         class_id == kBicycle;
}

OccupancyGrid::OccupancyGrid(GridSpec spec, std::vector<std::uint8_t> labels,
                             std::vector<std::string> class_names)
    : spec_(spec), labels_(std::move(labels)), class_names_(std::move(class_names)) {
  spec_.validate();
  if (class_names_.empty() || class_names_[0] != "free") {
    throw ConfigError("class id 0 must be \"free\"");
  }
  if (static_cast<std::int64_t>(labels_.size()) != spec_.voxel_count()) {
    throw ShapeError("label count " + std::to_string(labels_.size()) +
                     " does not match grid " + std::to_string(spec_.voxel_count()));
  }
  for (auto l : labels_) {
    if (l >= class_names_.size()) {
      throw ConfigError("label " + std::to_string(l) + " outside class set");
    }
  }
}

OccupancyGrid::OccupancyGrid(GridSpec spec, std::vector<std::string> class_names)
    : OccupancyGrid(spec, std::vector<std::uint8_t>(spec.voxel_count(), 0),
                    std::move(class_names)) {}

double OccupancyGrid::free_fraction() const {
  std::int64_t n = 0;
  for (auto l : labels_) n += (l == kFree);
  return static_cast<double>(n) / static_cast<double>(labels_.size());
}

FlowField::FlowField(GridSpec spec, std::vector<double> velocity,
                     std::vector<std::uint8_t> dynamic)
    : spec_(spec), velocity_(std::move(velocity)), dynamic_(std::move(dynamic)) {
  const auto n = spec_.voxel_count();
  if (static_cast<std::int64_t>(velocity_.size()) != 2 * n ||
      static_cast<std::int64_t>(dynamic_.size()) != n) {
    throw ShapeError("flow field arrays do not match grid");
  }
  for (std::int64_t i = 0; i < n; ++i) {
    const double vx = velocity_[2 * i], vy = velocity_[2 * i + 1];
    if (!std::isfinite(vx) || !std::isfinite(vy)) {
      throw ConfigError("non-finite flow velocity");
    }
    if (!dynamic_[i] && (vx != 0.0 || vy != 0.0)) {
      throw ConfigError("static voxel carries non-zero velocity");
    }
  }
}

FlowField::FlowField(GridSpec spec)
    : FlowField(spec, std::vector<double>(2 * spec.voxel_count(), 0.0),
                std::vector<std::uint8_t>(spec.voxel_count(), 0)) {}

void FlowField::check_against(const OccupancyGrid& occ) const {
  if (!(occ.spec() == spec_)) throw SpecMismatch("flow/occupancy grid specs differ");
  for (std::size_t i = 0; i < dynamic_.size(); ++i) {
    if (dynamic_[i] && occ.labels()[i] == kFree) {
      throw FormatError("dynamic flow on a free voxel");
    }
  }
}

bool TrajectoryPlan::all_finite() const {
  for (const auto& w : waypoints) {
    if (!std::isfinite(w[0]) || !std::isfinite(w[1])) return false;
  }
  return true;
}

double TrajectoryPlan::path_length() const {
  double len = 0, px = 0, py = 0;
  for (const auto& w : waypoints) {
    len += std::hypot(w[0] - px, w[1] - py);
    px = w[0];
    py = w[1];
  }
  return len;
}

OccToken world_to_grid(const std::array<double, 3>& p, const GridSpec& spec) {
  const double fx = std::floor((p[0] - spec.x_min) / spec.voxel_size);
  const double fy = std::floor((p[1] - spec.y_min) / spec.voxel_size);
  const double fz = std::floor((p[2] - spec.z_min) / spec.dz);
  if (!(fx >= 0 && fy >= 0 && fz >= 0 && fx < spec.nx && fy < spec.ny &&
        fz < spec.nz)) {
    std::ostringstream os;
    os << "point (" << p[0] << ", " << p[1] << ", " << p[2]
       << ") lies outside the grid volume";
    throw OutOfBounds(os.str());
  }
  return {static_cast<int>(fx), static_cast<int>(fy), static_cast<int>(fz)};
}

std::array<double, 3> grid_to_world_center(const OccToken& t, const GridSpec& spec) {
  return {spec.x_min + (t.x + 0.5) * spec.voxel_size,
          spec.y_min + (t.y + 0.5) * spec.voxel_size,
          spec.z_min + (t.z + 0.5) * spec.dz};
}

std::string render_occ_token(const OccToken& t) {
  return "<OCC>(" + std::to_string(t.x) + ", " + std::to_string(t.y) + ", " +
         std::to_string(t.z) + ")</OCC>";
}

namespace {

class Cursor {
 public:
  explicit Cursor(std::string_view s) : s_(s) {}
  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  void expect(std::string_view lit) {
    if (s_.substr(pos_, lit.size()) != lit) {
      throw ParseError("expected \"" + std::string(lit) + "\"", pos_);
    }
    pos_ += lit.size();
  }
  int integer() {
    const std::size_t start = pos_;
    long long v = 0;
    while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) {
      v = v * 10 + (s_[pos_] - '0');
      if (v > 1'000'000'000) throw ParseError("integer too large", start);
      ++pos_;
    }
    if (pos_ == start) throw ParseError("expected a non-negative integer", pos_);
    return static_cast<int>(v);
  }
  bool done() const { return pos_ == s_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view s_;
  std::size_t pos_ = 0;
};

}  // namespace

OccToken parse_occ_token(std::string_view s) {
  Cursor c(s);
  c.skip_ws();
  c.expect("<OCC>");
  c.skip_ws();
  c.expect("(");
  OccToken t;
  c.skip_ws();
  t.x = c.integer();
  c.skip_ws();
  c.expect(",");
  c.skip_ws();
  t.y = c.integer();
  c.skip_ws();
  c.expect(",");
  c.skip_ws();
  t.z = c.integer();
  c.skip_ws();
  c.expect(")");
  c.skip_ws();
  c.expect("</OCC>");
  c.skip_ws();
  if (!c.done()) throw ParseError("trailing characters after </OCC>", c.pos());
  return t;
}

std::optional<OccToken> find_occ_token(std::string_view text) {
  for (auto open = text.find("<OCC>"); open != std::string_view::npos; open = text.find("<OCC>", open + 1)) {
    const auto close = text.find("</OCC>", open);
    if (close == std::string_view::npos) return std::nullopt;
    try {
      return parse_occ_token(text.substr(open, close + 6 - open));
    } catch (const ParseError&) {
      // placeholder such as <OCC>(x, y, z)</OCC>; keep looking
    }
  }
  return std::nullopt;
}

// ---- binary arrays ------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'O', 'C', 'G', '1'};

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::kU8: return 1;
    case DType::kI32: return 4;
    case DType::kF32: return 4;
    case DType::kF64: return 8;
  }
  throw FormatError("unknown dtype code");
}

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t get_u32(std::istream& is, const std::filesystem::path& path) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) {
    throw FormatError("truncated header in " + path.string());
  }
  return v;
}

std::string dims_str(const std::vector<std::uint32_t>& d) {
  std::string s = "[";
  for (std::size_t i = 0; i < d.size(); ++i) s += (i ? ", " : "") + std::to_string(d[i]);
  return s + "]";
}

void check_dims(const RawArray& a, DType dtype, const std::vector<std::uint32_t>& expect,
                const std::filesystem::path& path) {
  if (a.dtype != dtype) throw FormatError("unexpected dtype in " + path.string());
  if (a.dims != expect) {
    throw FormatError("shape " + dims_str(a.dims) + " in " + path.string() +
                      " does not match expected " + dims_str(expect));
  }
}

}  // namespace

void write_array(const std::filesystem::path& path, const RawArray& a) {
  std::uint64_t count = 1;
  for (auto d : a.dims) count *= d;
  if (count * dtype_size(a.dtype) != a.bytes.size()) {
    throw ShapeError("array payload does not match dims " + dims_str(a.dims));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  put_u32(os, static_cast<std::uint32_t>(a.dtype));
  put_u32(os, static_cast<std::uint32_t>(a.dims.size()));
  put_u32(os, static_cast<std::uint32_t>(count));
  for (auto d : a.dims) put_u32(os, d);
  os.write(reinterpret_cast<const char*>(a.bytes.data()),
           static_cast<std::streamsize>(a.bytes.size()));
  if (!os) throw Error("write failed for " + path.string());
}

RawArray read_array(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("truncated header in " + path.string());
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("bad magic/version in " + path.string());
  }
  RawArray a;
  const std::uint32_t code = get_u32(is, path);
  if (code < 1 || code > 4) throw FormatError("unknown dtype code in " + path.string());
  a.dtype = static_cast<DType>(code);
  const std::uint32_t rank = get_u32(is, path);
  if (rank == 0 || rank > 8) throw FormatError("invalid rank in " + path.string());
  const std::uint32_t count = get_u32(is, path);
  std::uint64_t product = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    a.dims.push_back(get_u32(is, path));
    product *= a.dims.back();
  }
  if (product != count) {
    throw FormatError("shape header " + dims_str(a.dims) + " disagrees with element count in " +
                      path.string());
  }
  const std::uint64_t nbytes = product * dtype_size(a.dtype);
  a.bytes.resize(nbytes);
  if (!is.read(reinterpret_cast<char*>(a.bytes.data()), static_cast<std::streamsize>(nbytes))) {
    throw FormatError("truncated payload in " + path.string());
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw FormatError("trailing bytes after payload in " + path.string());
  }
  return a;
}

void write_u8(const std::filesystem::path& path, const std::vector<std::uint32_t>& dims,
              const std::vector<std::uint8_t>& values) {
  write_array(path, RawArray{DType::kU8, dims, values});
}

std::vector<std::uint8_t> read_u8(const std::filesystem::path& path,
                                  const std::vector<std::uint32_t>& expect_dims) {
  RawArray a = read_array(path);
  check_dims(a, DType::kU8, expect_dims, path);
  return std::move(a.bytes);
}

void write_f64(const std::filesystem::path& path, const std::vector<std::uint32_t>& dims,
               const std::vector<double>& values) {
  RawArray a{DType::kF64, dims, {}};
  a.bytes.resize(values.size() * 8);
  std::memcpy(a.bytes.data(), values.data(), a.bytes.size());
  write_array(path, a);
}

std::vector<double> read_f64(const std::filesystem::path& path,
                             const std::vector<std::uint32_t>& expect_dims) {
  RawArray a = read_array(path);
  check_dims(a, DType::kF64, expect_dims, path);
  std::vector<double> v(a.bytes.size() / 8);
  std::memcpy(v.data(), a.bytes.data(), a.bytes.size());
  return v;
}

namespace {
std::vector<std::uint32_t> grid_dims(const GridSpec& s) {
  return {static_cast<std::uint32_t>(s.nx), static_cast<std::uint32_t>(s.ny),
          static_cast<std::uint32_t>(s.nz)};
}
}  // namespace

void save_grid(const std::filesystem::path& path, const OccupancyGrid& grid) {
  write_u8(path, grid_dims(grid.spec()), grid.labels());
}

OccupancyGrid load_grid(const std::filesystem::path& path, const GridSpec& spec,
                        const std::vector<std::string>& class_names) {
  auto labels = read_u8(path, grid_dims(spec));
  for (auto l : labels) {
    if (l >= class_names.size()) throw FormatError("label outside class set in " + path.string());
  }
  return OccupancyGrid(spec, std::move(labels), class_names);
}

void save_flow(const std::filesystem::path& path, const FlowField& flow) {
  auto dims = grid_dims(flow.spec());
  write_u8(path.string() + ".mask", dims, flow.dynamic_mask());
  dims.push_back(2);
  write_f64(path, dims, flow.velocity());
}

FlowField load_flow(const std::filesystem::path& path, const GridSpec& spec) {
  auto dims = grid_dims(spec);
  auto mask = read_u8(path.string() + ".mask", dims);
  dims.push_back(2);
  auto vel = read_f64(path, dims);
  try {
    return FlowField(spec, std::move(vel), std::move(mask));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid flow file: ") + e.what());
  }
}

}  // namespace vla4d::occgrid
