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
#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "test_helpers.hpp"
#include "vla4d/occgrid.hpp"

namespace vla4d::occgrid {
namespace {

GridSpec spec40() { return GridSpec::centered(40, 40, 8, 1.0, 0.5); }

// Scalar reference: floor((p - min) / size) per axis.
OccToken quantise(const std::array<double, 3>& p, const GridSpec& s) {
  return {static_cast<int>(std::floor((p[0] - s.x_min) / s.voxel_size)),
          static_cast<int>(std::floor((p[1] - s.y_min) / s.voxel_size)),
          static_cast<int>(std::floor((p[2] - s.z_min) / s.dz))};
}

TEST(GridSpec, EgoOriginSitsAtHalfExtent) {
  EXPECT_EQ(world_to_grid({0, 0, 0}, GridSpec::paper()), (OccToken{100, 100, 0}));
  EXPECT_EQ(world_to_grid({0, 0, 0}, GridSpec::desk()), (OccToken{20, 20, 0}));
  const auto odd = GridSpec::centered(7, 5, 3, 0.5, 0.25);
  EXPECT_EQ(world_to_grid({0, 0, 0}, odd), (OccToken{3, 2, 0}));
}

TEST(GridSpec, ValidateRejectsBadDims) {
  GridSpec s = spec40();
  s.nz = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = spec40();
  s.dz = 0;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(WorldToGrid, CornerAndHandValue) {
  const auto s = spec40();
  EXPECT_EQ(world_to_grid({s.x_min, s.y_min, s.z_min}, s), (OccToken{0, 0, 0}));
  EXPECT_EQ(world_to_grid({3.7, -2.1, 1.2}, s), (OccToken{23, 17, 2}));
}

TEST(WorldToGrid, MatchesScalarOracleOnLattice) {
  const auto s = spec40();
  for (double x = s.x_min; x < s.x_max(); x += 0.37) {
    for (double y = s.y_min; y < s.y_max(); y += 0.41) {
      for (double z = s.z_min; z < s.z_max(); z += 0.13) {
        ASSERT_EQ(world_to_grid({x, y, z}, s), quantise({x, y, z}, s)) << x << " " << y << " " << z;
      }
    }
  }
}

TEST(WorldToGrid, OutsideVolumeThrows) {
  const auto s = spec40();
  EXPECT_THROW(world_to_grid({s.x_max() + 0.1, 0, 0}, s), OutOfBounds);
  EXPECT_THROW(world_to_grid({0, s.y_min - 0.1, 0}, s), OutOfBounds);
  EXPECT_THROW(world_to_grid({0, 0, -0.01}, s), OutOfBounds);
}

TEST(WorldToGrid, CentreRoundTrip) {
  const auto s = spec40();
  for (int x = 0; x < s.nx; x += 3) {
    for (int z = 0; z < s.nz; ++z) {
      const OccToken t{x, s.ny - 1 - x, z};
      const auto c = grid_to_world_center(t, s);
      EXPECT_EQ(world_to_grid(c, s), t);
    }
  }
}

TEST(OccCodec, RenderExact) {
  EXPECT_EQ(render_occ_token({83, 99, 5}), "<OCC>(83, 99, 5)</OCC>");
  EXPECT_EQ(render_occ_token({0, 0, 0}), "<OCC>(0, 0, 0)</OCC>");
}

TEST(OccCodec, Parse) {
  EXPECT_EQ(parse_occ_token("<OCC>(65, 136, 7)</OCC>"), (OccToken{65, 136, 7}));
  EXPECT_EQ(parse_occ_token("<OCC>( 1,2 ,3)</OCC>"), (OccToken{1, 2, 3}));
  EXPECT_EQ(parse_occ_token("<OCC>(\t1 ,\n2, 3 )</OCC>"), (OccToken{1, 2, 3}));
}

TEST(OccCodec, MalformedInputReportsOffset) {
  try {
    parse_occ_token("<OCC>(1,2)</OCC>");
    FAIL() << "arity violation accepted";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 9u);
  }
  EXPECT_THROW(parse_occ_token("<OCC>(1,2,3)"), ParseError);
  EXPECT_THROW(parse_occ_token("OCC(1,2,3)"), ParseError);
  EXPECT_THROW(parse_occ_token("<OCC>(1,-2,3)</OCC>"), ParseError);
  EXPECT_THROW(parse_occ_token("<OCC>(1,2,3)</OCC>x"), ParseError);
}

TEST(OccCodec, RoundTripRandomTokens) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> d(0, 199);
  for (int i = 0; i < 1000; ++i) {
    const OccToken t{d(rng), d(rng), d(rng) % 16};
    ASSERT_EQ(parse_occ_token(render_occ_token(t)), t);
  }
}

TEST(OccCodec, FindInText) {
  const auto t = find_occ_token("Is the position <OCC>(4, 5, 6)</OCC> occupied?");
  ASSERT_TRUE(t.has_value());
  EXPECT_EQ(*t, (OccToken{4, 5, 6}));
  EXPECT_FALSE(find_occ_token("no token here").has_value());
  EXPECT_EQ(find_occ_token("use <OCC>(x, y, z)</OCC>; ask about <OCC>(7, 8, 1)</OCC>"), (OccToken{7, 8, 1}));
}

TEST(OccupancyGrid, RejectsLabelsOutsideClassSet) {
  const auto s = GridSpec::centered(2, 2, 1, 1.0, 1.0);
  EXPECT_THROW(OccupancyGrid(s, std::vector<std::uint8_t>{0, 1, 2, 9}), ConfigError);
  EXPECT_THROW(OccupancyGrid(s, std::vector<std::uint8_t>{0, 1, 2}), ShapeError);
  EXPECT_NO_THROW(OccupancyGrid(s, std::vector<std::uint8_t>{0, 1, 2, 8}));
}

TEST(FlowField, StaticVoxelsMustBeZero) {
  const auto s = GridSpec::centered(2, 1, 1, 1.0, 1.0);
  EXPECT_THROW(FlowField(s, {0.1, 0, 0, 0}, {0, 0}), ConfigError);
  EXPECT_THROW(FlowField(s, {NAN, 0, 0, 0}, {1, 0}), ConfigError);
  const FlowField f(s, {0.5, -1, 0, 0}, {1, 0});
  EXPECT_EQ(f.at(0, 0, 0)[1], -1.0);
  EXPECT_THROW(f.check_against(OccupancyGrid(s, std::vector<std::uint8_t>{0, 1})), FormatError);
  EXPECT_NO_THROW(f.check_against(OccupancyGrid(s, std::vector<std::uint8_t>{1, 0})));
}

TEST(TrajectoryPlan, PathLengthAndFinite) {
  TrajectoryPlan p;
  for (int i = 0; i < kPlanFrames; ++i) p.waypoints[i] = {3.0 * (i + 1), 4.0 * (i + 1)};
  EXPECT_DOUBLE_EQ(p.path_length(), 30.0);
  EXPECT_TRUE(p.all_finite());
  p.waypoints[2][0] = INFINITY;
  EXPECT_FALSE(p.all_finite());
}

class GridIo : public ::testing::Test {
 protected:
  std::filesystem::path dir = testing::scratch_dir("grid_io");
};

TEST_F(GridIo, GridRoundTripIsIdentical) {
  std::mt19937_64 rng(3);
  const auto g = testing::random_grid(spec40(), 0.3, rng);
  save_grid(dir / "occ.bin", g);
  EXPECT_EQ(load_grid(dir / "occ.bin", g.spec()), g);
}

TEST_F(GridIo, FlowRoundTripIsBitIdentical) {
  const auto s = GridSpec::centered(4, 4, 2, 1.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(s.voxel_count()) * 2, 0.0);
  std::vector<std::uint8_t> m(static_cast<std::size_t>(s.voxel_count()), 0);
  m[5] = 1;
  v[10] = 1.0 / 3.0;
  v[11] = -2.718281828459045;
  const FlowField f(s, v, m);
  save_flow(dir / "flow.bin", f);
  const FlowField back = load_flow(dir / "flow.bin", s);
  EXPECT_EQ(back, f);
}

TEST_F(GridIo, HeaderLayout) {
  write_u8(dir / "a.bin", {2, 3}, {1, 2, 3, 4, 5, 6});
  std::ifstream is(dir / "a.bin", std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), {});
  ASSERT_EQ(bytes.size(), 16u + 8u + 6u);
  EXPECT_EQ(std::string(bytes.data(), 4), "OCG1");
  EXPECT_EQ(bytes[4], 1);   // dtype u8
  EXPECT_EQ(bytes[8], 2);   // rank
  EXPECT_EQ(bytes[12], 6);  // element count
  EXPECT_EQ(bytes[16], 2);
  EXPECT_EQ(bytes[20], 3);
}

TEST_F(GridIo, TruncatedFileThrows) {
  std::mt19937_64 rng(4);
  save_grid(dir / "occ.bin", testing::random_grid(spec40(), 0.3, rng));
  const auto size = std::filesystem::file_size(dir / "occ.bin");
  std::filesystem::resize_file(dir / "occ.bin", size - 7);
  EXPECT_THROW(load_grid(dir / "occ.bin", spec40()), FormatError);
  std::filesystem::resize_file(dir / "occ.bin", 10);
  EXPECT_THROW(load_grid(dir / "occ.bin", spec40()), FormatError);
}

TEST_F(GridIo, CorruptedShapeHeaderThrows) {
  std::mt19937_64 rng(5);
  save_grid(dir / "occ.bin", testing::random_grid(spec40(), 0.3, rng));
  {
    std::fstream f(dir / "occ.bin", std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(16);
    const std::uint32_t bad = 41;
    f.write(reinterpret_cast<const char*>(&bad), 4);
  }
  EXPECT_THROW(load_grid(dir / "occ.bin", spec40()), FormatError);
}

TEST_F(GridIo, BadMagicThrows) {
  write_u8(dir / "a.bin", {1}, {7});
  {
    std::fstream f(dir / "a.bin", std::ios::binary | std::ios::in | std::ios::out);
    f.write("OCG2", 4);
  }
  EXPECT_THROW(read_u8(dir / "a.bin", {1}), FormatError);
}

TEST_F(GridIo, WrongExpectedShapeThrows) {
  write_f64(dir / "a.bin", {2, 2}, {1, 2, 3, 4});
  EXPECT_THROW(read_f64(dir / "a.bin", {4}), FormatError);
  EXPECT_THROW(read_u8(dir / "a.bin", {2, 2}), FormatError);
  EXPECT_EQ(read_f64(dir / "a.bin", {2, 2}), (std::vector<double>{1, 2, 3, 4}));
}

}  // namespace
}  // namespace vla4d::occgrid
