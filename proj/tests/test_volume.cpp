#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "instxai/keyvalue.hpp"
#include "instxai/volume.hpp"

using namespace instxai;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "instxai_volume_test" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

MetaVolume sample(DType dt) {
  MetaVolume v;
  v.data = Tensor<double>(Shape{2, 3, 4, 5});
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  for (double& x : v.data.values()) x = n(rng);
  v.spacing = {1.0, 0.5, 2.0};
  v.dtype = dt;
  v.meta["kind"] = "test";
  return v;
}

}  // namespace

TEST(MetaVolume, RoundTripF64IsExact) {
  const fs::path d = scratch("f64");
  const MetaVolume v = sample(DType::f64);
  write_metavolume(v, d / "a.mvh");
  EXPECT_TRUE(fs::exists(d / "a.raw"));
  EXPECT_EQ(read_metavolume(d / "a.mvh"), v);
}

TEST(MetaVolume, RoundTripF32RoundsToFloat) {
  const fs::path d = scratch("f32");
  const MetaVolume v = sample(DType::f32);
  write_metavolume(v, d / "a.mvh");
  const MetaVolume r = read_metavolume(d / "a.mvh");
  ASSERT_EQ(r.shape(), v.shape());
  for (std::size_t i = 0; i < v.data.size(); ++i)
    EXPECT_EQ(r.data.data()[i], double(float(v.data.data()[i])));
  EXPECT_EQ(r.spacing, v.spacing);
  EXPECT_EQ(r.meta.at("kind"), "test");
}

TEST(MetaVolume, PayloadIsLittleEndianCOrder) {
  const fs::path d = scratch("layout");
  MetaVolume v;
  v.data = Tensor<double>(Shape{1, 1, 1, 2});
  v.data(0, 0, 0, 0) = 1.0;
  v.data(0, 0, 0, 1) = -2.0;
  v.dtype = DType::f32;
  write_metavolume(v, d / "a.mvh");
  std::ifstream is(d / "a.raw", std::ios::binary);
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(is)), {});
  // IEEE-754 single: 1.0 = 0x3f800000, -2.0 = 0xc0000000
  const std::vector<unsigned char> want{0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0};
  EXPECT_EQ(b, want);
}

TEST(MetaVolume, TruncatedPayloadRejected) {
  const fs::path d = scratch("trunc");
  write_metavolume(sample(DType::f32), d / "a.mvh");
  fs::resize_file(d / "a.raw", fs::file_size(d / "a.raw") - 4);
  EXPECT_THROW(read_metavolume(d / "a.mvh"), io_error);
}

TEST(MetaVolume, MalformedHeadersRejected) {
  const fs::path d = scratch("bad");
  write_metavolume(sample(DType::f32), d / "a.mvh");
  const auto write = [&](const std::string& text) {
    std::ofstream(d / "b.mvh") << text;
  };
  write("dims = 2 3 4\ndtype = f32\ndata_file = a.raw\n");
  EXPECT_THROW(read_metavolume(d / "b.mvh"), io_error);
  write("dims = 2 3 4 5\ndtype = f16\ndata_file = a.raw\n");
  EXPECT_THROW(read_metavolume(d / "b.mvh"), io_error);
  write("dims = 2 3 4 5\ndtype = f32\n");
  EXPECT_THROW(read_metavolume(d / "b.mvh"), io_error);
  write("dims = 2 3 4 5\ndtype = f32\ndata_file = a.raw\nbogus = 1\n");
  EXPECT_THROW(read_metavolume(d / "b.mvh"), io_error);
  write("dims = 2 3 4 5\ndtype = f32\ndata_file = a.raw\nspacing = 1 0 1\n");
  EXPECT_THROW(read_metavolume(d / "b.mvh"), io_error);
  EXPECT_THROW(read_metavolume(d / "missing.mvh"), io_error);
}

TEST(Mask, RoundTripThroughMetaVolume) {
  Mask m(Shape{1, 2, 2, 2});
  m(0, 1, 0, 1) = 1;
  const MetaVolume v = from_mask(m, {2.0, 2.0, 2.0});
  EXPECT_EQ(v.voxel_volume(), 8.0);
  EXPECT_EQ(to_mask(v), m);
}

TEST(KeyValues, ParseAndTypedAccess) {
  std::istringstream is("# comment\n a = 1.5 \nb=7\n\nname = x y\n");
  const KeyValues kv = KeyValues::parse(is);
  EXPECT_EQ(kv.get_double("a", 0), 1.5);
  EXPECT_EQ(kv.get_int("b", 0), 7);
  EXPECT_EQ(kv.get("name"), "x y");
  EXPECT_EQ(kv.get_int("missing", 3), 3);
  EXPECT_THROW(kv.get_int("a", 0), config_error);
  EXPECT_THROW(kv.get("missing"), config_error);
}

TEST(KeyValues, Errors) {
  std::istringstream bad("novalue\n");
  EXPECT_THROW(KeyValues::parse(bad), config_error);
  std::istringstream nan("a = abc\n");
  EXPECT_THROW(KeyValues::parse(nan).get_double("a", 0), config_error);
}

TEST(KeyValues, DoubleRoundTripIsExact) {
  KeyValues kv;
  kv.set("x", 0.1 + 0.2);
  std::istringstream is(kv.str());
  EXPECT_EQ(KeyValues::parse(is).get_double("x", 0), 0.1 + 0.2);
}
