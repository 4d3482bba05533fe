#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "hyseg/run.hpp"

using namespace hyseg;

namespace {

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("hyseg_io_" + std::to_string(::getpid()) + "_" +
                                                ::testing::UnitTest::GetInstance()->current_test_info()->name())) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

template <typename E>
std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const E& e) {
    return e.what();
  }
  ADD_FAILURE() << "expected exception";
  return {};
}

}  // namespace

TEST(Svf, RoundTripBothDtypes) {
  TempDir dir;
  const VolumeFile f{{2, 3, 4}, std::vector<float>{}};
  std::vector<float> values(24);
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(i) * -0.37f + 1e-30f;
  write_volume((dir.path / "f.svf").string(), {{2, 3, 4}, values});
  const auto back = read_volume((dir.path / "f.svf").string());
  EXPECT_EQ(back.shape, (Shape{2, 3, 4}));
  EXPECT_EQ(back.dtype(), VolumeDType::kF32);
  EXPECT_EQ(std::get<std::vector<float>>(back.payload), values);

  const std::vector<std::uint8_t> labels{0, 1, 2, 3, 255, 7};
  write_volume((dir.path / "u.svf").string(), {{6}, labels});
  const auto lb = read_volume((dir.path / "u.svf").string());
  EXPECT_EQ(lb.dtype(), VolumeDType::kU8);
  EXPECT_EQ(std::get<std::vector<std::uint8_t>>(lb.payload), labels);
  // Header layout: magic, dtype, rank, one u32 extent, then 6 payload bytes.
  EXPECT_EQ(fs::file_size(dir.path / "u.svf"), 4u + 1 + 1 + 4 + 6);
  EXPECT_EQ(slurp(dir.path / "u.svf").substr(0, 6), std::string("SVF1\x01\x01", 6));
}

TEST(Svf, RejectsMalformedFiles) {
  TempDir dir;
  spit(dir.path / "magic.svf", "NOPE\x00\x01\x02\x00\x00\x00");
  EXPECT_THROW(read_volume((dir.path / "magic.svf").string()), DataError);
  write_volume((dir.path / "ok.svf").string(), {{4}, std::vector<std::uint8_t>{1, 2, 3, 4}});
  auto bytes = slurp(dir.path / "ok.svf");
  spit(dir.path / "short.svf", bytes.substr(0, bytes.size() - 1));
  EXPECT_THROW(read_volume((dir.path / "short.svf").string()), DataError);
  bytes[4] = 9;
  spit(dir.path / "dtype.svf", bytes);
  EXPECT_THROW(read_volume((dir.path / "dtype.svf").string()), DataError);
  EXPECT_THROW(read_volume((dir.path / "absent.svf").string()), IoError);
  EXPECT_THROW(write_volume((dir.path / "bad.svf").string(), {{3, 3}, std::vector<float>(8)}), DimensionError);
}

TEST(RunConfig, DefaultsMaterialized) {
  const Json j = to_json(RunConfig{});
  EXPECT_EQ(j["train"]["warmup_steps"], 50);  // 5% of 1000
  EXPECT_EQ(j["model"]["stages"].size(), 4u);
  EXPECT_EQ(j["model"]["stages"][0]["kernel"], Json::array({7, 7, 7}));
  EXPECT_EQ(j["model"]["stages"][2]["mixer"], "attention");
  EXPECT_EQ(j["data"]["extent"], Json::array({32, 32, 32}));
  // Parsing the materialized form reproduces it.
  EXPECT_EQ(to_json(run_config_from_json(j)).dump(), j.dump());
}

TEST(RunConfig, UnknownKeysRejectedWithPath) {
  EXPECT_NE(message_of<ConfigError>([] { run_config_from_json(Json::parse(R"({"trian": {}})")); }).find("trian"),
            std::string::npos);
  const auto msg = message_of<ConfigError>(
      [] { run_config_from_json(Json::parse(R"({"model": {"stages": [{}, {"depht": 3}, {}, {}]}})")); });
  EXPECT_NE(msg.find("model.stages[1].depht"), std::string::npos) << msg;
  EXPECT_NE(message_of<ConfigError>([] { run_config_from_json(Json::parse(R"({"train": {"total_steps": -1}})")); })
                .find("train.total_steps"),
            std::string::npos);
  EXPECT_THROW(run_config_from_json(Json::parse(R"({"model": {"stages": [{"mixer": "conv"}, {}, {}, {}]}})")),
               ConfigError);
}

TEST(RunConfig, TriplesAcceptScalarOrArray) {
  const auto c = run_config_from_json(Json::parse(R"({"data": {"extent": 64}, "model": {"stages": [{"stride": [4, 4, 4]}, {}, {}, {}]}})"));
  EXPECT_EQ(c.data.extent, (Triple{64, 64, 64}));
  EXPECT_EQ(c.model.stages[0].stride, (Triple{4, 4, 4}));
  EXPECT_THROW(run_config_from_json(Json::parse(R"({"data": {"extent": [1, 2]}})")), ConfigError);
}

TEST(RunConfig, OverridesOnFileAndDefaults) {
  TempDir dir;
  spit(dir.path / "c.json", R"({"train": {"total_steps": 200, "seed": 5}})");
  const auto c = load_run_config((dir.path / "c.json").string(),
                                 {"train.total_steps=400", "model.stages.0.depth=3", "model.deep_supervision=true",
                                  "model.stages.1.mixer=attention"});
  EXPECT_EQ(c.train.total_steps, 400u);
  EXPECT_EQ(c.train.effective_warmup(), 20u);  // tracks the overridden length
  EXPECT_EQ(c.train.seed, 5u);
  EXPECT_EQ(c.model.stages[0].depth, 3u);
  EXPECT_TRUE(c.model.deep_supervision);
  EXPECT_EQ(c.model.stages[1].mixer, MixerKind::kAttention);
  EXPECT_THROW(load_run_config("", {"train.total_steps"}), ConfigError);
  EXPECT_THROW(load_run_config("", {"model.stages.9.depth=1"}), ConfigError);
  EXPECT_THROW(load_run_config("", {"train.bogus=1"}), ConfigError);
  EXPECT_THROW(load_run_config((dir.path / "missing.json").string()), IoError);
  spit(dir.path / "broken.json", "{ not json");
  EXPECT_THROW(load_run_config((dir.path / "broken.json").string()), ConfigError);
}

TEST(RunConfig, CrossSectionChecks) {
  EXPECT_THROW(load_run_config("", {"data.channels=2"}), ConfigError);
  EXPECT_THROW(load_run_config("", {"data.extent=36", "data.outer_radius_max=12"}), ConfigError);
  EXPECT_NO_THROW(load_run_config("", {"data.extent=64"}));
}

TEST(Dataset, ExportImportRoundTrip) {
  TempDir dir;
  SyntheticDataSpec spec;
  spec.seed = 77;
  export_dataset(spec, 3, dir.path, 10);
  const auto manifest = read_json_file((dir.path / "manifest.json").string());
  ASSERT_EQ(manifest["items"].size(), 3u);
  EXPECT_EQ(manifest["items"][1]["index"], 11);
  EXPECT_EQ(manifest["items"][1]["seed"], 77);
  const auto back = import_dataset(dir.path);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto ref = generate_synthetic(data_from_json(manifest["data"]), manifest["items"][i]["index"].get<std::uint64_t>());
    EXPECT_EQ(back[i].volume, ref.volume);
    EXPECT_EQ(back[i].labels.data, ref.labels.data);
    EXPECT_EQ(back[i].volume_shape, (Shape{4, 32, 32, 32}));
  }
}

TEST(Metrics, HeaderAndRowsAreCsv) {
  EXPECT_EQ(metrics_header(4), "step,lr,loss,dice_c1,dice_c2,dice_c3\n");
  const std::string row = metrics_row({7, 1.5e-4, 0.25, {0.5, 0.75, 1.0}});
  EXPECT_EQ(row, "7,0.00015,0.25,0.5,0.75,1\n");
}
