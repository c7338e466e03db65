#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "mclaro/pipeline.hpp"

using namespace mclaro;
using namespace mclaro::pipeline;
namespace fs = std::filesystem;

#ifndef MCLARO_SOURCE_DIR
#define MCLARO_SOURCE_DIR "."
#endif

namespace {

const std::string kTinyConfig =
    std::string(MCLARO_SOURCE_DIR) + "/configs/tiny.json";

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary | std::ios::ate);
  REQUIRE(f.good());
  std::vector<char> buf((size_t)f.tellg());
  f.seekg(0);
  f.read(buf.data(), (std::streamsize)buf.size());
  return buf;
}

}  // namespace

TEST_CASE("config parsing validates and rejects") {
  auto cfg = load_config(kTinyConfig);
  CHECK(cfg.seed == 7);
  CHECK(cfg.r == 4);
  CHECK(cfg.t1_grid().size() == 39);
  CHECK(cfg.t2_grid().size() == 20);

  io::json j = cfg.raw;
  j.erase("seed");
  CHECK_THROWS_AS(parse_config(j), std::invalid_argument);

  j = cfg.raw;
  j["sampling"]["r"] = 0;
  CHECK_THROWS_AS(parse_config(j), std::invalid_argument);

  j = cfg.raw;
  j["training"]["variants"] = {"07"};
  CHECK_THROWS_AS(parse_config(j), std::invalid_argument);

  j = cfg.raw;
  j["nonsense"] = 1;
  CHECK_THROWS_AS(parse_config(j), std::invalid_argument);

  j = cfg.raw;
  j["sequence"]["flip_deg"] = 120.0;
  CHECK_THROWS_AS(parse_config(j), std::invalid_argument);
}

TEST_CASE("stages are ordered, cached, and resumable") {
  const auto out = fresh_dir("mclaro_pipe_test");
  const auto cfg = load_config(kTinyConfig);

  // a later stage without its inputs reports the missing artifact
  {
    Experiment exp(cfg, out);
    CHECK_THROWS_AS(exp.run("train"), MissingArtifact);
    CHECK_THROWS_AS(exp.run("bogus"), std::invalid_argument);
  }

  Experiment exp(cfg, out);
  exp.run("phantom");
  const fs::path labels = out / "phantom" / "train_0" / "labels.i32";
  REQUIRE(fs::exists(labels));
  const auto bytes1 = slurp(labels);
  const auto t1 = fs::last_write_time(labels);

  // second run reuses the artifact untouched
  exp.run("phantom");
  CHECK(fs::last_write_time(labels) == t1);
  CHECK(slurp(labels) == bytes1);

  // a config change invalidates the cache
  Config cfg2 = cfg;
  cfg2.seed = 8;
  cfg2.raw["seed"] = 8;
  Experiment exp2(cfg2, out);
  CHECK_FALSE(fs::exists(out / "simulate" / "stage.json"));
  exp2.run("phantom");
  CHECK(slurp(labels) != bytes1);
}

TEST_CASE("full tiny pipeline emits every artifact family") {
  const auto out = fresh_dir("mclaro_pipe_full");
  const auto cfg = load_config(kTinyConfig);
  Experiment exp(cfg, out);
  exp.run("all");

  // phantom family
  CHECK(fs::exists(out / "phantom" / "train_0" / "labels.i32.json"));
  CHECK(fs::exists(out / "phantom" / "test_0" / "coils.c64"));
  CHECK(fs::exists(out / "phantom" / "test_0" / "field.f32"));
  // simulate family
  CHECK(fs::exists(out / "simulate" / "test_0_images.c64"));
  CHECK(fs::exists(out / "simulate" / "dictionary" / "atoms.f32"));
  // train family
  CHECK(fs::exists(out / "train" / "v00" / "phase2" / "params" / "manifest.json"));
  CHECK(fs::exists(out / "train" / "v11" / "phase2" / "history.csv"));
  CHECK(fs::exists(out / "train" / "v11" / "phase2" / "mask_0.u8"));
  // reconstruct family
  CHECK(fs::exists(out / "reconstruct" / "full_test_0.c64"));
  CHECK(fs::exists(out / "reconstruct" / "v11_test_0.c64"));
  CHECK(fs::exists(out / "reconstruct" / "v11_schedule.json"));
  CHECK(fs::exists(out / "reconstruct" / "full_schedule.json"));
  // map family
  CHECK(fs::exists(out / "map" / "gt_test_0_t1.f32"));
  CHECK(fs::exists(out / "map" / "v11_test_0_chi.f32"));
  CHECK(fs::exists(out / "map" / "full_test_0_valid.u8"));
  // evaluate family
  CHECK(fs::exists(out / "evaluate" / "ablation.csv"));
  CHECK(fs::exists(out / "evaluate" / "blurriness.csv"));
  CHECK(fs::exists(out / "evaluate" / "bland_altman_t1.csv"));
  CHECK(fs::exists(out / "evaluate" / "bland_altman_qsm.csv"));
  CHECK(fs::exists(out / "evaluate" / "bland_altman_summary.json"));

  // every array file has a sidecar naming its producing stage + config hash
  int arrays = 0;
  for (const auto& entry : fs::recursive_directory_iterator(out)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = entry.path().extension().string();
    if (ext != ".f32" && ext != ".c64" && ext != ".u8" && ext != ".i32" &&
        ext != ".f64")
      continue;
    arrays++;
    INFO("array ", entry.path().string());
    REQUIRE(fs::exists(entry.path().string() + ".json"));
    const auto side = io::read_json(entry.path().string() + ".json");
    REQUIRE(side.contains("stage"));
    REQUIRE(side.at("config_hash").get<std::string>().size() == 16);
  }
  CHECK(arrays > 30);
  const auto side = io::load_sidecar(out / "simulate" / "test_0_images.c64");
  CHECK(side.at("stage") == "simulate");

  // ablation table has one row per variant
  std::ifstream abl(out / "evaluate" / "ablation.csv");
  std::string line;
  std::getline(abl, line);
  CHECK(line == "variant,test_ssim,blurriness_t1,final_val_loss");
  int rows = 0;
  while (std::getline(abl, line))
    if (!line.empty()) rows++;
  CHECK(rows == 2);

  // schedules honor the fan-beam arithmetic: entries = 4 blocks x reps x TRs
  const auto sched = io::read_json(out / "reconstruct" / "v11_schedule.json");
  const int reps = sched.at("n_repetitions").get<int>();
  const int trs = sched.at("trs_per_segment").get<int>();
  CHECK((int)sched.at("records").size() == 4 * reps * trs);
}

TEST_CASE("determinism: two complete runs produce identical artifact bytes") {
  const auto out_a = fresh_dir("mclaro_det_a");
  const auto out_b = fresh_dir("mclaro_det_b");
  const auto cfg = load_config(kTinyConfig);
  Experiment(cfg, out_a).run("all");
  Experiment(cfg, out_b).run("all");

  int compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(out_a)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), out_a);
    INFO("file ", rel.string());
    REQUIRE(fs::exists(out_b / rel));
    REQUIRE(slurp(entry.path()) == slurp(out_b / rel));
    compared++;
  }
  CHECK(compared > 30);
}
