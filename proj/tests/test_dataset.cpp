#include <catch2/catch_amalgamated.hpp>

#include "rearrange/dataset.hpp"

using namespace rearrange;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("rearrange_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::vector<Trajectory> small_batch(const EnvParams& p) {
  std::vector<Trajectory> trs;
  for (uint64_t seed = 200; seed < 204; ++seed)
    trs.push_back(generate_demo(generate_episode(seed, Difficulty::easy), PlanMode::oracle, p));
  // one deliberately failed demo: fixed plan on a contained-object episode
  for (uint64_t seed = 200;; ++seed) {
    EpisodeSpec spec = generate_episode(seed, Difficulty::hard);
    if (spec.object_container == 0) continue;
    trs.push_back(generate_demo(spec, PlanMode::fixed, p));
    break;
  }
  return trs;
}

}  // namespace

TEST_CASE("dataset round-trips losslessly at the byte level") {
  const EnvParams p;
  auto dir = fresh_dir("roundtrip");
  auto trs = small_batch(p);
  REQUIRE_FALSE(trs.back().success);
  write_dataset(trs, dir, 0x1234, p);

  DatasetInfo info;
  auto loaded = read_dataset(dir, /*include_failures=*/true, &info);
  REQUIRE(loaded.size() == trs.size());
  CHECK(info.episodes == trs.size());
  CHECK(info.successes == trs.size() - 1);

  // re-serialize and compare bytes
  auto dir2 = fresh_dir("roundtrip2");
  write_dataset(loaded, dir2, 0x1234, p);
  for (size_t i = 0; i < trs.size(); ++i) {
    const std::string a = read_file(dir / episode_file_name(int(i)));
    const std::string b = read_file(dir2 / episode_file_name(int(i)));
    CHECK(a == b);
  }
  CHECK(read_file(dir / "manifest.json") == read_file(dir2 / "manifest.json"));
}

TEST_CASE("failed demonstrations are excluded unless requested") {
  const EnvParams p;
  auto dir = fresh_dir("failures");
  auto trs = small_batch(p);
  write_dataset(trs, dir, 0x1, p);
  CHECK(read_dataset(dir, false).size() == trs.size() - 1);
  CHECK(read_dataset(dir, true).size() == trs.size());
}

TEST_CASE("manifest episode count matches the files on disk") {
  const EnvParams p;
  auto dir = fresh_dir("counts");
  auto trs = small_batch(p);
  write_dataset(trs, dir, 0x2, p);
  json manifest = json::parse(read_file(dir / "manifest.json"));
  size_t files_on_disk = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".jsonl") ++files_on_disk;
  CHECK(manifest.at("episodes").get<size_t>() == files_on_disk);
  CHECK(manifest.at("files").size() == files_on_disk);
}

TEST_CASE("a corrupted line is reported with file and line number") {
  const EnvParams p;
  auto dir = fresh_dir("corrupt");
  auto trs = small_batch(p);
  write_dataset(trs, dir, 0x3, p);

  // clobber line 3 of the second episode
  const auto victim = dir / episode_file_name(1);
  std::string content = read_file(victim);
  size_t pos = 0;
  for (int i = 0; i < 2; ++i) pos = content.find('\n', pos) + 1;
  content.replace(pos, 10, "garbage!!!");
  atomic_write_file(victim, content);

  try {
    read_dataset(dir, true);
    FAIL("expected a parse failure");
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    CHECK(msg.find(episode_file_name(1)) != std::string::npos);
    CHECK(msg.find(":3") != std::string::npos);
  }
}

TEST_CASE("version and digest mismatches are fatal") {
  const EnvParams p;
  auto dir = fresh_dir("version");
  auto trs = small_batch(p);
  write_dataset(trs, dir, 0xabc, p);

  CHECK_THROWS_WITH(read_dataset(dir, true, nullptr, "0000000000000abd"),
                    Catch::Matchers::ContainsSubstring("digest"));

  json manifest = json::parse(read_file(dir / "manifest.json"));
  manifest["version"] = 999;
  atomic_write_file(dir / "manifest.json", manifest.dump(2));
  CHECK_THROWS_WITH(read_dataset(dir, true), Catch::Matchers::ContainsSubstring("version"));
}

TEST_CASE("truncated episode files are detected") {
  const EnvParams p;
  auto dir = fresh_dir("truncated");
  auto trs = small_batch(p);
  write_dataset(trs, dir, 0x4, p);
  const auto victim = dir / episode_file_name(0);
  std::string content = read_file(victim);
  const size_t cut = content.rfind('\n', content.size() - 2);
  atomic_write_file(victim, content.substr(0, cut + 1));
  CHECK_THROWS_WITH(read_dataset(dir, true), Catch::Matchers::ContainsSubstring("truncated"));
}
