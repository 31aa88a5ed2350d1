#include "doctest.h"
#include "helpers.hpp"
#include "reportpilot/radiomics.hpp"
#include "reportpilot/text.hpp"

using namespace reportpilot;
using testutil::json;
using testutil::run;
namespace fs = std::filesystem;

namespace {

std::string kidney_features(const fs::path& dir, double left, double right) {
  radiomics::OrganFeatureSet l, r;
  l.organ = "kidney_left";
  l.volume_cm3 = left;
  r.organ = "kidney_right";
  r.volume_cm3 = right;
  const auto path = dir / "features.json";
  corpus::write_file(path, json{{"features", {l, r}}}.dump());
  return path.string();
}

std::string slurp_dir(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += fs::relative(f, dir).string() + "\n" + corpus::read_file(f);
  return all;
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(run({}).exit_code == 2);
  CHECK(run({"bogus"}).exit_code == 2);
  CHECK(run({"prompt", "--organ", "kidney"}).exit_code == 2);
  CHECK(run({"--help"}).exit_code == 0);
}

TEST_CASE("prompt renders the worked example") {
  const auto dir = testutil::temp_dir("cli-prompt");
  const auto features = kidney_features(dir, 170, 179);
  const auto r = run({"prompt", "--features", features, "--organ", "kidney"});
  CHECK(r.exit_code == 0);
  CHECK(r.out == "Left kidney volume: 170 cm3, Right kidney volume: 179 cm3, the volume ratio is 0.95\n");
  const auto p = run({"prompt", "--features", features, "--organ", "kidney", "--prefix", "The kidneys"});
  CHECK(p.out.ends_with(", The kidneys\n"));
  const auto missing = run({"prompt", "--features", (dir / "nope.json").string(), "--organ", "kidney"});
  CHECK(missing.exit_code == 3);
  CHECK(missing.err.find("IoError") != std::string::npos);
  CHECK(run({"prompt", "--features", features, "--organ", "liver"}).exit_code == 1);
  fs::remove_all(dir);
}

TEST_CASE("complete single prompt with the rule backend") {
  const auto dir = testutil::temp_dir("cli-complete");
  const auto r = run({"complete", "--features", kidney_features(dir, 170, 179), "--organ", "kidney"});
  CHECK(r.exit_code == 0);
  CHECK(r.out == "The kidneys have a normal appearance.\n");
  const auto small = run({"complete", "--features", kidney_features(dir, 90, 170), "--organ", "kidney"});
  CHECK(small.out == "The left kidney is small relative to the right, suggesting asymmetry.\n");
  CHECK(run({"complete", "--organ", "kidney"}).exit_code == 2);
  CHECK(run({"complete", "--features", kidney_features(dir, 170, 179), "--organ", "kidney", "--backend", "remote",
             "--base-url", "nonsense", "--model", "m", "--api-key-env", ""})
            .exit_code == 2);
  fs::remove_all(dir);
}

TEST_CASE("analyze a NIfTI study") {
  const auto dir = testutil::temp_dir("cli-analyze");
  const auto s = testutil::kidney_study();
  corpus::write_file(dir / "img.nii", testutil::bytes_str(imaging::serialize_nifti(s.volume, imaging::DType::I16)));
  corpus::write_file(dir / "mask.nii", testutil::bytes_str(imaging::serialize_nifti(s.mask, imaging::DType::U8)));
  corpus::write_file(dir / "labels.json", R"({"1":"kidney_left","2":"kidney_right"})");
  const auto r = run({"analyze", "--image", (dir / "img.nii").string(), "--mask", (dir / "mask.nii").string(),
                      "--labels", (dir / "labels.json").string(), "--organ", "kidney_left", "kidney_right",
                      "--out", (dir / "f.json").string()});
  REQUIRE(r.exit_code == 0);
  const auto j = json::parse(corpus::read_file(dir / "f.json"));
  CHECK(j["features"][0]["volume_cm3"].get<double>() == doctest::Approx(172.032));
  CHECK(j["ratio"]["ratio"].get<double>() == doctest::Approx(172.032 / 184.32));
  const auto p = run({"prompt", "--features", (dir / "f.json").string(), "--organ", "kidney"});
  CHECK(p.out == "Left kidney volume: 172 cm3, Right kidney volume: 184 cm3, the volume ratio is 0.93\n");
  const auto bad = run({"analyze", "--image", (dir / "labels.json").string(), "--mask", (dir / "mask.nii").string(),
                        "--organ", "kidney_left"});
  CHECK(bad.exit_code == 1);
  CHECK(bad.err.find("UnsupportedFormat") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("dataset synth is byte deterministic; build, split, complete and eval chain") {
  const auto dir = testutil::temp_dir("cli-data");
  REQUIRE(run({"dataset", "synth", "--n", "100", "--seed", "7", "--out", (dir / "a").string()}).exit_code == 0);
  REQUIRE(run({"dataset", "synth", "--n", "100", "--seed", "7", "--out", (dir / "b").string()}).exit_code == 0);
  CHECK(slurp_dir(dir / "a") == slurp_dir(dir / "b"));
  CHECK(fs::exists(dir / "a" / "reports" / "case_00099.txt"));

  const auto built = (dir / "with.jsonl").string();
  REQUIRE(run({"dataset", "build", "--reports", (dir / "a" / "reports").string(), "--features",
               (dir / "a" / "features").string(), "--organ", "kidney", "--condition", "with", "--out", built})
              .exit_code == 0);
  const auto rows = corpus::read_jsonl(built);
  REQUIRE(rows.size() == 100);
  CHECK(rows[0]["input"].get<std::string>().starts_with("Left kidney volume: "));

  const auto prefix = (dir / "prefix.jsonl").string();
  REQUIRE(run({"dataset", "build", "--reports", (dir / "a" / "reports").string(), "--features",
               (dir / "a" / "features").string(), "--organ", "kidney", "--condition", "prefix", "--out", prefix})
              .exit_code == 0);
  for (const auto& row : corpus::read_jsonl(prefix)) {
    const auto input = row["input"].get<std::string>();
    const auto target = row["target"].get<std::string>();
    CHECK(target.starts_with(input));
    CHECK(text::split_ws(input).size() == std::min<std::size_t>(20, text::split_ws(target).size()));
  }

  const auto train = (dir / "train.jsonl").string(), test = (dir / "test.jsonl").string();
  const auto sp = run({"dataset", "split", "--in", built, "--seed", "3", "--train", train, "--test", test});
  REQUIRE(sp.exit_code == 0);
  CHECK(corpus::read_jsonl(train).size() == 90);
  CHECK(corpus::read_jsonl(test).size() == 10);

  const auto pred = (dir / "pred.jsonl").string();
  REQUIRE(run({"complete", "--in", test, "--out", pred, "--threads", "4"}).exit_code == 0);
  const auto preds = corpus::read_jsonl(pred);
  const auto tests = corpus::read_jsonl(test);
  REQUIRE(preds.size() == tests.size());
  for (std::size_t i = 0; i < preds.size(); ++i) CHECK(preds[i]["report_id"] == tests[i]["meta"]["report_id"]);

  const auto ev = run({"eval", "--pred", pred, "--ref", test, "--out", (dir / "eval.json").string()});
  REQUIRE(ev.exit_code == 0);
  CHECK(ev.out.find("All") != std::string::npos);
  const auto report = json::parse(corpus::read_file(dir / "eval.json"));
  CHECK(report["strata"][0]["n_cases"] == 10);
  CHECK(report["strata"][0]["rougeL_f1"].get<double>() > 0.3);
  fs::remove_all(dir);
}

TEST_CASE("split of 208 lines gives 187 and 21") {
  const auto dir = testutil::temp_dir("cli-split");
  std::string lines;
  for (int i = 0; i < 208; ++i) lines += "{\"i\":" + std::to_string(i) + "}\n";
  corpus::write_file(dir / "in.jsonl", lines);
  const auto args = std::vector<std::string>{"dataset", "split", "--in", (dir / "in.jsonl").string(), "--seed", "5",
                                             "--train", (dir / "tr").string(), "--test", (dir / "te").string()};
  REQUIRE(run(args).exit_code == 0);
  CHECK(corpus::read_jsonl(dir / "tr").size() == 187);
  CHECK(corpus::read_jsonl(dir / "te").size() == 21);
  const auto first = corpus::read_file(dir / "tr");
  REQUIRE(run(args).exit_code == 0);
  CHECK(corpus::read_file(dir / "tr") == first);
  fs::remove_all(dir);
}

TEST_CASE("serve exit codes") {
  const auto dir = testutil::temp_dir("cli-serve");
  corpus::write_file(dir / "bad.json", R"({"port": 0})");
  CHECK(run({"serve", "--config", (dir / "bad.json").string()}).exit_code == 2);

  httplib::Server holder;
  const int port = holder.bind_to_any_port("127.0.0.1");
  corpus::write_file(dir / "busy.json",
                     json{{"server", {{"port", port}}}, {"data_dir", (dir / "data").string()}}.dump());
  const auto busy = run({"serve", "--config", (dir / "busy.json").string()});
  CHECK(busy.exit_code == 3);
  CHECK(busy.err.find("IoError") != std::string::npos);

  const int free = testutil::free_port();
  corpus::write_file(dir / "ok.json", json{{"server", {{"port", free}}}, {"data_dir", (dir / "data").string()}}.dump());
  testutil::ServeProcess serve(dir / "ok.json", dir);
  REQUIRE(serve.wait_ready(free));
  serve.kill(SIGTERM);
  fs::remove_all(dir);
}
