#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include <json.hpp>

#include "support.hpp"

using nlohmann::json;
using test_support::TempDir;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class Cli {
 public:
  explicit Cli(const TempDir& dir) : dir_(dir) {}

  Outcome run(const std::string& args) const {
    const auto out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = std::string("cd '") + dir_.path().string() + "' && '" + IMU_ALIGN_CLI + "' " + args +
                            " > '" + out.string() + "' 2> '" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
  }

  json run_json(const std::string& args) const {
    const auto o = run(args);
    INFO(args);
    INFO(o.err);
    REQUIRE(o.code == 0);
    return json::parse(o.out);
  }

 private:
  const TempDir& dir_;
};

const char* kEncoderFlags = " --conv-channels 8 16 --conv-kernels 10 5 --conv-strides 2 2 --gru-hidden 16";

}  // namespace

TEST_CASE("command line pipeline") {
  TempDir dir("cli");
  const Cli cli(dir);

  const auto synth = cli.run_json("synth --seed 5 --n 32 --dim 32 --out-dir corpus");
  CHECK(synth["n_windows"] == 32);
  CHECK(synth["window_s"] == 1.0);

  const std::string ingest_args = "ingest --imu corpus/imu/*.csv --window-s 1 --stride-s 1 --rate-hz 200 --out ";
  const auto ingest = cli.run_json(ingest_args + "w.cache");
  CHECK(ingest["n_windows"] == 32);
  CHECK(ingest["T"] == 200);
  cli.run_json(ingest_args + "w2.cache");
  CHECK(slurp(dir / "w.cache") == slurp(dir / "w2.cache"));

  const std::string train_args =
      std::string("train --cache w.cache --video-anchors corpus/video_anchors.jsonl --text-anchors "
                  "corpus/text_anchors.jsonl --mode ivt --epochs 3 --seed 5") +
      kEncoderFlags;
  const auto trained = cli.run_json(train_args + " --run-dir run");
  CHECK(trained["step"] == 6);
  CHECK(trained.contains("l_i2t"));
  const std::string ckpt = trained["checkpoint"];
  CHECK(std::filesystem::exists(dir / ckpt));
  CHECK(std::filesystem::exists(dir / "run" / "config.json"));

  const auto manifest = json::parse(slurp(dir / "run" / "manifest.json"));
  CHECK(manifest["command"] == "train");
  CHECK(manifest["inputs"].contains("cache"));
  CHECK(manifest["inputs"]["cache"]["fnv1a64"].get<std::string>().size() == 16);

  SUBCASE("training is reproducible from the command line") {
    cli.run_json(train_args + " --run-dir run2");
    CHECK(slurp(dir / "run" / "metrics.jsonl") == slurp(dir / "run2" / "metrics.jsonl"));
    std::istringstream lines(slurp(dir / "run" / "metrics.jsonl"));
    std::string line;
    int n = 0;
    while (std::getline(lines, line)) {
      const auto rec = json::parse(line);
      CHECK(rec["epoch"] == n++);
      CHECK(rec.contains("l_total"));
    }
    CHECK(n == 3);
  }

  SUBCASE("resume continues the run") {
    const auto resumed = cli.run_json(std::string("train --cache w.cache --video-anchors corpus/video_anchors.jsonl "
                                                  "--text-anchors corpus/text_anchors.jsonl --mode ivt --epochs 4 "
                                                  "--seed 5 --resume ") +
                                      ckpt + kEncoderFlags + " --run-dir run");
    CHECK(resumed["step"] == 8);
    CHECK(resumed["epoch"] == 3);
  }

  SUBCASE("retrieval evaluation") {
    for (const std::string d : {"imu2video", "video2imu"}) {
      const auto m = cli.run_json("eval-retrieval --ckpt " + ckpt +
                                  " --cache w.cache --anchors corpus/video_anchors.jsonl --direction " + d);
      CHECK(m["task"] == "retrieval");
      CHECK(m["direction"] == d);
      CHECK(m["pool_size"] == 32);
      CHECK(m["R@1"].get<double>() >= 0.0);
      CHECK(m["R@1"].get<double>() <= m["R@10"].get<double>());
      CHECK(m["flags"][0] == "pool_lt_50");
    }
    const auto bad = cli.run("eval-retrieval --ckpt " + ckpt +
                             " --cache w.cache --anchors corpus/video_anchors.jsonl --direction imu2text");
    CHECK(bad.code == 2);
    CHECK(json::parse(bad.err)["error"] == "value");
  }

  SUBCASE("classification protocols") {
    const auto before = slurp(dir / ckpt);
    const std::string common = "eval-classify --ckpt " + ckpt + " --cache w.cache --labels corpus/labels.jsonl";
    const auto zs = cli.run_json(common + " --protocol zeroshot --class-anchors corpus/class_anchors.jsonl");
    CHECK(zs["n"] == 32);
    CHECK(zs["per_class_f1"].size() == 4);

    const auto probe = cli.run_json(common + " --protocol probe --epochs 20");
    CHECK(probe["accuracy"].get<double>() >= 0.0);
    CHECK(std::filesystem::exists(dir / "run" / "probe" / "head.json"));
    CHECK(slurp(dir / ckpt) == before);

    cli.run_json(common + " --protocol finetune --epochs 2");
    const auto ft_ckpt = dir / "run" / "finetune" / "ckpt-finetune.bin";
    CHECK(std::filesystem::exists(ft_ckpt));
    CHECK(slurp(ft_ckpt) != before);
    CHECK(slurp(dir / ckpt) == before);

    const auto missing = cli.run(common + " --protocol zeroshot");
    CHECK(missing.code == 2);
  }

  SUBCASE("ad-hoc retrieval") {
    std::ifstream anchors((dir / "corpus" / "video_anchors.jsonl").string());
    std::string first;
    std::getline(anchors, first);
    const std::string id = json::parse(first)["window_id"];
    const auto r = cli.run_json("retrieve --ckpt " + ckpt +
                                " --pool w.cache --query-anchor corpus/video_anchors.jsonl --query-id " + id +
                                " --top-k 5");
    CHECK(r["query_id"] == id);
    REQUIRE(r["results"].size() == 5);
    for (std::size_t i = 1; i < 5; ++i) {
      CHECK(r["results"][i - 1]["score"].get<double>() >= r["results"][i]["score"].get<double>());
    }
  }
}

TEST_CASE("command line errors") {
  TempDir dir("cli-err");
  const Cli cli(dir);
  CHECK(cli.run("--help").code == 0);
  CHECK(cli.run("train --bogus").code == 2);
  CHECK(cli.run("nonsense").code == 2);

  const auto missing = cli.run("ingest --imu nothere.csv --out x.cache");
  CHECK(missing.code == 2);
  const auto err = json::parse(missing.err);
  CHECK(err["error"] == "io");
  CHECK(err["message"].get<std::string>().find("nothere.csv") != std::string::npos);

  {
    std::ofstream bad((dir / "bad.csv").string());
    bad << "t,ax,ay,az,gx,gy,gz\n0,1,2,3,4,5,6\n0.005,1,2,x,4,5,6\n";
  }
  const auto parse = cli.run("ingest --imu bad.csv --out x.cache");
  CHECK(parse.code == 2);
  CHECK(json::parse(parse.err)["error"] == "parse");

  cli.run_json("synth --seed 1 --n 16 --dim 16 --out-dir c");
  cli.run_json("ingest --imu c/imu/*.csv --window-s 1 --stride-s 1 --rate-hz 200 --out w.cache");
  const auto no_anchors = cli.run("train --cache w.cache --mode it --text-anchors c/video_anchors.jsonl "
                                  "--run-dir r --epochs 1");
  CHECK(no_anchors.code == 2);
  const auto dim = cli.run("train --cache w.cache --video-anchors c/video_anchors.jsonl --embed-dim 8 --run-dir r");
  CHECK(dim.code == 2);
  CHECK(json::parse(dim.err)["error"] == "shape");
}
