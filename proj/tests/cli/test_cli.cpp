#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "featinv/datasets.hpp"
#include "featinv/feature_capture.hpp"
#include "featinv/image.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const fs::path kWork = fs::temp_directory_path() / "featinv_cli_test";

struct Result {
  int code;
  std::string output;
};

Result run(const std::string& args) {
  const fs::path log = kWork / "last_output.txt";
  const std::string cmd = std::string(FEATINV_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream f(log);
  std::stringstream ss;
  ss << f.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string p(const fs::path& x) { return x.string(); }

std::string slurp(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const fs::path& path) {
  std::vector<std::string> out;
  std::ifstream f(path);
  std::string l;
  while (std::getline(f, l)) out.push_back(l);
  return out;
}

/// Shared fixture: a 16-item toy corpus, base and layer2 stores and a tiny LM.
struct Corpus {
  fs::path dir = kWork / "corpus";
  fs::path toy = dir / "toy";
  fs::path base = dir / "f_base";
  fs::path layer2 = dir / "f_layer2";
  fs::path lm = dir / "lm";

  Corpus() {
    if (fs::exists(lm / "config.json")) return;
    fs::remove_all(dir);
    REQUIRE(run("make-toy --out " + p(toy) + " --size 16 --seed 4").code == 0);
    REQUIRE(run("extract --encoder toy --manifest " + p(toy / "manifest.tsv") + " --layer base --out " + p(base)).code ==
            0);
    REQUIRE(run("extract --encoder toy --manifest " + p(toy / "manifest.tsv") + " --layer layer2 --out " + p(layer2))
                .code == 0);
    REQUIRE(run("pretrain-lm --manifest " + p(toy / "manifest.tsv") + " --out " + p(lm) +
                " --epochs 10 --batch 4 --d-model 32 --layers 1 --heads 2 --max-positions 32")
                .code == 0);
  }
};

const std::string kSmallModel =
    " --d-prime 32 --queries 2 --align-hidden 32 --align-layers 1 --align-heads 2 --spatial-channels 8";

Corpus& corpus() {
  static Corpus c;
  return c;
}

}  // namespace

TEST_CASE("help documents flags, environment and exit codes") {
  fs::create_directories(kWork);
  auto r = run("--help");
  CHECK(r.code == 0);
  CHECK(r.output.find("FEATINV_WEIGHTS_DIR") != std::string::npos);
  CHECK(r.output.find("2 partial item failures") != std::string::npos);
  auto t = run("train --help");
  CHECK(t.code == 0);
  for (const char* flag : {"--lr", "--epochs", "--seed", "--resume"}) CHECK(t.output.find(flag) != std::string::npos);
  CHECK(run("defend-eval --help").output.find("--sigma") != std::string::npos);
  CHECK(run("extract --help").output.find("--layer") != std::string::npos);
  CHECK(run("report --help").output.find("--threshold") != std::string::npos);
  CHECK(run("--version").output.find("0.1.0") != std::string::npos);
}

TEST_CASE("validation failures exit with 1") {
  CHECK(run("").code == 1);
  CHECK(run("no-such-command").code == 1);
  CHECK(run("make-toy").code == 1);  // --out missing
  CHECK(run("extract --encoder nope --manifest x --out " + p(kWork / "x")).code == 1);
  CHECK(run("extract --encoder toy --manifest " + p(kWork / "missing.tsv") + " --out " + p(kWork / "x")).code == 1);
  corpus();
  auto r = run("heatmap --encoder toy --image " + p(corpus().toy / "images/toy_00000.ppm") +
               " --layers layer1,base --out " + p(kWork / "h_bad"));
  CHECK(r.code == 1);
  CHECK(r.output.find("vector tap") != std::string::npos);
}

TEST_CASE("extract writes one record per image and a run spec") {
  const fs::path out = kWork / "extract10";
  fs::remove_all(out);
  const fs::path toy = kWork / "toy10";
  REQUIRE(run("make-toy --out " + p(toy) + " --size 10 --seed 9").code == 0);
  auto r = run("extract --encoder toy --manifest " + p(toy / "manifest.tsv") + " --layer base --out " + p(out));
  REQUIRE(r.code == 0);
  featinv::FeatureStore store(out);
  CHECK(store.size() == 10);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(out)) files += e.path().extension() == ".capr" ? 1 : 0;
  CHECK(files == 10);
  CHECK(store.load(3).shape == featinv::TapShape{64});
  const json run_spec = json::parse(slurp(out / "run.json"));
  CHECK(run_spec["subcommand"] == "extract");
  CHECK(run_spec["version"] == "0.1.0");
  CHECK(run_spec["seed"] == 0);
  CHECK(run_spec["options"]["--layer"][0] == "base");
  CHECK(run_spec["options"]["--weights"][0] == "random-seeded");
}

TEST_CASE("missing images are recorded and the run continues with exit 2") {
  const fs::path toy = kWork / "toy_broken";
  REQUIRE(run("make-toy --out " + p(toy) + " --size 6 --seed 2").code == 0);
  {
    std::ofstream f(toy / "manifest.tsv", std::ios::app);
    f << "ghost\timages/does_not_exist.ppm\t1\ta ghost\n";
  }
  const fs::path out = kWork / "extract_broken";
  fs::remove_all(out);
  auto r = run("extract --encoder toy --manifest " + p(toy / "manifest.tsv") + " --layer layer1 --out " + p(out));
  CHECK(r.code == 2);
  CHECK(featinv::FeatureStore(out).size() == 6);
  const auto failures = lines(out / "failures.tsv");
  REQUIRE(failures.size() == 2);
  CHECK(failures[1].starts_with("ghost\t"));
}

TEST_CASE("caption pipeline: train, resume, attack, report, replay") {
  Corpus& c = corpus();
  const fs::path ckpt = kWork / "cap_ckpt";
  fs::remove_all(ckpt);
  const std::string train_args = "train --task caption --features " + p(c.layer2) + " --manifest " +
                                 p(c.toy / "manifest.tsv") + " --lm " + p(c.lm) + " --out " + p(ckpt) +
                                 " --lr 1e-3 --train-batch 8 --seed 3" + kSmallModel;
  REQUIRE(run(train_args + " --epochs 2").code == 0);
  CHECK(fs::exists(ckpt / "last/model.safetensors"));
  CHECK(fs::exists(ckpt / "train_config.txt"));
  json report = json::parse(slurp(ckpt / "loss_report.json"));
  CHECK(report["epoch_loss"].size() == 2);

  SUBCASE("resume continues at the recorded epoch") {
    REQUIRE(run(train_args + " --epochs 3 --resume").code == 0);
    report = json::parse(slurp(ckpt / "loss_report.json"));
    CHECK(report["start_epoch"] == 2);
    CHECK(report["epoch_loss"].size() == 3);
  }

  SUBCASE("attack generates one caption per feature") {
    const fs::path five = kWork / "f_five";
    fs::remove_all(five);
    featinv::FeatureStore src(c.layer2), dst(five, true);
    for (std::size_t i = 0; i < 5; ++i) dst.add(src.load(i));
    const fs::path att = kWork / "cap_attack";
    REQUIRE(run("attack --checkpoint " + p(ckpt / "last") + " --features " + p(five) + " --out " + p(att)).code == 0);
    const auto rows = lines(att / "predictions.tsv");
    REQUIRE(rows.size() == 6);
    CHECK(rows[1].starts_with(src.entries()[0].image_id + "\t0\t"));

    const fs::path rep = kWork / "cap_report";
    REQUIRE(run("report --predictions " + p(att / "predictions.tsv") + " --manifest " + p(c.toy / "manifest.tsv") +
                " --out " + p(rep))
                .code == 0);
    CHECK(fs::exists(rep / "metrics.json"));
    CHECK(fs::exists(rep / "cosine_histogram.png"));
    // The report leaves its list options unset; replay must still parse.
    const fs::path rep_again = kWork / "cap_report_replay";
    REQUIRE(run("replay " + p(rep / "run.json") + " --out " + p(rep_again)).code == 0);
    CHECK(slurp(rep / "metrics.json") == slurp(rep_again / "metrics.json"));

    // Replaying the attack reproduces its output byte for byte.
    const fs::path again = kWork / "cap_attack_replay";
    REQUIRE(run("replay " + p(att / "run.json") + " --out " + p(again)).code == 0);
    CHECK(slurp(att / "predictions.tsv") == slurp(again / "predictions.tsv"));
  }

  SUBCASE("replayed training is bit-identical") {
    const fs::path again = kWork / "cap_ckpt_replay";
    fs::remove_all(again);
    REQUIRE(run("replay " + p(ckpt / "run.json") + " --out " + p(again)).code == 0);
    CHECK(slurp(ckpt / "last/model.safetensors") == slurp(again / "last/model.safetensors"));
  }

  SUBCASE("attack refuses a store from another layer") {
    auto r = run("attack --checkpoint " + p(ckpt / "last") + " --features " + p(c.base) + " --out " +
                 p(kWork / "cap_bad"));
    CHECK(r.code == 1);
    CHECK(r.output.find("'base'") != std::string::npos);
    CHECK(r.output.find("'layer2'") != std::string::npos);
  }
}

TEST_CASE("identical predictions and references score perfectly") {
  Corpus& c = corpus();
  const auto m = featinv::load_manifest(c.toy / "manifest.tsv");
  const fs::path pred = kWork / "perfect.tsv";
  {
    std::ofstream f(pred);
    f << "#featinv-predictions\ttask=caption\n";
    for (const auto& r : m.records) f << r.image_id << "\t0\t" << r.captions[0] << "\n";
  }
  const fs::path out = kWork / "perfect_report";
  REQUIRE(run("report --predictions " + p(pred) + " --manifest " + p(c.toy / "manifest.tsv") + " --out " + p(out))
              .code == 0);
  const json j = json::parse(slurp(out / "metrics.json"));
  for (const char* k : {"bleu1", "bleu2", "bleu3", "bleu4", "rouge_l"}) CHECK(j[k].get<double>() == doctest::Approx(1.0));
  CHECK(j["cosine_success_rate"].get<double>() == doctest::Approx(100.0));
  const auto hist = lines(out / "cosine_histogram.tsv");
  REQUIRE(hist.size() == 41);
  CHECK(hist.back() == "0.95\t1.00\t" + std::to_string(m.records.size()));
}

TEST_CASE("label attack echoes the defended flag; sigma 0 defense is a no-op") {
  Corpus& c = corpus();
  const fs::path ckpt = kWork / "label_ckpt";
  fs::remove_all(ckpt);
  REQUIRE(run("train --task label --features " + p(c.layer2) + " --manifest " + p(c.toy / "manifest.tsv") +
              " --out " + p(ckpt) + " --epochs 3 --lr 1e-2 --train-batch 8" + kSmallModel)
              .code == 0);

  const fs::path noisy = kWork / "f_layer2_noisy";
  fs::remove_all(noisy);
  REQUIRE(run("extract --encoder toy --manifest " + p(c.toy / "manifest.tsv") + " --layer layer2 --sigma auto-std --out " +
              p(noisy))
              .code == 0);
  CHECK(fs::exists(noisy / "noise_schedule.txt"));
  const fs::path att = kWork / "label_attack";
  REQUIRE(run("attack --checkpoint " + p(ckpt / "last") + " --features " + p(noisy) + " --manifest " +
              p(c.toy / "manifest.tsv") + " --out " + p(att))
              .code == 0);
  const auto rows = lines(att / "predictions.tsv");
  REQUIRE(rows.size() == 17);
  CHECK(rows[0] == "#featinv-predictions\ttask=label");
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].find("\t1\t") != std::string::npos);

  const fs::path d0 = kWork / "defend_zero";
  REQUIRE(run("defend-eval --encoder toy --checkpoint " + p(ckpt / "last") + " --manifest " +
              p(c.toy / "manifest.tsv") + " --layer layer2 --sigma 0 --out " + p(d0))
              .code == 0);
  const json rep = json::parse(slurp(d0 / "defense_report.json"));
  CHECK(rep["clean"] == rep["defended"]);
  CHECK(rep["final_output_max_relative_error"].get<double>() == 0.0);
  const json overhead = json::parse(slurp(d0 / "overhead.json"));
  CHECK(overhead["repetitions"] == 100);
}

TEST_CASE("heatmaps: one overlay per layer, uniform for a constant image") {
  Corpus& c = corpus();
  const fs::path out = kWork / "heat";
  fs::remove_all(out);
  REQUIRE(run("heatmap --encoder toy --image " + p(c.toy / "images/toy_00000.ppm") +
              " --layers layer1,layer2,layer3,layer4 --out " + p(out))
              .code == 0);
  for (const char* l : {"layer1", "layer2", "layer3", "layer4"}) {
    const featinv::Image img = featinv::read_image(out / (std::string("heatmap_") + l + ".png"));
    CHECK(img.width == 32);
    CHECK(img.height == 32);
  }

  const fs::path flat = kWork / "flat.ppm";
  featinv::write_ppm(flat, featinv::Image(32, 32, {120, 120, 120}));
  const fs::path out2 = kWork / "heat_flat";
  REQUIRE(run("heatmap --encoder toy --image " + p(flat) + " --layers layer1 --out " + p(out2)).code == 0);
  const auto rows = lines(out2 / "heatmap_layer1.tsv");
  REQUIRE(rows.size() == 16);
  // Rows and columns past the zero-padded border are identical.
  std::vector<std::vector<double>> v;
  for (const auto& r : rows) {
    std::stringstream ss(r);
    std::vector<double> row;
    double x;
    while (ss >> x) row.push_back(x);
    v.push_back(row);
  }
  for (std::size_t y = 1; y < v.size(); ++y) {
    for (std::size_t x = 1; x < v[y].size(); ++x) CHECK(v[y][x] == doctest::Approx(v[1][1]).epsilon(1e-5));
  }
}

TEST_CASE("sample keeps a stratified subset") {
  Corpus& c = corpus();
  const fs::path out = kWork / "sampled";
  REQUIRE(run("sample --manifest " + p(c.toy / "manifest.tsv") + " --target 8 --seed 1 --out " + p(out)).code == 0);
  const auto m = featinv::load_manifest(out / "manifest.tsv");
  CHECK(m.records.size() == 8);
  std::vector<int> per(4, 0);
  for (const auto& r : m.records) per[static_cast<std::size_t>(*r.label)]++;
  CHECK(per == std::vector<int>{2, 2, 2, 2});
  CHECK(run("sample --manifest " + p(c.toy / "manifest.tsv") + " --target 99 --out " + p(out)).code == 1);
}

TEST_CASE("sweep tables become a grouped bar figure") {
  const fs::path table = kWork / "sweep_in.tsv";
  {
    std::ofstream f(table);
    f << "layer\ttop1\n" << "layer1\t20\n" << "layer4\t60\n" << "base\t70\n";
  }
  const fs::path out = kWork / "sweep";
  REQUIRE(run("report --sweep " + p(table) + " --out " + p(out)).code == 0);
  CHECK(fs::exists(out / "sweep.png"));
  CHECK(lines(out / "sweep.tsv").size() == 4);
}
