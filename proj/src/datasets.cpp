// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include "featinv/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "featinv/error.hpp"
#include "featinv/rng.hpp"
#include "featinv/text.hpp"
#include "json.hpp"

namespace featinv {

namespace fs = std::filesystem;

std::string to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "test" || s == "val") return Split::kTest;
  throw ValidationError("unknown split '" + std::string(s) + "'");
}

fs::path DatasetManifest::resolve(const ManifestRecord& r) const {
  const fs::path p(r.path);
  return p.is_absolute() ? p : root / p;
}

const ManifestRecord* DatasetManifest::find(std::string_view image_id) const {
  for (const auto& r : records) {
    if (r.image_id == image_id) return &r;
  }
  return nullptr;
}

void DatasetManifest::validate(bool check_paths) const {
  std::set<std::string_view> ids;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const std::string where = "record " + std::to_string(i + 1) + " (" + r.image_id + ")";
    if (r.image_id.empty()) throw ValidationError("record " + std::to_string(i + 1) + " has an empty image id");
    if (!ids.insert(r.image_id).second) throw ValidationError("duplicate image id " + r.image_id);
    if (task == AttackTask::kCaption && r.captions.empty()) throw ValidationError(where + ": no captions");
    if (task == AttackTask::kLabel && !r.label) throw ValidationError(where + ": no label");
    if (r.label && (*r.label < 0 || (!class_names.empty() && *r.label >= static_cast<int>(class_names.size())))) {
      throw ValidationError(where + ": label out of range");
    }
    if (check_paths && !fs::exists(resolve(r))) throw ValidationError(where + ": missing image " + resolve(r).string());
  }
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto t = line.find('\t', start);
    out.push_back(line.substr(start, t == std::string::npos ? std::string::npos : t - start));
    if (t == std::string::npos) break;
    start = t + 1;
  }
  return out;
}

std::string clean_field(std::string s) {
  std::replace(s.begin(), s.end(), '\t', ' ');
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

}  // namespace

DatasetManifest load_manifest(const fs::path& path, bool check_paths) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open manifest " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& msg) -> void {
    throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + msg);
  };
  if (!std::getline(f, line)) throw FormatError(path.string() + ": empty manifest");
  ++lineno;
  auto header = split_tabs(line);
  if (header[0] != "#featinv-manifest") fail("missing #featinv-manifest header");
  std::map<std::string, std::string> kv;
  for (std::size_t i = 1; i < header.size(); ++i) {
    const auto eq = header[i].find('=');
    if (eq == std::string::npos) fail("bad header field '" + header[i] + "'");
    kv[header[i].substr(0, eq)] = header[i].substr(eq + 1);
  }
  if (kv["version"] != "1") fail("unsupported manifest version '" + kv["version"] + "'");
  try {
    m.task = parse_task(kv.at("task"));
    m.split = parse_split(kv.at("split"));
  } catch (const std::out_of_range&) {
    fail("header must declare task and split");
  } catch (const ValidationError& e) {
    fail(e.what());
  }
  m.note = kv["note"];
  std::size_t max_fields = 0;
  if (kv.contains("fields")) {
    try {
      max_fields = std::stoul(kv["fields"]);
    } catch (const std::exception&) {
      fail("bad field count");
    }
  }
  std::set<std::string> ids;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_tabs(line);
    if (fields[0] == "#classes") {
      m.class_names.assign(fields.begin() + 1, fields.end());
      continue;
    }
    if (line[0] == '#') continue;
    if (fields.size() < 3) fail("expected image_id, path, label and captions");
    if (max_fields && fields.size() > max_fields) fail("more fields than the header declares");
    ManifestRecord r;
    r.image_id = fields[0];
    r.path = fields[1];
    if (r.image_id.empty() || r.path.empty()) fail("empty image id or path");
    if (fields[2] != "-") {
      try {
        std::size_t pos = 0;
        r.label = std::stoi(fields[2], &pos);
        if (pos != fields[2].size() || *r.label < 0) throw std::invalid_argument("label");
      } catch (const std::exception&) {
        fail("bad label '" + fields[2] + "'");
      }
    }
    for (std::size_t i = 3; i < fields.size(); ++i) {
      if (!fields[i].empty()) r.captions.push_back(fields[i]);
    }
    if (m.task == AttackTask::kCaption && r.captions.empty()) fail("no captions for caption task");
    if (m.task == AttackTask::kLabel && !r.label) fail("missing label for label task");
    if (!m.class_names.empty() && r.label && *r.label >= static_cast<int>(m.class_names.size())) {
      fail("label " + std::to_string(*r.label) + " outside the class list");
    }
    if (!ids.insert(r.image_id).second) fail("duplicate image id " + r.image_id);
    if (check_paths && !fs::exists(m.resolve(r))) fail("image not found: " + m.resolve(r).string());
    m.records.push_back(std::move(r));
  }
  return m;
}

void write_manifest(const DatasetManifest& m, const fs::path& path) {
  m.validate(false);
  std::size_t fields = 3;
  for (const auto& r : m.records) fields = std::max(fields, 3 + r.captions.size());
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  f << "#featinv-manifest\tversion=1\ttask=" << to_string(m.task) << "\tsplit=" << to_string(m.split)
    << "\tfields=" << fields << "\tnote=" << clean_field(m.note) << "\n";
  if (!m.class_names.empty()) {
    f << "#classes";
    for (const auto& c : m.class_names) f << "\t" << clean_field(c);
    f << "\n";
  }
  for (const auto& r : m.records) {
    f << clean_field(r.image_id) << "\t" << clean_field(r.path) << "\t" << (r.label ? std::to_string(*r.label) : "-");
    for (const auto& c : r.captions) f << "\t" << clean_field(c);
    f << "\n";
  }
  if (!f) throw Error("failed writing manifest " + path.string());
}

DatasetManifest sample_split(const DatasetManifest& m, const SamplingSpec& spec) {
  const std::size_t n = m.records.size();
  if (spec.target > n) {
    throw ValidationError("cannot sample " + std::to_string(spec.target) + " records from " + std::to_string(n));
  }
  DatasetManifest out = m;
  if (spec.target == n) return out;
  Rng rng(spec.seed);
  std::vector<std::size_t> chosen;
  const bool stratified = n > 0 && std::all_of(m.records.begin(), m.records.end(), [](const auto& r) { return r.label.has_value(); });
  if (stratified) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < n; ++i) by_class[*m.records[i].label].push_back(i);
    struct Quota {
      int cls;
      std::size_t take;
      double remainder;
    };
    std::vector<Quota> q;
    std::size_t assigned = 0;
    for (const auto& [c, idx] : by_class) {
      const double exact = static_cast<double>(spec.target) * static_cast<double>(idx.size()) / static_cast<double>(n);
      const auto take = static_cast<std::size_t>(std::floor(exact));
      q.push_back({c, take, exact - static_cast<double>(take)});
      assigned += take;
    }
    std::vector<std::size_t> order(q.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return q[a].remainder > q[b].remainder; });
    for (std::size_t k = 0; assigned < spec.target; ++k, ++assigned) ++q[order[k % order.size()]].take;
    for (const auto& qq : q) {
      auto idx = by_class[qq.cls];
      shuffle(idx, rng);
      chosen.insert(chosen.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(qq.take));
    }
  } else {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    shuffle(idx, rng);
    chosen.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(spec.target));
  }
  std::sort(chosen.begin(), chosen.end());
  out.records.clear();
  for (auto i : chosen) out.records.push_back(m.records[i]);
  out.note += (out.note.empty() ? "" : "; ") + std::string("sampled ") + std::to_string(spec.target) + "/" +
              std::to_string(n) + " seed=" + std::to_string(spec.seed) + (stratified ? " stratified" : "");
  return out;
}

// ------------------------------------------------------------- toy corpus

const std::vector<std::string> kToyShapes{"circle", "square", "triangle", "cross"};
const std::vector<std::string> kToyColors{"red", "green", "blue", "yellow"};
const std::vector<std::string> kToyBackgrounds{"white", "black", "gray"};

Image render_toy_image(int size, int shape, int color, int background, std::uint64_t seed) {
  static const std::uint8_t colors[4][3] = {{220, 30, 30}, {30, 170, 40}, {30, 60, 220}, {230, 210, 30}};
  static const std::uint8_t backs[3] = {245, 15, 128};
  Rng rng(seed);
  const auto b = backs[background];
  Image img(size, size, {b, b, b});
  const double s = size;
  const double r = s * (0.25 + 0.1 * rng.uniform());
  const double cx = s / 2 + (rng.uniform() - 0.5) * (s - 2 * r) * 0.6;
  const double cy = s / 2 + (rng.uniform() - 0.5) * (s - 2 * r) * 0.6;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      bool inside = false;
      switch (shape) {
        case 0: inside = dx * dx + dy * dy <= r * r; break;
        case 1: inside = std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r; break;
        case 2: inside = dy >= -r && dy <= r && std::abs(dx) <= (dy + r) * 0.55; break;
        default: inside = (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) || (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r); break;
      }
      std::uint8_t* px = img.at(x, y);
      for (int c = 0; c < 3; ++c) {
        const int base = inside ? colors[color][c] : b;
        const int noise = static_cast<int>(rng.below(13)) - 6;
        px[c] = static_cast<std::uint8_t>(std::clamp(base + noise, 0, 255));
      }
    }
  }
  return img;
}

DatasetManifest make_toy_corpus(std::uint64_t seed, std::size_t size, const fs::path& out_dir,
                                const ToyCorpusOptions& opts) {
  if (size < 1) throw ValidationError("toy corpus size must be >= 1");
  if (opts.image_size < 8) throw ValidationError("toy images must be at least 8 pixels");
  fs::create_directories(out_dir / "images");
  Rng rng(splitmix64(seed ^ 0x70795f636f727075ULL));
  std::vector<int> shapes(size);
  for (std::size_t i = 0; i < size; ++i) shapes[i] = static_cast<int>(i % kToyShapes.size());
  shuffle(shapes, rng);
  DatasetManifest m;
  m.task = AttackTask::kCaption;
  m.split = opts.split;
  m.root = out_dir;
  m.class_names = kToyShapes;
  m.note = "toy corpus seed=" + std::to_string(seed) + " size=" + std::to_string(size) +
           "; captions normalized (lowercase, punctuation stripped)";
  for (std::size_t i = 0; i < size; ++i) {
    const int color = static_cast<int>(rng.below(kToyColors.size()));
    const int back = static_cast<int>(rng.below(kToyBackgrounds.size()));
    const std::uint64_t img_seed = rng.next_u64();
    char id[32];
    std::snprintf(id, sizeof id, "toy_%05zu", i);
    ManifestRecord r;
    r.image_id = id;
    r.path = "images/" + r.image_id + ".ppm";
    r.label = shapes[i];
    r.captions.push_back("a " + kToyColors[static_cast<std::size_t>(color)] + " " +
                         kToyShapes[static_cast<std::size_t>(shapes[i])] + " on a " +
                         kToyBackgrounds[static_cast<std::size_t>(back)] + " background");
    write_ppm(out_dir / r.path, render_toy_image(opts.image_size, shapes[i], color, back, img_seed));
    m.records.push_back(std::move(r));
  }
  write_manifest(m, out_dir / "manifest.tsv");
  return m;
}

// ------------------------------------------------------------- converters

namespace {

std::string relative_to(const fs::path& p, const fs::path& root) {
  const fs::path abs = fs::absolute(p).lexically_normal();
  const fs::path rel = abs.lexically_relative(fs::absolute(root).lexically_normal());
  return rel.empty() ? abs.string() : rel.string();
}

std::ifstream open_or_throw(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw Error("cannot open " + p.string());
  return f;
}

std::string normalized(const std::string& s) { return normalize_text(s); }

constexpr const char* kNormNote = "captions normalized (lowercase, punctuation stripped)";

}  // namespace

DatasetManifest convert_coco(const fs::path& annotations, const fs::path& image_dir, const fs::path& root,
                             Split split) {
  auto f = open_or_throw(annotations);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(annotations.string() + ": " + e.what());
  }
  std::map<std::int64_t, std::size_t> by_id;
  DatasetManifest m;
  m.task = AttackTask::kCaption;
  m.split = split;
  m.root = root;
  m.note = "coco " + annotations.filename().string() + "; " + kNormNote;
  for (const auto& img : j.at("images")) {
    const auto id = img.at("id").get<std::int64_t>();
    by_id[id] = m.records.size();
    m.records.push_back({std::to_string(id), relative_to(image_dir / img.at("file_name").get<std::string>(), root),
                         std::nullopt, {}});
  }
  for (const auto& a : j.at("annotations")) {
    auto it = by_id.find(a.at("image_id").get<std::int64_t>());
    if (it == by_id.end()) throw FormatError("annotation refers to unknown image " + a.at("image_id").dump());
    m.records[it->second].captions.push_back(normalized(a.at("caption").get<std::string>()));
  }
  std::erase_if(m.records, [](const auto& r) { return r.captions.empty(); });
  return m;
}

DatasetManifest convert_flickr8k(const fs::path& token_file, const fs::path& image_dir, const fs::path& root,
                                 Split split, const std::optional<fs::path>& split_list) {
  std::optional<std::set<std::string>> keep;
  if (split_list) {
    auto sf = open_or_throw(*split_list);
    keep.emplace();
    std::string line;
    while (std::getline(sf, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
      if (!line.empty()) keep->insert(line);
    }
  }
  auto f = open_or_throw(token_file);
  DatasetManifest m;
  m.task = AttackTask::kCaption;
  m.split = split;
  m.root = root;
  m.note = "flickr8k " + token_file.filename().string() + "; " + kNormNote;
  std::map<std::string, std::size_t> index;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    const auto hash = line.find('#');
    if (tab == std::string::npos || hash == std::string::npos || hash > tab) {
      throw FormatError(token_file.string() + ":" + std::to_string(lineno) + ": expected name.jpg#k<TAB>caption");
    }
    const std::string name = line.substr(0, hash);
    if (keep && !keep->contains(name)) continue;
    auto [it, inserted] = index.emplace(name, m.records.size());
    if (inserted) m.records.push_back({fs::path(name).stem().string(), relative_to(image_dir / name, root), std::nullopt, {}});
    m.records[it->second].captions.push_back(normalized(line.substr(tab + 1)));
  }
  return m;
}

DatasetManifest convert_cifar10(const fs::path& batches_dir, const fs::path& root, Split split) {
  DatasetManifest m;
  m.task = AttackTask::kLabel;
  m.split = split;
  m.root = root;
  m.note = "cifar-10 binary " + to_string(split);
  if (fs::exists(batches_dir / "batches.meta.txt")) {
    auto f = open_or_throw(batches_dir / "batches.meta.txt");
    std::string line;
    while (std::getline(f, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) m.class_names.push_back(line);
    }
  }
  std::vector<fs::path> files;
  if (split == Split::kTrain) {
    for (int b = 1; b <= 5; ++b) files.push_back(batches_dir / ("data_batch_" + std::to_string(b) + ".bin"));
  } else {
    files.push_back(batches_dir / "test_batch.bin");
  }
  fs::create_directories(root / "images");
  std::vector<unsigned char> rec(1 + 3072);
  std::size_t n = 0;
  for (const auto& file : files) {
    auto f = open_or_throw(file);
    while (f.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(rec.size()))) {
      if (rec[0] > 9) throw FormatError(file.string() + ": label byte " + std::to_string(rec[0]) + " out of range");
      Image img(32, 32);
      for (int p = 0; p < 1024; ++p) {
        for (int c = 0; c < 3; ++c) img.rgb[static_cast<std::size_t>(p) * 3 + c] = rec[1 + c * 1024 + p];
      }
      char id[40];
      std::snprintf(id, sizeof id, "cifar10_%s_%05zu", to_string(split).c_str(), n++);
      const std::string rel = std::string("images/") + id + ".ppm";
      write_ppm(root / rel, img);
      m.records.push_back({id, rel, rec[0], {}});
    }
    if (f.gcount() != 0) throw FormatError(file.string() + ": truncated record");
  }
  return m;
}

DatasetManifest convert_tiny_imagenet(const fs::path& dataset_dir, const fs::path& root, Split split) {
  DatasetManifest m;
  m.task = AttackTask::kLabel;
  m.split = split;
  m.root = root;
  m.note = "tiny-imagenet " + to_string(split);
  std::vector<std::string> wnids;
  {
    auto f = open_or_throw(dataset_dir / "wnids.txt");
    std::string line;
    while (std::getline(f, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) wnids.push_back(line);
    }
  }
  std::map<std::string, std::string> words;
  if (fs::exists(dataset_dir / "words.txt")) {
    auto f = open_or_throw(dataset_dir / "words.txt");
    std::string line;
    while (std::getline(f, line)) {
      const auto t = line.find('\t');
      if (t != std::string::npos) words[line.substr(0, t)] = line.substr(t + 1);
    }
  }
  std::map<std::string, int> label_of;
  for (std::size_t i = 0; i < wnids.size(); ++i) {
    label_of[wnids[i]] = static_cast<int>(i);
    auto w = words.find(wnids[i]);
    m.class_names.push_back(w == words.end() ? wnids[i] : w->second.substr(0, w->second.find(',')));
  }
  if (split == Split::kTrain) {
    for (const auto& wnid : wnids) {
      std::vector<fs::path> imgs;
      for (const auto& e : fs::directory_iterator(dataset_dir / "train" / wnid / "images")) imgs.push_back(e.path());
      std::sort(imgs.begin(), imgs.end());
      for (const auto& p : imgs) m.records.push_back({p.stem().string(), relative_to(p, root), label_of[wnid], {}});
    }
  } else {
    auto f = open_or_throw(dataset_dir / "val" / "val_annotations.txt");
    std::string line;
    while (std::getline(f, line)) {
      auto fields = split_tabs(line);
      if (fields.size() < 2) continue;
      auto it = label_of.find(fields[1]);
      if (it == label_of.end()) throw FormatError("validation image " + fields[0] + " has unknown class " + fields[1]);
      m.records.push_back({fs::path(fields[0]).stem().string(),
                           relative_to(dataset_dir / "val" / "images" / fields[0], root), it->second, {}});
    }
  }
  return m;
}

DatasetManifest convert_caption_tsv(const fs::path& tsv, const fs::path& image_dir, const fs::path& root, Split split,
                                    bool with_label) {
  auto f = open_or_throw(tsv);
  DatasetManifest m;
  m.task = AttackTask::kCaption;
  m.split = split;
  m.root = root;
  m.note = "captions from " + tsv.filename().string() + "; " + kNormNote;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto fields = split_tabs(line);
    const std::size_t first_caption = with_label ? 2 : 1;
    if (fields.size() <= first_caption) {
      throw FormatError(tsv.string() + ":" + std::to_string(lineno) + ": expected path, " +
                        (with_label ? "label, " : "") + "caption");
    }
    ManifestRecord r{fs::path(fields[0]).stem().string(), relative_to(image_dir / fields[0], root), std::nullopt, {}};
    if (with_label) {
      try {
        r.label = std::stoi(fields[1]);
      } catch (const std::exception&) {
        throw FormatError(tsv.string() + ":" + std::to_string(lineno) + ": bad label '" + fields[1] + "'");
      }
    }
    for (std::size_t i = first_caption; i < fields.size(); ++i) r.captions.push_back(normalized(fields[i]));
    m.records.push_back(std::move(r));
  }
  return m;
}

}  // namespace featinv
