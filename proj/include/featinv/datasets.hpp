// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "featinv/image.hpp"
#include "featinv/inversion_core.hpp"

namespace featinv {

enum class Split { kTrain, kTest };

std::string to_string(Split s);
Split parse_split(std::string_view s);

struct ManifestRecord {
  std::string image_id;
  std::string path;  // relative to the manifest directory unless absolute
  std::optional<int> label;
  std::vector<std::string> captions;

  bool operator==(const ManifestRecord&) const = default;
};

struct DatasetManifest {
  AttackTask task = AttackTask::kCaption;
  Split split = Split::kTrain;
  std::string note;
  std::vector<std::string> class_names;
  std::vector<ManifestRecord> records;
  /// Directory that relative paths resolve against; not serialized.
  std::filesystem::path root;

  std::filesystem::path resolve(const ManifestRecord& r) const;
  const ManifestRecord* find(std::string_view image_id) const;
  /// Checks task requirements and id uniqueness; optionally that every
  /// image path exists.
  void validate(bool check_paths) const;
  bool operator==(const DatasetManifest& o) const {
    return task == o.task && split == o.split && note == o.note && class_names == o.class_names &&
           records == o.records;
  }
};

/// Header line: `#featinv-manifest version=1 task=.. split=.. fields=N
/// note=..` (tab separated), optionally followed by `#classes` and the class
/// names. Records: image_id, path, label or '-', captions.
DatasetManifest load_manifest(const std::filesystem::path& path, bool check_paths = true);
void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);

struct SamplingSpec {
  std::size_t target = 0;
  std::uint64_t seed = 0;
};

/// Uniform subset, stratified by label when every record has one (largest
/// remainder quotas, ties to the lower class). Records keep manifest order.
DatasetManifest sample_split(const DatasetManifest& m, const SamplingSpec& spec);

/// Shape classes, colours and backgrounds of the toy corpus.
extern const std::vector<std::string> kToyShapes;
extern const std::vector<std::string> kToyColors;
extern const std::vector<std::string> kToyBackgrounds;

struct ToyCorpusOptions {
  int image_size = 32;
  Split split = Split::kTrain;
};

/// Writes `size` PPM images of coloured shapes plus manifest.tsv into
/// `out_dir`. Labels are shape classes, balanced within one item.
DatasetManifest make_toy_corpus(std::uint64_t seed, std::size_t size, const std::filesystem::path& out_dir,
                                const ToyCorpusOptions& opts = {});

/// Renders one toy image.
Image render_toy_image(int size, int shape, int color, int background, std::uint64_t seed);

// Converters. Each returns a manifest whose paths are relative to `root`
// (normally the directory the manifest will be written to); captions are
// normalized on ingestion.

/// COCO captions JSON (images + annotations) with its image directory.
DatasetManifest convert_coco(const std::filesystem::path& annotations, const std::filesystem::path& image_dir,
                             const std::filesystem::path& root, Split split);
/// Flickr8k.token.txt ("name.jpg#k<TAB>caption"), optionally restricted to
/// the image names listed in `split_list`.
DatasetManifest convert_flickr8k(const std::filesystem::path& token_file, const std::filesystem::path& image_dir,
                                 const std::filesystem::path& root, Split split,
                                 const std::optional<std::filesystem::path>& split_list = std::nullopt);
/// CIFAR-10 binary batches; images are written as PPM under `root/images`.
DatasetManifest convert_cifar10(const std::filesystem::path& batches_dir, const std::filesystem::path& root,
                                Split split);
/// TinyImageNet layout (wnids.txt, words.txt, train/<wnid>/images, val/).
DatasetManifest convert_tiny_imagenet(const std::filesystem::path& dataset_dir, const std::filesystem::path& root,
                                      Split split);
/// Generic "path<TAB>caption[<TAB>caption...]" or "path<TAB>label<TAB>caption"
/// files, for pre-generated caption sets.
DatasetManifest convert_caption_tsv(const std::filesystem::path& tsv, const std::filesystem::path& image_dir,
                                    const std::filesystem::path& root, Split split, bool with_label);

}  // namespace featinv
