#include <gtest/gtest.h>

#include <algorithm>

#include "owssd/fusion.hpp"
#include "owssd/io.hpp"
#include "owssd/synthetic.hpp"
#include "support.hpp"

using namespace owssd;

namespace {

const ClassCatalog kCatalog{{"cat", "dog", "car"}};

bool contains_box(const std::vector<ScoredBox>& v, const ScoredBox& b) {
  return std::find(v.begin(), v.end(), b) != v.end();
}

}  // namespace

TEST(Teacher, SelectionUsesInclusiveThreshold) {
  const std::vector<ScoredBox> dets{ScoredBox(BoundingBox(0, 0, 1, 1), 0.9, "cat"),
                                    ScoredBox(BoundingBox(0, 0, 2, 2), 0.8999, "dog"),
                                    ScoredBox(BoundingBox(0, 0, 3, 3), 1.0, "car")};
  const auto kept = select_teacher_pseudolabels(dets, kCatalog, 0.9);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0], dets[0]);
  EXPECT_EQ(kept[1], dets[2]);
  EXPECT_EQ(select_teacher_pseudolabels(dets, kCatalog, 0.0).size(), 3u);
  EXPECT_THROW(select_teacher_pseudolabels(dets, kCatalog, 1.1), InputError);
  const std::vector<ScoredBox> bad{ScoredBox(BoundingBox(0, 0, 1, 1), 0.9, "cow")};
  EXPECT_THROW(select_teacher_pseudolabels(bad, kCatalog, 0.5), InputError);
  const std::vector<ScoredBox> unlabeled{ScoredBox(BoundingBox(0, 0, 1, 1), 0.9)};
  EXPECT_THROW(select_teacher_pseudolabels(unlabeled, kCatalog, 0.5), InputError);
}

TEST(Fuse, DropsOverlappingIdLabels) {
  const std::vector<ScoredBox> id{ScoredBox(BoundingBox(0, 0, 10, 10), 0.95, "cat"),
                                  ScoredBox(BoundingBox(50, 50, 60, 60), 0.95, "dog")};
  const std::vector<ScoredBox> ood{ScoredBox(BoundingBox(1, 1, 11, 11), 0.7)};
  const auto f = fuse("img", id, ood, {});
  ASSERT_EQ(f.id_labels.size(), 1u);
  EXPECT_EQ(f.id_labels[0], id[1]);
  ASSERT_EQ(f.ood_labels.size(), 1u);
  EXPECT_EQ(f.ood_labels[0].class_label, std::string(kUnknownClass));

  FusionConfig off;
  off.filtering_enabled = false;
  EXPECT_EQ(fuse("img", id, ood, off).id_labels, id);
}

TEST(Fuse, OverlapExactlyAtThresholdIsKept) {
  // IoU of these two boxes is exactly 0.5.
  const std::vector<ScoredBox> id{ScoredBox(BoundingBox(0, 0, 4, 3), 0.95, "cat")};
  const std::vector<ScoredBox> ood{ScoredBox(BoundingBox(0, 0, 4, 6), 0.7)};
  ASSERT_DOUBLE_EQ(iou(id[0].box, ood[0].box), 0.5);
  EXPECT_EQ(fuse("img", id, ood, {}).id_labels.size(), 1u);
}

TEST(Fuse, InvariantsOnRandomLabelSets) {
  Rng rng(2024);
  for (int t = 0; t < 1000; ++t) {
    const auto labels = fixtures::random_labels(rng, kCatalog, "img");
    FusionConfig cfg;
    cfg.overlap_iou = uniform(rng, 0.1, 0.9);
    cfg.ood_nms_iou = uniform(rng, 0.3, 1.0);
    const auto on = fuse(labels.id, labels.ood, cfg);
    FusionConfig off_cfg = cfg;
    off_cfg.filtering_enabled = false;
    const auto off = fuse(labels.id, labels.ood, off_cfg);

    for (const auto& a : on.id_labels) {
      for (const auto& o : on.ood_labels) ASSERT_LE(iou(a.box, o.box), cfg.overlap_iou) << "trial " << t;
    }
    for (const auto& a : on.id_labels) ASSERT_TRUE(contains_box(off.id_labels, a));
    ASSERT_EQ(off.id_labels, labels.id.boxes);
    ASSERT_EQ(on.ood_labels, off.ood_labels);
    for (const auto& o : on.ood_labels) ASSERT_EQ(o.class_label, std::string(kUnknownClass));
    ASSERT_LE(on.ood_labels.size(), labels.ood.boxes.size());

    const auto again = fuse(ImageDetections{"img", on.id_labels}, ImageDetections{"img", on.ood_labels}, cfg);
    ASSERT_EQ(again, on) << "trial " << t;
  }
}

TEST(Fuse, ErrorCases) {
  const ImageDetections a{"a", {}}, b{"b", {}};
  EXPECT_THROW(fuse(a, b, {}), InputError);
  const ImageDetections unknown_id{"a", {ScoredBox(BoundingBox(0, 0, 1, 1), 0.9, std::string(kUnknownClass))}};
  EXPECT_THROW(fuse(unknown_id, a, {}), InputError);
  FusionConfig bad;
  bad.overlap_iou = 2.0;
  EXPECT_THROW(fuse(a, a, bad), InputError);
}

TEST(FuseDataset, FollowsImageOrderAndThresholds) {
  const std::vector<std::string> images{"u2", "u1", "u3"};
  const std::vector<ImageDetections> teacher{
      {"u1", {ScoredBox(BoundingBox(0, 0, 10, 10), 0.95, "cat"), ScoredBox(BoundingBox(20, 20, 30, 30), 0.5, "dog")}},
      {"u2", {ScoredBox(BoundingBox(0, 0, 10, 10), 0.92, "car")}}};
  const std::vector<ImageDetections> ood{{"u2", {ScoredBox(BoundingBox(0, 0, 10, 11), 0.6)}}};
  const auto out = fuse_dataset(images, teacher, ood, kCatalog, {});
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].image_id, "u2");
  EXPECT_TRUE(out[0].id_labels.empty());
  EXPECT_EQ(out[0].ood_labels.size(), 1u);
  EXPECT_EQ(out[1].id_labels.size(), 1u);
  EXPECT_TRUE(out[2].id_labels.empty() && out[2].ood_labels.empty());

  const std::vector<ImageDetections> stray{{"u9", {}}};
  EXPECT_THROW(fuse_dataset(images, stray, ood, kCatalog, {}), InputError);
  EXPECT_THROW(fuse_dataset(images, teacher, stray, kCatalog, {}), InputError);
}

TEST(TrainingSet, EmitRoundTrip) {
  fixtures::TempDir dir;
  Rng rng(7);
  std::vector<GroundTruthScene> labeled{{"L0", 100, 100, {{BoundingBox(1, 1, 20, 20), "cat"}}},
                                        {"L1", 100, 80, {}}};
  std::vector<PseudoLabelSet> fused;
  std::vector<ImageInfo> sizes;
  for (int i = 0; i < 20; ++i) {
    const std::string id = "U" + std::to_string(i);
    const auto labels = fixtures::random_labels(rng, kCatalog, id);
    fused.push_back(fuse(labels.id, labels.ood, {}));
    sizes.push_back({id, 120.0, 120.0});
  }
  emit_training_set(dir / "train.json", kCatalog, labeled, fused, sizes, {{"run", 1}});
  const auto file = load_annotations(dir / "train.json");
  EXPECT_EQ(file.classes, kCatalog.with_unknown());
  const auto back = read_training_set(file);
  EXPECT_EQ(back.id_classes, kCatalog.id_classes());
  EXPECT_EQ(back.labeled, labeled);
  EXPECT_EQ(back.fused, fused);
  EXPECT_THROW(build_training_set(kCatalog, labeled, fused, std::vector<ImageInfo>{}), InputError);
  std::vector<GroundTruthScene> dup{labeled[0], labeled[0]};
  EXPECT_THROW(build_training_set(kCatalog, dup, {}, {}), InputError);
}

TEST(TrainingSet, LabeledImageWinsOverFusedDuplicate) {
  const std::vector<GroundTruthScene> labeled{{"X", 50, 50, {{BoundingBox(1, 1, 5, 5), "dog"}}}};
  const std::vector<PseudoLabelSet> fused{{"X", {ScoredBox(BoundingBox(1, 1, 5, 5), 0.99, "cat")}, {}}};
  const auto file = build_training_set(kCatalog, labeled, fused, std::vector<ImageInfo>{{"X", 50, 50}});
  ASSERT_EQ(file.boxes.size(), 1u);
  EXPECT_EQ(file.boxes[0].class_name, "dog");
}

TEST(OracleProposals, PerfectClassifierRecoversEveryOodBox) {
  SyntheticConfig cfg;
  cfg.n_id_classes = 4;
  cfg.n_ood_classes = 2;
  cfg.samples_per_class = 20;
  cfg.seed = 3;
  const auto ds = generate_synthetic(cfg);
  const ClassCatalog catalog{ds.id_classes};
  const auto scenes = to_scenes(ds.unlabeled);
  const auto ood_classes = ood_classes_of(scenes, catalog);
  ASSERT_EQ(ood_classes.size(), 2u);
  const auto oracle = oracle_proposals(scenes, ood_classes);
  // Every oracle proposal is a GT OOD box, so a perfect classifier flags all of them.
  std::vector<ImageDetections> flagged;
  for (const auto& img : group_by_image(oracle)) {
    ImageDetections d{img.image_id, {}};
    for (auto b : img.boxes) {
      b.class_label = kUnknownClass;
      d.boxes.push_back(b);
    }
    flagged.push_back(d);
  }
  std::vector<std::string> images;
  for (const auto& s : scenes) images.push_back(s.image_id);
  const auto teacher = group_by_image(ds.teacher.records);
  const auto fused = fuse_dataset(images, teacher, flagged, catalog, {});

  std::size_t n_ood_gt = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    std::vector<BoundingBox> want, got;
    for (const auto& b : scenes[i].boxes) {
      if (ood_classes.contains(b.class_name)) want.push_back(b.box);
    }
    for (const auto& b : fused[i].ood_labels) got.push_back(b.box);
    n_ood_gt += want.size();
    auto by_corner = [](const BoundingBox& a, const BoundingBox& b) {
      return std::tuple(a.x1(), a.y1(), a.x2(), a.y2()) < std::tuple(b.x1(), b.y1(), b.x2(), b.y2());
    };
    std::sort(want.begin(), want.end(), by_corner);
    std::sort(got.begin(), got.end(), by_corner);
    ASSERT_EQ(got, want) << scenes[i].image_id;
  }
  ASSERT_EQ(n_ood_gt, 40u);
  const auto report = evaluate_detections(as_detections(fused), scenes, catalog);
  ASSERT_TRUE(report.ar_ood);
  EXPECT_DOUBLE_EQ(*report.ar_ood, 1.0);
}
