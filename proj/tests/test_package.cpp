#include <cstring>
#include <set>

#include "catch2/catch_amalgamated.hpp"
#include "ldet/package.hpp"

using namespace ldet;

namespace {

DetectorConfig tiny_config() {
  DetectorConfig cfg;
  cfg.backbone.image_size = 16;
  cfg.backbone.stages = {{4, 2, 2, 4}, {8, 2, 2, 4}, {16, 2, 2, 4}};
  cfg.backbone.lora_rank = {2, 2, 2};
  cfg.neck_channels = 6;
  cfg.head_hidden = 12;
  cfg.roi = 2;
  cfg.head_rank_fc1 = 3;
  cfg.head_rank_fc2 = 3;
  return cfg;
}

TensorArchive small_archive() {
  TensorArchive a;
  a.entries.push_back(matrix_to_entry("w1", TensorRole::kBase,
                                      Matrix(2, 3, {1, 2, 3, 4, 5, 6})));
  a.entries.push_back(matrix_to_entry("w2", TensorRole::kBase, Matrix(1, 1, {7})));
  return a;
}

}  // namespace

TEST_CASE("crc32 reference value") {
  const char* s = "123456789";
  REQUIRE(crc32(reinterpret_cast<const std::uint8_t*>(s), 9) == 0xCBF43926u);
  REQUIRE(crc32(nullptr, 0) == 0u);
}

TEST_CASE("archive wire layout") {
  const auto bytes = write_archive(small_archive());
  REQUIRE(bytes.size() >= 10);
  REQUIRE(std::memcmp(bytes.data(), "LDET", 4) == 0);
  REQUIRE(bytes[4] == 1);  // version LE
  REQUIRE(bytes[5] == 0);
  REQUIRE(bytes[6] == 2);  // entry count
  // first entry: name_len=2, "w1", role 0, dtype 0, ndim 2
  REQUIRE(bytes[10] == 2);
  REQUIRE(bytes[12] == 'w');
  REQUIRE(bytes[13] == '1');
  REQUIRE(bytes[14] == 0);
  REQUIRE(bytes[15] == 0);
  REQUIRE(bytes[16] == 2);
  REQUIRE(verify_archive(bytes).ok);
}

TEST_CASE("round trip preserves every field") {
  const TensorArchive a = small_archive();
  const TensorArchive b = read_archive(write_archive(a));
  REQUIRE(b.entries.size() == 2);
  REQUIRE(b.entries[0].name == "w1");
  REQUIRE(b.entries[0].role == TensorRole::kBase);
  REQUIRE(b.entries[0].dims == std::vector<std::uint32_t>({2, 3}));
  REQUIRE(b.entries[0].payload == a.entries[0].payload);
  // writing the parsed archive reproduces the bytes exactly
  REQUIRE(write_archive(b) == write_archive(a));
}

TEST_CASE("duplicate names are rejected at write time") {
  TensorArchive a = small_archive();
  a.entries.push_back(a.entries[0]);
  REQUIRE_THROWS_AS(write_archive(a), StateError);
  // same name under a different role is fine
  TensorArchive b = small_archive();
  b.entries.push_back(matrix_to_entry("w1", TensorRole::kLoraA, Matrix(1, 3)));
  REQUIRE_NOTHROW(write_archive(b));
}

TEST_CASE("every single-bit corruption is detected") {
  const auto bytes = write_archive(small_archive());
  Rng rng(1);
  std::size_t entry_failures = 0;
  for (int trial = 0; trial < 300; ++trial) {
    auto copy = bytes;
    const std::size_t byte = rng.next_below(copy.size());
    copy[byte] ^= static_cast<std::uint8_t>(1u << rng.next_below(8));
    const VerifyReport rep = verify_archive(copy);
    REQUIRE_FALSE(rep.ok);
    REQUIRE_FALSE(rep.failure.empty());
    if (rep.failure.find("entry 'w") != std::string::npos) ++entry_failures;
    REQUIRE_THROWS_AS(read_archive(copy), IntegrityError);
  }
  REQUIRE(entry_failures > 0);  // payload corruption names the failing entry
}

TEST_CASE("truncation and trailing bytes are detected") {
  const auto bytes = write_archive(small_archive());
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{9},
                          bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> trunc(bytes.begin(), bytes.begin() + cut);
    REQUIRE_FALSE(verify_archive(trunc).ok);
  }
  auto extra = bytes;
  extra.push_back(0);
  const VerifyReport rep = verify_archive(extra);
  REQUIRE_FALSE(rep.ok);
  REQUIRE(rep.failure.find("trailing") != std::string::npos);
}

TEST_CASE("file save is atomic and loadable") {
  const std::string path = "pkg_test_archive.ldet";
  save_archive_file(small_archive(), path);
  const TensorArchive a = load_archive_file(path);
  REQUIRE(a.entries.size() == 2);
  REQUIRE_THROWS_AS(load_archive_file("no_such_file.ldet"), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("model checkpoint round trip is byte-stable") {
  DetectorConfig cfg = tiny_config();
  Rng rng(2);
  DetectorModel m1 = make_detector(cfg, rng);
  const auto bytes1 = write_archive(model_to_archive(m1));

  Rng rng2(3);  // different init, then overwritten by the checkpoint
  DetectorModel m2 = make_detector(cfg, rng2);
  archive_to_model(m2, read_archive(bytes1));
  const auto bytes2 = write_archive(model_to_archive(m2));
  REQUIRE(bytes1 == bytes2);

  // missing tensor detection
  TensorArchive partial = model_to_archive(m1);
  partial.entries.pop_back();
  REQUIRE_THROWS_AS(archive_to_model(m2, partial), StateError);
}

TEST_CASE("packages contain exactly the trainable set") {
  DetectorConfig cfg = tiny_config();
  Rng rng(4);
  DetectorModel model = make_detector(cfg, rng);

  REQUIRE(build_package(model, FinetunePolicy{PolicyName::kPretrained}).entries.empty());

  const FinetunePolicy policy{PolicyName::kLoraDet};
  const TensorArchive pkg = build_package(model, policy);
  std::set<std::string> expected_lora, expected_replace;
  for_each_param(model, [&](const std::string& name, Matrix*, ParamKind kind) {
    if (!policy.trainable(name, kind)) return;
    if (kind == ParamKind::kLoraA || kind == ParamKind::kLoraB)
      expected_lora.insert(name.substr(0, name.rfind('.')) + ".weight");
    else
      expected_replace.insert(name);
  });
  std::set<std::string> got_lora, got_replace;
  for (const auto& e : pkg.entries) {
    if (e.role == TensorRole::kLoraA || e.role == TensorRole::kLoraB)
      got_lora.insert(e.name);
    else if (e.role == TensorRole::kFullReplace)
      got_replace.insert(e.name);
    else
      FAIL("unexpected role in package");
  }
  REQUIRE(got_lora == expected_lora);
  REQUIRE(got_replace == expected_replace);
  // each adapted base has both halves
  for (const auto& n : got_lora) {
    REQUIRE(pkg.find(n, TensorRole::kLoraA) != nullptr);
    REQUIRE(pkg.find(n, TensorRole::kLoraB) != nullptr);
  }
}

TEST_CASE("package size tracks the trainable ratio") {
  DetectorConfig cfg = tiny_config();
  Rng rng(5);
  DetectorModel model = make_detector(cfg, rng);
  const FinetunePolicy policy{PolicyName::kLoraDetHybrid};
  const auto counts = apply_policy(model, policy).counts;
  const TensorArchive pkg = build_package(model, policy);
  const TensorArchive full = model_to_archive(model);
  const double byte_ratio = static_cast<double>(payload_byte_size(pkg)) /
                            static_cast<double>(payload_byte_size(full));
  REQUIRE(byte_ratio == Catch::Approx(counts.ratio).epsilon(0.01));
}

TEST_CASE("single lora pair payload matches hand arithmetic") {
  // one rank-48 adapter over a 768x768 weight: 2 * 48 * 768 floats
  TensorArchive pkg;
  pkg.entries.push_back(matrix_to_entry("w", TensorRole::kLoraB, Matrix(768, 48)));
  pkg.entries.push_back(matrix_to_entry("w", TensorRole::kLoraA, Matrix(48, 768)));
  REQUIRE(payload_byte_size(pkg) == 294912);
}

TEST_CASE("merged layers cannot be packaged as adapters") {
  DetectorConfig cfg = tiny_config();
  Rng rng(6);
  DetectorModel model = make_detector(cfg, rng);
  model.head_fc1.merge();
  REQUIRE_THROWS_AS(build_package(model, FinetunePolicy{PolicyName::kLoraDet}),
                    StateError);
  model.head_fc1.unmerge();
  REQUIRE_NOTHROW(build_package(model, FinetunePolicy{PolicyName::kLoraDet}));
}

TEST_CASE("apply merges lora deltas and replaces dense tensors") {
  DetectorConfig cfg = tiny_config();
  Rng rng(7);
  DetectorModel model = make_detector(cfg, rng);
  const TensorArchive base = model_to_archive(model);

  // simulate fine-tuning: perturb adapters and terminal heads
  Rng perturb(8);
  for_each_lora(model, [&](const std::string&, LoraLinear& l) {
    l.b() = gaussian_matrix(l.b().rows(), l.b().cols(), 0.05, perturb);
  });
  for (double& v : model.cls_w.vec()) v += perturb.gaussian(0.05);
  const FinetunePolicy policy{PolicyName::kLoraDet};
  const TensorArchive pkg = build_package(model, policy);
  const TensorArchive merged = apply_package(base, pkg);

  // expected: base weight + B A for adapted tensors, replacement for cls
  for_each_lora(model, [&](const std::string& name, LoraLinear& l) {
    const Matrix want = add(l.w(), matmul(l.b(), l.a()));
    const Matrix got = entry_to_matrix(*merged.find(name, TensorRole::kBase));
    REQUIRE(max_abs_diff(want, got) < 1e-5);  // f32 quantization
  });
  const Matrix got_cls = entry_to_matrix(*merged.find("head.cls.weight", TensorRole::kBase));
  REQUIRE(max_abs_diff(got_cls, model.cls_w) < 1e-6);
  // untouched tensors are bit-identical
  const TensorEntry* before = base.find("rpn.conv.weight", TensorRole::kBase);
  const TensorEntry* after = merged.find("rpn.conv.weight", TensorRole::kBase);
  REQUIRE(before->payload == after->payload);
}

TEST_CASE("apply validates package structure") {
  TensorArchive base = small_archive();
  TensorArchive pkg;
  pkg.entries.push_back(matrix_to_entry("w1", TensorRole::kLoraB, Matrix(2, 1)));
  REQUIRE_THROWS_AS(apply_package(base, pkg), StateError);  // missing lora_A
  pkg.entries.push_back(matrix_to_entry("w1", TensorRole::kLoraA, Matrix(1, 3)));
  REQUIRE_NOTHROW(apply_package(base, pkg));
  TensorArchive bad;
  bad.entries.push_back(matrix_to_entry("missing", TensorRole::kFullReplace, Matrix(1, 1)));
  REQUIRE_THROWS_AS(apply_package(base, bad), StateError);
  TensorArchive badshape;
  badshape.entries.push_back(matrix_to_entry("w2", TensorRole::kFullReplace, Matrix(2, 2)));
  REQUIRE_THROWS_AS(apply_package(base, badshape), ShapeError);
}

TEST_CASE("full-replace packages are idempotent under re-application") {
  DetectorConfig cfg = tiny_config();
  Rng rng(9);
  DetectorModel model = make_detector(cfg, rng);
  const TensorArchive base = model_to_archive(model);
  Rng perturb(10);
  for (double& v : model.cls_w.vec()) v += perturb.gaussian(0.1);
  const TensorArchive pkg =
      build_package(model, FinetunePolicy{PolicyName::kFullFinetune});
  const TensorArchive once = apply_package(base, pkg);
  const TensorArchive twice = apply_package(once, pkg);
  REQUIRE(write_archive(once) == write_archive(twice));
}

TEST_CASE("uplink arithmetic") {
  REQUIRE(uplink_time_seconds(0, {1e6}) == 0.0);
  REQUIRE(uplink_time_seconds(5520000 * 4, {1e6}) == Catch::Approx(176.64));
  REQUIRE(uplink_time_seconds(44760000 * 4, {1e6}) == Catch::Approx(1432.32));
  REQUIRE(uplink_time_seconds(1000, {8000.0, 2.0}) == Catch::Approx(2.0));
  REQUIRE_THROWS_AS(uplink_time_seconds(1, {0.0}), ArgumentError);
  REQUIRE_THROWS_AS(uplink_time_seconds(1, {1e6, 0.5}), ArgumentError);
}

TEST_CASE("dataset archive round trip") {
  const SynthOptions opt{16, 1, 2};
  const auto data = synth_dataset(11, Domain::kD2, 3, opt);
  const TensorArchive a = dataset_to_archive(data);
  const auto back = archive_to_dataset(read_archive(write_archive(a)));
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    REQUIRE(max_abs_diff(back[i].image, data[i].image) < 1e-6);
    REQUIRE(back[i].boxes.size() == data[i].boxes.size());
    REQUIRE(back[i].labels == data[i].labels);
    REQUIRE(back[i].boxes[0].cx ==
            Catch::Approx(data[i].boxes[0].cx).margin(1e-4));
  }
  // empty scene uses the sentinel row
  SceneSample empty;
  empty.image = Matrix(4, 4);
  const auto rt = archive_to_dataset(dataset_to_archive({empty}));
  REQUIRE(rt.size() == 1);
  REQUIRE(rt[0].boxes.empty());
}
