#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "gradcheck.hpp"
#include "ssda/checkpoint.hpp"
#include "ssda/model.hpp"

using namespace ssda;

namespace {

TinySegConfig small_config() {
  TinySegConfig cfg;
  cfg.base_width = 4;
  cfg.embed_dim = 6;
  cfg.num_classes = 3;
  return cfg;
}

template <class T>
bool same_values(const ParamSet<T>& a, const ParamSet<T>& b) {
  check_compatible(a, b);
  auto ib = b.begin();
  for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib) {
    auto x = ia->second.value.data();
    auto y = ib->second.value.data();
    if (!std::equal(x.begin(), x.end(), y.begin())) return false;
  }
  return true;
}

}  // namespace

TEST(Build, SameSeedIsBitIdentical) {
  const TinySegConfig cfg;
  EXPECT_TRUE(same_values(build<float>(cfg, 3), build<float>(cfg, 3)));
  EXPECT_FALSE(same_values(build<float>(cfg, 3), build<float>(cfg, 4)));
}

TEST(Build, DefaultModelIsMiniature) {
  const auto p = build<float>(TinySegConfig{}, 0);
  EXPECT_GT(p.trainable_count(), 10000u);
  EXPECT_LT(p.trainable_count(), 100000u);
}

TEST(Build, InvalidConfigsAreRejected) {
  auto cfg = TinySegConfig{};
  cfg.num_classes = 1;
  EXPECT_THROW(build<float>(cfg, 0), ConfigError);
  cfg = TinySegConfig{};
  cfg.embed_dim = 1;
  EXPECT_THROW(build<float>(cfg, 0), ConfigError);
  cfg = TinySegConfig{};
  cfg.rates = {1, 0};
  EXPECT_THROW(build<float>(cfg, 0), ConfigError);
}

TEST(Build, InferConfigRoundTrips) {
  auto cfg = small_config();
  cfg.rates = {1, 3};
  EXPECT_EQ(infer_config(build<float>(cfg, 1)).num_classes, 3);
  EXPECT_EQ(infer_config(build<float>(cfg, 1)).embed_dim, 6);
  EXPECT_EQ(infer_config(build<float>(cfg, 1)).rates, (std::vector<int>{1, 3}));
}

TEST(Forward, ShapeContract) {
  const TinySegConfig cfg;
  const auto p = build<float>(cfg, 0);
  Rng rng(1);
  auto x = gradcheck::random_tensor({1, 3, 32, 32}, rng, 0, 1);
  auto out = forward(p, cfg, Tensor<float>(x.shape(), std::vector<float>(x.data().begin(), x.data().end())),
                     Mode::eval, true);
  EXPECT_EQ(out.logits.shape(), (Shape{1, 5, 32, 32}));
  EXPECT_EQ(out.head_logits.shape(), (Shape{1, 5, 8, 8}));
  EXPECT_EQ(out.embeddings.shape(), (Shape{1, 32, 8, 8}));
}

TEST(Forward, EmbeddingsHaveUnitNorm) {
  const TinySegConfig cfg;
  const auto p = build<double>(cfg, 2);
  Rng rng(2);
  auto z = forward_proj(p, cfg, gradcheck::random_tensor({2, 3, 16, 16}, rng, 0, 1), Mode::train);
  const std::size_t d = z.dim(1), plane = z.dim(2) * z.dim(3);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < plane; ++j) {
      double ss = 0;
      for (std::size_t k = 0; k < d; ++k) ss += z[(b * d + k) * plane + j] * z[(b * d + k) * plane + j];
      EXPECT_NEAR(std::sqrt(ss), 1.0, 1e-5);
    }
}

TEST(Forward, IndivisibleSizeIsConfigError) {
  const TinySegConfig cfg;
  const auto p = build<float>(cfg, 0);
  EXPECT_THROW(forward_seg(p, cfg, Tensor<float>({1, 3, 30, 32}), Mode::eval), ConfigError);
  EXPECT_THROW(forward_seg(p, cfg, Tensor<float>({1, 1, 32, 32}), Mode::eval), ConfigError);
}

TEST(Forward, ZeroClassifierGivesUniformSoftmax) {
  const auto cfg = small_config();
  auto p = build<double>(cfg, 0);
  for (auto& v : p.at("head.classifier.weight").data()) v = 0.0;
  for (auto& v : p.at("head.classifier.bias").data()) v = 0.0;
  Rng rng(3);
  auto logits = forward_seg(p, cfg, gradcheck::random_tensor({1, 3, 8, 8}, rng, 0, 1), Mode::eval);
  for (double v : logits.data()) EXPECT_EQ(v, 0.0);
  const auto probs = softmax(logits, 1);
  for (double v : probs.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

TEST(Forward, EvalModeIsRepeatable) {
  const TinySegConfig cfg;
  const auto p = build<float>(cfg, 0);
  Tensor<float> x({2, 3, 16, 16}, 0.3f);
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>((i * 37 % 101) / 101.0);
  auto a = forward_seg(p, cfg, x, Mode::eval);
  auto b = forward_seg(p, cfg, x, Mode::eval);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(Forward, FreshTeacherMatchesStudent) {
  const TinySegConfig cfg;
  auto pair = ModelPair<float>::from_student(build<float>(cfg, 5));
  Tensor<float> x({1, 3, 16, 16}, 0.0f);
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>((i % 17) / 17.0);
  auto a = forward_seg(pair.student, cfg, x, Mode::eval);
  auto b = forward_seg(pair.teacher, cfg, x, Mode::eval);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(Forward, WholeNetworkGradCheck) {
  auto cfg = small_config();
  cfg.rates = {1, 2};
  auto p = build<double>(cfg, 9);
  Rng rng(9);
  auto x = gradcheck::random_tensor({2, 3, 8, 8}, rng, 0, 1);
  // Differentiate with respect to the input and a couple of weight tensors.
  std::vector<std::string> names{"head.classifier.weight", "backbone.stem.conv.weight"};
  std::vector<Tensor<double>> inputs{x};
  for (const auto& n : names) inputs.push_back(p.at(n));
  auto r = gradcheck::check(
      [&](const std::vector<Tensor<double>>& in) {
        auto q = p.clone(false);
        for (std::size_t i = 0; i < names.size(); ++i) q.entry(names[i]).value = in[i + 1];
        auto out = forward(q, cfg, in[0], Mode::eval, true);
        return add(sum(out.logits), sum(mul(out.embeddings, out.embeddings)));
      },
      inputs);
  EXPECT_LT(r.max_error, 1e-4) << r.where;
}

TEST(MuSchedule, Values) {
  EXPECT_DOUBLE_EQ(mu_schedule(0), 0.1);
  EXPECT_DOUBLE_EQ(mu_schedule(90), 0.91);
  EXPECT_DOUBLE_EQ(mu_schedule(1790), 0.995);
  EXPECT_DOUBLE_EQ(mu_schedule(100000), 0.995);
}

TEST(MuSchedule, NonDecreasingAndCapped) {
  double prev = 0.0;
  for (std::uint64_t s = 0; s < 5000; ++s) {
    const double mu = mu_schedule(s);
    EXPECT_GE(mu, prev);
    EXPECT_LE(mu, 0.995);
    prev = mu;
  }
}

TEST(Ema, BlendLimits) {
  ParamSet<double> student, teacher;
  student.add("w", Tensor<double>({2}, 1.0));
  teacher.add("w", Tensor<double>({2}, 0.0), false);
  ema_blend(teacher, student, 0.9);
  EXPECT_NEAR(teacher.at("w")[0], 0.1, 1e-15);
  ema_blend(teacher, student, 1.0);
  EXPECT_NEAR(teacher.at("w")[0], 0.1, 1e-15);
  ema_blend(teacher, student, 0.0);
  EXPECT_EQ(teacher.at("w")[0], 1.0);
}

TEST(Ema, UpdateUsesScheduleAndCountsSteps) {
  ParamSet<double> s;
  s.add("w", Tensor<double>({1}, 0.0));
  auto pair = ModelPair<double>::from_student(std::move(s));
  pair.student.at("w")[0] = 1.0;
  ema_update(pair);  // mu = 0.1
  EXPECT_NEAR(pair.teacher.at("w")[0], 0.9, 1e-15);
  EXPECT_EQ(pair.step, 1u);
  EXPECT_FALSE(pair.teacher.at("w").has_grad());
}

TEST(Ema, ConvexCombination) {
  Rng rng(4);
  auto pair = ModelPair<double>::from_student(build<double>(small_config(), 4));
  for (auto& [name, e] : pair.student)
    for (auto& v : e.value.data()) v += rng.uniform(-1, 1);
  auto before = pair.teacher.clone(false);
  pair.step = 50;
  ema_update(pair);
  auto it_s = pair.student.begin();
  auto it_b = before.begin();
  for (auto& [name, e] : pair.teacher) {
    for (std::size_t i = 0; i < e.value.numel(); ++i) {
      const double lo = std::min(it_b->second.value[i], it_s->second.value[i]);
      const double hi = std::max(it_b->second.value[i], it_s->second.value[i]);
      EXPECT_GE(e.value[i], lo - 1e-15);
      EXPECT_LE(e.value[i], hi + 1e-15);
    }
    ++it_s;
    ++it_b;
  }
}

TEST(Ema, MismatchedSetsAreIntegrityError) {
  ParamSet<double> a, b;
  a.add("w", Tensor<double>({2}));
  b.add("w", Tensor<double>({3}));
  EXPECT_THROW(ema_blend(a, b, 0.5), IntegrityError);
}

TEST(Teacher, NoGradientFlowsIntoTeacher) {
  const auto cfg = small_config();
  auto pair = ModelPair<double>::from_student(build<double>(cfg, 6));
  Rng rng(6);
  auto x = gradcheck::random_tensor({2, 3, 8, 8}, rng, 0, 1);
  x.set_requires_grad(false);
  auto t = forward_seg(pair.teacher, cfg, x, Mode::eval);
  auto s = forward_seg(pair.student, cfg, x, Mode::train);
  EXPECT_FALSE(t.requires_grad());
  backward(sum(mul(s, t)));
  for (const auto& [name, e] : pair.teacher) EXPECT_FALSE(e.value.has_grad()) << name;
  EXPECT_TRUE(pair.student.at("head.classifier.weight").has_grad());
}

TEST(Checkpoint, RoundTripIsExact) {
  auto pair = ModelPair<float>::from_student(build<float>(TinySegConfig{}, 7));
  pair.student.at("head.classifier.bias")[0] = 0.25f;
  pair.step = 12;
  const auto bytes = encode_checkpoint(pair);
  auto back = decode_checkpoint<float>(bytes);
  EXPECT_TRUE(same_values(pair.student, back.student));
  EXPECT_TRUE(same_values(pair.teacher, back.teacher));
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, ByteLayout) {
  ParamSet<float> s;
  s.add("w", Tensor<float>({2}, std::vector<float>{1.0f, -2.0f}));
  auto pair = ModelPair<float>::from_student(std::move(s));
  const auto bytes = encode_checkpoint(pair);
  const std::string head(bytes.begin(), bytes.begin() + 8);
  EXPECT_EQ(head, "SSDACKPT");
  auto u32 = [&](std::size_t at) {
    return bytes[at] | (bytes[at + 1] << 8) | (bytes[at + 2] << 16) | (std::uint32_t(bytes[at + 3]) << 24);
  };
  EXPECT_EQ(u32(8), 1u);   // version
  EXPECT_EQ(u32(12), 2u);  // student.w + teacher.w
  std::size_t at = 16;
  EXPECT_EQ(bytes[at] | (bytes[at + 1] << 8), 9);  // "student.w"
  EXPECT_EQ(std::string(bytes.begin() + at + 2, bytes.begin() + at + 11), "student.w");
  at += 11;
  EXPECT_EQ(bytes[at], 1);  // rank
  EXPECT_EQ(bytes[at + 1], 2);
  for (int k = 2; k < 9; ++k) EXPECT_EQ(bytes[at + k], 0);
  EXPECT_EQ(bytes[at + 9], 0);  // dtype f32
  float v;
  std::memcpy(&v, &bytes[at + 14], 4);
  EXPECT_EQ(v, -2.0f);
  // 16 header + 2 x (2 + 9 + 1 + 8 + 1 + 8)
  EXPECT_EQ(bytes.size(), 16u + 2 * 29u);
}

TEST(Checkpoint, CorruptInputIsDataError) {
  auto pair = ModelPair<float>::from_student(build<float>(small_config(), 1));
  auto bytes = encode_checkpoint(pair);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint<float>(bad_magic), DataError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint<float>(truncated), DataError);
}

TEST(Checkpoint, FileRoundTripAndHash) {
  const auto dir = std::filesystem::temp_directory_path() / "ssda_test_model_ckpt";
  std::filesystem::create_directories(dir);
  auto pair = ModelPair<float>::from_student(build<float>(small_config(), 2));
  const auto path = (dir / "m.ckpt").string();
  save_checkpoint(pair, path);
  auto back = load_checkpoint<float>(path);
  EXPECT_EQ(content_hash(read_file_bytes(path)), content_hash(encode_checkpoint(back)));
  pair.student.at("head.classifier.bias")[0] += 1.0f;
  EXPECT_NE(content_hash(encode_checkpoint(pair)), content_hash(encode_checkpoint(back)));
  std::filesystem::remove_all(dir);
}
