#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "duet/teacher.hpp"

using namespace duet;
using ad::Graph;
using ad::Tensor;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_vocab = 8;
  c.text_vocab = 8;
  c.width = 8;
  c.embed_dim = 4;
  c.heads = 2;
  c.image_depth = c.text_depth = c.cross_depth = 1;
  c.image_len = 4;
  c.text_len = 3;
  c.mlp_ratio = 2;
  return c;
}

template <class T>
void fill(Model<T>& m, T v) {
  for_each_parameter(m, std::function<void(const std::string&, Tensor<T>&)>(
                            [&](const std::string&, Tensor<T>& t) {
                              std::fill(t.values.begin(), t.values.end(), v);
                            }));
}

template <class T>
std::vector<T> flatten(const Model<T>& m) {
  std::vector<T> out;
  for_each_parameter(m, std::function<void(const std::string&, const Tensor<T>&)>(
                            [&](const std::string&, const Tensor<T>& t) {
                              out.insert(out.end(), t.values.begin(), t.values.end());
                            }));
  return out;
}

// Deterministic perturbation standing in for an optimizer step.
template <class T>
void nudge(Model<T>& m, int step) {
  std::size_t k = 0;
  for_each_parameter(m, std::function<void(const std::string&, Tensor<T>&)>(
                            [&](const std::string&, Tensor<T>& t) {
                              for (auto& v : t.values) {
                                v += static_cast<T>(0.01 * std::sin(double(++k) + step));
                              }
                            }));
}

TokenBatch batch(std::size_t rows, std::size_t len, std::int32_t cls, std::uint64_t seed) {
  Rng rng(seed);
  TokenBatch b{rows, len, std::vector<std::int32_t>(rows * len, cls)};
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 1; j < len; ++j) b.ids[r * len + j] = int(uniform_index(rng, 8));
  }
  return b;
}

std::vector<PairIndex> some_pairs() { return {{0, 0}, {1, 2}, {2, 1}, {3, 3}, {0, 3}}; }

}  // namespace

TEST_CASE("mode parsing and validation") {
  CHECK(teacher_mode_from_string("momentum") == TeacherMode::kMomentum);
  CHECK(std::string(to_string(TeacherMode::kPeriodic)) == "periodic");
  CHECK_THROWS_AS(teacher_mode_from_string("ema"), ConfigError);
  TeacherConfig c;
  c.momentum = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TeacherConfig{};
  c.copy_period = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TeacherConfig{TeacherMode::kOffline, 0.995, 10, ""};
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("online teacher holds no shadow") {
  auto live = Model<float>::init(tiny_config(), 1);
  auto t = make_teacher(TeacherConfig{}, live);
  CHECK_FALSE(t.has_shadow());
  CHECK(t.shadow_parameter_count() == 0);
  update_teacher(t, live, 1);
  CHECK_FALSE(t.has_shadow());
  auto m = make_teacher(TeacherConfig{TeacherMode::kMomentum, 0.9, 10, ""}, live);
  CHECK(m.shadow_parameter_count() == live.parameter_count());
}

TEST_CASE("shadow mirrors live shapes") {
  auto live = Model<float>::init(tiny_config(), 2);
  auto t = make_teacher(TeacherConfig{TeacherMode::kPeriodic, 0.995, 3, ""}, live);
  std::vector<ad::Shape> a, b;
  for_each_parameter(live, std::function<void(const std::string&, const Tensor<float>&)>(
                               [&](const std::string&, const Tensor<float>& x) {
                                 a.push_back(x.shape);
                               }));
  for_each_parameter(*t.shadow, std::function<void(const std::string&, const Tensor<float>&)>(
                                    [&](const std::string&, const Tensor<float>& x) {
                                      b.push_back(x.shape);
                                      CHECK_FALSE(x.requires_grad);
                                    }));
  CHECK(a == b);
  CHECK(flatten(*t.shadow) == flatten(live));
}

TEST_CASE("momentum arithmetic") {
  auto live = Model<double>::init(tiny_config(), 3);
  fill(live, 1.0);
  auto t = make_teacher(TeacherConfig{TeacherMode::kMomentum, 0.995, 10, ""}, live);
  fill(*t.shadow, 0.0);
  update_teacher(t, live, 1);
  for (double v : flatten(*t.shadow)) CHECK(std::abs(v - 0.005) < 1e-15);
  for (long k = 2; k <= 100; ++k) update_teacher(t, live, k);
  const double expect = 1.0 - std::pow(0.995, 100);
  CHECK(std::abs(expect - 0.39423) < 1e-5);
  for (double v : flatten(*t.shadow)) CHECK(std::abs(v - expect) < 1e-12);
}

TEST_CASE("momentum one freezes the teacher") {
  auto live = Model<float>::init(tiny_config(), 4);
  auto t = make_teacher(TeacherConfig{TeacherMode::kMomentum, 1.0, 10, ""}, live);
  const auto before = flatten(*t.shadow);
  const auto img = batch(4, 4, 8, 1), txt = batch(4, 3, 8, 2);
  const auto pairs = some_pairs();
  const auto s0 = shadow_scores(t, img, txt, pairs);
  for (int k = 1; k <= 5; ++k) {
    nudge(live, k);
    update_teacher(t, live, k);
  }
  CHECK(flatten(*t.shadow) == before);
  CHECK(shadow_scores(t, img, txt, pairs) == s0);
}

TEST_CASE("momentum zero equals period-one copy") {
  auto live = Model<float>::init(tiny_config(), 5);
  auto a = make_teacher(TeacherConfig{TeacherMode::kMomentum, 0.0, 10, ""}, live);
  auto b = make_teacher(TeacherConfig{TeacherMode::kPeriodic, 0.995, 1, ""}, live);
  for (int k = 1; k <= 6; ++k) {
    nudge(live, k);
    update_teacher(a, live, k);
    update_teacher(b, live, k);
    CHECK(flatten(*a.shadow) == flatten(live));
    CHECK(flatten(*b.shadow) == flatten(*a.shadow));
  }
}

TEST_CASE("periodic copies only on multiples of the period") {
  auto live = Model<float>::init(tiny_config(), 6);
  auto t = make_teacher(TeacherConfig{TeacherMode::kPeriodic, 0.995, 3, ""}, live);
  auto last = flatten(live);
  for (long k = 1; k <= 9; ++k) {
    nudge(live, int(k));
    update_teacher(t, live, k);
    if (k % 3 == 0) last = flatten(live);
    CHECK(flatten(*t.shadow) == last);
  }
}

TEST_CASE("period-one teacher scores equal online scores") {
  auto live = Model<float>::init(tiny_config(), 7);
  auto t = make_teacher(TeacherConfig{TeacherMode::kPeriodic, 0.995, 1, ""}, live);
  const auto img = batch(4, 4, 8, 3), txt = batch(4, 3, 8, 4);
  const auto pairs = some_pairs();
  for (int k = 1; k <= 3; ++k) {
    nudge(live, k);
    update_teacher(t, live, k);
    Graph<float> g;
    auto fi = encode_image(g, live, img);
    auto ft = encode_text(g, live, txt);
    auto logits = cross_encode_pairs(g, live, fi, ft, pairs).itm_logits.values();
    const auto s = shadow_scores(t, img, txt, pairs);
    for (std::size_t p = 0; p < pairs.size(); ++p) CHECK(s[p] == logits[2 * p]);
  }
}

TEST_CASE("no gradient reaches the shadow") {
  for (auto mode : {TeacherMode::kMomentum, TeacherMode::kPeriodic}) {
    auto live = Model<float>::init(tiny_config(), 8);
    auto t = make_teacher(TeacherConfig{mode, 0.9, 2, ""}, live);
    const auto img = batch(4, 4, 8, 5), txt = batch(4, 3, 8, 6);
    const auto pairs = some_pairs();
    Graph<float> g;
    auto fi = encode_image(g, live, img);
    auto ft = encode_text(g, live, txt);
    auto logits = cross_encode_pairs(g, live, fi, ft, pairs).itm_logits;
    const auto h = shadow_scores(t, img, txt, pairs);
    auto target = g.constant({pairs.size(), 2}, std::vector<float>(pairs.size() * 2, 0.5f));
    auto loss = ad::add(ad::soft_cross_entropy(logits, target),
                        ad::sum(ad::mul(g.constant({pairs.size()}, h),
                                        ad::pick(logits, std::vector<std::size_t>{0, 2, 4, 6, 8}))));
    g.backward(loss);
    bool live_grad = false;
    for_each_parameter(live, std::function<void(const std::string&, const Tensor<float>&)>(
                                 [&](const std::string&, const Tensor<float>& x) {
                                   live_grad = live_grad || x.has_grad();
                                 }));
    CHECK(live_grad);
    for_each_parameter(*t.shadow, std::function<void(const std::string&, const Tensor<float>&)>(
                                      [&](const std::string&, const Tensor<float>& x) {
                                        CHECK_FALSE(x.has_grad());
                                      }));
  }
}

TEST_CASE("offline teacher loads a checkpoint") {
  const auto cfg = tiny_config();
  auto trained = Model<float>::init(cfg, 9);
  const std::string path =
      (std::filesystem::temp_directory_path() / "duet_test_teacher.duet").string();
  save_model(path, trained);
  auto live = Model<float>::init(cfg, 10);
  auto t = make_teacher(TeacherConfig{TeacherMode::kOffline, 0.995, 10, path}, live);
  CHECK(flatten(*t.shadow) == flatten(trained));
  nudge(live, 1);
  update_teacher(t, live, 1);
  CHECK(flatten(*t.shadow) == flatten(trained));

  ModelConfig other = cfg;
  other.width = 16;
  CHECK_THROWS_AS(make_teacher(TeacherConfig{TeacherMode::kOffline, 0.995, 10, path},
                               Model<float>::init(other, 1)),
                  CheckpointError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(make_teacher(TeacherConfig{TeacherMode::kOffline, 0.995, 10, path}, live),
                  CheckpointError);
}
