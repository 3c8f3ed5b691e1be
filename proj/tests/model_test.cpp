#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "fens/cost.hpp"
#include "fens/errors.hpp"
#include "fens/model.hpp"
#include "fens/model_spec.hpp"
#include "fens/training.hpp"
#include "support.hpp"

using namespace fens;

namespace {

const InputShape kGlyph{1, 32, 32};

ModelSpec micro(Family f) { return make_spec(f, Preset::kMicro, 1.0, kGlyph, 28); }

nlohmann::json fixture(const std::string& name) {
  std::ifstream in(std::string(FENS_FIXTURE_DIR) + "/" + name);
  REQUIRE(in.good());
  return nlohmann::json::parse(in);
}

std::set<std::string> names_of(const std::vector<ParamTensor*>& ps, bool trainable_only) {
  std::set<std::string> out;
  for (const auto* p : ps) {
    if (!trainable_only || p->trainable) out.insert(p->name);
  }
  return out;
}

// Spec with a single block followed by a linear head.
ModelSpec single_block(BlockSpec b, InputShape input) {
  ModelSpec s;
  s.input = input;
  s.classes = 2;
  s.blocks = {b};
  s.boundary = 1;
  link_channels(s);
  return s;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("micro presets match the independent cost fixtures") {
  const auto expect = fixture("micro_costs.json");
  for (auto f : kAllFamilies) {
    CAPTURE(to_string(f));
    const auto cost = count_cost(micro(f));
    CHECK(cost.params == expect.at(to_string(f)).at("params").get<std::int64_t>());
    CHECK(cost.macs == expect.at(to_string(f)).at("macs").get<std::int64_t>());
    CHECK(cost.flops == 2 * cost.macs);
    CHECK(cost.convention == "flops=2*macs");
  }
}

TEST_CASE("micro presets stay within the desk-scale budget") {
  for (auto f : kAllFamilies) {
    const auto cost = count_cost(micro(f));
    CHECK(cost.params < 150'000);
    CHECK(cost.macs < 20'000'000);
  }
}

TEST_CASE("full presets are within 15 percent of the reference parameter counts") {
  const std::map<Family, double> reference{{Family::kMobile, 2.5e6}, {Family::kMnas, 2.2e6},
                                           {Family::kShuffle, 1.4e6}, {Family::kSqueeze, 1.2e6}};
  for (auto [f, ref] : reference) {
    CAPTURE(to_string(f));
    const auto cost = count_cost(preset_spec(f, Preset::kFull));
    CHECK(std::abs(static_cast<double>(cost.params) - ref) <= 0.15 * ref);
  }
}

TEST_CASE("parameter and MAC formula examples") {
  BlockSpec conv;
  conv.kind = BlockKind::kPlainConv;
  conv.out_channels = 8;
  conv.bias = true;
  conv.batchnorm = false;
  const auto c = count_cost(single_block(conv, kGlyph));
  CHECK(c.layers.front().params == 80);
  CHECK(c.layers.front().macs == 73'728);

  BlockSpec dws;
  dws.kind = BlockKind::kDepthwiseSeparable;
  dws.out_channels = 16;
  dws.batchnorm = false;
  const auto d = count_cost(single_block(dws, {8, 10, 10}));
  CHECK(d.layers[0].params + d.layers[1].params == 200);

  for (std::int64_t ch : {3, 8, 17}) {
    BlockSpec pw;
    pw.kind = BlockKind::kPlainConv;
    pw.kernel = 1;
    pw.out_channels = ch;
    pw.batchnorm = false;
    const auto p = count_cost(single_block(pw, {ch, 7, 5}));
    CHECK(p.layers.front().macs == ch * ch * 7 * 5);
  }
}

TEST_CASE("count_params equals the learned scalars a checkpoint stores") {
  for (auto f : kAllFamilies) {
    Model m(micro(f), 3);
    std::int64_t learned = 0, running = 0;
    for (auto* p : m.parameters()) learned += p->value().size();
    for (auto& b : m.buffers()) running += b.tensor->size();
    const auto cost = count_params(m.spec());
    CHECK(cost.params == learned);
    CHECK(cost.bn_running == running);
    CHECK(m.parameter_count() == learned);
  }
}

TEST_CASE("doubling the width doubles depthwise and quadruples pointwise weights") {
  for (auto f : {Family::kMobile, Family::kMnas, Family::kShuffle}) {
    CAPTURE(to_string(f));
    const auto base = count_cost(make_spec(f, Preset::kMicro, 1.0, kGlyph, 28));
    const auto wide = count_cost(make_spec(f, Preset::kMicro, 2.0, kGlyph, 28));
    REQUIRE(base.layers.size() == wide.layers.size());
    int depthwise = 0, pointwise = 0;
    for (std::size_t i = 1; i + 1 < base.layers.size(); ++i) {
      const auto& a = base.layers[i];
      const auto& b = wide.layers[i];
      CAPTURE(a.name);
      if (a.name.find(".se.") != std::string::npos) continue;
      if (a.name.ends_with(".dw")) {
        CHECK(b.params == 2 * a.params);
        ++depthwise;
      } else {
        // Weights scale by 4, batchnorm gamma/beta by 2.
        CHECK(b.params == 4 * (a.params - a.bn_running) + 2 * a.bn_running);
        ++pointwise;
      }
    }
    CHECK(depthwise > 0);
    CHECK(pointwise > 0);
  }
}

TEST_CASE("every preset produces finite logits of the right shape") {
  std::mt19937_64 rng(4);
  for (auto f : kAllFamilies) {
    CAPTURE(to_string(f));
    Model m(micro(f), 1);
    const auto logits = forward_logits(m, test::random_tensor({3, 1, 32, 32}, rng, 0, 1));
    CHECK(logits.shape() == Shape{3, 28});
    CHECK(logits.all_finite());

    const auto full = preset_spec(f, Preset::kFull);
    Model big(full, 1);
    const auto in = full.input;
    const auto out = forward_logits(big, test::random_tensor({1, in.channels, in.height, in.width}, rng, 0, 1));
    CHECK(out.shape() == Shape{1, full.classes});
    CHECK(out.all_finite());
  }
}

TEST_CASE("squeeze micro maps one glyph to 28 logits") {
  Model m(micro(Family::kSqueeze), 0);
  CHECK(forward_logits(m, Tensor({1, 1, 32, 32}, Real(0.5))).shape() == Shape{1, 28});
}

TEST_CASE("shuffle units have even output channels") {
  for (auto preset : {Preset::kMicro, Preset::kFull}) {
    for (const auto& b : preset_spec(Family::kShuffle, preset).blocks) {
      if (b.kind == BlockKind::kShuffleUnit) CHECK(b.out_channels % 2 == 0);
    }
  }
}

TEST_CASE("forward edge cases") {
  Model m(micro(Family::kMobile), 5);
  const auto empty = forward_logits(m, Tensor({0, 1, 32, 32}));
  CHECK(empty.shape() == Shape{0, 28});

  std::mt19937_64 rng(6);
  const auto one = test::random_tensor({1, 1, 32, 32}, rng, 0, 1);
  Tensor twice({2, 1, 32, 32});
  for (std::int64_t i = 0; i < 1024; ++i) twice[i] = twice[1024 + i] = one[i];
  const auto dup = forward_logits(m, twice);
  for (std::int64_t j = 0; j < 28; ++j) CHECK(dup[j] == dup[28 + j]);

  const auto zeros = forward_logits(m, Tensor({4, 1, 32, 32}));
  for (std::int64_t i = 1; i < 4; ++i) {
    for (std::int64_t j = 0; j < 28; ++j) CHECK(zeros[i * 28 + j] == zeros[j]);
  }
  CHECK_THROWS_AS(forward_logits(m, Tensor({1, 3, 32, 32})), DimensionError);
}

TEST_CASE("same seed builds identical models") {
  Model a(micro(Family::kShuffle), 42), b(micro(Family::kShuffle), 42), c(micro(Family::kShuffle), 43);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->value() == pb[i]->value());
    differs = differs || !(pa[i]->value() == pc[i]->value());
  }
  CHECK(differs);
}

TEST_CASE("trainable masks per strategy") {
  for (auto f : kAllFamilies) {
    Model m(micro(f), 0);
    trainable_mask(m, Strategy::kHft);
    CHECK(names_of(m.parameters(), true) == names_of(m.classifier_parameters(), false));
    trainable_mask(m, Strategy::kFft);
    CHECK(names_of(m.parameters(), true) == names_of(m.parameters(), false));
  }
}

TEST_CASE("hft head is under 10 percent of full presets at 28 classes") {
  for (auto f : kAllFamilies) {
    auto spec = preset_spec(f, Preset::kFull);
    spec.classes = 28;
    Model m(spec, 0);
    std::int64_t head = 0;
    for (auto* p : m.classifier_parameters()) head += p->value().size();
    CHECK(static_cast<double>(head) < 0.1 * static_cast<double>(m.parameter_count()));
  }
}

TEST_CASE("spec json round trip and digest") {
  for (auto f : kAllFamilies) {
    for (auto p : {Preset::kMicro, Preset::kFull}) {
      const auto spec = preset_spec(f, p);
      const auto back = spec_from_json(spec_to_json(spec));
      CHECK(spec_to_json(back) == spec_to_json(spec));
      CHECK(spec_digest(back) == spec_digest(spec));
    }
  }
  CHECK(spec_digest(micro(Family::kMobile)) != spec_digest(micro(Family::kMnas)));
  CHECK(preset_names().size() == 8);
}

TEST_CASE("validation rejects broken specs") {
  auto spec = micro(Family::kMobile);
  spec.boundary = 0;
  CHECK_THROWS_AS(validate(spec), ConfigError);
  auto chain = micro(Family::kMnas);
  chain.blocks[2].in_channels = 5;
  CHECK_THROWS_AS(validate(chain), DimensionError);
  CHECK_THROWS_AS(make_spec(Family::kSqueeze, Preset::kMicro, 1.0, {1, 2, 2}, 28), GeometryError);
  CHECK_THROWS_AS(parse_family("resnet"), ConfigError);
  CHECK(parse_family("squeeze") == Family::kSqueeze);
  CHECK(parse_strategy("hft") == Strategy::kHft);
}

}  // TEST_SUITE
