#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <set>
#include <numeric>
#include <string>
#include <vector>

#include "latentflow/data/idx.hpp"
#include "latentflow/data/subset.hpp"
#include "latentflow/data/synthetic.hpp"

namespace lf = latentflow;
namespace fs = std::filesystem;
using lf::Tensor;

namespace {

fs::path temp_dir() {
  auto p = fs::temp_directory_path() / ("latentflow_data_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()));
  fs::create_directories(p);
  return p;
}

lf::Dataset<double> balanced(std::size_t n, std::size_t k, std::uint64_t seed) {
  lf::Rng rng(seed);
  lf::Dataset<double> d{Tensor<double>({n, 3}), std::vector<std::size_t>(n), k, lf::Split::train, "test"};
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = i % k;
    for (auto& v : d.x.row(i)) v = rng.uniform();
  }
  return d;
}

}  // namespace

// ---------------- synthetic ----------------

TEST(Synthetic, DeterministicBytes) {
  lf::SyntheticSpec s{.kind = lf::SyntheticKind::gaussian_mixture, .classes = 2, .train_size = 100, .seed = 7};
  auto a = lf::make_synthetic<double>(s, lf::Split::train);
  auto b = lf::make_synthetic<double>(s, lf::Split::train);
  ASSERT_EQ(a.x.size(), 200u);
  EXPECT_EQ(0, std::memcmp(a.x.storage().data(), b.x.storage().data(), a.x.size() * sizeof(double)));
  EXPECT_EQ(a.labels, b.labels);
  auto t = lf::make_synthetic<double>(s, lf::Split::test);
  EXPECT_NE(a.x, t.x.slice_rows(0, 100));
}

TEST(Synthetic, AllKindsValidAndBalanced) {
  for (auto kind : {lf::SyntheticKind::gaussian_mixture, lf::SyntheticKind::two_arcs, lf::SyntheticKind::rings}) {
    lf::SyntheticSpec s{.kind = kind, .classes = kind == lf::SyntheticKind::two_arcs ? 2u : 3u, .noise = 0.1,
                        .train_size = 300, .test_size = 60, .seed = 3};
    for (auto split : {lf::Split::train, lf::Split::test}) {
      auto d = lf::make_synthetic<float>(s, split);
      EXPECT_NO_THROW(d.validate());
      std::vector<std::size_t> counts(s.classes);
      for (auto y : d.labels) ++counts[y];
      for (auto c : counts) EXPECT_EQ(c, d.size() / s.classes);
    }
  }
  EXPECT_THROW(lf::make_synthetic<double>({.kind = lf::SyntheticKind::two_arcs, .classes = 3}, lf::Split::train),
               lf::ConfigError);
}

TEST(Synthetic, MixtureMeansNearComponentCentres) {
  lf::SyntheticSpec s{.classes = 4, .noise = 0.05, .radius = 0.25, .train_size = 4000, .seed = 1};
  auto d = lf::make_synthetic<double>(s, lf::Split::train);
  std::vector<double> mx(4), my(4);
  for (std::size_t i = 0; i < d.size(); ++i) {
    mx[d.labels[i]] += d.x(i, 0) / 1000;
    my[d.labels[i]] += d.x(i, 1) / 1000;
  }
  const double cx[4] = {0.75, 0.5, 0.25, 0.5}, cy[4] = {0.5, 0.75, 0.5, 0.25};
  for (int c = 0; c < 4; ++c) {
    EXPECT_NEAR(mx[c], cx[c], 0.01);
    EXPECT_NEAR(my[c], cy[c], 0.01);
  }
}

// ---------------- IDX ----------------

TEST(Idx, HeaderArithmetic) {
  const auto dir = temp_dir();
  std::vector<unsigned char> pixels(10 * 28 * 28), labels(10);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<unsigned char>(i % 256);
  for (std::size_t i = 0; i < 10; ++i) labels[i] = static_cast<unsigned char>(9 - i);
  lf::write_idx((dir / "img").string(), lf::idx_images_magic, {10, 28, 28}, pixels);
  lf::write_idx((dir / "lab").string(), lf::idx_labels_magic, {10}, labels);
  // The first bytes on disk are 00 00 08 03.
  auto raw = lf::detail::read_file((dir / "img").string());
  EXPECT_EQ(raw[0], 0);
  EXPECT_EQ(raw[1], 0);
  EXPECT_EQ(raw[2], 8);
  EXPECT_EQ(raw[3], 3);
  auto d = lf::load_idx<double>((dir / "img").string(), (dir / "lab").string(), 10, lf::Split::test);
  EXPECT_EQ(d.size(), 10u);
  EXPECT_EQ(d.dim(), 784u);
  EXPECT_EQ(d.labels[0], 9u);
  EXPECT_DOUBLE_EQ(d.x(0, 255), 1.0);
  EXPECT_DOUBLE_EQ(d.x(1, 0), static_cast<double>(784 % 256) / 255);
  EXPECT_NO_THROW(d.validate());
  fs::remove_all(dir);
}

TEST(Idx, Errors) {
  const auto dir = temp_dir();
  const auto img = (dir / "img").string(), lab = (dir / "lab").string();
  lf::write_idx(img, lf::idx_images_magic, {2, 2, 2}, std::vector<unsigned char>(8, 0));
  lf::write_idx(lab, lf::idx_labels_magic, {2}, {3, 10});
  try {
    lf::load_idx<double>(img, lab, 10, lf::Split::train);
    FAIL() << "expected range error";
  } catch (const lf::DataError& e) {
    EXPECT_NE(std::string(e.what()).find("label 10 at index 1"), std::string::npos) << e.what();
  }
  lf::write_idx(lab, 0x00000802, {2}, {0, 1});
  try {
    lf::load_idx<double>(img, lab, 10, lf::Split::train);
    FAIL() << "expected bad magic";
  } catch (const lf::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("0x00000802 at offset 0"), std::string::npos) << e.what();
  }
  lf::write_idx(img, lf::idx_images_magic, {2, 2, 2}, std::vector<unsigned char>(5, 0));
  lf::write_idx(lab, lf::idx_labels_magic, {2}, {0, 1});
  try {
    lf::load_idx<double>(img, lab, 10, lf::Split::train);
    FAIL() << "expected truncation error";
  } catch (const lf::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("expected 24 bytes, got 21"), std::string::npos) << e.what();
  }
  lf::write_idx(img, lf::idx_images_magic, {3, 2, 2}, std::vector<unsigned char>(12, 0));
  EXPECT_THROW(lf::load_idx<double>(img, lab, 10, lf::Split::train), lf::DataError);
  EXPECT_THROW(lf::load_idx<double>((dir / "missing").string(), lab, 10, lf::Split::train), lf::DataError);
  fs::remove_all(dir);
}

// ---------------- subsets ----------------

TEST(Subset, FractionOneIsIdentity) {
  auto d = balanced(57, 4, 1);
  auto s = lf::subset(d, 1.0, 9);
  EXPECT_EQ(s.x, d.x);
  EXPECT_EQ(s.labels, d.labels);
}

TEST(Subset, StratificationArithmetic) {
  auto d = balanced(1000, 10, 2);
  auto idx = lf::subset_indices(d, 0.05, 3);
  EXPECT_EQ(idx.size(), 50u);
  std::vector<std::size_t> counts(10);
  for (auto i : idx) ++counts[d.labels[i]];
  for (auto c : counts) EXPECT_EQ(c, 5u);
  EXPECT_EQ(idx, lf::subset_indices(d, 0.05, 3));
  EXPECT_NE(idx, lf::subset_indices(d, 0.05, 4));
}

TEST(Subset, UnevenClassesStayWithinOneOfProportional) {
  lf::Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 2 + rng.below(6);
    std::vector<std::size_t> sizes(k);
    for (auto& s : sizes) s = 20 + rng.below(200);
    const double f = rng.uniform(0.05, 1.0);
    const auto counts = lf::stratified_counts(sizes, f);
    const std::size_t n = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
    EXPECT_EQ(std::accumulate(counts.begin(), counts.end(), std::size_t{0}),
              static_cast<std::size_t>(std::ceil(f * n - 1e-9)));
    for (std::size_t c = 0; c < k; ++c) EXPECT_LE(std::abs(counts[c] - f * sizes[c]), 1.0);
  }
}

TEST(Subset, TooFewPerClassThrows) {
  auto d = balanced(40, 4, 6);
  EXPECT_THROW(lf::subset(d, 0.05, 1), lf::ConfigError);
  EXPECT_THROW(lf::subset(d, 0.0, 1), lf::ConfigError);
  EXPECT_THROW(lf::subset(d, 1.5, 1), lf::ConfigError);
}

TEST(Subset, CommutesWithSourceShuffling) {
  auto d = balanced(400, 4, 7);
  std::vector<std::size_t> perm(400);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  lf::Rng rng(8);
  rng.shuffle(perm.begin(), perm.end());
  auto shuffled = d.select(perm);
  auto rows = [](const lf::Dataset<double>& s) {
    std::multiset<std::pair<std::vector<double>, std::size_t>> out;
    for (std::size_t i = 0; i < s.size(); ++i)
      out.emplace(std::vector<double>(s.x.row(i).begin(), s.x.row(i).end()), s.labels[i]);
    return out;
  };
  EXPECT_EQ(rows(lf::subset(d, 0.1, 11)), rows(lf::subset(shuffled, 0.1, 11)));
}
